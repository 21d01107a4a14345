#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmoe/model.hpp"

namespace pmoe {

struct TrainConfig {
    std::size_t epochs = 15;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::size_t warmup_epochs = 3;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;  // epochs between evaluation callbacks; 0 = never
    double beta1 = 0.6;
    double beta2 = 0.999;

    void validate() const;
};

// Per-step linear warmup from lr/W to lr over W = warmup_epochs·steps_per_epoch
// steps, constant afterwards.
double lr_schedule(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg);

struct TrainSample {
    VisionFeatures features;
    Tensor mask;  // [h × w], zeros for normal images
    int label = 0;
    std::string cls;
};

struct TrainLogRow {
    std::size_t step = 0;
    double lr = 0;
    LossBreakdown loss;
};

struct TrainHooks {
    std::ostream* loss_csv = nullptr;
    // Called after each epoch listed by eval_every (1-based epoch index).
    std::function<void(std::size_t epoch)> on_eval;
    // Saves the last good parameters when a step produces a non-finite loss.
    std::function<void(std::size_t step)> on_abort;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    std::size_t steps = 0;
};

// Drops the incomplete final batch of every epoch; batch order is a seeded
// permutation per epoch.
TrainResult train(Model& model, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::size_t step = 0;
    std::vector<std::string> names;
    std::vector<Tensor> values;
    std::uint32_t format_version = kCheckpointVersion;
};

// Layout: "PMOECKPT", u64 LE header length, JSON header, then LE float32
// blobs in header order.
void save_checkpoint(const std::filesystem::path& path, const ParamRefs& params, const nlohmann::json& config,
                     std::uint64_t seed, std::size_t step);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies checkpoint values into params; names and shapes must match exactly.
void apply_checkpoint(const Checkpoint& ckpt, const ParamRefs& params);

}  // namespace pmoe
