#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "promptmoe/config.hpp"
#include "promptmoe/data.hpp"
#include "promptmoe/metrics.hpp"
#include "promptmoe/model.hpp"
#include "promptmoe/optim.hpp"
#include "promptmoe/trainer.hpp"

namespace pmoe {

// Model with learnable parts seeded from cfg.train.seed.
std::unique_ptr<Model> make_model(const RunConfig& cfg);

// Runs the frozen vision encoder once per image.
std::vector<TrainSample> encode_dataset(const Model& model, const std::vector<DatasetItem>& items);

struct EvalOutput {
    EvalReport report;
    std::vector<Prediction> predictions;
};

// Scores every sample; with `maps_dir` set, writes <maps_dir>/<image stem>.png
// per image using `names`.
EvalOutput evaluate_model(Model& model, const std::vector<TrainSample>& samples, std::size_t pro_thresholds,
                          const std::filesystem::path* maps_dir = nullptr,
                          const std::vector<std::string>* names = nullptr);

// Routing decisions of every sample (2·|I| per image, layer-major).
std::vector<RoutingDecision> collect_decisions(Model& model, const std::vector<TrainSample>& samples);

// Writes the checkpoint for a trained model and its run config.
void save_model(const std::filesystem::path& path, Model& model, const RunConfig& cfg, std::size_t step);
// Rebuilds the model from the config snapshot in a checkpoint.
std::unique_ptr<Model> load_model(const std::filesystem::path& path, RunConfig* cfg_out = nullptr);

// Smallest configuration exercising every parameter kind: 16×16 images,
// D=8, D_x=12, E=4, k=2, |I|=2.
ModelConfig micro_model_config();

struct GradcheckOptions {
    std::uint64_t seed = 0;
    double epsilon = 1e-5;
    std::function<void(ParamRefs&)> corrupt;  // test hook, see finite_diff_gradcheck
};

// Central-difference check of L_total over every trainable group on a fixed
// two-image batch (one normal, one with a rectangular defect mask).
GradcheckReport model_gradcheck(const ModelConfig& cfg, const GradcheckOptions& opts = {});

}  // namespace pmoe
