#include "promptmoe/trainer.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include "promptmoe/error.hpp"
#include "promptmoe/optim.hpp"

namespace pmoe {

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (warmup_epochs > epochs) throw ConfigError("warmup_epochs must not exceed epochs");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0, 1)");
}

double lr_schedule(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg) {
    const std::size_t warm = cfg.warmup_epochs * steps_per_epoch;
    if (warm == 0 || step >= warm) return cfg.lr;
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
}

TrainResult train(Model& model, const std::vector<TrainSample>& data, const TrainConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    TrainResult result;
    if (cfg.epochs == 0) return result;

    bool has_pos = false, has_neg = false;
    for (const auto& s : data) (s.label ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw DatasetError("training data must contain both normal and anomalous images");
    const std::size_t steps_per_epoch = data.size() / cfg.batch_size;
    if (steps_per_epoch == 0)
        throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds the " + std::to_string(data.size()) +
                          " training images");

    ParamRefs params = model.params();
    Adam adam(params, cfg.lr, cfg.beta1, cfg.beta2);
    if (hooks.loss_csv) write_loss_header(*hooks.loss_csv);

    std::vector<std::size_t> order(data.size());
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg.seed, "epoch:" + std::to_string(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

        for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
            std::vector<Sample> batch;
            for (std::size_t i = 0; i < cfg.batch_size; ++i) {
                const TrainSample& s = data[order[b * cfg.batch_size + i]];
                batch.push_back({&s.features, &s.mask, static_cast<double>(s.label)});
            }
            const double lr = lr_schedule(step, steps_per_epoch, cfg);
            try {
                zero_grads(params);
                BatchResult br = model.batch_loss(batch);
                ad::backward(br.loss.total);
                adam.set_lr(lr);
                adam.step();
                // Checkpoints store binary32; keeping the live values on that grid
                // makes save -> load exact.
                for (ParamGroup* p : params) round_to_float32(p->value);
                TrainLogRow row{step, lr, br.loss.values()};
                if (hooks.loss_csv) write_loss_row(*hooks.loss_csv, step, lr, row.loss);
                result.log.push_back(row);
            } catch (const EvaluationError&) {
                if (hooks.on_abort) hooks.on_abort(step);
                throw;
            }
        }
        if (cfg.eval_every && hooks.on_eval && (epoch + 1) % cfg.eval_every == 0) hooks.on_eval(epoch + 1);
    }
    result.steps = step;
    return result;
}

namespace {

constexpr char kMagic[8] = {'P', 'M', 'O', 'E', 'C', 'K', 'P', 'T'};

void put_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamRefs& params, const nlohmann::json& config,
                     std::uint64_t seed, std::size_t step) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["config"] = config;
    header["seed"] = seed;
    header["step"] = step;
    header["params"] = nlohmann::json::array();
    for (const ParamGroup* p : params) {
        if (p->frozen) throw InternalError("frozen parameter " + p->name + " must not be checkpointed");
        header["params"].push_back({{"name", p->name}, {"shape", p->value.shape()}});
    }
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof kMagic);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const ParamGroup* p : params) {
        for (double v : p->value.values()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int i = 0; i < 4; ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
        }
    }
    if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw FormatError(path.string() + " is not a checkpoint");
    const std::uint64_t hlen = get_u64(bytes.data() + 8);
    if (hlen > bytes.size() - 16) throw FormatError("checkpoint header truncated");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
    }

    Checkpoint ck;
    try {
        ck.format_version = header.at("format_version").get<std::uint32_t>();
        if (ck.format_version != kCheckpointVersion)
            throw FormatError("checkpoint format version " + std::to_string(ck.format_version) + " is not supported");
        ck.config = header.at("config");
        ck.seed = header.at("seed").get<std::uint64_t>();
        ck.step = header.at("step").get<std::size_t>();
        std::size_t offset = 16 + hlen;
        for (const auto& p : header.at("params")) {
            const auto shape = p.at("shape").get<Shape>();
            const std::size_t n = shape_numel(shape);
            if (bytes.size() - offset < 4 * n) throw FormatError("checkpoint blob for " + p.at("name").get<std::string>() + " is truncated");
            Tensor t(shape);
            for (std::size_t i = 0; i < n; ++i) {
                const unsigned char* b = bytes.data() + offset + 4 * i;
                const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
                t[i] = std::bit_cast<float>(bits);
            }
            offset += 4 * n;
            ck.names.push_back(p.at("name").get<std::string>());
            ck.values.push_back(std::move(t));
        }
        if (offset != bytes.size()) throw FormatError("checkpoint has trailing bytes after the last blob");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header does not match the schema: ") + e.what());
    }
    return ck;
}

void apply_checkpoint(const Checkpoint& ckpt, const ParamRefs& params) {
    if (ckpt.names.size() != params.size())
        throw FormatError("checkpoint holds " + std::to_string(ckpt.names.size()) + " parameters, model expects " +
                          std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (ckpt.names[i] != params[i]->name || ckpt.values[i].shape() != params[i]->value.shape())
            throw FormatError("checkpoint parameter " + ckpt.names[i] + " " + shape_string(ckpt.values[i].shape()) +
                              " does not match model parameter " + params[i]->name + " " +
                              shape_string(params[i]->value.shape()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = ckpt.values[i];
}

}  // namespace pmoe
