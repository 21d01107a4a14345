#include "promptmoe/pipeline.hpp"

#include "promptmoe/error.hpp"

namespace pmoe {

std::unique_ptr<Model> make_model(const RunConfig& cfg) {
    cfg.validate();
    return std::make_unique<Model>(cfg.model, cfg.train.seed);
}

std::vector<TrainSample> encode_dataset(const Model& model, const std::vector<DatasetItem>& items) {
    std::vector<TrainSample> out;
    out.reserve(items.size());
    const auto& ec = model.config().encoder;
    for (const auto& it : items) {
        TrainSample s;
        s.features = model.encode(it.image);
        s.mask = it.mask.empty() ? Tensor({ec.image_height, ec.image_width}) : it.mask;
        s.label = it.label;
        s.cls = it.cls;
        out.push_back(std::move(s));
    }
    return out;
}

EvalOutput evaluate_model(Model& model, const std::vector<TrainSample>& samples, std::size_t pro_thresholds,
                          const std::filesystem::path* maps_dir, const std::vector<std::string>* names) {
    if (maps_dir && (!names || names->size() != samples.size()))
        throw InternalError("map export needs one name per sample");
    EvalOutput out;
    std::vector<ScoredImage> scored;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const TrainSample& s = samples[i];
        Prediction p = predict(model, s.features);
        if (maps_dir) write_anomaly_map_image(p.map, *maps_dir / ((*names)[i] + ".png"));
        scored.push_back({s.cls, s.label, p.score, p.map, s.mask});
        out.predictions.push_back(std::move(p));
    }
    out.report = evaluate_predictions(scored, pro_thresholds);
    return out;
}

std::vector<RoutingDecision> collect_decisions(Model& model, const std::vector<TrainSample>& samples) {
    std::vector<RoutingDecision> out;
    for (const auto& s : samples) {
        Prediction p = predict(model, s.features);
        out.insert(out.end(), p.decisions.begin(), p.decisions.end());
    }
    return out;
}

void save_model(const std::filesystem::path& path, Model& model, const RunConfig& cfg, std::size_t step) {
    save_checkpoint(path, model.params(), config_to_json(cfg), cfg.train.seed, step);
}

std::unique_ptr<Model> load_model(const std::filesystem::path& path, RunConfig* cfg_out) {
    const Checkpoint ck = load_checkpoint(path);
    RunConfig cfg = config_from_json(ck.config);
    auto model = make_model(cfg);
    apply_checkpoint(ck, model->params());
    if (cfg_out) *cfg_out = cfg;
    return model;
}

ModelConfig micro_model_config() {
    ModelConfig c;
    EncoderConfig& e = c.encoder;
    e.image_height = e.image_width = 16;
    e.patch_size = 8;
    e.depth = 2;
    e.vision_dim = 12;
    e.token_dim = e.joint_dim = 8;
    e.layer_taps = {1, 2};
    e.vision_heads = 3;
    e.text_heads = 2;
    e.text_depth = 1;
    VgmopConfig& v = c.vgmop;
    v.num_experts = 4;
    v.top_k = 2;
    v.num_queries = 2;
    v.normal_len = v.abnormal_len = v.context_len = 2;
    v.heads = 2;
    v.router_hidden = 8;
    return c;
}

GradcheckReport model_gradcheck(const ModelConfig& cfg, const GradcheckOptions& opts) {
    Model model(cfg, opts.seed);
    const std::size_t h = cfg.encoder.image_height, w = cfg.encoder.image_width;
    Rng rng(3);
    std::vector<VisionFeatures> features;
    std::vector<Tensor> masks;
    for (int i = 0; i < 2; ++i) {
        features.push_back(model.encode(rng.uniform_tensor({h, w, 3}, 0.0, 1.0)));
        Tensor m({h, w});
        if (i == 1)
            for (std::size_t y = h / 4; y < 5 * h / 8; ++y)
                for (std::size_t x = 3 * w / 16; x < 9 * w / 16; ++x) m.at(y, x) = 1.0;
        masks.push_back(std::move(m));
    }
    const std::vector<Sample> batch{{&features[0], &masks[0], 0.0}, {&features[1], &masks[1], 1.0}};
    return finite_diff_gradcheck([&] { return model.batch_loss(batch).loss.total; }, model.params(), opts.epsilon,
                                 opts.corrupt);
}

}  // namespace pmoe
