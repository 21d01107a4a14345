#include "promptmoe/model.hpp"

#include "promptmoe/error.hpp"

namespace pmoe {

void ModelConfig::validate() const {
    encoder.validate();
    vgmop.validate(encoder);
    scoring.validate();
    loss.validate();
}

namespace {

const EncoderConfig& checked(const ModelConfig& cfg) {
    cfg.validate();
    return cfg.encoder;
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t param_seed)
    : cfg_(cfg), vision_(checked(cfg)), text_(cfg.encoder), projection_(cfg.encoder, param_seed) {
    vgmop_ = std::make_unique<Vgmop>(cfg_.vgmop, cfg_.encoder, text_.word_embedding("object"), param_seed);
}

ParamRefs Model::params() {
    ParamRefs refs = vgmop_->params();
    for (ParamGroup* p : projection_.params()) refs.push_back(p);
    return refs;
}

ParamRefs Model::frozen_params() {
    ParamRefs refs = vision_.params();
    for (ParamGroup* p : text_.params()) refs.push_back(p);
    return refs;
}

ImageForward Model::forward(const VisionFeatures& features) {
    const auto& vc = cfg_.vgmop;
    const bool mixture = vc.mode == PromptMode::mixture;
    const ad::Var cls = ad::leaf(vgmop_->cls_token());
    const ad::Var ctx = ad::leaf(vgmop_->context());

    ImageForward out;
    std::map<std::size_t, ad::Var> patches;
    for (std::size_t l : vgmop_->layers()) {
        auto fit = features.per_layer.find(l);
        if (fit == features.per_layer.end()) throw InputError("features lack tapped layer " + std::to_string(l));
        StateAggregates agg;
        // One leaf per distinct pool, so a shared pool receives both branches' gradient.
        std::map<const ExpertPool*, ad::Var> pool_vars;
        for (PromptState s : kStates) {
            ExpertPool& pool = vgmop_->pool(l, s);
            auto [pit, fresh] = pool_vars.try_emplace(&pool);
            if (fresh) pit->second = ad::leaf(pool.experts);
            const std::size_t len = vc.state_len(s);
            ad::Var seg;
            if (mixture) {
                const StateContext sc = extract_state_context(fit->second, bind(vgmop_->attention(l, s)), vc.heads);
                RoutedVars rv = route(sc.routing, bind(vgmop_->router(l, s)), vc.top_k, l, s);
                seg = aggregate_experts(rv.gates, rv.decision.selected, pit->second, pool, len);
                out.routes.push_back(std::move(rv));
            } else {
                seg = ad::slice_rows(ad::reshape(pit->second, {pool.expert_len, pool.dim}), 0, len);
            }
            (s == PromptState::normal ? agg.normal : agg.abnormal) = seg;
        }
        const std::size_t ll[] = {l};
        auto prompts = assemble_prompts({{l, agg}}, cls, ctx, ll);
        const LayerPrompts& lp = prompts.at(l);
        out.text.emplace(l, StatePair{text_.encode(lp.normal), text_.encode(lp.abnormal)});
        patches.emplace(l, project_patches(features, l, ad::leaf(projection_.weight(l))));
    }

    const auto& ec = cfg_.encoder;
    out.anomaly = anomaly_map(patches, out.text, features.grid_h, features.grid_w, ec.image_height, ec.image_width,
                              cfg_.scoring);
    const std::size_t final_layer = ec.final_tap();
    const ad::Var& final_rows = patches.at(final_layer);
    const ad::Var global = ad::slice_rows(final_rows, final_rows.shape()[0] - 1, 1);
    out.p_abnormal = global_abnormal_prob(global, out.text.at(final_layer), cfg_.scoring);
    out.score = image_score(out.anomaly.map, out.p_abnormal);
    return out;
}

BatchResult Model::batch_loss(const std::vector<Sample>& batch) {
    if (batch.empty()) throw ParameterError("empty batch");
    const auto& lc = cfg_.loss;
    BatchResult res;
    std::vector<ad::Var> bce, dice, focal;
    for (const Sample& s : batch) {
        ImageForward f = forward(*s.features);
        bce.push_back(bce_score_loss(f.score, s.label));
        dice.push_back(dice_loss(f.anomaly.map, *s.mask, lc.dice_eps));
        focal.push_back(focal_loss(f.anomaly.map, *s.mask, lc.focal_gamma, lc.focal_alpha));
        res.images.push_back(std::move(f));
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    auto batch_mean = [inv](const std::vector<ad::Var>& v) {
        ad::Var t = v.front();
        for (std::size_t i = 1; i < v.size(); ++i) t = ad::add(t, v[i]);
        return ad::scale(t, inv);
    };

    ad::Var balance = ad::constant(Tensor::scalar(0.0));
    ad::Var decouple = ad::constant(Tensor::scalar(0.0));
    if (cfg_.vgmop.mode == PromptMode::mixture) {
        // Routing probabilities stacked per (layer, state) into [B × E].
        std::vector<ad::Var> probs;
        const std::size_t per_image = res.images.front().routes.size();
        const std::size_t e = cfg_.vgmop.num_experts;
        for (std::size_t r = 0; r < per_image; ++r) {
            std::vector<ad::Var> rows;
            for (const auto& img : res.images) rows.push_back(ad::reshape(img.routes[r].probs, {1, e}));
            probs.push_back(ad::concat_rows(rows));
        }
        balance = balance_loss(probs, lc.alpha);

        ad::Var dec;
        for (ExpertPool* pool : vgmop_->unique_pools()) {
            // A shared pool is decoupled once, over its full stored length.
            const ad::Var term = decouple_loss({ad::leaf(pool->experts)}, pool->expert_len, lc.beta);
            dec = dec.defined() ? ad::add(dec, term) : term;
        }
        decouple = dec;
    }
    res.loss = total_loss(batch_mean(bce), batch_mean(dice), batch_mean(focal), balance, decouple);
    return res;
}

Prediction predict(Model& model, const VisionFeatures& features) {
    ad::NoGradGuard no_grad;
    ImageForward f = model.forward(features);
    Prediction p;
    p.raw_map = f.anomaly.map.value();
    p.map = gaussian_smooth(p.raw_map, model.config().scoring.gaussian_sigma);
    p.score = f.score.item();
    for (const auto& r : f.routes) p.decisions.push_back(r.decision);
    return p;
}

}  // namespace pmoe
