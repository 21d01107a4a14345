#include "promptmoe/vgmop.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

#include "promptmoe/error.hpp"
#include "promptmoe/layers.hpp"

namespace pmoe {

const char* state_name(PromptState s) { return s == PromptState::normal ? "normal" : "abnormal"; }

void VgmopConfig::validate(const EncoderConfig& enc) const {
    if (num_experts == 0) throw ConfigError("num_experts must be positive");
    if (top_k == 0 || top_k > num_experts)
        throw ConfigError("top_k must lie in 1..num_experts (got " + std::to_string(top_k) + ")");
    if (num_queries == 0 || normal_len == 0 || abnormal_len == 0)
        throw ConfigError("query count and prompt segment lengths must be positive");
    if (heads == 0 || enc.token_dim % heads != 0) throw ConfigError("token_dim must be divisible by prompt heads");
    if (router_hidden == 0) throw ConfigError("router_hidden must be positive");
    if (abnormal_prompt_len() > enc.max_context)
        throw ConfigError("abnormal prompt length " + std::to_string(abnormal_prompt_len()) +
                          " exceeds the text context limit " + std::to_string(enc.max_context));
}

Tensor ExpertPool::expert(std::size_t j, std::size_t len) const {
    if (j >= num_experts) throw InternalError("expert index " + std::to_string(j) + " out of range");
    if (len > expert_len) throw InternalError("expert slice longer than the stored expert");
    Tensor out({len, dim});
    const double* src = experts.value.data() + j * expert_len * dim;
    std::copy(src, src + len * dim, out.data());
    return out;
}

CrossAttentionVars bind(CrossAttentionParams& p) {
    return {ad::leaf(p.queries), ad::leaf(p.w_k), ad::leaf(p.w_v), ad::leaf(p.w_o)};
}

RouterVars bind(RouterParams& p) { return {ad::leaf(p.w1), ad::leaf(p.b1), ad::leaf(p.w2), ad::leaf(p.b2)}; }

StateContext extract_state_context(const Tensor& layer_features, const CrossAttentionVars& attn, std::size_t heads) {
    if (layer_features.rank() != 2 || layer_features.cols() != attn.w_k.value().rows())
        throw DimensionError("layer features " + shape_string(layer_features.shape()) + " do not match W_K " +
                             shape_string(attn.w_k.shape()));
    const ad::Var f = ad::constant(layer_features);
    const ad::Var k = ad::matmul(f, attn.w_k);
    const ad::Var v = ad::matmul(f, attn.w_v);
    const ad::Var o = ad::matmul(ad::multi_head_attention(attn.queries, k, v, heads), attn.w_o);
    return {o, ad::mean_rows(o)};
}

RoutedVars route(const ad::Var& routing_vector, const RouterVars& router, std::size_t k, std::size_t layer,
                 PromptState state) {
    const std::size_t d = routing_vector.value().size();
    const ad::Var r = ad::reshape(routing_vector, {1, d});
    const ad::Var h = ad::relu(ad::add_row(ad::matmul(r, router.w1), router.b1));
    const ad::Var z = ad::add_row(ad::matmul(h, router.w2), router.b2);
    const std::size_t e = z.value().cols();
    const ad::Var logits = ad::reshape(z, {e});
    if (k == 0 || k > e) throw ParameterError("top_k must lie in 1..E");
    ad::TopKVar top = ad::topk_select(logits, k);

    RoutedVars out;
    out.logits = logits;
    out.probs = ad::softmax_rows(logits);
    out.gates = top.gates;
    out.decision.layer = layer;
    out.decision.state = state;
    out.decision.logits = logits.value();
    out.decision.probs = out.probs.value();
    out.decision.selected = std::move(top.indices);
    out.decision.gates = out.gates.value();
    return out;
}

ad::Var aggregate_experts(const ad::Var& gates, const std::vector<std::size_t>& selected, const ad::Var& pool,
                          const ExpertPool& layout, std::size_t len) {
    if (gates.value().size() != selected.size()) throw InternalError("gate count does not match selection");
    if (len > layout.expert_len) throw InternalError("segment longer than the stored expert");
    const ad::Var flat = ad::reshape(pool, {layout.num_experts * layout.expert_len, layout.dim});
    std::vector<ad::Var> parts;
    parts.reserve(selected.size());
    for (std::size_t j : selected) {
        if (j >= layout.num_experts) throw InternalError("expert index " + std::to_string(j) + " out of range");
        parts.push_back(ad::slice_rows(flat, j * layout.expert_len, len));
    }
    return ad::weighted_sum(gates, parts);
}

Tensor aggregate_experts(const RoutingDecision& decision, const ExpertPool& pool, std::size_t len) {
    if (!pool.shared && decision.state != pool.state)
        throw ParameterError(std::string("decision for the ") + state_name(decision.state) + " state applied to the " +
                             state_name(pool.state) + " pool");
    if (decision.gates.size() != decision.selected.size()) throw InternalError("gate count does not match selection");
    Tensor out({len, pool.dim});
    for (std::size_t i = 0; i < decision.selected.size(); ++i) {
        const Tensor e = pool.expert(decision.selected[i], len);
        for (std::size_t t = 0; t < out.size(); ++t) out[t] += decision.gates[i] * e[t];
    }
    return out;
}

std::map<std::size_t, LayerPrompts> assemble_prompts(const std::map<std::size_t, StateAggregates>& aggregates,
                                                     const ad::Var& cls_token, const ad::Var& context,
                                                     std::span<const std::size_t> layers) {
    std::map<std::size_t, LayerPrompts> out;
    for (std::size_t l : layers) {
        auto it = aggregates.find(l);
        if (it == aggregates.end()) throw InternalError("no aggregated prompts for layer " + std::to_string(l));
        const auto& [sn, sa] = it->second;
        out.emplace(l, LayerPrompts{ad::concat_rows({sn, cls_token, context}),
                                    ad::concat_rows({sn, sa, cls_token, context})});
    }
    return out;
}

namespace {

ParamGroup trainable(std::string name, Tensor value) {
    round_to_float32(value);
    return ParamGroup(std::move(name), std::move(value));
}

Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::size_t slot(PromptState s) { return static_cast<std::size_t>(s); }

}  // namespace

Vgmop::Vgmop(const VgmopConfig& cfg, const EncoderConfig& enc, const Tensor& cls_init, std::uint64_t seed)
    : cfg_(cfg), layers_(enc.layer_taps) {
    cfg_.validate(enc);
    const std::size_t d = enc.token_dim, dx = enc.vision_dim;
    if (cls_init.size() != d) throw DimensionError("cls initialiser must have token_dim entries");
    const bool mixture = cfg_.mode == PromptMode::mixture;

    for (std::size_t l : layers_) {
        Rng rng(derive_seed(seed, "vgmop.layer" + std::to_string(l)));
        const std::string pre = "layer" + std::to_string(l) + ".";
        LayerParams lp;
        if (mixture) {
            const std::size_t n_attn = cfg_.shared_cross_attention ? 1 : 2;
            for (std::size_t i = 0; i < n_attn; ++i) {
                const std::string ap = pre + (n_attn == 1 ? std::string("shared") : state_name(kStates[i])) + ".attn.";
                lp.attention.push_back(CrossAttentionParams{
                    trainable(ap + "queries", rng.normal_tensor({cfg_.num_queries, d}, 1.0)),
                    trainable(ap + "w_k", rng.normal_tensor({dx, d}, 1.0 / std::sqrt(static_cast<double>(dx)))),
                    trainable(ap + "w_v", rng.normal_tensor({dx, d}, 1.0 / std::sqrt(static_cast<double>(dx)))),
                    trainable(ap + "w_o", identity(d))});
            }
            for (PromptState s : kStates) {
                const std::string rp = pre + state_name(s) + ".router.";
                const std::size_t h = cfg_.router_hidden;
                lp.routers.push_back(RouterParams{
                    trainable(rp + "w1", rng.normal_tensor({d, h}, 1.0 / std::sqrt(static_cast<double>(d)))),
                    trainable(rp + "b1", Tensor({h})),
                    trainable(rp + "w2", rng.normal_tensor({h, cfg_.num_experts}, 1.0 / std::sqrt(static_cast<double>(h)))),
                    trainable(rp + "b2", Tensor({cfg_.num_experts}))});
            }
        }
        const std::size_t e = mixture ? cfg_.num_experts : 1;
        const char* kind = mixture ? "experts" : "static";
        if (cfg_.shared_pool) {
            const std::size_t m = std::max(cfg_.normal_len, cfg_.abnormal_len);
            lp.pools.push_back(ExpertPool{PromptState::normal, true, e, m, d,
                                          trainable(pre + "shared." + kind, rng.normal_tensor({e, m, d}, 0.02))});
        } else {
            for (PromptState s : kStates) {
                const std::size_t m = cfg_.state_len(s);
                lp.pools.push_back(ExpertPool{s, false, e, m, d,
                                              trainable(pre + state_name(s) + "." + kind, rng.normal_tensor({e, m, d}, 0.02))});
            }
        }
        per_layer_.emplace(l, std::move(lp));
    }
    Rng rng(derive_seed(seed, "vgmop.context"));
    context_ = trainable("prompt.context", rng.normal_tensor({cfg_.context_len, d}, 0.02));
    cls_ = trainable("prompt.cls", cls_init.reshaped({1, d}));
}

Vgmop::LayerParams& Vgmop::at(std::size_t layer) {
    auto it = per_layer_.find(layer);
    if (it == per_layer_.end()) throw ParameterError("layer " + std::to_string(layer) + " is not a tapped layer");
    return it->second;
}

const Vgmop::LayerParams& Vgmop::at(std::size_t layer) const { return const_cast<Vgmop*>(this)->at(layer); }

CrossAttentionParams& Vgmop::attention(std::size_t layer, PromptState s) {
    auto& lp = at(layer);
    if (lp.attention.empty()) throw InternalError("static prompts have no cross-attention");
    return lp.attention.size() == 1 ? lp.attention[0] : lp.attention[slot(s)];
}

RouterParams& Vgmop::router(std::size_t layer, PromptState s) {
    auto& lp = at(layer);
    if (lp.routers.empty()) throw InternalError("static prompts have no router");
    return lp.routers[slot(s)];
}

ExpertPool& Vgmop::pool(std::size_t layer, PromptState s) {
    auto& lp = at(layer);
    return lp.pools.size() == 1 ? lp.pools[0] : lp.pools[slot(s)];
}

const ExpertPool& Vgmop::pool(std::size_t layer, PromptState s) const {
    return const_cast<Vgmop*>(this)->pool(layer, s);
}

std::vector<const ExpertPool*> Vgmop::unique_pools() const {
    std::vector<const ExpertPool*> out;
    for (const auto& [l, lp] : per_layer_)
        for (const auto& p : lp.pools) out.push_back(&p);
    return out;
}

std::vector<ExpertPool*> Vgmop::unique_pools() {
    std::vector<ExpertPool*> out;
    for (auto& [l, lp] : per_layer_)
        for (auto& p : lp.pools) out.push_back(&p);
    return out;
}

ParamRefs Vgmop::params() {
    ParamRefs refs;
    for (auto& [l, lp] : per_layer_) {
        for (auto& a : lp.attention)
            for (ParamGroup* p : {&a.queries, &a.w_k, &a.w_v, &a.w_o}) refs.push_back(p);
        for (auto& r : lp.routers)
            for (ParamGroup* p : {&r.w1, &r.b1, &r.w2, &r.b2}) refs.push_back(p);
        for (auto& p : lp.pools) refs.push_back(&p.experts);
    }
    refs.push_back(&context_);
    refs.push_back(&cls_);
    return refs;
}

std::size_t ActivationStats::total_selections(std::size_t layer, PromptState s) const {
    auto it = entries.find({layer, s});
    if (it == entries.end()) return 0;
    std::size_t n = 0;
    for (std::size_t c : it->second.selections) n += c;
    return n;
}

ActivationStats expert_activation_stats(std::span<const RoutingDecision> decisions) {
    ActivationStats stats;
    for (const auto& d : decisions) {
        auto& e = stats.entries[{d.layer, d.state}];
        const std::size_t n = d.logits.size();
        if (e.selections.empty()) {
            e.selections.assign(n, 0);
            e.gate_sum.assign(n, 0.0);
        } else if (e.selections.size() != n) {
            throw InternalError("inconsistent expert count across routing decisions");
        }
        ++e.instances;
        for (std::size_t i = 0; i < d.selected.size(); ++i) {
            ++e.selections[d.selected[i]];
            e.gate_sum[d.selected[i]] += d.gates[i];
        }
    }
    return stats;
}

void write_activation_csv(std::ostream& os, const ActivationStats& stats) {
    os << "layer,state,expert,selections,instances,frequency,mean_gate\n" << std::setprecision(10);
    for (const auto& [key, e] : stats.entries) {
        for (std::size_t j = 0; j < e.selections.size(); ++j) {
            const double freq = static_cast<double>(e.selections[j]) / static_cast<double>(e.instances);
            const double gate = e.selections[j] ? e.gate_sum[j] / static_cast<double>(e.selections[j]) : 0.0;
            os << key.first << ',' << state_name(key.second) << ',' << j << ',' << e.selections[j] << ','
               << e.instances << ',' << freq << ',' << gate << '\n';
        }
    }
}

void write_routing_csv(std::ostream& os, std::span<const RoutingDecision> decisions, std::size_t per_instance) {
    if (per_instance == 0) throw InternalError("per_instance must be positive");
    os << "instance,layer,state,selected,gates\n" << std::setprecision(10);
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        const auto& d = decisions[i];
        os << i / per_instance << ',' << d.layer << ',' << state_name(d.state) << ',';
        for (std::size_t j = 0; j < d.selected.size(); ++j) os << (j ? ";" : "") << d.selected[j];
        os << ',';
        for (std::size_t j = 0; j < d.gates.size(); ++j) os << (j ? ";" : "") << d.gates[j];
        os << '\n';
    }
}

void export_expert_embeddings(std::ostream& os, const Vgmop& vgmop) {
    const auto& cfg = vgmop.config();
    const std::size_t d = vgmop.pool(vgmop.layers().front(), PromptState::normal).dim;
    os << "layer,state,expert";
    for (std::size_t i = 0; i < d; ++i) os << ",e" << i;
    os << '\n' << std::setprecision(10);
    for (std::size_t l : vgmop.layers()) {
        for (PromptState s : kStates) {
            const ExpertPool& pool = vgmop.pool(l, s);
            const std::size_t len = cfg.state_len(s);
            for (std::size_t j = 0; j < pool.num_experts; ++j) {
                const Tensor e = pool.expert(j, len);
                os << l << ',' << state_name(s) << ',' << j;
                for (std::size_t c = 0; c < d; ++c) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < len; ++t) acc += e.at(t, c);
                    os << ',' << acc / static_cast<double>(len);
                }
                os << '\n';
            }
        }
    }
}

}  // namespace pmoe
