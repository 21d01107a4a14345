#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "promptmoe/autodiff.hpp"
#include "promptmoe/encoders.hpp"
#include "promptmoe/param.hpp"

namespace pmoe {

enum class PromptState : std::size_t { normal = 0, abnormal = 1 };
inline constexpr PromptState kStates[] = {PromptState::normal, PromptState::abnormal};
const char* state_name(PromptState s);

// `mixture` is the visually-guided expert mixture; `static_prompt` replaces
// each state segment by a single directly-learned prompt (no routing).
enum class PromptMode { mixture, static_prompt };

struct VgmopConfig {
    std::size_t num_experts = 8;    // E
    std::size_t top_k = 4;          // k
    std::size_t num_queries = 8;    // N_q
    std::size_t normal_len = 5;     // M_n
    std::size_t abnormal_len = 6;   // M_a
    std::size_t context_len = 8;    // M_q
    std::size_t heads = 4;          // 8 at paper scale
    std::size_t router_hidden = 32; // 256 at paper scale
    bool shared_pool = false;
    bool shared_cross_attention = false;
    PromptMode mode = PromptMode::mixture;

    void validate(const EncoderConfig& enc) const;
    std::size_t state_len(PromptState s) const { return s == PromptState::normal ? normal_len : abnormal_len; }
    std::size_t normal_prompt_len() const { return normal_len + 1 + context_len; }
    std::size_t abnormal_prompt_len() const { return normal_len + abnormal_len + 1 + context_len; }
};

struct CrossAttentionParams {
    ParamGroup queries;  // [N_q × D]
    ParamGroup w_k;      // [D_x × D]
    ParamGroup w_v;      // [D_x × D]
    ParamGroup w_o;      // [D × D]
};

// Linear-ReLU-Linear, D -> hidden -> E.
struct RouterParams {
    ParamGroup w1, b1, w2, b2;
};

// E experts of `expert_len` tokens each, stored as [E × M × D]. A shared pool
// uses M = max(M_n, M_a) and each state reads the leading M_state tokens.
struct ExpertPool {
    PromptState state = PromptState::normal;
    bool shared = false;
    std::size_t num_experts = 0;
    std::size_t expert_len = 0;
    std::size_t dim = 0;
    ParamGroup experts;

    // Expert j restricted to its first `len` tokens: [len × D].
    Tensor expert(std::size_t j, std::size_t len) const;
};

struct CrossAttentionVars {
    ad::Var queries, w_k, w_v, w_o;
};

struct RouterVars {
    ad::Var w1, b1, w2, b2;
};

CrossAttentionVars bind(CrossAttentionParams& p);
RouterVars bind(RouterParams& p);

struct StateContext {
    ad::Var context;  // O: [N_q × D]
    ad::Var routing;  // r = mean over the N_q rows of O: [D]
};

// Cross-attention of the learnable queries over [patches; global] features.
StateContext extract_state_context(const Tensor& layer_features, const CrossAttentionVars& attn, std::size_t heads);

struct RoutingDecision {
    std::size_t layer = 0;
    PromptState state = PromptState::normal;
    Tensor logits;                  // z: [E]
    Tensor probs;                   // softmax(z): [E]
    std::vector<std::size_t> selected;
    Tensor gates;                   // w: [k]
};

struct RoutedVars {
    RoutingDecision decision;
    ad::Var logits;
    ad::Var probs;
    ad::Var gates;
};

RoutedVars route(const ad::Var& routing_vector, const RouterVars& router, std::size_t k, std::size_t layer,
                 PromptState state);

// S_agg = Σᵢ wᵢ · s_{top,i}, differentiable in both the gates and the pool.
ad::Var aggregate_experts(const ad::Var& gates, const std::vector<std::size_t>& selected, const ad::Var& pool,
                          const ExpertPool& layout, std::size_t len);
// Plain evaluation for a recorded decision against a pool.
Tensor aggregate_experts(const RoutingDecision& decision, const ExpertPool& pool, std::size_t len);

struct LayerPrompts {
    ad::Var normal;    // T_n: [(M_n + 1 + M_q) × D]
    ad::Var abnormal;  // T_a: [(M_n + M_a + 1 + M_q) × D]
};

struct StateAggregates {
    ad::Var normal;    // [M_n × D]
    ad::Var abnormal;  // [M_a × D]
};

// T_n = [S_n][cls][Q_ctx], T_a = [S_n][S_a][cls][Q_ctx] for every layer.
std::map<std::size_t, LayerPrompts> assemble_prompts(const std::map<std::size_t, StateAggregates>& aggregates,
                                                     const ad::Var& cls_token, const ad::Var& context,
                                                     std::span<const std::size_t> layers);

// Learnable prompt machinery for all tapped layers.
class Vgmop {
public:
    Vgmop(const VgmopConfig& cfg, const EncoderConfig& enc, const Tensor& cls_init, std::uint64_t seed);
    Vgmop(const Vgmop&) = delete;
    Vgmop& operator=(const Vgmop&) = delete;

    const VgmopConfig& config() const noexcept { return cfg_; }
    const std::vector<std::size_t>& layers() const noexcept { return layers_; }

    CrossAttentionParams& attention(std::size_t layer, PromptState s);
    RouterParams& router(std::size_t layer, PromptState s);
    ExpertPool& pool(std::size_t layer, PromptState s);
    const ExpertPool& pool(std::size_t layer, PromptState s) const;
    ParamGroup& context() noexcept { return context_; }
    ParamGroup& cls_token() noexcept { return cls_; }

    // Distinct pools (one per layer when shared, two otherwise).
    std::vector<const ExpertPool*> unique_pools() const;
    std::vector<ExpertPool*> unique_pools();
    ParamRefs params();

private:
    struct LayerParams {
        std::vector<CrossAttentionParams> attention;  // 1 if shared, else 2
        std::vector<RouterParams> routers;            // always 2
        std::vector<ExpertPool> pools;                // 1 if shared, else 2
    };

    LayerParams& at(std::size_t layer);
    const LayerParams& at(std::size_t layer) const;

    VgmopConfig cfg_;
    std::vector<std::size_t> layers_;
    std::map<std::size_t, LayerParams> per_layer_;
    ParamGroup context_;
    ParamGroup cls_;
};

// Selection counts and mean gate weight per expert, per (layer, state).
struct ActivationStats {
    struct Entry {
        std::size_t instances = 0;
        std::vector<std::size_t> selections;
        std::vector<double> gate_sum;
    };
    std::map<std::pair<std::size_t, PromptState>, Entry> entries;

    bool empty() const noexcept { return entries.empty(); }
    std::size_t total_selections(std::size_t layer, PromptState s) const;
};

ActivationStats expert_activation_stats(std::span<const RoutingDecision> decisions);

// Columns: layer,state,expert,selections,instances,frequency,mean_gate
void write_activation_csv(std::ostream& os, const ActivationStats& stats);
// Columns: instance,layer,state,selected,gates (selected/gates ';'-joined)
void write_routing_csv(std::ostream& os, std::span<const RoutingDecision> decisions, std::size_t per_instance);

// Columns: layer,state,expert,e0..e{D-1}; one row per (layer, state, expert)
// holding the mean over the state's expert tokens.
void export_expert_embeddings(std::ostream& os, const Vgmop& vgmop);

}  // namespace pmoe
