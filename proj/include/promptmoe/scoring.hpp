#pragma once

#include <map>
#include <vector>

#include "promptmoe/autodiff.hpp"

namespace pmoe {

struct ScoringConfig {
    double tau = 0.07;        // pixel temperature
    double tau_prime = 0.01;  // image temperature
    double gaussian_sigma = 4.0;
    bool divide_by_layers = true;

    void validate() const;
};

// Bilinear resize with align_corners=false (half-pixel centres, edge clamp).
Tensor upsample_bilinear(const Tensor& map, std::size_t h, std::size_t w);
namespace ad {
Var upsample_bilinear(const Var& map, std::size_t h, std::size_t w);
}

// Separable Gaussian blur, reflect padding, radius ⌈3σ⌉. σ = 0 is the identity.
Tensor gaussian_smooth(const Tensor& map, double sigma);
std::vector<double> gaussian_kernel(double sigma);

// Unit-norm text embeddings of the two prompts at one layer.
struct StatePair {
    ad::Var normal;    // [D_joint]
    ad::Var abnormal;  // [D_joint]
};

struct AnomalyOutput {
    ad::Var map;                             // M: [h × w]
    std::map<std::size_t, Tensor> probs;     // per layer: [(h·w) × 2] (normal, abnormal)
};

// `patches[l]` holds unit-norm projected patch rows; only the first
// grid_h·grid_w rows are spatial (a trailing global row is ignored).
// Per layer the (normal, abnormal) similarity logits are upsampled to (h, w),
// turned into two-class probabilities at temperature τ, and the abnormal
// channel is averaged over layers.
AnomalyOutput anomaly_map(const std::map<std::size_t, ad::Var>& patches, const std::map<std::size_t, StatePair>& text,
                          std::size_t grid_h, std::size_t grid_w, std::size_t h, std::size_t w,
                          const ScoringConfig& cfg);

// Abnormal-class probability of the global feature at temperature τ'.
ad::Var global_abnormal_prob(const ad::Var& global_row, const StatePair& final_text, const ScoringConfig& cfg);

// s = ½·max(M) + ½·p_abnormal
ad::Var image_score(const ad::Var& map, const ad::Var& p_abnormal);
double image_score(const Tensor& map, double p_abnormal);

}  // namespace pmoe
