#pragma once

#include <ostream>
#include <vector>

#include "promptmoe/autodiff.hpp"

namespace pmoe {

struct LossConfig {
    double alpha = 0.01;   // balance weight
    double beta = 0.005;   // decouple weight
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_eps = 1.0;

    void validate() const;
};

struct LossBreakdown {
    double bce = 0, dice = 0, focal = 0, balance = 0, decouple = 0, total = 0;
};

struct LossTerms {
    ad::Var bce, dice, focal, balance, decouple, total;
    LossBreakdown values() const;
};

inline constexpr double kProbClamp = 1e-6;

// α · Σ_l E · Σ_j (mean_i p_ij)², one [B × E] probability matrix per layer.
ad::Var balance_loss(const std::vector<ad::Var>& probs_per_layer, double alpha);
double balance_loss(const std::vector<Tensor>& probs_per_layer, double alpha);

// β · Σ_l ‖Ŝ Ŝᵀ − I‖²_F over unit-normalised expert means. Each pool is
// [E × M × D] (or [E·M × D] with `expert_len` = M).
ad::Var decouple_loss(const std::vector<ad::Var>& pools, std::size_t expert_len, double beta);
double decouple_loss(const std::vector<Tensor>& pools, std::size_t expert_len, double beta);

ad::Var dice_loss(const ad::Var& map, const Tensor& mask, double eps = 1.0);
double dice_loss(const Tensor& map, const Tensor& mask, double eps = 1.0);

ad::Var focal_loss(const ad::Var& map, const Tensor& mask, double gamma = 2.0, double alpha = 0.25);
double focal_loss(const Tensor& map, const Tensor& mask, double gamma = 2.0, double alpha = 0.25);

ad::Var bce_score_loss(const ad::Var& score, double label);
double bce_score_loss(double score, double label);

// Sums the five parts; a non-finite part raises EvaluationError naming it.
LossTerms total_loss(ad::Var bce, ad::Var dice, ad::Var focal, ad::Var balance, ad::Var decouple);

void write_loss_header(std::ostream& os);
void write_loss_row(std::ostream& os, std::size_t step, double lr, const LossBreakdown& b);

}  // namespace pmoe
