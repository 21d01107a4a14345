#include "promptmoe/objective.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

#include "promptmoe/error.hpp"

namespace pmoe {

void LossConfig::validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("alpha and beta must be non-negative");
    if (!(focal_gamma >= 0.0)) throw ConfigError("focal_gamma must be non-negative");
    if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) throw ConfigError("focal_alpha must lie in [0, 1]");
    if (!(dice_eps > 0.0)) throw ConfigError("dice_eps must be positive");
}

LossBreakdown LossTerms::values() const {
    return {bce.item(), dice.item(), focal.item(), balance.item(), decouple.item(), total.item()};
}

ad::Var balance_loss(const std::vector<ad::Var>& probs_per_layer, double alpha) {
    if (probs_per_layer.empty()) throw ParameterError("balance_loss needs at least one layer");
    ad::Var total;
    for (const auto& p : probs_per_layer) {
        if (p.shape().size() != 2 || p.shape()[0] == 0) throw ParameterError("balance_loss needs a non-empty batch");
        const double e = static_cast<double>(p.shape()[1]);
        const ad::Var m = ad::mean_rows(p);
        const ad::Var term = ad::scale(ad::sum(ad::mul(m, m)), alpha * e);
        total = total.defined() ? ad::add(total, term) : term;
    }
    return total;
}

double balance_loss(const std::vector<Tensor>& probs_per_layer, double alpha) {
    ad::NoGradGuard g;
    std::vector<ad::Var> vars;
    for (const auto& p : probs_per_layer) vars.push_back(ad::constant(p));
    return balance_loss(vars, alpha).item();
}

namespace {

// Mean over the M tokens of every expert: [E × D].
ad::Var expert_means(const ad::Var& pool, std::size_t expert_len) {
    const std::size_t n = pool.value().size();
    const std::size_t d = pool.shape().back();
    const std::size_t e = n / (expert_len * d);
    if (expert_len == 0 || e * expert_len * d != n) throw DimensionError("pool shape does not match expert length");
    const ad::Var flat = ad::reshape(pool, {e * expert_len, d});
    std::vector<ad::Var> rows;
    rows.reserve(e);
    for (std::size_t j = 0; j < e; ++j)
        rows.push_back(ad::reshape(ad::mean_rows(ad::slice_rows(flat, j * expert_len, expert_len)), {1, d}));
    return ad::concat_rows(rows);
}

}  // namespace

ad::Var decouple_loss(const std::vector<ad::Var>& pools, std::size_t expert_len, double beta) {
    if (pools.empty()) throw ParameterError("decouple_loss needs at least one pool");
    ad::Var total;
    for (const auto& pool : pools) {
        const ad::Var means = expert_means(pool, expert_len);
        const Tensor& mv = means.value();
        for (std::size_t j = 0; j < mv.rows(); ++j) {
            double sq = 0.0;
            for (std::size_t c = 0; c < mv.cols(); ++c) sq += mv.at(j, c) * mv.at(j, c);
            if (!(sq > 0.0)) throw EvaluationError("expert " + std::to_string(j) + " has a zero-norm mean embedding");
        }
        const ad::Var s = ad::row_normalize(means);
        const std::size_t e = mv.rows();
        Tensor eye({e, e});
        for (std::size_t i = 0; i < e; ++i) eye.at(i, i) = 1.0;
        const ad::Var diff = ad::sub(ad::matmul_nt(s, s), ad::constant(std::move(eye)));
        const ad::Var term = ad::scale(ad::sum(ad::mul(diff, diff)), beta);
        total = total.defined() ? ad::add(total, term) : term;
    }
    return total;
}

double decouple_loss(const std::vector<Tensor>& pools, std::size_t expert_len, double beta) {
    ad::NoGradGuard g;
    std::vector<ad::Var> vars;
    for (const auto& p : pools) vars.push_back(ad::constant(p));
    return decouple_loss(vars, expert_len, beta).item();
}

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* what) {
    if (a.size() != b.size() || a.rows() != b.rows())
        throw InputError(std::string(what) + ": map " + shape_string(a.shape()) + " and mask " +
                         shape_string(b.shape()) + " differ");
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

}  // namespace

ad::Var dice_loss(const ad::Var& map, const Tensor& mask, double eps) {
    check_same(map.value(), mask, "dice_loss");
    const Tensor& x = map.value();
    double inter = 0.0, sx = 0.0, sm = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        inter += x[i] * mask[i];
        sx += x[i];
        sm += mask[i];
    }
    const double num = 2.0 * inter + eps, den = sx + sm + eps;
    return ad::make_result(Tensor::scalar(1.0 - num / den), {map}, [mask, num, den](ad::Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const double up = self.grad[0];
        // d/dx_i [−num/den] = −(2 m_i den − num) / den²
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= up * (2.0 * mask[i] * den - num) / (den * den);
    });
}

double dice_loss(const Tensor& map, const Tensor& mask, double eps) {
    ad::NoGradGuard g;
    return dice_loss(ad::constant(map), mask, eps).item();
}

ad::Var focal_loss(const ad::Var& map, const Tensor& mask, double gamma, double alpha) {
    check_same(map.value(), mask, "focal_loss");
    const Tensor& x = map.value();
    const double n = static_cast<double>(x.size());
    double total = 0.0;
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool pos = mask[i] > 0.5;
        const double p = clamp_prob(x[i]);
        const bool inside = x[i] > kProbClamp && x[i] < 1.0 - kProbClamp;
        const double pt = pos ? p : 1.0 - p;
        const double at = pos ? alpha : 1.0 - alpha;
        const double q = 1.0 - pt;
        total += -at * std::pow(q, gamma) * std::log(pt);
        if (inside) {
            // dL/dpt = at·[γ q^{γ−1} log pt − q^γ / pt]
            const double dq = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0) * std::log(pt);
            const double dpt = at * (dq - std::pow(q, gamma) / pt);
            dx[i] = (pos ? dpt : -dpt) / n;
        }
    }
    return ad::make_result(Tensor::scalar(total / n), {map}, [dx = std::move(dx)](ad::Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * dx[i];
    });
}

double focal_loss(const Tensor& map, const Tensor& mask, double gamma, double alpha) {
    ad::NoGradGuard g;
    return focal_loss(ad::constant(map), mask, gamma, alpha).item();
}

ad::Var bce_score_loss(const ad::Var& score, double label) {
    if (score.value().size() != 1) throw DimensionError("bce_score_loss expects a scalar score");
    const double raw = score.value()[0];
    const double s = clamp_prob(raw);
    const bool inside = raw > kProbClamp && raw < 1.0 - kProbClamp;
    const double value = -label * std::log(s) - (1.0 - label) * std::log(1.0 - s);
    const double d = inside ? -label / s + (1.0 - label) / (1.0 - s) : 0.0;
    return ad::make_result(Tensor::scalar(value), {score}, [d](ad::Node& self) {
        self.inputs[0]->grad_buffer()[0] += self.grad[0] * d;
    });
}

double bce_score_loss(double score, double label) {
    ad::NoGradGuard g;
    return bce_score_loss(ad::constant(Tensor::scalar(score)), label).item();
}

LossTerms total_loss(ad::Var bce, ad::Var dice, ad::Var focal, ad::Var balance, ad::Var decouple) {
    const std::pair<const char*, const ad::Var*> parts[] = {
        {"bce", &bce}, {"dice", &dice}, {"focal", &focal}, {"balance", &balance}, {"decouple", &decouple}};
    for (const auto& [name, v] : parts) {
        if (!v->defined() || v->value().size() != 1) throw InternalError(std::string("loss part ") + name + " is not a scalar");
        if (!std::isfinite(v->item())) throw EvaluationError(std::string("non-finite ") + name + " loss");
    }
    ad::Var total = ad::add(ad::add(ad::add(ad::add(bce, dice), focal), balance), decouple);
    return {bce, dice, focal, balance, decouple, total};
}

void write_loss_header(std::ostream& os) { os << "step,lr,bce,dice,focal,balance,decouple,total\n"; }

void write_loss_row(std::ostream& os, std::size_t step, double lr, const LossBreakdown& b) {
    os << std::setprecision(17) << step << ',' << lr << ',' << b.bce << ',' << b.dice << ',' << b.focal << ','
       << b.balance << ',' << b.decouple << ',' << b.total << '\n';
}

}  // namespace pmoe
