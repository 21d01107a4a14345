#include "promptmoe/optim.hpp"

#include <algorithm>
#include <cmath>

#include "promptmoe/error.hpp"

namespace pmoe {

AdamState AdamState::for_param(const ParamGroup& p, double lr, double beta1, double beta2, double eps) {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw ParameterError("Adam betas must lie in (0, 1)");
    }
    AdamState s;
    s.m = Tensor(p.value.shape());
    s.v = Tensor(p.value.shape());
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.lr = lr;
    s.eps = eps;
    return s;
}

StepResult adam_step(ParamGroup& param, AdamState& state) {
    if (param.frozen) return StepResult::skipped_frozen;
    if (param.grad.shape() != param.value.shape() || state.m.shape() != param.value.shape() ||
        state.v.shape() != param.value.shape()) {
        throw DimensionError("adam_step: state/grad shape does not match parameter " + param.name);
    }
    param.grad.check_finite("gradient of " + param.name);
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < param.value.size(); ++i) {
        const double g = param.grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        param.value[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    return StepResult::updated;
}

Adam::Adam(const ParamRefs& params, double lr, double beta1, double beta2, double eps) : params_(params) {
    states_.reserve(params_.size());
    for (auto* p : params_) states_.push_back(AdamState::for_param(*p, lr, beta1, beta2, eps));
}

void Adam::set_lr(double lr) {
    for (auto& s : states_) s.lr = lr;
}

std::size_t Adam::step() {
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (adam_step(*params_[i], states_[i]) == StepResult::skipped_frozen) ++skipped;
    }
    return skipped;
}

GradcheckReport finite_diff_gradcheck(const std::function<ad::Var()>& f, const ParamRefs& params, double epsilon,
                                      const std::function<void(ParamRefs&)>& corrupt) {
    if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw ParameterError("gradcheck epsilon must lie in [1e-6, 1e-3]");

    ParamRefs checked;
    for (auto* p : params)
        if (!p->frozen) checked.push_back(p);

    zero_grads(params);
    const ad::Var root = f();
    if (!std::isfinite(root.item())) throw EvaluationError("gradcheck: objective is not finite");
    ad::backward(root);
    if (corrupt) corrupt(checked);

    auto eval = [&] {
        ad::NoGradGuard guard;
        const double v = f().item();
        if (!std::isfinite(v)) throw EvaluationError("gradcheck: objective is not finite under perturbation");
        return v;
    };

    GradcheckReport report;
    for (auto* p : checked) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + epsilon;
            const double fp = eval();
            p->value[i] = orig - epsilon;
            const double fm = eval();
            p->value[i] = orig;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double analytic = p->grad[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic - numeric) / denom;
            ++report.checked;
            if (rel > report.max_rel_error || report.worst_param.empty()) {
                report.max_rel_error = rel;
                report.worst_param = p->name;
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace pmoe
