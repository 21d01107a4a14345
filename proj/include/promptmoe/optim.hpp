#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "promptmoe/autodiff.hpp"
#include "promptmoe/param.hpp"

namespace pmoe {

struct AdamState {
    std::uint64_t step = 0;
    Tensor m;
    Tensor v;
    double beta1 = 0.6;
    double beta2 = 0.999;
    double lr = 1e-3;
    double eps = 1e-8;

    static AdamState for_param(const ParamGroup& p, double lr, double beta1 = 0.6, double beta2 = 0.999,
                               double eps = 1e-8);
};

enum class StepResult { updated, skipped_frozen };

// Bias-corrected Adam update of `param` from its current grad. Frozen groups
// are left untouched and reported as skipped.
StepResult adam_step(ParamGroup& param, AdamState& state);

// Adam over an ordered parameter list, one state per group.
class Adam {
public:
    Adam(const ParamRefs& params, double lr, double beta1 = 0.6, double beta2 = 0.999, double eps = 1e-8);

    void set_lr(double lr);
    // Returns the number of frozen groups skipped.
    std::size_t step();
    const std::vector<AdamState>& states() const noexcept { return states_; }

private:
    ParamRefs params_;
    std::vector<AdamState> states_;
};

struct GradcheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;  // number of scalar entries compared
};

// Compares the analytic gradient of `f` with central differences
// (f(θ+ε) − f(θ−ε)) / 2ε for every entry of every non-frozen group in
// `params`. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator. `f` must rebuild its graph from the current parameter values
// on every call. `corrupt` (test hook) is applied to analytic grads before
// comparison.
GradcheckReport finite_diff_gradcheck(const std::function<ad::Var()>& f, const ParamRefs& params, double epsilon,
                                      const std::function<void(ParamRefs&)>& corrupt = {});

}  // namespace pmoe
