#pragma once

#include <string>
#include <vector>

#include "promptmoe/tensor.hpp"

namespace pmoe {

// A named learnable (or frozen) tensor together with its gradient buffer.
struct ParamGroup {
    ParamGroup() = default;
    ParamGroup(std::string name_, Tensor value_, bool frozen_ = false)
        : name(std::move(name_)), value(std::move(value_)), grad(value.shape()), frozen(frozen_) {}

    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;

    void zero_grad() { grad.fill(0.0); }
};

// Rounds every value to the nearest binary32. Trainable parameters are kept
// float-representable so the float32 checkpoint round-trips bit-exactly.
void round_to_float32(Tensor& t);

// Non-owning ordered view over parameter groups; order defines checkpoint
// layout and optimizer state order.
using ParamRefs = std::vector<ParamGroup*>;

void zero_grads(const ParamRefs& params);

}  // namespace pmoe
