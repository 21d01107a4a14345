#pragma once

#include "promptmoe/autodiff.hpp"

namespace pmoe::ad {

// Scaled dot-product attention split into `heads` column blocks. Each head
// computes Softmax(Q_h K_hᵀ / √d_h) V_h with d_h = D / heads; head outputs are
// concatenated back to D columns.
Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t heads);

// RMS-style token normalisation without affine parameters: each row scaled to
// norm √D.
Var rms_norm_rows(const Var& x);

}  // namespace pmoe::ad
