#include "promptmoe/layers.hpp"

#include <cmath>

#include "promptmoe/error.hpp"

namespace pmoe::ad {

Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
    const std::size_t d = q.value().cols();
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention width " + std::to_string(d) + " is not divisible by heads=" +
                          std::to_string(heads));
    }
    if (k.value().cols() != d || v.value().cols() != d || k.value().rows() != v.value().rows()) {
        throw DimensionError("attention operand shapes disagree");
    }
    const std::size_t dh = d / heads;
    const double temperature = std::sqrt(static_cast<double>(dh));
    if (heads == 1) return matmul(softmax_rows(matmul_nt(q, k), temperature), v);
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Var qh = slice_cols(q, h * dh, dh);
        const Var kh = slice_cols(k, h * dh, dh);
        const Var vh = slice_cols(v, h * dh, dh);
        outs.push_back(matmul(softmax_rows(matmul_nt(qh, kh), temperature), vh));
    }
    return concat_cols(outs);
}

Var rms_norm_rows(const Var& x) {
    return scale(row_normalize(x), std::sqrt(static_cast<double>(x.value().cols())));
}

}  // namespace pmoe::ad
