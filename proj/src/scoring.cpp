#include "promptmoe/scoring.hpp"

#include <algorithm>
#include <cmath>

#include "promptmoe/error.hpp"

namespace pmoe {

void ScoringConfig::validate() const {
    if (!(tau > 0.0) || !(tau_prime > 0.0)) throw ConfigError("scoring temperatures must be positive");
    if (!(gaussian_sigma >= 0.0)) throw ConfigError("gaussian_sigma must be non-negative");
}

namespace {

// Source taps of one output coordinate along an axis.
struct Tap {
    std::size_t i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> axis_taps(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0.0) src = 0.0;
        std::size_t i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
    }
    return taps;
}

void check_resize(const Shape& s, std::size_t h, std::size_t w) {
    if (h == 0 || w == 0) throw ParameterError("upsample target dimensions must be positive");
    if (s.size() != 2) throw DimensionError("upsample expects a 2-D map, got " + shape_string(s));
}

Tensor resize_forward(const Tensor& x, const std::vector<Tap>& ty, const std::vector<Tap>& tx) {
    const std::size_t w_in = x.cols();
    Tensor out({ty.size(), tx.size()});
    for (std::size_t y = 0; y < ty.size(); ++y) {
        const Tap& a = ty[y];
        for (std::size_t xo = 0; xo < tx.size(); ++xo) {
            const Tap& b = tx[xo];
            const double top = x[a.i0 * w_in + b.i0] * (1.0 - b.w1) + x[a.i0 * w_in + b.i1] * b.w1;
            const double bot = x[a.i1 * w_in + b.i0] * (1.0 - b.w1) + x[a.i1 * w_in + b.i1] * b.w1;
            out[y * tx.size() + xo] = top * (1.0 - a.w1) + bot * a.w1;
        }
    }
    return out;
}

std::size_t reflect(long i, long n) {
    if (n == 1) return 0;
    const long period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < n ? i : period - i);
}

}  // namespace

Tensor upsample_bilinear(const Tensor& map, std::size_t h, std::size_t w) {
    check_resize(map.shape(), h, w);
    return resize_forward(map, axis_taps(map.rows(), h), axis_taps(map.cols(), w));
}

namespace ad {

Var upsample_bilinear(const Var& map, std::size_t h, std::size_t w) {
    check_resize(map.shape(), h, w);
    auto ty = axis_taps(map.value().rows(), h);
    auto tx = axis_taps(map.value().cols(), w);
    Tensor out = resize_forward(map.value(), ty, tx);
    return make_result(std::move(out), {map}, [ty = std::move(ty), tx = std::move(tx)](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const std::size_t w_in = g.cols();
        for (std::size_t y = 0; y < ty.size(); ++y) {
            const Tap& a = ty[y];
            for (std::size_t xo = 0; xo < tx.size(); ++xo) {
                const Tap& b = tx[xo];
                const double up = self.grad[y * tx.size() + xo];
                g[a.i0 * w_in + b.i0] += up * (1.0 - a.w1) * (1.0 - b.w1);
                g[a.i0 * w_in + b.i1] += up * (1.0 - a.w1) * b.w1;
                g[a.i1 * w_in + b.i0] += up * a.w1 * (1.0 - b.w1);
                g[a.i1 * w_in + b.i1] += up * a.w1 * b.w1;
            }
        }
    });
}

}  // namespace ad

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) return {1.0};
    const auto r = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double total = 0.0;
    for (long i = -r; i <= r; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + r)] = v;
        total += v;
    }
    for (double& v : k) v /= total;
    return k;
}

Tensor gaussian_smooth(const Tensor& map, double sigma) {
    if (!(sigma >= 0.0)) throw ParameterError("sigma must be non-negative");
    if (map.rank() != 2) throw DimensionError("gaussian_smooth expects a 2-D map");
    if (sigma == 0.0) return map;
    const auto k = gaussian_kernel(sigma);
    const long r = static_cast<long>(k.size() / 2);
    const long h = static_cast<long>(map.rows()), w = static_cast<long>(map.cols());
    Tensor tmp(map.shape()), out(map.shape());
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (long i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * map[y * w + reflect(x + i, w)];
            tmp[static_cast<std::size_t>(y * w + x)] = acc;
        }
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (long i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp[reflect(y + i, h) * w + x];
            out[static_cast<std::size_t>(y * w + x)] = acc;
        }
    return out;
}

AnomalyOutput anomaly_map(const std::map<std::size_t, ad::Var>& patches, const std::map<std::size_t, StatePair>& text,
                          std::size_t grid_h, std::size_t grid_w, std::size_t h, std::size_t w,
                          const ScoringConfig& cfg) {
    if (patches.empty()) throw InternalError("anomaly_map needs at least one layer");
    const std::size_t hw = grid_h * grid_w;
    AnomalyOutput out;
    std::vector<ad::Var> layer_maps;
    for (const auto& [l, p] : patches) {
        auto it = text.find(l);
        if (it == text.end()) throw InternalError("missing prompt embeddings for layer " + std::to_string(l));
        const std::size_t d = it->second.normal.value().size();
        const ad::Var t = ad::concat_rows({ad::reshape(it->second.normal, {1, d}), ad::reshape(it->second.abnormal, {1, d})});
        const ad::Var sim = ad::matmul_nt(ad::slice_rows(p, 0, hw), t);  // [HW × 2]
        const ad::Var up_n = ad::reshape(ad::upsample_bilinear(ad::reshape(ad::column(sim, 0), {grid_h, grid_w}), h, w), {h * w, 1});
        const ad::Var up_a = ad::reshape(ad::upsample_bilinear(ad::reshape(ad::column(sim, 1), {grid_h, grid_w}), h, w), {h * w, 1});
        const ad::Var probs = ad::softmax_rows(ad::concat_cols({up_n, up_a}), cfg.tau);
        out.probs.emplace(l, probs.value());
        layer_maps.push_back(ad::column(probs, 1));
    }
    ad::Var total = layer_maps.front();
    for (std::size_t i = 1; i < layer_maps.size(); ++i) total = ad::add(total, layer_maps[i]);
    if (cfg.divide_by_layers) total = ad::scale(total, 1.0 / static_cast<double>(layer_maps.size()));
    out.map = ad::reshape(total, {h, w});
    return out;
}

ad::Var global_abnormal_prob(const ad::Var& global_row, const StatePair& final_text, const ScoringConfig& cfg) {
    const std::size_t d = final_text.normal.value().size();
    const ad::Var t =
        ad::concat_rows({ad::reshape(final_text.normal, {1, d}), ad::reshape(final_text.abnormal, {1, d})});
    const ad::Var sim = ad::matmul_nt(ad::reshape(global_row, {1, d}), t);
    return ad::column(ad::softmax_rows(sim, cfg.tau_prime), 1);
}

ad::Var image_score(const ad::Var& map, const ad::Var& p_abnormal) {
    return ad::scale(ad::add(ad::max_all(map), ad::reshape(p_abnormal, {1})), 0.5);
}

double image_score(const Tensor& map, double p_abnormal) {
    return 0.5 * (*std::max_element(map.values().begin(), map.values().end()) + p_abnormal);
}

}  // namespace pmoe
