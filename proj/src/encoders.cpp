#include "promptmoe/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "promptmoe/error.hpp"
#include "promptmoe/layers.hpp"

namespace pmoe {

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_height == 0 || image_width == 0)
        throw ConfigError("image and patch sizes must be positive");
    if (image_height % patch_size != 0 || image_width % patch_size != 0)
        throw ConfigError("image size must be divisible by patch_size");
    if (depth == 0 || vision_dim == 0 || token_dim == 0 || joint_dim == 0)
        throw ConfigError("encoder dimensions must be positive");
    if (layer_taps.empty()) throw ConfigError("at least one layer tap is required");
    for (std::size_t i = 0; i < layer_taps.size(); ++i) {
        if (layer_taps[i] == 0 || layer_taps[i] > depth)
            throw ConfigError("layer tap " + std::to_string(layer_taps[i]) + " outside 1.." + std::to_string(depth));
        if (i && layer_taps[i] <= layer_taps[i - 1]) throw ConfigError("layer taps must be strictly increasing");
    }
    if (vision_dim % vision_heads != 0) throw ConfigError("vision_dim must be divisible by vision_heads");
    if (token_dim % text_heads != 0) throw ConfigError("token_dim must be divisible by text_heads");
    if (text_depth == 0 || max_context == 0) throw ConfigError("text encoder depth and context must be positive");
}

std::size_t EncoderConfig::final_tap() const { return *std::max_element(layer_taps.begin(), layer_taps.end()); }

bool EncoderConfig::is_tap(std::size_t layer) const {
    return std::find(layer_taps.begin(), layer_taps.end(), layer) != layer_taps.end();
}

namespace {

ParamGroup frozen(std::string name, Tensor value) { return ParamGroup(std::move(name), std::move(value), true); }

// Frozen weights are graph constants: gradient stops at them.
ad::Var frozen_value(const ParamGroup& p) { return ad::constant(p.value); }

// Standardises every channel over the first `n` rows (the patch tokens) and
// applies the same shift and scale to all rows. Inference only.
ad::Var token_standardize(const ad::Var& x, std::size_t n) {
    const Tensor& v = x.value();
    const std::size_t rows = v.shape()[0], d = v.shape()[1];
    Tensor out({rows, d});
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += v.at(i, j);
        mean /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) var += (v.at(i, j) - mean) * (v.at(i, j) - mean);
        const double inv = 1.0 / std::sqrt(var / static_cast<double>(n) + 1e-6);
        for (std::size_t i = 0; i < rows; ++i) out.at(i, j) = (v.at(i, j) - mean) * inv;
    }
    return ad::constant(std::move(out));
}

// Pre-norm transformer block over a token matrix, shared by both encoders.
// With `image_tokens` > 0 the MLP sees channels standardised across the
// image's patch tokens, so it responds to how a patch differs from the rest
// of its image.
template <class Block>
ad::Var transformer_block(const ad::Var& x, const Block& b, std::size_t heads, std::size_t image_tokens = 0) {
    const ad::Var h = ad::rms_norm_rows(x);
    const ad::Var q = ad::matmul(h, frozen_value(b.wq));
    const ad::Var k = ad::matmul(h, frozen_value(b.wk));
    const ad::Var v = ad::matmul(h, frozen_value(b.wv));
    const ad::Var attn = ad::matmul(ad::multi_head_attention(q, k, v, heads), frozen_value(b.wo));
    const ad::Var x1 = ad::add(x, attn);
    const ad::Var h2 = image_tokens ? token_standardize(x1, image_tokens) : ad::rms_norm_rows(x1);
    const ad::Var mlp =
        ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(h2, frozen_value(b.w1)), frozen_value(b.b1))), frozen_value(b.w2)),
                    frozen_value(b.b2));
    return ad::add(x1, mlp);
}

template <class Block>
Block make_block(Rng& rng, const std::string& prefix, std::size_t dim) {
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    const double s4 = 1.0 / std::sqrt(static_cast<double>(4 * dim));
    return Block{frozen(prefix + ".wq", rng.normal_tensor({dim, dim}, s)),
                 frozen(prefix + ".wk", rng.normal_tensor({dim, dim}, s)),
                 frozen(prefix + ".wv", rng.normal_tensor({dim, dim}, s)),
                 frozen(prefix + ".wo", rng.normal_tensor({dim, dim}, s)),
                 frozen(prefix + ".w1", rng.normal_tensor({dim, 4 * dim}, s)),
                 frozen(prefix + ".b1", rng.normal_tensor({4 * dim}, 0.1)),
                 frozen(prefix + ".w2", rng.normal_tensor({4 * dim, dim}, s4)),
                 frozen(prefix + ".b2", Tensor({dim}))};
}

template <class Block>
void append_block_params(ParamRefs& refs, Block& b) {
    for (ParamGroup* p : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.b1, &b.w2, &b.b2}) refs.push_back(p);
}

}  // namespace

VisionEncoder::VisionEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, "vision"));
    const std::size_t in = cfg_.patch_size * cfg_.patch_size * 3;
    const std::size_t d = cfg_.vision_dim;
    const std::size_t hid = 4 * d;
    stem_w1_ = frozen("vision.stem.w1", rng.normal_tensor({in, hid}, 1.0 / std::sqrt(static_cast<double>(in))));
    stem_b1_ = frozen("vision.stem.b1", rng.normal_tensor({hid}, 0.5));
    stem_w2_ = frozen("vision.stem.w2", rng.normal_tensor({hid, d}, 1.0 / std::sqrt(static_cast<double>(hid))));
    cls_token_ = frozen("vision.cls", rng.normal_tensor({1, d}, 1.0));
    for (std::size_t i = 0; i < cfg_.depth; ++i)
        blocks_.push_back(make_block<Block>(rng, "vision.block" + std::to_string(i + 1), d));
}

ParamRefs VisionEncoder::params() {
    ParamRefs refs{&stem_w1_, &stem_b1_, &stem_w2_, &cls_token_};
    for (auto& b : blocks_) append_block_params(refs, b);
    return refs;
}

VisionFeatures VisionEncoder::encode(const Tensor& image) const {
    if (image.rank() != 3 || image.shape()[0] != cfg_.image_height || image.shape()[1] != cfg_.image_width ||
        image.shape()[2] != 3) {
        throw InputError("image shape " + shape_string(image.shape()) + " does not match encoder input [" +
                         std::to_string(cfg_.image_height) + "x" + std::to_string(cfg_.image_width) + "x3]");
    }
    for (double v : image.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw InputError("image values must lie in [0, 1]");
    }

    ad::NoGradGuard no_grad;
    const std::size_t p = cfg_.patch_size, gh = cfg_.grid_h(), gw = cfg_.grid_w(), w = cfg_.image_width;
    const std::size_t in = p * p * 3;
    Tensor patches({gh * gw, in});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px)
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        patches.at(py * gw + px, (y * p + x) * 3 + c) =
                            image[((py * p + y) * w + (px * p + x)) * 3 + c] - 0.5;

    const ad::Var hidden =
        ad::gelu(ad::add_row(ad::matmul(ad::constant(std::move(patches)), frozen_value(stem_w1_)), frozen_value(stem_b1_)));
    const ad::Var tokens = ad::matmul(hidden, frozen_value(stem_w2_));
    // No positional embedding: patch features are translation-equivariant.
    ad::Var x = ad::concat_rows({tokens, frozen_value(cls_token_)});

    VisionFeatures out;
    out.grid_h = gh;
    out.grid_w = gw;
    std::map<std::size_t, ad::Var> tapped;
    for (std::size_t l = 1; l <= cfg_.depth; ++l) {
        x = transformer_block(x, blocks_[l - 1], cfg_.vision_heads, gh * gw);
        if (cfg_.is_tap(l)) tapped.emplace(l, ad::slice_rows(ad::rms_norm_rows(x), 0, gh * gw));
    }
    const ad::Var global = ad::slice_rows(ad::rms_norm_rows(x), gh * gw, 1);
    out.global_cls = global.value().reshaped({cfg_.vision_dim});
    for (auto& [l, v] : tapped) out.per_layer.emplace(l, ad::concat_rows({v, global}).value());
    return out;
}

TextEncoder::TextEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, "text"));
    const std::size_t d = cfg_.token_dim;
    pos_embed_ = frozen("text.pos_embed", rng.normal_tensor({cfg_.max_context, d}, 0.02));
    for (std::size_t i = 0; i < cfg_.text_depth; ++i)
        blocks_.push_back(make_block<Block>(rng, "text.block" + std::to_string(i + 1), d));
    proj_ = frozen("text.proj", rng.normal_tensor({d, cfg_.joint_dim}, 1.0 / std::sqrt(static_cast<double>(d))));
}

ParamRefs TextEncoder::params() {
    ParamRefs refs{&pos_embed_};
    for (auto& b : blocks_) append_block_params(refs, b);
    refs.push_back(&proj_);
    return refs;
}

ad::Var TextEncoder::encode(const ad::Var& tokens) const {
    const auto& s = tokens.shape();
    if (s.size() != 2 || s[1] != cfg_.token_dim) {
        throw InputError("prompt tokens must be [L x " + std::to_string(cfg_.token_dim) + "], got " + shape_string(s));
    }
    if (s[0] > cfg_.max_context) {
        throw InputError("prompt length " + std::to_string(s[0]) + " exceeds context limit " +
                         std::to_string(cfg_.max_context));
    }
    ad::Var x = ad::add(tokens, ad::slice_rows(frozen_value(pos_embed_), 0, s[0]));
    for (const auto& b : blocks_) x = transformer_block(x, b, cfg_.text_heads);
    const ad::Var pooled = ad::mean_rows(ad::rms_norm_rows(x));
    const ad::Var joint = ad::matmul(ad::reshape(pooled, {1, cfg_.token_dim}), frozen_value(proj_));
    return ad::reshape(ad::row_normalize(joint), {cfg_.joint_dim});
}

Tensor TextEncoder::word_embedding(std::string_view word) const {
    Rng rng(derive_seed(cfg_.seed, "word:" + std::string(word)));
    return rng.normal_tensor({1, cfg_.token_dim}, 0.02);
}

VisionFeatures encode_image(const VisionEncoder& encoder, const Tensor& image) { return encoder.encode(image); }

ad::Var encode_text(const TextEncoder& encoder, const ad::Var& tokens) { return encoder.encode(tokens); }

PatchProjection::PatchProjection(const EncoderConfig& cfg, std::uint64_t seed, ProjectionInit init) {
    Rng rng(derive_seed(seed, "patch_projection"));
    for (std::size_t l : cfg.layer_taps) {
        Tensor w({cfg.vision_dim, cfg.joint_dim});
        if (init == ProjectionInit::identity) {
            if (cfg.vision_dim != cfg.joint_dim) throw ConfigError("identity projection requires D_x == D_joint");
            for (std::size_t i = 0; i < cfg.vision_dim; ++i) w.at(i, i) = 1.0;
        } else {
            w = rng.normal_tensor({cfg.vision_dim, cfg.joint_dim}, 1.0 / std::sqrt(static_cast<double>(cfg.vision_dim)));
        }
        round_to_float32(w);
        weights_.emplace(l, ParamGroup("proj.layer" + std::to_string(l), std::move(w)));
    }
}

ParamGroup& PatchProjection::weight(std::size_t layer) {
    auto it = weights_.find(layer);
    if (it == weights_.end()) throw ParameterError("layer " + std::to_string(layer) + " is not a tapped layer");
    return it->second;
}

const ParamGroup& PatchProjection::weight(std::size_t layer) const {
    return const_cast<PatchProjection*>(this)->weight(layer);
}

ParamRefs PatchProjection::params() {
    ParamRefs refs;
    for (auto& [l, p] : weights_) refs.push_back(&p);
    return refs;
}

ad::Var project_patches(const VisionFeatures& features, std::size_t layer, const ad::Var& weight) {
    auto it = features.per_layer.find(layer);
    if (it == features.per_layer.end()) throw ParameterError("layer " + std::to_string(layer) + " is not a tapped layer");
    return ad::row_normalize(ad::matmul(ad::constant(it->second), weight));
}

ad::Var project_patches(const VisionFeatures& features, std::size_t layer, PatchProjection& projection) {
    return project_patches(features, layer, ad::leaf(projection.weight(layer)));
}

}  // namespace pmoe
