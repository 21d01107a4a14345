#pragma once

#include <cstdint>
#include <map>
#include <string_view>
#include <vector>

#include "promptmoe/autodiff.hpp"
#include "promptmoe/param.hpp"

namespace pmoe {

// Sizes of the frozen toy backbones. Defaults are the desk-scale setting; the
// paper-scale counterpart is 518×518 images, patch 14, depth 24, taps
// {6,12,18,24}.
struct EncoderConfig {
    std::size_t image_height = 64;
    std::size_t image_width = 64;
    std::size_t patch_size = 8;
    std::size_t depth = 4;
    std::size_t vision_dim = 48;  // D_x
    std::size_t token_dim = 32;   // D
    std::size_t joint_dim = 32;   // D_joint
    std::vector<std::size_t> layer_taps{1, 2, 3, 4};
    std::uint64_t seed = 1234;
    std::size_t vision_heads = 4;
    std::size_t text_depth = 2;
    std::size_t text_heads = 4;
    std::size_t max_context = 32;

    void validate() const;
    std::size_t grid_h() const { return image_height / patch_size; }
    std::size_t grid_w() const { return image_width / patch_size; }
    std::size_t num_patches() const { return grid_h() * grid_w(); }
    std::size_t final_tap() const;
    bool is_tap(std::size_t layer) const;
};

struct VisionFeatures {
    // Layer l -> [(HW+1) × D_x]: HW patch rows in raster order followed by the
    // global feature row.
    std::map<std::size_t, Tensor> per_layer;
    Tensor global_cls;  // [D_x]
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
};

// Seeded, frozen ViT-style featuriser: a two-layer MLP patch stem, a class
// token and `depth` pre-norm transformer blocks whose MLPs read channels
// standardised over the image's patch tokens.
class VisionEncoder {
public:
    explicit VisionEncoder(const EncoderConfig& cfg);

    // `image` is [h × w × 3] with values in [0, 1].
    VisionFeatures encode(const Tensor& image) const;

    const EncoderConfig& config() const noexcept { return cfg_; }
    ParamRefs params();

private:
    struct Block {
        ParamGroup wq, wk, wv, wo, w1, b1, w2, b2;
    };

    EncoderConfig cfg_;
    ParamGroup stem_w1_, stem_b1_, stem_w2_;
    ParamGroup cls_token_;
    std::vector<Block> blocks_;
};

// Seeded, frozen text transformer mapping a token-embedding sequence to a
// unit-norm joint-space vector. Weights never receive gradient, but the
// gradient with respect to the input tokens is exact.
class TextEncoder {
public:
    explicit TextEncoder(const EncoderConfig& cfg);

    ad::Var encode(const ad::Var& tokens) const;

    // Deterministic embedding of a vocabulary word (e.g. the "object"
    // placeholder used to initialise the [cls] token).
    Tensor word_embedding(std::string_view word) const;

    const EncoderConfig& config() const noexcept { return cfg_; }
    ParamRefs params();

private:
    struct Block {
        ParamGroup wq, wk, wv, wo, w1, b1, w2, b2;
    };

    EncoderConfig cfg_;
    ParamGroup pos_embed_;
    std::vector<Block> blocks_;
    ParamGroup proj_;
};

VisionFeatures encode_image(const VisionEncoder& encoder, const Tensor& image);
ad::Var encode_text(const TextEncoder& encoder, const ad::Var& tokens);

enum class ProjectionInit { random, identity };

// Learnable per-tap linear map from D_x patch features into the joint space.
class PatchProjection {
public:
    PatchProjection(const EncoderConfig& cfg, std::uint64_t seed, ProjectionInit init = ProjectionInit::random);

    ParamGroup& weight(std::size_t layer);
    const ParamGroup& weight(std::size_t layer) const;
    ParamRefs params();

private:
    std::map<std::size_t, ParamGroup> weights_;
};

// Rows of F_x^(l)·W, each L2-normalised: [(HW+1) × D_joint].
ad::Var project_patches(const VisionFeatures& features, std::size_t layer, const ad::Var& weight);
ad::Var project_patches(const VisionFeatures& features, std::size_t layer, PatchProjection& projection);

}  // namespace pmoe
