#pragma once

#include <memory>
#include <vector>

#include "promptmoe/encoders.hpp"
#include "promptmoe/objective.hpp"
#include "promptmoe/scoring.hpp"
#include "promptmoe/vgmop.hpp"

namespace pmoe {

struct ModelConfig {
    EncoderConfig encoder;
    VgmopConfig vgmop;
    ScoringConfig scoring;
    LossConfig loss;

    void validate() const;
};

struct ImageForward {
    std::vector<RoutedVars> routes;           // per layer: normal, abnormal
    std::map<std::size_t, StatePair> text;    // per-layer prompt embeddings
    AnomalyOutput anomaly;                    // unsmoothed map
    ad::Var p_abnormal;                       // global term of the image score
    ad::Var score;
};

// One training/evaluation sample after the frozen vision pass.
struct Sample {
    const VisionFeatures* features = nullptr;
    const Tensor* mask = nullptr;  // [h × w] binary; all zeros for normal images
    double label = 0.0;
};

struct BatchResult {
    LossTerms loss;
    std::vector<ImageForward> images;
};

class Model {
public:
    // `param_seed` initialises the learnable parts; encoders use cfg.encoder.seed.
    Model(const ModelConfig& cfg, std::uint64_t param_seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const noexcept { return cfg_; }
    const VisionEncoder& vision() const noexcept { return vision_; }
    const TextEncoder& text() const noexcept { return text_; }
    Vgmop& vgmop() noexcept { return *vgmop_; }
    const Vgmop& vgmop() const noexcept { return *vgmop_; }
    PatchProjection& projection() noexcept { return projection_; }

    // Trainable groups in checkpoint order; frozen encoder groups separately.
    ParamRefs params();
    ParamRefs frozen_params();

    VisionFeatures encode(const Tensor& image) const { return vision_.encode(image); }

    ImageForward forward(const VisionFeatures& features);
    BatchResult batch_loss(const std::vector<Sample>& batch);

private:
    ModelConfig cfg_;
    VisionEncoder vision_;
    TextEncoder text_;
    PatchProjection projection_;
    std::unique_ptr<Vgmop> vgmop_;
};

// Inference-side view of one image.
struct Prediction {
    Tensor map;          // smoothed anomaly map [h × w]
    Tensor raw_map;      // before smoothing
    double score = 0.0;  // image score from the unsmoothed map
    std::vector<RoutingDecision> decisions;
};

Prediction predict(Model& model, const VisionFeatures& features);

}  // namespace pmoe
