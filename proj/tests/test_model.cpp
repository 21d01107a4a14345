#include <cstdio>

#include "doctest.h"
#include "promptmoe/error.hpp"
#include "promptmoe/pipeline.hpp"

using namespace pmoe;

TEST_SUITE("model") {
    TEST_CASE("micro config gradient check over every trainable group") {
        const ModelConfig cfg = micro_model_config();
        Model model(cfg, 0);
        std::size_t entries = 0;
        for (const ParamGroup* p : model.params()) entries += p->value.size();

        const GradcheckReport r = model_gradcheck(cfg, {0, 1e-5, {}});
        CHECK(r.max_rel_error < 1e-4);
        CHECK(r.checked == entries);  // frozen encoder groups excluded
    }

    TEST_CASE("other parameter seeds stay within the conditioning floor") {
        // τ' = 0.01 makes the image term stiff, so central differences lose
        // digits on some draws; 1e-3 still separates a wrong gradient by
        // orders of magnitude (see the corruption case).
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const GradcheckReport r = model_gradcheck(micro_model_config(), {seed, 1e-5, {}});
            MESSAGE("seed " << seed << ": " << r.max_rel_error << " at " << r.worst_param);
            CHECK(r.max_rel_error < 1e-3);
        }
    }

    TEST_CASE("corrupted analytic gradient is caught and named") {
        GradcheckOptions opts;
        opts.corrupt = [](ParamRefs& ps) {
            for (ParamGroup* p : ps)
                if (p->name == "prompt.context") p->grad[0] += 0.5;
        };
        const GradcheckReport r = model_gradcheck(micro_model_config(), opts);
        CHECK(r.max_rel_error > 1e-2);
        CHECK(r.worst_param == "prompt.context");
        CHECK(r.worst_index == 0);
    }

    TEST_CASE("forward shapes and routing counts") {
        const ModelConfig cfg = micro_model_config();
        Model model(cfg, 1);
        Rng rng(2);
        const VisionFeatures f = model.encode(rng.uniform_tensor({16, 16, 3}, 0.0, 1.0));
        const Prediction p = predict(model, f);
        CHECK(p.map.rows() == 16);
        CHECK(p.map.cols() == 16);
        CHECK(p.decisions.size() == 2 * cfg.encoder.layer_taps.size());
        for (const auto& d : p.decisions) CHECK(d.selected.size() == cfg.vgmop.top_k);
        CHECK(max_abs_diff(gaussian_smooth(p.raw_map, cfg.scoring.gaussian_sigma), p.map) == 0.0);

        VisionFeatures missing = f;
        missing.per_layer.erase(2);
        CHECK_THROWS_AS(predict(model, missing), InputError);
        CHECK_THROWS_AS(model.batch_loss({}), ParameterError);
    }

    TEST_CASE("static prompt variant has no routing") {
        ModelConfig cfg = micro_model_config();
        cfg.vgmop.mode = PromptMode::static_prompt;
        Model model(cfg, 1);
        Rng rng(3);
        const Prediction p = predict(model, model.encode(rng.uniform_tensor({16, 16, 3}, 0.0, 1.0)));
        CHECK(p.decisions.empty());
        const GradcheckReport r = model_gradcheck(cfg, {0, 1e-5, {}});
        CHECK(r.max_rel_error < 1e-4);
    }
}
