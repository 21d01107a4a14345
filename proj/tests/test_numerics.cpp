#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "promptmoe/autodiff.hpp"
#include "promptmoe/error.hpp"
#include "promptmoe/optim.hpp"
#include "testing_util.hpp"

using namespace pmoe;

TEST_SUITE("matmul") {
    TEST_CASE("identity and dot product") {
        auto c = matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{3}, {4}}));
        CHECK(c == Tensor::matrix({{3}, {4}}));
        CHECK(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})) == Tensor::matrix({{11}}));
    }

    TEST_CASE("inner dimension mismatch") {
        CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
    }

    TEST_CASE("gradient matches central differences") {
        Rng rng(7);
        auto r = testing::check_op({{3, 4}, {4, 2}}, [](const auto& v) { return ad::matmul(v[0], v[1]); }, rng);
        CHECK(r.max_rel_error < 1e-6);
        CHECK(r.checked == 12 + 8);
    }
}

TEST_SUITE("softmax") {
    TEST_CASE("worked values") {
        auto s = softmax(Tensor::vector({0, 0, 0}), 0, 1.0);
        for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

        s = softmax(Tensor::vector({2, 1}), 0, 1.0);
        CHECK(std::abs(s[0] - 0.7311) < 1e-4);
        CHECK(std::abs(s[1] - 0.2689) < 1e-4);

        s = softmax(Tensor::vector({1, 1}), 0, 0.07);
        CHECK(s[0] == 0.5);
        CHECK(s[1] == 0.5);
    }

    TEST_CASE("non-positive temperature rejected") {
        CHECK_THROWS_AS(softmax(Tensor::vector({1, 2}), 0, 0.0), ParameterError);
        CHECK_THROWS_AS(softmax(Tensor::vector({1, 2}), 0, -1.0), ParameterError);
    }

    TEST_CASE("simplex and shift invariance along either axis") {
        Rng rng(11);
        for (int draw = 0; draw < 25; ++draw) {
            Tensor x = rng.normal_tensor({3, 5}, 3.0);
            for (std::size_t axis : {0u, 1u}) {
                const double t = rng.uniform(0.05, 2.0);
                Tensor y = softmax(x, axis, t);
                Tensor shifted = x;
                for (auto& v : shifted.values()) v += 17.5;
                CHECK(max_abs_diff(y, softmax(shifted, axis, t)) < 1e-12);
                const std::size_t outer = axis == 0 ? 5 : 3, len = axis == 0 ? 3 : 5;
                for (std::size_t o = 0; o < outer; ++o) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < len; ++i) {
                        const double v = axis == 0 ? y.at(i, o) : y.at(o, i);
                        CHECK(v > 0.0);
                        s += v;
                    }
                    CHECK(std::abs(s - 1.0) < 1e-6);
                }
            }
        }
    }
}

TEST_SUITE("topk_select") {
    TEST_CASE("worked examples") {
        auto t = topk_select(Tensor::vector({2, 1, 0, -1}), 2);
        CHECK(t.indices == std::vector<std::size_t>{0, 1});
        CHECK(std::abs(t.gates[0] - 0.7311) < 1e-4);
        CHECK(std::abs(t.gates[1] - 0.2689) < 1e-4);

        t = topk_select(Tensor::vector({5, 5, 5, 5}), 4);
        CHECK(t.indices == std::vector<std::size_t>{0, 1, 2, 3});
        for (double g : t.gates.values()) CHECK(g == 0.25);

        t = topk_select(Tensor::vector({1, 3, 3, 0}), 2);
        CHECK(t.indices == std::vector<std::size_t>{1, 2});
        CHECK(t.gates[0] == 0.5);
        CHECK(t.gates[1] == 0.5);
    }

    TEST_CASE("k out of range") {
        CHECK_THROWS_AS(topk_select(Tensor::vector({1, 2}), 3), ParameterError);
        CHECK_THROWS_AS(topk_select(Tensor::vector({1, 2}), 0), ParameterError);
    }

    TEST_CASE("gates form a k-sparse simplex") {
        Rng rng(3);
        for (int draw = 0; draw < 50; ++draw) {
            const std::size_t e = 2 + rng.index(10);
            const std::size_t k = 1 + rng.index(e);
            Tensor logits = rng.normal_tensor({e}, 2.0);
            auto t = topk_select(logits, k);
            CHECK(t.indices.size() == k);
            double s = 0.0;
            for (double g : t.gates.values()) {
                CHECK(g > 0.0);
                s += g;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
            // Every selected logit is >= every unselected one.
            double min_sel = INFINITY;
            for (auto i : t.indices) min_sel = std::min(min_sel, logits[i]);
            for (std::size_t j = 0; j < e; ++j) {
                if (std::find(t.indices.begin(), t.indices.end(), j) == t.indices.end()) CHECK(logits[j] <= min_sel);
            }
        }
    }

    TEST_CASE("gradient reaches selected logits only") {
        ParamGroup logits("z", Tensor::vector({0.3, -1.2, 2.0, 0.9, -0.1}));
        zero_grads({&logits});
        auto t = ad::topk_select(ad::leaf(logits), 2);
        ad::backward(ad::sum(ad::mul(t.gates, ad::constant(Tensor::vector({1.0, -2.0})))));
        CHECK(t.indices == std::vector<std::size_t>{2, 3});
        CHECK(logits.grad[0] == 0.0);
        CHECK(logits.grad[1] == 0.0);
        CHECK(logits.grad[4] == 0.0);
        CHECK(logits.grad[2] != 0.0);
        CHECK(logits.grad[3] != 0.0);
    }
}

TEST_SUITE("adam") {
    TEST_CASE("zero gradient leaves the parameter unchanged") {
        ParamGroup p("p", Tensor::vector({1.5, -2.0}));
        auto s = AdamState::for_param(p, 1e-3);
        for (int i = 0; i < 3; ++i) CHECK(adam_step(p, s) == StepResult::updated);
        CHECK(p.value == Tensor::vector({1.5, -2.0}));
        CHECK(s.step == 3);
    }

    TEST_CASE("first step moves by about lr") {
        // m̂ = g, v̂ = g², update = lr · g / (|g| + eps).
        ParamGroup p("p", Tensor::vector({1.0}));
        p.grad[0] = 1.0;
        auto s = AdamState::for_param(p, 1e-3);
        adam_step(p, s);
        CHECK(std::abs(p.value[0] - (1.0 - 1e-3 / (1.0 + 1e-8))) < 1e-15);
        CHECK(std::abs(p.value[0] - 0.999) < 1e-9);
    }

    TEST_CASE("frozen parameter is skipped") {
        ParamGroup p("enc", Tensor::vector({1.0}), true);
        p.grad[0] = 5.0;
        auto s = AdamState::for_param(p, 1e-3);
        CHECK(adam_step(p, s) == StepResult::skipped_frozen);
        CHECK(p.value[0] == 1.0);
        CHECK(s.step == 0);
    }

    TEST_CASE("identical runs are bit-identical") {
        auto run = [] {
            Rng rng(42);
            ParamGroup p("p", rng.normal_tensor({4, 3}, 1.0));
            Adam opt({&p}, 1e-2);
            for (int it = 0; it < 20; ++it) {
                p.zero_grad();
                auto loss = ad::sum(ad::mul(ad::leaf(p), ad::leaf(p)));
                ad::backward(loss);
                opt.step();
            }
            return p.value;
        };
        CHECK(run() == run());
    }

    TEST_CASE("betas outside (0,1) rejected") {
        ParamGroup p("p", Tensor::vector({1.0}));
        CHECK_THROWS_AS(AdamState::for_param(p, 1e-3, 1.0, 0.999), ParameterError);
    }
}

TEST_SUITE("gradcheck") {
    TEST_CASE("square function") {
        ParamGroup x("x", Tensor::vector({3.0}));
        auto r = finite_diff_gradcheck([&] { return ad::mul(ad::leaf(x), ad::leaf(x)); }, {&x}, 1e-6);
        CHECK(std::abs(x.grad[0] - 6.0) < 1e-12);
        CHECK(std::abs(r.worst_numeric - 6.0) < 1e-8);
        CHECK(r.max_rel_error < 1e-7);
    }

    TEST_CASE("frozen groups are excluded") {
        ParamGroup x("x", Tensor::vector({2.0}));
        ParamGroup frozen("enc", Tensor::vector({1.0}), true);
        // The frozen weight enters through a non-smooth path; it must not matter.
        auto f = [&] { return ad::mul(ad::leaf(x), ad::relu(ad::leaf(frozen))); };
        auto r = finite_diff_gradcheck(f, {&x, &frozen}, 1e-6);
        CHECK(r.checked == 1);
        CHECK(r.max_rel_error < 1e-7);
    }

    TEST_CASE("corrupted analytic gradient is detected") {
        ParamGroup x("x", Tensor::vector({3.0}));
        auto r = finite_diff_gradcheck([&] { return ad::mul(ad::leaf(x), ad::leaf(x)); }, {&x}, 1e-6,
                                       [](ParamRefs& ps) { ps[0]->grad[0] += 1.0; });
        CHECK(r.max_rel_error > 0.1);
        CHECK(r.worst_param == "x");
    }

    TEST_CASE("epsilon outside [1e-6, 1e-3] rejected") {
        ParamGroup x("x", Tensor::vector({3.0}));
        CHECK_THROWS_AS(finite_diff_gradcheck([&] { return ad::leaf(x); }, {&x}, 1e-2), ParameterError);
    }

    TEST_CASE("non-finite objective") {
        ParamGroup x("x", Tensor::vector({0.0}));
        auto f = [&] { return ad::constant(Tensor::scalar(NAN)); };
        CHECK_THROWS_AS(finite_diff_gradcheck(f, {&x}, 1e-6), EvaluationError);
    }
}

// Property: every differentiable op agrees with central differences on random
// small shapes.
TEST_CASE("every op passes the finite-difference oracle on random draws") {
    Rng rng(2024);
    using V = std::vector<ad::Var>;
    for (int draw = 0; draw < 20; ++draw) {
        const std::size_t m = 1 + rng.index(4), k = 1 + rng.index(4), n = 1 + rng.index(4);
        CAPTURE(draw);
        CHECK(testing::check_op({{m, k}, {k, n}}, [](const V& v) { return ad::matmul(v[0], v[1]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}, {n, k}}, [](const V& v) { return ad::matmul_nt(v[0], v[1]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}, {m, k}}, [](const V& v) { return ad::add(v[0], v[1]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}, {m, k}}, [](const V& v) { return ad::sub(v[0], v[1]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}, {m, k}}, [](const V& v) { return ad::mul(v[0], v[1]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [](const V& v) { return ad::scale(v[0], -2.5); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}, {k}}, [](const V& v) { return ad::add_row(v[0], v[1]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [](const V& v) { return ad::relu(v[0]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [](const V& v) { return ad::gelu(v[0]); }, rng).max_rel_error < 1e-4);
        const double t = rng.uniform(0.5, 2.0);
        CHECK(testing::check_op({{m, k + 1}}, [t](const V& v) { return ad::softmax_rows(v[0], t); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k + 1}}, [](const V& v) { return ad::row_normalize(v[0]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [](const V& v) { return ad::mean_rows(v[0]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [](const V& v) { return ad::mean(v[0]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [](const V& v) { return ad::max_all(v[0]); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}, {n, k}}, [](const V& v) { return ad::concat_rows({v[0], v[1]}); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}, {m, n}}, [](const V& v) { return ad::concat_cols({v[0], v[1]}); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m + 2, k}}, [](const V& v) { return ad::slice_rows(v[0], 1, 2); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k + 2}}, [](const V& v) { return ad::slice_cols(v[0], 1, 2); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [k](const V& v) { return ad::column(v[0], k - 1); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{m, k}}, [m, k](const V& v) { return ad::reshape(v[0], {k * m}); }, rng).max_rel_error < 1e-4);
        CHECK(testing::check_op({{3}, {m, k}, {m, k}, {m, k}},
                                [](const V& v) { return ad::weighted_sum(v[0], {v[1], v[2], v[3]}); }, rng)
                  .max_rel_error < 1e-4);
        const std::size_t e = 3 + rng.index(4);
        CHECK(testing::check_op({{e}}, [](const V& v) { return ad::topk_select(v[0], 2).gates; }, rng).max_rel_error < 1e-4);
    }
}

TEST_CASE("non-finite values rejected at operation boundaries") {
    CHECK_THROWS_AS(softmax(Tensor::vector({1.0, NAN}), 0), EvaluationError);
    CHECK_THROWS_AS(topk_select(Tensor::vector({INFINITY, 1.0}), 1), EvaluationError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}
