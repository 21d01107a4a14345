#include <cmath>

#include "doctest.h"
#include "promptmoe/error.hpp"
#include "promptmoe/objective.hpp"
#include "promptmoe/optim.hpp"
#include "testing_util.hpp"

using namespace pmoe;

namespace {

Tensor random_probs(std::size_t b, std::size_t e, Rng& rng) {
    Tensor p = rng.normal_tensor({b, e}, 2.0);
    return softmax(p, 1, 1.0);
}

// Written out longhand from the definition: α·E·Σ_j (1/B Σ_i p_ij)².
double balance_oracle(const std::vector<Tensor>& ps, double alpha) {
    double total = 0;
    for (const Tensor& p : ps) {
        const std::size_t b = p.rows(), e = p.cols();
        double acc = 0;
        for (std::size_t j = 0; j < e; ++j) {
            double f = 0;
            for (std::size_t i = 0; i < b; ++i) f += p.at(i, j);
            f /= static_cast<double>(b);
            acc += f * f;
        }
        total += alpha * static_cast<double>(e) * acc;
    }
    return total;
}

double decouple_oracle(const Tensor& pool, std::size_t e, std::size_t m, std::size_t d, double beta) {
    std::vector<std::vector<double>> s(e, std::vector<double>(d, 0.0));
    for (std::size_t j = 0; j < e; ++j) {
        for (std::size_t t = 0; t < m; ++t)
            for (std::size_t c = 0; c < d; ++c) s[j][c] += pool[(j * m + t) * d + c] / static_cast<double>(m);
        double n = 0;
        for (double v : s[j]) n += v * v;
        for (double& v : s[j]) v /= std::sqrt(n);
    }
    double acc = 0;
    for (std::size_t i = 0; i < e; ++i)
        for (std::size_t j = 0; j < e; ++j) {
            double g = 0;
            for (std::size_t c = 0; c < d; ++c) g += s[i][c] * s[j][c];
            const double diff = g - (i == j ? 1.0 : 0.0);
            acc += diff * diff;
        }
    return beta * acc;
}

Tensor binary_mask(std::size_t h, std::size_t w, Rng& rng) {
    Tensor m({h, w});
    for (double& v : m.values()) v = rng.uniform(0.0, 1.0) < 0.4 ? 1.0 : 0.0;
    return m;
}

}  // namespace

TEST_SUITE("balance loss") {
    TEST_CASE("uniform routing gives alpha") {
        for (std::size_t e : {2u, 4u, 8u}) {
            Tensor p({5, e});
            p.fill(1.0 / static_cast<double>(e));
            CHECK(std::abs(balance_loss(std::vector<Tensor>{p}, 0.01) - 0.01) < 1e-12);
        }
    }

    TEST_CASE("one-hot routing gives alpha times E") {
        Tensor p({6, 8});
        for (std::size_t i = 0; i < 6; ++i) p.at(i, 1) = 1.0;
        CHECK(std::abs(balance_loss(std::vector<Tensor>{p}, 0.01) - 0.08) < 1e-12);
    }

    TEST_CASE("random probabilities match the oracle") {
        Rng rng(1);
        for (int draw = 0; draw < 50; ++draw) {
            std::vector<Tensor> ps;
            const std::size_t layers = 1 + rng.index(4), b = 1 + rng.index(16), e = 2 + rng.index(7);
            for (std::size_t l = 0; l < layers; ++l) ps.push_back(random_probs(b, e, rng));
            CHECK(std::abs(balance_loss(ps, 0.3) - balance_oracle(ps, 0.3)) < 1e-12);
        }
    }

    TEST_CASE("no layers rejected") {
        CHECK_THROWS_AS(balance_loss(std::vector<Tensor>{}, 0.01), ParameterError);
    }

    TEST_CASE("gradient through probabilities") {
        Rng rng(2);
        auto r = testing::check_op(
            {{4, 5}, {4, 5}},
            [](const auto& v) { return balance_loss({ad::softmax_rows(v[0]), ad::softmax_rows(v[1])}, 0.5); }, rng);
        CHECK(r.max_rel_error < 1e-6);
    }
}

TEST_SUITE("decouple loss") {
    TEST_CASE("orthonormal expert means give zero") {
        const std::size_t e = 4, m = 3, d = 6;
        Tensor pool({e, m, d});
        // Every token of expert j is 2·e_j, so the means are orthogonal.
        for (std::size_t j = 0; j < e; ++j)
            for (std::size_t t = 0; t < m; ++t) pool[(j * m + t) * d + j] = 2.0;
        CHECK(std::abs(decouple_loss(std::vector<Tensor>{pool}, m, 0.005)) < 1e-9);
    }

    TEST_CASE("identical experts give beta E(E-1)") {
        Rng rng(3);
        for (std::size_t e : {2u, 4u, 8u}) {
            const std::size_t m = 5, d = 7;
            const Tensor one = rng.normal_tensor({m, d}, 1.0);
            Tensor pool({e, m, d});
            for (std::size_t j = 0; j < e; ++j)
                for (std::size_t i = 0; i < m * d; ++i) pool[j * m * d + i] = one[i];
            const double want = 0.005 * static_cast<double>(e * (e - 1));
            CHECK(std::abs(decouple_loss(std::vector<Tensor>{pool}, m, 0.005) - want) < 1e-9);
        }
    }

    TEST_CASE("random pools match the brute-force Gram") {
        Rng rng(4);
        for (int draw = 0; draw < 50; ++draw) {
            const std::size_t e = 2 + rng.index(7), m = 1 + rng.index(6), d = 2 + rng.index(10);
            const Tensor a = rng.normal_tensor({e, m, d}, 1.0), b = rng.normal_tensor({e, m, d}, 1.0);
            const double want = decouple_oracle(a, e, m, d, 0.2) + decouple_oracle(b, e, m, d, 0.2);
            CHECK(std::abs(decouple_loss(std::vector<Tensor>{a, b}, m, 0.2) - want) < 1e-9);
        }
    }

    TEST_CASE("zero-norm expert mean named") {
        Tensor pool({3, 2, 4});
        for (std::size_t i = 0; i < 8; ++i) pool[i] = 1.0;
        for (std::size_t i = 16; i < 24; ++i) pool[i] = 2.0;
        try {
            decouple_loss(std::vector<Tensor>{pool}, 2, 0.1);
            FAIL("expected an error");
        } catch (const EvaluationError& e) {
            CHECK(std::string(e.what()).find("expert 1") != std::string::npos);
        }
    }

    TEST_CASE("gradient through the pool") {
        Rng rng(5);
        auto r = testing::check_op({{4, 3, 5}}, [](const auto& v) { return decouple_loss({v[0]}, 3, 0.7); }, rng);
        CHECK(r.max_rel_error < 1e-6);
    }
}

TEST_SUITE("segmentation losses") {
    TEST_CASE("dice examples") {
        Tensor m({64, 64});
        for (std::size_t i = 0; i < 64 * 32; ++i) m[i] = 1.0;
        CHECK(dice_loss(m, m) <= 1e-3);
        CHECK(dice_loss(m, m) >= 0.0);
        Tensor inv = m;
        for (double& v : inv.values()) v = 1.0 - v;
        CHECK(std::abs(dice_loss(inv, m) - (1.0 - 1.0 / (64.0 * 64.0 + 1.0))) < 1e-12);
        CHECK_THROWS_AS(dice_loss(Tensor({4, 4}), Tensor({4, 5})), InputError);
    }

    TEST_CASE("dice random cases match the formula") {
        Rng rng(6);
        for (int draw = 0; draw < 30; ++draw) {
            const Tensor x = rng.uniform_tensor({9, 7}, 0.0, 1.0);
            const Tensor m = binary_mask(9, 7, rng);
            double inter = 0, sx = 0, sm = 0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                inter += x[i] * m[i];
                sx += x[i];
                sm += m[i];
            }
            CHECK(std::abs(dice_loss(x, m) - (1.0 - (2 * inter + 1) / (sx + sm + 1))) < 1e-9);
        }
    }

    TEST_CASE("focal with gamma 0 and alpha 0.5 is half the BCE") {
        Rng rng(7);
        const Tensor x = rng.uniform_tensor({6, 6}, 0.01, 0.99);
        const Tensor m = binary_mask(6, 6, rng);
        double bce = 0;
        for (std::size_t i = 0; i < x.size(); ++i) bce -= m[i] * std::log(x[i]) + (1 - m[i]) * std::log(1 - x[i]);
        bce /= static_cast<double>(x.size());
        CHECK(std::abs(focal_loss(x, m, 0.0, 0.5) - 0.5 * bce) < 1e-12);
    }

    TEST_CASE("confident correct prediction has near-zero focal loss") {
        Rng rng(8);
        const Tensor m = binary_mask(8, 8, rng);
        Tensor x = m;
        for (double& v : x.values()) v = v > 0.5 ? 0.999 : 0.001;
        CHECK(focal_loss(x, m) < 1e-4);
    }

    TEST_CASE("focal and dice gradients on a 4x4 map") {
        Rng rng(9);
        const Tensor m = binary_mask(4, 4, rng);
        auto r = testing::check_op({{4, 4}}, [&](const auto& v) { return focal_loss(ad::softmax_rows(v[0]), m); }, rng);
        CHECK(r.max_rel_error < 1e-4);
        r = testing::check_op({{4, 4}}, [&](const auto& v) { return dice_loss(v[0], m); }, rng);
        CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_SUITE("score loss") {
    TEST_CASE("examples") {
        CHECK(std::abs(bce_score_loss(0.5, 1.0) - std::log(2.0)) < 1e-12);
        CHECK(std::abs(bce_score_loss(0.5, 0.0) - std::log(2.0)) < 1e-12);
        CHECK(std::abs(bce_score_loss(0.9, 0.0) - 2.302585093) < 1e-8);
        CHECK(bce_score_loss(1.0 - 1e-9, 1.0) < 1e-5);
        CHECK(std::isfinite(bce_score_loss(1.0, 0.0)));
    }

    TEST_CASE("gradient") {
        Rng rng(10);
        for (double label : {0.0, 1.0}) {
            auto r = testing::check_op(
                {{1, 2}},
                [&](const auto& v) { return bce_score_loss(ad::select(ad::reshape(ad::softmax_rows(v[0]), {2}), {0}), label); },
                rng);
            CHECK(r.max_rel_error < 1e-6);
        }
    }
}

TEST_SUITE("total loss") {
    auto s = [](double v) { return ad::constant(Tensor::scalar(v)); };

    TEST_CASE("all zero parts sum to zero") {
        const LossTerms t = total_loss(s(0), s(0), s(0), s(0), s(0));
        CHECK(t.values().total == 0.0);
    }

    TEST_CASE("breakdown sums to total") {
        Rng rng(11);
        for (int draw = 0; draw < 20; ++draw) {
            const double v[5] = {rng.uniform(0, 3), rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 0.1),
                                 rng.uniform(0, 0.1)};
            const LossBreakdown b = total_loss(s(v[0]), s(v[1]), s(v[2]), s(v[3]), s(v[4])).values();
            CHECK(std::abs(b.bce + b.dice + b.focal + b.balance + b.decouple - b.total) < 1e-9);
            CHECK(b.bce == v[0]);
            CHECK(b.decouple == v[4]);
        }
    }

    TEST_CASE("non-finite part is named") {
        try {
            total_loss(s(0), s(0), s(NAN), s(0), s(0));
            FAIL("expected an error");
        } catch (const EvaluationError& e) {
            CHECK(std::string(e.what()).find("focal") != std::string::npos);
        }
    }

    TEST_CASE("loss config validation") {
        LossConfig c;
        CHECK_NOTHROW(c.validate());
        c.alpha = -1;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.focal_alpha = 1.5;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
}
