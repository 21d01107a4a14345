#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "promptmoe/error.hpp"
#include "promptmoe/pipeline.hpp"
#include "promptmoe/trainer.hpp"

using namespace pmoe;
namespace fs = std::filesystem;

namespace {

// Noise images; anomalous ones carry a bright square matching their mask.
std::vector<TrainSample> toy_data(const Model& model, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor img = rng.uniform_tensor({16, 16, 3}, 0.2, 0.5);
        Tensor mask({16, 16});
        const int label = static_cast<int>(i % 2);
        if (label) {
            const std::size_t y = rng.index(11), x = rng.index(11);
            for (std::size_t yy = y; yy < y + 5; ++yy)
                for (std::size_t xx = x; xx < x + 5; ++xx) {
                    mask.at(yy, xx) = 1.0;
                    for (std::size_t c = 0; c < 3; ++c) img[(yy * 16 + xx) * 3 + c] = 0.95;
                }
        }
        out.push_back({model.encode(img), mask, label, "T"});
    }
    return out;
}

std::vector<Tensor> snapshot(const ParamRefs& ps) {
    std::vector<Tensor> v;
    for (const ParamGroup* p : ps) v.push_back(p->value);
    return v;
}

TrainConfig quick(std::size_t epochs) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 4;
    c.warmup_epochs = std::min<std::size_t>(1, epochs);
    c.lr = 3e-3;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

}  // namespace

TEST_SUITE("lr schedule") {
    TEST_CASE("linear per-step warmup then constant") {
        TrainConfig c;
        c.lr = 1e-3;
        c.warmup_epochs = 3;
        const std::size_t spe = 7, warm = 21;
        CHECK(lr_schedule(0, spe, c) == doctest::Approx(1e-3 / warm).epsilon(1e-15));
        CHECK(lr_schedule(0, spe, c) > 0.0);
        CHECK(lr_schedule(warm - 1, spe, c) == 1e-3);
        CHECK(lr_schedule(warm, spe, c) == 1e-3);
        CHECK(lr_schedule(500, spe, c) == 1e-3);
        CHECK(std::abs(lr_schedule(warm / 2, spe, c) - 5e-4) <= 1e-3 / warm);
        for (std::size_t s = 1; s < 60; ++s) CHECK(lr_schedule(s, spe, c) >= lr_schedule(s - 1, spe, c));
        c.warmup_epochs = 0;
        CHECK(lr_schedule(0, spe, c) == 1e-3);
    }

    TEST_CASE("config validation") {
        TrainConfig c;
        c.warmup_epochs = 20;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.batch_size = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.beta1 = 1.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
}

TEST_SUITE("training") {
    TEST_CASE("zero epochs leaves parameters unchanged") {
        Model model(micro_model_config(), 0);
        const auto data = toy_data(model, 8, 1);
        const auto before = snapshot(model.params());
        const TrainResult r = train(model, data, quick(0));
        CHECK(r.steps == 0);
        CHECK(r.log.empty());
        CHECK(snapshot(model.params()) == before);
    }

    TEST_CASE("loss falls, frozen weights stay, log is complete") {
        Model model(micro_model_config(), 0);
        const auto data = toy_data(model, 18, 2);
        const auto frozen = snapshot(model.frozen_params());
        const auto before = snapshot(model.params());
        std::ostringstream csv;
        std::vector<std::size_t> evals;
        TrainConfig cfg = quick(13);
        cfg.eval_every = 5;
        TrainHooks hooks;
        hooks.loss_csv = &csv;
        hooks.on_eval = [&](std::size_t e) { evals.push_back(e); };
        const TrainResult r = train(model, data, cfg, hooks);
        CHECK(r.steps == 13 * 4);  // 18 / 4 rounds down
        REQUIRE(r.log.size() == 52);
        CHECK(evals == std::vector<std::size_t>{5, 10});

        double first = 0, last = 0;
        for (std::size_t i = 0; i < 8; ++i) {
            first += r.log[i].loss.total;
            last += r.log[r.log.size() - 1 - i].loss.total;
        }
        CHECK(last < first);
        for (const auto& row : r.log) {
            const auto& b = row.loss;
            CHECK(std::abs(b.bce + b.dice + b.focal + b.balance + b.decouple - b.total) < 1e-9);
            CHECK(row.lr == lr_schedule(row.step, 4, cfg));
        }

        CHECK(snapshot(model.frozen_params()) == frozen);
        CHECK(snapshot(model.params()) != before);
        for (const ParamGroup* p : model.frozen_params()) CHECK(p->frozen);

        std::istringstream is(csv.str());
        std::string line;
        std::getline(is, line);
        CHECK(line == "step,lr,bce,dice,focal,balance,decouple,total");
        std::size_t rows = 0;
        while (std::getline(is, line)) ++rows;
        CHECK(rows == 52);
    }

    TEST_CASE("identical runs are bit-identical") {
        auto run = [](std::vector<TrainLogRow>& log) {
            Model model(micro_model_config(), 5);
            const auto data = toy_data(model, 8, 3);
            log = train(model, data, quick(2)).log;
            return snapshot(model.params());
        };
        std::vector<TrainLogRow> la, lb;
        const auto a = run(la), b = run(lb);
        CHECK(a == b);
        REQUIRE(la.size() == lb.size());
        for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i].loss.total == lb[i].loss.total);
    }

    TEST_CASE("bad data and non-finite losses") {
        Model model(micro_model_config(), 0);
        auto data = toy_data(model, 8, 4);
        auto normals = data;
        for (auto& s : normals) {
            s.label = 0;
            s.mask.fill(0.0);
        }
        CHECK_THROWS_AS(train(model, normals, quick(1)), DatasetError);
        TrainConfig big = quick(1);
        big.batch_size = 9;
        CHECK_THROWS_AS(train(model, data, big), ConfigError);

        model.vgmop().context().value[0] = NAN;
        std::size_t aborted_at = 999;
        TrainHooks hooks;
        hooks.on_abort = [&](std::size_t s) { aborted_at = s; };
        CHECK_THROWS_AS(train(model, data, quick(1), hooks), EvaluationError);
        CHECK(aborted_at == 0);
    }
}

TEST_SUITE("checkpoint") {
    struct Tmp {
        fs::path dir = fs::temp_directory_path() / "pmoe_test_ckpt";
        Tmp() {
            fs::remove_all(dir);
            fs::create_directories(dir);
        }
        ~Tmp() { fs::remove_all(dir); }
    };

    TEST_CASE("round trip is bit exact and lists exactly the trainable groups") {
        Tmp t;
        RunConfig cfg;
        cfg.model = micro_model_config();
        cfg.train.seed = 3;
        auto model = make_model(cfg);
        const auto data = toy_data(*model, 8, 5);
        train(*model, data, quick(1));
        save_model(t.dir / "m.ckpt", *model, cfg, 2);

        const Checkpoint ck = load_checkpoint(t.dir / "m.ckpt");
        CHECK(ck.step == 2);
        CHECK(ck.seed == 3);
        CHECK(ck.format_version == kCheckpointVersion);
        const ParamRefs ps = model->params();
        REQUIRE(ck.names.size() == ps.size());
        for (std::size_t i = 0; i < ps.size(); ++i) {
            CHECK(ck.names[i] == ps[i]->name);
            CHECK(ck.values[i] == ps[i]->value);
        }
        for (const ParamGroup* f : model->frozen_params())
            CHECK(std::find(ck.names.begin(), ck.names.end(), f->name) == ck.names.end());

        RunConfig back;
        auto loaded = load_model(t.dir / "m.ckpt", &back);
        CHECK(config_to_json(back) == config_to_json(cfg));
        CHECK(snapshot(loaded->params()) == snapshot(model->params()));
        CHECK(snapshot(loaded->frozen_params()) == snapshot(model->frozen_params()));

        ParamRefs frozen_too = model->params();
        frozen_too.push_back(model->frozen_params().front());
        CHECK_THROWS_AS(save_checkpoint(t.dir / "x.ckpt", frozen_too, {}, 0, 0), InternalError);
    }

    TEST_CASE("truncation, bad magic, version and shape mismatch") {
        Tmp t;
        Model model(micro_model_config(), 1);
        save_checkpoint(t.dir / "m.ckpt", model.params(), nlohmann::json::object(), 1, 0);
        const std::string bytes = slurp(t.dir / "m.ckpt");

        for (std::size_t cut : {bytes.size() - 1, bytes.size() - 100, std::size_t{20}, std::size_t{4}}) {
            spit(t.dir / "cut.ckpt", bytes.substr(0, cut));
            CHECK_THROWS_AS(load_checkpoint(t.dir / "cut.ckpt"), FormatError);
        }
        spit(t.dir / "long.ckpt", bytes + "xx");
        CHECK_THROWS_AS(load_checkpoint(t.dir / "long.ckpt"), FormatError);
        std::string bad = bytes;
        bad[0] = 'X';
        spit(t.dir / "magic.ckpt", bad);
        CHECK_THROWS_AS(load_checkpoint(t.dir / "magic.ckpt"), FormatError);
        CHECK_THROWS_AS(load_checkpoint(t.dir / "absent.ckpt"), FormatError);

        std::uint64_t hlen = 0;
        for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | static_cast<unsigned char>(bytes[8 + i]);
        nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));
        header["format_version"] = 99;
        const std::string hs = header.dump();
        std::string rewritten = bytes.substr(0, 8);
        for (int i = 0; i < 8; ++i) rewritten.push_back(static_cast<char>((hs.size() >> (8 * i)) & 0xff));
        rewritten += hs + bytes.substr(16 + hlen);
        spit(t.dir / "ver.ckpt", rewritten);
        CHECK_THROWS_AS(load_checkpoint(t.dir / "ver.ckpt"), FormatError);

        // A failed apply must not leave a half-loaded model.
        ModelConfig other = micro_model_config();
        other.vgmop.num_experts = 3;
        Model m2(other, 2);
        const auto before = snapshot(m2.params());
        CHECK_THROWS_AS(apply_checkpoint(load_checkpoint(t.dir / "m.ckpt"), m2.params()), FormatError);
        CHECK(snapshot(m2.params()) == before);
    }
}
