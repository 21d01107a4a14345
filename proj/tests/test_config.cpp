#include <string>

#include "doctest.h"
#include "promptmoe/config.hpp"
#include "promptmoe/error.hpp"

using namespace pmoe;

namespace {

std::string message_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_SUITE("config") {
    TEST_CASE("empty text gives the desk-scale defaults") {
        const RunConfig c = parse_config("");
        CHECK(c.model.encoder.image_height == 64);
        CHECK(c.model.vgmop.num_experts == 8);
        CHECK(c.model.vgmop.top_k == 4);
        CHECK(c.model.loss.alpha == 0.01);
        CHECK(c.train.epochs == 15);
        CHECK(c.train.batch_size == 16);
        CHECK(c.data.train_classes == std::vector<std::string>{"A", "B", "C"});
        CHECK(c.data.test_classes == std::vector<std::string>{"D", "E"});
    }

    TEST_CASE("sections, comments and typed values") {
        const RunConfig c = parse_config(R"(
# desk run
[encoder]
layer_taps = 2,4
[vgmop]
num_experts = 6
top_k = 3
shared_pool = true
mode = static_prompt
[loss]
alpha = 0
[train]
lr = 2.5e-3
[data]
test_classes = D
)");
        CHECK(c.model.encoder.layer_taps == std::vector<std::size_t>{2, 4});
        CHECK(c.model.vgmop.num_experts == 6);
        CHECK(c.model.vgmop.top_k == 3);
        CHECK(c.model.vgmop.shared_pool);
        CHECK(c.model.vgmop.mode == PromptMode::static_prompt);
        CHECK(c.model.loss.alpha == 0.0);
        CHECK(c.train.lr == 2.5e-3);
        CHECK(c.data.test_classes == std::vector<std::string>{"D"});
    }

    TEST_CASE("unknown keys and sections are named") {
        CHECK(message_of("[vgmop]\nnum_expert = 3\n").find("vgmop.num_expert") != std::string::npos);
        CHECK(message_of("[optimizer]\nlr = 1\n").find("optimizer") != std::string::npos);
        CHECK(message_of("stray = 1\n").find("stray") != std::string::npos);
    }

    TEST_CASE("bad values rejected") {
        CHECK(message_of("[train]\nepochs = many\n").find("epochs") != std::string::npos);
        CHECK(message_of("[train]\nepochs = -2\n").find("epochs") != std::string::npos);
        CHECK(message_of("[loss]\nalpha = 1x\n").find("alpha") != std::string::npos);
        CHECK(message_of("[vgmop]\nshared_pool = maybe\n").find("shared_pool") != std::string::npos);
        CHECK(message_of("[vgmop]\nmode = dense\n").find("mode") != std::string::npos);
        CHECK_FALSE(message_of("[vgmop]\ntop_k = 9\n").empty());
        CHECK_FALSE(message_of("[encoder]\nlayer_taps = 1,9\n").empty());
        CHECK_THROWS_AS(parse_config("[data]\ntest_classes = C,D\n"), ValidationError);
        CHECK_THROWS_AS(load_config("/nonexistent/cfg.ini"), ConfigError);
    }

    TEST_CASE("ini dump, json snapshot and overrides round trip") {
        RunConfig c;
        set_config_value(c, "vgmop.num_experts", "5");
        set_config_value(c, "vgmop.top_k", "2");
        set_config_value(c, "loss.beta", "0.125");
        set_config_value(c, "train.seed", "18446744073709551615");
        set_config_value(c, "scoring.divide_by_layers", "false");
        CHECK(c.model.vgmop.num_experts == 5);
        CHECK(c.train.seed == 18446744073709551615ull);
        CHECK_THROWS_AS(set_config_value(c, "vgmop", "5"), ConfigError);
        CHECK_THROWS_AS(set_config_value(c, "vgmop.nope", "5"), ConfigError);

        const std::string ini = config_to_ini(c);
        CHECK(ini.find("# paper: 0.005") != std::string::npos);
        const RunConfig from_ini = parse_config(ini);
        CHECK(config_to_json(from_ini) == config_to_json(c));
        const RunConfig from_json = config_from_json(config_to_json(c));
        CHECK(config_to_json(from_json) == config_to_json(c));
        CHECK(from_json.model.loss.beta == 0.125);
        CHECK_FALSE(from_json.model.scoring.divide_by_layers);

        nlohmann::json bad = config_to_json(c);
        bad["train"]["warp"] = "1";
        CHECK_THROWS_AS(config_from_json(bad), ConfigError);
    }
}
