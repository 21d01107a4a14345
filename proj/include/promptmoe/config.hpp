#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmoe/data.hpp"
#include "promptmoe/model.hpp"
#include "promptmoe/trainer.hpp"

namespace pmoe {

struct DataConfig {
    std::size_t n_per_class = 40;
    double anomaly_rate = 0.5;
    std::uint64_t seed = 0;
    std::vector<std::string> train_classes{"A", "B", "C"};
    std::vector<std::string> test_classes{"D", "E"};
};

struct EvalConfig {
    std::size_t pro_thresholds = 200;
};

// Everything a run needs; every field has a desk-scale default.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;

    void validate() const;
};

// INI-style text: `[section]` headers and `key = value` lines; '#' and ';'
// start comments. Unknown sections or keys raise ConfigError naming them.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Snapshot used in checkpoint headers; round-trips through config_from_json.
nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);

// The full key list with current values, as a commented config file.
std::string config_to_ini(const RunConfig& cfg);

// Applies one `section.key=value` override.
void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

}  // namespace pmoe
