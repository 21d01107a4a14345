#include "promptmoe/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "promptmoe/error.hpp"

namespace pmoe {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_integer(const std::string& key, const std::string& v) {
    T out{};
    const std::string t = trim(v);
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size())
        throw ConfigError("key '" + key + "': '" + v + "' is not a non-negative integer");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    try {
        std::size_t used = 0;
        const double d = std::stod(t, &used);
        if (used != t.size()) throw std::invalid_argument(t);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not a number");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return false;
    throw ConfigError("key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt_real(double d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

struct Field {
    const char* section;
    const char* key;
    const char* note;  // paper-scale value or allowed values
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define PMOE_SIZE(sec, name, member, note)                                                              \
    Field{sec, name, note, [](RunConfig& c, const std::string& v) { c.member = parse_integer<std::size_t>(name, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); }}
#define PMOE_U64(sec, name, member, note)                                                                   \
    Field{sec, name, note, [](RunConfig& c, const std::string& v) { c.member = parse_integer<std::uint64_t>(name, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); }}
#define PMOE_REAL(sec, name, member, note)                                                  \
    Field{sec, name, note, [](RunConfig& c, const std::string& v) { c.member = parse_real(name, v); }, \
          [](const RunConfig& c) { return fmt_real(c.member); }}
#define PMOE_BOOL(sec, name, member, note)                                                  \
    Field{sec, name, note, [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); }, \
          [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        PMOE_SIZE("encoder", "image_height", model.encoder.image_height, "paper: 518"),
        PMOE_SIZE("encoder", "image_width", model.encoder.image_width, "paper: 518"),
        PMOE_SIZE("encoder", "patch_size", model.encoder.patch_size, "paper: 14"),
        PMOE_SIZE("encoder", "depth", model.encoder.depth, "paper: 24"),
        PMOE_SIZE("encoder", "vision_dim", model.encoder.vision_dim, "D_x"),
        PMOE_SIZE("encoder", "token_dim", model.encoder.token_dim, "D"),
        PMOE_SIZE("encoder", "joint_dim", model.encoder.joint_dim, "D_joint"),
        Field{"encoder", "layer_taps", "paper: 6,12,18,24",
              [](RunConfig& c, const std::string& v) {
                  c.model.encoder.layer_taps.clear();
                  for (const auto& s : parse_list(v))
                      c.model.encoder.layer_taps.push_back(parse_integer<std::size_t>("layer_taps", s));
              },
              [](const RunConfig& c) {
                  std::vector<std::string> s;
                  for (auto l : c.model.encoder.layer_taps) s.push_back(std::to_string(l));
                  return join(s);
              }},
        PMOE_U64("encoder", "seed", model.encoder.seed, "fixed backbone weights"),
        PMOE_SIZE("encoder", "vision_heads", model.encoder.vision_heads, ""),
        PMOE_SIZE("encoder", "text_depth", model.encoder.text_depth, ""),
        PMOE_SIZE("encoder", "text_heads", model.encoder.text_heads, ""),
        PMOE_SIZE("encoder", "max_context", model.encoder.max_context, "paper: 77"),

        PMOE_SIZE("vgmop", "num_experts", model.vgmop.num_experts, "E, paper: 8"),
        PMOE_SIZE("vgmop", "top_k", model.vgmop.top_k, "k, paper: 4"),
        PMOE_SIZE("vgmop", "num_queries", model.vgmop.num_queries, "N_q, paper: 8"),
        PMOE_SIZE("vgmop", "normal_len", model.vgmop.normal_len, "M_n, paper: 5"),
        PMOE_SIZE("vgmop", "abnormal_len", model.vgmop.abnormal_len, "M_a, paper: 6"),
        PMOE_SIZE("vgmop", "context_len", model.vgmop.context_len, "M_q, paper: 8"),
        PMOE_SIZE("vgmop", "heads", model.vgmop.heads, "paper: 8"),
        PMOE_SIZE("vgmop", "router_hidden", model.vgmop.router_hidden, "paper: 256"),
        PMOE_BOOL("vgmop", "shared_pool", model.vgmop.shared_pool, ""),
        PMOE_BOOL("vgmop", "shared_cross_attention", model.vgmop.shared_cross_attention, ""),
        Field{"vgmop", "mode", "mixture | static_prompt",
              [](RunConfig& c, const std::string& v) {
                  const std::string t = trim(v);
                  if (t == "mixture")
                      c.model.vgmop.mode = PromptMode::mixture;
                  else if (t == "static_prompt")
                      c.model.vgmop.mode = PromptMode::static_prompt;
                  else
                      throw ConfigError("key 'mode': '" + v + "' is not mixture or static_prompt");
              },
              [](const RunConfig& c) {
                  return std::string(c.model.vgmop.mode == PromptMode::mixture ? "mixture" : "static_prompt");
              }},

        PMOE_REAL("loss", "alpha", model.loss.alpha, "paper: 0.01"),
        PMOE_REAL("loss", "beta", model.loss.beta, "paper: 0.005"),
        PMOE_REAL("loss", "focal_gamma", model.loss.focal_gamma, ""),
        PMOE_REAL("loss", "focal_alpha", model.loss.focal_alpha, ""),
        PMOE_REAL("loss", "dice_eps", model.loss.dice_eps, ""),

        PMOE_REAL("scoring", "tau", model.scoring.tau, "paper: 0.07"),
        PMOE_REAL("scoring", "tau_prime", model.scoring.tau_prime, "paper: 0.01"),
        PMOE_REAL("scoring", "gaussian_sigma", model.scoring.gaussian_sigma, "paper: 4"),
        PMOE_BOOL("scoring", "divide_by_layers", model.scoring.divide_by_layers, ""),

        PMOE_SIZE("train", "epochs", train.epochs, "paper: 15"),
        PMOE_SIZE("train", "batch_size", train.batch_size, "paper: 16"),
        PMOE_REAL("train", "lr", train.lr, "paper: 0.001"),
        PMOE_SIZE("train", "warmup_epochs", train.warmup_epochs, "paper: 3"),
        PMOE_U64("train", "seed", train.seed, ""),
        PMOE_SIZE("train", "eval_every", train.eval_every, "0 = off"),
        PMOE_REAL("train", "beta1", train.beta1, "paper: 0.6"),
        PMOE_REAL("train", "beta2", train.beta2, "paper: 0.999"),

        PMOE_SIZE("data", "n_per_class", data.n_per_class, ""),
        PMOE_REAL("data", "anomaly_rate", data.anomaly_rate, ""),
        PMOE_U64("data", "seed", data.seed, ""),
        Field{"data", "train_classes", "",
              [](RunConfig& c, const std::string& v) { c.data.train_classes = parse_list(v); },
              [](const RunConfig& c) { return join(c.data.train_classes); }},
        Field{"data", "test_classes", "",
              [](RunConfig& c, const std::string& v) { c.data.test_classes = parse_list(v); },
              [](const RunConfig& c) { return join(c.data.test_classes); }},

        PMOE_SIZE("eval", "pro_thresholds", eval.pro_thresholds, "0 = every distinct value"),
    };
    return f;
}

#undef PMOE_SIZE
#undef PMOE_U64
#undef PMOE_REAL
#undef PMOE_BOOL

const Field& find_field(const std::string& section, const std::string& key) {
    for (const auto& f : fields())
        if (section == f.section && key == f.key) return f;
    throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (data.n_per_class == 0) throw ConfigError("n_per_class must be positive");
    if (!(data.anomaly_rate >= 0.0 && data.anomaly_rate <= 1.0)) throw ConfigError("anomaly_rate must lie in [0, 1]");
    if (data.train_classes.empty() || data.test_classes.empty()) throw ConfigError("train and test class lists must be non-empty");
    check_class_disjoint(data.train_classes, data.test_classes);
}

RunConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    RunConfig cfg;
    for (const auto& [section, body] : tree) {
        bool known = false;
        for (const auto& f : fields()) known = known || section == f.section;
        if (!known || !body.data().empty()) throw ConfigError("unknown config section or key '" + section + "'");
        for (const auto& [key, value] : body) find_field(section, key).set(cfg, value.data());
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : fields()) j[f.section][f.key] = f.get(cfg);
    return j;
}

RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig cfg;
    try {
        for (const auto& [section, body] : j.items())
            for (const auto& [key, value] : body.items()) find_field(section, key).set(cfg, value.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config snapshot: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string config_to_ini(const RunConfig& cfg) {
    std::string out;
    std::string current;
    for (const auto& f : fields()) {
        if (current != f.section) {
            out += (current.empty() ? "[" : "\n[") + std::string(f.section) + "]\n";
            current = f.section;
        }
        if (*f.note) out += "# " + std::string(f.note) + "\n";
        out += std::string(f.key) + " = " + f.get(cfg) + "\n";
    }
    return out;
}

void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
    const auto dot = dotted_key.find('.');
    if (dot == std::string::npos) throw ConfigError("override '" + dotted_key + "' must be section.key");
    find_field(dotted_key.substr(0, dot), dotted_key.substr(dot + 1)).set(cfg, value);
}

}  // namespace pmoe
