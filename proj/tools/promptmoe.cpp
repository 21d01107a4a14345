// promptmoe: data generation, training, evaluation and diagnostics.
//
// Exit codes: 0 success, 1 user error (bad flags, config, data, checkpoint
// file), 2 internal or numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "promptmoe/config.hpp"
#include "promptmoe/error.hpp"
#include "promptmoe/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pmoe;

namespace {

constexpr int kUserError = 1;
constexpr int kFailure = 2;

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("promptmoe");
    logger->set_pattern("[%H:%M:%S] %^%l%$ %v");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* lvl = std::getenv("PROMPTMOE_LOG")) {
        const auto parsed = spdlog::level::from_str(lvl);
        // from_str maps unknown names to off; only "off" itself should do that.
        if (parsed != spdlog::level::off || std::string(lvl) == "off") spdlog::set_level(parsed);
        else spdlog::warn("PROMPTMOE_LOG='{}' is not a level (trace, debug, info, warn, error, off)", lvl);
    }
}

struct ConfigFlags {
    std::string path;
    std::vector<std::string> overrides;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", path, "INI config file; omitted keys keep their defaults")
            ->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "Override one key, e.g. --set vgmop.top_k=2 (repeatable)");
    }

    RunConfig load() const {
        RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("override '" + kv + "' must be section.key=value");
            set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

// A directory argument means <dir>/<split>.json.
fs::path manifest_path(const fs::path& data, const std::string& split) {
    return fs::is_directory(data) ? data / (split + ".json") : data;
}

void apply_ablation(RunConfig& cfg, const std::string& name) {
    if (name.empty()) return;
    if (name == "static_prompt") cfg.model.vgmop.mode = PromptMode::static_prompt;
    else if (name == "shared_pool") cfg.model.vgmop.shared_pool = true;
    else if (name == "shared_attention") cfg.model.vgmop.shared_cross_attention = true;
    else if (name == "no_balance") cfg.model.loss.alpha = 0.0;
    else if (name == "no_decouple") cfg.model.loss.beta = 0.0;
    else throw ConfigError("unknown ablation '" + name + "'");
}

std::ofstream open_out(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw DatasetError("cannot write " + p.string());
    return os;
}

std::vector<std::string> item_names(const std::vector<DatasetItem>& items) {
    std::vector<std::string> names;
    for (const auto& it : items) names.push_back(fs::path(it.path).stem().string());
    return names;
}

// ---- gen-data -------------------------------------------------------------

struct GenData {
    ConfigFlags cfg;
    std::string out;
    std::optional<std::uint64_t> seed;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("gen-data", "Render the synthetic texture classes to PNG + JSON manifests");
        cfg.add_to(cmd);
        cmd->add_option("--out", out, "Output directory (train.json, test.json, images/, masks/)")->required();
        cmd->add_option("--seed", seed, "Data seed (default: data.seed from the config)");
        cmd->callback([this] { run(); });
    }

    void run() {
        RunConfig c = cfg.load();
        if (seed) c.data.seed = *seed;
        auto specs = default_class_specs();
        for (auto& s : specs) s.anomaly_rate = c.data.anomaly_rate;
        auto pick = [&](const std::vector<std::string>& ids) {
            std::vector<SyntheticClassSpec> out_specs;
            for (const auto& id : ids) out_specs.push_back(find_spec(specs, id));
            return out_specs;
        };
        const auto& ec = c.model.encoder;
        for (const auto& [split, ids] : {std::pair{"train", c.data.train_classes}, {"test", c.data.test_classes}}) {
            const auto m = generate_synthetic_dataset(pick(ids), c.data.n_per_class, c.data.seed, out, split,
                                                      ec.image_height, ec.image_width);
            spdlog::info("{}: {} images over {} classes -> {}", split, m.entries.size(), ids.size(),
                         (fs::path(out) / (std::string(split) + ".json")).string());
        }
    }
};

// ---- train ------------------------------------------------------------------

struct Train {
    ConfigFlags cfg;
    std::string data, out, loss_csv, ablation;
    std::optional<std::uint64_t> seed;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("train", "Train the prompt mixture on the seen classes");
        cfg.add_to(cmd);
        cmd->add_option("--data", data, "Dataset directory (uses train.json) or a manifest file")->required();
        cmd->add_option("--out", out, "Checkpoint path")->required();
        cmd->add_option("--loss-csv", loss_csv, "Per-step loss log (default: <out>.loss.csv)");
        cmd->add_option("--ablation", ablation,
                        "static_prompt | shared_pool | shared_attention | no_balance | no_decouple");
        cmd->add_option("--seed", seed, "Training seed (default: train.seed from the config)");
        cmd->callback([this] { run(); });
    }

    void run() {
        RunConfig c = cfg.load();
        apply_ablation(c, ablation);
        if (seed) c.train.seed = *seed;
        c.validate();

        const fs::path mp = manifest_path(data, "train");
        const auto items = load_dataset(mp);
        std::vector<std::string> classes;
        for (const auto& it : items)
            if (std::find(classes.begin(), classes.end(), it.cls) == classes.end()) classes.push_back(it.cls);
        check_class_disjoint(classes, c.data.test_classes);

        auto model = make_model(c);
        spdlog::info("encoding {} training images from {}", items.size(), mp.string());
        const auto samples = encode_dataset(*model, items);

        const fs::path csv_path = loss_csv.empty() ? fs::path(out + ".loss.csv") : fs::path(loss_csv);
        std::ofstream csv = open_out(csv_path);
        TrainHooks hooks;
        hooks.loss_csv = &csv;
        hooks.on_eval = [](std::size_t epoch) { spdlog::info("epoch {} finished", epoch); };
        hooks.on_abort = [&](std::size_t step) {
            const std::string p = out + ".abort";
            save_model(p, *model, c, step);
            spdlog::error("non-finite loss at step {}; last good parameters saved to {}", step, p);
        };
        const TrainResult r = train(*model, samples, c.train, hooks);
        if (!r.log.empty()) {
            const auto& first = r.log.front().loss;
            const auto& last = r.log.back().loss;
            spdlog::info("{} steps; total loss {:.4f} -> {:.4f}", r.steps, first.total, last.total);
        }
        if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
        save_model(out, *model, c, r.steps);
        spdlog::info("checkpoint -> {}, loss log -> {}", out, csv_path.string());
    }
};

// ---- eval -------------------------------------------------------------------

struct Eval {
    std::string checkpoint, data, report, maps;
    std::optional<std::size_t> pro_thresholds;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("eval", "Score unseen classes and write the metric report");
        cmd->add_option("--checkpoint", checkpoint, "Checkpoint from `train`")->required()->check(CLI::ExistingFile);
        cmd->add_option("--data", data, "Dataset directory (uses test.json) or a manifest file")->required();
        cmd->add_option("--report", report, "Report path; JSON is written there and CSV next to it (.csv)")
            ->required();
        cmd->add_option("--emit-maps", maps, "Directory for one anomaly-map PNG per test image");
        cmd->add_option("--pro-thresholds", pro_thresholds,
                        "PRO threshold count (0 = every distinct value; default from the checkpoint config)");
        cmd->callback([this] { run(); });
    }

    void run() {
        RunConfig c;
        auto model = load_model(checkpoint, &c);
        const fs::path mp = manifest_path(data, "test");
        const auto items = load_dataset(mp);
        std::vector<std::string> classes;
        for (const auto& it : items)
            if (std::find(classes.begin(), classes.end(), it.cls) == classes.end()) classes.push_back(it.cls);
        check_class_disjoint(c.data.train_classes, classes);

        spdlog::info("evaluating {} images from {}", items.size(), mp.string());
        const auto samples = encode_dataset(*model, items);
        const auto names = item_names(items);
        std::optional<fs::path> maps_dir;
        if (!maps.empty()) {
            maps_dir = maps;
            fs::create_directories(*maps_dir);
        }
        const EvalOutput res = evaluate_model(*model, samples, pro_thresholds.value_or(c.eval.pro_thresholds),
                                              maps_dir ? &*maps_dir : nullptr, maps_dir ? &names : nullptr);

        fs::path json_path = report;
        if (json_path.extension() != ".json") json_path += ".json";
        fs::path csv_path = json_path;
        csv_path.replace_extension(".csv");
        open_out(json_path) << res.report.to_json().dump(2) << '\n';
        std::ofstream csv = open_out(csv_path);
        write_report_csv(csv, res.report);

        const MetricSet& m = res.report.mean;
        std::cout << "image_auroc=" << m.image_auroc << " image_ap=" << m.image_ap << " pixel_auroc=" << m.pixel_auroc
                  << " pro=" << m.pro << " images=" << m.images << '\n';
        spdlog::info("report -> {} and {}", json_path.string(), csv_path.string());
    }
};

// ---- gradcheck --------------------------------------------------------------

struct Gradcheck {
    std::string config;
    std::uint64_t seed = 0;
    double epsilon = 1e-5;
    double tolerance = 1e-4;
    bool corrupt = false;
    int status = 0;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand(
            "gradcheck", "Compare analytic and finite-difference gradients of the total loss on a 2-image batch");
        cmd->add_option("--config", config, "Model config (default: the built-in micro config)")
            ->check(CLI::ExistingFile);
        cmd->add_option("--seed", seed, "Parameter seed")->capture_default_str();
        cmd->add_option("--epsilon", epsilon, "Central-difference step")->capture_default_str();
        cmd->add_option("--tolerance", tolerance, "Pass threshold on the max relative error")->capture_default_str();
        cmd->add_flag("--corrupt-gradient", corrupt, "Test hook: perturb one analytic gradient entry");
        cmd->callback([this] { run(); });
    }

    void run() {
        const ModelConfig mc = config.empty() ? micro_model_config() : load_config(config).model;
        GradcheckOptions opts{seed, epsilon, {}};
        if (corrupt)
            opts.corrupt = [](ParamRefs& ps) {
                for (ParamGroup* p : ps)
                    if (p->name == "prompt.context") p->grad[0] += 0.5;
            };
        const GradcheckReport r = model_gradcheck(mc, opts);
        const bool pass = r.max_rel_error < tolerance;
        std::cout << (pass ? "PASS" : "FAIL") << " max_rel_error=" << r.max_rel_error << " worst=" << r.worst_param
                  << '[' << r.worst_index << "] analytic=" << r.worst_analytic << " numeric=" << r.worst_numeric
                  << " checked=" << r.checked << '\n';
        status = pass ? 0 : kFailure;
    }
};

// ---- analyze-experts --------------------------------------------------------

struct AnalyzeExperts {
    std::string checkpoint, data, out;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("analyze-experts",
                                       "Expert activation frequencies, per-image routing and mean expert embeddings");
        cmd->add_option("--checkpoint", checkpoint, "Checkpoint from `train`")->required()->check(CLI::ExistingFile);
        cmd->add_option("--data", data, "Dataset directory (uses test.json) or a manifest file")->required();
        cmd->add_option("--out", out, "Output directory (activation.csv, routing.csv, embeddings.csv)")->required();
        cmd->callback([this] { run(); });
    }

    void run() {
        auto model = load_model(checkpoint);
        const auto items = load_dataset(manifest_path(data, "test"));
        const auto samples = encode_dataset(*model, items);
        const auto decisions = collect_decisions(*model, samples);
        const ActivationStats stats = expert_activation_stats(decisions);
        fs::create_directories(out);
        {
            std::ofstream os = open_out(fs::path(out) / "activation.csv");
            write_activation_csv(os, stats);
        }
        {
            std::ofstream os = open_out(fs::path(out) / "routing.csv");
            write_routing_csv(os, decisions, 2 * model->vgmop().layers().size());
        }
        {
            std::ofstream os = open_out(fs::path(out) / "embeddings.csv");
            export_expert_embeddings(os, model->vgmop());
        }
        if (stats.empty()) spdlog::info("static prompts: no routing decisions to report");
        for (const auto& [key, e] : stats.entries) {
            const auto mn = *std::min_element(e.selections.begin(), e.selections.end());
            const auto mx = *std::max_element(e.selections.begin(), e.selections.end());
            spdlog::info("layer {} {}: selections per expert {}..{} over {} images", key.first,
                         state_name(key.second), mn, mx, e.instances);
        }
        spdlog::info("CSV files -> {}", out);
    }
};

// ---- show-config ------------------------------------------------------------

struct ShowConfig {
    ConfigFlags cfg;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("show-config", "Print every config key with its effective value");
        cfg.add_to(cmd);
        cmd->callback([this] { std::cout << config_to_ini(cfg.load()); });
    }
};

}  // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Visually-guided prompt mixture for zero-shot anomaly detection (desk-scale)"};
    app.require_subcommand(1);
    GenData gen;
    Train tr;
    Eval ev;
    Gradcheck gc;
    AnalyzeExperts ax;
    ShowConfig sc;
    gen.add(app);
    tr.add(app);
    ev.add(app);
    gc.add(app);
    ax.add(app);
    sc.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kUserError;
    } catch (const ConfigError& e) {
        spdlog::error("config: {}", e.what());
        return kUserError;
    } catch (const DatasetError& e) {
        spdlog::error("data: {}", e.what());
        return kUserError;
    } catch (const FormatError& e) {
        spdlog::error("checkpoint: {}", e.what());
        return kUserError;
    } catch (const InputError& e) {
        spdlog::error("input: {}", e.what());
        return kUserError;
    } catch (const UndefinedMetricError& e) {
        spdlog::error("metric: {}", e.what());
        return kUserError;
    } catch (const fs::filesystem_error& e) {
        spdlog::error("filesystem: {}", e.what());
        return kUserError;
    } catch (const std::exception& e) {
        spdlog::critical("{}", e.what());
        return kFailure;
    }
    return gc.status;
}
