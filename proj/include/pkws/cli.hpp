#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pkws/config.hpp"
#include "pkws/forge.hpp"
#include "pkws/gradsuite.hpp"
#include "pkws/synth.hpp"
#include "pkws/trainer.hpp"

namespace pkws {

namespace cli_detail {

inline SynthSpec synth_spec_from(const Config& cfg) {
    SynthSpec s;
    s.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
    s.unit_inventory = static_cast<int>(cfg.get_int("unit_inventory", s.unit_inventory));
    s.units_per_keyword_min = static_cast<int>(cfg.get_int("units_per_keyword_min", s.units_per_keyword_min));
    s.units_per_keyword_max = static_cast<int>(cfg.get_int("units_per_keyword_max", s.units_per_keyword_max));
    s.unit_ms_min = cfg.get_double("unit_ms_min", s.unit_ms_min);
    s.unit_ms_max = cfg.get_double("unit_ms_max", s.unit_ms_max);
    s.train_keywords = static_cast<int>(cfg.get_int("train_keywords", s.train_keywords));
    s.val_keywords = static_cast<int>(cfg.get_int("val_keywords", s.val_keywords));
    s.test_keywords = static_cast<int>(cfg.get_int("test_keywords", s.test_keywords));
    s.clips_per_keyword = static_cast<int>(cfg.get_int("clips_per_keyword", s.clips_per_keyword));
    s.aux_keywords = static_cast<int>(cfg.get_int("aux_keywords", s.aux_keywords));
    s.aux_top_occurrences = static_cast<int>(cfg.get_int("aux_top_occurrences", s.aux_top_occurrences));
    s.aux_min_occurrences = static_cast<int>(cfg.get_int("aux_min_occurrences", s.aux_min_occurrences));
    s.aux_zipf_exponent = cfg.get_double("aux_zipf_exponent", s.aux_zipf_exponent);
    s.morph_variant_pairs = static_cast<int>(cfg.get_int("morph_variant_pairs", s.morph_variant_pairs));
    s.contaminant_occurrences = static_cast<int>(cfg.get_int("contaminant_occurrences", s.contaminant_occurrences));
    s.junk_occurrences = static_cast<int>(cfg.get_int("junk_occurrences", s.junk_occurrences));
    s.pitch_min = cfg.get_double("pitch_min", s.pitch_min);
    s.pitch_max = cfg.get_double("pitch_max", s.pitch_max);
    s.tempo_min = cfg.get_double("tempo_min", s.tempo_min);
    s.tempo_max = cfg.get_double("tempo_max", s.tempo_max);
    s.speaker_eq_db = cfg.get_double("speaker_eq_db", s.speaker_eq_db);
    s.onset_jitter_s = cfg.get_double("onset_jitter_s", s.onset_jitter_s);
    s.noise_floor = cfg.get_double("noise_floor", s.noise_floor);
    s.gain_min = cfg.get_double("gain_min", s.gain_min);
    s.gain_max = cfg.get_double("gain_max", s.gain_max);
    s.utterance_words_min = static_cast<int>(cfg.get_int("utterance_words_min", s.utterance_words_min));
    s.utterance_words_max = static_cast<int>(cfg.get_int("utterance_words_max", s.utterance_words_max));
    s.noise_files = static_cast<int>(cfg.get_int("noise_files", s.noise_files));
    s.noise_seconds = cfg.get_double("noise_seconds", s.noise_seconds);
    cfg.reject_unknown();
    return s;
}

inline ForgeConfig forge_config_from(const Config& cfg) {
    ForgeConfig f;
    f.top_k = static_cast<std::size_t>(cfg.get_int("top_k", static_cast<long>(f.top_k)));
    f.samples_per_keyword = static_cast<std::size_t>(
        cfg.get_int("samples_per_keyword", static_cast<long>(f.samples_per_keyword)));
    f.min_duration_s = cfg.get_double("min_duration_s", f.min_duration_s);
    f.max_duration_s = cfg.get_double("max_duration_s", f.max_duration_s);
    f.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
    f.balanced = cfg.get_bool("balanced", true);
    if (cfg.has("exclusion")) f.exclusion_list = cfg.get_list("exclusion");
    if (cfg.has("exclusion_file")) {
        const std::string path = cfg.get_str("exclusion_file", "");
        std::ifstream in(path);
        if (!in) throw ConfigError("forge: cannot open exclusion_file " + path);
        std::string word;
        while (std::getline(in, word)) {
            word = to_lower(word);
            while (!word.empty() && (word.back() == '\r' || word.back() == ' ')) word.pop_back();
            if (!word.empty()) f.exclusion_list.push_back(word);
        }
    }
    if (cfg.has("suffix_rules")) f.suffix_rules = cfg.get_list("suffix_rules");
    if (cfg.has("prefix_rules")) f.prefix_rules = cfg.get_list("prefix_rules");
    cfg.reject_unknown();
    return f;
}

inline TrainConfig train_config_from(const Config& cfg) {
    TrainConfig t;
    t.strategy = strategy_from_string(cfg.get_str("strategy", "baseline"));
    t.epochs = static_cast<int>(cfg.get_int("epochs", 100));
    t.episodes_per_epoch = static_cast<int>(cfg.get_int("episodes_per_epoch", 500));
    t.episode.n_closed = static_cast<int>(cfg.get_int("n_closed", 5));
    t.episode.n_open = static_cast<int>(cfg.get_int("n_open", 5));
    t.episode.k_shot = static_cast<int>(cfg.get_int("k_shot", 5));
    t.episode.m_query = static_cast<int>(cfg.get_int("m_query", 5));
    t.base_lr = cfg.get_double("base_lr", 0.001);
    t.lr_decay_factor = cfg.get_double("lr_decay_factor", 0.5);
    t.lr_decay_every = static_cast<int>(cfg.get_int("lr_decay_every", 20));
    t.lambda = cfg.get_double("lambda", 1.0);
    t.aux_batch = static_cast<int>(cfg.get_int("aux_batch", 64));
    t.noise_prob = cfg.get_double("noise_prob", 0.8);
    t.encoder = EncoderConfig::parse(cfg.get_str("encoder", "base"));
    t.val_episodes = static_cast<int>(cfg.get_int("val_episodes", 40));
    t.val_m_query = static_cast<int>(cfg.get_int("val_m_query", 15));
    t.val_k_shot = static_cast<int>(cfg.get_int("val_k_shot", 5));
    t.pret_epochs = static_cast<int>(cfg.get_int("pret_epochs", 30));
    t.config_hash = cfg.hash();
    return t;
}

inline EvalConfig eval_config_from(const Config& cfg) {
    EvalConfig e;
    e.n_episodes = static_cast<int>(cfg.get_int("n_episodes", 1000));
    e.k_shot = static_cast<int>(cfg.get_int("k_shot", 5));
    e.m_query = static_cast<int>(cfg.get_int("m_query", 15));
    e.n_closed = static_cast<int>(cfg.get_int("n_closed", 5));
    e.n_open = static_cast<int>(cfg.get_int("n_open", 5));
    e.seeds = cfg.get_seeds("seeds", {1, 2, 3});
    e.include_open_in_accuracy = cfg.get_bool("include_open_in_accuracy", false);
    if (cfg.has("threshold")) e.threshold = cfg.get_double("threshold", 0.5);
    return e;
}

inline std::string eval_report_text(const EvalReport& r) {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "%s  %d-shot  acc %.2f%% (std %.2f)  auroc %.4f (std %.4f)  episodes %zu x %zu seeds",
                  r.strategy.c_str(), r.shots, 100 * r.acc_mean, 100 * r.acc_std, r.auroc_mean,
                  r.auroc_std, r.n_episodes, r.seeds.size());
    os << buf << "\n";
    if (r.threshold) {
        std::snprintf(buf, sizeof(buf),
                      "verify_open @ %.2f: open detect rate %.3f, closed false alarm %.3f\n",
                      *r.threshold, r.open_detect_rate, r.false_alarm_rate);
        os << buf;
    }
    return os.str();
}

}  // namespace cli_detail

/// Entry point behind the pkws binary. Exit codes: 0 success, 1 usage error,
/// 2 data/validation error.
inline int run_cli(std::vector<std::string> args) {
    using namespace cli_detail;
    CLI::App app{"few-shot open-set keyword spotting workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", seed_str;

    auto add_common = [&](CLI::App* sub, bool with_config = true) {
        if (with_config) sub->add_option("--config", config_path, "key=value configuration file");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed_str, "seed override");
    };
    auto load_config = [&]() {
        Config cfg = config_path.empty() ? Config() : Config::parse_file(config_path);
        return cfg;
    };
    auto seed_override = [&](std::uint64_t fallback) {
        if (seed_str.empty()) return fallback;
        return static_cast<std::uint64_t>(std::stoull(seed_str));
    };

    // ---- synth -------------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "build the deterministic synthetic corpus");
    add_common(synth_cmd);
    synth_cmd->callback([&] {
        Config cfg = load_config();
        SynthSpec spec = synth_spec_from(cfg);
        spec.seed = seed_override(spec.seed);
        SynthResult res = synth_build(spec, out_dir);
        std::cout << "synth: wrote corpus to " << res.root.string() << "\n"
                  << "  in-domain keywords: " << res.train_keywords.size() << " train / "
                  << res.val_keywords.size() << " val / " << res.test_keywords.size()
                  << " test (+ silence in each split)\n"
                  << "  auxiliary keywords: " << res.aux_keywords.size() << " (" << res.aux_clips
                  << " clips)\n"
                  << "  manifest: " << res.manifest_path.string() << " (" << res.manifest_rows
                  << " rows)\n";
    });

    // ---- forge -------------------------------------------------------------
    auto* forge_cmd = app.add_subcommand("forge", "build an auxiliary dataset from a manifest");
    std::string manifest_path, audio_root;
    bool imbalanced = false, metadata_only = false;
    forge_cmd->add_option("--manifest", manifest_path, "alignment manifest CSV")->required();
    forge_cmd->add_option("--audio-root", audio_root, "root for audio paths in the manifest");
    forge_cmd->add_flag("--imbalanced", imbalanced, "keep raw per-keyword counts");
    forge_cmd->add_flag("--metadata-only", metadata_only, "skip audio cutting");
    add_common(forge_cmd);
    forge_cmd->callback([&] {
        Config cfg = load_config();
        ForgeConfig fc = forge_config_from(cfg);
        fc.seed = seed_override(fc.seed);
        if (imbalanced) fc.balanced = false;
        if (audio_root.empty()) {
            audio_root = std::filesystem::path(manifest_path).parent_path().string();
        }
        ForgeReport report = run_forge(manifest_path, audio_root, out_dir, fc, metadata_only);
        std::cout << report.text();
    });

    // ---- train -------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train one strategy");
    add_common(train_cmd);
    train_cmd->callback([&] {
        Config cfg = load_config();
        TrainConfig tc = train_config_from(cfg);
        const std::string data_root = cfg.require_str("data");
        const std::string aux_root = cfg.get_str("aux_data", "");
        const std::uint64_t seed =
            seed_override(static_cast<std::uint64_t>(cfg.get_int("seed", 1)));
        cfg.reject_unknown();

        Dataset ds = Dataset::load(data_root);
        std::optional<Dataset> aux;
        if (!aux_root.empty() && aux_root != data_root) aux = Dataset::load(aux_root);
        const Dataset* aux_ptr = aux ? &*aux : (tc.needs_aux() ? &ds : nullptr);

        std::filesystem::create_directories(out_dir);
        std::ofstream log(std::filesystem::path(out_dir) / "train_log.csv", std::ios::trunc);
        TrainResult result = train(tc, ds, aux_ptr, seed, &log);
        const auto ckpt_path = std::filesystem::path(out_dir) / "checkpoint.pkwc";
        save_checkpoint(ckpt_path, result.best);
        std::cout << "train: " << strategy_name(tc.strategy) << " seed " << seed
                  << " best epoch " << result.best_epoch << " val_acc " << result.best_val_acc
                  << "\n  checkpoint: " << ckpt_path.string() << "\n";
    });

    // ---- eval --------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "episodic test-split evaluation");
    std::string ckpt_path_str, data_root_flag;
    eval_cmd->add_option("--checkpoint", ckpt_path_str, "checkpoint file")->required();
    eval_cmd->add_option("--data", data_root_flag, "dataset root")->required();
    add_common(eval_cmd);
    eval_cmd->callback([&] {
        Config cfg = load_config();
        EvalConfig ec = eval_config_from(cfg);
        cfg.reject_unknown();
        if (!seed_str.empty()) ec.seeds = {seed_override(1)};
        Checkpoint ckpt = load_checkpoint(ckpt_path_str);
        Dataset ds = Dataset::load(data_root_flag);
        EvalReport report = evaluate(ckpt, ds, ec);
        std::filesystem::create_directories(out_dir);
        write_eval_reports_csv(std::filesystem::path(out_dir) / "eval_report.csv", {report});
        std::ofstream txt(std::filesystem::path(out_dir) / "eval_report.txt", std::ios::trunc);
        txt << eval_report_text(report);
        std::cout << eval_report_text(report);
    });

    // ---- compare -----------------------------------------------------------
    auto* cmp_cmd = app.add_subcommand("compare", "train and evaluate several strategies");
    add_common(cmp_cmd);
    cmp_cmd->callback([&] {
        Config cfg = load_config();
        TrainConfig shared = train_config_from(cfg);
        const std::string data_root = cfg.require_str("data");
        const std::string aux_root = cfg.get_str("aux_data", "");
        const std::string aux_imb_root = cfg.get_str("aux_data_imbalanced", "");
        std::vector<std::string> strategies = cfg.get_list("strategies");
        if (strategies.empty()) strategies = {"baseline"};
        std::vector<std::uint64_t> seeds = cfg.get_seeds("seeds", {1, 2, 3});
        std::vector<int> shots;
        for (const auto& s : cfg.get_list("shots")) shots.push_back(std::stoi(s));
        if (shots.empty()) shots = {1, 5};

        EvalConfig ec;
        ec.n_episodes = static_cast<int>(cfg.get_int("eval_episodes", 1000));
        ec.m_query = static_cast<int>(cfg.get_int("eval_m_query", 15));
        ec.n_closed = shared.episode.n_closed;
        ec.n_open = shared.episode.n_open;
        cfg.reject_unknown();

        Dataset ds = Dataset::load(data_root);
        std::optional<Dataset> aux, aux_imb;
        if (!aux_root.empty() && aux_root != data_root) aux = Dataset::load(aux_root);
        if (!aux_imb_root.empty()) aux_imb = Dataset::load(aux_imb_root);
        const Dataset* aux_ptr = aux ? &*aux : &ds;

        std::vector<CompareVariant> variants;
        for (const auto& name : strategies) {
            CompareVariant v;
            v.label = name;
            if (name == "auxsl-imbalanced") {
                if (!aux_imb) {
                    throw ConfigError("compare: strategy auxsl-imbalanced needs aux_data_imbalanced");
                }
                v.config = shared;
                v.config.strategy = Strategy::AuxSL;
                v.aux = &*aux_imb;
            } else {
                v.config = shared;
                v.config.strategy = strategy_from_string(name);
                v.aux = v.config.needs_aux() ? aux_ptr : nullptr;
            }
            variants.push_back(v);
        }

        std::filesystem::create_directories(out_dir);
        std::ofstream log(std::filesystem::path(out_dir) / "compare_log.txt", std::ios::trunc);
        CompareTable table = compare_strategies(variants, ds, ec, seeds, shots, &log);
        table.write_csv(std::filesystem::path(out_dir) / "compare.csv");
        std::ofstream txt(std::filesystem::path(out_dir) / "compare.txt", std::ios::trunc);
        txt << table.text();
        std::cout << table.text();
    });

    // ---- params ------------------------------------------------------------
    auto* params_cmd = app.add_subcommand("params", "report encoder parameter counts");
    std::vector<std::string> encoder_names;
    params_cmd->add_option("--encoder", encoder_names, "encoder preset or channels:embed spec");
    params_cmd->callback([&] {
        if (encoder_names.empty()) encoder_names = {"tiny", "base", "large"};
        std::cout << std::left << std::setw(12) << "config" << std::setw(32) << "layout"
                  << std::setw(10) << "params" << "budget\n";
        for (const auto& name : encoder_names) {
            EncoderConfig cfg = EncoderConfig::parse(name);
            std::cout << std::left << std::setw(12) << (cfg.budget_label.empty() ? name : cfg.budget_label)
                      << std::setw(32) << cfg.describe() << std::setw(10) << cfg.param_count();
            if (cfg.budget_params) {
                std::cout << cfg.budget_params << " (" << (cfg.within_budget() ? "ok" : "OUTSIDE")
                          << " +-20%)";
            } else {
                std::cout << "-";
            }
            std::cout << "\n";
        }
    });

    // ---- gradcheck ---------------------------------------------------------
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of all losses");
    int trials = 100;
    double tol = 1e-4;
    grad_cmd->add_option("--trials", trials, "episodes per loss");
    grad_cmd->add_option("--tol", tol, "max relative error");
    add_common(grad_cmd);
    grad_cmd->callback([&] {
        GradSuiteResult r = run_grad_suite(trials, seed_override(1));
        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "gradcheck over %d random 3-way/2-shot episodes (h=1e-5):\n"
                      "  dummy-prototypical loss   max rel err %.3e\n"
                      "  auxiliary cross-entropy   max rel err %.3e\n"
                      "  combined (lambda=1)       max rel err %.3e\n",
                      r.trials, r.dummy_proto_max, r.aux_ce_max, r.combined_max);
        std::cout << buf;
        if (!r.pass(tol)) {
            throw NumericError("gradcheck: max relative error " + std::to_string(r.worst()) +
                               " exceeds " + std::to_string(tol));
        }
        std::cout << "gradcheck: PASS (all < " << tol << ")\n";
    });

    // CLI11 wants argv-style input, first token is the program name
    std::vector<const char*> argv;
    argv.push_back("pkws");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            std::cout << app.help();
            return 0;
        }
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

inline int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(std::move(args));
}

}  // namespace pkws
