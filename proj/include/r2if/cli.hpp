#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "r2if/canonical.hpp"
#include "r2if/dataset.hpp"
#include "r2if/harness.hpp"
#include "r2if/service.hpp"
#include "r2if/toy_trainer.hpp"
#include "r2if/version.hpp"

namespace r2if {

namespace cli_detail {

constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitBackend = 2;
constexpr int kExitUsage = 64;

/// Reward + backend flags shared by the scoring subcommands.
struct CommonOpts {
    ServiceConfig service;  // reward knobs + backend endpoints live here
    bool no_cer = false;
    bool no_smv = false;
    bool smv_literal = false;
    bool order_sensitive = false;
    bool cer_on_invalid = false;
};

inline void add_reward_flags(CLI::App* cmd, CommonOpts& opts) {
    RewardConfig& r = opts.service.reward;
    cmd->add_option("--tau", r.tau, "Similarity acceptance threshold in (0, 1]");
    cmd->add_option("--binary-weight", r.binary_weight, "Weight on the format-and-correctness gate");
    cmd->add_option("--eta", r.eta, "Advantage denominator stabilizer");
    cmd->add_option("--epsilon", r.epsilon_clip, "Policy-ratio clip half-width");
    cmd->add_option("--kl-coef", r.kl_coef, "Reference-policy divergence coefficient");
    cmd->add_option("--cer-samples", r.cer_samples, "Continuations sampled per effectiveness estimate");
    cmd->add_option("--cer-temperature", r.cer_temperature, "Sampling temperature for continuations");
    cmd->add_option("--cer-top-p", r.cer_top_p, "Nucleus cutoff for continuations");
    cmd->add_flag("--smv-literal", opts.smv_literal, "Always divide per-parameter scores by 3");
    cmd->add_flag("--order-sensitive", opts.order_sensitive, "Require predicted calls in reference order");
    cmd->add_flag("--cer-on-invalid", opts.cer_on_invalid, "Score continuations even for malformed responses");
}

inline void add_backend_flags(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--similarity", opts.service.similarity_kind, "Similarity backend: lexical, embedding, or mock")
        ->check(CLI::IsMember({"lexical", "embedding", "mock"}));
    cmd->add_option("--embedding-endpoint", opts.service.embedding_endpoint, "Embedding service URL");
    cmd->add_option("--embedding-model", opts.service.embedding_model, "Embedding model name");
    cmd->add_option("--student-endpoint", opts.service.student_endpoint, "Student model chat-completions URL");
    cmd->add_option("--student-model", opts.service.student_model, "Student model name");
}

inline RewardConfig finish_reward(CommonOpts& opts) {
    RewardConfig& r = opts.service.reward;
    if (opts.smv_literal) r.smv_renormalize = false;
    if (opts.order_sensitive) r.order_sensitive = true;
    if (opts.cer_on_invalid) r.cer_on_invalid = true;
    r.validate();
    return r;
}

/// Writes to the path, or stdout when the path is empty or "-".
inline void write_output(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
        std::cout << content;
        if (content.empty() || content.back() != '\n') std::cout << '\n';
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open output file " + path);
    out << content;
    if (!out) throw InputError("failed writing output file " + path);
}

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require_student_or(const CommonOpts& opts, bool cer_disabled, const std::string& hint) {
    if (!cer_disabled && opts.service.student_endpoint.empty()) {
        throw UsageError("continuation scoring needs --student-endpoint (or pass " + hint + ")");
    }
}

inline std::vector<double> totals_of(const std::vector<RewardBreakdown>& breakdowns) {
    std::vector<double> totals;
    totals.reserve(breakdowns.size());
    for (const auto& b : breakdowns) totals.push_back(b.total);
    return totals;
}

// --- subcommand bodies ---------------------------------------------------

inline int run_score(CommonOpts& opts, const std::string& data_path, const std::string& rollouts_path,
                     const std::string& out_path) {
    const RewardConfig cfg = finish_reward(opts);
    require_student_or(opts, opts.no_cer, "--no-cer");
    const Backends backends = make_backends(opts.service);

    const std::vector<Instance> instances = load_instances(data_path);
    std::unordered_map<std::string, const Instance*> by_id;
    for (const auto& inst : instances) by_id.emplace(inst.id, &inst);

    std::vector<RolloutSet> sets = load_rollouts(rollouts_path);
    std::sort(sets.begin(), sets.end(),
              [](const RolloutSet& a, const RolloutSet& b) { return a.instance_id < b.instance_id; });

    json results = json::array();
    for (const auto& set : sets) {
        const auto it = by_id.find(set.instance_id);
        if (it == by_id.end()) throw InputError("rollouts reference unknown instance id " + set.instance_id);
        json breakdown_json = json::array();
        std::vector<RewardBreakdown> breakdowns;
        for (const auto& text : set.responses) {
            breakdowns.push_back(
                composite_reward(text, *it->second, backends, cfg, !opts.no_cer, !opts.no_smv));
            breakdown_json.push_back(breakdowns.back().to_json());
        }
        json entry{{"instance_id", set.instance_id}, {"breakdowns", std::move(breakdown_json)}};
        if (set.responses.size() >= 2) entry["advantages"] = group_normalize(totals_of(breakdowns), cfg.eta);
        results.push_back(std::move(entry));
    }
    write_output(out_path, canonical_dump(json{{"results", std::move(results)}}));
    return kExitOk;
}

inline int run_evaluate(CommonOpts& opts, const std::string& data_path, const std::string& rollouts_path,
                        const std::string& out_path, const std::string& format_name, bool no_ace,
                        bool ace_all_rollouts, int threads) {
    const RewardConfig cfg = finish_reward(opts);
    require_student_or(opts, no_ace, "--no-ace");
    const Backends backends = make_backends(opts.service);

    EvalFlags flags;
    flags.smv = !opts.no_smv;
    flags.ace = !no_ace;
    flags.ace_all_rollouts = ace_all_rollouts;
    flags.threads = threads;

    const std::vector<Instance> instances = load_instances(data_path);
    const auto responses = rollouts_by_id(load_rollouts(rollouts_path));
    const EvalReport report = evaluate(instances, responses, backends, cfg, flags);

    ReportFormat format = ReportFormat::Json;
    if (format_name == "markdown") format = ReportFormat::Markdown;
    else if (format_name == "csv") format = ReportFormat::Csv;
    write_output(out_path, emit_report(report, format));
    return kExitOk;
}

inline int run_ace(CommonOpts& opts, const std::string& data_path, const std::string& rollouts_path,
                   const std::string& out_path, bool all_rollouts) {
    const RewardConfig cfg = finish_reward(opts);
    require_student_or(opts, false, "--no-cer is not available here; this subcommand is the estimator");
    const Backends backends = make_backends(opts.service);

    EvalFlags flags;
    flags.smv = false;
    flags.ace = true;
    flags.ace_all_rollouts = all_rollouts;

    const std::vector<Instance> instances = load_instances(data_path);
    const auto responses = rollouts_by_id(load_rollouts(rollouts_path));
    const EvalReport report = evaluate(instances, responses, backends, cfg, flags);

    json out{{"ace", report.ace_overall.has_value() ? json(*report.ace_overall) : json(nullptr)},
             {"per_category", report.category_ace},
             {"instances", report.instance_count},
             {"responses", report.response_count}};
    write_output(out_path, canonical_dump(out));
    return kExitOk;
}

inline int run_validate(const std::string& data_path, const std::string& out_path) {
    const ValidationReport report = validate_dataset(data_path);
    write_output(out_path, canonical_dump(report.to_json()));
    return report.ok() ? kExitOk : kExitData;
}

inline std::string format4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

inline int run_toy_train(CommonOpts& opts, const std::string& mode_name, std::uint64_t seed, int iterations,
                         int rollouts, double learning_rate, double temperature, const std::string& out_path,
                         const std::string& json_path) {
    const RewardConfig cfg = finish_reward(opts);
    const RewardMode mode = (mode_name == "binary-only") ? RewardMode::BinaryOnly : RewardMode::Full;

    ToyTrainOptions options;
    options.iterations = iterations;
    options.rollouts = rollouts;
    options.learning_rate = learning_rate;
    options.temperature = temperature;

    const ToyEnvironment env = make_default_toy_environment(seed, cfg);
    const TrainReport report = toy_train(env, cfg, mode, options);

    write_output(out_path, report.to_csv());
    if (!json_path.empty()) write_output(json_path, canonical_dump(report.to_json()));
    std::cerr << "mode=" << to_string(mode) << " final_expected_correctness="
              << format4(report.final_expected_correctness)
              << " converged_at=" << report.converged_at << "\n";
    return kExitOk;
}

inline int run_serve(CommonOpts& opts, const std::string& config_path, const CLI::Option* host_opt,
                     const CLI::Option* port_opt, const std::string& host, int port) {
    ServiceConfig sc;
    if (!config_path.empty()) {
        sc = service_config_from_file(config_path);
    } else {
        finish_reward(opts);
        sc = opts.service;
    }
    if (host_opt->count() > 0) sc.host = host;
    if (port_opt->count() > 0) sc.port = port;
    sc.validate();

    ScoringService service(sc);
    if (!service.start()) {
        std::cerr << "error: failed to bind " << sc.host << ":" << sc.port << "\n";
        return kExitData;
    }
    std::cerr << "listening on " << sc.host << ":" << service.port() << " (version " << version() << ")\n";
    service.wait();
    return kExitOk;
}

inline CerConfig parse_vary_spec(const std::string& spec) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.size() != 4) {
        throw UsageError("--vary expects label:temperature:top_p:samples, got '" + spec + "'");
    }
    CerConfig cc;
    cc.label = parts[0];
    try {
        cc.temperature = std::stod(parts[1]);
        cc.top_p = std::stod(parts[2]);
        cc.samples = std::stoi(parts[3]);
    } catch (const std::exception&) {
        throw UsageError("--vary has non-numeric fields in '" + spec + "'");
    }
    return cc;
}

inline int run_robustness(CommonOpts& opts, const std::string& data_path, const std::string& out_path,
                          const std::vector<std::string>& vary_specs, double delta_threshold) {
    const RewardConfig cfg = finish_reward(opts);
    require_student_or(opts, false, "nothing; a live student is required for the sweep");
    const Backends backends = make_backends(opts.service);

    std::vector<CerConfig> configs;
    configs.push_back(CerConfig{"base", cfg.cer_temperature, cfg.cer_top_p, cfg.cer_samples});
    for (const auto& spec : vary_specs) configs.push_back(parse_vary_spec(spec));
    if (configs.size() < 2) {
        configs.push_back(CerConfig{"t0.7", 0.7, cfg.cer_top_p, cfg.cer_samples});
        configs.push_back(CerConfig{"t1.0", 1.0, cfg.cer_top_p, cfg.cer_samples});
    }

    const std::vector<Instance> instances = load_instances(data_path);
    const RobustnessReport report =
        cer_robustness(instances, *backends.student, cfg, configs, delta_threshold);
    write_output(out_path, canonical_dump(report.to_json()));
    return kExitOk;
}

}  // namespace cli_detail

/// Entry point for the command-line tool. `args` excludes the program name
/// and is in natural order. Exit codes: 0 success, 1 data/validation
/// failure, 2 backend failure, 64 usage error.
inline int run_cli(std::vector<std::string> args) {
    using namespace cli_detail;

    CLI::App app{"Composite reward scoring, evaluation, and training utilities"};
    app.set_version_flag("--version", std::string(version()));
    app.require_subcommand(1);

    CommonOpts opts;
    std::string data_path;
    std::string rollouts_path;
    std::string out_path;

    // score
    auto* score = app.add_subcommand("score", "Score rollouts against their instances");
    score->add_option("--data", data_path, "Instance JSONL file")->required();
    score->add_option("--rollouts", rollouts_path, "Rollout JSONL file")->required();
    score->add_option("--out", out_path, "Output path (default stdout)");
    score->add_flag("--no-cer", opts.no_cer, "Skip continuation-effectiveness scoring");
    score->add_flag("--no-smv", opts.no_smv, "Skip grounding scoring");
    add_reward_flags(score, opts);
    add_backend_flags(score, opts);

    // evaluate
    std::string format_name = "json";
    bool no_ace = false;
    bool ace_all_rollouts = false;
    int threads = 1;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Run the evaluation harness and emit a report");
    evaluate_cmd->add_option("--data", data_path, "Instance JSONL file")->required();
    evaluate_cmd->add_option("--rollouts", rollouts_path, "Rollout JSONL file")->required();
    evaluate_cmd->add_option("--out", out_path, "Output path (default stdout)");
    evaluate_cmd->add_option("--format", format_name, "Report format: json, markdown, or csv")
        ->check(CLI::IsMember({"json", "markdown", "csv"}));
    evaluate_cmd->add_flag("--no-ace", no_ace, "Skip the effectiveness estimate");
    evaluate_cmd->add_flag("--no-smv", opts.no_smv, "Skip grounding scoring");
    evaluate_cmd->add_flag("--ace-all-rollouts", ace_all_rollouts, "Average effectiveness over every rollout");
    evaluate_cmd->add_option("--threads", threads, "Worker threads for scoring")->check(CLI::PositiveNumber);
    add_reward_flags(evaluate_cmd, opts);
    add_backend_flags(evaluate_cmd, opts);

    // ace
    bool ace_all = false;
    auto* ace_cmd = app.add_subcommand("ace", "Estimate continuation effectiveness over a dataset");
    ace_cmd->add_option("--data", data_path, "Instance JSONL file")->required();
    ace_cmd->add_option("--rollouts", rollouts_path, "Rollout JSONL file")->required();
    ace_cmd->add_option("--out", out_path, "Output path (default stdout)");
    ace_cmd->add_flag("--all-rollouts", ace_all, "Average over every rollout, not just the first");
    add_reward_flags(ace_cmd, opts);
    add_backend_flags(ace_cmd, opts);

    // validate-dataset
    auto* validate_cmd = app.add_subcommand("validate-dataset", "Check a dataset file and report violations");
    validate_cmd->add_option("--data", data_path, "Instance JSONL file")->required();
    validate_cmd->add_option("--out", out_path, "Output path (default stdout)");

    // toy-train
    std::string mode_name = "full";
    std::uint64_t seed = 7;
    int iterations = 200;
    int rollouts_per_group = 5;
    double learning_rate = 1.0;
    double temperature = 1.0;
    std::string json_path;
    auto* toy_cmd = app.add_subcommand("toy-train", "Train the bundled softmax policy and emit its curve");
    toy_cmd->add_option("--mode", mode_name, "Reward mode: full or binary-only")
        ->check(CLI::IsMember({"full", "binary-only"}));
    toy_cmd->add_option("--seed", seed, "Sampling seed");
    toy_cmd->add_option("--iterations", iterations, "Training iterations")->check(CLI::PositiveNumber);
    toy_cmd->add_option("--rollouts", rollouts_per_group, "Rollouts per group")->check(CLI::PositiveNumber);
    toy_cmd->add_option("--learning-rate", learning_rate, "Gradient step size");
    toy_cmd->add_option("--temperature", temperature, "Policy softmax temperature");
    toy_cmd->add_option("--out", out_path, "Curve CSV path (default stdout)");
    toy_cmd->add_option("--json", json_path, "Optional full-report JSON path");
    add_reward_flags(toy_cmd, opts);

    // serve
    std::string config_path;
    std::string host = "127.0.0.1";
    int port = 8080;
    auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP scoring service");
    serve_cmd->add_option("--config", config_path, "key = value config file");
    auto* host_opt = serve_cmd->add_option("--host", host, "Bind address");
    auto* port_opt = serve_cmd->add_option("--port", port, "Bind port (0 picks one)");
    add_reward_flags(serve_cmd, opts);
    add_backend_flags(serve_cmd, opts);

    // robustness
    std::vector<std::string> vary_specs;
    double delta_threshold = 0.2;
    auto* robust_cmd =
        app.add_subcommand("robustness", "Sweep sampling configurations and compare effectiveness ranks");
    robust_cmd->add_option("--data", data_path, "Instance JSONL file")->required();
    robust_cmd->add_option("--out", out_path, "Output path (default stdout)");
    robust_cmd->add_option("--vary", vary_specs, "Extra configuration label:temperature:top_p:samples");
    robust_cmd->add_option("--delta-threshold", delta_threshold, "Small-shift threshold for the comparison");
    add_reward_flags(robust_cmd, opts);
    add_backend_flags(robust_cmd, opts);

    try {
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (score->parsed()) return run_score(opts, data_path, rollouts_path, out_path);
        if (evaluate_cmd->parsed()) {
            return run_evaluate(opts, data_path, rollouts_path, out_path, format_name, no_ace,
                                ace_all_rollouts, threads);
        }
        if (ace_cmd->parsed()) return run_ace(opts, data_path, rollouts_path, out_path, ace_all);
        if (validate_cmd->parsed()) return run_validate(data_path, out_path);
        if (toy_cmd->parsed()) {
            return run_toy_train(opts, mode_name, seed, iterations, rollouts_per_group, learning_rate,
                                 temperature, out_path, json_path);
        }
        if (serve_cmd->parsed()) return run_serve(opts, config_path, host_opt, port_opt, host, port);
        if (robust_cmd->parsed()) {
            return run_robustness(opts, data_path, out_path, vary_specs, delta_threshold);
        }
        std::cerr << "error: no subcommand selected\n";
        return kExitUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const BackendError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const DatasetError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}

}  // namespace r2if
