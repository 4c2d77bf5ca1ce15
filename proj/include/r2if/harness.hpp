#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "r2if/canonical.hpp"
#include "r2if/dataset.hpp"
#include "r2if/domain.hpp"
#include "r2if/errors.hpp"
#include "r2if/reward.hpp"
#include "r2if/version.hpp"

namespace r2if {

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

struct EvalFlags {
    bool accuracy = true;
    bool smv = true;
    bool ace = true;             // compute CER / report the ACE section
    bool ace_all_rollouts = false;  // default: first rollout only
    int threads = 1;
};

struct InstanceRecord {
    std::string id;
    std::string category;
    int accuracy = 0;  // first rollout: format gate times correctness
    std::vector<RewardBreakdown> breakdowns;

    json to_json() const {
        json b = json::array();
        for (const auto& breakdown : breakdowns) b.push_back(breakdown.to_json());
        return json{{"id", id}, {"category", category}, {"accuracy", accuracy}, {"breakdowns", b}};
    }
};

struct ComponentStats {
    std::size_t count = 0;
    double mean = 0.0;
    double min = std::numeric_limits<double>::infinity();
    double max = -std::numeric_limits<double>::infinity();

    void add(double v) {
        ++count;
        mean += (v - mean) / static_cast<double>(count);
        min = std::min(min, v);
        max = std::max(max, v);
    }

    json to_json() const {
        if (count == 0) return json{{"count", 0}};
        return json{{"count", count}, {"mean", mean}, {"min", min}, {"max", max}};
    }
};

struct EvalReport {
    std::size_t instance_count = 0;
    std::size_t response_count = 0;
    std::size_t correct_count = 0;
    double overall_accuracy = 0.0;
    std::map<std::string, std::size_t> category_totals;
    std::map<std::string, std::size_t> category_correct;
    std::map<std::string, double> category_accuracy;
    std::optional<double> ace_overall;
    std::map<std::string, double> category_ace;
    ComponentStats stats_total;
    ComponentStats stats_binary;
    ComponentStats stats_smv;
    ComponentStats stats_cer;
    json config_echo;
    std::vector<InstanceRecord> records;  // sorted by instance id

    json to_json() const {
        json cat_acc = json::object();
        for (const auto& [cat, acc] : category_accuracy) cat_acc[cat] = acc;
        json cat_detail = json::object();
        for (const auto& [cat, total] : category_totals) {
            const auto correct_it = category_correct.find(cat);
            cat_detail[cat] = json{{"total", total},
                                   {"correct", correct_it == category_correct.end() ? 0 : correct_it->second}};
        }
        json recs = json::array();
        for (const auto& r : records) recs.push_back(r.to_json());
        json out{{"counts",
                  json{{"instances", instance_count}, {"responses", response_count}, {"correct", correct_count}}},
                 {"accuracy", json{{"overall", overall_accuracy}, {"per_category", cat_acc}, {"detail", cat_detail}}},
                 {"reward_stats", json{{"total", stats_total.to_json()},
                                       {"r_binary", stats_binary.to_json()},
                                       {"r_smv", stats_smv.to_json()},
                                       {"r_cer", stats_cer.to_json()}}},
                 {"config", config_echo},
                 {"records", recs}};
        if (ace_overall.has_value()) {
            json cat_ace = json::object();
            for (const auto& [cat, v] : category_ace) cat_ace[cat] = v;
            out["ace"] = json{{"overall", *ace_overall}, {"per_category", cat_ace}};
        }
        return out;
    }
};

/// Scores every rollout of every instance that has responses. Accuracy uses
/// the first rollout; ACE uses the first rollout's CER (or the mean over all
/// rollouts with ace_all_rollouts). Records are ordered by instance id, and
/// the reduction runs in that order, so the report is identical for any
/// permutation of the inputs and any thread count.
inline EvalReport evaluate(const std::vector<Instance>& instances,
                           const std::unordered_map<std::string, std::vector<std::string>>& responses,
                           const Backends& backends, const RewardConfig& cfg, const EvalFlags& flags = EvalFlags{}) {
    cfg.validate();
    if (responses.empty()) throw InputError("no responses to evaluate");

    std::unordered_map<std::string, const Instance*> by_id;
    for (const auto& inst : instances) by_id.emplace(inst.id, &inst);
    for (const auto& [id, texts] : responses) {
        if (by_id.find(id) == by_id.end()) throw InputError("responses reference unknown instance '" + id + "'");
        if (texts.empty()) throw InputError("instance '" + id + "' has an empty response list");
    }

    // Work list in deterministic id order.
    std::vector<std::pair<const Instance*, const std::vector<std::string>*>> work;
    for (const auto& [id, texts] : responses) work.emplace_back(by_id.at(id), &texts);
    std::sort(work.begin(), work.end(),
              [](const auto& a, const auto& b) { return a.first->id < b.first->id; });

    std::vector<InstanceRecord> records(work.size());
    const auto score_one = [&](std::size_t w) {
        const Instance& inst = *work[w].first;
        const std::vector<std::string>& texts = *work[w].second;
        InstanceRecord rec;
        rec.id = inst.id;
        rec.category = to_string(inst.category);
        for (std::size_t r = 0; r < texts.size(); ++r) {
            const bool cer_this_rollout = flags.ace && (flags.ace_all_rollouts || r == 0);
            rec.breakdowns.push_back(
                composite_reward(texts[r], inst, backends, cfg, cer_this_rollout, flags.smv));
        }
        rec.accuracy = rec.breakdowns.front().r_binary;
        records[w] = std::move(rec);
    };

    const int threads = std::max(1, flags.threads);
    if (threads == 1 || work.size() <= 1) {
        for (std::size_t w = 0; w < work.size(); ++w) score_one(w);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t w = next.fetch_add(1); w < work.size(); w = next.fetch_add(1)) score_one(w);
            });
        }
        for (auto& t : pool) t.join();
    }

    EvalReport report;
    report.config_echo = json{{"reward", cfg.to_json()},
                              {"flags", json{{"accuracy", flags.accuracy},
                                             {"smv", flags.smv},
                                             {"ace", flags.ace},
                                             {"ace_rollout", flags.ace_all_rollouts ? "all" : "first"}}},
                              {"similarity", backends.similarity ? backends.similarity->name() : "none"},
                              {"student", backends.student ? backends.student->name() : "none"},
                              {"version", version()}};

    double ace_sum = 0.0;
    std::map<std::string, double> cat_ace_sum;
    for (auto& rec : records) {
        report.instance_count += 1;
        report.response_count += rec.breakdowns.size();
        report.category_totals[rec.category] += 1;
        if (rec.accuracy == 1) {
            report.correct_count += 1;
            report.category_correct[rec.category] += 1;
        }
        for (const auto& b : rec.breakdowns) {
            report.stats_total.add(b.total);
            report.stats_binary.add(b.r_binary);
            report.stats_smv.add(b.r_smv);
            if (b.cer.has_value()) report.stats_cer.add(b.cer->r_cer);
        }
        if (flags.ace) {
            double instance_cer = 0.0;
            if (flags.ace_all_rollouts) {
                for (const auto& b : rec.breakdowns) instance_cer += b.r_cer_or_zero();
                instance_cer /= static_cast<double>(rec.breakdowns.size());
            } else {
                instance_cer = rec.breakdowns.front().r_cer_or_zero();
            }
            ace_sum += instance_cer;
            cat_ace_sum[rec.category] += instance_cer;
        }
        report.records.push_back(std::move(rec));
    }

    report.overall_accuracy =
        report.instance_count == 0 ? 0.0
                                   : static_cast<double>(report.correct_count) / report.instance_count;
    for (const auto& [cat, total] : report.category_totals) {
        const auto correct_it = report.category_correct.find(cat);
        const std::size_t correct = correct_it == report.category_correct.end() ? 0 : correct_it->second;
        report.category_accuracy[cat] = static_cast<double>(correct) / static_cast<double>(total);
    }
    if (flags.ace && report.instance_count > 0) {
        report.ace_overall = ace_sum / static_cast<double>(report.instance_count);
        for (const auto& [cat, sum] : cat_ace_sum) {
            report.category_ace[cat] = sum / static_cast<double>(report.category_totals.at(cat));
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

enum class ReportFormat { Json, Markdown, Csv };

namespace detail {

inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace detail

/// Serializes a report. JSON output is canonical (sorted keys, 6-decimal
/// floats) and therefore byte-identical across emissions of the same
/// report; markdown gives per-category tables; CSV gives one row per
/// instance.
inline std::string emit_report(const EvalReport& report, ReportFormat format) {
    if (format == ReportFormat::Json) {
        return canonical_dump(report.to_json());
    }
    if (format == ReportFormat::Csv) {
        std::string out = "id,category,accuracy,responses,total,r_binary,r_smv,r_cer\n";
        for (const auto& rec : report.records) {
            const RewardBreakdown& first = rec.breakdowns.front();
            out += rec.id;
            out += ',';
            out += rec.category;
            out += ',';
            out += std::to_string(rec.accuracy);
            out += ',';
            out += std::to_string(rec.breakdowns.size());
            out += ',';
            out += detail::fmt6(first.total);
            out += ',';
            out += std::to_string(first.r_binary);
            out += ',';
            out += detail::fmt6(first.r_smv);
            out += ',';
            out += first.cer.has_value() ? detail::fmt6(first.cer->r_cer) : std::string();
            out += '\n';
        }
        return out;
    }

    std::string out;
    out += "# Evaluation Report\n\n";
    out += "Instances: " + std::to_string(report.instance_count) +
           "; responses: " + std::to_string(report.response_count) + "\n\n";
    out += "## Accuracy\n\n";
    out += "| category | instances | correct | accuracy |\n";
    out += "|---|---:|---:|---:|\n";
    for (const auto& [cat, total] : report.category_totals) {
        const auto correct_it = report.category_correct.find(cat);
        const std::size_t correct = correct_it == report.category_correct.end() ? 0 : correct_it->second;
        out += "| " + cat + " | " + std::to_string(total) + " | " + std::to_string(correct) + " | " +
               detail::fmt6(report.category_accuracy.at(cat)) + " |\n";
    }
    out += "| overall | " + std::to_string(report.instance_count) + " | " + std::to_string(report.correct_count) +
           " | " + detail::fmt6(report.overall_accuracy) + " |\n";
    if (report.ace_overall.has_value()) {
        out += "\n## Reasoning effectiveness\n\n";
        out += "| category | ace |\n|---|---:|\n";
        for (const auto& [cat, v] : report.category_ace) {
            out += "| " + cat + " | " + detail::fmt6(v) + " |\n";
        }
        out += "| overall | " + detail::fmt6(*report.ace_overall) + " |\n";
    }
    out += "\n## Reward statistics\n\n";
    out += "| component | count | mean | min | max |\n|---|---:|---:|---:|---:|\n";
    const auto stat_row = [&out](const char* name, const ComponentStats& s) {
        out += "| " + std::string(name) + " | " + std::to_string(s.count);
        if (s.count > 0) {
            out += " | " + detail::fmt6(s.mean) + " | " + detail::fmt6(s.min) + " | " + detail::fmt6(s.max);
        } else {
            out += " | - | - | -";
        }
        out += " |\n";
    };
    stat_row("total", report.stats_total);
    stat_row("r_binary", report.stats_binary);
    stat_row("r_smv", report.stats_smv);
    stat_row("r_cer", report.stats_cer);
    out += "\n## Configuration\n\n```json\n" + canonical_dump(report.config_echo) + "\n```\n";
    return out;
}

// ---------------------------------------------------------------------------
// Student validity check
// ---------------------------------------------------------------------------

struct ValidityReport {
    double non_irrelevance_rate = 0.0;
    double irrelevance_rate = 0.0;
    std::size_t non_irrelevance_count = 0;
    std::size_t irrelevance_count = 0;
    std::size_t skipped = 0;  // instances with no usable reasoning prefix
    bool degenerate = false;  // near-zero success on call-taking instances

    json to_json() const {
        return json{{"non_irrelevance_rate", non_irrelevance_rate},
                    {"irrelevance_rate", irrelevance_rate},
                    {"non_irrelevance_count", non_irrelevance_count},
                    {"irrelevance_count", irrelevance_count},
                    {"skipped", skipped},
                    {"degenerate", degenerate}};
    }
};

/// Probes whether a student backend is usable for effectiveness scoring:
/// mean continuation success rate under the reference reasoning prefixes,
/// split into call-taking and irrelevance instances. A backend whose
/// call-taking rate falls below 5% has collapsed (e.g. it rejects
/// everything) and is flagged degenerate.
inline ValidityReport student_validity_check(const std::vector<Instance>& instances,
                                             const StudentBackend& student, const RewardConfig& cfg) {
    cfg.validate();
    if (instances.empty()) throw InputError("no instances for the validity check");
    ValidityReport report;
    double sum_call = 0.0;
    double sum_irrelevance = 0.0;
    for (const auto& inst : instances) {
        std::string reason;
        if (inst.category == TaskCategory::Irrelevance && inst.irrelevance_reason.has_value()) {
            reason = *inst.irrelevance_reason;
        } else if (inst.gt_document.has_value()) {
            reason = inst.gt_document->reason;
        } else {
            ++report.skipped;
            continue;
        }
        const double v = estimate_success_rate(cer_prefix(reason), inst, student, cfg);
        if (inst.category == TaskCategory::Irrelevance) {
            sum_irrelevance += v;
            ++report.irrelevance_count;
        } else {
            sum_call += v;
            ++report.non_irrelevance_count;
        }
    }
    if (report.non_irrelevance_count > 0) {
        report.non_irrelevance_rate = sum_call / static_cast<double>(report.non_irrelevance_count);
    }
    if (report.irrelevance_count > 0) {
        report.irrelevance_rate = sum_irrelevance / static_cast<double>(report.irrelevance_count);
    }
    report.degenerate = report.non_irrelevance_count > 0 && report.non_irrelevance_rate < 0.05;
    return report;
}

// ---------------------------------------------------------------------------
// Rank stability of effectiveness scores across sampling configurations
// ---------------------------------------------------------------------------

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

/// Pearson correlation of the average ranks. Identical vectors score 1 by
/// convention (covers the all-tied case); otherwise a zero-variance side
/// makes the correlation undefined and scores 0.
inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw InputError("rank correlation needs two equal-length vectors");
    if (a == b) return 1.0;
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0;
    double va = 0.0;
    double vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

/// Tie-adjusted Kendall correlation (the τ-b form). Identical vectors score
/// 1 by convention; a side that is entirely tied otherwise scores 0.
inline double kendall_tau_b(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw InputError("rank correlation needs two equal-length vectors");
    if (a == b) return 1.0;
    const std::size_t n = a.size();
    long long concordant = 0;
    long long discordant = 0;
    long long ties_a = 0;
    long long ties_b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double da = a[i] - a[j];
            const double db = b[i] - b[j];
            if (da == 0.0 && db == 0.0) continue;  // tied in both: excluded from every term
            if (da == 0.0) {
                ++ties_a;
            } else if (db == 0.0) {
                ++ties_b;
            } else if ((da > 0.0) == (db > 0.0)) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    }
    const double n0 = concordant + discordant + ties_a + ties_b;
    const double denom_a = static_cast<double>(concordant + discordant + ties_a);
    const double denom_b = static_cast<double>(concordant + discordant + ties_b);
    (void)n0;
    if (denom_a == 0.0 || denom_b == 0.0) return 0.0;
    return static_cast<double>(concordant - discordant) / std::sqrt(denom_a * denom_b);
}

struct RankStability {
    double spearman = 0.0;
    double kendall = 0.0;
    double sign_agreement = 0.0;  // fraction with matching sign (zero counts as its own sign)
    double pr_small_delta = 0.0;  // fraction with |Δ| ≤ threshold
    double mean_abs_delta = 0.0;
    double delta_threshold = 0.2;

    json to_json() const {
        return json{{"spearman", spearman},
                    {"kendall", kendall},
                    {"sign_agreement", sign_agreement},
                    {"pr_small_delta", pr_small_delta},
                    {"mean_abs_delta", mean_abs_delta},
                    {"delta_threshold", delta_threshold}};
    }
};

inline RankStability rank_stability(const std::vector<double>& reference, const std::vector<double>& other,
                                    double delta_threshold = 0.2) {
    if (reference.size() != other.size() || reference.empty()) {
        throw InputError("rank stability needs two equal-length non-empty vectors");
    }
    RankStability out;
    out.delta_threshold = delta_threshold;
    out.spearman = spearman_rho(reference, other);
    out.kendall = kendall_tau_b(reference, other);
    const auto sign = [](double v) { return v > 0.0 ? 1 : v < 0.0 ? -1 : 0; };
    std::size_t agree = 0;
    std::size_t small = 0;
    double abs_sum = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        if (sign(reference[i]) == sign(other[i])) ++agree;
        const double d = std::abs(reference[i] - other[i]);
        if (d <= delta_threshold) ++small;
        abs_sum += d;
    }
    const double n = static_cast<double>(reference.size());
    out.sign_agreement = agree / n;
    out.pr_small_delta = small / n;
    out.mean_abs_delta = abs_sum / n;
    return out;
}

/// One sampling configuration for the robustness sweep.
struct CerConfig {
    std::string label;
    double temperature = 0.4;
    double top_p = 1.0;
    int samples = 5;
};

struct RobustnessRow {
    CerConfig config;
    RankStability vs_first;

    json to_json() const {
        return json{{"label", config.label},
                    {"temperature", config.temperature},
                    {"top_p", config.top_p},
                    {"samples", config.samples},
                    {"vs_first", vs_first.to_json()}};
    }
};

struct RobustnessReport {
    std::vector<std::string> instance_ids;
    std::vector<std::vector<double>> cer_vectors;  // one per config, aligned with instance_ids
    std::vector<RobustnessRow> rows;               // rows[0] is the reference vs itself

    json to_json() const {
        json vectors = json::array();
        for (const auto& v : cer_vectors) vectors.push_back(v);
        json row_list = json::array();
        for (const auto& r : rows) row_list.push_back(r.to_json());
        return json{{"instance_ids", instance_ids}, {"cer_vectors", vectors}, {"rows", row_list}};
    }
};

/// Builds a per-instance effectiveness vector for each sampling
/// configuration (reference reasoning prefixes, fresh baseline cache per
/// configuration) and compares every configuration's vector against the
/// first. Needs at least two configurations.
inline RobustnessReport cer_robustness(const std::vector<Instance>& instances, const StudentBackend& student,
                                       const RewardConfig& base_cfg, const std::vector<CerConfig>& configs,
                                       double delta_threshold = 0.2) {
    base_cfg.validate();
    if (configs.size() < 2) throw InputError("robustness sweep needs at least 2 sampling configurations");
    if (instances.empty()) throw InputError("robustness sweep needs instances");

    RobustnessReport report;
    for (const auto& cfg : configs) {
        RewardConfig run_cfg = base_cfg;
        run_cfg.cer_temperature = cfg.temperature;
        run_cfg.cer_top_p = cfg.top_p;
        run_cfg.cer_samples = cfg.samples;
        run_cfg.validate();
        BaselineCache cache;
        std::vector<double> vec;
        for (const auto& inst : instances) {
            std::string reason;
            if (inst.category == TaskCategory::Irrelevance && inst.irrelevance_reason.has_value()) {
                reason = *inst.irrelevance_reason;
            } else if (inst.gt_document.has_value()) {
                reason = inst.gt_document->reason;
            } else {
                throw InputError("instance '" + inst.id + "' has no reference reasoning for the sweep");
            }
            vec.push_back(cer(reason, inst, student, run_cfg, &cache).r_cer);
        }
        if (report.instance_ids.empty()) {
            for (const auto& inst : instances) report.instance_ids.push_back(inst.id);
        }
        report.cer_vectors.push_back(std::move(vec));
    }

    for (std::size_t c = 0; c < configs.size(); ++c) {
        RobustnessRow row;
        row.config = configs[c];
        row.vs_first = rank_stability(report.cer_vectors.front(), report.cer_vectors[c], delta_threshold);
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace r2if
