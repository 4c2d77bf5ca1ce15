#pragma once

#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "r2if/backends.hpp"
#include "r2if/domain.hpp"
#include "r2if/errors.hpp"
#include "r2if/match.hpp"
#include "r2if/response_parser.hpp"

namespace r2if {

// ---------------------------------------------------------------------------
// Reward traces
// ---------------------------------------------------------------------------

/// Per-parameter reasoning-quality trace: specification and modification
/// similarity (gated at τ), the hard instantiation bit, and the combined
/// score. Annotation components marked with a sentinel are "unavailable".
struct ParamSmvTrace {
    std::string param;
    bool snippet_present = false;
    bool spec_available = false;
    bool mod_available = false;
    std::optional<double> sim_spec;  // raw similarity, only when spec_available and snippet present
    std::optional<double> sim_mod;
    double r_spec = 0.0;  // gated values actually entering the mean
    double r_mod = 0.0;
    int r_val = 0;
    int components_used = 3;  // divisor backing `score`
    double score = 0.0;

    json to_json() const {
        json j{{"param", param},
               {"snippet_present", snippet_present},
               {"spec_available", spec_available},
               {"mod_available", mod_available},
               {"r_spec", r_spec},
               {"r_mod", r_mod},
               {"r_val", r_val},
               {"components_used", components_used},
               {"score", score}};
        if (sim_spec.has_value()) j["sim_spec"] = *sim_spec;
        if (sim_mod.has_value()) j["sim_mod"] = *sim_mod;
        return j;
    }
};

struct CallSmvTrace {
    std::size_t pred_index = 0;
    std::size_t gold_index = 0;
    std::string name;
    bool answer_entry_found = false;
    std::vector<ParamSmvTrace> params;
    double score = 0.0;

    json to_json() const {
        json params_json = json::array();
        for (const auto& p : params) params_json.push_back(p.to_json());
        return json{{"pred_index", pred_index}, {"gold_index", gold_index},   {"name", name},
                    {"answer_entry_found", answer_entry_found}, {"params", params_json}, {"score", score}};
    }
};

/// Continuation-based reasoning-effectiveness estimate: v is the student's
/// success rate when continuing from the scored reasoning, v_base its rate
/// with no reasoning at all.
struct CerEstimate {
    double v = 0.0;
    double v_base = 0.0;
    double r_cer = 0.0;  // v - v_base
    int samples = 0;
    int successes = 0;

    json to_json() const {
        return json{{"v", v}, {"v_base", v_base}, {"r_cer", r_cer}, {"samples", samples}, {"successes", successes}};
    }
};

/// Full decomposition of one response's reward.
struct RewardBreakdown {
    int r_format = 0;
    int r_correctness = 0;
    int r_binary = 0;
    double r_smv = 0.0;
    std::optional<CerEstimate> cer;  // absent when CER is disabled or skipped
    double total = 0.0;
    std::vector<CallSmvTrace> smv_traces;
    std::vector<GrammarViolation> violations;

    double r_cer_or_zero() const { return cer.has_value() ? cer->r_cer : 0.0; }

    json to_json() const {
        json traces = json::array();
        for (const auto& t : smv_traces) traces.push_back(t.to_json());
        json viols = json::array();
        for (const auto v : violations) viols.push_back(to_string(v));
        json j{{"r_format", r_format},
               {"r_correctness", r_correctness},
               {"r_binary", r_binary},
               {"r_smv", r_smv},
               {"r_cer", cer.has_value() ? json(cer->r_cer) : json(nullptr)},
               {"total", total},
               {"smv_traces", traces},
               {"violations", viols}};
        if (cer.has_value()) j["cer"] = cer->to_json();
        return j;
    }
};

// ---------------------------------------------------------------------------
// Reasoning-quality (SMV) scoring
// ---------------------------------------------------------------------------

/// Threshold gate: the similarity value itself when it clears τ, else 0.
inline double gated_similarity(double sim, double tau) {
    return sim >= tau ? sim : 0.0;
}

/// Scores one parameter of a matched call. Three components: similarity of
/// the reasoning snippet to the specification annotation, to the
/// modification annotation, and the hard bit for the parameter actually
/// appearing in the call. With smv_renormalize the mean runs over available
/// components only (sentinel-marked annotations drop out); otherwise the
/// divisor is always 3 and unavailable components contribute 0.
inline ParamSmvTrace smv_param(const std::string& param, const std::string* snippet, const std::string& spec,
                               const std::string& mod, bool instantiated, const SimilarityBackend& sim,
                               const RewardConfig& cfg) {
    cfg.validate();
    ParamSmvTrace t;
    t.param = param;
    t.snippet_present = snippet != nullptr;
    t.spec_available = !is_no_spec(spec);
    t.mod_available = !is_no_modify(mod);
    t.r_val = instantiated ? 1 : 0;

    if (t.spec_available && snippet != nullptr) {
        t.sim_spec = sim.similarity(*snippet, spec);
        t.r_spec = gated_similarity(*t.sim_spec, cfg.tau);
    }
    if (t.mod_available && snippet != nullptr) {
        t.sim_mod = sim.similarity(*snippet, mod);
        t.r_mod = gated_similarity(*t.sim_mod, cfg.tau);
    }

    if (cfg.smv_renormalize) {
        t.components_used = 1 + (t.spec_available ? 1 : 0) + (t.mod_available ? 1 : 0);
        double sum = static_cast<double>(t.r_val);
        if (t.spec_available) sum += t.r_spec;
        if (t.mod_available) sum += t.r_mod;
        t.score = sum / t.components_used;
    } else {
        t.components_used = 3;
        t.score = (t.r_spec + t.r_mod + t.r_val) / 3.0;
    }
    return t;
}

/// Scores one exactly-matched call: the mean of smv_param over the
/// parameters the gold document supervises. An entry that supervises
/// nothing scores 1 — the call itself already matched exactly.
inline double smv_call(const ToolCall& pred, const AnswerEntry* answer_entry, const GtDocEntry& doc_entry,
                       const SimilarityBackend& sim, const RewardConfig& cfg,
                       std::vector<ParamSmvTrace>* out_traces = nullptr) {
    if (doc_entry.params.empty()) return 1.0;
    double sum = 0.0;
    for (const auto& [pname, annotation] : doc_entry.params) {
        const std::string* snippet =
            answer_entry != nullptr ? answer_entry->find_snippet(pname) : nullptr;
        const bool instantiated = pred.has_argument(pname);
        ParamSmvTrace t = smv_param(pname, snippet, annotation.specification, annotation.modification,
                                    instantiated, sim, cfg);
        sum += t.score;
        if (out_traces != nullptr) out_traces->push_back(std::move(t));
    }
    return sum / static_cast<double>(doc_entry.params.size());
}

/// Scores a whole predicted call list against the gold list and its
/// reasoning document: matched calls contribute their smv_call share, and
/// the sum is divided by max(|pred|, |gold|) so both missing and surplus
/// calls dilute the score. No matches (rejections included) score 0.
inline double smv_action(const ActionList& pred, const ActionList& gold, const AnswerDoc& answer_doc,
                         const GtDocument& gt_doc, const SimilarityBackend& sim, const RewardConfig& cfg,
                         std::vector<CallSmvTrace>* out_traces = nullptr) {
    if (gt_doc.calls.size() != gold.size()) {
        throw DatasetError(0, "gt_document.calls",
                           "document has " + std::to_string(gt_doc.calls.size()) + " entries for " +
                               std::to_string(gold.size()) + " gold calls");
    }
    for (std::size_t j = 0; j < gold.size(); ++j) {
        if (gt_doc.calls[j].name != gold.calls[j].name) {
            throw DatasetError(0, "gt_document.calls",
                               "entry " + std::to_string(j) + " names " + gt_doc.calls[j].name +
                                   " but gold call is " + gold.calls[j].name);
        }
    }

    const std::size_t denom = std::max(pred.size(), gold.size());
    if (denom == 0) return 0.0;

    const auto pairs = align_exact(pred, gold);
    const auto entries = align_answer_entries(answer_doc, pred);
    double sum = 0.0;
    for (const auto& pair : pairs) {
        CallSmvTrace trace;
        trace.pred_index = pair.pred_index;
        trace.gold_index = pair.gold_index;
        trace.name = pred.calls[pair.pred_index].name;
        trace.answer_entry_found = entries[pair.pred_index] != nullptr;
        trace.score = smv_call(pred.calls[pair.pred_index], entries[pair.pred_index],
                               gt_doc.calls[pair.gold_index], sim, cfg,
                               out_traces != nullptr ? &trace.params : nullptr);
        sum += trace.score;
        if (out_traces != nullptr) out_traces->push_back(std::move(trace));
    }
    return sum / static_cast<double>(denom);
}

/// Irrelevance case: no calls to inspect, so the reasoning is scored by
/// gated similarity against the reference explanation of why no tool fits.
inline double smv_irrelevance(const std::string& reason_text, const std::string& reference_reason,
                              const SimilarityBackend& sim, const RewardConfig& cfg) {
    cfg.validate();
    return gated_similarity(sim.similarity(reason_text, reference_reason), cfg.tau);
}

// ---------------------------------------------------------------------------
// Continuation-based effectiveness (CER)
// ---------------------------------------------------------------------------

/// Prefix a student continues from: the finished reasoning block plus the
/// opened tool block.
inline std::string cer_prefix(const std::string& reason_text) {
    std::string p;
    p += kReasonOpen;
    p += reason_text;
    p += kReasonClose;
    p += kToolOpen;
    return p;
}

inline const std::string kEmptyReasonPrefix = cer_prefix("");

/// Concurrent single-flight cache for baseline success rates, keyed by
/// instance id. The first caller for a key computes; everyone else blocks on
/// the same future. A failed computation is evicted so a later call retries.
class BaselineCache {
  public:
    double get_or_compute(const std::string& key, const std::function<double()>& compute) {
        std::shared_future<double> fut;
        std::promise<double> prom;
        bool leader = false;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            const auto it = futures_.find(key);
            if (it == futures_.end()) {
                leader = true;
                fut = prom.get_future().share();
                futures_.emplace(key, fut);
            } else {
                fut = it->second;
            }
        }
        if (leader) {
            try {
                prom.set_value(compute());
            } catch (...) {
                {
                    std::lock_guard<std::mutex> lock(mutex_);
                    futures_.erase(key);
                }
                prom.set_exception(std::current_exception());
            }
        }
        return fut.get();
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return futures_.size();
    }

    void clear() {
        std::lock_guard<std::mutex> lock(mutex_);
        futures_.clear();
    }

  private:
    mutable std::mutex mutex_;
    std::unordered_map<std::string, std::shared_future<double>> futures_;
};

/// Draws cfg.cer_samples continuations of `prefix`, reassembles each into a
/// full response, and returns the fraction judged correct. The continuation
/// must supply the rest of the tool block (closing tag included).
inline double estimate_success_rate(const std::string& prefix, const Instance& instance,
                                    const StudentBackend& student, const RewardConfig& cfg,
                                    int* successes_out = nullptr) {
    cfg.validate();
    const SamplingParams sampling{cfg.cer_temperature, cfg.cer_top_p, 512};
    const auto texts = student.continuations(instance, prefix, cfg.cer_samples, sampling);
    if (static_cast<int>(texts.size()) < cfg.cer_samples) {
        throw BackendError("student", "short continuation batch: " + std::to_string(texts.size()) + " of " +
                                          std::to_string(cfg.cer_samples));
    }
    int successes = 0;
    for (int i = 0; i < cfg.cer_samples; ++i) {
        const ParsedResponse parsed = parse_response(prefix + texts[static_cast<std::size_t>(i)]);
        successes += correctness_reward(parsed, instance.ground_truth, cfg.order_sensitive);
    }
    if (successes_out != nullptr) *successes_out = successes;
    return static_cast<double>(successes) / cfg.cer_samples;
}

/// Reasoning-effectiveness reward: the student's success rate continuing
/// from this reasoning, minus its baseline rate with empty reasoning. The
/// baseline comes from the instance when precomputed, otherwise it is
/// estimated once per instance (same sample count and sampling parameters)
/// through the cache.
inline CerEstimate cer(const std::string& reason_text, const Instance& instance, const StudentBackend& student,
                       const RewardConfig& cfg, BaselineCache* cache = nullptr) {
    CerEstimate est;
    est.samples = cfg.cer_samples;
    est.v = estimate_success_rate(cer_prefix(reason_text), instance, student, cfg, &est.successes);
    if (instance.baseline_success_rate.has_value()) {
        est.v_base = *instance.baseline_success_rate;
    } else {
        const auto compute = [&] { return estimate_success_rate(kEmptyReasonPrefix, instance, student, cfg); };
        est.v_base = cache != nullptr ? cache->get_or_compute(instance.id, compute) : compute();
    }
    est.r_cer = est.v - est.v_base;
    return est;
}

// ---------------------------------------------------------------------------
// Composite reward
// ---------------------------------------------------------------------------

/// Injected scoring dependencies. The similarity backend is required for any
/// reasoning-quality scoring; the student backend only for CER.
struct Backends {
    std::shared_ptr<const SimilarityBackend> similarity;
    std::shared_ptr<const StudentBackend> student;
    std::shared_ptr<BaselineCache> baseline_cache;
};

/// Scores one raw response against one instance:
///   total = binary_weight · (format · correctness) + r_cer + r_smv.
/// CER is skipped (reported absent, 0 in the total) when disabled, when no
/// reasoning block exists, or when the format is invalid and cer_on_invalid
/// is off. Reasoning-quality falls back to 0 when the instance carries no
/// reasoning document, and is skipped entirely (0, no backend calls) when
/// enable_smv is off.
inline RewardBreakdown composite_reward(const std::string& response, const Instance& instance,
                                        const Backends& backends, const RewardConfig& cfg,
                                        bool enable_cer = true, bool enable_smv = true) {
    cfg.validate();
    const ParsedResponse parsed = parse_response(response);

    RewardBreakdown out;
    out.violations = parsed.violations;
    out.r_format = parsed.format_valid ? 1 : 0;
    out.r_correctness = correctness_reward(parsed, instance.ground_truth, cfg.order_sensitive);
    out.r_binary = out.r_format * out.r_correctness;

    if (!enable_smv) {
        out.r_smv = 0.0;
    } else if (instance.category == TaskCategory::Irrelevance) {
        if (!instance.irrelevance_reason.has_value()) {
            throw DatasetError(0, "irrelevance_reason", "instance " + instance.id + " lacks a reference reason");
        }
        if (backends.similarity == nullptr) {
            throw BackendError("similarity", "no similarity backend configured");
        }
        out.r_smv = parsed.reason_text.has_value()
                        ? smv_irrelevance(*parsed.reason_text, *instance.irrelevance_reason,
                                          *backends.similarity, cfg)
                        : 0.0;
    } else if (instance.gt_document.has_value()) {
        if (backends.similarity == nullptr) {
            throw BackendError("similarity", "no similarity backend configured");
        }
        const auto* actions = std::get_if<ActionList>(&parsed.tool_payload);
        if (actions != nullptr) {
            const AnswerDoc doc =
                parse_answer_doc(parsed.reason_text.has_value() ? *parsed.reason_text : std::string());
            out.r_smv = smv_action(*actions, instance.ground_truth, doc, *instance.gt_document,
                                   *backends.similarity, cfg, &out.smv_traces);
        } else {
            out.r_smv = 0.0;  // rejection or unparseable payload: nothing matched
        }
    } else {
        out.r_smv = 0.0;  // no reasoning document to score against
    }

    const bool want_cer = enable_cer && backends.student != nullptr && parsed.reason_text.has_value() &&
                          (parsed.format_valid || cfg.cer_on_invalid);
    if (want_cer) {
        out.cer = cer(*parsed.reason_text, instance, *backends.student, cfg, backends.baseline_cache.get());
    }

    out.total = cfg.binary_weight * out.r_binary + out.r_cer_or_zero() + out.r_smv;
    return out;
}

}  // namespace r2if
