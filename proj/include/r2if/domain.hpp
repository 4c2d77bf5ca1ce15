#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <string>
#include <vector>

#include "r2if/canonical.hpp"
#include "r2if/errors.hpp"

namespace r2if {

// ---------------------------------------------------------------------------
// Task taxonomy
// ---------------------------------------------------------------------------

enum class TaskCategory {
    Simple,            // one tool offered, one call
    Multiple,          // several tools offered, one call
    Parallel,          // one tool, several calls
    ParallelMultiple,  // several tools, several calls
    Irrelevance,       // no tool applies; the right answer is the rejection string
};

inline const char* to_string(TaskCategory c) {
    switch (c) {
        case TaskCategory::Simple: return "simple";
        case TaskCategory::Multiple: return "multiple";
        case TaskCategory::Parallel: return "parallel";
        case TaskCategory::ParallelMultiple: return "parallel_multiple";
        case TaskCategory::Irrelevance: return "irrelevance";
    }
    return "unknown";
}

inline std::optional<TaskCategory> category_from_string(const std::string& s) {
    if (s == "simple") return TaskCategory::Simple;
    if (s == "multiple") return TaskCategory::Multiple;
    if (s == "parallel") return TaskCategory::Parallel;
    if (s == "parallel_multiple") return TaskCategory::ParallelMultiple;
    if (s == "irrelevance") return TaskCategory::Irrelevance;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Tool schemas
// ---------------------------------------------------------------------------

struct ParamSchema {
    std::string type_tag;  // string|integer|number|boolean|array|object|enum
    std::string description;
    std::vector<json> enum_values;           // non-empty when type_tag == "enum"
    std::optional<json> default_value;
    bool required = false;
};

struct ToolSchema {
    std::string name;
    std::string description;
    std::vector<std::pair<std::string, ParamSchema>> parameters;  // ordered, names unique

    const ParamSchema* find_param(const std::string& p) const {
        for (const auto& [n, schema] : parameters) {
            if (n == p) return &schema;
        }
        return nullptr;
    }
};

inline bool is_valid_type_tag(const std::string& t) {
    static const char* tags[] = {"string", "integer", "number", "boolean", "array", "object", "enum"};
    return std::find(std::begin(tags), std::end(tags), t) != std::end(tags);
}

// ---------------------------------------------------------------------------
// Tool calls
// ---------------------------------------------------------------------------

/// One (name, arguments) tuple. `arguments` is a canonicalized JSON object;
/// construction through `make_tool_call` guarantees that.
struct ToolCall {
    std::string name;
    json arguments = json::object();

    bool has_argument(const std::string& p) const { return arguments.contains(p); }

    friend bool operator==(const ToolCall& a, const ToolCall& b) {
        return a.name == b.name && a.arguments == b.arguments;
    }
};

inline ToolCall make_tool_call(std::string name, const json& arguments) {
    if (!arguments.is_object()) {
        throw InvalidValueError("tool-call arguments must be a JSON object");
    }
    return ToolCall{std::move(name), canonical_value(arguments)};
}

/// Ordered list of tool calls. May be empty (the empty action).
struct ActionList {
    std::vector<ToolCall> calls;

    bool empty() const { return calls.empty(); }
    std::size_t size() const { return calls.size(); }

    friend bool operator==(const ActionList& a, const ActionList& b) {
        return a.calls == b.calls;
    }
};

// ---------------------------------------------------------------------------
// Ground-truth reasoning document
// ---------------------------------------------------------------------------

/// Sentinel annotation values. Comparison trims surrounding whitespace and is
/// case-insensitive; the canonical spellings are "no spec" / "no modify".
inline bool is_sentinel(const std::string& text, const std::string& sentinel) {
    std::size_t b = 0;
    std::size_t e = text.size();
    while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
    if (e - b != sentinel.size()) return false;
    for (std::size_t i = 0; i < sentinel.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(text[b + i])) != sentinel[i]) return false;
    }
    return true;
}

inline bool is_no_spec(const std::string& text) { return is_sentinel(text, "no spec"); }
inline bool is_no_modify(const std::string& text) { return is_sentinel(text, "no modify"); }

struct GtParamAnnotation {
    std::string specification;  // format constraint, or the "no spec" sentinel
    std::string modification;   // value transformation, or the "no modify" sentinel
};

struct GtDocEntry {
    std::string name;
    std::vector<std::pair<std::string, GtParamAnnotation>> params;  // ordered, names unique

    const GtParamAnnotation* find_param(const std::string& p) const {
        for (const auto& [n, a] : params) {
            if (n == p) return &a;
        }
        return nullptr;
    }
};

/// Per-parameter annotations aligned positionally with the ground-truth
/// action list.
struct GtDocument {
    std::string reason;
    std::vector<GtDocEntry> calls;
};

// ---------------------------------------------------------------------------
// Benchmark instance
// ---------------------------------------------------------------------------

struct Instance {
    std::string id;
    TaskCategory category = TaskCategory::Simple;
    std::string query;
    std::vector<ToolSchema> tools;
    ActionList ground_truth;
    std::optional<GtDocument> gt_document;
    std::optional<std::string> irrelevance_reason;
    std::optional<double> baseline_success_rate;
};

// ---------------------------------------------------------------------------
// Reward configuration
// ---------------------------------------------------------------------------

struct RewardConfig {
    double tau = 0.7;             // similarity gate threshold, in (0, 1]
    double binary_weight = 3.0;   // weight of the hard gate in the composite
    double eta = 1e-4;            // normalization stabilizer, > 0
    double epsilon_clip = 0.2;    // surrogate clipping width, in (0, 1)
    double kl_coef = 0.0;         // reference-policy KL penalty weight
    int cer_samples = 5;          // continuations per success-rate estimate
    double cer_temperature = 0.4;
    double cer_top_p = 1.0;
    bool smv_renormalize = true;  // average over available components instead of a fixed /3
    bool order_sensitive = false; // literal-list instead of multiset action equality
    bool cer_on_invalid = false;  // run the effectiveness estimate even when the format gate fails

    void validate() const {
        if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must be in (0, 1]");
        if (!(binary_weight >= 0.0)) throw ConfigError("binary_weight must be nonnegative");
        if (!(eta > 0.0)) throw ConfigError("eta must be positive");
        if (!(epsilon_clip > 0.0 && epsilon_clip < 1.0)) throw ConfigError("epsilon_clip must be in (0, 1)");
        if (!(kl_coef >= 0.0)) throw ConfigError("kl_coef must be nonnegative");
        if (cer_samples < 1) throw ConfigError("cer_samples must be >= 1");
        if (!(cer_temperature >= 0.0)) throw ConfigError("cer_temperature must be nonnegative");
        if (!(cer_top_p > 0.0 && cer_top_p <= 1.0)) throw ConfigError("cer_top_p must be in (0, 1]");
    }

    json to_json() const {
        return json{
            {"tau", tau},
            {"binary_weight", binary_weight},
            {"eta", eta},
            {"epsilon_clip", epsilon_clip},
            {"kl_coef", kl_coef},
            {"cer_samples", cer_samples},
            {"cer_temperature", cer_temperature},
            {"cer_top_p", cer_top_p},
            {"smv_renormalize", smv_renormalize},
            {"order_sensitive", order_sensitive},
            {"cer_on_invalid", cer_on_invalid},
        };
    }
};

}  // namespace r2if
