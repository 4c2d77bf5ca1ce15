#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "r2if/canonical.hpp"
#include "r2if/domain.hpp"
#include "r2if/errors.hpp"

namespace r2if {

/// One line of a rollout file: every sampled response for one instance.
struct RolloutSet {
    std::string instance_id;
    std::vector<std::string> responses;
};

namespace detail {

inline void reject_unknown_keys(const json& node, const std::set<std::string>& known, std::size_t line,
                                const std::string& context) {
    for (const auto& [key, value] : node.items()) {
        (void)value;
        if (known.find(key) == known.end()) {
            throw DatasetError(line, context.empty() ? key : context + "." + key, "unknown field");
        }
    }
}

inline const json& require_key(const json& node, const char* key, std::size_t line, const std::string& context) {
    const auto it = node.find(key);
    if (it == node.end()) {
        throw DatasetError(line, context.empty() ? key : context + "." + key, "missing required field");
    }
    return *it;
}

inline std::string require_string(const json& node, const char* key, std::size_t line,
                                  const std::string& context, bool allow_empty = true) {
    const json& v = require_key(node, key, line, context);
    const std::string field = context.empty() ? key : context + "." + key;
    if (!v.is_string()) throw DatasetError(line, field, "must be a string");
    auto s = v.get<std::string>();
    if (!allow_empty && s.empty()) throw DatasetError(line, field, "must be non-empty");
    return s;
}

inline ToolSchema parse_tool(const json& node, std::size_t line, const std::string& context) {
    if (!node.is_object()) throw DatasetError(line, context, "tool must be an object");
    reject_unknown_keys(node, {"name", "description", "parameters", "required"}, line, context);
    ToolSchema tool;
    tool.name = require_string(node, "name", line, context, /*allow_empty=*/false);
    tool.description = require_string(node, "description", line, context);

    const json& params = require_key(node, "parameters", line, context);
    if (!params.is_object()) throw DatasetError(line, context + ".parameters", "must be an object");
    for (const auto& [pname, pnode] : params.items()) {
        const std::string pctx = context + ".parameters." + pname;
        if (pname.empty()) throw DatasetError(line, pctx, "parameter name must be non-empty");
        if (!pnode.is_object()) throw DatasetError(line, pctx, "must be an object");
        reject_unknown_keys(pnode, {"type", "description", "enum", "default"}, line, pctx);
        ParamSchema schema;
        schema.type_tag = require_string(pnode, "type", line, pctx, /*allow_empty=*/false);
        if (!is_valid_type_tag(schema.type_tag)) {
            throw DatasetError(line, pctx + ".type", "unknown type tag '" + schema.type_tag + "'");
        }
        schema.description = require_string(pnode, "description", line, pctx);
        if (pnode.contains("enum")) {
            const json& ev = pnode["enum"];
            if (!ev.is_array() || ev.empty()) throw DatasetError(line, pctx + ".enum", "must be a non-empty array");
            for (const auto& option : ev) schema.enum_values.push_back(canonical_value(option));
        }
        if (schema.type_tag == "enum" && schema.enum_values.empty()) {
            throw DatasetError(line, pctx + ".enum", "enum-typed parameter needs enum values");
        }
        if (pnode.contains("default")) {
            try {
                schema.default_value = canonical_value(pnode["default"]);
            } catch (const InvalidValueError& e) {
                throw DatasetError(line, pctx + ".default", e.what());
            }
        }
        tool.parameters.emplace_back(pname, std::move(schema));
    }

    if (node.contains("required")) {
        const json& req = node["required"];
        if (!req.is_array()) throw DatasetError(line, context + ".required", "must be an array");
        std::unordered_set<std::string> seen;
        for (const auto& entry : req) {
            if (!entry.is_string()) throw DatasetError(line, context + ".required", "entries must be strings");
            const auto rname = entry.get<std::string>();
            if (!seen.insert(rname).second) {
                throw DatasetError(line, context + ".required", "duplicate entry '" + rname + "'");
            }
            bool found = false;
            for (auto& [pname, schema] : tool.parameters) {
                if (pname == rname) {
                    schema.required = true;
                    found = true;
                    break;
                }
            }
            if (!found) {
                throw DatasetError(line, context + ".required", "references unknown parameter '" + rname + "'");
            }
        }
    }
    return tool;
}

inline std::size_t word_count(const std::string& text) {
    std::istringstream in(text);
    std::string word;
    std::size_t n = 0;
    while (in >> word) ++n;
    return n;
}

}  // namespace detail

/// Parses and invariant-checks one instance. `line` is attached to every
/// error (0 when the JSON did not come from a file).
inline Instance instance_from_json(const json& node, std::size_t line = 0) {
    if (!node.is_object()) throw DatasetError(line, "", "instance must be a JSON object");
    detail::reject_unknown_keys(node,
                                {"id", "category", "query", "tools", "ground_truth", "gt_document",
                                 "irrelevance_reason", "baseline_success_rate"},
                                line, "");

    Instance inst;
    inst.id = detail::require_string(node, "id", line, "", /*allow_empty=*/false);
    const std::string category = detail::require_string(node, "category", line, "", /*allow_empty=*/false);
    const std::optional<TaskCategory> parsed_category = category_from_string(category);
    if (!parsed_category.has_value()) {
        throw DatasetError(line, "category", "unknown category '" + category + "'");
    }
    inst.category = *parsed_category;
    inst.query = detail::require_string(node, "query", line, "", /*allow_empty=*/false);

    const json& tools = detail::require_key(node, "tools", line, "");
    if (!tools.is_array() || tools.empty()) throw DatasetError(line, "tools", "must be a non-empty array");
    std::unordered_set<std::string> tool_names;
    for (std::size_t t = 0; t < tools.size(); ++t) {
        ToolSchema tool = detail::parse_tool(tools[t], line, "tools[" + std::to_string(t) + "]");
        if (!tool_names.insert(tool.name).second) {
            throw DatasetError(line, "tools", "duplicate tool name '" + tool.name + "'");
        }
        inst.tools.push_back(std::move(tool));
    }

    const json& gt = detail::require_key(node, "ground_truth", line, "");
    if (!gt.is_array()) throw DatasetError(line, "ground_truth", "must be an array");
    for (std::size_t c = 0; c < gt.size(); ++c) {
        const std::string cctx = "ground_truth[" + std::to_string(c) + "]";
        const json& call = gt[c];
        if (!call.is_object()) throw DatasetError(line, cctx, "call must be an object");
        detail::reject_unknown_keys(call, {"name", "arguments"}, line, cctx);
        const std::string name = detail::require_string(call, "name", line, cctx, /*allow_empty=*/false);
        if (tool_names.find(name) == tool_names.end()) {
            throw DatasetError(line, cctx + ".name", "references unknown tool '" + name + "'");
        }
        const json& args = detail::require_key(call, "arguments", line, cctx);
        if (!args.is_object()) throw DatasetError(line, cctx + ".arguments", "must be an object");
        try {
            inst.ground_truth.calls.push_back(make_tool_call(name, args));
        } catch (const InvalidValueError& e) {
            throw DatasetError(line, cctx + ".arguments", e.what());
        }
    }

    // Category structure: the gold call count must fit the declared category.
    const std::size_t n_calls = inst.ground_truth.size();
    switch (inst.category) {
        case TaskCategory::Irrelevance:
            if (n_calls != 0) throw DatasetError(line, "ground_truth", "irrelevance instances take no calls");
            break;
        case TaskCategory::Simple:
        case TaskCategory::Multiple:
            if (n_calls != 1) {
                throw DatasetError(line, "ground_truth",
                                   to_string(inst.category) + std::string(" instances take exactly one call, got ") +
                                       std::to_string(n_calls));
            }
            break;
        case TaskCategory::Parallel:
        case TaskCategory::ParallelMultiple:
            if (n_calls < 2) {
                throw DatasetError(line, "ground_truth",
                                   to_string(inst.category) + std::string(" instances take at least two calls, got ") +
                                       std::to_string(n_calls));
            }
            break;
    }

    if (node.contains("irrelevance_reason")) {
        if (inst.category != TaskCategory::Irrelevance) {
            throw DatasetError(line, "irrelevance_reason", "only irrelevance instances carry a reference reason");
        }
        inst.irrelevance_reason = detail::require_string(node, "irrelevance_reason", line, "", false);
    } else if (inst.category == TaskCategory::Irrelevance) {
        throw DatasetError(line, "irrelevance_reason", "irrelevance instances need a reference reason");
    }

    if (node.contains("gt_document")) {
        if (inst.category == TaskCategory::Irrelevance) {
            throw DatasetError(line, "gt_document", "irrelevance instances take no reasoning document");
        }
        const json& doc = node["gt_document"];
        if (!doc.is_object()) throw DatasetError(line, "gt_document", "must be an object");
        detail::reject_unknown_keys(doc, {"reason", "calls"}, line, "gt_document");
        GtDocument parsed_doc;
        parsed_doc.reason = detail::require_string(doc, "reason", line, "gt_document");
        const json& calls = detail::require_key(doc, "calls", line, "gt_document");
        if (!calls.is_array()) throw DatasetError(line, "gt_document.calls", "must be an array");
        if (calls.size() != inst.ground_truth.size()) {
            throw DatasetError(line, "gt_document.calls",
                               "document has " + std::to_string(calls.size()) + " entries for " +
                                   std::to_string(inst.ground_truth.size()) + " gold calls");
        }
        for (std::size_t c = 0; c < calls.size(); ++c) {
            const std::string cctx = "gt_document.calls[" + std::to_string(c) + "]";
            const json& entry = calls[c];
            if (!entry.is_object()) throw DatasetError(line, cctx, "entry must be an object");
            detail::reject_unknown_keys(entry, {"name", "arguments"}, line, cctx);
            GtDocEntry parsed_entry;
            parsed_entry.name = detail::require_string(entry, "name", line, cctx, false);
            if (parsed_entry.name != inst.ground_truth.calls[c].name) {
                throw DatasetError(line, cctx + ".name",
                                   "entry names '" + parsed_entry.name + "' but gold call " + std::to_string(c) +
                                       " is '" + inst.ground_truth.calls[c].name + "'");
            }
            const json& args = detail::require_key(entry, "arguments", line, cctx);
            if (!args.is_object()) throw DatasetError(line, cctx + ".arguments", "must be an object");
            for (const auto& [pname, annotation] : args.items()) {
                const std::string pctx = cctx + ".arguments." + pname;
                if (!annotation.is_object()) throw DatasetError(line, pctx, "must be an object");
                detail::reject_unknown_keys(annotation, {"specification", "modification"}, line, pctx);
                GtParamAnnotation parsed_ann;
                parsed_ann.specification = detail::require_string(annotation, "specification", line, pctx);
                parsed_ann.modification = detail::require_string(annotation, "modification", line, pctx);
                parsed_entry.params.emplace_back(pname, std::move(parsed_ann));
            }
            parsed_doc.calls.push_back(std::move(parsed_entry));
        }
        inst.gt_document = std::move(parsed_doc);
    }

    if (node.contains("baseline_success_rate")) {
        const json& rate = node["baseline_success_rate"];
        if (!rate.is_number()) throw DatasetError(line, "baseline_success_rate", "must be a number");
        const double v = rate.get<double>();
        if (!(v >= 0.0 && v <= 1.0)) throw DatasetError(line, "baseline_success_rate", "must lie in [0,1]");
        inst.baseline_success_rate = v;
    }

    return inst;
}

/// Serializes an instance back into the file schema. Feeding the result to
/// instance_from_json reconstructs an equal instance.
inline json instance_to_json(const Instance& inst) {
    json tools = json::array();
    for (const auto& tool : inst.tools) {
        json params = json::object();
        json required = json::array();
        for (const auto& [pname, schema] : tool.parameters) {
            json p{{"type", schema.type_tag}, {"description", schema.description}};
            if (!schema.enum_values.empty()) p["enum"] = schema.enum_values;
            if (schema.default_value.has_value()) p["default"] = *schema.default_value;
            params[pname] = std::move(p);
            if (schema.required) required.push_back(pname);
        }
        tools.push_back(json{{"name", tool.name},
                             {"description", tool.description},
                             {"parameters", std::move(params)},
                             {"required", std::move(required)}});
    }

    json gt = json::array();
    for (const auto& call : inst.ground_truth.calls) {
        gt.push_back(json{{"name", call.name}, {"arguments", call.arguments}});
    }

    json node{{"id", inst.id},
              {"category", to_string(inst.category)},
              {"query", inst.query},
              {"tools", std::move(tools)},
              {"ground_truth", std::move(gt)}};

    if (inst.gt_document.has_value()) {
        json calls = json::array();
        for (const auto& entry : inst.gt_document->calls) {
            json args = json::object();
            for (const auto& [pname, ann] : entry.params) {
                args[pname] = json{{"specification", ann.specification}, {"modification", ann.modification}};
            }
            calls.push_back(json{{"name", entry.name}, {"arguments", std::move(args)}});
        }
        node["gt_document"] = json{{"reason", inst.gt_document->reason}, {"calls", std::move(calls)}};
    }
    if (inst.irrelevance_reason.has_value()) node["irrelevance_reason"] = *inst.irrelevance_reason;
    if (inst.baseline_success_rate.has_value()) node["baseline_success_rate"] = *inst.baseline_success_rate;
    return node;
}

/// Loads a JSONL instance file, failing on the first schema violation with
/// its 1-based line number. Blank lines are permitted and skipped.
inline std::vector<Instance> load_instances(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError(0, "", "cannot open " + path);
    std::vector<Instance> out;
    std::unordered_set<std::string> ids;
    std::string text;
    std::size_t line_no = 0;
    while (std::getline(in, text)) {
        ++line_no;
        if (text.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        json node;
        try {
            node = json::parse(text);
        } catch (const json::parse_error& e) {
            throw DatasetError(line_no, "", std::string("invalid JSON: ") + e.what());
        }
        Instance inst = instance_from_json(node, line_no);
        if (!ids.insert(inst.id).second) {
            throw DatasetError(line_no, "id", "duplicate id '" + inst.id + "'");
        }
        out.push_back(std::move(inst));
    }
    return out;
}

inline std::string dump_instances(const std::vector<Instance>& instances) {
    std::string out;
    for (const auto& inst : instances) {
        out += instance_to_json(inst).dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset validation report
// ---------------------------------------------------------------------------

struct ValidationIssue {
    std::size_t line = 0;
    std::string field;
    std::string reason;

    std::string message() const { return DatasetError::format(line, field, reason); }
    json to_json() const { return json{{"line", line}, {"field", field}, {"reason", reason}}; }
};

struct ValidationReport {
    std::size_t lines_total = 0;
    std::size_t instances_ok = 0;
    std::map<std::string, std::size_t> category_counts;
    std::vector<ValidationIssue> issues;

    bool ok() const { return issues.empty(); }

    json to_json() const {
        json issue_list = json::array();
        for (const auto& i : issues) issue_list.push_back(i.to_json());
        return json{{"lines_total", lines_total},
                    {"instances_ok", instances_ok},
                    {"category_counts", category_counts},
                    {"issues", issue_list},
                    {"ok", ok()}};
    }
};

/// Annotation-content rules, checked on structurally valid instances: the
/// reasoning document needs a non-empty reason; annotation fields stay
/// within 15 words; a real modification requires a real specification; and
/// every annotated parameter must exist in its gold call.
inline void check_annotation_content(const Instance& inst, std::size_t line, std::vector<ValidationIssue>& issues) {
    if (!inst.gt_document.has_value()) return;
    if (detail::word_count(inst.gt_document->reason) == 0) {
        issues.push_back({line, "gt_document.reason", "must not be empty"});
    }
    for (std::size_t c = 0; c < inst.gt_document->calls.size(); ++c) {
        const auto& entry = inst.gt_document->calls[c];
        const std::string cctx = "gt_document.calls[" + std::to_string(c) + "]";
        for (const auto& [pname, ann] : entry.params) {
            const std::string pctx = cctx + ".arguments." + pname;
            if (!is_no_spec(ann.specification) && detail::word_count(ann.specification) > 15) {
                issues.push_back({line, pctx + ".specification", "exceeds 15 words"});
            }
            if (!is_no_modify(ann.modification) && detail::word_count(ann.modification) > 15) {
                issues.push_back({line, pctx + ".modification", "exceeds 15 words"});
            }
            if (!is_no_modify(ann.modification) && is_no_spec(ann.specification)) {
                issues.push_back({line, pctx, "modification present but specification missing"});
            }
            if (c < inst.ground_truth.size() && !inst.ground_truth.calls[c].has_argument(pname)) {
                issues.push_back({line, pctx, "annotated parameter absent from the gold call"});
            }
        }
    }
}

/// Full-file validation: scans every line, collecting structural and
/// content issues with their line numbers instead of stopping at the first.
inline ValidationReport validate_dataset(const std::string& path) {
    ValidationReport report;
    std::ifstream in(path);
    if (!in) {
        report.issues.push_back({0, "", "cannot open " + path});
        return report;
    }
    std::unordered_set<std::string> ids;
    std::string text;
    std::size_t line_no = 0;
    while (std::getline(in, text)) {
        ++line_no;
        if (text.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        ++report.lines_total;
        json node;
        try {
            node = json::parse(text);
        } catch (const json::parse_error& e) {
            report.issues.push_back({line_no, "", std::string("invalid JSON: ") + e.what()});
            continue;
        }
        Instance inst;
        try {
            inst = instance_from_json(node, line_no);
        } catch (const DatasetError& e) {
            report.issues.push_back({e.line(), e.field(), e.reason()});
            continue;
        }
        if (!ids.insert(inst.id).second) {
            report.issues.push_back({line_no, "id", "duplicate id '" + inst.id + "'"});
            continue;
        }
        const std::size_t before = report.issues.size();
        check_annotation_content(inst, line_no, report.issues);
        if (report.issues.size() == before) {
            ++report.instances_ok;
            ++report.category_counts[to_string(inst.category)];
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Rollout files
// ---------------------------------------------------------------------------

inline RolloutSet rollouts_from_json(const json& node, std::size_t line = 0) {
    if (!node.is_object()) throw DatasetError(line, "", "rollout line must be a JSON object");
    detail::reject_unknown_keys(node, {"instance_id", "responses"}, line, "");
    RolloutSet set;
    set.instance_id = detail::require_string(node, "instance_id", line, "", /*allow_empty=*/false);
    const json& responses = detail::require_key(node, "responses", line, "");
    if (!responses.is_array() || responses.empty()) {
        throw DatasetError(line, "responses", "must be a non-empty array");
    }
    for (const auto& r : responses) {
        if (!r.is_string()) throw DatasetError(line, "responses", "entries must be strings");
        set.responses.push_back(r.get<std::string>());
    }
    return set;
}

inline std::vector<RolloutSet> load_rollouts(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError(0, "", "cannot open " + path);
    std::vector<RolloutSet> out;
    std::unordered_set<std::string> ids;
    std::string text;
    std::size_t line_no = 0;
    while (std::getline(in, text)) {
        ++line_no;
        if (text.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        json node;
        try {
            node = json::parse(text);
        } catch (const json::parse_error& e) {
            throw DatasetError(line_no, "", std::string("invalid JSON: ") + e.what());
        }
        RolloutSet set = rollouts_from_json(node, line_no);
        if (!ids.insert(set.instance_id).second) {
            throw DatasetError(line_no, "instance_id", "duplicate instance_id '" + set.instance_id + "'");
        }
        out.push_back(std::move(set));
    }
    return out;
}

inline std::unordered_map<std::string, std::vector<std::string>> rollouts_by_id(
    const std::vector<RolloutSet>& sets) {
    std::unordered_map<std::string, std::vector<std::string>> out;
    for (const auto& set : sets) out.emplace(set.instance_id, set.responses);
    return out;
}

}  // namespace r2if
