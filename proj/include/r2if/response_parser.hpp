#pragma once

#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "r2if/domain.hpp"

namespace r2if {

// Fixed output grammar: one reasoning block, then one tool block, nothing
// else. Tags are case-sensitive and do not nest; a block's interior is opaque
// text that runs to the first matching closing tag.
inline constexpr std::string_view kReasonOpen = "<reason>";
inline constexpr std::string_view kReasonClose = "</reason>";
inline constexpr std::string_view kToolOpen = "<tool>";
inline constexpr std::string_view kToolClose = "</tool>";

/// The predefined rejection string a model must emit, inside the tool block,
/// when none of the offered tools applies.
inline constexpr std::string_view kRejectionString = "None of function can be used";

enum class GrammarViolation {
    MissingReason,    // no complete reasoning block
    DuplicateReason,  // more than one reasoning block
    MissingTool,      // no complete tool block
    DuplicateTool,    // more than one tool block
    BlockOrder,       // a tool block starts before the reasoning block
    ExtraText,        // non-whitespace outside the two blocks
};

inline const char* to_string(GrammarViolation v) {
    switch (v) {
        case GrammarViolation::MissingReason: return "missing-reason";
        case GrammarViolation::DuplicateReason: return "duplicate-reason";
        case GrammarViolation::MissingTool: return "missing-tool";
        case GrammarViolation::DuplicateTool: return "duplicate-tool";
        case GrammarViolation::BlockOrder: return "order";
        case GrammarViolation::ExtraText: return "extra-text";
    }
    return "unknown";
}

struct FormatCheck {
    int verdict = 0;  // 1 iff violations is empty
    std::vector<GrammarViolation> violations;
};

/// The model explicitly declined to call any tool.
struct RejectionMarker {
    std::string raw_text;
};

/// The tool block was missing or its payload was not a valid call list.
struct ParseFailure {
    std::string message;
    std::size_t offset = 0;  // byte offset inside the tool block interior
};

using ToolPayload = std::variant<ActionList, RejectionMarker, ParseFailure>;

struct ParsedResponse {
    bool format_valid = false;
    std::optional<std::string> reason_text;  // interior of the reasoning block, if one exists
    ToolPayload tool_payload = ParseFailure{"no tool block", 0};
    std::vector<GrammarViolation> violations;
};

namespace detail {

struct TagBlock {
    bool is_reason = false;
    std::size_t start = 0;  // offset of the opening tag
    std::size_t end = 0;    // one past the closing tag
    std::string interior;
};

/// Left-to-right block scan. A block opens at the first opening tag outside
/// any block and closes at the first matching closing tag; tags inside a
/// block are literal text. Unterminated opening tags are plain text.
inline std::vector<TagBlock> scan_blocks(std::string_view text) {
    std::vector<TagBlock> blocks;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t r = text.find(kReasonOpen, pos);
        const std::size_t t = text.find(kToolOpen, pos);
        if (r == std::string_view::npos && t == std::string_view::npos) break;
        const bool reason_first = r != std::string_view::npos && (t == std::string_view::npos || r < t);
        const std::size_t open = reason_first ? r : t;
        const std::string_view open_tag = reason_first ? kReasonOpen : kToolOpen;
        const std::string_view close_tag = reason_first ? kReasonClose : kToolClose;
        const std::size_t close = text.find(close_tag, open + open_tag.size());
        if (close == std::string_view::npos) {
            // No closing tag: not a block; skip past the opener and keep scanning.
            pos = open + open_tag.size();
            continue;
        }
        TagBlock b;
        b.is_reason = reason_first;
        b.start = open;
        b.end = close + close_tag.size();
        b.interior = std::string(text.substr(open + open_tag.size(), close - open - open_tag.size()));
        pos = b.end;
        blocks.push_back(std::move(b));
    }
    return blocks;
}

inline bool whitespace_only(std::string_view s) {
    for (const char c : s) {
        if (!std::isspace(static_cast<unsigned char>(c))) return false;
    }
    return true;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

}  // namespace detail

/// Checks the three format rules: exactly one reasoning and one tool block,
/// reasoning first, and only whitespace outside the blocks. Total function;
/// `violations` enumerates every failed rule.
inline FormatCheck validate_format(std::string_view response) {
    const auto blocks = detail::scan_blocks(response);

    std::size_t reason_count = 0;
    std::size_t tool_count = 0;
    std::size_t first_reason = std::string_view::npos;
    std::size_t first_tool = std::string_view::npos;
    for (const auto& b : blocks) {
        if (b.is_reason) {
            if (reason_count == 0) first_reason = b.start;
            ++reason_count;
        } else {
            if (tool_count == 0) first_tool = b.start;
            ++tool_count;
        }
    }

    FormatCheck check;
    if (reason_count == 0) check.violations.push_back(GrammarViolation::MissingReason);
    if (reason_count > 1) check.violations.push_back(GrammarViolation::DuplicateReason);
    if (tool_count == 0) check.violations.push_back(GrammarViolation::MissingTool);
    if (tool_count > 1) check.violations.push_back(GrammarViolation::DuplicateTool);
    if (reason_count > 0 && tool_count > 0 && first_tool < first_reason) {
        check.violations.push_back(GrammarViolation::BlockOrder);
    }

    std::size_t cursor = 0;
    bool extra = false;
    for (const auto& b : blocks) {
        if (!detail::whitespace_only(response.substr(cursor, b.start - cursor))) extra = true;
        cursor = b.end;
    }
    if (!detail::whitespace_only(response.substr(cursor))) extra = true;
    if (extra) check.violations.push_back(GrammarViolation::ExtraText);

    check.verdict = check.violations.empty() ? 1 : 0;
    return check;
}

namespace detail {

inline ToolPayload parse_tool_payload(const std::string& interior) {
    const std::string trimmed = trim(interior);
    if (trimmed == kRejectionString) {
        return RejectionMarker{trimmed};
    }
    json parsed;
    try {
        parsed = json::parse(interior);
    } catch (const json::parse_error& e) {
        return ParseFailure{e.what(), e.byte > 0 ? static_cast<std::size_t>(e.byte - 1) : 0};
    }
    if (!parsed.is_array()) {
        return ParseFailure{"tool payload must be a JSON array of calls", 0};
    }
    ActionList actions;
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        const json& call = parsed[i];
        if (!call.is_object() || !call.contains("name") || !call.contains("arguments")) {
            return ParseFailure{"call " + std::to_string(i) + " must be an object with name and arguments", 0};
        }
        if (!call["name"].is_string() || call["name"].get<std::string>().empty()) {
            return ParseFailure{"call " + std::to_string(i) + " has a non-string or empty name", 0};
        }
        if (!call["arguments"].is_object()) {
            return ParseFailure{"call " + std::to_string(i) + " arguments must be an object", 0};
        }
        try {
            actions.calls.push_back(make_tool_call(call["name"].get<std::string>(), call["arguments"]));
        } catch (const InvalidValueError& e) {
            return ParseFailure{"call " + std::to_string(i) + ": " + e.what(), 0};
        }
    }
    return actions;
}

}  // namespace detail

/// Splits a raw response into reasoning text and tool payload. Never throws:
/// malformed payloads come back as ParseFailure and scoring treats them as
/// incorrect. The format verdict is embedded.
inline ParsedResponse parse_response(std::string_view response) {
    ParsedResponse out;
    const auto check = validate_format(response);
    out.format_valid = check.verdict == 1;
    out.violations = check.violations;

    const auto blocks = detail::scan_blocks(response);
    const detail::TagBlock* reason = nullptr;
    const detail::TagBlock* tool = nullptr;
    for (const auto& b : blocks) {
        if (b.is_reason && reason == nullptr) reason = &b;
        if (!b.is_reason && tool == nullptr) tool = &b;
    }
    if (reason != nullptr) out.reason_text = reason->interior;
    if (tool != nullptr) {
        out.tool_payload = detail::parse_tool_payload(tool->interior);
    } else {
        out.tool_payload = ParseFailure{"no tool block", 0};
    }
    return out;
}

/// Renders (reason, actions) back into the canonical response surface.
inline std::string render_response(const std::string& reason_text, const ActionList& actions) {
    json arr = json::array();
    for (const auto& c : actions.calls) {
        arr.push_back(json{{"name", c.name}, {"arguments", c.arguments}});
    }
    std::string out;
    out += kReasonOpen;
    out += reason_text;
    out += kReasonClose;
    out += kToolOpen;
    out += arr.dump();
    out += kToolClose;
    return out;
}

inline std::string render_rejection(const std::string& reason_text) {
    std::string out;
    out += kReasonOpen;
    out += reason_text;
    out += kReasonClose;
    out += kToolOpen;
    out += kRejectionString;
    out += kToolClose;
    return out;
}

// ---------------------------------------------------------------------------
// Answer reasoning document
// ---------------------------------------------------------------------------

struct AnswerEntry {
    std::string name;
    std::vector<std::pair<std::string, std::string>> arg_snippets;  // ordered, names unique

    const std::string* find_snippet(const std::string& p) const {
        for (const auto& [n, s] : arg_snippets) {
            if (n == p) return &s;
        }
        return nullptr;
    }
};

struct AnswerDoc {
    std::vector<AnswerEntry> entries;     // in reasoning order
    std::string unparsed_remainder;
};

namespace detail {

// `For #name#:` with surrounding whitespace tolerated.
inline std::optional<std::string> match_call_header(std::string_view line) {
    std::size_t b = 0;
    std::size_t e = line.size();
    while (b < e && std::isspace(static_cast<unsigned char>(line[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(line[e - 1]))) --e;
    std::string_view body = line.substr(b, e - b);
    if (body.size() < 8 || body.substr(0, 4) != "For ") return std::nullopt;
    std::size_t p = 4;
    while (p < body.size() && body[p] == ' ') ++p;
    if (p >= body.size() || body[p] != '#') return std::nullopt;
    const std::size_t name_start = p + 1;
    const std::size_t name_end = body.find('#', name_start);
    if (name_end == std::string_view::npos || name_end == name_start) return std::nullopt;
    std::size_t q = name_end + 1;
    while (q < body.size() && std::isspace(static_cast<unsigned char>(body[q]))) ++q;
    if (q >= body.size() || body[q] != ':') return std::nullopt;
    ++q;
    while (q < body.size() && std::isspace(static_cast<unsigned char>(body[q]))) ++q;
    if (q != body.size()) return std::nullopt;
    std::string_view name = body.substr(name_start, name_end - name_start);
    while (!name.empty() && std::isspace(static_cast<unsigned char>(name.front()))) name.remove_prefix(1);
    while (!name.empty() && std::isspace(static_cast<unsigned char>(name.back()))) name.remove_suffix(1);
    if (name.empty()) return std::nullopt;
    return std::string(name);
}

// `- param: analysis`, split on the first colon (analyses often contain colons).
inline std::optional<std::pair<std::string, std::string>> match_param_line(std::string_view line) {
    std::size_t b = 0;
    while (b < line.size() && std::isspace(static_cast<unsigned char>(line[b]))) ++b;
    if (b >= line.size() || line[b] != '-') return std::nullopt;
    ++b;
    const std::size_t colon = line.find(':', b);
    if (colon == std::string_view::npos) return std::nullopt;
    const std::string name = trim(line.substr(b, colon - b));
    if (name.empty()) return std::nullopt;
    const std::string analysis = trim(line.substr(colon + 1));
    return std::make_pair(name, analysis);
}

}  // namespace detail

/// Parses the interior of a reasoning block into per-call, per-parameter
/// snippets. Call headers look like `For #name#:`; parameter lines look like
/// `- name: analysis`. An analysis runs until the next parameter line, header,
/// or end of text. Anything else (the Step1 preamble, stray lines) lands in
/// `unparsed_remainder`. Total on arbitrary text.
inline AnswerDoc parse_answer_doc(std::string_view reason_text) {
    AnswerDoc doc;
    std::vector<std::string> remainder;

    AnswerEntry* entry = nullptr;
    std::string* analysis = nullptr;

    std::size_t pos = 0;
    while (pos <= reason_text.size()) {
        std::size_t nl = reason_text.find('\n', pos);
        if (nl == std::string_view::npos) nl = reason_text.size();
        std::string_view line = reason_text.substr(pos, nl - pos);

        if (auto header = detail::match_call_header(line)) {
            doc.entries.push_back(AnswerEntry{std::move(*header), {}});
            entry = &doc.entries.back();
            analysis = nullptr;
        } else if (auto param = detail::match_param_line(line); param && entry != nullptr) {
            if (entry->find_snippet(param->first) != nullptr) {
                // Duplicate parameter within a call: keep the first snippet.
                remainder.emplace_back(line);
                analysis = nullptr;
            } else {
                entry->arg_snippets.emplace_back(param->first, param->second);
                analysis = &entry->arg_snippets.back().second;
            }
        } else if (analysis != nullptr) {
            *analysis += '\n';
            *analysis += detail::trim(line);
        } else if (!detail::whitespace_only(line)) {
            remainder.emplace_back(line);
        }

        if (nl == reason_text.size()) break;
        pos = nl + 1;
    }

    for (auto& e : doc.entries) {
        for (auto& [name, text] : e.arg_snippets) {
            text = detail::trim(text);
        }
    }
    for (std::size_t i = 0; i < remainder.size(); ++i) {
        if (i > 0) doc.unparsed_remainder += '\n';
        doc.unparsed_remainder += remainder[i];
    }
    return doc;
}

/// Aligns answer-doc entries with the predicted call list: the i-th header
/// matches the i-th call when the names agree, otherwise the first unconsumed
/// header with a matching name. Returns one pointer per call (null when the
/// reasoning never covered that call).
inline std::vector<const AnswerEntry*> align_answer_entries(const AnswerDoc& doc, const ActionList& pred) {
    std::vector<const AnswerEntry*> out(pred.size(), nullptr);
    std::vector<bool> consumed(doc.entries.size(), false);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (i < doc.entries.size() && !consumed[i] && doc.entries[i].name == pred.calls[i].name) {
            out[i] = &doc.entries[i];
            consumed[i] = true;
            continue;
        }
        for (std::size_t j = 0; j < doc.entries.size(); ++j) {
            if (!consumed[j] && doc.entries[j].name == pred.calls[i].name) {
                out[i] = &doc.entries[j];
                consumed[j] = true;
                break;
            }
        }
    }
    return out;
}

}  // namespace r2if
