#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "r2if/domain.hpp"
#include "r2if/response_parser.hpp"

namespace r2if {

/// One predicted call paired with the gold call it reproduces exactly.
struct MatchPair {
    std::size_t pred_index = 0;
    std::size_t gold_index = 0;
};

/// One-to-one alignment between predicted and gold calls under exact
/// equality (same name, identical canonical arguments). Greedy first fit:
/// predicted calls are visited in order and each takes the lowest-index
/// unclaimed gold call it equals. Exact equality makes this maximal — any
/// gold call a later prediction could claim is interchangeable with the one
/// actually claimed.
inline std::vector<MatchPair> align_exact(const ActionList& pred, const ActionList& gold) {
    std::vector<MatchPair> pairs;
    std::vector<bool> claimed(gold.size(), false);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        for (std::size_t j = 0; j < gold.size(); ++j) {
            if (!claimed[j] && pred.calls[i] == gold.calls[j]) {
                claimed[j] = true;
                pairs.push_back(MatchPair{i, j});
                break;
            }
        }
    }
    return pairs;
}

/// Whether two call lists contain exactly the same calls. Order-insensitive
/// by default (call lists are treated as multisets); order_sensitive demands
/// positional equality.
inline bool calls_equivalent(const ActionList& pred, const ActionList& gold, bool order_sensitive) {
    if (pred.size() != gold.size()) return false;
    if (order_sensitive) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (!(pred.calls[i] == gold.calls[i])) return false;
        }
        return true;
    }
    return align_exact(pred, gold).size() == pred.size();
}

/// Binary correctness of a parsed response against the gold call list.
/// An empty gold list encodes "no tool applies": only the explicit rejection
/// string earns the point. Otherwise every gold call must be reproduced
/// exactly, with nothing extra. Unparseable payloads score zero.
inline int correctness_reward(const ParsedResponse& parsed, const ActionList& gold, bool order_sensitive = false) {
    if (gold.empty()) {
        return std::holds_alternative<RejectionMarker>(parsed.tool_payload) ? 1 : 0;
    }
    const auto* actions = std::get_if<ActionList>(&parsed.tool_payload);
    if (actions == nullptr) return 0;
    return calls_equivalent(*actions, gold, order_sensitive) ? 1 : 0;
}

/// Format gate times correctness: the pair of binary checks collapses into
/// one 0/1 signal that is only 1 when the response is both well-formed and
/// exactly right.
inline int binary_reward(const ParsedResponse& parsed, const ActionList& gold, bool order_sensitive = false) {
    const int format = parsed.format_valid ? 1 : 0;
    return format * correctness_reward(parsed, gold, order_sensitive);
}

}  // namespace r2if
