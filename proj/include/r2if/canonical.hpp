#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

#include <json.hpp>

#include "r2if/errors.hpp"

namespace r2if {

using json = nlohmann::json;

/// Normalizes a parsed JSON value so that equality after canonicalization is
/// a usable exact-match predicate:
///   - floats holding an integral value become integers (1.0 -> 1, -0 -> 0)
///   - object keys are sorted (nlohmann::json already stores objects sorted;
///     values are canonicalized recursively)
///   - arrays keep their order, elements are canonicalized
///   - strings are untouched (case- and whitespace-sensitive)
/// Idempotent. Throws InvalidValueError on NaN/Inf.
inline json canonical_value(const json& v) {
    switch (v.type()) {
        case json::value_t::number_float: {
            const double d = v.get<double>();
            if (!std::isfinite(d)) {
                throw InvalidValueError("non-finite number cannot be canonicalized");
            }
            if (d == std::floor(d) &&
                d >= -9007199254740992.0 && d <= 9007199254740992.0) {
                return json(static_cast<std::int64_t>(d));
            }
            return v;
        }
        case json::value_t::number_unsigned: {
            const auto u = v.get<std::uint64_t>();
            if (u <= static_cast<std::uint64_t>(INT64_MAX)) {
                return json(static_cast<std::int64_t>(u));
            }
            return v;
        }
        case json::value_t::object: {
            json out = json::object();
            for (auto it = v.begin(); it != v.end(); ++it) {
                out[it.key()] = canonical_value(it.value());
            }
            return out;
        }
        case json::value_t::array: {
            json out = json::array();
            for (const auto& e : v) {
                out.push_back(canonical_value(e));
            }
            return out;
        }
        default:
            return v;
    }
}

namespace detail {

inline void canonical_dump_to(const json& v, std::string& out) {
    switch (v.type()) {
        case json::value_t::object: {
            out += '{';
            bool first = true;
            for (auto it = v.begin(); it != v.end(); ++it) {
                if (!first) out += ',';
                first = false;
                out += json(it.key()).dump();
                out += ':';
                canonical_dump_to(it.value(), out);
            }
            out += '}';
            break;
        }
        case json::value_t::array: {
            out += '[';
            bool first = true;
            for (const auto& e : v) {
                if (!first) out += ',';
                first = false;
                canonical_dump_to(e, out);
            }
            out += ']';
            break;
        }
        case json::value_t::number_float: {
            const double d = v.get<double>();
            if (d == 0.0) {
                out += "0.000000";  // covers -0 as well
                break;
            }
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.6f", d);
            out += buf;
            break;
        }
        default:
            out += v.dump();
            break;
    }
}

}  // namespace detail

/// Serializes a JSON value with sorted object keys and every float printed in
/// fixed 6-decimal notation. Repeated emission of the same value is
/// byte-identical; reports and HTTP service bodies share this formatting so
/// the two paths can be compared bit-for-bit.
inline std::string canonical_dump(const json& v) {
    std::string out;
    detail::canonical_dump_to(v, out);
    return out;
}

}  // namespace r2if
