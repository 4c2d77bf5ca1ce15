#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "r2if/backends.hpp"
#include "r2if/domain.hpp"
#include "r2if/errors.hpp"
#include "r2if/grpo.hpp"
#include "r2if/reward.hpp"

namespace r2if {

// ---------------------------------------------------------------------------
// Environment: fixed instances with fixed candidate pools
// ---------------------------------------------------------------------------

enum class CandidateKind {
    CorrectGrounded,    // right calls, reasoning grounded in the reference annotations
    CorrectUngrounded,  // right calls, reasoning vague or generic
    WrongCall,          // well-formed but wrong calls
    Malformed,          // format-invalid response
};

inline const char* to_string(CandidateKind k) {
    switch (k) {
        case CandidateKind::CorrectGrounded: return "correct-grounded";
        case CandidateKind::CorrectUngrounded: return "correct-ungrounded";
        case CandidateKind::WrongCall: return "wrong-call";
        case CandidateKind::Malformed: return "malformed";
    }
    return "unknown";
}

/// One pre-authored response with its reward components, scored once at
/// environment construction so training itself issues no backend calls.
struct ToyCandidate {
    std::string text;
    CandidateKind kind = CandidateKind::Malformed;
    int r_binary = 0;
    double r_cer = 0.0;  // 0 when CER was skipped
    double r_smv = 0.0;
};

enum class RewardMode { Full, BinaryOnly };

inline const char* to_string(RewardMode m) {
    return m == RewardMode::Full ? "full" : "binary-only";
}

inline double candidate_reward(const ToyCandidate& c, RewardMode mode, const RewardConfig& cfg) {
    const double binary_part = cfg.binary_weight * c.r_binary;
    return mode == RewardMode::BinaryOnly ? binary_part : binary_part + c.r_cer + c.r_smv;
}

/// Desk-scale training surrogate: a handful of instances, each with a fixed
/// candidate pool standing in for the policy's sample space.
struct ToyEnvironment {
    std::vector<Instance> instances;
    std::vector<std::vector<ToyCandidate>> candidates;  // parallel to instances
    std::uint64_t seed = 7;
    Backends backends;

    void validate() const {
        if (instances.empty()) throw ConfigError("toy environment has no instances");
        if (candidates.size() != instances.size()) {
            throw ConfigError("candidate pools do not align with instances");
        }
        for (std::size_t i = 0; i < instances.size(); ++i) {
            if (candidates[i].empty()) {
                throw ConfigError("instance " + instances[i].id + " has an empty candidate pool");
            }
            bool has_grounded = false;
            for (const auto& c : candidates[i]) {
                if (c.kind == CandidateKind::CorrectGrounded) has_grounded = true;
            }
            if (!has_grounded) {
                throw ConfigError("instance " + instances[i].id + " has no correct-grounded candidate");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Categorical softmax policy
// ---------------------------------------------------------------------------

inline std::vector<double> softmax_probs(const std::vector<double>& logits, double temperature) {
    double zmax = logits.empty() ? 0.0 : logits[0];
    for (const double z : logits) zmax = std::max(zmax, z);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        p[k] = std::exp((logits[k] - zmax) / temperature);
        sum += p[k];
    }
    for (double& v : p) v /= sum;
    return p;
}

inline std::vector<double> log_softmax(const std::vector<double>& logits, double temperature) {
    double zmax = logits.empty() ? 0.0 : logits[0];
    for (const double z : logits) zmax = std::max(zmax, z);
    double sum = 0.0;
    for (const double z : logits) sum += std::exp((z - zmax) / temperature);
    const double lse = std::log(sum);
    std::vector<double> lp(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        lp[k] = (logits[k] - zmax) / temperature - lse;
    }
    return lp;
}

/// One independent logit vector per instance; candidate probabilities are
/// softmax(logits / temperature).
struct SoftmaxPolicy {
    std::vector<std::vector<double>> logits;
    double temperature = 1.0;

    static SoftmaxPolicy uniform(const ToyEnvironment& env, double temperature = 1.0) {
        SoftmaxPolicy p;
        p.temperature = temperature;
        p.logits.reserve(env.candidates.size());
        for (const auto& pool : env.candidates) p.logits.emplace_back(pool.size(), 0.0);
        return p;
    }

    std::vector<double> probabilities(std::size_t instance_index) const {
        return softmax_probs(logits[instance_index], temperature);
    }
};

/// Top 53 bits of the engine output, mapped to [0,1): stable across
/// platforms, unlike std::uniform_real_distribution.
inline double uniform_unit(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t sample_index(const std::vector<double>& probs, std::mt19937_64& rng) {
    const double u = uniform_unit(rng);
    double cdf = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        cdf += probs[k];
        if (u < cdf) return k;
    }
    return probs.size() - 1;
}

// ---------------------------------------------------------------------------
// Group objective and its exact gradient for the categorical policy
// ---------------------------------------------------------------------------

/// Snapshot of one instance's group with the policy logits as the free
/// variable; everything else (samples, rewards, old log-probabilities) is
/// held fixed. Used both by the trainer and by gradient checks.
struct ToyGroupPoint {
    std::vector<double> logits;
    double temperature = 1.0;
    std::vector<std::size_t> sampled;    // candidate index per rollout
    std::vector<double> rewards;         // reward per rollout
    std::vector<double> old_logprobs;    // log π_old(candidate) per rollout
    std::vector<double> ref_logprobs;    // empty unless a KL penalty is in use
};

inline RolloutGroup toy_rollout_group(const ToyGroupPoint& point) {
    const std::vector<double> lp = log_softmax(point.logits, point.temperature);
    RolloutGroup group;
    group.instance_id = "toy";
    for (std::size_t j = 0; j < point.sampled.size(); ++j) {
        Rollout roll;
        roll.reward = point.rewards[j];
        roll.logprob_new = lp[point.sampled[j]];
        roll.logprob_old = point.old_logprobs[j];
        if (!point.ref_logprobs.empty()) roll.logprob_ref = point.ref_logprobs[j];
        group.rollouts.push_back(roll);
    }
    return group;
}

inline double toy_group_objective(const ToyGroupPoint& point, const RewardConfig& cfg) {
    return grpo_objective(toy_rollout_group(point), cfg);
}

/// Exact gradient of toy_group_objective with respect to each logit.
/// For rollout j with ratio ρ_j = π_θ(c_j)/π_old(c_j):
///   dρ_j/dz_k = ρ_j (δ[c_j=k] − π_k) / T,
/// and the clipped surrogate passes this through only where the unclipped
/// branch is the active minimum: A_j ≥ 0 with ρ_j ≤ 1+ε, or A_j < 0 with
/// ρ_j ≥ 1−ε. The KL penalty contributes −kl_coef·(δ[c_j=k] − π_k)/T per
/// rollout. Not differentiable exactly at the clip boundary.
inline std::vector<double> toy_group_gradient(const ToyGroupPoint& point, const RewardConfig& cfg) {
    cfg.validate();
    const std::size_t n = point.sampled.size();
    const std::vector<double> probs = softmax_probs(point.logits, point.temperature);
    const std::vector<double> lp = log_softmax(point.logits, point.temperature);
    const std::vector<double> adv = group_normalize(point.rewards, cfg.eta);

    std::vector<double> grad(point.logits.size(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t c = point.sampled[j];
        const double ratio = std::exp(lp[c] - point.old_logprobs[j]);
        const bool active = adv[j] >= 0.0 ? ratio <= 1.0 + cfg.epsilon_clip : ratio >= 1.0 - cfg.epsilon_clip;
        const double kl_weight = (cfg.kl_coef > 0.0 && !point.ref_logprobs.empty()) ? cfg.kl_coef : 0.0;
        for (std::size_t k = 0; k < grad.size(); ++k) {
            const double indicator = (k == c ? 1.0 : 0.0) - probs[k];
            if (active) {
                grad[k] += adv[j] * ratio * indicator / point.temperature;
            }
            grad[k] -= kl_weight * indicator / point.temperature;
        }
    }
    for (double& g : grad) g /= static_cast<double>(n);
    return grad;
}

// ---------------------------------------------------------------------------
// Default environment
// ---------------------------------------------------------------------------

namespace detail {

inline ParamSchema make_param(std::string type_tag, std::string description, bool required) {
    ParamSchema p;
    p.type_tag = std::move(type_tag);
    p.description = std::move(description);
    p.required = required;
    return p;
}

struct ToyCandidateSpec {
    std::string grounded_reason;
    std::string ungrounded_reason;
    std::string wrong_reason;
    std::string correct_payload;
    std::vector<std::string> wrong_payloads;  // 7 entries
};

inline std::vector<ToyCandidate> author_candidates(const ToyCandidateSpec& s) {
    std::vector<ToyCandidate> out;
    const auto add = [&out](CandidateKind kind, std::string text) {
        ToyCandidate c;
        c.kind = kind;
        c.text = std::move(text);
        out.push_back(std::move(c));
    };
    const auto wrap = [](const std::string& reason, const std::string& payload) {
        return "<reason>" + reason + "</reason><tool>" + payload + "</tool>";
    };

    // 2 correct-grounded (distinct surface, same parse).
    add(CandidateKind::CorrectGrounded, wrap(s.grounded_reason, s.correct_payload));
    add(CandidateKind::CorrectGrounded, wrap(s.grounded_reason, " " + s.correct_payload + " "));
    // 3 correct-ungrounded.
    add(CandidateKind::CorrectUngrounded, wrap(s.ungrounded_reason, s.correct_payload));
    add(CandidateKind::CorrectUngrounded, wrap(s.ungrounded_reason, " " + s.correct_payload));
    add(CandidateKind::CorrectUngrounded, wrap(s.ungrounded_reason, s.correct_payload + " "));
    // 7 wrong calls.
    for (const auto& payload : s.wrong_payloads) {
        add(CandidateKind::WrongCall, wrap(s.wrong_reason, payload));
    }
    // 8 malformed shapes, all using the wrong payload so reasoning scoring
    // has nothing to match.
    const std::string& w = s.wrong_payloads.front();
    add(CandidateKind::Malformed, "<reason>" + s.ungrounded_reason + "</reason>");
    add(CandidateKind::Malformed, w);
    add(CandidateKind::Malformed, "<tool>" + w + "</tool><reason>" + s.wrong_reason + "</reason>");
    add(CandidateKind::Malformed,
        "<reason>a</reason><reason>" + s.wrong_reason + "</reason><tool>" + w + "</tool>");
    add(CandidateKind::Malformed, "<reason>" + s.wrong_reason + "</reason><tool>" + w + "</tool><tool>" + w + "</tool>");
    add(CandidateKind::Malformed, "<reason>" + s.wrong_reason + "</reason> stray text <tool>" + w + "</tool>");
    add(CandidateKind::Malformed, wrap(s.wrong_reason, w) + " done");
    add(CandidateKind::Malformed, "<reason>" + s.wrong_reason + "</reason><tool>" + w);
    return out;
}

}  // namespace detail

/// Builds the default five-instance environment (one per task category,
/// twenty candidates each: 2 correct-grounded, 3 correct-ungrounded, 7
/// wrong-call, 8 malformed) with scripted backends, and scores every
/// candidate once. A uniform starting policy has expected correctness 0.25.
inline ToyEnvironment make_default_toy_environment(std::uint64_t seed = 7,
                                                   const RewardConfig& cfg = RewardConfig{}) {
    cfg.validate();
    ToyEnvironment env;
    env.seed = seed;

    auto student = std::make_shared<ScriptedStudent>();
    env.backends.similarity = std::make_shared<LexicalSimilarity>();
    env.backends.baseline_cache = std::make_shared<BaselineCache>();

    std::vector<detail::ToyCandidateSpec> specs;

    // --- simple: one weather lookup -------------------------------------
    {
        Instance inst;
        inst.id = "toy-simple";
        inst.category = TaskCategory::Simple;
        inst.query = "What is the temperature in Paris in celsius?";
        ToolSchema weather;
        weather.name = "get_weather";
        weather.description = "Current weather for a city.";
        weather.parameters.emplace_back("city", detail::make_param("string", "City to look up.", true));
        weather.parameters.emplace_back("unit", detail::make_param("string", "Temperature unit.", false));
        inst.tools.push_back(weather);
        inst.ground_truth.calls.push_back(
            make_tool_call("get_weather", json{{"city", "Paris"}, {"unit", "celsius"}}));
        GtDocument doc;
        doc.reason = "The question asks for current weather in one city, so a single lookup suffices.";
        GtDocEntry entry;
        entry.name = "get_weather";
        entry.params.emplace_back("city", GtParamAnnotation{"the city named in the question", "no modify"});
        entry.params.emplace_back("unit", GtParamAnnotation{"the temperature unit the user requests", "no modify"});
        doc.calls.push_back(entry);
        inst.gt_document = doc;
        inst.baseline_success_rate = 0.6;
        env.instances.push_back(inst);

        detail::ToyCandidateSpec s;
        s.grounded_reason =
            "For #get_weather#:\n"
            "- city: the city named in the question\n"
            "- unit: the temperature unit the user requests";
        s.ungrounded_reason = "This looks easy, I will just fill in the obvious weather arguments.";
        s.wrong_reason = "Maybe the question wants some other place, I will guess one.";
        s.correct_payload = R"([{"name": "get_weather", "arguments": {"city": "Paris", "unit": "celsius"}}])";
        for (const char* city : {"London", "Berlin", "Rome", "Madrid", "Oslo", "Cairo", "Lima"}) {
            s.wrong_payloads.push_back(std::string(R"([{"name": "get_weather", "arguments": {"city": ")") + city +
                                       R"(", "unit": "celsius"}}])");
        }
        specs.push_back(s);
    }

    // --- multiple: pick the right tool out of two ------------------------
    {
        Instance inst;
        inst.id = "toy-multiple";
        inst.category = TaskCategory::Multiple;
        inst.query = "What time is it right now in Tokyo?";
        ToolSchema clock;
        clock.name = "get_time";
        clock.description = "Current local time for a city.";
        clock.parameters.emplace_back("city", detail::make_param("string", "City to query.", true));
        ToolSchema weather;
        weather.name = "get_weather";
        weather.description = "Current weather for a city.";
        weather.parameters.emplace_back("city", detail::make_param("string", "City to look up.", true));
        inst.tools.push_back(clock);
        inst.tools.push_back(weather);
        inst.ground_truth.calls.push_back(make_tool_call("get_time", json{{"city", "Tokyo"}}));
        GtDocument doc;
        doc.reason = "Only the clock tool answers a time question; weather is a distractor.";
        GtDocEntry entry;
        entry.name = "get_time";
        entry.params.emplace_back("city", GtParamAnnotation{"the city whose local time is wanted", "no modify"});
        doc.calls.push_back(entry);
        inst.gt_document = doc;
        inst.baseline_success_rate = 0.6;
        env.instances.push_back(inst);

        detail::ToyCandidateSpec s;
        s.grounded_reason =
            "For #get_time#:\n"
            "- city: the city whose local time is wanted";
        s.ungrounded_reason = "One of these tools should do, picking the first sensible one.";
        s.wrong_reason = "Weather sounds related to time of day, let me try that.";
        s.correct_payload = R"([{"name": "get_time", "arguments": {"city": "Tokyo"}}])";
        s.wrong_payloads = {
            R"([{"name": "get_weather", "arguments": {"city": "Tokyo"}}])",
            R"([{"name": "get_time", "arguments": {"city": "Kyoto"}}])",
            R"([{"name": "get_time", "arguments": {"city": "Osaka"}}])",
            R"([{"name": "get_weather", "arguments": {"city": "Nara"}}])",
            R"([{"name": "get_time", "arguments": {"city": "Sendai"}}])",
            R"([{"name": "get_time", "arguments": {"city": "Kobe"}}])",
            R"([{"name": "get_weather", "arguments": {"city": "Kyoto"}}])",
        };
        specs.push_back(s);
    }

    // --- parallel: same tool twice ---------------------------------------
    {
        Instance inst;
        inst.id = "toy-parallel";
        inst.category = TaskCategory::Parallel;
        inst.query = "Translate 'good morning' into French and into German.";
        ToolSchema tr;
        tr.name = "translate";
        tr.description = "Translate text into a target language.";
        tr.parameters.emplace_back("text", detail::make_param("string", "Text to translate.", true));
        tr.parameters.emplace_back("target", detail::make_param("string", "Target language code.", true));
        inst.tools.push_back(tr);
        inst.ground_truth.calls.push_back(
            make_tool_call("translate", json{{"text", "good morning"}, {"target", "fr"}}));
        inst.ground_truth.calls.push_back(
            make_tool_call("translate", json{{"text", "good morning"}, {"target", "de"}}));
        GtDocument doc;
        doc.reason = "Two target languages means two independent translation calls.";
        GtDocEntry fr;
        fr.name = "translate";
        fr.params.emplace_back("text", GtParamAnnotation{"the phrase quoted in the question", "no modify"});
        fr.params.emplace_back("target", GtParamAnnotation{"the French language code", "no modify"});
        GtDocEntry de;
        de.name = "translate";
        de.params.emplace_back("text", GtParamAnnotation{"the phrase quoted in the question", "no modify"});
        de.params.emplace_back("target", GtParamAnnotation{"the German language code", "no modify"});
        doc.calls.push_back(fr);
        doc.calls.push_back(de);
        inst.gt_document = doc;
        inst.baseline_success_rate = 0.6;
        env.instances.push_back(inst);

        detail::ToyCandidateSpec s;
        s.grounded_reason =
            "For #translate#:\n"
            "- text: the phrase quoted in the question\n"
            "- target: the French language code\n"
            "For #translate#:\n"
            "- text: the phrase quoted in the question\n"
            "- target: the German language code";
        s.ungrounded_reason = "Translation twice, nothing subtle here.";
        s.wrong_reason = "One translation call probably covers both languages.";
        s.correct_payload =
            R"([{"name": "translate", "arguments": {"text": "good morning", "target": "fr"}}, )"
            R"({"name": "translate", "arguments": {"text": "good morning", "target": "de"}}])";
        s.wrong_payloads = {
            R"([{"name": "translate", "arguments": {"text": "good morning", "target": "es"}}])",
            R"([{"name": "translate", "arguments": {"text": "good evening", "target": "de"}}])",
            R"([{"name": "translate", "arguments": {"text": "good morning", "target": "es"}}, )"
            R"({"name": "translate", "arguments": {"text": "good morning", "target": "it"}}])",
            R"([{"name": "translate", "arguments": {"text": "good evening", "target": "fr"}}, )"
            R"({"name": "translate", "arguments": {"text": "good evening", "target": "de"}}])",
            R"([{"name": "translate", "arguments": {"text": "morning", "target": "fr"}}, )"
            R"({"name": "translate", "arguments": {"text": "good morning", "target": "nl"}}])",
            R"([{"name": "translate", "arguments": {"text": "good night", "target": "fr"}}])",
            R"([{"name": "translate", "arguments": {"text": "good morning", "target": "pt"}}])",
        };
        specs.push_back(s);
    }

    // --- parallel_multiple: two different tools --------------------------
    {
        Instance inst;
        inst.id = "toy-parallel-multiple";
        inst.category = TaskCategory::ParallelMultiple;
        inst.query = "Find flights to Rome for Friday and book a hotel there for two nights.";
        ToolSchema flights;
        flights.name = "search_flights";
        flights.description = "Search flights to a destination on a date.";
        flights.parameters.emplace_back("destination", detail::make_param("string", "Destination city.", true));
        flights.parameters.emplace_back("date", detail::make_param("string", "Departure date.", true));
        ToolSchema hotel;
        hotel.name = "book_hotel";
        hotel.description = "Book a hotel in a city for a number of nights.";
        hotel.parameters.emplace_back("city", detail::make_param("string", "City to stay in.", true));
        hotel.parameters.emplace_back("nights", detail::make_param("integer", "Number of nights.", true));
        inst.tools.push_back(flights);
        inst.tools.push_back(hotel);
        inst.ground_truth.calls.push_back(
            make_tool_call("search_flights", json{{"destination", "Rome"}, {"date", "Friday"}}));
        inst.ground_truth.calls.push_back(make_tool_call("book_hotel", json{{"city", "Rome"}, {"nights", 2}}));
        GtDocument doc;
        doc.reason = "The request has two independent halves: a flight search and a hotel booking.";
        GtDocEntry f;
        f.name = "search_flights";
        f.params.emplace_back("destination", GtParamAnnotation{"the city the user wants to fly to", "no modify"});
        f.params.emplace_back("date", GtParamAnnotation{"the day named for departure", "no modify"});
        GtDocEntry h;
        h.name = "book_hotel";
        h.params.emplace_back("city", GtParamAnnotation{"the same destination city", "no modify"});
        h.params.emplace_back("nights", GtParamAnnotation{"the stay length in nights", "no modify"});
        doc.calls.push_back(f);
        doc.calls.push_back(h);
        inst.gt_document = doc;
        inst.baseline_success_rate = 0.6;
        env.instances.push_back(inst);

        detail::ToyCandidateSpec s;
        s.grounded_reason =
            "For #search_flights#:\n"
            "- destination: the city the user wants to fly to\n"
            "- date: the day named for departure\n"
            "For #book_hotel#:\n"
            "- city: the same destination city\n"
            "- nights: the stay length in nights";
        s.ungrounded_reason = "Flights plus hotel, standard travel combo, filling both in.";
        s.wrong_reason = "Probably only the flight part matters for now.";
        s.correct_payload =
            R"([{"name": "search_flights", "arguments": {"destination": "Rome", "date": "Friday"}}, )"
            R"({"name": "book_hotel", "arguments": {"city": "Rome", "nights": 2}}])";
        s.wrong_payloads = {
            R"([{"name": "search_flights", "arguments": {"destination": "Milan", "date": "Friday"}}])",
            R"([{"name": "book_hotel", "arguments": {"city": "Rome", "nights": 1}}])",
            R"([{"name": "search_flights", "arguments": {"destination": "Milan", "date": "Friday"}}, )"
            R"({"name": "book_hotel", "arguments": {"city": "Rome", "nights": 3}}])",
            R"([{"name": "search_flights", "arguments": {"destination": "Rome", "date": "Monday"}}, )"
            R"({"name": "book_hotel", "arguments": {"city": "Milan", "nights": 2}}])",
            R"([{"name": "search_flights", "arguments": {"destination": "Paris", "date": "Friday"}}, )"
            R"({"name": "book_hotel", "arguments": {"city": "Paris", "nights": 2}}])",
            R"([{"name": "search_flights", "arguments": {"destination": "Rome", "date": "Sunday"}}])",
            R"([{"name": "book_hotel", "arguments": {"city": "Venice", "nights": 2}}])",
        };
        specs.push_back(s);
    }

    // --- irrelevance: no tool applies ------------------------------------
    {
        Instance inst;
        inst.id = "toy-irrelevance";
        inst.category = TaskCategory::Irrelevance;
        inst.query = "Write me a short poem about the sea.";
        ToolSchema stock;
        stock.name = "get_stock_price";
        stock.description = "Latest trading price for a ticker symbol.";
        stock.parameters.emplace_back("symbol", detail::make_param("string", "Ticker symbol.", true));
        inst.tools.push_back(stock);
        inst.irrelevance_reason = "The only available tool reports stock prices and cannot write poetry.";
        inst.baseline_success_rate = 0.6;
        env.instances.push_back(inst);

        detail::ToyCandidateSpec s;
        s.grounded_reason = "The only available tool reports stock prices and cannot write poetry.";
        s.ungrounded_reason = "Nothing here fits, so declining.";
        s.wrong_reason = "A stock quote might inspire a poem, trying the ticker tool.";
        s.correct_payload = std::string(kRejectionString);
        s.wrong_payloads = {
            R"([{"name": "get_stock_price", "arguments": {"symbol": "SEA"}}])",
            R"([{"name": "get_stock_price", "arguments": {"symbol": "POEM"}}])",
            R"([{"name": "get_stock_price", "arguments": {"symbol": "AAPL"}}])",
            R"([{"name": "get_stock_price", "arguments": {"symbol": "MSFT"}}])",
            R"([{"name": "get_stock_price", "arguments": {"symbol": "GOOG"}}])",
            R"([{"name": "get_stock_price", "arguments": {"symbol": "AMZN"}}])",
            R"([{"name": "get_stock_price", "arguments": {"symbol": "NVDA"}}])",
        };
        specs.push_back(s);
    }

    // Script the student: grounded reasoning lifts the continuation success
    // rate above baseline (0.8 vs 0.6), vague reasoning drops it (0.4), and
    // misleading reasoning drops it further (0.2).
    for (std::size_t i = 0; i < env.instances.size(); ++i) {
        const auto& inst = env.instances[i];
        const auto& s = specs[i];
        const std::string correct_end = s.correct_payload + "</tool>";
        const std::string wrong_end = s.wrong_payloads.front() + "</tool>";
        student->add(inst.id, cer_prefix(s.grounded_reason),
                     {correct_end, correct_end, correct_end, correct_end, wrong_end});
        student->add(inst.id, cer_prefix(s.ungrounded_reason),
                     {correct_end, wrong_end, correct_end, wrong_end, wrong_end});
        student->add(inst.id, cer_prefix(s.wrong_reason),
                     {correct_end, wrong_end, wrong_end, wrong_end, wrong_end});
    }
    env.backends.student = student;

    // Score every candidate once; training reuses these components.
    for (std::size_t i = 0; i < env.instances.size(); ++i) {
        std::vector<ToyCandidate> pool = detail::author_candidates(specs[i]);
        for (auto& c : pool) {
            const RewardBreakdown b = composite_reward(c.text, env.instances[i], env.backends, cfg, true);
            c.r_binary = b.r_binary;
            c.r_cer = b.r_cer_or_zero();
            c.r_smv = b.r_smv;
        }
        env.candidates.push_back(std::move(pool));
    }

    env.validate();
    return env;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct ToyTrainOptions {
    int iterations = 200;
    int rollouts = 5;  // group size per instance per iteration
    double learning_rate = 1.0;
    double temperature = 1.0;
};

struct TrainRow {
    int iteration = 0;
    double expected_correctness = 0.0;
    double expected_smv = 0.0;
    double p_grounded = 0.0;
    double p_ungrounded = 0.0;
    double objective = 0.0;
};

struct TrainReport {
    std::string mode;
    std::uint64_t seed = 0;
    int iterations = 0;
    int rollouts = 0;
    double learning_rate = 0.0;
    double temperature = 0.0;
    std::vector<TrainRow> rows;  // rows[0] is the untrained policy
    double final_expected_correctness = 0.0;
    double final_p_grounded = 0.0;
    double final_p_ungrounded = 0.0;
    int converged_at = -1;  // first iteration with expected correctness > 0.9

    json to_json() const {
        json rows_json = json::array();
        for (const auto& r : rows) {
            rows_json.push_back(json{{"iteration", r.iteration},
                                     {"expected_correctness", r.expected_correctness},
                                     {"expected_smv", r.expected_smv},
                                     {"p_grounded", r.p_grounded},
                                     {"p_ungrounded", r.p_ungrounded},
                                     {"objective", r.objective}});
        }
        return json{{"mode", mode},
                    {"seed", seed},
                    {"iterations", iterations},
                    {"rollouts", rollouts},
                    {"learning_rate", learning_rate},
                    {"temperature", temperature},
                    {"final_expected_correctness", final_expected_correctness},
                    {"final_p_grounded", final_p_grounded},
                    {"final_p_ungrounded", final_p_ungrounded},
                    {"converged_at", converged_at},
                    {"rows", rows_json}};
    }

    std::string to_csv() const {
        std::string out = "iteration,expected_correctness,expected_smv,p_grounded,p_ungrounded,objective\n";
        char buf[192];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.iteration,
                          r.expected_correctness, r.expected_smv, r.p_grounded, r.p_ungrounded, r.objective);
            out += buf;
        }
        return out;
    }
};

namespace detail {

inline TrainRow policy_metrics(const ToyEnvironment& env, const SoftmaxPolicy& policy, int iteration,
                               double objective) {
    TrainRow row;
    row.iteration = iteration;
    row.objective = objective;
    const auto n = static_cast<double>(env.instances.size());
    for (std::size_t i = 0; i < env.instances.size(); ++i) {
        const std::vector<double> probs = policy.probabilities(i);
        for (std::size_t k = 0; k < probs.size(); ++k) {
            const ToyCandidate& c = env.candidates[i][k];
            row.expected_correctness += probs[k] * c.r_binary / n;
            row.expected_smv += probs[k] * c.r_smv / n;
            if (c.kind == CandidateKind::CorrectGrounded) row.p_grounded += probs[k] / n;
            if (c.kind == CandidateKind::CorrectUngrounded) row.p_ungrounded += probs[k] / n;
        }
    }
    return row;
}

}  // namespace detail

/// Runs the desk-scale loop: each iteration samples a group of candidates
/// per instance from the policy, normalizes the group's rewards into
/// advantages, and ascends the exact clipped-objective gradient on the
/// instance's logits. Single-threaded and bit-reproducible for a fixed seed.
/// The reported objective is each group's surrogate re-evaluated after the
/// update (sampling-time policy as the old policy), averaged over instances.
inline TrainReport toy_train(const ToyEnvironment& env, const RewardConfig& cfg, RewardMode mode,
                             const ToyTrainOptions& options = ToyTrainOptions{}) {
    cfg.validate();
    env.validate();
    if (options.iterations < 0 || options.rollouts < 2) {
        throw ConfigError("toy training needs iterations >= 0 and rollouts >= 2");
    }
    if (options.learning_rate < 0.0 || options.temperature <= 0.0) {
        throw ConfigError("toy training needs learning_rate >= 0 and temperature > 0");
    }

    SoftmaxPolicy policy = SoftmaxPolicy::uniform(env, options.temperature);
    std::mt19937_64 rng(env.seed);

    TrainReport report;
    report.mode = to_string(mode);
    report.seed = env.seed;
    report.iterations = options.iterations;
    report.rollouts = options.rollouts;
    report.learning_rate = options.learning_rate;
    report.temperature = options.temperature;
    report.rows.push_back(detail::policy_metrics(env, policy, 0, 0.0));

    const auto n_rollouts = static_cast<std::size_t>(options.rollouts);
    for (int iter = 1; iter <= options.iterations; ++iter) {
        double objective_sum = 0.0;
        for (std::size_t i = 0; i < env.instances.size(); ++i) {
            const std::vector<double> old_probs = policy.probabilities(i);
            const std::vector<double> old_lp = log_softmax(policy.logits[i], policy.temperature);

            ToyGroupPoint point;
            point.logits = policy.logits[i];
            point.temperature = policy.temperature;
            // Under a KL penalty the reference policy is the uniform start.
            const double ref_lp = -std::log(static_cast<double>(env.candidates[i].size()));
            for (std::size_t j = 0; j < n_rollouts; ++j) {
                const std::size_t c = sample_index(old_probs, rng);
                point.sampled.push_back(c);
                point.rewards.push_back(candidate_reward(env.candidates[i][c], mode, cfg));
                point.old_logprobs.push_back(old_lp[c]);
                if (cfg.kl_coef > 0.0) point.ref_logprobs.push_back(ref_lp);
            }

            const std::vector<double> grad = toy_group_gradient(point, cfg);
            for (std::size_t k = 0; k < grad.size(); ++k) {
                policy.logits[i][k] += options.learning_rate * grad[k];
            }

            point.logits = policy.logits[i];  // objective at the post-update policy
            objective_sum += toy_group_objective(point, cfg);
        }
        const double objective = objective_sum / static_cast<double>(env.instances.size());
        report.rows.push_back(detail::policy_metrics(env, policy, iter, objective));
        if (report.converged_at < 0 && report.rows.back().expected_correctness > 0.9) {
            report.converged_at = iter;
        }
    }

    const TrainRow& last = report.rows.back();
    report.final_expected_correctness = last.expected_correctness;
    report.final_p_grounded = last.p_grounded;
    report.final_p_ungrounded = last.p_ungrounded;
    return report;
}

}  // namespace r2if
