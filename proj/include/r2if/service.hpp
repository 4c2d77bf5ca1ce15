#pragma once

#include <fstream>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>

#include "r2if/backends.hpp"
#include "r2if/canonical.hpp"
#include "r2if/dataset.hpp"
#include "r2if/errors.hpp"
#include "r2if/grpo.hpp"
#include "r2if/response_parser.hpp"
#include "r2if/reward.hpp"
#include "r2if/version.hpp"

namespace r2if {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 binds an ephemeral port
    RewardConfig reward;
    std::string similarity_kind = "lexical";  // lexical | embedding | mock
    std::string embedding_endpoint;
    std::string embedding_model = "text-embedding";
    std::string student_endpoint;
    std::string student_model = "student";
    std::size_t max_body_bytes = 1 << 20;
    int threads = 8;
    int max_responses = 64;  // per /v1/score request

    void validate() const {
        reward.validate();
        if (max_body_bytes == 0) throw ConfigError("max_body_bytes must be positive");
        if (threads < 1) throw ConfigError("threads must be positive");
        if (max_responses < 1) throw ConfigError("max_responses must be positive");
        if (port < 0 || port > 65535) throw ConfigError("port must lie in [0, 65535]");
        if (similarity_kind != "lexical" && similarity_kind != "embedding" && similarity_kind != "mock") {
            throw ConfigError("similarity must be lexical, embedding, or mock");
        }
        if (similarity_kind == "embedding" && embedding_endpoint.empty()) {
            throw ConfigError("embedding similarity needs embedding_endpoint");
        }
    }
};

/// Builds the backend set a config describes. The mock similarity falls
/// back to exact string equality, keeping offline runs deterministic.
inline Backends make_backends(const ServiceConfig& cfg) {
    cfg.validate();
    Backends b;
    if (cfg.similarity_kind == "lexical") {
        b.similarity = std::make_shared<LexicalSimilarity>();
    } else if (cfg.similarity_kind == "mock") {
        b.similarity = std::make_shared<ScriptedSimilarity>(/*exact_fallback=*/true);
    } else {
        b.similarity = std::make_shared<EmbeddingHttpSimilarity>(cfg.embedding_endpoint, cfg.embedding_model);
    }
    if (!cfg.student_endpoint.empty()) {
        b.student = std::make_shared<HttpStudent>(cfg.student_endpoint, cfg.student_model);
    }
    b.baseline_cache = std::make_shared<BaselineCache>();
    return b;
}

/// Parses the `key = value` service config format (# starts a comment).
inline ServiceConfig service_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    ServiceConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        const std::size_t eq = trimmed.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = detail::trim(trimmed.substr(0, eq));
        const std::string value = detail::trim(trimmed.substr(eq + 1));
        try {
            if (key == "host") cfg.host = value;
            else if (key == "port") cfg.port = std::stoi(value);
            else if (key == "tau") cfg.reward.tau = std::stod(value);
            else if (key == "binary_weight") cfg.reward.binary_weight = std::stod(value);
            else if (key == "eta") cfg.reward.eta = std::stod(value);
            else if (key == "epsilon") cfg.reward.epsilon_clip = std::stod(value);
            else if (key == "kl_coef") cfg.reward.kl_coef = std::stod(value);
            else if (key == "cer_samples") cfg.reward.cer_samples = std::stoi(value);
            else if (key == "cer_temperature") cfg.reward.cer_temperature = std::stod(value);
            else if (key == "cer_top_p") cfg.reward.cer_top_p = std::stod(value);
            else if (key == "smv_renormalize") cfg.reward.smv_renormalize = (value == "true" || value == "1");
            else if (key == "order_sensitive") cfg.reward.order_sensitive = (value == "true" || value == "1");
            else if (key == "cer_on_invalid") cfg.reward.cer_on_invalid = (value == "true" || value == "1");
            else if (key == "similarity") cfg.similarity_kind = value;
            else if (key == "embedding_endpoint") cfg.embedding_endpoint = value;
            else if (key == "embedding_model") cfg.embedding_model = value;
            else if (key == "student_endpoint") cfg.student_endpoint = value;
            else if (key == "student_model") cfg.student_model = value;
            else if (key == "max_body_bytes") cfg.max_body_bytes = static_cast<std::size_t>(std::stoull(value));
            else if (key == "threads") cfg.threads = std::stoi(value);
            else if (key == "max_responses") cfg.max_responses = std::stoi(value);
            else throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ConfigError("config line " + std::to_string(line_no) + ": bad value for '" + key + "'");
        } catch (const std::out_of_range&) {
            throw ConfigError("config line " + std::to_string(line_no) + ": value out of range for '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Request handlers (shared by the HTTP server and in-process callers)
// ---------------------------------------------------------------------------

namespace detail {

inline json parsed_response_to_json(const ParsedResponse& parsed) {
    json violations = json::array();
    for (const auto v : parsed.violations) violations.push_back(to_string(v));
    json payload;
    if (const auto* actions = std::get_if<ActionList>(&parsed.tool_payload)) {
        json calls = json::array();
        for (const auto& c : actions->calls) {
            calls.push_back(json{{"name", c.name}, {"arguments", c.arguments}});
        }
        payload = json{{"kind", "calls"}, {"calls", std::move(calls)}};
    } else if (const auto* rejection = std::get_if<RejectionMarker>(&parsed.tool_payload)) {
        payload = json{{"kind", "rejection"}, {"raw_text", rejection->raw_text}};
    } else {
        const auto& failure = std::get<ParseFailure>(parsed.tool_payload);
        payload = json{{"kind", "failure"}, {"message", failure.message}, {"offset", failure.offset}};
    }
    return json{{"format_valid", parsed.format_valid},
                {"violations", std::move(violations)},
                {"reason_text", parsed.reason_text.has_value() ? json(*parsed.reason_text) : json(nullptr)},
                {"payload", std::move(payload)}};
}

inline json answer_doc_to_json(const AnswerDoc& doc) {
    json entries = json::array();
    for (const auto& e : doc.entries) {
        json args = json::object();
        for (const auto& [pname, snippet] : e.arg_snippets) args[pname] = snippet;
        entries.push_back(json{{"name", e.name}, {"args", std::move(args)}});
    }
    return json{{"entries", std::move(entries)}, {"unparsed_remainder", doc.unparsed_remainder}};
}

}  // namespace detail

/// Applies a request's `options` object over the base config. Only reward
/// knobs and the two enable switches are recognized; anything else is an
/// input error.
inline RewardConfig apply_options(RewardConfig cfg, const json& options, bool* enable_cer, bool* enable_smv) {
    if (options.is_null()) return cfg;
    if (!options.is_object()) throw InputError("options must be a JSON object");
    for (const auto& [key, value] : options.items()) {
        try {
            if (key == "tau") cfg.tau = value.get<double>();
            else if (key == "binary_weight") cfg.binary_weight = value.get<double>();
            else if (key == "eta") cfg.eta = value.get<double>();
            else if (key == "epsilon") cfg.epsilon_clip = value.get<double>();
            else if (key == "kl_coef") cfg.kl_coef = value.get<double>();
            else if (key == "cer_samples") cfg.cer_samples = value.get<int>();
            else if (key == "cer_temperature") cfg.cer_temperature = value.get<double>();
            else if (key == "cer_top_p") cfg.cer_top_p = value.get<double>();
            else if (key == "smv_renormalize") cfg.smv_renormalize = value.get<bool>();
            else if (key == "order_sensitive") cfg.order_sensitive = value.get<bool>();
            else if (key == "cer_on_invalid") cfg.cer_on_invalid = value.get<bool>();
            else if (key == "enable_cer") *enable_cer = value.get<bool>();
            else if (key == "enable_smv") *enable_smv = value.get<bool>();
            else throw InputError("unknown option '" + key + "'");
        } catch (const json::exception&) {
            throw InputError("option '" + key + "' has the wrong type");
        }
    }
    cfg.validate();
    return cfg;
}

/// /v1/parse body -> response body. Parse results are data, never errors:
/// invalid formats still return 200 payloads.
inline json handle_parse_payload(const json& body) {
    if (!body.is_object() || !body.contains("response") || !body["response"].is_string()) {
        throw InputError("body must be an object with a string 'response'");
    }
    const ParsedResponse parsed = parse_response(body["response"].get<std::string>());
    const AnswerDoc doc =
        parse_answer_doc(parsed.reason_text.has_value() ? *parsed.reason_text : std::string());
    return json{{"parsed", detail::parsed_response_to_json(parsed)},
                {"answer_doc", detail::answer_doc_to_json(doc)}};
}

/// /v1/score body -> response body: per-response breakdowns plus group
/// advantages when two or more responses arrive together.
inline json handle_score_payload(const json& body, const Backends& backends, const RewardConfig& base_cfg,
                                 int max_responses = 64) {
    if (!body.is_object()) throw InputError("body must be a JSON object");
    if (!body.contains("instance")) throw InputError("missing 'instance'");
    if (!body.contains("responses") || !body["responses"].is_array() || body["responses"].empty()) {
        throw InputError("missing or empty 'responses' array");
    }
    if (static_cast<int>(body["responses"].size()) > max_responses) {
        throw InputError("too many responses: limit is " + std::to_string(max_responses));
    }
    for (const auto& r : body["responses"]) {
        if (!r.is_string()) throw InputError("responses must be strings");
    }

    const Instance inst = instance_from_json(body["instance"]);

    bool enable_cer = true;
    bool enable_smv = true;
    const RewardConfig cfg =
        apply_options(base_cfg, body.contains("options") ? body["options"] : json(nullptr), &enable_cer,
                      &enable_smv);

    json breakdowns = json::array();
    std::vector<double> totals;
    for (const auto& r : body["responses"]) {
        const RewardBreakdown b =
            composite_reward(r.get<std::string>(), inst, backends, cfg, enable_cer, enable_smv);
        totals.push_back(b.total);
        breakdowns.push_back(b.to_json());
    }

    json out{{"breakdowns", std::move(breakdowns)}};
    if (totals.size() >= 2) {
        out["advantages"] = group_normalize(totals, cfg.eta);
    }
    return out;
}

/// /v1/ace body -> response body: per-pair effectiveness estimates and
/// their mean.
inline json handle_ace_payload(const json& body, const Backends& backends, const RewardConfig& base_cfg) {
    if (!body.is_object()) throw InputError("body must be a JSON object");
    if (!body.contains("pairs") || !body["pairs"].is_array() || body["pairs"].empty()) {
        throw InputError("missing or empty 'pairs' array");
    }
    if (backends.student == nullptr) {
        throw BackendError("student", "no student backend configured");
    }
    bool enable_cer = true;
    bool enable_smv = true;
    const RewardConfig cfg =
        apply_options(base_cfg, body.contains("options") ? body["options"] : json(nullptr), &enable_cer,
                      &enable_smv);

    json per_instance = json::array();
    double sum = 0.0;
    for (const auto& pair : body["pairs"]) {
        if (!pair.is_object() || !pair.contains("instance") || !pair.contains("reason_text") ||
            !pair["reason_text"].is_string()) {
            throw InputError("each pair needs an 'instance' and a string 'reason_text'");
        }
        const Instance inst = instance_from_json(pair["instance"]);
        const CerEstimate est = cer(pair["reason_text"].get<std::string>(), inst, *backends.student, cfg,
                                    backends.baseline_cache.get());
        sum += est.r_cer;
        per_instance.push_back(est.to_json());
    }
    return json{{"ace", sum / static_cast<double>(body["pairs"].size())},
                {"per_instance", std::move(per_instance)}};
}

// ---------------------------------------------------------------------------
// HTTP server
// ---------------------------------------------------------------------------

/// The scoring service: stateless JSON-over-HTTP wrapper around the
/// handlers above. The only cross-request state is the baseline cache,
/// which only ever memoizes deterministic recomputations, so restarting
/// the process never changes a score.
class ScoringService {
  public:
    explicit ScoringService(ServiceConfig config) : config_(std::move(config)), backends_(make_backends(config_)) {}

    ScoringService(ServiceConfig config, Backends backends)
        : config_(std::move(config)), backends_(std::move(backends)) {
        config_.validate();
    }

    ~ScoringService() { stop(); }

    /// Binds and serves on a background thread; returns once the listener
    /// is accepting connections. Returns false when the bind fails.
    bool start() {
        install_routes();
        if (config_.port == 0) {
            bound_port_ = server_.bind_to_any_port(config_.host);
            if (bound_port_ <= 0) return false;
        } else {
            if (!server_.bind_to_port(config_.host, config_.port)) return false;
            bound_port_ = config_.port;
        }
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return true;
    }

    void stop() {
        if (server_.is_running()) server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    /// Blocks until the server shuts down (for foreground serving).
    void wait() {
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return bound_port_; }
    const ServiceConfig& config() const { return config_; }
    const Backends& backends() const { return backends_; }

  private:
    static void reply_json(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(canonical_dump(body), "application/json");
    }

    template <typename Handler>
    static void guarded(httplib::Response& res, Handler&& handler) {
        try {
            reply_json(res, 200, handler());
        } catch (const DatasetError& e) {
            reply_json(res, 422, json{{"error", json{{"type", "dataset"},
                                                     {"line", e.line()},
                                                     {"field", e.field()},
                                                     {"message", e.what()}}}});
        } catch (const BackendError& e) {
            reply_json(res, 502, json{{"error", json{{"type", "backend"},
                                                     {"component", e.component()},
                                                     {"message", e.what()}}}});
        } catch (const InputError& e) {
            reply_json(res, 400, json{{"error", json{{"type", "input"}, {"message", e.what()}}}});
        } catch (const ConfigError& e) {
            reply_json(res, 400, json{{"error", json{{"type", "config"}, {"message", e.what()}}}});
        } catch (const std::exception& e) {
            reply_json(res, 500, json{{"error", json{{"type", "internal"}, {"message", e.what()}}}});
        }
    }

    static json parse_body(const httplib::Request& req) {
        try {
            return json::parse(req.body);
        } catch (const json::parse_error& e) {
            throw InputError(std::string("malformed JSON body: ") + e.what());
        }
    }

    void install_routes() {
        server_.set_payload_max_length(config_.max_body_bytes);
        const int threads = config_.threads;
        server_.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
        server_.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
            res.set_header("X-R2IF-Version", version());
        });

        server_.Post("/v1/parse", [](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { return handle_parse_payload(parse_body(req)); });
        });
        server_.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&, this] {
                return handle_score_payload(parse_body(req), backends_, config_.reward, config_.max_responses);
            });
        });
        server_.Post("/v1/ace", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&, this] { return handle_ace_payload(parse_body(req), backends_, config_.reward); });
        });
        server_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
            const bool similarity_ok = backends_.similarity != nullptr && backends_.similarity->ready();
            const bool student_ok = backends_.student == nullptr || backends_.student->ready();
            const bool ok = similarity_ok && student_ok;
            reply_json(res, ok ? 200 : 503,
                       json{{"status", ok ? "ok" : "degraded"},
                            {"version", version()},
                            {"similarity", backends_.similarity ? backends_.similarity->name() : "none"},
                            {"student", backends_.student ? backends_.student->name() : "none"}});
        });
    }

    ServiceConfig config_;
    Backends backends_;
    httplib::Server server_;
    std::thread thread_;
    int bound_port_ = 0;
};

}  // namespace r2if
