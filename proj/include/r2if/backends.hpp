#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <httplib.h>

#include "r2if/domain.hpp"
#include "r2if/errors.hpp"
#include "r2if/response_parser.hpp"

namespace r2if {

/// Decoding configuration for student continuation sampling. Defaults are the
/// reference operating point used throughout: temperature 0.4, top-p 1.0.
struct SamplingParams {
    double temperature = 0.4;
    double top_p = 1.0;
    int max_tokens = 512;

    json to_json() const {
        return json{{"temperature", temperature}, {"top_p", top_p}, {"max_tokens", max_tokens}};
    }

    std::string label() const {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "T=%.2f,p=%.2f", temperature, top_p);
        return buf;
    }
};

// ---------------------------------------------------------------------------
// Similarity backends
// ---------------------------------------------------------------------------

/// Scores how close a reasoning snippet is to a reference annotation.
/// Implementations must be symmetric, range into [0,1], score any non-empty
/// text as 1 against itself, and be safe to share across threads.
class SimilarityBackend {
  public:
    virtual ~SimilarityBackend() = default;
    virtual double similarity(const std::string& a, const std::string& b) const = 0;
    virtual std::string name() const = 0;
    virtual bool ready() const { return true; }
};

namespace detail {

inline std::map<std::string, int> term_frequencies(const std::string& text) {
    std::map<std::string, int> tf;
    std::string token;
    for (const char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isalnum(c)) {
            token += static_cast<char>(std::tolower(c));
        } else if (!token.empty()) {
            ++tf[token];
            token.clear();
        }
    }
    if (!token.empty()) ++tf[token];
    return tf;
}

}  // namespace detail

/// Deterministic offline similarity: cosine over lowercase term-frequency
/// vectors (split on non-alphanumerics). Identical token bags score exactly
/// 1.0; texts with no tokens score 0 against everything, themselves included.
class LexicalSimilarity final : public SimilarityBackend {
  public:
    double similarity(const std::string& a, const std::string& b) const override {
        const auto ta = detail::term_frequencies(a);
        const auto tb = detail::term_frequencies(b);
        if (ta.empty() || tb.empty()) return 0.0;
        if (ta == tb) return 1.0;
        double dot = 0.0;
        for (const auto& [term, count] : ta) {
            const auto it = tb.find(term);
            if (it != tb.end()) dot += static_cast<double>(count) * it->second;
        }
        double na = 0.0;
        double nb = 0.0;
        for (const auto& [term, count] : ta) na += static_cast<double>(count) * count;
        for (const auto& [term, count] : tb) nb += static_cast<double>(count) * count;
        const double sim = dot / (std::sqrt(na) * std::sqrt(nb));
        return std::clamp(sim, 0.0, 1.0);
    }

    std::string name() const override { return "lexical"; }
};

/// Test double with a fixed, symmetric answer table. Lookups miss-fault by
/// default so a test can't silently score an unplanned pair; with
/// exact_fallback the backend degrades to string equality instead, which
/// keeps offline CLI runs deterministic without fixtures.
class ScriptedSimilarity final : public SimilarityBackend {
  public:
    explicit ScriptedSimilarity(bool exact_fallback = false) : exact_fallback_(exact_fallback) {}

    void add(const std::string& a, const std::string& b, double sim) {
        table_[key(a, b)] = sim;
    }

    double similarity(const std::string& a, const std::string& b) const override {
        const auto it = table_.find(key(a, b));
        if (it != table_.end()) return it->second;
        if (exact_fallback_) return (!a.empty() && a == b) ? 1.0 : 0.0;
        throw MockMissError("similarity", "no scripted value for pair (\"" + a + "\", \"" + b + "\")");
    }

    std::string name() const override { return "mock"; }

  private:
    static std::string key(const std::string& a, const std::string& b) {
        // Symmetric storage: order the pair lexicographically.
        const std::string& lo = a <= b ? a : b;
        const std::string& hi = a <= b ? b : a;
        return lo + '\x01' + hi;
    }

    std::unordered_map<std::string, double> table_;
    bool exact_fallback_ = false;
};

namespace detail {

inline double clamped_unit_cosine(const std::vector<double>& u, const std::vector<double>& v) {
    double dot = 0.0;
    double nu = 0.0;
    double nv = 0.0;
    const std::size_t n = std::min(u.size(), v.size());
    for (std::size_t i = 0; i < n; ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) return 0.0;
    const double cosine = dot / (std::sqrt(nu) * std::sqrt(nv));
    // Affine map [-1,1] -> [0,1]; clamp guards rounding spill.
    return std::clamp((cosine + 1.0) / 2.0, 0.0, 1.0);
}

/// "http://host:8080/some/path" -> {"http://host:8080", "/some/path"}.
inline std::pair<std::string, std::string> split_url(const std::string& url) {
    const std::size_t scheme = url.find("://");
    const std::size_t host_start = scheme == std::string::npos ? 0 : scheme + 3;
    const std::size_t slash = url.find('/', host_start);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
}

inline std::string env_or_empty(const char* var) {
    const char* value = std::getenv(var);
    return value != nullptr ? std::string(value) : std::string();
}

/// Issues one JSON POST with bounded retries and exponential backoff on
/// transport failures and 5xx answers. Every attempt gets a process-unique
/// request id that survives into the error message.
inline json post_json_with_retry(const std::string& url, const json& body, const std::string& bearer,
                                 const char* component, int max_retries = 3) {
    static std::atomic<std::uint64_t> next_request_id{1};
    const auto [host, path] = split_url(url);
    std::string last_error;
    std::uint64_t last_id = 0;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(100L << (attempt - 1)));
        }
        const std::uint64_t request_id = next_request_id.fetch_add(1);
        last_id = request_id;
        httplib::Client client(host);
        client.set_connection_timeout(10, 0);
        client.set_read_timeout(120, 0);
        httplib::Headers headers;
        if (!bearer.empty()) headers.emplace("Authorization", "Bearer " + bearer);
        auto res = client.Post(path, headers, body.dump(), "application/json");
        if (!res) {
            last_error = "transport failure (" + httplib::to_string(res.error()) + ")";
            continue;
        }
        if (res->status >= 500) {
            last_error = "upstream status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw BackendError(component, "request #" + std::to_string(request_id) + ": status " +
                                              std::to_string(res->status) + ": " + res->body);
        }
        try {
            return json::parse(res->body);
        } catch (const json::parse_error& e) {
            throw BackendError(component,
                               "request #" + std::to_string(request_id) + ": unparseable response body: " + e.what());
        }
    }
    throw BackendError(component, "request #" + std::to_string(last_id) + ": retries exhausted: " + last_error);
}

}  // namespace detail

/// Similarity via a remote embeddings endpoint: both texts are embedded in
/// one request, scored by cosine, mapped from [-1,1] to [0,1], and cached per
/// text pair for the lifetime of the backend. Credentials come from the
/// R2IF_EMBED_API_KEY environment variable.
class EmbeddingHttpSimilarity final : public SimilarityBackend {
  public:
    EmbeddingHttpSimilarity(std::string endpoint, std::string model, int max_in_flight = 8)
        : endpoint_(std::move(endpoint)),
          model_(std::move(model)),
          in_flight_(std::max(1, max_in_flight)) {}

    double similarity(const std::string& a, const std::string& b) const override {
        if (a == b) return a.empty() ? 0.0 : 1.0;
        const std::string& lo = a <= b ? a : b;
        const std::string& hi = a <= b ? b : a;
        const std::string cache_key = lo + '\x01' + hi;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            const auto it = cache_.find(cache_key);
            if (it != cache_.end()) return it->second;
        }

        in_flight_.acquire();
        json reply;
        try {
            reply = detail::post_json_with_retry(
                endpoint_, json{{"model", model_}, {"input", json::array({lo, hi})}},
                detail::env_or_empty("R2IF_EMBED_API_KEY"), "similarity");
        } catch (...) {
            in_flight_.release();
            throw;
        }
        in_flight_.release();

        if (!reply.contains("data") || !reply["data"].is_array() || reply["data"].size() < 2) {
            throw BackendError("similarity", "embedding response lacks two data entries");
        }
        std::vector<double> u;
        std::vector<double> v;
        try {
            u = reply["data"][0].at("embedding").get<std::vector<double>>();
            v = reply["data"][1].at("embedding").get<std::vector<double>>();
        } catch (const json::exception& e) {
            throw BackendError("similarity", std::string("embedding payload malformed: ") + e.what());
        }
        const double sim = detail::clamped_unit_cosine(u, v);
        std::lock_guard<std::mutex> lock(mutex_);
        cache_.emplace(cache_key, sim);
        return sim;
    }

    std::string name() const override { return "embedding"; }

    bool ready() const override {
        const auto [host, path] = detail::split_url(endpoint_);
        httplib::Client client(host);
        client.set_connection_timeout(2, 0);
        auto res = client.Head(path);
        if (res) return true;
        res = client.Get("/");
        return static_cast<bool>(res);
    }

  private:
    std::string endpoint_;
    std::string model_;
    mutable std::counting_semaphore<64> in_flight_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::string, double> cache_;
};

// ---------------------------------------------------------------------------
// Student backends
// ---------------------------------------------------------------------------

/// Samples continuations of a partially written response: the prompt shows
/// the task (query + tool schemas) and the assistant text so far, and the
/// backend returns k completions of the tool block. Implementations must be
/// safe to call concurrently.
class StudentBackend {
  public:
    virtual ~StudentBackend() = default;
    virtual std::vector<std::string> continuations(const Instance& instance, const std::string& prompt_prefix,
                                                   int k, const SamplingParams& sampling) const = 0;
    virtual std::string name() const = 0;
    virtual bool ready() const { return true; }
};

/// Deterministic test double keyed by (instance id, exact prefix). When k
/// exceeds the scripted list the entries repeat cyclically, so any k draws
/// from a fixed script are reproducible. An unscripted key faults.
class ScriptedStudent final : public StudentBackend {
  public:
    void add(const std::string& instance_id, const std::string& prefix, std::vector<std::string> texts) {
        table_[instance_id + '\x01' + prefix] = std::move(texts);
    }

    std::vector<std::string> continuations(const Instance& instance, const std::string& prompt_prefix, int k,
                                           const SamplingParams&) const override {
        const auto it = table_.find(instance.id + '\x01' + prompt_prefix);
        if (it == table_.end() || it->second.empty()) {
            throw MockMissError("student",
                                "no scripted continuations for instance " + instance.id + " with this prefix");
        }
        std::vector<std::string> out;
        out.reserve(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) {
            out.push_back(it->second[static_cast<std::size_t>(i) % it->second.size()]);
        }
        return out;
    }

    std::string name() const override { return "scripted"; }

  private:
    std::unordered_map<std::string, std::vector<std::string>> table_;
};

/// Renders the fixed system instruction that defines the two-step response
/// contract: a reasoning block that walks through every selected tool and
/// parameter, then a tool block holding the call list as a JSON array (or
/// the rejection string when no tool applies).
inline std::string render_system_prompt() {
    std::string p;
    p += "Given a question and a list of callable functions, decide which calls (if any) answer the "
         "question and respond in exactly two steps.\n\n";
    p += "Step 1: wrap your reasoning in <reason></reason>. For every function you decide to call, write a "
         "line `For #fun_name#:` followed by one line per argument of the form `- param_name: "
         "analysis_process`, explaining how the question determines that argument's value.\n\n";
    p += "Step 2: wrap the calls in <tool></tool> as a JSON array of the form "
         "[{\"name\": \"fun_name\", \"arguments\": {\"param_name\": value}}]. ";
    p += "If none of the given functions can answer the question, write exactly `";
    p += kRejectionString;
    p += "` inside the tool block instead.\n\n";
    p += "Output only the two blocks, with nothing before, between, or after them.";
    return p;
}

/// Renders the user message for an instance: the tool schemas as JSON
/// followed by the query.
inline std::string render_user_message(const Instance& instance) {
    json tools = json::array();
    for (const auto& t : instance.tools) {
        json params = json::object();
        for (const auto& [pname, schema] : t.parameters) {
            json p{{"type", schema.type_tag}, {"description", schema.description}};
            if (!schema.enum_values.empty()) p["enum"] = schema.enum_values;
            if (schema.default_value.has_value()) p["default"] = *schema.default_value;
            params[pname] = std::move(p);
        }
        json required = json::array();
        for (const auto& [pname, schema] : t.parameters) {
            if (schema.required) required.push_back(pname);
        }
        tools.push_back(json{{"name", t.name},
                             {"description", t.description},
                             {"parameters", params},
                             {"required", required}});
    }
    std::string msg;
    msg += "Available functions:\n";
    msg += tools.dump(2);
    msg += "\n\nQuestion: ";
    msg += instance.query;
    return msg;
}

/// Student over a chat-completions style HTTP endpoint: system prompt + user
/// task + the assistant message prefilled with the prefix to be continued.
/// Credentials come from the R2IF_STUDENT_API_KEY environment variable. A
/// reply with fewer than k choices is an error, never a short batch.
class HttpStudent final : public StudentBackend {
  public:
    HttpStudent(std::string endpoint, std::string model, int max_in_flight = 8)
        : endpoint_(std::move(endpoint)),
          model_(std::move(model)),
          in_flight_(std::max(1, max_in_flight)) {}

    std::vector<std::string> continuations(const Instance& instance, const std::string& prompt_prefix, int k,
                                           const SamplingParams& sampling) const override {
        json body{
            {"model", model_},
            {"messages",
             json::array({json{{"role", "system"}, {"content", render_system_prompt()}},
                          json{{"role", "user"}, {"content", render_user_message(instance)}},
                          json{{"role", "assistant"}, {"content", prompt_prefix}}})},
            {"temperature", sampling.temperature},
            {"top_p", sampling.top_p},
            {"max_tokens", sampling.max_tokens},
            {"n", k},
        };
        in_flight_.acquire();
        json reply;
        try {
            reply = detail::post_json_with_retry(endpoint_, body,
                                                 detail::env_or_empty("R2IF_STUDENT_API_KEY"), "student");
        } catch (...) {
            in_flight_.release();
            throw;
        }
        in_flight_.release();

        if (!reply.contains("choices") || !reply["choices"].is_array()) {
            throw BackendError("student", "completion response lacks choices");
        }
        std::vector<std::string> out;
        for (const auto& choice : reply["choices"]) {
            if (choice.contains("message") && choice["message"].contains("content") &&
                choice["message"]["content"].is_string()) {
                out.push_back(choice["message"]["content"].get<std::string>());
            } else if (choice.contains("text") && choice["text"].is_string()) {
                out.push_back(choice["text"].get<std::string>());
            }
        }
        if (static_cast<int>(out.size()) < k) {
            throw BackendError("student", "asked for " + std::to_string(k) + " continuations, endpoint returned " +
                                              std::to_string(out.size()));
        }
        out.resize(static_cast<std::size_t>(k));
        return out;
    }

    std::string name() const override { return "http"; }

    bool ready() const override {
        const auto [host, path] = detail::split_url(endpoint_);
        httplib::Client client(host);
        client.set_connection_timeout(2, 0);
        auto res = client.Head(path);
        if (res) return true;
        res = client.Get("/");
        return static_cast<bool>(res);
    }

  private:
    std::string endpoint_;
    std::string model_;
    mutable std::counting_semaphore<64> in_flight_;
};

}  // namespace r2if
