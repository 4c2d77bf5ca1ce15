#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "r2if/r2if.hpp"

using namespace r2if;
using Catch::Approx;

namespace {

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

json svc_instance_json(const std::string& id = "svc-wx") {
    return json{
        {"id", id},
        {"category", "simple"},
        {"query", "What is the temperature in Paris in celsius?"},
        {"tools",
         json::array({json{{"name", "get_weather"},
                           {"description", "Weather lookup."},
                           {"parameters",
                            json{{"city", json{{"type", "string"}, {"description", "City."}}},
                                 {"unit", json{{"type", "string"}, {"description", "Unit."}}}}},
                           {"required", json::array({"city"})}}})},
        {"ground_truth", json::array({json{{"name", "get_weather"},
                                           {"arguments", json{{"city", "Paris"}, {"unit", "celsius"}}}}})},
        {"gt_document",
         json{{"reason", "One lookup answers the question directly."},
              {"calls", json::array({json{
                            {"name", "get_weather"},
                            {"arguments",
                             json{{"city", json{{"specification", "the city named in the question"},
                                                {"modification", "no modify"}}},
                                  {"unit", json{{"specification", "the temperature unit the user requests"},
                                                {"modification", "no modify"}}}}}}})}}},
        {"baseline_success_rate", 0.6},
    };
}

const std::string kGroundedReason =
    "For #get_weather#:\n"
    "- city: the city named in the question\n"
    "- unit: the temperature unit the user requests";
const std::string kCorrectPayload =
    R"([{"name": "get_weather", "arguments": {"city": "Paris", "unit": "celsius"}}])";

std::string grounded_response() {
    return "<reason>" + kGroundedReason + "</reason><tool>" + kCorrectPayload + "</tool>";
}

Backends scripted_backends() {
    Backends b;
    b.similarity = std::make_shared<LexicalSimilarity>();
    auto student = std::make_shared<ScriptedStudent>();
    const std::string correct_end = kCorrectPayload + "</tool>";
    const std::string wrong_end =
        R"([{"name": "get_weather", "arguments": {"city": "Oslo", "unit": "celsius"}}])"
        "</tool>";
    student->add("svc-wx", cer_prefix(kGroundedReason),
                 {correct_end, correct_end, correct_end, correct_end, wrong_end});
    b.student = student;
    b.baseline_cache = std::make_shared<BaselineCache>();
    return b;
}

struct UnreadyStudent final : StudentBackend {
    std::vector<std::string> continuations(const Instance&, const std::string&, int,
                                           const SamplingParams&) const override {
        throw BackendError("student", "backend is offline");
    }
    std::string name() const override { return "unready"; }
    bool ready() const override { return false; }
};

}  // namespace

// ---------------------------------------------------------------------------
// Request options
// ---------------------------------------------------------------------------

TEST_CASE("request options overlay the base reward configuration") {
    const RewardConfig base;
    bool enable_cer = true;
    bool enable_smv = true;

    const RewardConfig same = apply_options(base, json(nullptr), &enable_cer, &enable_smv);
    CHECK(same.tau == base.tau);
    CHECK(enable_cer);
    CHECK(enable_smv);

    const json options{{"tau", 0.9},         {"cer_samples", 3},     {"enable_cer", false},
                       {"order_sensitive", true}, {"smv_renormalize", false}};
    const RewardConfig tweaked = apply_options(base, options, &enable_cer, &enable_smv);
    CHECK(tweaked.tau == Approx(0.9));
    CHECK(tweaked.cer_samples == 3);
    CHECK(tweaked.order_sensitive);
    CHECK_FALSE(tweaked.smv_renormalize);
    CHECK_FALSE(enable_cer);
    CHECK(enable_smv);

    bool unused_a = true;
    bool unused_b = true;
    CHECK_THROWS_WITH(apply_options(base, json{{"frobnicate", 1}}, &unused_a, &unused_b),
                      Catch::Matchers::ContainsSubstring("unknown option 'frobnicate'"));
    CHECK_THROWS_WITH(apply_options(base, json{{"tau", "high"}}, &unused_a, &unused_b),
                      Catch::Matchers::ContainsSubstring("wrong type"));
    CHECK_THROWS_AS(apply_options(base, json::array({1}), &unused_a, &unused_b), InputError);
}

// ---------------------------------------------------------------------------
// Handlers called in process
// ---------------------------------------------------------------------------

TEST_CASE("the parse handler returns structure for any input") {
    const json good = handle_parse_payload(json{{"response", grounded_response()}});
    CHECK(good["parsed"]["format_valid"] == true);
    CHECK(good["parsed"]["payload"]["kind"] == "calls");
    CHECK(good["parsed"]["payload"]["calls"].size() == 1);
    CHECK(good["answer_doc"]["entries"].size() == 1);
    CHECK(good["answer_doc"]["entries"][0]["args"].size() == 2);

    const json rejection =
        handle_parse_payload(json{{"response", "<reason>r</reason><tool>None of function can be used</tool>"}});
    CHECK(rejection["parsed"]["payload"]["kind"] == "rejection");

    const json invalid = handle_parse_payload(json{{"response", "plain text"}});
    CHECK(invalid["parsed"]["format_valid"] == false);
    CHECK(invalid["parsed"]["reason_text"].is_null());

    CHECK_THROWS_AS(handle_parse_payload(json{{"response", 5}}), InputError);
    CHECK_THROWS_AS(handle_parse_payload(json::object()), InputError);
    CHECK_THROWS_AS(handle_parse_payload(json(nullptr)), InputError);
}

TEST_CASE("the score handler mirrors in-process composite scoring") {
    const Backends backends = scripted_backends();
    const RewardConfig cfg;

    const json body{{"instance", svc_instance_json()},
                    {"responses", json::array({grounded_response(), "no tags"})}};
    const json out = handle_score_payload(body, backends, cfg);
    REQUIRE(out["breakdowns"].size() == 2);
    CHECK(out["breakdowns"][0]["r_binary"] == 1);
    CHECK(out["breakdowns"][0]["total"].get<double>() == Approx(4.2).margin(1e-12));
    CHECK(out["breakdowns"][0].contains("cer"));
    CHECK(out["breakdowns"][1]["r_binary"] == 0);
    CHECK(out["breakdowns"][1]["r_cer"].is_null());
    REQUIRE(out["advantages"].size() == 2);
    CHECK(out["advantages"][0].get<double>() > 0.0);
    CHECK(out["advantages"][0].get<double>() ==
          Approx(-out["advantages"][1].get<double>()).margin(1e-12));

    // A single response gets no group advantages.
    const json solo = handle_score_payload(
        json{{"instance", svc_instance_json()}, {"responses", json::array({grounded_response()})}}, backends,
        cfg);
    CHECK_FALSE(solo.contains("advantages"));

    // Options can disable the student pass entirely.
    const json quiet = handle_score_payload(json{{"instance", svc_instance_json()},
                                                 {"responses", json::array({grounded_response()})},
                                                 {"options", json{{"enable_cer", false}}}},
                                            backends, cfg);
    CHECK_FALSE(quiet["breakdowns"][0].contains("cer"));
    CHECK(quiet["breakdowns"][0]["total"].get<double>() == Approx(4.0).margin(1e-12));

    CHECK_THROWS_AS(handle_score_payload(json{{"instance", svc_instance_json()}}, backends, cfg), InputError);
    CHECK_THROWS_AS(handle_score_payload(
                        json{{"instance", svc_instance_json()}, {"responses", json::array()}}, backends, cfg),
                    InputError);
    CHECK_THROWS_AS(handle_score_payload(json{{"instance", svc_instance_json()},
                                              {"responses", json::array({grounded_response(), "x", "y"})}},
                                         backends, cfg, /*max_responses=*/2),
                    InputError);
    CHECK_THROWS_AS(handle_score_payload(
                        json{{"instance", svc_instance_json()}, {"responses", json::array({1})}}, backends, cfg),
                    InputError);
    CHECK_THROWS_AS(handle_score_payload(json{{"instance", json{{"id", "broken"}}},
                                              {"responses", json::array({"x"})}},
                                         backends, cfg),
                    DatasetError);
}

TEST_CASE("the effectiveness handler needs a student backend") {
    const RewardConfig cfg;
    Backends no_student;
    no_student.similarity = std::make_shared<LexicalSimilarity>();
    no_student.baseline_cache = std::make_shared<BaselineCache>();

    const json body{{"pairs", json::array({json{{"instance", svc_instance_json()},
                                                {"reason_text", kGroundedReason}}})}};
    CHECK_THROWS_AS(handle_ace_payload(body, no_student, cfg), BackendError);

    const Backends backends = scripted_backends();
    const json out = handle_ace_payload(body, backends, cfg);
    CHECK(out["ace"].get<double>() == Approx(0.2).margin(1e-12));
    REQUIRE(out["per_instance"].size() == 1);
    CHECK(out["per_instance"][0]["v"].get<double>() == Approx(0.8).margin(1e-12));
    CHECK(out["per_instance"][0]["v_base"].get<double>() == Approx(0.6).margin(1e-12));

    CHECK_THROWS_AS(handle_ace_payload(json{{"pairs", json::array()}}, backends, cfg), InputError);
    CHECK_THROWS_AS(handle_ace_payload(json{{"pairs", json::array({json{{"instance", svc_instance_json()}}})}},
                                       backends, cfg),
                    InputError);
}

// ---------------------------------------------------------------------------
// Service configuration files
// ---------------------------------------------------------------------------

TEST_CASE("service config files parse key = value lines with comments") {
    const std::string path = "tmp_service.conf";
    write_file(path,
               "# scoring service\n"
               "host = 0.0.0.0\n"
               "port = 9090   # overridden in tests\n"
               "tau = 0.8\n"
               "binary_weight = 2.5\n"
               "cer_samples = 7\n"
               "smv_renormalize = false\n"
               "similarity = mock\n"
               "threads = 3\n"
               "max_responses = 16\n"
               "\n");
    const ServiceConfig cfg = service_config_from_file(path);
    CHECK(cfg.host == "0.0.0.0");
    CHECK(cfg.port == 9090);
    CHECK(cfg.reward.tau == Approx(0.8));
    CHECK(cfg.reward.binary_weight == Approx(2.5));
    CHECK(cfg.reward.cer_samples == 7);
    CHECK_FALSE(cfg.reward.smv_renormalize);
    CHECK(cfg.similarity_kind == "mock");
    CHECK(cfg.threads == 3);
    CHECK(cfg.max_responses == 16);

    write_file("tmp_service_bad_key.conf", "host = x\nwheels = 4\n");
    CHECK_THROWS_WITH(service_config_from_file("tmp_service_bad_key.conf"),
                      Catch::Matchers::ContainsSubstring("line 2") &&
                          Catch::Matchers::ContainsSubstring("unknown key 'wheels'"));

    write_file("tmp_service_bad_value.conf", "port = eighty\n");
    CHECK_THROWS_WITH(service_config_from_file("tmp_service_bad_value.conf"),
                      Catch::Matchers::ContainsSubstring("bad value for 'port'"));

    write_file("tmp_service_no_eq.conf", "just words\n");
    CHECK_THROWS_AS(service_config_from_file("tmp_service_no_eq.conf"), ConfigError);

    write_file("tmp_service_embed.conf", "similarity = embedding\n");
    CHECK_THROWS_WITH(service_config_from_file("tmp_service_embed.conf"),
                      Catch::Matchers::ContainsSubstring("embedding_endpoint"));

    CHECK_THROWS_AS(service_config_from_file("tmp_missing.conf"), ConfigError);
}

// ---------------------------------------------------------------------------
// HTTP round trips
// ---------------------------------------------------------------------------

TEST_CASE("the scoring service answers HTTP requests exactly like the handlers") {
    ServiceConfig config;
    config.port = 0;
    config.threads = 2;
    const Backends backends = scripted_backends();
    ScoringService service(config, backends);
    REQUIRE(service.start());
    REQUIRE(service.port() > 0);

    httplib::Client client("127.0.0.1", service.port());
    client.set_read_timeout(10, 0);

    SECTION("health endpoint") {
        const auto res = client.Get("/healthz");
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK(res->get_header_value("X-R2IF-Version") == version());
        const json body = json::parse(res->body);
        CHECK(body["status"] == "ok");
        CHECK(body["similarity"] == "lexical");
        CHECK(body["student"] == "scripted");
        CHECK(body["version"] == version());
    }

    SECTION("parse endpoint mirrors the handler byte for byte") {
        const json body{{"response", grounded_response()}};
        const auto res = client.Post("/v1/parse", body.dump(), "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK(res->body == canonical_dump(handle_parse_payload(body)));
        CHECK(res->get_header_value("Content-Type") == "application/json");
    }

    SECTION("score endpoint mirrors the handler byte for byte") {
        const json body{{"instance", svc_instance_json()},
                        {"responses", json::array({grounded_response(), "no tags", "<reason>a</reason>"})},
                        {"options", json{{"enable_cer", false}}}};
        const auto res = client.Post("/v1/score", body.dump(), "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK(res->body ==
              canonical_dump(handle_score_payload(body, backends, config.reward, config.max_responses)));
    }

    SECTION("score endpoint runs the student pass when enabled") {
        const json body{{"instance", svc_instance_json()},
                        {"responses", json::array({grounded_response()})}};
        const auto res = client.Post("/v1/score", body.dump(), "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        const json out = json::parse(res->body);
        CHECK(out["breakdowns"][0]["cer"]["r_cer"].get<double>() == Approx(0.2).margin(1e-12));
    }

    SECTION("effectiveness endpoint") {
        const json body{{"pairs", json::array({json{{"instance", svc_instance_json()},
                                                    {"reason_text", kGroundedReason}}})}};
        const auto res = client.Post("/v1/ace", body.dump(), "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        const json out = json::parse(res->body);
        CHECK(out["ace"].get<double>() == Approx(0.2).margin(1e-12));
    }

    SECTION("error mapping") {
        const auto bad_json = client.Post("/v1/score", "{nope", "application/json");
        REQUIRE(bad_json);
        CHECK(bad_json->status == 400);
        CHECK(json::parse(bad_json->body)["error"]["type"] == "input");

        const json unknown_option{{"instance", svc_instance_json()},
                                  {"responses", json::array({"x"})},
                                  {"options", json{{"volume", 11}}}};
        const auto opt_res = client.Post("/v1/score", unknown_option.dump(), "application/json");
        REQUIRE(opt_res);
        CHECK(opt_res->status == 400);

        const json bad_instance{{"instance", json{{"id", "x"}, {"category", "simple"}}},
                                {"responses", json::array({"y"})}};
        const auto inst_res = client.Post("/v1/score", bad_instance.dump(), "application/json");
        REQUIRE(inst_res);
        CHECK(inst_res->status == 422);
        const json inst_err = json::parse(inst_res->body);
        CHECK(inst_err["error"]["type"] == "dataset");
        CHECK(inst_err["error"]["field"] == "query");

        const auto version_res = client.Post("/v1/parse", "{}", "application/json");
        REQUIRE(version_res);
        CHECK(version_res->status == 400);
        CHECK(version_res->get_header_value("X-R2IF-Version") == version());
    }

    service.stop();
}

TEST_CASE("the service rejects oversized bodies and reports degraded backends") {
    ServiceConfig config;
    config.port = 0;
    config.max_body_bytes = 1024;
    Backends backends;
    backends.similarity = std::make_shared<LexicalSimilarity>();
    backends.student = std::make_shared<UnreadyStudent>();
    backends.baseline_cache = std::make_shared<BaselineCache>();
    ScoringService service(config, backends);
    REQUIRE(service.start());

    httplib::Client client("127.0.0.1", service.port());
    client.set_read_timeout(10, 0);

    const json big{{"response", std::string(4096, 'x')}};
    const auto too_big = client.Post("/v1/parse", big.dump(), "application/json");
    REQUIRE(too_big);
    CHECK(too_big->status == 413);

    const auto health = client.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 503);
    CHECK(json::parse(health->body)["status"] == "degraded");

    service.stop();
}

TEST_CASE("an effectiveness request without a student maps to a backend error") {
    ServiceConfig config;
    config.port = 0;
    Backends backends;
    backends.similarity = std::make_shared<LexicalSimilarity>();
    backends.baseline_cache = std::make_shared<BaselineCache>();
    ScoringService service(config, backends);
    REQUIRE(service.start());

    httplib::Client client("127.0.0.1", service.port());
    const json body{{"pairs", json::array({json{{"instance", svc_instance_json()},
                                                {"reason_text", "r"}}})}};
    const auto res = client.Post("/v1/ace", body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 502);
    const json err = json::parse(res->body);
    CHECK(err["error"]["type"] == "backend");
    CHECK(err["error"]["component"] == "student");

    service.stop();
}

// ---------------------------------------------------------------------------
// Command-line interface
// ---------------------------------------------------------------------------

namespace {

struct CliFiles {
    std::string data = "tmp_cli_data.jsonl";
    std::string rollouts = "tmp_cli_rollouts.jsonl";

    CliFiles() {
        std::string ds;
        ds += svc_instance_json("cli-a").dump() + "\n";
        ds += svc_instance_json("cli-b").dump() + "\n";
        write_file(data, ds);

        std::string rl;
        rl += json{{"instance_id", "cli-a"},
                   {"responses", json::array({grounded_response(), "no tags"})}}
                  .dump() +
              "\n";
        rl += json{{"instance_id", "cli-b"}, {"responses", json::array({grounded_response()})}}.dump() + "\n";
        write_file(rollouts, rl);
    }
};

}  // namespace

TEST_CASE("the score command writes grouped results") {
    const CliFiles files;
    const std::string out = "tmp_cli_score_out.json";
    const int code = run_cli({"score", "--data", files.data, "--rollouts", files.rollouts, "--no-cer",
                              "--out", out});
    REQUIRE(code == 0);
    const json results = json::parse(read_file(out));
    REQUIRE(results["results"].size() == 2);
    CHECK(results["results"][0]["instance_id"] == "cli-a");
    CHECK(results["results"][0]["breakdowns"].size() == 2);
    CHECK(results["results"][0].contains("advantages"));
    CHECK(results["results"][1]["instance_id"] == "cli-b");
    CHECK_FALSE(results["results"][1].contains("advantages"));
    CHECK(results["results"][0]["breakdowns"][0]["total"].get<double>() == Approx(4.0).margin(1e-12));
}

TEST_CASE("commands that need continuations demand a student endpoint") {
    const CliFiles files;
    CHECK(run_cli({"score", "--data", files.data, "--rollouts", files.rollouts, "--out",
                   "tmp_cli_unused.json"}) == 64);
    CHECK(run_cli({"ace", "--data", files.data, "--rollouts", files.rollouts, "--out",
                   "tmp_cli_unused.json"}) == 64);
    CHECK(run_cli({"evaluate", "--data", files.data, "--rollouts", files.rollouts, "--out",
                   "tmp_cli_unused.json"}) == 64);
    CHECK(run_cli({"robustness", "--data", files.data, "--out", "tmp_cli_unused.json"}) == 64);
}

TEST_CASE("the evaluate command emits the chosen format") {
    const CliFiles files;
    const std::string csv_out = "tmp_cli_eval.csv";
    REQUIRE(run_cli({"evaluate", "--data", files.data, "--rollouts", files.rollouts, "--no-ace", "--format",
                     "csv", "--out", csv_out}) == 0);
    const std::string csv = read_file(csv_out);
    CHECK(csv.rfind("id,category,accuracy,responses,total,r_binary,r_smv,r_cer\n", 0) == 0);
    CHECK(csv.find("cli-a,simple,1,2,") != std::string::npos);

    const std::string md_out = "tmp_cli_eval.md";
    REQUIRE(run_cli({"evaluate", "--data", files.data, "--rollouts", files.rollouts, "--no-ace", "--format",
                     "markdown", "--out", md_out}) == 0);
    CHECK(read_file(md_out).find("# Evaluation Report") == 0);

    const std::string json_out = "tmp_cli_eval.json";
    REQUIRE(run_cli({"evaluate", "--data", files.data, "--rollouts", files.rollouts, "--no-ace", "--out",
                     json_out}) == 0);
    const json report = json::parse(read_file(json_out));
    CHECK(report["counts"]["instances"] == 2);
    CHECK_FALSE(report.contains("ace"));
}

TEST_CASE("the dataset validator distinguishes clean from broken files") {
    const CliFiles files;
    const std::string out = "tmp_cli_validate.json";
    CHECK(run_cli({"validate-dataset", "--data", files.data, "--out", out}) == 0);
    CHECK(json::parse(read_file(out))["ok"] == true);

    const std::string broken = "tmp_cli_broken.jsonl";
    write_file(broken, svc_instance_json("cli-a").dump() + "\n{oops\n");
    CHECK(run_cli({"validate-dataset", "--data", broken, "--out", out}) == 1);
    const json report = json::parse(read_file(out));
    CHECK(report["ok"] == false);
    CHECK(report["issues"][0]["line"] == 2);
}

TEST_CASE("the toy trainer command writes its curve") {
    const std::string out = "tmp_cli_toy.csv";
    const std::string report_path = "tmp_cli_toy.json";
    REQUIRE(run_cli({"toy-train", "--iterations", "3", "--seed", "11", "--out", out, "--json",
                     report_path}) == 0);
    const std::string csv = read_file(out);
    CHECK(csv.rfind("iteration,expected_correctness,expected_smv,p_grounded,p_ungrounded,objective\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 4 rows

    const json report = json::parse(read_file(report_path));
    CHECK(report["mode"] == "full");
    CHECK(report["iterations"] == 3);
    CHECK(report["rows"].size() == 4);

    REQUIRE(run_cli({"toy-train", "--mode", "binary-only", "--iterations", "2", "--out", out}) == 0);
    CHECK(read_file(out).find("0,0.250000,") != std::string::npos);
}

TEST_CASE("usage errors exit with the usage code") {
    CHECK(run_cli({}) == 64);
    CHECK(run_cli({"conjure"}) == 64);
    CHECK(run_cli({"score"}) == 64);                       // missing required options
    CHECK(run_cli({"score", "--data"}) == 64);             // dangling value
    CHECK(run_cli({"toy-train", "--mode", "sideways"}) == 64);
    CHECK(run_cli({"evaluate", "--data", "x", "--rollouts", "y", "--format", "pdf"}) == 64);
    CHECK(run_cli({"--version"}) == 0);
    CHECK(run_cli({"--help"}) == 0);
    CHECK(run_cli({"score", "--help"}) == 0);
}

TEST_CASE("missing input files exit with the data code") {
    CHECK(run_cli({"validate-dataset", "--data", "tmp_cli_nope.jsonl", "--out", "tmp_cli_unused.json"}) == 1);
    CHECK(run_cli({"score", "--data", "tmp_cli_nope.jsonl", "--rollouts", "tmp_cli_nope2.jsonl", "--no-cer",
                   "--out", "tmp_cli_unused.json"}) == 1);
}
