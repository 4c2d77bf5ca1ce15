#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "oracle_helpers.hpp"
#include "r2if/r2if.hpp"

using namespace r2if;
using Catch::Approx;

namespace {

const std::string kCorrectWeather =
    R"([{"name": "get_weather", "arguments": {"city": "Paris", "unit": "celsius"}}])";
const std::string kWrongWeather =
    R"([{"name": "get_weather", "arguments": {"city": "London", "unit": "celsius"}}])";

Instance weather_instance() {
    Instance inst;
    inst.id = "wx-1";
    inst.category = TaskCategory::Simple;
    inst.query = "What is the temperature in Paris in celsius?";
    ToolSchema weather;
    weather.name = "get_weather";
    weather.description = "Current weather for a city.";
    ParamSchema city;
    city.type_tag = "string";
    city.description = "City to look up.";
    city.required = true;
    ParamSchema unit;
    unit.type_tag = "string";
    unit.description = "Temperature unit.";
    weather.parameters.emplace_back("city", city);
    weather.parameters.emplace_back("unit", unit);
    inst.tools.push_back(weather);
    inst.ground_truth.calls.push_back(
        make_tool_call("get_weather", json{{"city", "Paris"}, {"unit", "celsius"}}));

    GtDocument doc;
    doc.reason = "A single weather lookup answers the question.";
    GtDocEntry entry;
    entry.name = "get_weather";
    entry.params.emplace_back("city", GtParamAnnotation{"the city named in the question", "no modify"});
    entry.params.emplace_back("unit",
                              GtParamAnnotation{"the temperature unit the user requests", "lowercase the word"});
    doc.calls.push_back(entry);
    inst.gt_document = doc;
    inst.baseline_success_rate = 0.6;
    return inst;
}

std::string grounded_response() {
    return "<reason>For #get_weather#:\n"
           "- city: the city named in the question\n"
           "- unit: the temperature unit the user requests</reason><tool>" +
           kCorrectWeather + "</tool>";
}

}  // namespace

// ---------------------------------------------------------------------------
// Similarity backends
// ---------------------------------------------------------------------------

TEST_CASE("lexical similarity is cosine over term frequencies") {
    LexicalSimilarity sim;
    CHECK(sim.similarity("hello world", "hello world") == 1.0);
    CHECK(sim.similarity("Hello, WORLD!", "world ... hello") == 1.0);  // identical token bags
    CHECK(sim.similarity("alpha beta", "gamma delta") == 0.0);
    CHECK(sim.similarity("", "anything") == 0.0);
    CHECK(sim.similarity("", "") == 0.0);
    CHECK(sim.similarity("...", "anything") == 0.0);  // tokenizes to nothing

    // One shared token out of two on each side: cos = 1/2.
    CHECK(sim.similarity("a b", "a c") == Approx(0.5).margin(1e-12));
    // Repetition changes weights: tf vectors (2,1) vs (1,1).
    CHECK(sim.similarity("a a b", "a b") == Approx(3.0 / std::sqrt(10.0)).margin(1e-12));
}

TEST_CASE("scripted similarity replays values symmetrically and flags misses") {
    ScriptedSimilarity sim;
    sim.add("x", "y", 0.42);
    CHECK(sim.similarity("x", "y") == 0.42);
    CHECK(sim.similarity("y", "x") == 0.42);
    CHECK_THROWS_AS(sim.similarity("x", "z"), MockMissError);

    ScriptedSimilarity fallback(/*exact_fallback=*/true);
    fallback.add("x", "y", 0.9);
    CHECK(fallback.similarity("x", "y") == 0.9);
    CHECK(fallback.similarity("same", "same") == 1.0);
    CHECK(fallback.similarity("a", "b") == 0.0);
    CHECK(fallback.similarity("", "") == 0.0);
}

TEST_CASE("scripted students cycle their entries to fill a batch") {
    ScriptedStudent student;
    student.add("id-1", "prefix", {"a", "b"});
    Instance inst;
    inst.id = "id-1";
    const auto five = student.continuations(inst, "prefix", 5, SamplingParams{});
    REQUIRE(five.size() == 5);
    CHECK(five == std::vector<std::string>{"a", "b", "a", "b", "a"});
    const auto one = student.continuations(inst, "prefix", 1, SamplingParams{});
    CHECK(one == std::vector<std::string>{"a"});
    CHECK_THROWS_AS(student.continuations(inst, "other prefix", 3, SamplingParams{}), MockMissError);
    Instance other;
    other.id = "id-2";
    CHECK_THROWS_AS(student.continuations(other, "prefix", 3, SamplingParams{}), MockMissError);
}

TEST_CASE("prompt rendering includes the tool list and the question") {
    const Instance inst = weather_instance();
    const std::string sys = render_system_prompt();
    CHECK(sys.find("For #") != std::string::npos);
    CHECK(sys.find("<reason>") != std::string::npos);
    CHECK(sys.find(std::string(kRejectionString)) != std::string::npos);
    const std::string user = render_user_message(inst);
    CHECK(user.find("get_weather") != std::string::npos);
    CHECK(user.find("Question: What is the temperature in Paris in celsius?") != std::string::npos);
}

// ---------------------------------------------------------------------------
// Reasoning-quality scoring
// ---------------------------------------------------------------------------

TEST_CASE("similarity gating zeroes sub-threshold scores and keeps the rest raw") {
    RewardConfig cfg;
    CHECK(gated_similarity(0.69, cfg.tau) == 0.0);
    CHECK(gated_similarity(0.7, cfg.tau) == 0.7);
    CHECK(gated_similarity(0.95, cfg.tau) == 0.95);
    CHECK(gated_similarity(0.5, 0.5) == 0.5);
    CHECK(gated_similarity(1.0, 1.0) == 1.0);
    CHECK(gated_similarity(0.999, 1.0) == 0.0);
}

TEST_CASE("per-parameter scores average available components or divide by three") {
    ScriptedSimilarity sim;
    sim.add("snippet", "spec text", 0.82);
    sim.add("snippet", "mod text", 0.4);
    const std::string snippet = "snippet";
    RewardConfig cfg;

    SECTION("renormalized over available components") {
        const auto t = smv_param("p", &snippet, "spec text", "mod text", true, sim, cfg);
        CHECK(t.components_used == 3);
        CHECK(t.r_spec == Approx(0.82).margin(1e-12));
        CHECK(t.r_mod == 0.0);  // below tau
        CHECK(t.r_val == 1);
        CHECK(t.score == Approx((0.82 + 0.0 + 1.0) / 3.0).margin(1e-12));
    }

    SECTION("sentinels drop components from the mean") {
        const auto t = smv_param("p", &snippet, "spec text", "No Modify", true, sim, cfg);
        CHECK(t.components_used == 2);
        CHECK(t.score == Approx((0.82 + 1.0) / 2.0).margin(1e-12));

        const auto only_val = smv_param("p", &snippet, " no spec ", "no modify", true, sim, cfg);
        CHECK(only_val.components_used == 1);
        CHECK(only_val.score == 1.0);

        const auto nothing = smv_param("p", &snippet, "no spec", "no modify", false, sim, cfg);
        CHECK(nothing.score == 0.0);
    }

    SECTION("literal mode always divides by three") {
        RewardConfig literal = cfg;
        literal.smv_renormalize = false;
        const auto t = smv_param("p", &snippet, "spec text", "no modify", true, sim, literal);
        CHECK(t.components_used == 3);
        CHECK(t.score == Approx((0.82 + 0.0 + 1.0) / 3.0).margin(1e-12));
    }

    SECTION("a missing snippet zeroes both similarity components") {
        const auto t = smv_param("p", nullptr, "spec text", "mod text", true, sim, cfg);
        CHECK_FALSE(t.snippet_present);
        CHECK(t.r_spec == 0.0);
        CHECK(t.r_mod == 0.0);
        CHECK(t.score == Approx(1.0 / 3.0).margin(1e-12));
    }
}

TEST_CASE("call-level scores average the supervised parameters") {
    ScriptedSimilarity sim(/*exact_fallback=*/true);
    RewardConfig cfg;
    const ToolCall pred = make_tool_call("f", json{{"a", 1}, {"b", 2}});

    GtDocEntry unsupervised;
    unsupervised.name = "f";
    CHECK(smv_call(pred, nullptr, unsupervised, sim, cfg) == 1.0);

    GtDocEntry entry;
    entry.name = "f";
    entry.params.emplace_back("a", GtParamAnnotation{"alpha spec", "no modify"});
    entry.params.emplace_back("b", GtParamAnnotation{"beta spec", "no modify"});
    AnswerEntry answer;
    answer.name = "f";
    answer.arg_snippets.emplace_back("a", "alpha spec");  // exact match -> sim 1
    // b has no snippet -> (0 + 1)/2
    const double score = smv_call(pred, &answer, entry, sim, cfg);
    CHECK(score == Approx((1.0 + 0.5) / 2.0).margin(1e-12));
}

TEST_CASE("action-level scores divide by the larger action count") {
    ScriptedSimilarity sim(/*exact_fallback=*/true);
    RewardConfig cfg;

    ActionList gold;
    gold.calls.push_back(make_tool_call("f", json{{"a", 1}}));
    GtDocument gt;
    gt.reason = "r";
    GtDocEntry entry;
    entry.name = "f";
    entry.params.emplace_back("a", GtParamAnnotation{"alpha spec", "no modify"});
    gt.calls.push_back(entry);

    AnswerDoc doc;
    AnswerEntry ae;
    ae.name = "f";
    ae.arg_snippets.emplace_back("a", "alpha spec");
    doc.entries.push_back(ae);

    ActionList pred = gold;
    CHECK(smv_action(pred, gold, doc, gt, sim, cfg) == Approx(1.0).margin(1e-12));

    // An extra unmatched call dilutes the mean: 1/2.
    pred.calls.push_back(make_tool_call("g", json::object()));
    CHECK(smv_action(pred, gold, doc, gt, sim, cfg) == Approx(0.5).margin(1e-12));

    // No predictions at all: 0 over max(0, 1).
    CHECK(smv_action(ActionList{}, gold, doc, gt, sim, cfg) == 0.0);
    CHECK(smv_action(ActionList{}, ActionList{}, doc, GtDocument{}, sim, cfg) == 0.0);

    // Supervision misaligned with the reference count is a data defect.
    GtDocument short_doc;
    short_doc.reason = "r";
    CHECK_THROWS_AS(smv_action(pred, gold, doc, short_doc, sim, cfg), DatasetError);
}

TEST_CASE("action scoring matches the from-scratch reference on random cases") {
    r2if::testing::HashSimilarity sim;
    std::mt19937_64 rng(911);
    for (int i = 0; i < 300; ++i) {
        const auto c = r2if::testing::random_smv_case(rng);
        for (const double tau : {0.5, 0.7, 0.9}) {
            for (const bool renorm : {true, false}) {
                RewardConfig cfg;
                cfg.tau = tau;
                cfg.smv_renormalize = renorm;
                const double got = smv_action(c.pred, c.gold, c.doc, c.gt, sim, cfg);
                const double want = r2if::testing::oracle_smv_action(c.pred, c.gold, c.doc, c.gt, sim, cfg);
                INFO("case " << i << " tau " << tau << " renorm " << renorm);
                CHECK(got == Approx(want).margin(1e-12));
                CHECK(got >= 0.0);
                CHECK(got <= 1.0);
            }
        }
    }
}

TEST_CASE("irrelevance scoring gates the declination-reason similarity") {
    LexicalSimilarity sim;
    RewardConfig cfg;
    const std::string reference = "the tools cannot write poetry";
    CHECK(smv_irrelevance("the tools cannot write poetry", reference, sim, cfg) == Approx(1.0));
    CHECK(smv_irrelevance("unrelated words entirely", reference, sim, cfg) == 0.0);
}

// ---------------------------------------------------------------------------
// Continuation effectiveness
// ---------------------------------------------------------------------------

TEST_CASE("continuation effectiveness subtracts the baseline success rate") {
    const Instance inst = weather_instance();
    auto student = std::make_shared<ScriptedStudent>();
    const std::string correct_end = kCorrectWeather + "</tool>";
    const std::string wrong_end = kWrongWeather + "</tool>";
    student->add(inst.id, cer_prefix("good reason"),
                 {correct_end, correct_end, correct_end, correct_end, wrong_end});
    RewardConfig cfg;

    const CerEstimate est = cer("good reason", inst, *student, cfg);
    CHECK(est.samples == 5);
    CHECK(est.successes == 4);
    CHECK(est.v == Approx(0.8).margin(1e-15));
    CHECK(est.v_base == 0.6);
    CHECK(est.r_cer == Approx(0.2).margin(1e-12));
}

TEST_CASE("a missing baseline is estimated once through the cache") {
    Instance inst = weather_instance();
    inst.baseline_success_rate.reset();
    auto scripted = std::make_shared<ScriptedStudent>();
    const std::string correct_end = kCorrectWeather + "</tool>";
    const std::string wrong_end = kWrongWeather + "</tool>";
    scripted->add(inst.id, cer_prefix("good reason"), {correct_end});
    scripted->add(inst.id, cer_prefix("bad reason"), {wrong_end});
    scripted->add(inst.id, kEmptyReasonPrefix, {correct_end, wrong_end});  // v_base = 0.6 cycled to 5
    const auto counting = std::make_shared<r2if::testing::CountingStudent>(scripted);
    RewardConfig cfg;
    BaselineCache cache;

    const CerEstimate good = cer("good reason", inst, *counting, cfg, &cache);
    CHECK(good.v == 1.0);
    CHECK(good.v_base == Approx(0.6).margin(1e-15));  // [c,w,c,w,c] -> 3/5
    CHECK(counting->calls() == 2);                    // one value flight + one baseline flight
    CHECK(cache.size() == 1);

    const CerEstimate bad = cer("bad reason", inst, *counting, cfg, &cache);
    CHECK(bad.v == 0.0);
    CHECK(bad.v_base == good.v_base);
    CHECK(counting->calls() == 3);  // baseline reused
    CHECK(bad.r_cer == Approx(0.0 - 0.6).margin(1e-12));
}

TEST_CASE("concurrent baseline estimation stays single-flight") {
    Instance inst = weather_instance();
    inst.baseline_success_rate.reset();
    auto scripted = std::make_shared<ScriptedStudent>();
    const std::string correct_end = kCorrectWeather + "</tool>";
    scripted->add(inst.id, cer_prefix("r"), {correct_end});
    scripted->add(inst.id, kEmptyReasonPrefix, {correct_end, kWrongWeather + "</tool>"});
    const auto counting = std::make_shared<r2if::testing::CountingStudent>(scripted);
    RewardConfig cfg;
    BaselineCache cache;

    std::vector<std::thread> threads;
    std::vector<double> results(8, -1.0);
    for (int t = 0; t < 8; ++t) {
        threads.emplace_back([&, t] { results[static_cast<std::size_t>(t)] = cer("r", inst, *counting, cfg, &cache).r_cer; });
    }
    for (auto& th : threads) th.join();
    for (const double r : results) CHECK(r == results[0]);
    CHECK(counting->calls() == 9);  // 8 value flights + exactly 1 baseline flight
}

TEST_CASE("a short continuation batch is a backend failure") {
    struct ShortStudent final : StudentBackend {
        std::vector<std::string> continuations(const Instance&, const std::string&, int,
                                               const SamplingParams&) const override {
            return {"only one"};
        }
        std::string name() const override { return "short"; }
    };
    const Instance inst = weather_instance();
    RewardConfig cfg;
    const ShortStudent student;
    CHECK_THROWS_AS(cer("r", inst, student, cfg), BackendError);
}

TEST_CASE("baseline cache failures are retried instead of cached") {
    BaselineCache cache;
    int attempts = 0;
    const auto failing = [&]() -> double {
        ++attempts;
        throw BackendError("student", "transient");
    };
    CHECK_THROWS_AS(cache.get_or_compute("k", failing), BackendError);
    CHECK(cache.size() == 0);
    const auto fine = [&]() -> double {
        ++attempts;
        return 0.25;
    };
    CHECK(cache.get_or_compute("k", fine) == 0.25);
    CHECK(attempts == 2);
    CHECK(cache.get_or_compute("k", fine) == 0.25);
    CHECK(attempts == 2);
}

// ---------------------------------------------------------------------------
// Composite reward
// ---------------------------------------------------------------------------

TEST_CASE("the composite reward combines gate, effectiveness, and grounding") {
    const Instance inst = weather_instance();
    auto student = std::make_shared<ScriptedStudent>();
    const std::string correct_end = kCorrectWeather + "</tool>";
    const std::string wrong_end = kWrongWeather + "</tool>";
    const std::string grounded_reason =
        "For #get_weather#:\n"
        "- city: the city named in the question\n"
        "- unit: the temperature unit the user requests";
    student->add(inst.id, cer_prefix(grounded_reason),
                 {correct_end, correct_end, correct_end, correct_end, wrong_end});

    Backends backends;
    backends.similarity = std::make_shared<LexicalSimilarity>();
    backends.student = student;
    backends.baseline_cache = std::make_shared<BaselineCache>();
    RewardConfig cfg;

    const RewardBreakdown b = composite_reward(grounded_response(), inst, backends, cfg);
    CHECK(b.r_format == 1);
    CHECK(b.r_correctness == 1);
    CHECK(b.r_binary == 1);
    // city: (1 + 1)/2 = 1; unit: spec sim 1, mod snippet mismatch -> gated 0,
    // instantiated -> (1 + 0 + 1)/3.
    const double unit_score = (1.0 + 0.0 + 1.0) / 3.0;
    CHECK(b.r_smv == Approx((1.0 + unit_score) / 2.0).margin(1e-12));
    REQUIRE(b.cer.has_value());
    CHECK(b.cer->r_cer == Approx(0.2).margin(1e-12));
    CHECK(b.total == Approx(3.0 * 1 + 0.2 + b.r_smv).margin(1e-12));
    REQUIRE(b.smv_traces.size() == 1);
    CHECK(b.smv_traces[0].answer_entry_found);
}

TEST_CASE("malformed responses zero the gate and skip the effectiveness estimate") {
    const Instance inst = weather_instance();
    Backends backends;
    backends.similarity = std::make_shared<LexicalSimilarity>();
    backends.student = std::make_shared<ScriptedStudent>();  // would throw if consulted
    backends.baseline_cache = std::make_shared<BaselineCache>();
    RewardConfig cfg;

    const RewardBreakdown b =
        composite_reward("stray <reason>r</reason><tool>" + kCorrectWeather + "</tool>", inst, backends, cfg);
    CHECK(b.r_format == 0);
    CHECK(b.r_binary == 0);
    CHECK_FALSE(b.cer.has_value());
    CHECK_FALSE(b.violations.empty());
}

TEST_CASE("responses without a reasoning block never trigger the student") {
    Instance inst = weather_instance();
    inst.baseline_success_rate.reset();  // a consult would hit the scripted table and throw
    Backends backends;
    backends.similarity = std::make_shared<LexicalSimilarity>();
    backends.student = std::make_shared<ScriptedStudent>();
    backends.baseline_cache = std::make_shared<BaselineCache>();
    RewardConfig cfg;

    const RewardBreakdown b = composite_reward("<tool>" + kCorrectWeather + "</tool>", inst, backends, cfg);
    CHECK_FALSE(b.cer.has_value());
    CHECK(b.r_binary == 0);  // format gate failed
}

TEST_CASE("rejections on declination tasks score the reason against the reference") {
    Instance inst;
    inst.id = "irr-1";
    inst.category = TaskCategory::Irrelevance;
    inst.query = "Write a poem.";
    ToolSchema stock;
    stock.name = "get_stock_price";
    ParamSchema symbol;
    symbol.type_tag = "string";
    symbol.required = true;
    stock.parameters.emplace_back("symbol", symbol);
    inst.tools.push_back(stock);
    inst.irrelevance_reason = "the available tool reports stock prices and cannot write poetry";
    inst.baseline_success_rate = 0.5;

    Backends backends;
    backends.similarity = std::make_shared<LexicalSimilarity>();
    backends.baseline_cache = std::make_shared<BaselineCache>();
    RewardConfig cfg;

    const std::string response = "<reason>the available tool reports stock prices and cannot write poetry"
                                 "</reason><tool>None of function can be used</tool>";
    const RewardBreakdown b = composite_reward(response, inst, backends, cfg, /*enable_cer=*/false);
    CHECK(b.r_binary == 1);
    CHECK(b.r_smv == Approx(1.0));
    CHECK(b.total == Approx(4.0));

    // A declination with unrelated reasoning keeps the gate but loses grounding.
    const RewardBreakdown vague = composite_reward(
        "<reason>nothing fits here</reason><tool>None of function can be used</tool>", inst, backends, cfg,
        /*enable_cer=*/false);
    CHECK(vague.r_binary == 1);
    CHECK(vague.r_smv == 0.0);

    // Calling a tool anyway fails the gate and grounds nothing.
    const RewardBreakdown called = composite_reward(
        R"(<reason>sure</reason><tool>[{"name": "get_stock_price", "arguments": {"symbol": "A"}}]</tool>)",
        inst, backends, cfg, /*enable_cer=*/false);
    CHECK(called.r_binary == 0);
    CHECK(called.r_smv == 0.0);
}

TEST_CASE("grounding can be disabled without touching the similarity backend") {
    const Instance inst = weather_instance();
    Backends backends;
    backends.similarity = std::make_shared<ScriptedSimilarity>();  // throws on any lookup
    backends.baseline_cache = std::make_shared<BaselineCache>();
    RewardConfig cfg;

    const RewardBreakdown b = composite_reward(grounded_response(), inst, backends, cfg,
                                               /*enable_cer=*/false, /*enable_smv=*/false);
    CHECK(b.r_binary == 1);
    CHECK(b.r_smv == 0.0);
    CHECK(b.total == Approx(3.0));
}

TEST_CASE("instances without supervision score zero grounding") {
    Instance inst = weather_instance();
    inst.gt_document.reset();
    Backends backends;
    backends.similarity = std::make_shared<LexicalSimilarity>();
    backends.baseline_cache = std::make_shared<BaselineCache>();
    RewardConfig cfg;
    const RewardBreakdown b = composite_reward(grounded_response(), inst, backends, cfg, /*enable_cer=*/false);
    CHECK(b.r_binary == 1);
    CHECK(b.r_smv == 0.0);
    CHECK(b.total == Approx(3.0));
}
