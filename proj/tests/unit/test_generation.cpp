#include <doctest.h>

#include <cstdlib>
#include <httplib.h>

#include "saesens/error.hpp"
#include "saesens/generation.hpp"
#include "saesens/io.hpp"
#include "support/helpers.hpp"

using namespace saesens;

namespace {

ExampleSet fixture_examples() {
  return example_set_from_json(nlohmann::json::parse(read_file(testing::data_dir() / "prompt_fixture.examples.json")));
}

std::string n_samples(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += "\n<SAMPLE_SEPARATOR/>\n";
    s += "sample " + std::to_string(i) + " {{x}}";
  }
  return s;
}

PromptBundle tiny_prompt(FeatureId f) {
  ExampleSet set;
  set.feature_id = f;
  set.top_examples.push_back(testing::make_example({"a", " b"}, {0, 1}));
  return build_prompt(set);
}

std::size_t count_of(const std::string& hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + needle.size())) ++n;
  return n;
}

}  // namespace

TEST_SUITE("generation") {
  TEST_CASE("prompt matches the golden files byte for byte") {
    const auto set = fixture_examples();
    const auto p = build_prompt(set);
    CHECK(p.system_text == read_file(testing::data_dir() / "prompt_fixture.system.txt"));
    CHECK(p.user_text == read_file(testing::data_dir() / "prompt_fixture.user.txt"));
    CHECK(p.example_count == 5);
    CHECK(p.feature_id == 4242);
  }

  TEST_CASE("one example gives exactly one separator-wrapped block") {
    const auto p = tiny_prompt(1);
    const std::string lead = "separated by\n<SAMPLE_SEPARATOR/>:\n\n";
    const auto tail = p.user_text.substr(p.user_text.find(lead) + lead.size());
    CHECK(tail == "<SAMPLE_SEPARATOR/>\na{{ b}}\n");
    CHECK(count_of(p.user_text, kSampleSeparator) == 4);
    CHECK(p.user_text.find("following 1 examples") != std::string::npos);
  }

  TEST_CASE("samples_requested is written into the prompt") {
    ExampleSet set;
    set.top_examples.push_back(testing::make_example({"z"}, {1}));
    GenerationSettings s;
    s.samples_requested = 7;
    CHECK(build_prompt(set, s).user_text.find("Generate exactly 7 new samples") != std::string::npos);
  }

  TEST_CASE("empty example set is rejected") {
    CHECK_THROWS_AS(build_prompt(ExampleSet{}), PreconditionError);
  }

  TEST_CASE("template hash is stable across calls and tied to the text") {
    CHECK(prompt_template_hash() == prompt_template_hash());
    CHECK(prompt_template_hash() == sha256_hex(system_prompt_template() + "\x1f" + user_prompt_template()));
  }

  TEST_CASE("transcript parses into three samples with their targets") {
    const auto samples = parse_samples(read_file(testing::data_dir() / "sample_transcript.txt"));
    REQUIRE(samples.size() == 3);

    const auto& s0 = samples[0];
    CHECK(s0.clean_text.front() == 'v');
    CHECK(s0.clean_text.back() == ';');
    REQUIRE(s0.target_spans.size() == 3);
    for (const auto& sp : s0.target_spans) CHECK(s0.clean_text.substr(sp.start, sp.end - sp.start) == " resource");
    CHECK(s0.clean_text.find('{') == std::string::npos);

    const auto& s1 = samples[1];
    CHECK(s1.clean_text.starts_with("How to configure the  resource directory"));
    CHECK(s1.clean_text.find('\n') != std::string::npos);
    REQUIRE(s1.target_spans.size() == 1);

    const auto& s2 = samples[2];
    CHECK(s2.clean_text.starts_with("warning: avoid heavy computation in the resource allocation"));
    REQUIRE(s2.target_spans.size() == 1);
    CHECK(s2.clean_text.substr(s2.target_spans[0].start, 9) == " resource");
  }

  TEST_CASE("two samples with a clean first sample") {
    const auto s = parse_samples("A {{x}} B<SAMPLE_SEPARATOR/>C");
    REQUIRE(s.size() == 2);
    CHECK(s[0].clean_text == "A x B");
    REQUIRE(s[0].target_spans.size() == 1);
    CHECK(s[0].target_spans[0] == TextSpan{2, 3});
    CHECK(s[1].clean_text == "C");
    CHECK(s[1].target_spans.empty());
  }

  TEST_CASE("empty segments are dropped and all-empty is an error") {
    CHECK(parse_samples("<SAMPLE_SEPARATOR/>\n\n<SAMPLE_SEPARATOR/> one <SAMPLE_SEPARATOR/>").size() == 1);
    CHECK_THROWS_AS(parse_samples("  <SAMPLE_SEPARATOR/>  \n"), ParseError);
    CHECK_THROWS_AS(parse_samples(""), ParseError);
  }

  TEST_CASE("unbalanced braces stay literal") {
    auto s = parse_marked_text("open {{ never closed");
    CHECK(s.clean_text == "open {{ never closed");
    CHECK(s.target_spans.empty());
    s = parse_marked_text("a }} b");
    CHECK(s.clean_text == "a }} b");
    s = parse_marked_text("{{a {{b}}");
    CHECK(s.clean_text == "{{a b");
    REQUIRE(s.target_spans.size() == 1);
    CHECK(s.target_spans[0] == TextSpan{4, 5});
  }

  TEST_CASE("newline and brace escapes decode") {
    auto s = parse_marked_text("x{{\\n}}y");
    CHECK(s.clean_text == "x\ny");
    CHECK(s.target_spans[0] == TextSpan{1, 2});
    s = parse_marked_text("a{{↵}}b");
    CHECK(s.clean_text == "a\nb");
    s = parse_marked_text("set\\{\\{{{v}}\\}\\}");
    CHECK(s.clean_text == "set{{v}}");
    REQUIRE(s.target_spans.size() == 1);
    CHECK(s.target_spans[0] == TextSpan{5, 6});
  }

  TEST_CASE("empty marker is dropped") {
    const auto s = parse_marked_text("a{{}}b");
    CHECK(s.clean_text == "ab");
    CHECK(s.target_spans.empty());
  }

  TEST_CASE("curly quotes are stripped") {
    const auto s = parse_samples("“quoted {{t}}”");
    CHECK(s[0].clean_text == "quoted t");
  }

  TEST_CASE("mark_text round trips through the parser") {
    const std::vector<std::string> raws = {"A {{x}} B", "x{{\\n}}y", "set\\{\\{{{v}}\\}\\}", "{{a}}{{b}} c",
                                           "plain", "one {brace} stays", "{{multi word}} end\\nnext"};
    for (const auto& raw : raws) {
      CAPTURE(raw);
      const auto s = parse_marked_text(raw);
      const auto again = parse_marked_text(mark_text(s.clean_text, s.target_spans));
      CHECK(again.clean_text == s.clean_text);
      CHECK(again.target_spans == s.target_spans);
    }
  }

  TEST_CASE("first target token index counts preceding tokens") {
    WhitespaceTokenizer tok(std::vector<std::string>{"<unk>", "a", "b", "c"});
    auto s = parse_marked_text("a b {{c}}", &tok);
    REQUIRE(s.first_target_token_index);
    CHECK(*s.first_target_token_index == 2);
    s = parse_marked_text("{{a}} b", &tok);
    CHECK(*s.first_target_token_index == 0);
    s = parse_marked_text("a b", &tok);
    CHECK_FALSE(s.first_target_token_index);
  }

  TEST_CASE("target position histogram") {
    GenerationResult r;
    for (std::size_t idx : {0u, 3u, 7u}) {
      GeneratedSample s;
      s.first_target_token_index = idx;
      r.samples.push_back(s);
    }
    r.samples.push_back(GeneratedSample{});
    const std::vector<GenerationResult> rs = {r};
    const auto h = target_position_histogram(rs);
    CHECK(h.marked == 3);
    CHECK(h.unmarked == 1);
    CHECK(h.counts.at(0) == 1);
    CHECK(h.counts.at(3) == 1);
    CHECK(h.counts.at(7) == 1);
    CHECK(h.fraction_at_zero == doctest::Approx(1.0 / 3.0));
    CHECK(h.fraction_le_five == doctest::Approx(2.0 / 3.0));
  }

  TEST_CASE("generation result JSON round trip") {
    GenerationResult r;
    r.feature_id = 9;
    r.attempts = 2;
    r.status = GenerationStatus::low_sample;
    r.samples = parse_samples("a {{b}}<SAMPLE_SEPARATOR/>c");
    r.samples[0].first_target_token_index = 1;
    const auto back = generation_result_from_json(to_json(r));
    CHECK(to_json(back) == to_json(r));
    CHECK_THROWS_AS(parse_generation_status("bogus"), FormatError);
  }
}

TEST_SUITE("transport") {
  TEST_CASE("short replies are retried until enough samples parse") {
    ScriptedTransport t;
    t.set(1, {{n_samples(3)}, {n_samples(3)}, {n_samples(10)}});
    GenerationSettings s;
    s.retry_backoff = std::chrono::milliseconds(0);
    const auto r = generate(tiny_prompt(1), t, s);
    CHECK(r.attempts == 3);
    CHECK(r.samples.size() == 10);
    CHECK(r.status == GenerationStatus::ok);
    CHECK(t.calls() == 3);
  }

  TEST_CASE("a full reply on the first attempt stops immediately") {
    ScriptedTransport t;
    t.set(1, {{n_samples(11)}});
    const auto r = generate(tiny_prompt(1), t);
    CHECK(r.attempts == 1);
    CHECK(r.samples.size() == 11);
  }

  TEST_CASE("best attempt wins and sets low_sample or unevaluated") {
    ScriptedTransport t;
    t.set(1, {{n_samples(7)}, {n_samples(2)}, {n_samples(4)}});
    t.set(2, {{n_samples(4)}});
    GenerationSettings s;
    s.retry_backoff = std::chrono::milliseconds(0);
    const auto r = generate(tiny_prompt(1), t, s);
    CHECK(r.samples.size() == 7);
    CHECK(r.status == GenerationStatus::low_sample);
    const auto u = generate(tiny_prompt(2), t, s);
    CHECK(u.status == GenerationStatus::unevaluated);
    CHECK_FALSE(u.usable());
  }

  TEST_CASE("server errors on every attempt raise a generation error") {
    ScriptedTransport t;
    t.set(1, {{"", 500}});
    GenerationSettings s;
    s.retry_backoff = std::chrono::milliseconds(0);
    CHECK_THROWS_AS(generate(tiny_prompt(1), t, s), GenerationError);
    CHECK(t.calls() == 3);
  }

  TEST_CASE("non-retryable error stops after one call") {
    ScriptedTransport t;
    t.set(1, {{"", 400}});
    CHECK_THROWS_AS(generate(tiny_prompt(1), t), GenerationError);
    CHECK(t.calls() == 1);
  }

  TEST_CASE("retry backoff doubles between attempts") {
    ScriptedTransport t;
    t.set(1, {{"", 503}, {"", 503}, {n_samples(10)}});
    GenerationSettings s;
    s.retry_backoff = std::chrono::milliseconds(20);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = generate(tiny_prompt(1), t, s);
    const auto waited = std::chrono::steady_clock::now() - t0;
    CHECK(r.attempts == 3);
    CHECK(waited >= std::chrono::milliseconds(60));
  }

  TEST_CASE("generate_all keeps order and turns failures into unevaluated") {
    ScriptedTransport t;
    t.set_default({{n_samples(10)}});
    t.set(3, {{"", 500}});
    std::vector<PromptBundle> prompts;
    for (FeatureId f = 0; f < 6; ++f) prompts.push_back(tiny_prompt(f));
    GenerationSettings s;
    s.retry_backoff = std::chrono::milliseconds(0);
    const auto rs = generate_all(prompts, t, s, nullptr, 3);
    REQUIRE(rs.size() == 6);
    for (FeatureId f = 0; f < 6; ++f) {
      CHECK(rs[f].feature_id == f);
      CHECK(rs[f].usable() == (f != 3));
    }
    CHECK_FALSE(rs[3].error.empty());
  }

  TEST_CASE("scripted transport loads from JSON") {
    const auto t = ScriptedTransport::from_json(
        nlohmann::json::parse(R"({"responses": {"4": ["x", {"status": 429}]}, "default": ["d"]})"));
    CHECK(t->complete({}, {4, 1}).content == "x");
    CHECK_THROWS_AS(t->complete({}, {4, 2}), TransportError);
    CHECK(t->complete({}, {8, 1}).content == "d");
  }

  TEST_CASE("cache replays without calling the inner transport") {
    testing::TempDir dir("cache");
    auto inner = std::make_shared<ScriptedTransport>();
    inner->set(1, {{n_samples(10)}});
    CachingTransport cache(inner, dir.path());
    const auto a = generate(tiny_prompt(1), cache);
    CHECK(inner->calls() == 1);
    const auto b = generate(tiny_prompt(1), cache);
    CHECK(inner->calls() == 1);
    CHECK(to_json(a) == to_json(b));

    ChatRequest req = to_request(tiny_prompt(1));
    CHECK(CachingTransport::cache_key(req, {1, 1}) != CachingTransport::cache_key(req, {1, 2}));
    req.temperature = 0.5;
    CHECK(CachingTransport::cache_key(req, {1, 1}) != CachingTransport::cache_key(to_request(tiny_prompt(1)), {1, 1}));
  }

  TEST_CASE("chat request body") {
    auto req = to_request(tiny_prompt(1));
    req.seed = 17;
    const auto b = req.body();
    CHECK(b.at("model") == "gpt-4.1-mini");
    CHECK(b.at("messages").size() == 2);
    CHECK(b.at("messages")[0].at("role") == "system");
    CHECK(b.at("messages")[1].at("content") == req.user);
    CHECK(b.at("seed") == 17);
    req.seed.reset();
    CHECK_FALSE(req.body().contains("seed"));
  }

  TEST_CASE("OpenAI-compatible transport against a local server") {
    httplib::Server server;
    std::atomic<int> hits{0};
    std::string seen_auth;
    nlohmann::json seen_body;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
      const int n = ++hits;
      seen_auth = req.get_header_value("Authorization");
      seen_body = nlohmann::json::parse(req.body);
      if (n == 1) {
        res.status = 429;
        return;
      }
      nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", n_samples(10)}}}}}},
                              {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 34}}}};
      res.set_content(reply.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ::setenv("SAESENS_TEST_KEY", "sk-test-123456789", 1);
    OpenAiOptions opts;
    opts.endpoint = "http://127.0.0.1:" + std::to_string(port);
    opts.api_key_env = "SAESENS_TEST_KEY";
    opts.timeout = std::chrono::seconds(5);
    OpenAiTransport t(opts);
    GenerationSettings s;
    s.retry_backoff = std::chrono::milliseconds(0);
    const auto r = generate(tiny_prompt(1), t, s);
    server.stop();
    th.join();

    CHECK(hits == 2);
    CHECK(r.attempts == 2);
    CHECK(r.samples.size() == 10);
    CHECK(seen_auth == "Bearer sk-test-123456789");
    CHECK(seen_body.at("messages")[1].at("content") == tiny_prompt(1).user_text);
    CHECK(r.provider_metadata.at("completion_tokens") == 34);
  }

  TEST_CASE("missing API key is a configuration error") {
    OpenAiOptions opts;
    opts.api_key_env = "SAESENS_DEFINITELY_UNSET_KEY";
    CHECK_THROWS_AS(OpenAiTransport{opts}, ConfigError);
  }

  TEST_CASE("unreachable endpoint is a retryable transport error") {
    ::setenv("SAESENS_TEST_KEY", "k", 1);
    OpenAiOptions opts;
    opts.endpoint = "http://127.0.0.1:1";
    opts.api_key_env = "SAESENS_TEST_KEY";
    opts.timeout = std::chrono::seconds(2);
    OpenAiTransport t(opts);
    try {
      t.complete(to_request(tiny_prompt(1)), {1, 1});
      FAIL("expected TransportError");
    } catch (const TransportError& e) {
      CHECK(e.retryable());
    }
  }
}
