#include <gtest/gtest.h>

#include "support.hpp"
#include "xqeval/perturb.hpp"
#include "xqeval/remote.hpp"

using namespace xqeval;

namespace {

std::vector<std::string> token_strings(const std::string& text) {
  std::vector<std::string> out;
  for (const Span& s : tokenize(text)) out.push_back(text.substr(s.begin, s.size()));
  return out;
}

Vocabulary vocab(std::initializer_list<const char*> words) {
  std::vector<std::string> w;
  for (const char* x : words) w.emplace_back(x);
  return Vocabulary(w);
}

}  // namespace

TEST(MaskOut, IdentityAndSubstitution) {
  auto doc = make_document("d", "a b c", Label::human);
  auto none = mask_out(doc, {}, "\xE2\x96\x81");
  EXPECT_EQ(none.text, "a b c");
  EXPECT_EQ(none.kept_mask, std::vector<bool>(3, true));
  const std::vector<std::size_t> one = {1};
  EXPECT_EQ(mask_out(doc, one, "\xE2\x96\x81").text, "a \xE2\x96\x81 c");
  const std::vector<std::size_t> all = {0, 1, 2};
  auto masked = mask_out(doc, all, "<mask>");
  EXPECT_EQ(masked.text, "<mask> <mask> <mask>");
  EXPECT_EQ(masked.kept_mask, std::vector<bool>(3, false));
  EXPECT_EQ(masked.origin, PerturbationOrigin::mask);
  const std::vector<std::size_t> bad = {3};
  EXPECT_THROW(mask_out(doc, bad, "<mask>"), ArgumentError);
}

TEST(MaskOut, PreservesOtherBytes) {
  auto doc = make_document("d", "Hello,  world!\nBye.", Label::human);
  const std::vector<std::size_t> drop = {2};
  EXPECT_EQ(mask_out(doc, drop, "#").text, "Hello,  #!\nBye.");
}

TEST(EditCap, Arithmetic) {
  EXPECT_EQ(edit_cap(10, 0.2), 2u);
  EXPECT_EQ(edit_cap(11, 0.2), 3u);
  EXPECT_EQ(edit_cap(5, 0.2), 1u);
  EXPECT_EQ(edit_cap(100, 0.5), 50u);
}

TEST(SampleNeighborhood, RespectsCapAndSeed) {
  auto doc = make_document("d", "one two three four five six seven eight nine ten", Label::human);
  auto a = sample_neighborhood(doc, 200, 0.2, 42);
  ASSERT_EQ(a.size(), 200u);
  for (const auto& p : a) {
    const auto edited = std::count(p.kept_mask.begin(), p.kept_mask.end(), false);
    EXPECT_GE(edited, 1);
    EXPECT_LE(edited, 2);
    EXPECT_EQ(p.text, render_masked(doc, p.kept_mask, "<mask>"));
  }
  auto b = sample_neighborhood(doc, 200, 0.2, 42);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].text, b[i].text);
  EXPECT_THROW(sample_neighborhood(doc, 5, 0.0, 1), ArgumentError);
  EXPECT_THROW(sample_neighborhood(doc, 0, 0.2, 1), ArgumentError);
}

TEST(SampleNeighborhood, FixedPositionsUntouched) {
  auto doc = make_document("d", "one two three four five six seven eight nine ten", Label::human);
  NeighborhoodOptions options;
  options.fixed = {0, 4};
  for (const auto& p : sample_neighborhood(doc, 100, 0.5, 3, options)) {
    EXPECT_TRUE(p.kept_mask[0]);
    EXPECT_TRUE(p.kept_mask[4]);
  }
}

TEST(SampleNeighborhood, RandomVocabulary) {
  auto doc = make_document("d", "one two three four five", Label::human);
  auto v = vocab({"alpha", "beta", "gamma", "one"});
  NeighborhoodOptions options;
  options.strategy = PerturbationOrigin::random_vocab;
  options.vocabulary = &v;
  for (const auto& p : sample_neighborhood(doc, 50, 0.4, 8, options)) {
    auto toks = token_strings(p.text);
    ASSERT_EQ(toks.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
      if (p.kept_mask[i]) {
        EXPECT_EQ(toks[i], doc.token(i));
      } else {
        EXPECT_NE(toks[i], doc.token(i));
      }
    }
  }
}

TEST(Vocabulary, FromDocumentsKeepsWordsOnly) {
  std::vector<Document> docs = {make_document("a", "Cat, dog. Cat!", Label::human),
                                make_document("b", "bird 42", Label::machine)};
  auto v = Vocabulary::from_documents(docs);
  EXPECT_EQ(v.words(), (std::vector<std::string>{"42", "Cat", "bird", "dog"}));
}

TEST(ReplaceTokenVariants, RandomVocabulary) {
  auto doc = make_document("d", "the quick brown fox jumps", Label::human);
  auto v = vocab({"red", "green", "blue", "pink", "gray", "brown"});
  auto variants = replace_token_variants(doc, 2, 5, v, 7);
  ASSERT_EQ(variants.size(), 5u);
  std::set<std::string> distinct;
  for (const auto& var : variants) {
    distinct.insert(var.text);
    EXPECT_EQ(var.origin, PerturbationOrigin::random_vocab);
    auto toks = token_strings(var.text);
    ASSERT_EQ(toks.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
      if (i == 2) {
        EXPECT_NE(toks[i], "brown");
      } else {
        EXPECT_EQ(toks[i], doc.token(i));
      }
    }
  }
  EXPECT_EQ(distinct.size(), 5u);
  EXPECT_EQ(replace_token_variants(doc, 2, 5, v, 7)[0].text, variants[0].text);
}

TEST(ReplaceTokenVariants, PigeonholeError) {
  auto doc = make_document("d", "the quick brown fox", Label::human);
  auto v = vocab({"a", "b", "c"});
  try {
    replace_token_variants(doc, 0, 5, v, 1);
    FAIL();
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient distinct replacements"), std::string::npos);
  }
  EXPECT_THROW(replace_token_variants(doc, 9, 1, v, 1), ArgumentError);
}

TEST(ReplaceTokenVariants, RemoteInfillThenVocabulary) {
  std::atomic<int> requests{0};
  xqtest::StubServer server([&](httplib::Server& s) {
    s.Post("/v1/infill", [&](const httplib::Request& req, httplib::Response& res) {
      ++requests;
      auto body = nlohmann::json::parse(req.body);
      EXPECT_EQ(body["n"], 5);
      EXPECT_EQ(body["max_tokens"], 150);
      // Two unique candidates plus a duplicate.
      res.set_content(R"({"candidates":["slow","lazy","slow"]})", "application/json");
    });
  });
  xqtest::TempDir dir;
  auto replay = std::make_shared<ReplayLog>(dir.file("replay.jsonl"));
  auto client = std::make_shared<RemoteGeneratorClient>(HttpEndpoint{server.url()}, replay);
  RemoteInfill infill(client);
  auto doc = make_document("d", "the quick brown fox", Label::human);
  auto v = vocab({"red", "green", "blue", "pink", "gray"});
  auto variants = replace_token_variants(doc, 1, 5, v, 3, &infill);
  ASSERT_EQ(variants.size(), 5u);
  int remote = 0, random = 0;
  for (const auto& var : variants) {
    remote += var.origin == PerturbationOrigin::remote_infill;
    random += var.origin == PerturbationOrigin::random_vocab;
  }
  EXPECT_EQ(remote, 2);
  EXPECT_EQ(random, 3);
  EXPECT_EQ(variants[0].text, "the slow brown fox");
  EXPECT_EQ(requests.load(), 1);

  // The replay log answers identical requests without the service.
  ReplayLog reloaded(dir.file("replay.jsonl"));
  EXPECT_EQ(reloaded.size(), 1u);
  auto offline_client = std::make_shared<RemoteGeneratorClient>(HttpEndpoint{"http://127.0.0.1:1"},
                                                                std::make_shared<ReplayLog>(dir.file("replay.jsonl")));
  RemoteInfill offline(offline_client);
  auto again = replace_token_variants(doc, 1, 5, v, 3, &offline);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(again[i].text, variants[i].text);
  EXPECT_EQ(requests.load(), 1);
}

TEST(ReplaceTokenVariants, RemoteFailureFallsBack) {
  std::vector<std::string> warnings;
  static std::vector<std::string>* sink = nullptr;
  sink = &warnings;
  Log::set_sink([](const std::string& m) { sink->push_back(m); });
  HttpEndpoint endpoint{"http://127.0.0.1:1"};
  endpoint.retries = 0;
  endpoint.timeout_ms = 300;
  RemoteInfill infill(std::make_shared<RemoteGeneratorClient>(endpoint));
  auto doc = make_document("d", "the quick brown fox", Label::human);
  auto v = vocab({"red", "green", "blue", "pink", "gray"});
  auto variants = replace_token_variants(doc, 1, 3, v, 3, &infill);
  Log::set_sink(nullptr);
  EXPECT_EQ(variants.size(), 3u);
  for (const auto& var : variants) EXPECT_EQ(var.origin, PerturbationOrigin::random_vocab);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(ContinuePrefix, ChainSupportAndDeterminism) {
  MarkovChainGenerator chain;
  chain.add_sequence({"a", "b", "c", "a", "b", "c"});
  EXPECT_EQ(continue_prefix("a", 0, chain, 1), "a");
  // Enumerated support of the fitted chain: every observed transition.
  const std::set<std::pair<std::string, std::string>> bigrams = {{"a", "b"}, {"b", "c"}, {"c", "a"}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::string out = continue_prefix("a", 6, chain, seed);
    auto toks = token_strings(out);
    ASSERT_GE(toks.size(), 2u);
    for (std::size_t i = 1; i < toks.size(); ++i) {
      EXPECT_TRUE(bigrams.count({toks[i - 1], toks[i]})) << out;
    }
    EXPECT_EQ(out, continue_prefix("a", 6, chain, seed));
  }
  EXPECT_EQ(continue_prefix("a", 3, chain, 5), "a b c a");
  EXPECT_THROW(continue_prefix("  ", 3, chain, 1), ArgumentError);
}

TEST(ContinuePrefix, RemoteWithFallback) {
  xqtest::StubServer server([&](httplib::Server& s) {
    s.Post("/v1/continue", [&](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"candidates":["one more","two more"]})", "application/json");
    });
  });
  auto client = std::make_shared<RemoteGeneratorClient>(HttpEndpoint{server.url()});
  auto remote = std::make_shared<RemoteContinuation>(client);
  auto chain = std::make_shared<MarkovChainGenerator>();
  chain->add_sequence({"x", "y"});
  FallbackContinuation gen(remote, chain);
  EXPECT_EQ(continue_prefix("start", 5, gen, 0), "start one more");
  EXPECT_EQ(continue_prefix("start", 5, gen, 1), "start two more");

  HttpEndpoint dead{"http://127.0.0.1:1"};
  dead.retries = 0;
  dead.timeout_ms = 300;
  Log::set_sink([](const std::string&) {});
  FallbackContinuation broken(std::make_shared<RemoteContinuation>(std::make_shared<RemoteGeneratorClient>(dead)), chain);
  EXPECT_EQ(continue_prefix("x", 1, broken, 0), "x y");
  Log::set_sink(nullptr);
}
