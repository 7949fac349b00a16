#include "prag/adapters.hpp"
#include "prag/augmentation.hpp"
#include "prag/corpus.hpp"
#include "prag/error.hpp"
#include "prag/synthetic.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>

namespace prag {
namespace {

using testing::TempDir;

CaseDocument sample_case() {
  SyntheticOptions o;
  o.offline = 1;
  o.civil_fraction = 0.0;
  auto docs = testing::parse_raw(make_synthetic_corpus(o).offline_raw);
  auto d = docs.at(0);
  if (!d.focus) d.focus = "Whether the defendant acted secretly.";
  return d;
}

TEST(ValidateRewrite, HandLabeledPairs) {
  struct Case {
    std::string original;
    std::string variant;
    bool ok;
  };
  const std::vector<Case> cases = {
      {"Li stole 3000 yuan on 2021-01-02.", "On 2021-01-02, Li took 3000 yuan.", true},
      {"Li stole 3000 yuan.", "Li stole 300 yuan.", false},           // digit run shortened
      {"Li stole 3000 yuan.", "Li stole 30000 yuan.", false},         // maximal run differs
      {"Sentenced to 8 months.", "Sentenced to 18 months.", false},   // "8" only inside a longer run
      {"Under Article 264 of the Criminal Law.", "Per Article 264 of the Criminal Law.", true},
      {"Under Article 264 of the Criminal Law.", "Per Article 264 of the Civil Code.", false},
  };
  for (const auto& c : cases) EXPECT_EQ(validate_rewrite(c.original, c.variant).ok, c.ok) << c.variant;
  const auto check = validate_rewrite("12 and 34", "12 only");
  EXPECT_EQ(check.missing, std::vector<std::string>{"34"});
}

TEST(Builtin, OutputsAlwaysValidate) {
  BuiltinParaphraser p;
  const auto d = sample_case();
  for (SectionKind k : kAllSections) {
    const auto text = section_text(d, k);
    ASSERT_TRUE(text.has_value()) << to_string(k);
    for (std::uint64_t s = 0; s < 20; ++s) EXPECT_TRUE(validate_rewrite(*text, p.rewrite(*text, k, s)).ok);
  }
}

TEST(Augment, CountsPerRole) {
  BuiltinParaphraser p;
  const auto d = sample_case();
  const auto off = augment_case(d, CaseRole::offline, p, 1);
  EXPECT_EQ(off.variants.size(), 5u);
  for (const auto& [k, v] : off.variants) {
    ASSERT_EQ(v.size(), kVariantsPerSection);
    EXPECT_EQ(v[0], *section_text(d, k));
  }
  EXPECT_EQ(expand_qa(off).size(), 16u);
  const auto on = augment_case(d, CaseRole::online, p, 1);
  EXPECT_EQ(on.variants.size(), 4u);
  EXPECT_FALSE(on.variants.contains(SectionKind::focus));
  EXPECT_EQ(expand_qa(on).size(), 12u);
}

TEST(Augment, IndexAlignedPairs) {
  BuiltinParaphraser p;
  const auto aug = augment_case(sample_case(), CaseRole::offline, p, 3);
  for (const auto& qa : expand_qa(aug)) {
    EXPECT_NE(qa.answer_kind, SectionKind::fact);
    EXPECT_EQ(qa.query_text, aug.variants.at(SectionKind::fact).at(qa.variant_index));
    EXPECT_EQ(qa.answer_text, aug.variants.at(qa.answer_kind).at(qa.variant_index));
  }
}

TEST(Augment, DeterministicInSeed) {
  BuiltinParaphraser p;
  const auto d = sample_case();
  EXPECT_EQ(expand_qa(augment_case(d, CaseRole::offline, p, 9)), expand_qa(augment_case(d, CaseRole::offline, p, 9)));
}

TEST(Augment, MissingFocusOnOffline) {
  BuiltinParaphraser p;
  auto d = sample_case();
  d.focus.reset();
  try {
    augment_case(d, CaseRole::offline, p, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::missing_section);
  }
  EXPECT_NO_THROW(augment_case(d, CaseRole::online, p, 1));
}

// Returns a fixed string, used to exercise the fallback path.
class ConstantRewriter final : public Rewriter {
 public:
  explicit ConstantRewriter(std::string s) : s_(std::move(s)) {}
  std::string rewrite(std::string_view, SectionKind, std::uint64_t) override {
    ++calls;
    return s_;
  }
  std::string name() const override { return "constant"; }
  int calls = 0;

 private:
  std::string s_;
};

TEST(RewriteSection, InvalidVariantsFallBackToOriginal) {
  ConstantRewriter bad("no numbers here");
  const auto out = rewrite_section("Li stole 3000 yuan.", SectionKind::fact, bad, 1);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& v : out) EXPECT_EQ(v, "Li stole 3000 yuan.");
  EXPECT_EQ(bad.calls, 9);  // three attempts per variant
}

TEST(QaFile, RoundTrip) {
  TempDir dir;
  BuiltinParaphraser p;
  const auto pairs = expand_qa(augment_case(sample_case(), CaseRole::offline, p, 2));
  save_qa_pairs(pairs, dir / "qa.jsonl");
  EXPECT_EQ(load_qa_pairs(dir / "qa.jsonl"), pairs);
}

TEST(EncodeQa, LayoutAndMask) {
  const QAPair qa{"d", "q text", "ans", SectionKind::judgment, 0};
  const auto s = encode_qa(qa, 96, true);
  ASSERT_EQ(s.inputs.size(), s.targets.size());
  ASSERT_EQ(s.inputs.size(), s.mask.size());
  EXPECT_EQ(s.inputs.front(), tokenizer::kBos);
  EXPECT_EQ(s.targets.back(), tokenizer::kEos);
  const std::string expected = "FACTS: q text" + std::string(1, '\0') + "JUDGMENT: ans";
  std::string decoded;
  for (std::size_t i = 1; i < s.inputs.size(); ++i)
    decoded += s.inputs[i] == tokenizer::kSep ? '\0' : static_cast<char>(s.inputs[i]);
  EXPECT_EQ(decoded, expected);
  // Only the positions predicting "ans" and EOS count.
  std::size_t counted = 0;
  std::string predicted;
  for (std::size_t i = 0; i < s.mask.size(); ++i) {
    if (!s.mask[i]) continue;
    ++counted;
    if (s.targets[i] != tokenizer::kEos) predicted += static_cast<char>(s.targets[i]);
  }
  EXPECT_EQ(counted, 4u);
  EXPECT_EQ(predicted, "ans");
  const auto all = encode_qa(qa, 96, false);
  EXPECT_EQ(std::count(all.mask.begin(), all.mask.end(), 1), static_cast<long>(all.mask.size()));
}

TEST(EncodeQa, TruncationKeepsQueryTailAndAnswerHead) {
  const QAPair qa{"d", std::string(200, 'q') + "END", std::string(200, 'a') + "TAIL", SectionKind::reason, 0};
  const auto s = encode_qa(qa, 96, true);
  EXPECT_EQ(s.inputs.size(), 96u);
  std::string text;
  for (Token t : s.inputs)
    if (!tokenizer::is_special(t)) text += static_cast<char>(t);
  EXPECT_NE(text.find("END"), std::string::npos);
  EXPECT_EQ(text.find("TAIL"), std::string::npos);
  EXPECT_GT(std::count(s.mask.begin(), s.mask.end(), 1), 0);
}

// Local chat-completions stand-in. The handler decides each response.
class FakeServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&, int call)>;
  explicit FakeServer(Handler h) : handler_(std::move(h)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      handler_(req, res, calls_++);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int calls() const { return calls_; }

 private:
  Handler handler_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> calls_{0};
};

std::string completion(const std::string& content) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

ChatRewriterConfig fast_config(const std::string& url) {
  ChatRewriterConfig c;
  c.base_url = url;
  c.model = "test-model";
  c.backoff_initial_sec = 0.01;
  c.requests_per_sec = 0;
  c.max_retries = 2;
  c.timeout_sec = 5;
  c.api_key_env = "PRAG_TEST_REWRITER_KEY";
  return c;
}

TEST(ChatRewriter, SendsRequestAndParsesReply) {
  ::setenv("PRAG_TEST_REWRITER_KEY", "sekret", 1);
  nlohmann::json seen;
  std::string auth;
  FakeServer server([&](const httplib::Request& req, httplib::Response& res, int) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(completion("  rewritten 3000  "), "application/json");
  });
  ChatCompletionsRewriter r(fast_config(server.url()));
  EXPECT_EQ(r.rewrite("original 3000", SectionKind::judgment, 5), "rewritten 3000");
  EXPECT_EQ(auth, "Bearer sekret");
  EXPECT_EQ(seen["model"], "test-model");
  EXPECT_EQ(seen["messages"][0]["role"], "system");
  EXPECT_EQ(seen["messages"][0]["content"], ChatCompletionsRewriter::instruction(SectionKind::judgment));
  EXPECT_EQ(seen["messages"][1]["content"], "original 3000");
  ::unsetenv("PRAG_TEST_REWRITER_KEY");
}

TEST(ChatRewriter, RetriesOnRateLimit) {
  FakeServer server([](const httplib::Request&, httplib::Response& res, int call) {
    if (call < 2) {
      res.status = 429;
      return;
    }
    res.set_content(completion("ok"), "application/json");
  });
  ChatCompletionsRewriter r(fast_config(server.url()));
  EXPECT_EQ(r.rewrite("x", SectionKind::fact, 1), "ok");
  EXPECT_EQ(server.calls(), 3);
}

TEST(ChatRewriter, GivesUpAfterRetries) {
  FakeServer server([](const httplib::Request&, httplib::Response& res, int) { res.status = 503; });
  ChatCompletionsRewriter r(fast_config(server.url()));
  try {
    r.rewrite("x", SectionKind::fact, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::rewriter_unavailable);
  }
  EXPECT_EQ(server.calls(), 3);
}

TEST(ChatRewriter, ClientErrorFailsImmediately) {
  FakeServer server([](const httplib::Request&, httplib::Response& res, int) { res.status = 400; });
  ChatCompletionsRewriter r(fast_config(server.url()));
  EXPECT_THROW(r.rewrite("x", SectionKind::fact, 1), Error);
  EXPECT_EQ(server.calls(), 1);
}

TEST(ChatRewriter, InvalidRewritesFallBack) {
  FakeServer server([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(completion("a rewrite that dropped the amount"), "application/json");
  });
  ChatCompletionsRewriter r(fast_config(server.url()));
  const auto out = rewrite_section("He paid 500 yuan.", SectionKind::fact, r, 1);
  for (const auto& v : out) EXPECT_EQ(v, "He paid 500 yuan.");
}

TEST(MakeRewriter, Kinds) {
  EXPECT_EQ(make_rewriter({{"kind", "builtin"}})->name(), "builtin");
  EXPECT_EQ(make_rewriter({{"kind", "chat"}, {"model", "m"}})->name(), "chat:m");
  EXPECT_THROW(make_rewriter({{"kind", "other"}}), Error);
}

}  // namespace
}  // namespace prag
