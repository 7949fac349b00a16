#include "prag/corpus.hpp"
#include "prag/error.hpp"
#include "prag/random.hpp"
#include "prag/synthetic.hpp"
#include "prag/utf8.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

namespace prag {
namespace {

using testing::TempDir;

const char* kCriminal =
    "ID: c-1\n"
    "DOMAIN: criminal\n"
    "CAUSE: theft\n"
    "DATE: 2021-03-04\n"
    "FACTS: On 2021-01-02 the defendant Li took a phone worth 3000 yuan from a shop.\n"
    "FOCUS: Whether the taking was secret.\n"
    "REASONING: The court holds that Li took property secretly.\n"
    "JUDGMENT: The defendant Li is guilty of theft.\n"
    "ARTICLES: Article 264 of the Criminal Law; Article 67 of the Criminal Law\n";

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::config_error;
}

TEST(Numeral, ArabicAndChinese) {
  EXPECT_EQ(parse_numeral("264"), 264u);
  EXPECT_EQ(parse_numeral("二百六十四"), 264u);
  EXPECT_EQ(parse_numeral("十"), 10u);
  EXPECT_EQ(parse_numeral("十二"), 12u);
  EXPECT_EQ(parse_numeral("一百零三"), 103u);
  EXPECT_EQ(parse_numeral("两千"), 2000u);
  EXPECT_EQ(parse_numeral("一万二千"), 12000u);
  EXPECT_FALSE(parse_numeral("").has_value());
  EXPECT_FALSE(parse_numeral("abc").has_value());
}

TEST(Citations, EnglishAndChineseSpellingsAgree) {
  const auto en = parse_citations("Under Article 264 of the Criminal Law the court");
  const auto zh = parse_citations("依照《中华人民共和国刑法》第二百六十四条");
  ASSERT_EQ(en.size(), 1u);
  ASSERT_EQ(zh.size(), 1u);
  EXPECT_EQ(*en.begin(), *zh.begin());
  EXPECT_EQ(en.begin()->article_number, 264u);
}

TEST(Citations, OrderAndDuplicates) {
  const auto refs = find_citations(
      "Article 67 of the Criminal Law, then Article 264 of the Criminal Law, again Article 67 of the Criminal Law.");
  ASSERT_EQ(refs.size(), 3u);
  EXPECT_EQ(refs[0].article_number, 67u);
  EXPECT_EQ(refs[1].article_number, 264u);
  EXPECT_EQ(parse_citations("Article 67 of the Criminal Law and Article 67 of the Criminal Law").size(), 1u);
}

TEST(Citations, DifferentLawsDiffer) {
  const auto s = parse_citations("Article 667 of the Civil Code; Article 667 of the Criminal Law");
  EXPECT_EQ(s.size(), 2u);
}

TEST(Citations, ArticleZeroIgnored) {
  EXPECT_TRUE(parse_citations("Article 0 of the Criminal Law").empty());
}

TEST(ParseJudgment, Sections) {
  const auto d = parse_judgment(kCriminal, SegmentationRules::defaults());
  EXPECT_EQ(d.id, "c-1");
  EXPECT_EQ(d.domain, Domain::criminal);
  EXPECT_EQ(d.cause_of_action, "theft");
  EXPECT_EQ(d.published_date, "2021-03-04");
  EXPECT_EQ(d.fact, "On 2021-01-02 the defendant Li took a phone worth 3000 yuan from a shop.");
  ASSERT_TRUE(d.focus.has_value());
  EXPECT_EQ(*d.focus, "Whether the taking was secret.");
  EXPECT_EQ(d.reason, "The court holds that Li took property secretly.");
  EXPECT_EQ(d.judgment, "The defendant Li is guilty of theft.");
  EXPECT_EQ(d.articles.size(), 2u);
  EXPECT_EQ(d.raw_text, kCriminal);
  EXPECT_EQ(d.char_count, utf8::count_scalars(d.fact));
}

TEST(ParseJudgment, ChineseMarkers) {
  const std::string raw =
      "ID: z-1\nDOMAIN: criminal\nCAUSE: 盗窃\nDATE: 2020-05-06\n"
      "经审理查明，被告人张某窃取手机一部。本院认为，被告人构成盗窃罪。判决如下：被告人张某犯盗窃罪。"
      "相关法条：《刑法》第二百六十四条";
  const auto d = parse_judgment(raw, SegmentationRules::defaults());
  EXPECT_EQ(d.fact, "，被告人张某窃取手机一部。");
  EXPECT_EQ(d.reason, "，被告人构成盗窃罪。");
  EXPECT_EQ(d.articles.size(), 1u);
  EXPECT_EQ(d.articles.begin()->article_number, 264u);
  EXPECT_FALSE(d.focus.has_value());
}

TEST(ParseJudgment, Errors) {
  const auto rules = SegmentationRules::defaults();
  EXPECT_EQ(code_of([&] { parse_judgment("  \n ", rules); }), ErrorCode::empty_input);
  EXPECT_EQ(code_of([&] { parse_judgment("FACTS: x\nJUDGMENT: y\n", rules); }), ErrorCode::missing_section);
  EXPECT_EQ(code_of([&] { parse_judgment("REASONING: r\nJUDGMENT: y\n", rules); }), ErrorCode::missing_section);
  EXPECT_EQ(code_of([&] { parse_judgment("DATE: 2021-13-01\nFACTS: f\nREASONING: r\nJUDGMENT: j\n", rules); }),
            ErrorCode::format_error);
}

TEST(ParseJudgment, MissingIdGetsContentHash) {
  const std::string raw = "FACTS: f\nREASONING: r\nJUDGMENT: j\n";
  const auto a = parse_judgment(raw, SegmentationRules::defaults());
  const auto b = parse_judgment(raw, SegmentationRules::defaults());
  EXPECT_TRUE(a.id.starts_with("doc-"));
  EXPECT_EQ(a.id, b.id);
}

TEST(ParseJudgment, CustomRuleTable) {
  const auto rules = SegmentationRules::from_json(nlohmann::json::parse(R"({
    "sections": [
      {"section": "fact", "triggers": ["Background:"]},
      {"section": "reason", "triggers": ["Analysis:"]},
      {"section": "judgment", "triggers": ["Order:"]}
    ],
    "headers": {"id": "Case:"}
  })"));
  const auto d = parse_judgment("Case: k-9\nBackground: b\nAnalysis: a\nOrder: o\n", rules);
  EXPECT_EQ(d.id, "k-9");
  EXPECT_EQ(d.fact, "b");
  EXPECT_EQ(d.reason, "a");
  EXPECT_EQ(d.judgment, "o");
  EXPECT_EQ(code_of([] { SegmentationRules::from_json(nlohmann::json::parse(R"({"sections":[{"section":"x","triggers":[]}]})")); }),
            ErrorCode::config_error);
}

TEST(ParseJudgment, RuleTableRoundTrip) {
  const auto r = SegmentationRules::defaults();
  EXPECT_EQ(SegmentationRules::from_json(r.to_json()).to_json(), r.to_json());
}

TEST(Prosecution, StripsOnlyRecommendations) {
  const auto table = PatternTable::default_prosecution();
  struct Case {
    std::string in;
    std::string out;
  };
  const std::vector<Case> cases = {
      {"Li stole a bike. The prosecution recommended 8 months of imprisonment.", "Li stole a bike. "},
      {"The prosecution requested a fine of 2000 yuan. Li confessed.", "Li confessed."},
      {"Li stole a bike. Li confessed.", "Li stole a bike. Li confessed."},
      {"被告人盗窃。公诉机关建议判处有期徒刑六个月。被告人认罪。", "被告人盗窃。被告人认罪。"},
      {"公诉机关量刑建议判处拘役三个月。", ""},
  };
  for (const auto& c : cases) EXPECT_EQ(strip_prosecution_claims(c.in, table), c.out) << c.in;
}

TEST(Prosecution, BadPatternIsConfigError) {
  EXPECT_EQ(code_of([] { PatternTable::from_json(nlohmann::json::parse(R"({"patterns":["(unclosed"]})")); }),
            ErrorCode::config_error);
}

CaseDocument doc(const std::string& id, const std::string& cause, std::size_t chars) {
  CaseDocument d;
  d.id = id;
  d.cause_of_action = cause;
  d.fact = std::string(chars, 'x');
  d.reason = "r";
  d.judgment = "j";
  d.char_count = chars;
  d.raw_text = d.fact;
  d.published_date = "2020-01-01";
  return d;
}

TEST(Filter, PropertiesOnRandomStores) {
  Rng rng(3);
  const std::vector<std::string> causes = {"a", "b", "c"};
  for (int trial = 0; trial < 50; ++trial) {
    CorpusStore s;
    const std::size_t n = rng.below(61);
    for (std::size_t i = 0; i < n; ++i)
      s.documents.push_back(doc("d" + std::to_string(i), causes[rng.below(3)], 50 + rng.below(251)));
    const std::size_t min_chars = rng.below(301);
    const std::size_t cap = 1 + rng.below(12);
    const auto f = filter_corpus(s, min_chars, cap);
    std::map<std::string, std::size_t> per;
    std::size_t pos = 0;
    for (const auto& d : f.documents) {
      EXPECT_GE(d.char_count, min_chars);
      EXPECT_LE(++per[d.cause_of_action], cap);
      // Stable: kept documents appear in input order.
      while (pos < s.documents.size() && s.documents[pos].id != d.id) ++pos;
      ASSERT_LT(pos, s.documents.size());
    }
    EXPECT_EQ(filter_corpus(f, min_chars, cap), f);
  }
}

TEST(Filter, KeepsEarliestPerCause) {
  CorpusStore s;
  for (int i = 0; i < 5; ++i) s.documents.push_back(doc("t" + std::to_string(i), "theft", 200));
  const auto f = filter_corpus(s, 150, 2);
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f.documents[0].id, "t0");
  EXPECT_EQ(f.documents[1].id, "t1");
}

TEST(Store, RoundTripSynthetic) {
  TempDir dir;
  SyntheticOptions o;
  o.offline = 6;
  const auto docs = testing::parse_raw(make_synthetic_corpus(o).offline_raw);
  ASSERT_EQ(docs.size(), 6u);
  const auto store = testing::store_of(docs, StoreKind::offline);
  save_store(store, dir / "s.jsonl");
  EXPECT_EQ(load_store(dir / "s.jsonl", StoreKind::offline), store);
}

TEST(Store, UnicodeRoundTrip) {
  TempDir dir;
  auto d = doc("u1", "盗窃", 3);
  d.fact = "被告人\"张某\"\n窃取";
  d.focus = std::string("焦点");
  d.articles.insert(StatuteRef{"刑法", 264, "《刑法》第二百六十四条"});
  const auto store = testing::store_of({d});
  save_store(store, dir / "s.jsonl");
  EXPECT_EQ(load_store(dir / "s.jsonl"), store);
}

TEST(Store, LoadErrorsCarryLineNumbers) {
  TempDir dir;
  const auto good = to_json(doc("a", "x", 1)).dump();
  {
    std::ofstream(dir / "bad.jsonl") << good << "\n{not json\n";
  }
  try {
    load_store(dir / "bad.jsonl");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  auto missing = to_json(doc("b", "x", 1));
  missing.erase("reason");
  {
    std::ofstream(dir / "missing.jsonl") << good << "\n\n" << missing.dump() << "\n";
  }
  try {
    load_store(dir / "missing.jsonl");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  {
    std::ofstream(dir / "dup.jsonl") << good << "\n" << good << "\n";
  }
  EXPECT_EQ(code_of([&] { load_store(dir / "dup.jsonl"); }), ErrorCode::format_error);
  EXPECT_EQ(code_of([&] { load_store(dir / "absent.jsonl"); }), ErrorCode::io_error);
}

TEST(Store, UnknownDoc) {
  const auto s = testing::store_of({doc("a", "x", 1)});
  EXPECT_NE(s.find("a"), nullptr);
  EXPECT_EQ(s.find("b"), nullptr);
  EXPECT_EQ(code_of([&] { s.at("b"); }), ErrorCode::unknown_doc);
}

TEST(Ingest, BadBlockReportsFirstLine) {
  TempDir dir;
  const std::string raw = std::string(kCriminal) + "=====\n\nID: c-2\nFACTS: only facts\n";
  binary::write_file(dir / "raw.txt", raw);
  try {
    ingest_raw_file(dir / "raw.txt", SegmentationRules::defaults());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 12u);
    EXPECT_NE(std::string(e.what()).find("raw.txt"), std::string::npos);
  }
}

TEST(Synthetic, DeterministicAndParseable) {
  SyntheticOptions o;
  o.online = 30;
  const auto a = make_synthetic_corpus(o);
  const auto b = make_synthetic_corpus(o);
  EXPECT_EQ(a.online_raw, b.online_raw);
  const auto docs = testing::parse_raw(a.online_raw);
  ASSERT_EQ(docs.size(), 30u);
  for (const auto& d : docs) EXPECT_FALSE(d.articles.empty()) << d.id;
  o.seed = 8;
  EXPECT_NE(make_synthetic_corpus(o).online_raw, a.online_raw);
}

}  // namespace
}  // namespace prag
