#include "prag/corpus.hpp"

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/hashing.hpp"
#include "prag/utf8.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>
#include <unordered_map>

namespace prag {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string_view trim(std::string_view s) {
  // ASCII whitespace plus the ideographic space and full-width colon left behind by markers.
  static const std::string_view kIdeoSpace = "　";
  static const std::string_view kFullColon = "：";
  for (;;) {
    if (!s.empty() && is_space(s.front())) {
      s.remove_prefix(1);
    } else if (s.starts_with(kIdeoSpace)) {
      s.remove_prefix(kIdeoSpace.size());
    } else if (s.starts_with(kFullColon)) {
      s.remove_prefix(kFullColon.size());
    } else {
      break;
    }
  }
  for (;;) {
    if (!s.empty() && is_space(s.back())) {
      s.remove_suffix(1);
    } else if (s.ends_with(kIdeoSpace)) {
      s.remove_suffix(kIdeoSpace.size());
    } else {
      break;
    }
  }
  return s;
}

int chinese_digit(char32_t cp) {
  switch (cp) {
    case U'零': case U'〇': return 0;
    case U'一': return 1;
    case U'二': case U'两': return 2;
    case U'三': return 3;
    case U'四': return 4;
    case U'五': return 5;
    case U'六': return 6;
    case U'七': return 7;
    case U'八': return 8;
    case U'九': return 9;
    default: return -1;
  }
}

std::uint64_t chinese_unit(char32_t cp) {
  switch (cp) {
    case U'十': return 10;
    case U'百': return 100;
    case U'千': return 1000;
    case U'万': return 10000;
    default: return 0;
  }
}

bool is_numeral_cp(char32_t cp) {
  return (cp >= U'0' && cp <= U'9') || chinese_digit(cp) >= 0 || chinese_unit(cp) != 0;
}

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace

std::optional<std::uint64_t> parse_numeral(std::string_view text) {
  const auto cps = utf8::decode(trim(text));
  if (cps.empty()) return std::nullopt;
  const bool all_ascii = std::all_of(cps.begin(), cps.end(), [](char32_t c) { return c >= U'0' && c <= U'9'; });
  if (all_ascii) {
    if (cps.size() > 18) return std::nullopt;
    std::uint64_t v = 0;
    for (char32_t c : cps) v = v * 10 + static_cast<std::uint64_t>(c - U'0');
    return v;
  }
  const bool has_unit = std::any_of(cps.begin(), cps.end(), [](char32_t c) { return chinese_unit(c) != 0; });
  if (!has_unit) {
    // Positional spelling such as 二六四.
    std::uint64_t v = 0;
    for (char32_t c : cps) {
      const int d = chinese_digit(c);
      if (d < 0) return std::nullopt;
      v = v * 10 + static_cast<std::uint64_t>(d);
    }
    return v;
  }
  std::uint64_t total = 0;
  std::uint64_t section = 0;
  std::uint64_t number = 0;
  for (char32_t c : cps) {
    if (const int d = chinese_digit(c); d >= 0) {
      number = static_cast<std::uint64_t>(d);
      continue;
    }
    const std::uint64_t unit = chinese_unit(c);
    if (unit == 0) return std::nullopt;
    if (unit == 10000) {
      section = (section + number) * unit;
      total += section;
      section = 0;
    } else {
      section += (number == 0 ? 1 : number) * unit;
    }
    number = 0;
  }
  return total + section + number;
}

std::string normalize_law_name(std::string_view name) {
  std::string s = lower_ascii(trim(name));
  if (s.starts_with("the ")) s.erase(0, 4);
  // Strip 《》 and whitespace.
  std::string out;
  for (char32_t cp : utf8::decode(s)) {
    if (cp == U'《' || cp == U'》' || cp == U' ' || cp == U'\t' || cp == 0x3000) continue;
    utf8::append(out, cp);
  }
  static const std::string_view kPrc = "中华人民共和国";
  if (std::string_view(out).starts_with(kPrc)) out.erase(0, kPrc.size());
  static const std::map<std::string, std::string, std::less<>> kAliases = {
      {"刑法", "criminallaw"},
      {"民法典", "civilcode"},
      {"行政处罚法", "administrativepenaltylaw"},
      {"行政诉讼法", "administrativelitigationlaw"},
      {"刑事诉讼法", "criminalprocedurelaw"},
      {"民事诉讼法", "civilprocedurelaw"},
  };
  if (auto it = kAliases.find(out); it != kAliases.end()) return it->second;
  return out;
}

std::string StatuteRef::canonical() const {
  return normalize_law_name(law_name) + "#" + std::to_string(article_number);
}

std::vector<StatuteRef> find_citations(std::string_view text) {
  struct Hit {
    std::size_t pos;
    StatuteRef ref;
  };
  std::vector<Hit> hits;

  // English: "Article 264 of the Criminal Law".
  static const std::regex kEnglish(
      R"(Article\s+(\d+)\s+of\s+(?:the\s+)?((?:[A-Z][A-Za-z]*\s+)*?(?:Law|Code|Act|Regulations?)))");
  const std::string owned(text);
  for (auto it = std::sregex_iterator(owned.begin(), owned.end(), kEnglish); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const auto n = parse_numeral(m[1].str());
    if (!n || *n == 0 || *n > 0xFFFFFFFFull) continue;
    hits.push_back({static_cast<std::size_t>(m.position(0)),
                    StatuteRef{m[2].str(), static_cast<std::uint32_t>(*n), m[0].str()}});
  }

  // Chinese: optional 《law》 immediately followed by 第N条.
  static const std::string_view kDi = "第";
  static const std::string_view kTiao = "条";
  std::size_t search = 0;
  while ((search = text.find(kDi, search)) != std::string_view::npos) {
    std::size_t p = search + kDi.size();
    std::size_t num_end = p;
    while (num_end < text.size()) {
      std::size_t q = num_end;
      const auto cps = utf8::decode(text.substr(q, std::min<std::size_t>(4, text.size() - q)));
      if (cps.empty() || !is_numeral_cp(cps.front())) break;
      std::string one;
      utf8::append(one, cps.front());
      num_end += one.size();
    }
    if (num_end == p || text.substr(num_end, kTiao.size()) != kTiao) {
      search = p;
      continue;
    }
    const auto n = parse_numeral(text.substr(p, num_end - p));
    const std::size_t end = num_end + kTiao.size();
    if (!n || *n == 0 || *n > 0xFFFFFFFFull) {
      search = end;
      continue;
    }
    std::size_t start = search;
    std::string law;
    static const std::string_view kClose = "》";
    static const std::string_view kOpen = "《";
    if (search >= kClose.size() && text.substr(search - kClose.size(), kClose.size()) == kClose) {
      const std::size_t close = search - kClose.size();
      const std::size_t open = text.rfind(kOpen, close);
      if (open != std::string_view::npos) {
        law = std::string(text.substr(open + kOpen.size(), close - open - kOpen.size()));
        start = open;
      }
    }
    hits.push_back({start, StatuteRef{law, static_cast<std::uint32_t>(*n), std::string(text.substr(start, end - start))}});
    search = end;
  }

  std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.pos < b.pos; });
  std::vector<StatuteRef> out;
  out.reserve(hits.size());
  for (auto& h : hits) out.push_back(std::move(h.ref));
  return out;
}

StatuteSet parse_citations(std::string_view text) {
  StatuteSet out;
  for (auto& ref : find_citations(text)) out.insert(std::move(ref));
  return out;
}

std::string_view to_string(Domain d) {
  switch (d) {
    case Domain::criminal: return "criminal";
    case Domain::civil: return "civil";
    case Domain::administrative: return "administrative";
  }
  return "criminal";
}

Domain parse_domain(std::string_view s) {
  const std::string v = lower_ascii(trim(s));
  if (v == "criminal" || v == "刑事") return Domain::criminal;
  if (v == "civil" || v == "民事") return Domain::civil;
  if (v == "administrative" || v == "admin" || v == "行政") return Domain::administrative;
  throw Error(ErrorCode::format_error, "unknown domain '" + std::string(s) + "'");
}

std::string_view to_string(StoreKind k) {
  switch (k) {
    case StoreKind::offline: return "offline";
    case StoreKind::online: return "online";
    case StoreKind::test: return "test";
  }
  return "online";
}

StoreKind parse_store_kind(std::string_view s) {
  if (s == "offline") return StoreKind::offline;
  if (s == "online") return StoreKind::online;
  if (s == "test") return StoreKind::test;
  throw Error(ErrorCode::format_error, "unknown store kind '" + std::string(s) + "'");
}

std::string CaseDocument::articles_text() const {
  std::string out;
  for (const auto& a : articles) {
    if (!out.empty()) out += "; ";
    out += a.raw_citation;
  }
  return out;
}

bool operator==(const CaseDocument& a, const CaseDocument& b) {
  if (a.id != b.id || a.domain != b.domain || a.cause_of_action != b.cause_of_action || a.fact != b.fact ||
      a.focus != b.focus || a.reason != b.reason || a.judgment != b.judgment || a.raw_text != b.raw_text ||
      a.char_count != b.char_count || a.published_date != b.published_date || a.articles.size() != b.articles.size())
    return false;
  return std::equal(a.articles.begin(), a.articles.end(), b.articles.begin(), [](const StatuteRef& x, const StatuteRef& y) {
    return x.law_name == y.law_name && x.article_number == y.article_number && x.raw_citation == y.raw_citation;
  });
}

const CaseDocument* CorpusStore::find(std::string_view id) const {
  for (const auto& d : documents) {
    if (d.id == id) return &d;
  }
  return nullptr;
}

const CaseDocument& CorpusStore::at(std::string_view id) const {
  if (const auto* d = find(id)) return *d;
  throw Error(ErrorCode::unknown_doc, "document '" + std::string(id) + "' not in store");
}

SegmentationRules SegmentationRules::defaults() {
  SegmentationRules r;
  r.sections = {
      {"fact", {"FACTS:", "经审理查明", "基本案情"}},
      {"focus", {"FOCUS:", "争议焦点"}},
      {"reason", {"REASONING:", "本院认为"}},
      {"judgment", {"JUDGMENT:", "判决如下"}},
      {"articles", {"ARTICLES:", "相关法条"}},
  };
  return r;
}

SegmentationRules SegmentationRules::from_json(const nlohmann::json& j) {
  SegmentationRules r;
  try {
    for (const auto& s : j.at("sections")) {
      SectionRule rule{s.at("section").get<std::string>(), s.at("triggers").get<std::vector<std::string>>()};
      static const std::set<std::string> kKnown = {"fact", "focus", "reason", "judgment", "articles"};
      if (!kKnown.contains(rule.section))
        throw Error(ErrorCode::config_error, "unknown section '" + rule.section + "' in rule table");
      r.sections.push_back(std::move(rule));
    }
    if (j.contains("headers")) {
      const auto& h = j.at("headers");
      r.id_prefix = h.value("id", r.id_prefix);
      r.domain_prefix = h.value("domain", r.domain_prefix);
      r.cause_prefix = h.value("cause_of_action", r.cause_prefix);
      r.date_prefix = h.value("published_date", r.date_prefix);
    }
    r.document_separator = j.value("document_separator", r.document_separator);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("segmentation rules: ") + e.what());
  }
  return r;
}

SegmentationRules SegmentationRules::load(const std::filesystem::path& path) {
  const std::string text = binary::read_file(path);
  try {
    return from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::config_error, path.string() + ": " + e.what());
  }
}

nlohmann::json SegmentationRules::to_json() const {
  nlohmann::json j;
  j["sections"] = nlohmann::json::array();
  for (const auto& s : sections) j["sections"].push_back({{"section", s.section}, {"triggers", s.triggers}});
  j["headers"] = {{"id", id_prefix}, {"domain", domain_prefix}, {"cause_of_action", cause_prefix}, {"published_date", date_prefix}};
  j["document_separator"] = document_separator;
  return j;
}

namespace {

bool valid_date(std::string_view d) {
  static const std::regex kDate(R"(\d{4}-\d{2}-\d{2})");
  if (!std::regex_match(d.begin(), d.end(), kDate)) return false;
  const int month = std::stoi(std::string(d.substr(5, 2)));
  const int day = std::stoi(std::string(d.substr(8, 2)));
  return month >= 1 && month <= 12 && day >= 1 && day <= 31;
}

}  // namespace

CaseDocument parse_judgment(std::string_view raw_text, const SegmentationRules& rules) {
  if (trim(raw_text).empty()) throw Error(ErrorCode::empty_input, "raw judgment text is empty");

  struct Marker {
    std::size_t pos;
    std::size_t end;
    std::string section;
  };
  std::vector<Marker> markers;
  for (const auto& rule : rules.sections) {
    std::optional<Marker> best;
    for (const auto& trig : rule.triggers) {
      if (trig.empty()) continue;
      const std::size_t p = raw_text.find(trig);
      if (p == std::string_view::npos) continue;
      if (!best || p < best->pos || (p == best->pos && p + trig.size() > best->end))
        best = Marker{p, p + trig.size(), rule.section};
    }
    if (best) markers.push_back(*best);
  }
  std::sort(markers.begin(), markers.end(), [](const Marker& a, const Marker& b) { return a.pos < b.pos; });

  std::map<std::string, std::string, std::less<>> sections;
  for (std::size_t i = 0; i < markers.size(); ++i) {
    const std::size_t stop = i + 1 < markers.size() ? markers[i + 1].pos : raw_text.size();
    const std::size_t begin = std::min(markers[i].end, stop);
    sections.try_emplace(markers[i].section, trim(raw_text.substr(begin, stop - begin)));
  }

  CaseDocument doc;
  doc.raw_text = std::string(raw_text);

  // Header lines precede the first marker.
  const std::string_view header = raw_text.substr(0, markers.empty() ? raw_text.size() : markers.front().pos);
  std::istringstream lines{std::string(header)};
  std::string line;
  while (std::getline(lines, line)) {
    const std::string_view l = trim(line);
    auto value_of = [&](const std::string& prefix) -> std::optional<std::string> {
      if (prefix.empty() || !l.starts_with(prefix)) return std::nullopt;
      return std::string(trim(l.substr(prefix.size())));
    };
    if (auto v = value_of(rules.id_prefix)) {
      doc.id = *v;
    } else if (auto v2 = value_of(rules.domain_prefix)) {
      doc.domain = parse_domain(*v2);
    } else if (auto v3 = value_of(rules.cause_prefix)) {
      doc.cause_of_action = *v3;
    } else if (auto v4 = value_of(rules.date_prefix)) {
      if (!valid_date(*v4)) throw Error(ErrorCode::format_error, "bad date '" + *v4 + "' (expected yyyy-mm-dd)");
      doc.published_date = *v4;
    }
  }
  if (doc.id.empty()) doc.id = "doc-" + hex64(fnv1a64(raw_text));

  auto required = [&](const char* name) -> std::string {
    auto it = sections.find(name);
    if (it == sections.end() || it->second.empty())
      throw Error(ErrorCode::missing_section, std::string("section '") + name + "' not found in " + doc.id);
    return it->second;
  };
  doc.fact = required("fact");
  doc.reason = required("reason");
  doc.judgment = required("judgment");
  if (auto it = sections.find("focus"); it != sections.end() && !it->second.empty()) doc.focus = it->second;
  if (auto it = sections.find("articles"); it != sections.end()) doc.articles = parse_citations(it->second);
  doc.char_count = utf8::count_scalars(doc.fact);
  return doc;
}

CorpusStore filter_corpus(const CorpusStore& docs, std::size_t min_chars, std::size_t max_per_cause) {
  CorpusStore out;
  out.kind = docs.kind;
  std::unordered_map<std::string, std::size_t> per_cause;
  for (const auto& d : docs.documents) {
    if (d.char_count < min_chars) continue;
    auto& n = per_cause[d.cause_of_action];
    if (n >= max_per_cause) continue;
    ++n;
    out.documents.push_back(d);
  }
  return out;
}

PatternTable PatternTable::default_prosecution() {
  return PatternTable{{
      R"(The prosecution (?:recommended|requested|proposed|suggested)[^.]*\.\s*)",
      R"(公诉机关建议.*?。)",
      R"(公诉机关量刑建议.*?。)",
  }};
}

PatternTable PatternTable::from_json(const nlohmann::json& j) {
  try {
    PatternTable t;
    t.patterns = j.at("patterns").get<std::vector<std::string>>();
    for (const auto& p : t.patterns) {
      try {
        std::regex re(p);
      } catch (const std::regex_error& e) {
        throw Error(ErrorCode::config_error, "bad pattern '" + p + "': " + e.what());
      }
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("pattern table: ") + e.what());
  }
}

PatternTable PatternTable::load(const std::filesystem::path& path) {
  const std::string text = binary::read_file(path);
  try {
    return from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::config_error, path.string() + ": " + e.what());
  }
}

std::string strip_prosecution_claims(std::string_view fact, const PatternTable& patterns) {
  std::string out(fact);
  for (const auto& p : patterns.patterns) {
    const std::regex re(p);
    out = std::regex_replace(out, re, "");
  }
  return out;
}

nlohmann::json to_json(const CaseDocument& doc) {
  nlohmann::json arts = nlohmann::json::array();
  for (const auto& a : doc.articles)
    arts.push_back({{"law_name", a.law_name}, {"article_number", a.article_number}, {"raw_citation", a.raw_citation}});
  return {
      {"id", doc.id},
      {"domain", std::string(to_string(doc.domain))},
      {"cause_of_action", doc.cause_of_action},
      {"fact", doc.fact},
      {"focus", doc.focus ? nlohmann::json(*doc.focus) : nlohmann::json(nullptr)},
      {"reason", doc.reason},
      {"judgment", doc.judgment},
      {"articles", arts},
      {"raw_text", doc.raw_text},
      {"char_count", doc.char_count},
      {"published_date", doc.published_date},
  };
}

CaseDocument case_from_json(const nlohmann::json& j, std::size_t line) {
  try {
    CaseDocument d;
    d.id = j.at("id").get<std::string>();
    d.domain = parse_domain(j.at("domain").get<std::string>());
    d.cause_of_action = j.at("cause_of_action").get<std::string>();
    d.fact = j.at("fact").get<std::string>();
    if (!j.at("focus").is_null()) d.focus = j.at("focus").get<std::string>();
    d.reason = j.at("reason").get<std::string>();
    d.judgment = j.at("judgment").get<std::string>();
    for (const auto& a : j.at("articles")) {
      StatuteRef ref{a.at("law_name").get<std::string>(), a.at("article_number").get<std::uint32_t>(),
                     a.at("raw_citation").get<std::string>()};
      if (ref.article_number == 0) throw Error(ErrorCode::format_error, "article_number must be >= 1");
      d.articles.insert(std::move(ref));
    }
    d.raw_text = j.at("raw_text").get<std::string>();
    d.char_count = j.at("char_count").get<std::size_t>();
    d.published_date = j.at("published_date").get<std::string>();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("", line, e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError("", line, e.what());
  }
}

void save_store(const CorpusStore& store, const std::filesystem::path& path) {
  std::string out;
  for (const auto& d : store.documents) {
    out += to_json(d).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    out += '\n';
  }
  binary::write_file(path, out);
}

CorpusStore load_store(const std::filesystem::path& path, StoreKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  CorpusStore store;
  store.kind = kind;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string(), lineno, e.what());
    }
    CaseDocument d;
    try {
      d = case_from_json(j, lineno);
    } catch (const FormatError& e) {
      throw FormatError(path.string(), lineno, e.what());
    }
    if (!ids.insert(d.id).second) throw FormatError(path.string(), lineno, "duplicate id '" + d.id + "'");
    store.documents.push_back(std::move(d));
  }
  return store;
}

std::vector<CaseDocument> ingest_raw_file(const std::filesystem::path& path, const SegmentationRules& rules) {
  const std::string text = binary::read_file(path);
  std::vector<CaseDocument> docs;
  std::istringstream in(text);
  std::string line;
  std::string block;
  std::size_t lineno = 0;
  std::size_t block_start = 1;
  auto flush = [&] {
    if (!trim(block).empty()) {
      try {
        docs.push_back(parse_judgment(block, rules));
      } catch (const Error& e) {
        throw FormatError(path.string(), block_start, e.what());
      }
    }
    block.clear();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line) == rules.document_separator) {
      flush();
      block_start = lineno + 1;
      continue;
    }
    if (block.empty() && trim(line).empty()) {
      block_start = lineno + 1;
      continue;
    }
    block += line;
    block += '\n';
  }
  flush();
  return docs;
}

}  // namespace prag
