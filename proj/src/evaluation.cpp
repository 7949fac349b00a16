#include "prag/evaluation.hpp"

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/retrieval.hpp"
#include "prag/utf8.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace prag {

double numeric_diff_metric(double reference, double hypothesis, double epsilon) {
  const double x = std::abs(reference - hypothesis) / (std::abs(reference) + std::abs(hypothesis) + epsilon);
  return 1.0 - 1.0 / (1.0 + std::exp(-x));
}

Prf set_prf(const StatuteSet& predicted, const StatuteSet& gold) {
  if (gold.empty()) throw Error(ErrorCode::empty_gold, "gold statute set is empty");
  std::size_t hit = 0;
  for (const auto& p : predicted) hit += gold.contains(p) ? 1 : 0;
  Prf r;
  r.precision = predicted.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(predicted.size());
  r.recall = static_cast<double>(hit) / static_cast<double>(gold.size());
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

std::string normalize_charge(std::string_view charge) {
  static const std::set<char32_t> kCjkPunct = {U'。', U'，', U'、', U'；', U'：', U'“', U'”', U'‘', U'’', U'《', U'》',
                                               U'（', U'）', U'【', U'】', U'！', U'？', U'　'};
  std::string out;
  for (char32_t cp : utf8::decode(charge)) {
    if (cp < 0x80) {
      const auto c = static_cast<unsigned char>(cp);
      if (std::isspace(c) || std::ispunct(c)) continue;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (!kCjkPunct.contains(cp)) {
      utf8::append(out, cp);
    }
  }
  return out;
}

int charge_accuracy(const std::optional<std::string>& predicted, const std::optional<std::string>& gold) {
  if (!gold || normalize_charge(*gold).empty()) throw Error(ErrorCode::missing_gold, "gold charge is missing");
  if (!predicted) return 0;
  return normalize_charge(*predicted) == normalize_charge(*gold) ? 1 : 0;
}

// ---------------------------------------------------------------- extraction

namespace {

const std::set<std::string>& known_fields() {
  static const std::set<std::string> f = {"charge", "imprisonment_months", "probation_months", "fine_amount"};
  return f;
}

std::regex compile(const std::string& pattern, const std::string& where) {
  try {
    return std::regex(pattern, std::regex::ECMAScript | std::regex::icase);
  } catch (const std::regex_error& e) {
    throw Error(ErrorCode::config_error, where + ": invalid pattern '" + pattern + "': " + e.what());
  }
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::optional<double> parse_amount(std::string_view raw) {
  std::string s;
  for (char c : trim(raw)) {
    if (c != ',') s.push_back(c);
  }
  if (s.empty()) return std::nullopt;
  const bool ascii = std::all_of(s.begin(), s.end(), [](char c) { return (c >= '0' && c <= '9') || c == '.'; });
  if (ascii) {
    if (std::count(s.begin(), s.end(), '.') > 1 || s.front() == '.' || s.back() == '.') return std::nullopt;
    return std::strtod(s.c_str(), nullptr);
  }
  if (const auto n = parse_numeral(s)) return static_cast<double>(*n);
  return std::nullopt;
}

}  // namespace

FieldPatternTable FieldPatternTable::defaults() {
  nlohmann::json j = {
      {"units",
       {{"month", 1},  {"months", 1},     {"year", 12}, {"years", 12}, {"个月", 1}, {"月", 1},
        {"年", 12},    {"yuan", 1},       {"rmb", 1},   {"元", 1},     {"万元", 10000},
        {"day", 1.0 / 30.0}, {"days", 1.0 / 30.0}}},
      {"rules",
       nlohmann::json::array({
           {{"field", "charge"}, {"pattern", R"(guilty of (?:the crime of )?([a-z][a-z ]*?)(?=\s+and\b|\s*[,.;]|$))"}},
           {{"field", "charge"}, {"pattern", R"(convicted of (?:the crime of )?([a-z][a-z ]*?)(?=\s+and\b|\s*[,.;]|$))"}},
           {{"field", "charge"}, {"pattern", "犯(.+?)罪"}},
           {{"field", "imprisonment_months"},
            {"pattern", R"((\d[\d,]*(?:\.\d+)?)\s*(months?|years?)\s+of\s+(?:fixed-term\s+)?imprisonment)"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
           {{"field", "imprisonment_months"},
            {"pattern", R"(imprisonment\s+(?:of|for)\s+(\d[\d,]*(?:\.\d+)?)\s*(months?|years?))"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
           {{"field", "imprisonment_months"},
            {"pattern", "有期徒刑(.+?)年(.+?)个月"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit", "年"}}, {{"value_group", 2}, {"unit", "个月"}}})}},
           {{"field", "imprisonment_months"},
            {"pattern", "有期徒刑(.+?)(年|个月)"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
           {{"field", "imprisonment_months"},
            {"pattern", "拘役(.+?)(个月|月)"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
           {{"field", "probation_months"},
            {"pattern", R"((\d[\d,]*(?:\.\d+)?)\s*(months?|years?)\s+of\s+probation)"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
           {{"field", "probation_months"},
            {"pattern", R"(probation\s+(?:of|for)\s+(\d[\d,]*(?:\.\d+)?)\s*(months?|years?))"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
           {{"field", "probation_months"},
            {"pattern", "缓刑(.+?)(年|个月)"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
           {{"field", "fine_amount"},
            {"pattern", R"(fine\s+of\s+(?:rmb\s*)?(\d[\d,]*(?:\.\d+)?)\s*(yuan|rmb)?)"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})},
            {"default_unit", "yuan"}},
           {{"field", "fine_amount"},
            {"pattern", "罚金(?:人民币)?(.+?)(万元|元)"},
            {"parts", nlohmann::json::array({{{"value_group", 1}, {"unit_group", 2}}})}},
       })},
      {"outcomes",
       nlohmann::json::array({
           {{"pattern", R"(\bdismiss)"}, {"token", "dismissed"}},
           {{"pattern", "驳回"}, {"token", "dismissed"}},
           {{"pattern", R"(\buph[eo]ld)"}, {"token", "upheld"}},
           {{"pattern", "维持"}, {"token", "upheld"}},
           {{"pattern", R"(\brevok)"}, {"token", "revoked"}},
           {{"pattern", "撤销"}, {"token", "revoked"}},
           {{"pattern", R"(\bcompensat)"}, {"token", "compensation"}},
           {{"pattern", "赔偿"}, {"token", "compensation"}},
       })},
  };
  return from_json(j);
}

FieldPatternTable FieldPatternTable::from_json(const nlohmann::json& j) {
  FieldPatternTable t;
  try {
    if (j.contains("units")) {
      for (const auto& [k, v] : j.at("units").items()) t.units[k] = v.get<double>();
    }
    for (const auto& r : j.value("rules", nlohmann::json::array())) {
      Rule rule;
      rule.field = r.at("field").get<std::string>();
      if (!known_fields().contains(rule.field))
        throw Error(ErrorCode::config_error, "field pattern table: unknown field '" + rule.field + "'");
      rule.pattern = r.at("pattern").get<std::string>();
      rule.default_unit = r.value("default_unit", std::string());
      if (r.contains("parts")) {
        rule.parts.clear();
        for (const auto& p : r.at("parts"))
          rule.parts.push_back(Part{p.value("value_group", 1), p.value("unit_group", 0), p.value("unit", std::string())});
      }
      rule.compiled = compile(rule.pattern, "field pattern table");
      t.rules.push_back(std::move(rule));
    }
    for (const auto& o : j.value("outcomes", nlohmann::json::array())) {
      OutcomeRule rule{o.at("pattern").get<std::string>(), o.at("token").get<std::string>(), {}};
      rule.compiled = compile(rule.pattern, "outcome table");
      t.outcomes.push_back(std::move(rule));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("field pattern table: ") + e.what());
  }
  return t;
}

FieldPatternTable FieldPatternTable::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(binary::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::config_error, path.string() + ": " + e.what());
  }
}

nlohmann::json FieldPatternTable::to_json() const {
  nlohmann::json j = {{"units", units}, {"rules", nlohmann::json::array()}, {"outcomes", nlohmann::json::array()}};
  for (const auto& r : rules) {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : r.parts) {
      nlohmann::json pj = {{"value_group", p.value_group}, {"unit_group", p.unit_group}};
      if (!p.unit.empty()) pj["unit"] = p.unit;
      parts.push_back(pj);
    }
    nlohmann::json rj = {{"field", r.field}, {"pattern", r.pattern}, {"parts", parts}};
    if (!r.default_unit.empty()) rj["default_unit"] = r.default_unit;
    j["rules"].push_back(rj);
  }
  for (const auto& o : outcomes) j["outcomes"].push_back({{"pattern", o.pattern}, {"token", o.token}});
  return j;
}

namespace {

std::optional<double> unit_factor(const FieldPatternTable& t, const std::string& unit) {
  if (unit.empty()) return 1.0;
  std::string key = unit;
  for (char& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (const auto it = t.units.find(key); it != t.units.end()) return it->second;
  if (const auto it = t.units.find(unit); it != t.units.end()) return it->second;
  return std::nullopt;
}

std::optional<double> numeric_value(const FieldPatternTable& t, const FieldPatternTable::Rule& rule,
                                    const std::smatch& m) {
  double total = 0.0;
  bool any = false;
  for (const auto& p : rule.parts) {
    if (p.value_group >= static_cast<int>(m.size()) || !m[p.value_group].matched) continue;
    const auto v = parse_amount(m[p.value_group].str());
    if (!v) return std::nullopt;
    std::string unit;
    if (p.unit_group > 0 && p.unit_group < static_cast<int>(m.size()) && m[p.unit_group].matched) {
      unit = m[p.unit_group].str();
    } else if (!p.unit.empty()) {
      unit = p.unit;
    } else {
      unit = rule.default_unit;
    }
    const auto factor = unit_factor(t, unit);
    if (!factor) return std::nullopt;
    total += *v * *factor;
    any = true;
  }
  if (!any) return std::nullopt;
  return total;
}

}  // namespace

JudgmentExtraction extract_fields(std::string_view generated, const FieldPatternTable& table) {
  JudgmentExtraction out;
  const std::string text(generated);
  for (const auto& rule : table.rules) {
    const bool is_charge = rule.field == "charge";
    if (is_charge ? out.charge.has_value()
                  : (rule.field == "imprisonment_months" ? out.imprisonment_months.has_value()
                     : rule.field == "probation_months"  ? out.probation_months.has_value()
                                                         : out.fine_amount.has_value()))
      continue;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), rule.compiled); it != std::sregex_iterator(); ++it) {
      const std::smatch& m = *it;
      if (is_charge) {
        const int g = rule.parts.front().value_group;
        if (g >= static_cast<int>(m.size()) || !m[g].matched) continue;
        std::string c = trim(m[g].str());
        if (c.empty()) continue;
        out.charge = c;
        break;
      }
      const auto v = numeric_value(table, rule, m);
      if (!v) continue;
      if (rule.field == "imprisonment_months") out.imprisonment_months = v;
      if (rule.field == "probation_months") out.probation_months = v;
      if (rule.field == "fine_amount") out.fine_amount = v;
      break;
    }
  }
  std::set<std::string> outcome;
  for (const auto& o : table.outcomes) {
    if (std::regex_search(text, o.compiled)) outcome.insert(o.token);
  }
  if (!outcome.empty()) out.civil_admin_outcome = std::move(outcome);
  return out;
}

JudgmentExtraction gold_fields(const CaseDocument& doc, const FieldPatternTable& table) {
  JudgmentExtraction g = extract_fields(doc.judgment, table);
  if (doc.domain == Domain::criminal && !g.charge && !doc.cause_of_action.empty()) g.charge = doc.cause_of_action;
  return g;
}

Prf token_prf(std::string_view generated, std::string_view reference) {
  const auto ref = tokenize(reference).tokens;
  if (ref.empty()) throw Error(ErrorCode::empty_reference, "reference text has no tokens");
  const auto gen = tokenize(generated).tokens;
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& t : ref) ++counts[t];
  std::size_t overlap = 0;
  for (const auto& t : gen) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  Prf r;
  r.precision = gen.empty() ? 0.0 : static_cast<double>(overlap) / static_cast<double>(gen.size());
  r.recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

// ---------------------------------------------------------------- similarity

namespace {

std::unordered_map<std::u32string, std::int64_t> ngram_counts(std::string_view text) {
  const auto cps = utf8::decode(text);
  std::unordered_map<std::u32string, std::int64_t> counts;
  for (std::size_t n = 1; n <= 3; ++n) {
    for (std::size_t i = 0; i + n <= cps.size(); ++i) ++counts[std::u32string(cps.begin() + static_cast<std::ptrdiff_t>(i), cps.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw Error(ErrorCode::scorer_unavailable, "embedding sizes differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

}  // namespace

double NgramScorer::similarity(std::string_view a, std::string_view b) {
  if (a == b) return 1.0;
  const auto ca = ngram_counts(a);
  const auto cb = ngram_counts(b);
  // Integer arithmetic keeps the result exact and order-independent.
  std::int64_t dot = 0, na = 0, nb = 0;
  for (const auto& [g, c] : ca) {
    na += c * c;
    if (auto it = cb.find(g); it != cb.end()) dot += c * it->second;
  }
  for (const auto& [g, c] : cb) nb += c * c;
  if (na == 0 || nb == 0) return 0.0;
  return static_cast<double>(dot) / std::sqrt(static_cast<double>(na) * static_cast<double>(nb));
}

EmbeddingScorerConfig EmbeddingScorerConfig::from_json(const nlohmann::json& j) {
  EmbeddingScorerConfig c;
  try {
    c.base_url = j.at("base_url").get<std::string>();
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.max_concurrency = j.value("max_concurrency", c.max_concurrency);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.timeout_sec = j.value("timeout_sec", c.timeout_sec);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("embedding scorer: ") + e.what());
  }
  if (c.max_concurrency < 1 || c.max_concurrency > 1024)
    throw Error(ErrorCode::config_error, "embedding scorer: max_concurrency must be in [1, 1024]");
  return c;
}

HttpEmbeddingScorer::HttpEmbeddingScorer(EmbeddingScorerConfig config)
    : config_(std::move(config)), slots_(config_.max_concurrency) {
  if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
}

std::vector<double> HttpEmbeddingScorer::embed(std::string_view text) {
  const auto scheme_end = config_.base_url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorCode::config_error, "embedding base_url needs a scheme");
  const auto path_start = config_.base_url.find('/', scheme_end + 3);
  const std::string origin = config_.base_url.substr(0, path_start);
  std::string path = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  const std::string body = nlohmann::json{{"model", config_.model}, {"input", text}}.dump(
      -1, ' ', false, nlohmann::json::error_handler_t::replace);

  slots_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{slots_};

  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(200 << attempt));
    httplib::Client client(origin);
    const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(config_.timeout_sec));
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    const auto res = client.Post(path + "/embeddings", headers, body, "application/json");
    if (!res) {
      last_error = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status == 429 || res->status >= 500) continue;
      break;
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      const auto& e = j.contains("data") ? j.at("data").at(0).at("embedding") : j.at("embedding");
      return e.get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("malformed response: ") + e.what();
    }
  }
  throw Error(ErrorCode::scorer_unavailable, "embedding endpoint failed: " + last_error);
}

double HttpEmbeddingScorer::similarity(std::string_view a, std::string_view b) {
  return cosine(embed(a), embed(b));
}

std::unique_ptr<SimilarityScorer> make_scorer(const nlohmann::json& config) {
  const std::string kind = config.is_object() ? config.value("kind", std::string("ngram")) : std::string("ngram");
  if (kind == "ngram") return std::make_unique<NgramScorer>();
  if (kind == "embedding") return std::make_unique<HttpEmbeddingScorer>(EmbeddingScorerConfig::from_json(config));
  throw Error(ErrorCode::config_error, "unknown scorer kind '" + kind + "'");
}

double semantic_similarity(std::string_view generated, std::string_view reference, SimilarityScorer* scorer) {
  if (!scorer) throw Error(ErrorCode::scorer_unavailable, "no similarity scorer configured");
  return scorer->similarity(generated, reference);
}

// ---------------------------------------------------------------- records

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"charge_acc", "imprison_d", "probation_d", "fine_d", "la_p",
                                                 "la_r",       "la_f1",      "j_p",         "j_r",    "j_f1",
                                                 "r_p",        "r_r",        "r_f1",        "j_sim",  "r_sim"};
  return names;
}

const std::map<std::string, std::vector<std::string>>& metric_families() {
  static const std::map<std::string, std::vector<std::string>> f = {
      {"ljp", {"charge_acc", "imprison_d", "probation_d", "fine_d"}},
      {"sag", {"la_p", "la_r", "la_f1"}},
      {"ldg", {"j_p", "j_r", "j_f1", "r_p", "r_r", "r_f1", "j_sim", "r_sim"}},
  };
  return f;
}

CaseRecord evaluate_case(const CaseDocument& gold, const CaseOutputs& outputs, const std::string& mode,
                         std::uint64_t seed, const FieldPatternTable& table, SimilarityScorer& scorer) {
  CaseRecord r;
  r.case_id = gold.id;
  r.mode = mode;
  r.seed = seed;
  for (const auto& n : metric_names()) r.metrics[n] = std::nullopt;

  const JudgmentExtraction g = gold_fields(gold, table);
  const JudgmentExtraction h = extract_fields(outputs.judgment, table);
  if (g.charge) r.metrics["charge_acc"] = charge_accuracy(h.charge, g.charge);
  auto numeric = [](const std::optional<double>& ref, const std::optional<double>& hyp) -> std::optional<double> {
    if (!ref) return std::nullopt;
    if (!hyp) return 0.0;
    return numeric_diff_metric(*ref, *hyp);
  };
  r.metrics["imprison_d"] = numeric(g.imprisonment_months, h.imprisonment_months);
  r.metrics["probation_d"] = numeric(g.probation_months, h.probation_months);
  r.metrics["fine_d"] = numeric(g.fine_amount, h.fine_amount);

  if (!gold.articles.empty()) {
    const Prf la = set_prf(parse_citations(outputs.articles), gold.articles);
    r.metrics["la_p"] = la.precision;
    r.metrics["la_r"] = la.recall;
    r.metrics["la_f1"] = la.f1;
  }
  if (!tokenize(gold.judgment).tokens.empty()) {
    const Prf j = token_prf(outputs.judgment, gold.judgment);
    r.metrics["j_p"] = j.precision;
    r.metrics["j_r"] = j.recall;
    r.metrics["j_f1"] = j.f1;
    r.metrics["j_sim"] = semantic_similarity(outputs.judgment, gold.judgment, &scorer);
  }
  if (!tokenize(gold.reason).tokens.empty()) {
    const Prf rr = token_prf(outputs.reasoning, gold.reason);
    r.metrics["r_p"] = rr.precision;
    r.metrics["r_r"] = rr.recall;
    r.metrics["r_f1"] = rr.f1;
    r.metrics["r_sim"] = semantic_similarity(outputs.reasoning, gold.reason, &scorer);
  }
  return r;
}

EvalReport aggregate(std::vector<CaseRecord> records) {
  const std::set<std::string> known(metric_names().begin(), metric_names().end());
  EvalReport rep;
  if (!records.empty()) {
    std::set<std::string> schema;
    for (const auto& [k, v] : records.front().metrics) schema.insert(k);
    for (const auto& rec : records) {
      std::set<std::string> keys;
      for (const auto& [k, v] : rec.metrics) {
        if (!known.contains(k)) throw Error(ErrorCode::schema_mismatch, "unknown metric '" + k + "' in " + rec.case_id);
        keys.insert(k);
      }
      if (keys != schema) throw Error(ErrorCode::schema_mismatch, "record " + rec.case_id + " has a different metric set");
    }
  }
  std::stable_sort(records.begin(), records.end(), [](const CaseRecord& a, const CaseRecord& b) {
    return std::tie(a.mode, a.case_id) < std::tie(b.mode, b.case_id);
  });
  std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> sums;
  for (const auto& rec : records) {
    auto& mode = sums[rec.mode];
    for (const auto& [k, v] : rec.metrics) {
      auto& s = mode[k];
      if (v) {
        s.first += *v;
        ++s.second;
      }
    }
  }
  for (const auto& [mode, metrics] : sums) {
    for (const auto& [k, s] : metrics)
      rep.summary[mode][k] = MetricSummary{s.second ? s.first / static_cast<double>(s.second) : 0.0, s.second};
  }
  rep.records = std::move(records);
  return rep;
}

nlohmann::json to_json(const CaseRecord& r) {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [k, v] : r.metrics) m[k] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  return {{"case_id", r.case_id}, {"mode", r.mode}, {"seed", r.seed}, {"metrics", m}};
}

CaseRecord record_from_json(const nlohmann::json& j, std::size_t line) {
  try {
    CaseRecord r;
    r.case_id = j.at("case_id").get<std::string>();
    r.mode = j.at("mode").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : j.at("metrics").items())
      r.metrics[k] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("", line, std::string("bad evaluation record: ") + e.what());
  }
}

void save_records(const std::vector<CaseRecord>& records, const std::filesystem::path& path) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  binary::write_file(path, out);
}

std::vector<CaseRecord> load_records(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::io_error, "cannot read " + path.string());
  std::vector<CaseRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line), n));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string(), n, e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string(), n, e.what());
    }
  }
  return out;
}

namespace {
bool is_numeric_diff(const std::string& name) { return name.size() > 2 && name.ends_with("_d"); }
}  // namespace

nlohmann::json summary_json(const EvalReport& report, bool doubled_scale) {
  nlohmann::json j = {{"modes", nlohmann::json::object()}, {"families", metric_families()}};
  for (const auto& [mode, metrics] : report.summary) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, s] : metrics) {
      m[k] = {{"mean", s.mean}, {"count", s.count}};
      if (doubled_scale && is_numeric_diff(k)) m[k + "_x2"] = {{"mean", 2.0 * s.mean}, {"count", s.count}, {"note", "2*d rescale"}};
    }
    j["modes"][mode] = m;
  }
  j["cases"] = report.records.size();
  return j;
}

std::string summary_table(const EvalReport& report, bool doubled_scale) {
  std::vector<std::string> cols = metric_names();
  if (doubled_scale) {
    for (const auto& n : metric_names()) {
      if (is_numeric_diff(n)) cols.push_back(n + "_x2");
    }
  }
  std::ostringstream os;
  os << std::left << std::setw(12) << "mode";
  for (const auto& c : cols) os << std::right << std::setw(13) << c;
  os << "\n";
  for (const auto& [mode, metrics] : report.summary) {
    os << std::left << std::setw(12) << mode;
    for (const auto& c : cols) {
      const bool x2 = c.ends_with("_x2");
      const auto it = metrics.find(x2 ? c.substr(0, c.size() - 3) : c);
      if (it == metrics.end() || it->second.count == 0) {
        os << std::right << std::setw(13) << "-";
      } else {
        os << std::right << std::setw(13) << std::fixed << std::setprecision(4) << (x2 ? 2.0 : 1.0) * it->second.mean;
      }
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace prag
