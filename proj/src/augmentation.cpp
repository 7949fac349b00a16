#include "prag/augmentation.hpp"

#include "prag/corpus.hpp"
#include "prag/error.hpp"
#include "prag/hashing.hpp"
#include "prag/logging.hpp"
#include "prag/random.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>
#include <unordered_map>

namespace prag {

std::string_view to_string(SectionKind k) {
  switch (k) {
    case SectionKind::fact: return "fact";
    case SectionKind::reason: return "reason";
    case SectionKind::focus: return "focus";
    case SectionKind::article: return "article";
    case SectionKind::judgment: return "judgment";
  }
  return "fact";
}

SectionKind parse_section_kind(std::string_view s) {
  for (SectionKind k : kAllSections) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::format_error, "unknown section kind '" + std::string(s) + "'");
}

std::string_view section_label(SectionKind k) {
  switch (k) {
    case SectionKind::fact: return "FACTS:";
    case SectionKind::reason: return "REASONING:";
    case SectionKind::focus: return "FOCUS:";
    case SectionKind::article: return "ARTICLES:";
    case SectionKind::judgment: return "JUDGMENT:";
  }
  return "FACTS:";
}

std::optional<std::string> section_text(const CaseDocument& doc, SectionKind k) {
  auto non_empty = [](const std::string& s) -> std::optional<std::string> {
    if (s.empty()) return std::nullopt;
    return s;
  };
  switch (k) {
    case SectionKind::fact: return non_empty(doc.fact);
    case SectionKind::reason: return non_empty(doc.reason);
    case SectionKind::focus: return doc.focus ? non_empty(*doc.focus) : std::nullopt;
    case SectionKind::article: return non_empty(doc.articles_text());
    case SectionKind::judgment: return non_empty(doc.judgment);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- validation

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::vector<std::string> digit_runs(std::string_view text) {
  std::vector<std::string> runs;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_digit(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_digit(text[j])) ++j;
    runs.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return runs;
}

}  // namespace

RewriteCheck validate_rewrite(std::string_view original, std::string_view variant) {
  RewriteCheck check;
  const auto have = digit_runs(variant);
  const std::set<std::string> have_set(have.begin(), have.end());
  std::set<std::string> reported;
  for (const auto& run : digit_runs(original)) {
    if (!have_set.contains(run) && reported.insert(run).second) check.missing.push_back(run);
  }
  const StatuteSet in_variant = parse_citations(variant);
  for (const auto& ref : parse_citations(original)) {
    if (!in_variant.contains(ref)) check.missing.push_back(ref.canonical());
  }
  check.ok = check.missing.empty();
  return check;
}

// ---------------------------------------------------------------- builtin paraphraser

namespace {

// Interchangeable word pairs. Words that carry a charge, a sentence term or a
// fine are deliberately absent so outcomes read the same in every variant.
const std::vector<std::pair<std::string, std::string>>& synonym_pairs() {
  static const std::vector<std::pair<std::string, std::string>> pairs = {
      {"defendant", "accused"},
      {"court", "tribunal"},
      {"found", "determined"},
      {"considers", "holds"},
      {"considered", "held"},
      {"approximately", "about"},
      {"subsequently", "later"},
      {"therefore", "accordingly"},
      {"because", "since"},
      {"victim", "injured party"},
      {"committed", "perpetrated"},
      {"obtained", "acquired"},
      {"confessed", "admitted"},
      {"truthfully", "candidly"},
      {"evidence", "proof"},
      {"belongings", "possessions"},
      {"residence", "home"},
      {"arrested", "detained"},
      {"returned", "handed back"},
      {"dispute", "disagreement"},
      {"whether", "if"},
      {"sufficient", "adequate"},
      {"facts", "circumstances"},
      {"clear", "plain"},
      {"lenient", "mild"},
      {"shows", "demonstrates"},
      {"attitude", "demeanour"},
      {"applied", "invoked"},
      {"本院", "法院"},
      {"认为", "认定"},
      {"经审理查明", "经审查确认"},
      {"被害人", "受害人"},
      {"如实供述", "如实交代"},
      {"事实清楚", "事实明确"},
      {"证据确实", "证据确凿"},
      {"归案", "到案"},
  };
  return pairs;
}

struct Span {
  std::size_t begin;
  std::size_t end;
};

/// Byte ranges that must be copied verbatim: digit runs and citations.
std::vector<Span> protected_spans(std::string_view text) {
  std::vector<Span> spans;
  for (std::size_t i = 0; i < text.size();) {
    if (!is_digit(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_digit(text[j])) ++j;
    spans.push_back({i, j});
    i = j;
  }
  for (const auto& ref : find_citations(text)) {
    for (std::size_t p = text.find(ref.raw_citation); p != std::string_view::npos;
         p = text.find(ref.raw_citation, p + 1))
      spans.push_back({p, p + ref.raw_citation.size()});
  }
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
  std::vector<Span> merged;
  for (const auto& s : spans) {
    if (!merged.empty() && s.begin <= merged.back().end) {
      merged.back().end = std::max(merged.back().end, s.end);
    } else {
      merged.push_back(s);
    }
  }
  return merged;
}

bool is_ascii_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

/// Applies word substitutions to an unprotected stretch of text.
std::string substitute(std::string_view text, Rng& rng) {
  static const auto table = [] {
    std::vector<std::pair<std::string, std::string>> t;
    for (const auto& [a, b] : synonym_pairs()) {
      t.emplace_back(a, b);
      t.emplace_back(b, a);
    }
    // Longest first so multi-word entries win over their prefixes.
    std::stable_sort(t.begin(), t.end(), [](const auto& x, const auto& y) { return x.first.size() > y.first.size(); });
    return t;
  }();
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool at_word_start = i == 0 || !is_ascii_alpha(text[i - 1]);
    bool replaced = false;
    for (const auto& [from, to] : table) {
      if (text.size() - i < from.size()) continue;
      const bool ascii = is_ascii_alpha(from.front());
      std::string_view cand = text.substr(i, from.size());
      bool match;
      bool capital = false;
      if (ascii) {
        if (!at_word_start) continue;
        const std::size_t end = i + from.size();
        if (end < text.size() && is_ascii_alpha(text[end])) continue;
        capital = cand.front() >= 'A' && cand.front() <= 'Z';
        match = std::equal(cand.begin(), cand.end(), from.begin(), [](char a, char b) {
          return static_cast<char>(std::tolower(static_cast<unsigned char>(a))) == b;
        });
      } else {
        match = cand == from;
      }
      if (!match) continue;
      // Each occurrence is swapped with probability one half.
      if (rng.below(2) == 0) break;
      std::string rep = to;
      if (capital && !rep.empty()) rep[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(rep[0])));
      out += rep;
      i += from.size();
      replaced = true;
      break;
    }
    if (!replaced) {
      // Copy one UTF-8 scalar (or a whole ASCII word) unchanged.
      std::size_t j = i + 1;
      if (is_ascii_alpha(text[i])) {
        while (j < text.size() && is_ascii_alpha(text[j])) ++j;
      } else {
        while (j < text.size() && (static_cast<unsigned char>(text[j]) & 0xC0) == 0x80) ++j;
      }
      out.append(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

/// Splits after sentence terminators ('.', ';', '。', '；') that are followed
/// by whitespace or the end; the terminator stays with its sentence.
std::vector<std::string> split_sentences(std::string_view text, const std::vector<Span>& prot) {
  auto inside = [&](std::size_t p) {
    return std::any_of(prot.begin(), prot.end(), [p](const Span& s) { return p >= s.begin && p < s.end; });
  };
  std::vector<std::string> out;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t term_len = 0;
    if (text[i] == '.' || text[i] == ';') {
      term_len = 1;
    } else if (text.substr(i, 3) == "。" || text.substr(i, 3) == "；") {
      term_len = 3;
    }
    if (term_len == 0 || inside(i)) {
      ++i;
      continue;
    }
    const std::size_t end = i + term_len;
    const bool boundary = end >= text.size() || text[end] == ' ' || text[end] == '\n' || term_len == 3;
    if (!boundary) {
      i = end;
      continue;
    }
    std::size_t next = end;
    while (next < text.size() && (text[next] == ' ' || text[next] == '\n')) ++next;
    out.emplace_back(text.substr(start, end - start));
    start = next;
    i = next;
  }
  if (start < text.size()) out.emplace_back(text.substr(start));
  return out;
}

std::string join_sentences(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) {
      const unsigned char last = static_cast<unsigned char>(out.back());
      // No space between CJK sentences; one space otherwise.
      if (last < 0x80) out.push_back(' ');
    }
    out += p;
  }
  return out;
}

}  // namespace

std::string BuiltinParaphraser::rewrite(std::string_view text, SectionKind kind, std::uint64_t variant_seed) {
  Rng rng(derive_seed(variant_seed, std::string("paraphrase:") + std::string(to_string(kind))));
  const auto prot = protected_spans(text);
  std::string substituted;
  std::size_t pos = 0;
  for (const auto& s : prot) {
    substituted += substitute(text.substr(pos, s.begin - pos), rng);
    substituted.append(text.substr(s.begin, s.end - s.begin));
    pos = s.end;
  }
  substituted += substitute(text.substr(pos), rng);

  auto sentences = split_sentences(substituted, protected_spans(substituted));
  if (sentences.size() > 1) {
    const std::size_t shift = 1 + rng.below(sentences.size() - 1);
    std::rotate(sentences.begin(), sentences.begin() + static_cast<std::ptrdiff_t>(shift), sentences.end());
  }
  // A trailing sentence without terminator would glue onto the next one.
  for (auto& s : sentences) {
    if (s.empty()) continue;
    const char last = s.back();
    const bool cjk_end = s.size() >= 3 && (s.substr(s.size() - 3) == "。" || s.substr(s.size() - 3) == "；");
    if (last != '.' && last != ';' && !cjk_end) s += (static_cast<unsigned char>(last) >= 0x80 ? "。" : ".");
  }
  return join_sentences(sentences);
}

// ---------------------------------------------------------------- token bucket

TokenBucket::TokenBucket(double rate_per_sec, double capacity)
    : rate_(rate_per_sec), capacity_(std::max(1.0, capacity)), tokens_(capacity_), last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
  if (rate_ <= 0.0) return;
  for (;;) {
    double wait = 0.0;
    {
      std::lock_guard lock(mu_);
      const auto now = std::chrono::steady_clock::now();
      tokens_ = std::min(capacity_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
      last_ = now;
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      wait = (1.0 - tokens_) / rate_;
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(wait));
  }
}

// ---------------------------------------------------------------- chat rewriter

ChatRewriterConfig ChatRewriterConfig::from_json(const nlohmann::json& j) {
  ChatRewriterConfig c;
  try {
    c.base_url = j.value("base_url", c.base_url);
    c.model = j.value("model", c.model);
    c.temperature = j.value("temperature", c.temperature);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.backoff_initial_sec = j.value("backoff_initial_sec", c.backoff_initial_sec);
    c.requests_per_sec = j.value("requests_per_sec", c.requests_per_sec);
    c.burst = j.value("burst", c.burst);
    c.timeout_sec = j.value("timeout_sec", c.timeout_sec);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("rewriter config: ") + e.what());
  }
  if (c.max_retries < 0) throw Error(ErrorCode::config_error, "rewriter max_retries must be >= 0");
  return c;
}

nlohmann::json ChatRewriterConfig::to_json() const {
  return {{"base_url", base_url},
          {"model", model},
          {"temperature", temperature},
          {"api_key_env", api_key_env},
          {"max_retries", max_retries},
          {"backoff_initial_sec", backoff_initial_sec},
          {"requests_per_sec", requests_per_sec},
          {"burst", burst},
          {"timeout_sec", timeout_sec}};
}

ChatCompletionsRewriter::ChatCompletionsRewriter(ChatRewriterConfig config)
    : config_(std::move(config)), bucket_(config_.requests_per_sec, config_.burst) {
  if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
}

ChatCompletionsRewriter::~ChatCompletionsRewriter() = default;

std::string ChatCompletionsRewriter::instruction(SectionKind kind) {
  std::string s =
      "You rewrite one section of a court judgment. Reply with the rewritten section only: no preamble, "
      "no quotation marks, no notes. Copy every number, date, amount and statute citation exactly as it "
      "appears. ";
  switch (kind) {
    case SectionKind::fact:
      s += "This is the statement of facts. Keep the charges, the facts that bear on sentencing and every key "
           "detail; change only the wording.";
      break;
    case SectionKind::reason:
      s += "This is the court's reasoning. Restructure the sentences but do not change any step of the argument "
           "or its conclusion.";
      break;
    case SectionKind::focus:
      s += "This states the points in dispute. Replace the key phrases with equivalent ones; the issues must stay "
           "the same.";
      break;
    case SectionKind::article:
      s += "This lists the applicable statutes. Paraphrase freely, but every law name and article number must "
           "remain.";
      break;
    case SectionKind::judgment:
      s += "This is the judgment. The outcome must not change: same charge, same term, same probation, same fine.";
      break;
  }
  return s;
}

namespace {

struct UrlParts {
  std::string origin;  // scheme://host[:port]
  std::string path;    // no trailing slash
};

UrlParts split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorCode::config_error, "rewriter base_url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  UrlParts p;
  p.origin = url.substr(0, path_start);
  p.path = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!p.path.empty() && p.path.back() == '/') p.path.pop_back();
  return p;
}

std::string trim_copy(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

std::string ChatCompletionsRewriter::rewrite(std::string_view text, SectionKind kind, std::uint64_t variant_seed) {
  const UrlParts url = split_url(config_.base_url);
  const nlohmann::json body = {
      {"model", config_.model},
      {"temperature", config_.temperature},
      {"seed", variant_seed & 0x7fffffffffffffffULL},
      {"messages",
       nlohmann::json::array({{{"role", "system"}, {"content", instruction(kind)}}, {{"role", "user"}, {"content", text}}})}};
  const std::string payload = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);

  std::string last_error;
  double backoff = config_.backoff_initial_sec;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2.0;
    }
    bucket_.acquire();
    httplib::Client client(url.origin);
    const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(config_.timeout_sec));
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    const auto res = client.Post(url.path + "/chat/completions", headers, payload, "application/json");
    if (!res) {
      last_error = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw Error(ErrorCode::rewriter_unavailable, "rewriter returned HTTP " + std::to_string(res->status));
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      std::string content = trim_copy(j.at("choices").at(0).at("message").at("content").get<std::string>());
      if (content.empty()) {
        last_error = "empty completion";
        continue;
      }
      return content;
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("malformed response: ") + e.what();
    }
  }
  throw Error(ErrorCode::rewriter_unavailable, "rewriter failed after " + std::to_string(config_.max_retries + 1) +
                                                   " attempts: " + last_error);
}

// ---------------------------------------------------------------- augmentation

std::vector<std::string> rewrite_section(std::string_view text, SectionKind kind, Rewriter& rewriter,
                                         std::uint64_t seed, std::size_t n) {
  if (text.empty()) throw Error(ErrorCode::empty_input, "cannot rewrite an empty section");
  constexpr int kRetries = 2;
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t v = 1; v <= n; ++v) {
    std::string accepted;
    bool ok = false;
    for (int attempt = 0; attempt <= kRetries && !ok; ++attempt) {
      const std::uint64_t s = derive_seed(seed, "variant:" + std::to_string(v) + ":" + std::to_string(attempt));
      std::string candidate = rewriter.rewrite(text, kind, s);
      const auto check = validate_rewrite(text, candidate);
      if (check.ok && !candidate.empty()) {
        accepted = std::move(candidate);
        ok = true;
      } else {
        log::debug("rewrite_rejected", {{"kind", to_string(kind)}, {"variant", v}, {"missing", check.missing}});
      }
    }
    if (!ok) {
      log::warn("rewrite_fallback", {{"kind", to_string(kind)}, {"variant", v}});
      accepted = std::string(text);
    }
    out.push_back(std::move(accepted));
  }
  return out;
}

std::vector<SectionKind> required_sections(CaseRole role) {
  if (role == CaseRole::offline) return {kAllSections.begin(), kAllSections.end()};
  return {SectionKind::fact, SectionKind::reason, SectionKind::article, SectionKind::judgment};
}

AugmentedCase augment_case(const CaseDocument& doc, CaseRole role, Rewriter& rewriter, std::uint64_t seed) {
  AugmentedCase aug;
  aug.doc_id = doc.id;
  for (SectionKind k : required_sections(role)) {
    auto text = section_text(doc, k);
    if (!text)
      throw Error(ErrorCode::missing_section, doc.id + ": section '" + std::string(to_string(k)) + "' is missing");
    std::vector<std::string> variants{*text};
    auto rewrites = rewrite_section(*text, k, rewriter,
                                    derive_seed(seed, doc.id + ":" + std::string(to_string(k))), kVariantsPerSection - 1);
    variants.insert(variants.end(), std::make_move_iterator(rewrites.begin()), std::make_move_iterator(rewrites.end()));
    aug.variants.emplace(k, std::move(variants));
  }
  return aug;
}

std::vector<QAPair> expand_qa(const AugmentedCase& aug) {
  const auto fact = aug.variants.find(SectionKind::fact);
  if (fact == aug.variants.end() || fact->second.size() != kVariantsPerSection)
    throw Error(ErrorCode::missing_section, aug.doc_id + ": fact variants missing");
  std::vector<QAPair> pairs;
  for (const auto& [kind, variants] : aug.variants) {
    if (kind == SectionKind::fact) continue;
    if (variants.size() != kVariantsPerSection)
      throw Error(ErrorCode::format_error, aug.doc_id + ": section '" + std::string(to_string(kind)) +
                                               "' does not have four variants");
    for (std::uint32_t v = 0; v < kVariantsPerSection; ++v)
      pairs.push_back(QAPair{aug.doc_id, fact->second[v], variants[v], kind, v});
  }
  return pairs;
}

nlohmann::json to_json(const QAPair& p) {
  return {{"doc_id", p.doc_id},
          {"query", p.query_text},
          {"answer", p.answer_text},
          {"answer_kind", to_string(p.answer_kind)},
          {"variant_index", p.variant_index}};
}

QAPair qa_from_json(const nlohmann::json& j, std::size_t line) {
  try {
    QAPair p;
    p.doc_id = j.at("doc_id").get<std::string>();
    p.query_text = j.at("query").get<std::string>();
    p.answer_text = j.at("answer").get<std::string>();
    p.answer_kind = parse_section_kind(j.at("answer_kind").get<std::string>());
    p.variant_index = j.at("variant_index").get<std::uint32_t>();
    if (p.answer_kind == SectionKind::fact) throw FormatError("", line, "answer_kind must not be fact");
    if (p.variant_index >= kVariantsPerSection) throw FormatError("", line, "variant_index out of range");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("", line, std::string("bad QA record: ") + e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError("", line, e.what());
  }
}

void save_qa_pairs(const std::vector<QAPair>& pairs, const std::filesystem::path& path) {
  std::string out;
  for (const auto& p : pairs) out += to_json(p).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  f << out;
}

std::vector<QAPair> load_qa_pairs(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::io_error, "cannot read " + path.string());
  std::vector<QAPair> pairs;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string(), n, e.what());
    }
    try {
      pairs.push_back(qa_from_json(j, n));
    } catch (const FormatError& e) {
      throw FormatError(path.string(), n, e.what());
    }
  }
  return pairs;
}

std::unique_ptr<Rewriter> make_rewriter(const nlohmann::json& cfg) {
  const std::string kind = cfg.is_object() ? cfg.value("kind", std::string("builtin")) : std::string("builtin");
  if (kind == "builtin") return std::make_unique<BuiltinParaphraser>();
  if (kind == "chat") return std::make_unique<ChatCompletionsRewriter>(ChatRewriterConfig::from_json(cfg));
  throw Error(ErrorCode::config_error, "unknown rewriter kind '" + kind + "'");
}

}  // namespace prag
