#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace prag {

/// A statute citation. Identity is the canonical form: normalized law name
/// plus article number, so "Article 264 of the Criminal Law" and
/// "《刑法》第二百六十四条"-style spellings of the same law compare equal once
/// the law names normalize alike.
struct StatuteRef {
  std::string law_name;
  std::uint32_t article_number = 1;
  std::string raw_citation;

  std::string canonical() const;

  friend bool operator==(const StatuteRef& a, const StatuteRef& b) {
    return a.canonical() == b.canonical();
  }
  friend std::strong_ordering operator<=>(const StatuteRef& a, const StatuteRef& b) {
    return a.canonical() <=> b.canonical();
  }
};

using StatuteSet = std::set<StatuteRef>;

/// Lowercases ASCII, drops a leading "the", strips whitespace and the
/// 《》 brackets; also maps a few common Chinese short names to English ones.
std::string normalize_law_name(std::string_view name);

/// Arabic digits or Chinese numerals (一…九, 十, 百, 千, 万, 零/〇, 两) to an integer.
std::optional<std::uint64_t> parse_numeral(std::string_view text);

/// All citations in `text`, in order of appearance (duplicates kept).
/// Recognized spellings: "Article N of the X Law", "《X》第N条", bare "第N条".
std::vector<StatuteRef> find_citations(std::string_view text);

/// Canonical set of the citations in `text`.
StatuteSet parse_citations(std::string_view text);

enum class Domain { criminal, civil, administrative };
std::string_view to_string(Domain d);
Domain parse_domain(std::string_view s);

enum class StoreKind { offline, online, test };
std::string_view to_string(StoreKind k);
StoreKind parse_store_kind(std::string_view s);

struct CaseDocument {
  std::string id;
  Domain domain = Domain::criminal;
  std::string cause_of_action;
  std::string fact;
  std::optional<std::string> focus;
  std::string reason;
  std::string judgment;
  StatuteSet articles;
  std::string raw_text;
  std::size_t char_count = 0;
  std::string published_date;  // ISO yyyy-mm-dd

  /// The article section as text: raw citations joined with "; ".
  std::string articles_text() const;

  /// Field-for-field, including each citation's raw spelling.
  friend bool operator==(const CaseDocument&, const CaseDocument&);
};

struct CorpusStore {
  StoreKind kind = StoreKind::online;
  std::vector<CaseDocument> documents;

  const CaseDocument* find(std::string_view id) const;
  /// Throws UnknownDoc.
  const CaseDocument& at(std::string_view id) const;
  std::size_t size() const { return documents.size(); }
  bool empty() const { return documents.empty(); }

  friend bool operator==(const CorpusStore&, const CorpusStore&) = default;
};

/// Ordered section → trigger-phrase table plus header prefixes. Loaded from
/// JSON so marker sets can change per jurisdiction without code changes.
struct SegmentationRules {
  struct SectionRule {
    std::string section;  // fact | focus | reason | judgment | articles
    std::vector<std::string> triggers;
  };
  std::vector<SectionRule> sections;
  // Header field → line prefix, e.g. "id" → "ID:".
  std::string id_prefix = "ID:";
  std::string domain_prefix = "DOMAIN:";
  std::string cause_prefix = "CAUSE:";
  std::string date_prefix = "DATE:";
  std::string document_separator = "=====";

  static SegmentationRules defaults();
  static SegmentationRules from_json(const nlohmann::json& j);
  static SegmentationRules load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

/// Splits a raw judgment into sections at the configured marker phrases.
/// Each section is the whitespace-trimmed span after its marker up to the next
/// recognized marker. Throws EmptyInput / MissingSection (fact, reason or judgment).
CaseDocument parse_judgment(std::string_view raw_text, const SegmentationRules& rules);

/// Keeps documents with char_count >= min_chars, at most max_per_cause per
/// cause of action (earliest first). Stable and idempotent.
CorpusStore filter_corpus(const CorpusStore& docs, std::size_t min_chars = 150,
                          std::size_t max_per_cause = 10);

/// Regular-expression table for prosecution sentencing recommendations.
struct PatternTable {
  std::vector<std::string> patterns;

  static PatternTable default_prosecution();
  static PatternTable from_json(const nlohmann::json& j);
  static PatternTable load(const std::filesystem::path& path);
};

/// Deletes every span matching any pattern; other characters are untouched.
std::string strip_prosecution_claims(std::string_view fact, const PatternTable& patterns);

nlohmann::json to_json(const CaseDocument& doc);
/// Throws FormatError with the given line number on missing/ill-typed fields.
CaseDocument case_from_json(const nlohmann::json& j, std::size_t line = 0);

/// One CaseDocument JSON object per line, UTF-8. The store kind is not part
/// of the file; callers know which store they are loading.
void save_store(const CorpusStore& store, const std::filesystem::path& path);
/// Throws IoError, or FormatError with the 1-based line of the bad record.
CorpusStore load_store(const std::filesystem::path& path, StoreKind kind = StoreKind::online);

/// Splits a raw file on separator lines and parses each block. Errors are
/// reported as FormatError carrying the path and the block's first line.
std::vector<CaseDocument> ingest_raw_file(const std::filesystem::path& path,
                                          const SegmentationRules& rules);

}  // namespace prag
