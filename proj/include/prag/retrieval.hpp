#pragma once

#include "prag/corpus.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace prag {

struct TokenizedText {
  std::vector<std::string> tokens;
  friend bool operator==(const TokenizedText&, const TokenizedText&) = default;
};

/// Runs of CJK ideographs emit overlapping character bigrams (a lone
/// ideograph emits itself). Other text splits on whitespace and punctuation
/// and is ASCII-lowercased.
TokenizedText tokenize(std::string_view text);

enum class IndexField : std::uint8_t { raw_text, fact, focus, reason, judgment, articles };

/// Which document sections feed the index. Default: the full raw text.
struct FieldSelector {
  std::vector<IndexField> fields{IndexField::raw_text};
  std::string text_of(const CaseDocument& doc) const;
};

struct Bm25Params {
  double k1 = 1.5;
  double b = 0.75;
};

struct Posting {
  std::uint32_t doc;  // dense index into doc_ids (which are sorted ascending)
  std::uint32_t tf;
  friend bool operator==(const Posting&, const Posting&) = default;
};

/// In-memory inverted index. Documents are numbered in ascending doc_id
/// order, so postings sorted by number are also sorted by doc_id, and the
/// statistics do not depend on insertion order. Immutable after build.
class InvertedIndex {
 public:
  std::size_t doc_count() const { return doc_ids_.size(); }
  /// Throws EmptyCorpus when there are no documents.
  double avg_doc_length() const;
  std::uint32_t doc_length(std::string_view doc_id) const;
  std::size_t doc_frequency(const std::string& token) const;
  const std::vector<Posting>* postings(const std::string& token) const;
  const std::vector<std::string>& doc_ids() const { return doc_ids_; }
  const std::vector<std::uint32_t>& doc_lengths() const { return doc_lengths_; }
  std::size_t term_count() const { return postings_.size(); }
  const FieldSelector& fields() const { return fields_; }

  /// Dense number for a doc id, or -1.
  std::int64_t doc_number(std::string_view doc_id) const;
  std::uint32_t term_frequency(const std::string& token, std::uint32_t doc) const;

  friend InvertedIndex build_index(const CorpusStore& store, const FieldSelector& fields);
  friend void save_index(const InvertedIndex& index, const std::filesystem::path& path);
  friend InvertedIndex load_index(const std::filesystem::path& path);
  friend bool operator==(const InvertedIndex& a, const InvertedIndex& b) {
    return a.doc_ids_ == b.doc_ids_ && a.doc_lengths_ == b.doc_lengths_ && a.postings_ == b.postings_ &&
           a.total_length_ == b.total_length_;
  }

 private:
  std::vector<std::string> doc_ids_;
  std::vector<std::uint32_t> doc_lengths_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  std::uint64_t total_length_ = 0;
  FieldSelector fields_;
};

InvertedIndex build_index(const CorpusStore& store, const FieldSelector& fields = {});

/// Snapshot: "PLIX" magic, version, fields, documents, postings, checksum
/// (layout in docs/formats.md).
void save_index(const InvertedIndex& index, const std::filesystem::path& path);
InvertedIndex load_index(const std::filesystem::path& path);

/// IDF(t) = ln((N - df + 0.5) / (df + 0.5) + 1).
double bm25_idf(std::size_t doc_count, std::size_t df);

/// Sum over query token instances (duplicates count once per occurrence) of
/// IDF·tf·(k1+1) / (tf + k1·(1 − b + b·dl/avgdl)). Throws UnknownDoc.
double bm25_score(const TokenizedText& query, std::string_view doc_id, const InvertedIndex& index,
                  const Bm25Params& params = {});

struct RetrievalResult {
  std::string doc_id;
  double score = 0.0;
  friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

/// Top-k by score descending, ties by ascending doc_id. Throws EmptyCorpus.
std::vector<RetrievalResult> retrieve_topk(std::string_view query, const InvertedIndex& index, std::size_t k,
                                           const Bm25Params& params = {});

/// Union of the articles of the first min(n, |results|) documents.
StatuteSet extract_statutes_topk(const std::vector<RetrievalResult>& results, const CorpusStore& store,
                                 std::size_t n = 5);

/// |gold ∩ articles(top-k)| / |gold|, with articles unioned over the top-k
/// documents. Throws EmptyGold.
double recall_at_k(const StatuteSet& gold, const std::vector<RetrievalResult>& results, const CorpusStore& store,
                   std::size_t k);

}  // namespace prag
