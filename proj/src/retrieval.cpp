#include "prag/retrieval.hpp"

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/utf8.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace prag {
namespace {

bool is_separator(char32_t cp) {
  if (cp < 0x80) {
    const auto c = static_cast<char>(cp);
    return !((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9'));
  }
  // CJK symbols and punctuation, full-width forms' punctuation, general punctuation.
  if (cp >= 0x3000 && cp <= 0x303F && cp != 0x3007) return true;
  if (cp >= 0xFF00 && cp <= 0xFF0F) return true;
  if (cp >= 0xFF1A && cp <= 0xFF20) return true;
  if (cp >= 0xFF3B && cp <= 0xFF40) return true;
  if (cp >= 0xFF5B && cp <= 0xFF65) return true;
  if (cp >= 0x2000 && cp <= 0x206F) return true;
  if (cp == 0x00A0 || cp == 0xFEFF || cp == 0xFFFD) return true;
  return false;
}

constexpr std::uint32_t kIndexVersion = 1;

}  // namespace

TokenizedText tokenize(std::string_view text) {
  TokenizedText out;
  const auto cps = utf8::decode(text);
  std::size_t i = 0;
  while (i < cps.size()) {
    if (utf8::is_cjk_ideograph(cps[i])) {
      std::size_t j = i;
      while (j < cps.size() && utf8::is_cjk_ideograph(cps[j])) ++j;
      if (j - i == 1) {
        std::string t;
        utf8::append(t, cps[i]);
        out.tokens.push_back(std::move(t));
      } else {
        for (std::size_t p = i; p + 1 < j; ++p) {
          std::string t;
          utf8::append(t, cps[p]);
          utf8::append(t, cps[p + 1]);
          out.tokens.push_back(std::move(t));
        }
      }
      i = j;
    } else if (is_separator(cps[i])) {
      ++i;
    } else {
      std::string t;
      while (i < cps.size() && !utf8::is_cjk_ideograph(cps[i]) && !is_separator(cps[i])) {
        char32_t c = cps[i];
        if (c >= U'A' && c <= U'Z') c = c - U'A' + U'a';
        utf8::append(t, c);
        ++i;
      }
      out.tokens.push_back(std::move(t));
    }
  }
  return out;
}

std::string FieldSelector::text_of(const CaseDocument& doc) const {
  std::string out;
  for (IndexField f : fields) {
    if (!out.empty()) out += '\n';
    switch (f) {
      case IndexField::raw_text: out += doc.raw_text; break;
      case IndexField::fact: out += doc.fact; break;
      case IndexField::focus: out += doc.focus.value_or(""); break;
      case IndexField::reason: out += doc.reason; break;
      case IndexField::judgment: out += doc.judgment; break;
      case IndexField::articles: out += doc.articles_text(); break;
    }
  }
  return out;
}

double InvertedIndex::avg_doc_length() const {
  if (doc_ids_.empty()) throw Error(ErrorCode::empty_corpus, "index has no documents");
  return static_cast<double>(total_length_) / static_cast<double>(doc_ids_.size());
}

std::int64_t InvertedIndex::doc_number(std::string_view doc_id) const {
  auto it = std::lower_bound(doc_ids_.begin(), doc_ids_.end(), doc_id);
  if (it == doc_ids_.end() || *it != doc_id) return -1;
  return it - doc_ids_.begin();
}

std::uint32_t InvertedIndex::doc_length(std::string_view doc_id) const {
  const auto n = doc_number(doc_id);
  if (n < 0) throw Error(ErrorCode::unknown_doc, "document '" + std::string(doc_id) + "' not indexed");
  return doc_lengths_[static_cast<std::size_t>(n)];
}

std::size_t InvertedIndex::doc_frequency(const std::string& token) const {
  const auto* p = postings(token);
  return p ? p->size() : 0;
}

const std::vector<Posting>* InvertedIndex::postings(const std::string& token) const {
  auto it = postings_.find(token);
  return it == postings_.end() ? nullptr : &it->second;
}

std::uint32_t InvertedIndex::term_frequency(const std::string& token, std::uint32_t doc) const {
  const auto* list = postings(token);
  if (!list) return 0;
  auto it = std::lower_bound(list->begin(), list->end(), doc, [](const Posting& p, std::uint32_t d) { return p.doc < d; });
  return (it != list->end() && it->doc == doc) ? it->tf : 0;
}

InvertedIndex build_index(const CorpusStore& store, const FieldSelector& fields) {
  InvertedIndex index;
  index.fields_ = fields;
  std::vector<const CaseDocument*> docs;
  docs.reserve(store.documents.size());
  for (const auto& d : store.documents) docs.push_back(&d);
  std::sort(docs.begin(), docs.end(), [](const CaseDocument* a, const CaseDocument* b) { return a->id < b->id; });
  for (std::size_t i = 1; i < docs.size(); ++i) {
    if (docs[i]->id == docs[i - 1]->id)
      throw Error(ErrorCode::format_error, "duplicate document id '" + docs[i]->id + "'");
  }
  for (std::uint32_t n = 0; n < docs.size(); ++n) {
    const auto tokens = tokenize(fields.text_of(*docs[n])).tokens;
    index.doc_ids_.push_back(docs[n]->id);
    index.doc_lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
    index.total_length_ += tokens.size();
    std::map<std::string, std::uint32_t> tf;
    for (const auto& t : tokens) ++tf[t];
    for (const auto& [t, c] : tf) index.postings_[t].push_back(Posting{n, c});
  }
  return index;
}

double bm25_idf(std::size_t doc_count, std::size_t df) {
  const double n = static_cast<double>(doc_count);
  const double d = static_cast<double>(df);
  return std::log((n - d + 0.5) / (d + 0.5) + 1.0);
}

namespace {

double term_score(double idf, double tf, double dl, double avgdl, const Bm25Params& p) {
  return idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * dl / avgdl));
}

}  // namespace

double bm25_score(const TokenizedText& query, std::string_view doc_id, const InvertedIndex& index,
                  const Bm25Params& params) {
  const auto n = index.doc_number(doc_id);
  if (n < 0) throw Error(ErrorCode::unknown_doc, "document '" + std::string(doc_id) + "' not indexed");
  const auto doc = static_cast<std::uint32_t>(n);
  const double avgdl = index.avg_doc_length();
  const double dl = index.doc_lengths()[doc];
  double score = 0.0;
  for (const auto& t : query.tokens) {
    const std::uint32_t tf = index.term_frequency(t, doc);
    if (tf == 0) continue;
    score += term_score(bm25_idf(index.doc_count(), index.doc_frequency(t)), tf, dl, avgdl, params);
  }
  return score;
}

std::vector<RetrievalResult> retrieve_topk(std::string_view query, const InvertedIndex& index, std::size_t k,
                                           const Bm25Params& params) {
  if (k == 0) throw Error(ErrorCode::config_error, "k must be >= 1");
  if (index.doc_count() == 0) throw Error(ErrorCode::empty_corpus, "cannot retrieve from an empty index");
  const double avgdl = index.avg_doc_length();
  const auto& lengths = index.doc_lengths();
  // Accumulate per document in query-token order, matching bm25_score term by term.
  std::vector<double> acc(index.doc_count(), 0.0);
  for (const auto& t : tokenize(query).tokens) {
    const auto* list = index.postings(t);
    if (!list) continue;
    const double idf = bm25_idf(index.doc_count(), list->size());
    for (const auto& p : *list) acc[p.doc] += term_score(idf, p.tf, lengths[p.doc], avgdl, params);
  }
  std::vector<std::uint32_t> order(index.doc_count());
  std::iota(order.begin(), order.end(), 0u);
  const std::size_t take = std::min(k, order.size());
  // Dense numbers follow ascending doc_id, so the tie rule is ascending number.
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return acc[a] != acc[b] ? acc[a] > acc[b] : a < b; });
  std::vector<RetrievalResult> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({index.doc_ids()[order[i]], acc[order[i]]});
  return out;
}

StatuteSet extract_statutes_topk(const std::vector<RetrievalResult>& results, const CorpusStore& store,
                                 std::size_t n) {
  if (results.empty()) throw Error(ErrorCode::retrieval_empty, "no retrieval results to extract statutes from");
  StatuteSet out;
  for (std::size_t i = 0; i < std::min(n, results.size()); ++i) {
    const auto& doc = store.at(results[i].doc_id);
    out.insert(doc.articles.begin(), doc.articles.end());
  }
  return out;
}

double recall_at_k(const StatuteSet& gold, const std::vector<RetrievalResult>& results, const CorpusStore& store,
                   std::size_t k) {
  if (gold.empty()) throw Error(ErrorCode::empty_gold, "gold article set is empty");
  StatuteSet covered;
  for (std::size_t i = 0; i < std::min(k, results.size()); ++i) {
    const auto& doc = store.at(results[i].doc_id);
    covered.insert(doc.articles.begin(), doc.articles.end());
  }
  std::size_t hit = 0;
  for (const auto& g : gold) hit += covered.contains(g) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

void save_index(const InvertedIndex& index, const std::filesystem::path& path) {
  binary::Writer w;
  w.put_bytes("PLIX", 4);
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(index.fields_.fields.size()));
  for (IndexField f : index.fields_.fields) w.put<std::uint8_t>(static_cast<std::uint8_t>(f));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(index.doc_ids_.size()));
  for (std::size_t i = 0; i < index.doc_ids_.size(); ++i) {
    w.put_string(index.doc_ids_[i]);
    w.put<std::uint32_t>(index.doc_lengths_[i]);
  }
  std::vector<const std::string*> terms;
  terms.reserve(index.postings_.size());
  for (const auto& [t, _] : index.postings_) terms.push_back(&t);
  std::sort(terms.begin(), terms.end(), [](const std::string* a, const std::string* b) { return *a < *b; });
  w.put<std::uint32_t>(static_cast<std::uint32_t>(terms.size()));
  for (const auto* t : terms) {
    w.put_string(*t);
    const auto& list = index.postings_.at(*t);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(list.size()));
    for (const auto& p : list) {
      w.put<std::uint32_t>(p.doc);
      w.put<std::uint32_t>(p.tf);
    }
  }
  w.put_checksum();
  binary::write_file(path, w.bytes());
}

InvertedIndex load_index(const std::filesystem::path& path) {
  binary::Reader r(binary::read_file(path), path.string());
  if (r.remaining() < 4 || r.get_raw(4) != "PLIX") throw Error(ErrorCode::format_error, path.string() + ": not a PLIX snapshot");
  r.verify_checksum();
  const auto version = r.get<std::uint32_t>();
  if (version != kIndexVersion)
    throw Error(ErrorCode::version_mismatch, path.string() + ": index version " + std::to_string(version));
  InvertedIndex index;
  index.fields_.fields.clear();
  const auto nfields = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nfields; ++i) {
    const auto f = r.get<std::uint8_t>();
    if (f > static_cast<std::uint8_t>(IndexField::articles)) throw Error(ErrorCode::format_error, path.string() + ": bad field id");
    index.fields_.fields.push_back(static_cast<IndexField>(f));
  }
  const auto ndocs = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < ndocs; ++i) {
    index.doc_ids_.push_back(r.get_string());
    index.doc_lengths_.push_back(r.get<std::uint32_t>());
    index.total_length_ += index.doc_lengths_.back();
  }
  const auto nterms = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nterms; ++i) {
    std::string t = r.get_string();
    const auto count = r.get<std::uint32_t>();
    std::vector<Posting> list(count);
    for (auto& p : list) {
      p.doc = r.get<std::uint32_t>();
      p.tf = r.get<std::uint32_t>();
      if (p.doc >= ndocs) throw Error(ErrorCode::format_error, path.string() + ": posting doc out of range");
    }
    index.postings_.emplace(std::move(t), std::move(list));
  }
  return index;
}

}  // namespace prag
