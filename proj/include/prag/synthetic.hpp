#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace prag {

/// Seeded generator of small judgment corpora in the raw marker format
/// (ID:/DOMAIN:/CAUSE:/DATE: headers, FACTS:/FOCUS:/REASONING:/JUDGMENT:/
/// ARTICLES: sections, "=====" separators). Used for fixtures, tests and the
/// end-to-end smoke run; it has no other purpose.
struct SyntheticOptions {
  std::size_t offline = 10;
  std::size_t online = 20;
  std::size_t test = 5;
  /// Share of civil cases; the rest are criminal.
  double civil_fraction = 0.2;
  std::uint64_t seed = 7;
};

struct SyntheticCorpus {
  std::string offline_raw;
  std::string online_raw;
  std::string test_raw;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& opts);

/// Writes offline.txt, online.txt and test.txt into dir.
void write_synthetic_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

}  // namespace prag
