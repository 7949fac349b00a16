#pragma once

#include "prag/adapters.hpp"
#include "prag/binary_io.hpp"
#include "prag/corpus.hpp"
#include "prag/model.hpp"
#include "prag/synthetic.hpp"

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

namespace prag::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("prag-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ffn = 64;
  c.context_len = 96;
  c.seed = seed;
  return c;
}

inline BaseModel frozen_base(const ModelConfig& c) {
  BaseModel b(c);
  b.freeze();
  return b;
}

/// Parses a raw synthetic corpus through the real ingest path.
inline std::vector<CaseDocument> parse_raw(const std::string& raw) {
  TempDir dir;
  const auto path = dir / "raw.txt";
  binary::write_file(path, raw);
  return ingest_raw_file(path, SegmentationRules::defaults());
}

inline CorpusStore store_of(std::vector<CaseDocument> docs, StoreKind kind = StoreKind::online) {
  CorpusStore s;
  s.kind = kind;
  s.documents = std::move(docs);
  return s;
}

}  // namespace prag::testing
