#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/hashing.hpp"
#include "prag/logging.hpp"

#include <atomic>
#include <unistd.h>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

namespace prag {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::empty_input: return "EmptyInput";
    case ErrorCode::missing_section: return "MissingSection";
    case ErrorCode::io_error: return "IoError";
    case ErrorCode::format_error: return "FormatError";
    case ErrorCode::empty_corpus: return "EmptyCorpus";
    case ErrorCode::unknown_doc: return "UnknownDoc";
    case ErrorCode::empty_gold: return "EmptyGold";
    case ErrorCode::rewriter_unavailable: return "RewriterUnavailable";
    case ErrorCode::context_overflow: return "ContextOverflow";
    case ErrorCode::all_masked: return "AllMasked";
    case ErrorCode::no_trace: return "NoTrace";
    case ErrorCode::empty_training_set: return "EmptyTrainingSet";
    case ErrorCode::bad_rank: return "BadRank";
    case ErrorCode::config_mismatch: return "ConfigMismatch";
    case ErrorCode::version_mismatch: return "VersionMismatch";
    case ErrorCode::checksum_failure: return "ChecksumFailure";
    case ErrorCode::missing_gold: return "MissingGold";
    case ErrorCode::missing_hypothesis: return "MissingHypothesis";
    case ErrorCode::empty_reference: return "EmptyReference";
    case ErrorCode::scorer_unavailable: return "ScorerUnavailable";
    case ErrorCode::schema_mismatch: return "SchemaMismatch";
    case ErrorCode::retrieval_empty: return "RetrievalEmpty";
    case ErrorCode::config_error: return "ConfigError";
    case ErrorCode::frozen_model: return "FrozenModel";
  }
  return "Unknown";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace log {
namespace {
std::mutex g_mutex;
std::atomic<Level> g_min_level{Level::info};

const char* level_name(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "info";
}
}  // namespace

void set_min_level(Level level) { g_min_level = level; }

void emit(Level level, std::string_view event, nlohmann::json fields) {
  if (level < g_min_level.load()) return;
  nlohmann::json line = nlohmann::json::object();
  line["level"] = level_name(level);
  line["event"] = std::string(event);
  for (auto& [k, v] : fields.items()) line[k] = v;
  const std::string text = line.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  std::lock_guard lock(g_mutex);
  std::cerr << text << '\n';
}
}  // namespace log

namespace binary {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(ErrorCode::io_error, "read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  // Unique per process and call, so concurrent writers never share a temp file.
  static std::atomic<std::uint64_t> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::io_error, "write failed: " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io_error, "rename failed for " + path.string() + ": " + ec.message());
}

}  // namespace binary
}  // namespace prag
