#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace prag {

enum class ErrorCode {
  empty_input,
  missing_section,
  io_error,
  format_error,
  empty_corpus,
  unknown_doc,
  empty_gold,
  rewriter_unavailable,
  context_overflow,
  all_masked,
  no_trace,
  empty_training_set,
  bad_rank,
  config_mismatch,
  version_mismatch,
  checksum_failure,
  missing_gold,
  missing_hypothesis,
  empty_reference,
  scorer_unavailable,
  schema_mismatch,
  retrieval_empty,
  config_error,
  frozen_model,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so
/// callers (tests, the CLI exit-code mapping) can branch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Malformed input with a location (file path and/or 1-based line number).
class FormatError : public Error {
 public:
  FormatError(std::string path, std::size_t line, const std::string& message)
      : Error(ErrorCode::format_error, (path.empty() ? std::string() : path + ":") + "line " +
                                           std::to_string(line) + ": " + message),
        path_(std::move(path)),
        line_(line) {}

  const std::string& path() const noexcept { return path_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string path_;
  std::size_t line_;
};

}  // namespace prag
