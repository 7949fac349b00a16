#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace prag {

struct CaseDocument;

enum class SectionKind { fact, reason, focus, article, judgment };

inline constexpr std::array<SectionKind, 5> kAllSections = {SectionKind::fact, SectionKind::reason, SectionKind::focus,
                                                            SectionKind::article, SectionKind::judgment};

std::string_view to_string(SectionKind k);
SectionKind parse_section_kind(std::string_view s);

/// Label that precedes a section's text in training sequences and prompts,
/// e.g. "JUDGMENT:". The fact section uses "FACTS:".
std::string_view section_label(SectionKind k);

/// The section text of a case, or nullopt when the case has no such section.
std::optional<std::string> section_text(const CaseDocument& doc, SectionKind k);

inline constexpr std::size_t kVariantsPerSection = 4;

struct AugmentedCase {
  std::string doc_id;
  std::map<SectionKind, std::vector<std::string>> variants;  // index 0 is the original
};

struct QAPair {
  std::string doc_id;
  std::string query_text;
  std::string answer_text;
  SectionKind answer_kind = SectionKind::judgment;
  std::uint32_t variant_index = 0;

  friend bool operator==(const QAPair&, const QAPair&) = default;
};

/// Rewrites one section. Implementations must be safe to call concurrently.
class Rewriter {
 public:
  virtual ~Rewriter() = default;
  virtual std::string rewrite(std::string_view text, SectionKind kind, std::uint64_t variant_seed) = 0;
  virtual std::string name() const = 0;
};

/// Deterministic offline paraphraser: seeded synonym substitution and
/// sentence-order rotation. Digit runs and statute citations are never
/// touched, so its output always validates.
class BuiltinParaphraser final : public Rewriter {
 public:
  std::string rewrite(std::string_view text, SectionKind kind, std::uint64_t variant_seed) override;
  std::string name() const override { return "builtin"; }
};

/// Token bucket: `capacity` tokens, refilled at `rate_per_sec`. acquire()
/// blocks until a token is available. A non-positive rate disables limiting.
class TokenBucket {
 public:
  TokenBucket(double rate_per_sec, double capacity);
  void acquire();

 private:
  std::mutex mu_;
  double rate_;
  double capacity_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
};

struct ChatRewriterConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string model = "gpt-4o-mini";
  double temperature = 0.7;
  std::string api_key_env = "PRAG_REWRITER_API_KEY";
  int max_retries = 3;
  double backoff_initial_sec = 1.0;
  double requests_per_sec = 2.0;
  double burst = 4.0;
  double timeout_sec = 60.0;

  static ChatRewriterConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Client for an OpenAI-compatible chat-completions endpoint. The API key is
/// read from the environment variable named in the config.
class ChatCompletionsRewriter final : public Rewriter {
 public:
  explicit ChatCompletionsRewriter(ChatRewriterConfig config);
  ~ChatCompletionsRewriter() override;

  /// Throws RewriterUnavailable once all retries are exhausted.
  std::string rewrite(std::string_view text, SectionKind kind, std::uint64_t variant_seed) override;
  std::string name() const override { return "chat:" + config_.model; }

  /// The per-kind instruction sent as the system message.
  static std::string instruction(SectionKind kind);

 private:
  ChatRewriterConfig config_;
  std::string api_key_;
  TokenBucket bucket_;
};

struct RewriteCheck {
  bool ok = true;
  std::vector<std::string> missing;  // digit runs and canonical citations absent from the variant
};

/// Every maximal ASCII digit run and every canonical statute citation of
/// `original` must occur in `variant` (digit runs as maximal runs).
RewriteCheck validate_rewrite(std::string_view original, std::string_view variant);

/// n validated variants of `text`. A variant failing validation is retried up
/// to twice with fresh seeds, then replaced by the original text.
std::vector<std::string> rewrite_section(std::string_view text, SectionKind kind, Rewriter& rewriter,
                                         std::uint64_t seed, std::size_t n = 3);

enum class CaseRole { offline, online };

/// Sections that must be present for each role. Offline: all five. Online:
/// fact, reason, article, judgment.
std::vector<SectionKind> required_sections(CaseRole role);

/// Populates four variants (original + three rewrites) per required section.
/// Throws MissingSection.
AugmentedCase augment_case(const CaseDocument& doc, CaseRole role, Rewriter& rewriter, std::uint64_t seed);

/// Index-aligned expansion: for each non-fact kind (in SectionKind order) and
/// each variant index v, pairs fact variant v with that kind's variant v.
std::vector<QAPair> expand_qa(const AugmentedCase& aug);

nlohmann::json to_json(const QAPair& p);
QAPair qa_from_json(const nlohmann::json& j, std::size_t line = 0);
void save_qa_pairs(const std::vector<QAPair>& pairs, const std::filesystem::path& path);
std::vector<QAPair> load_qa_pairs(const std::filesystem::path& path);

std::unique_ptr<Rewriter> make_rewriter(const nlohmann::json& rewriter_config);

}  // namespace prag
