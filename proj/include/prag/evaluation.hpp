#pragma once

#include "prag/corpus.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <semaphore>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace prag {

/// 1 − 1/(1 + exp(−|r−h| / (|r| + |h| + ε))). Equals 0.5 when r = h and
/// decreases towards 1 − 1/(1+e⁻¹) as the values move apart. ε only guards
/// r = h = 0; it is kept small enough that d(x, 0) is within 1e-9 of the
/// closed-form limit for x ≥ 1.
double numeric_diff_metric(double reference, double hypothesis, double epsilon = 1e-9);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Precision is 0 for an empty prediction. Throws EmptyGold.
Prf set_prf(const StatuteSet& predicted, const StatuteSet& gold);

/// Lowercased, whitespace and punctuation (ASCII and CJK) removed.
std::string normalize_charge(std::string_view charge);

/// 1 iff the normalized charges match; a missing prediction scores 0.
/// Throws MissingGold when gold is absent.
int charge_accuracy(const std::optional<std::string>& predicted, const std::optional<std::string>& gold);

struct JudgmentExtraction {
  std::optional<std::string> charge;
  std::optional<double> imprisonment_months;
  std::optional<double> probation_months;
  std::optional<double> fine_amount;
  std::optional<std::set<std::string>> civil_admin_outcome;

  friend bool operator==(const JudgmentExtraction&, const JudgmentExtraction&) = default;
};

/// Regular expressions per extracted field, plus unit multipliers.
struct FieldPatternTable {
  struct Part {
    int value_group = 1;
    int unit_group = 0;  // 0: no unit group, use `unit` or the rule's default_unit
    std::string unit;
  };
  struct Rule {
    std::string field;  // charge | imprisonment_months | probation_months | fine_amount
    std::string pattern;
    std::vector<Part> parts{Part{}};
    std::string default_unit;
    std::regex compiled;
  };
  struct OutcomeRule {
    std::string pattern;
    std::string token;
    std::regex compiled;
  };
  std::vector<Rule> rules;
  std::map<std::string, double> units;
  std::vector<OutcomeRule> outcomes;

  static FieldPatternTable defaults();
  /// Throws ConfigError on unknown fields or invalid expressions.
  static FieldPatternTable from_json(const nlohmann::json& j);
  static FieldPatternTable load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

/// First match per field, rules tried in table order. Values may be ASCII
/// digits (with thousands separators) or Chinese numerals.
JudgmentExtraction extract_fields(std::string_view generated, const FieldPatternTable& table);

/// Gold fields of a reference case: extraction from its judgment, with the
/// cause of action standing in for an unmatched charge in criminal cases.
JudgmentExtraction gold_fields(const CaseDocument& doc, const FieldPatternTable& table);

/// Multiset token overlap using the retrieval tokenizer. Throws EmptyReference.
Prf token_prf(std::string_view generated, std::string_view reference);

class SimilarityScorer {
 public:
  virtual ~SimilarityScorer() = default;
  virtual double similarity(std::string_view a, std::string_view b) = 0;
  virtual std::string name() const = 0;
};

/// Cosine of character 1–3-gram count vectors (Unicode scalars).
class NgramScorer final : public SimilarityScorer {
 public:
  double similarity(std::string_view a, std::string_view b) override;
  std::string name() const override { return "char-ngram"; }
};

struct EmbeddingScorerConfig {
  std::string base_url;  // POST {base_url}/embeddings
  std::string model;
  std::string api_key_env = "PRAG_EMBEDDING_API_KEY";
  int max_concurrency = 4;
  int max_retries = 3;
  double timeout_sec = 30.0;

  static EmbeddingScorerConfig from_json(const nlohmann::json& j);
};

/// Embeddings from an HTTP endpoint ({"model", "input"} → {"data":[{"embedding":[...]}]}).
/// At most max_concurrency requests are in flight. Throws ScorerUnavailable.
class HttpEmbeddingScorer final : public SimilarityScorer {
 public:
  explicit HttpEmbeddingScorer(EmbeddingScorerConfig config);
  double similarity(std::string_view a, std::string_view b) override;
  std::string name() const override { return "embedding:" + config_.model; }
  std::vector<double> embed(std::string_view text);

 private:
  EmbeddingScorerConfig config_;
  std::string api_key_;
  std::counting_semaphore<1024> slots_;
};

std::unique_ptr<SimilarityScorer> make_scorer(const nlohmann::json& config);

/// Throws ScorerUnavailable when scorer is null.
double semantic_similarity(std::string_view generated, std::string_view reference, SimilarityScorer* scorer);

/// The metric names a case record carries, in report order.
const std::vector<std::string>& metric_names();
/// Metric names by family: "ljp", "sag", "ldg".
const std::map<std::string, std::vector<std::string>>& metric_families();

/// A metric value is null when the reference lacks the field it needs
/// (for example no probation in the gold judgment).
struct CaseRecord {
  std::string case_id;
  std::string mode;
  std::uint64_t seed = 0;
  std::map<std::string, std::optional<double>> metrics;

  friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

/// What a run produced for one test case.
struct CaseOutputs {
  std::string judgment;
  std::string articles;
  std::string reasoning;
};

/// Scores one case. A field the gold has but the generation lacks scores 0.
CaseRecord evaluate_case(const CaseDocument& gold, const CaseOutputs& outputs, const std::string& mode,
                         std::uint64_t seed, const FieldPatternTable& table, SimilarityScorer& scorer);

struct MetricSummary {
  double mean = 0.0;
  std::size_t count = 0;
  friend bool operator==(const MetricSummary&, const MetricSummary&) = default;
};

struct EvalReport {
  std::vector<CaseRecord> records;  // sorted by (mode, case_id)
  std::map<std::string, std::map<std::string, MetricSummary>> summary;  // mode → metric → mean over non-null

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Means over non-null values per mode. Throws SchemaMismatch when records
/// carry unknown metric names or disagree on the metric set.
EvalReport aggregate(std::vector<CaseRecord> records);

nlohmann::json to_json(const CaseRecord& r);
CaseRecord record_from_json(const nlohmann::json& j, std::size_t line = 0);
void save_records(const std::vector<CaseRecord>& records, const std::filesystem::path& path);
std::vector<CaseRecord> load_records(const std::filesystem::path& path);

/// Summary object. With doubled_scale, every numeric-difference mean also
/// appears as "<name>_x2" (2·d, so an exact match scores 1).
nlohmann::json summary_json(const EvalReport& report, bool doubled_scale = false);
/// Plain-text table of the summary, one row per mode.
std::string summary_table(const EvalReport& report, bool doubled_scale = false);

}  // namespace prag
