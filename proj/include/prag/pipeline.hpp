#pragma once

#include "prag/adapters.hpp"
#include "prag/augmentation.hpp"
#include "prag/corpus.hpp"
#include "prag/error.hpp"
#include "prag/evaluation.hpp"
#include "prag/model.hpp"
#include "prag/retrieval.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace prag {

enum class Mode { base, vanilla_rag, p_rag, combine };
std::string_view to_string(Mode m);
/// Throws ConfigError.
Mode parse_mode(std::string_view s);
bool uses_context(Mode m);
bool uses_injection(Mode m);

enum class ContextFormat { plain, structured };
std::string_view to_string(ContextFormat f);
ContextFormat parse_context_format(std::string_view s);

struct FilterSettings {
  std::size_t min_chars = 150;
  std::size_t max_per_cause = 10;
  bool strip_prosecution = true;
};

struct RetrievalSettings {
  std::size_t k_cases = 1;          // documents turned into online adapters
  std::size_t k_statutes_from = 5;  // documents whose articles are unioned
  std::size_t context_top_k = 3;    // documents placed in the prompt
  FieldSelector fields;
  Bm25Params bm25;
};

struct GenerationSettings {
  std::size_t max_tokens = 96;
  double temperature = 0.7;
};

/// Everything a run needs. Relative paths resolve against the directory of
/// the config file. Derived artifact paths all live under work_dir.
struct RunConfig {
  Mode mode = Mode::p_rag;
  std::uint64_t seed = 42;
  std::size_t workers = 1;

  std::filesystem::path raw_offline;
  std::filesystem::path raw_online;
  std::filesystem::path raw_test;
  std::filesystem::path work_dir = "work";
  std::optional<std::filesystem::path> segmentation_rules;
  std::optional<std::filesystem::path> prosecution_patterns;
  std::optional<std::filesystem::path> field_patterns;

  FilterSettings filter;
  ModelConfig model;
  PretrainOptions pretrain;
  AdapterOptions adapter;
  TrainOptions training;
  RetrievalSettings retrieval;
  GenerationSettings generation;
  ContextFormat context_format = ContextFormat::plain;
  nlohmann::json rewriter = {{"kind", "builtin"}};
  nlohmann::json scorer = {{"kind", "ngram"}};
  bool doubled_scale = false;
  /// Stage switches for the offline/online ablation.
  bool use_offline = true;
  bool use_online = true;
  /// Model used by the scale ablation; defaults to a halved copy of `model`.
  std::optional<ModelConfig> small_model;

  /// Throws ConfigError on unknown keys, bad values or bad types.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  /// Throws ConfigError when the file is missing or not JSON.
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Checks value invariants and mode-specific settings.
  void validate() const;

  std::filesystem::path store_path(StoreKind kind) const;
  std::filesystem::path index_path() const { return work_dir / "index.plix"; }
  std::filesystem::path base_path() const { return work_dir / "base.plcm"; }
  std::filesystem::path qa_dir() const { return work_dir / "qa"; }
  std::filesystem::path offline_adapter_dir() const { return work_dir / "adapters" / "offline"; }
  std::filesystem::path online_adapter_dir() const { return work_dir / "adapters" / "online"; }
  std::filesystem::path offline_delta_path() const { return work_dir / "adapters" / "offline_delta.plcd"; }
  std::filesystem::path run_dir(const std::string& label) const { return work_dir / "runs" / label; }
  std::filesystem::path report_dir() const { return work_dir / "reports"; }
};

struct IngestSummary {
  std::map<std::string, std::size_t> parsed;  // store → documents read
  std::map<std::string, std::size_t> kept;    // store → documents after filtering
};

/// Parses the raw files, filters offline/online documents, strips prosecution
/// claims from facts and writes the three JSONL stores. An unset raw path
/// yields an empty store.
IngestSummary cmd_ingest(const RunConfig& cfg);

/// Builds the BM25 index over the online store.
void cmd_index(const RunConfig& cfg);

/// Pretrains the base model on the offline and online stores and writes the
/// checkpoint. The model seed is the master seed.
PretrainReport cmd_pretrain(const RunConfig& cfg);

/// Writes the QA pairs of every offline document to qa_dir/offline/<id>.jsonl.
std::size_t cmd_augment(const RunConfig& cfg);

struct TrainOfflineSummary {
  std::vector<std::string> trained;
  std::vector<std::string> reused;
  std::size_t adapters = 0;
};

/// Trains (or reuses) one adapter per offline document and writes the
/// composed offline delta. An adapter is reused when its recorded cache key
/// matches the current base, hyperparameters, seed and QA pairs.
TrainOfflineSummary cmd_train_offline(const RunConfig& cfg);

struct GenerationRecord {
  std::string case_id;
  std::string mode;
  std::uint64_t seed = 0;
  CaseOutputs outputs;
  std::vector<RetrievalResult> retrieved;
  std::vector<std::string> context_doc_ids;
  std::vector<std::string> offline_adapter_ids;
  std::vector<std::string> online_adapter_ids;
  std::vector<std::string> retrieved_statutes;
  bool context_truncated = false;
};

nlohmann::json to_json(const GenerationRecord& r);
GenerationRecord generation_from_json(const nlohmann::json& j, std::size_t line = 0);
void save_generations(const std::vector<GenerationRecord>& records, const std::filesystem::path& path);
std::vector<GenerationRecord> load_generations(const std::filesystem::path& path);

/// Loaded artifacts shared by every case of a run. Read-only during the run
/// except for the online adapter cache, which is internally synchronized.
class RunContext {
 public:
  explicit RunContext(const RunConfig& cfg);

  const RunConfig& config() const { return cfg_; }
  const BaseModel& base() const { return base_; }
  const CorpusStore& online() const { return online_; }
  const CorpusStore& test() const { return test_; }
  const InvertedIndex* index() const { return index_ ? &*index_ : nullptr; }
  const ComposedDelta& offline_delta() const { return offline_delta_; }
  AdapterStore& online_cache() { return *online_cache_; }
  Rewriter& rewriter() { return *rewriter_; }

 private:
  RunConfig cfg_;
  BaseModel base_;
  CorpusStore online_;
  CorpusStore test_;
  std::optional<InvertedIndex> index_;
  ComposedDelta offline_delta_;
  std::unique_ptr<AdapterStore> online_cache_;
  std::unique_ptr<Rewriter> rewriter_;
};

/// The online case built from retrieval: fact, reason and judgment of the
/// document at rank `which` (0 = top-1) with the articles of the top
/// k_statutes_from documents.
CaseDocument build_online_case(const std::vector<RetrievalResult>& results, const CorpusStore& store,
                               std::size_t k_statutes_from, std::size_t which = 0);

/// Retrieved documents rendered as prompt context.
std::string format_context(const std::vector<const CaseDocument*>& docs, ContextFormat format);

/// Prompt for one generation: [BOS] context "FACTS: " fact [SEP] "<LABEL> ".
/// The context keeps its prefix and is cut to fit context_len − max_tokens;
/// a fact that alone exceeds the budget loses bytes from the left.
std::vector<Token> build_prompt(const std::string& context, const std::string& fact, SectionKind kind,
                                int context_len, std::size_t max_tokens, bool* truncated = nullptr);

/// Runs one test case in the configured mode. Throws RetrievalEmpty when
/// vanilla mode has nothing to retrieve from.
GenerationRecord run_case(RunContext& ctx, const CaseDocument& test_case);

/// Runs every test case and writes run_dir(label)/generations.jsonl.
/// The label defaults to the mode name.
std::vector<GenerationRecord> cmd_run(const RunConfig& cfg, const std::string& label = {});

struct EvaluateResult {
  EvalReport report;
  std::vector<std::string> warnings;  // e.g. generations with no gold case
};

/// Scores the generations of each label against the test store, writes
/// run_dir(label)/metrics.jsonl and reports/summary.{json,txt}. An empty
/// label list means every run directory with generations.
EvaluateResult cmd_evaluate(const RunConfig& cfg, std::vector<std::string> labels = {});

enum class AblationKind { structure, stage, scale };
AblationKind parse_ablation(std::string_view s);
std::string_view to_string(AblationKind k);

/// Runs the paired configurations and writes reports/ablate-<kind>.json with
/// each variant's config and summary side by side.
nlohmann::json cmd_ablate(const RunConfig& cfg, AblationKind kind);

/// Combines the per-mode summaries with retrieval recall@5/20/100 of the
/// test cases' gold articles; writes reports/report.{json,txt}.
nlohmann::json cmd_report(const RunConfig& cfg);

/// 0 success, 1 configuration, 2 data, 3 runtime.
int exit_code_for(ErrorCode code);

}  // namespace prag
