#include "prag/error.hpp"
#include "prag/pipeline.hpp"
#include "prag/synthetic.hpp"
#include "prag/utf8.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <memory>
#include <sys/wait.h>

namespace prag {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testing::TempDir;

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::config_error;
}

json small_config_json() {
  return {
      {"mode", "p_rag"},
      {"seed", 7},
      {"paths", {{"raw_offline", "raw/offline.txt"}, {"raw_online", "raw/online.txt"}, {"raw_test", "raw/test.txt"},
                 {"work_dir", "work"}}},
      {"filter", {{"min_chars", 50}}},
      {"model", {{"n_layers", 1}, {"d_model", 32}, {"n_heads", 2}, {"d_ffn", 64}, {"context_len", 192}}},
      {"pretrain", {{"steps", 20}, {"seq_len", 64}}},
      {"generation", {{"max_tokens", 8}}},
  };
}

void write_json(const fs::path& p, const json& j) { binary::write_file(p, j.dump(2)); }

// One prepared workspace shared by the tests: stores, index, base and the
// offline delta are built once.
class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<TempDir>();
    SyntheticOptions o;
    o.offline = 3;
    o.online = 8;
    o.test = 3;
    o.seed = 21;
    write_synthetic_corpus(make_synthetic_corpus(o), dir_->path() / "raw");
    write_json(dir_->path() / "config.json", small_config_json());
    cfg_ = RunConfig::load(dir_->path() / "config.json");
    cfg_.validate();
    cmd_ingest(cfg_);
    cmd_index(cfg_);
    cmd_pretrain(cfg_);
    first_train_ = cmd_train_offline(cfg_);
  }
  static void TearDownTestSuite() { dir_.reset(); }

  static std::unique_ptr<TempDir> dir_;
  static RunConfig cfg_;
  static TrainOfflineSummary first_train_;
};

std::unique_ptr<TempDir> PipelineTest::dir_;
RunConfig PipelineTest::cfg_;
TrainOfflineSummary PipelineTest::first_train_;

TEST(Config, UnknownKeysRejected) {
  auto j = small_config_json();
  j["modle"] = json::object();
  EXPECT_EQ(code_of([&] { RunConfig::from_json(j); }), ErrorCode::config_error);
  j = small_config_json();
  j["retrieval"] = {{"top_k", 3}};
  EXPECT_EQ(code_of([&] { RunConfig::from_json(j); }), ErrorCode::config_error);
  j = small_config_json();
  j["mode"] = "rag";
  EXPECT_EQ(code_of([&] { RunConfig::from_json(j); }), ErrorCode::config_error);
  j = small_config_json();
  j["seed"] = "seven";
  EXPECT_EQ(code_of([&] { RunConfig::from_json(j); }), ErrorCode::config_error);
}

TEST(Config, RelativePathsAndValidation) {
  const auto c = RunConfig::from_json(small_config_json(), "/base");
  EXPECT_EQ(c.raw_offline, fs::path("/base/raw/offline.txt"));
  EXPECT_EQ(c.work_dir, fs::path("/base/work"));
  EXPECT_EQ(c.store_path(StoreKind::online), fs::path("/base/work/stores/online.jsonl"));
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::config_error);  // raw files do not exist

  auto j = small_config_json();
  j["paths"].erase("raw_offline");
  j["paths"].erase("raw_online");
  j["paths"].erase("raw_test");
  j["generation"]["max_tokens"] = 192;
  EXPECT_EQ(code_of([&] { RunConfig::from_json(j).validate(); }), ErrorCode::config_error);
  j["generation"]["max_tokens"] = 8;
  EXPECT_NO_THROW(RunConfig::from_json(j).validate());
  j["rewriter"] = {{"kind", "chat"}, {"api_key", "inline-secret"}};
  EXPECT_EQ(code_of([&] { RunConfig::from_json(j).validate(); }), ErrorCode::config_error);
}

TEST(Config, JsonRoundTrip) {
  const auto c = RunConfig::from_json(small_config_json(), "/base");
  EXPECT_EQ(RunConfig::from_json(c.to_json(), "/elsewhere").to_json(), c.to_json());
}

TEST(Modes, ParseAndCapabilities) {
  EXPECT_EQ(parse_mode("combine"), Mode::combine);
  EXPECT_TRUE(uses_context(Mode::vanilla_rag));
  EXPECT_FALSE(uses_context(Mode::p_rag));
  EXPECT_TRUE(uses_injection(Mode::combine));
  EXPECT_FALSE(uses_injection(Mode::base));
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(ErrorCode::config_error), 1);
  EXPECT_EQ(exit_code_for(ErrorCode::config_mismatch), 1);
  EXPECT_EQ(exit_code_for(ErrorCode::format_error), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::io_error), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::checksum_failure), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::rewriter_unavailable), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::context_overflow), 3);
}

TEST(Prompt, FitsAndTruncatesContextPrefix) {
  bool cut = true;
  const auto p = build_prompt("ctx", "fact", SectionKind::judgment, 100, 10, &cut);
  EXPECT_FALSE(cut);
  EXPECT_EQ(p.front(), tokenizer::kBos);
  EXPECT_EQ(tokenizer::decode(p), "ctx\n\nFACTS: factJUDGMENT: ");
  EXPECT_EQ(p[p.size() - 1 - std::string("JUDGMENT: ").size()], tokenizer::kSep);

  const std::string context(500, 'c');
  const auto q = build_prompt(context + "TAIL", "fact", SectionKind::reason, 100, 10, &cut);
  EXPECT_TRUE(cut);
  EXPECT_LE(q.size(), 90u);
  const std::string text = tokenizer::decode(q);
  EXPECT_EQ(text.find("TAIL"), std::string::npos);
  EXPECT_NE(text.find("FACTS: fact"), std::string::npos);
}

TEST(Prompt, OverlongFactLosesItsStart) {
  bool cut = false;
  const std::string fact = "START" + std::string(300, 'f') + "END";
  const auto p = build_prompt("context", fact, SectionKind::article, 100, 10, &cut);
  EXPECT_TRUE(cut);
  EXPECT_LE(p.size(), 90u);
  const std::string text = tokenizer::decode(p);
  EXPECT_EQ(text.find("START"), std::string::npos);
  EXPECT_EQ(text.find("context"), std::string::npos);
  EXPECT_NE(text.find("END"), std::string::npos);
}

TEST(Prompt, CutNeverSplitsUtf8) {
  std::string context;
  for (int i = 0; i < 100; ++i) context += "盗窃";
  bool cut = false;
  const auto p = build_prompt(context, "f", SectionKind::judgment, 80, 10, &cut);
  EXPECT_TRUE(cut);
  const std::string text = tokenizer::decode(p);
  EXPECT_EQ(utf8::sanitize(text), text);
}

TEST(Context, Formats) {
  CaseDocument d;
  d.raw_text = "RAW";
  d.fact = "F";
  d.reason = "R";
  d.judgment = "J";
  d.articles = parse_citations("Article 264 of the Criminal Law");
  EXPECT_EQ(format_context({&d, &d}, ContextFormat::plain), "RAW\n\nRAW");
  EXPECT_EQ(format_context({&d}, ContextFormat::structured),
            "FACT: F\nREASON: R\nJUDGMENT: J\nARTICLES: Article 264 of the Criminal Law");
}

TEST_F(PipelineTest, IngestWroteFilteredStores) {
  const auto off = load_store(cfg_.store_path(StoreKind::offline));
  const auto on = load_store(cfg_.store_path(StoreKind::online));
  const auto test = load_store(cfg_.store_path(StoreKind::test));
  EXPECT_EQ(off.size(), 3u);
  EXPECT_EQ(on.size(), 8u);
  EXPECT_EQ(test.size(), 3u);
  for (const auto* s : {&off, &on, &test})
    for (const auto& d : s->documents) {
      EXPECT_EQ(d.fact.find("The prosecution recommended"), std::string::npos) << d.id;
      EXPECT_EQ(d.char_count, utf8::count_scalars(d.fact));
    }
}

TEST_F(PipelineTest, TrainOfflineReusesAndRetrainsOnlyMissing) {
  EXPECT_EQ(first_train_.trained.size(), 3u);
  const auto warm = cmd_train_offline(cfg_);
  EXPECT_TRUE(warm.trained.empty());
  EXPECT_EQ(warm.reused.size(), 3u);

  AdapterStore store(cfg_.offline_adapter_dir());
  const auto keys = store.keys();
  ASSERT_EQ(keys.size(), 3u);
  fs::remove(store.path_for(keys[1]));
  const auto partial = cmd_train_offline(cfg_);
  EXPECT_EQ(partial.trained, std::vector<std::string>{keys[1]});
  EXPECT_EQ(partial.reused.size(), 2u);
  EXPECT_EQ(load_composed(cfg_.offline_delta_path()).provenance.size(), 3u);
}

TEST_F(PipelineTest, TrainOfflineRetrainsWhenPairsChange) {
  const auto off = load_store(cfg_.store_path(StoreKind::offline));
  const auto& id = off.documents.front().id;
  fs::path qa;
  for (const auto& e : fs::recursive_directory_iterator(cfg_.qa_dir()))
    if (e.path().filename().string().find(id) != std::string::npos) qa = e.path();
  ASSERT_FALSE(qa.empty());
  auto pairs = load_qa_pairs(qa);
  const auto original = pairs;
  pairs.front().answer_text += " changed";
  save_qa_pairs(pairs, qa);
  EXPECT_EQ(cmd_train_offline(cfg_).trained, std::vector<std::string>{id});
  save_qa_pairs(original, qa);
  EXPECT_EQ(cmd_train_offline(cfg_).trained, std::vector<std::string>{id});
}

TEST_F(PipelineTest, BaseModeIgnoresOnlineCorpus) {
  auto cfg = cfg_;
  cfg.mode = Mode::base;
  const auto before = cmd_run(cfg, "iso-a");
  auto online = load_store(cfg.store_path(StoreKind::online));
  const auto saved = online;
  std::reverse(online.documents.begin(), online.documents.end());
  online.documents.pop_back();
  save_store(online, cfg.store_path(StoreKind::online));
  cmd_index(cfg);
  const auto after = cmd_run(cfg, "iso-b");
  save_store(saved, cfg.store_path(StoreKind::online));
  cmd_index(cfg);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(before[i].outputs.judgment, after[i].outputs.judgment);
    EXPECT_EQ(before[i].outputs.articles, after[i].outputs.articles);
    EXPECT_EQ(before[i].outputs.reasoning, after[i].outputs.reasoning);
    EXPECT_TRUE(after[i].retrieved.empty());
    EXPECT_TRUE(after[i].online_adapter_ids.empty());
    EXPECT_TRUE(after[i].offline_adapter_ids.empty());
  }
}

TEST_F(PipelineTest, PragRetrievesIdenticalDocumentFirst) {
  RunContext ctx(cfg_);
  const auto& target = ctx.online().documents.at(5);
  CaseDocument probe = target;
  probe.id = "probe-1";
  const auto rec = run_case(ctx, probe);
  ASSERT_FALSE(rec.retrieved.empty());
  EXPECT_EQ(rec.retrieved.front().doc_id, target.id);
  ASSERT_EQ(rec.online_adapter_ids.size(), 1u);
  EXPECT_TRUE(rec.online_adapter_ids.front().starts_with(target.id));
  EXPECT_EQ(rec.offline_adapter_ids.size(), 3u);
  EXPECT_TRUE(rec.context_doc_ids.empty());
  // The online adapter is cached: a second run finds it without training.
  const auto keys = ctx.online_cache().keys();
  EXPECT_EQ(run_case(ctx, probe).outputs.judgment, rec.outputs.judgment);
  EXPECT_EQ(ctx.online_cache().keys(), keys);
}

TEST_F(PipelineTest, CombineCarriesContextAndBothDeltas) {
  auto cfg = cfg_;
  cfg.mode = Mode::combine;
  const auto recs = cmd_run(cfg, "combine-test");
  ASSERT_EQ(recs.size(), 3u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.mode, "combine");
    EXPECT_EQ(r.context_doc_ids.size(), 3u);
    EXPECT_EQ(r.online_adapter_ids.size(), 1u);
    EXPECT_EQ(r.offline_adapter_ids.size(), 3u);
  }
  EXPECT_EQ(load_generations(cfg.run_dir("combine-test") / "generations.jsonl").size(), 3u);
}

TEST_F(PipelineTest, EvaluateIsIdempotentAndWarnsOnMissingGold) {
  auto cfg = cfg_;
  cfg.mode = Mode::vanilla_rag;
  auto recs = cmd_run(cfg, "eval-test");
  GenerationRecord orphan = recs.front();
  orphan.case_id = "no-such-case";
  recs.push_back(orphan);
  save_generations(recs, cfg.run_dir("eval-test") / "generations.jsonl");

  const auto first = cmd_evaluate(cfg, {"eval-test"});
  const std::string summary1 = binary::read_file(cfg.report_dir() / "summary.json");
  const auto second = cmd_evaluate(cfg, {"eval-test"});
  EXPECT_EQ(binary::read_file(cfg.report_dir() / "summary.json"), summary1);
  EXPECT_EQ(first.report, second.report);
  EXPECT_EQ(first.report.records.size(), 3u);
  ASSERT_EQ(first.warnings.size(), 1u);
  EXPECT_NE(first.warnings.front().find("no-such-case"), std::string::npos);
  EXPECT_EQ(load_records(cfg.run_dir("eval-test") / "metrics.jsonl").size(), 3u);
}

TEST_F(PipelineTest, StructureAblationRecordsConfigDiff) {
  auto cfg = cfg_;
  cfg.mode = Mode::vanilla_rag;
  const auto rep = cmd_ablate(cfg, AblationKind::structure);
  ASSERT_EQ(rep.at("variants").size(), 2u);
  EXPECT_EQ(rep.at("variants").at("plain").at("label"), "ablate-structure-plain");
  EXPECT_EQ(rep.at("variants").at("structured").at("label"), "ablate-structure-structured");
  EXPECT_NE(rep.at("config_diff").dump().find("context_format"), std::string::npos);
  EXPECT_TRUE(fs::exists(cfg.report_dir() / "ablate-structure.json"));
}

TEST_F(PipelineTest, ReportHasRecall) {
  auto cfg = cfg_;
  cfg.mode = Mode::base;
  cmd_run(cfg);
  const auto rep = cmd_report(cfg);
  EXPECT_NE(rep.dump().find("recall@5"), std::string::npos);
  EXPECT_TRUE(fs::exists(cfg.report_dir() / "report.txt"));
}

TEST_F(PipelineTest, CheckpointFromOtherConfigIsMismatch) {
  auto cfg = cfg_;
  cfg.model.d_ffn = 128;
  EXPECT_EQ(code_of([&] { RunContext ctx(cfg); }), ErrorCode::config_mismatch);
}

// Runs in its own work directory because it empties the online store.
TEST(Degradation, EmptyOnlineStore) {
  TempDir dir;
  SyntheticOptions o;
  o.offline = 2;
  o.online = 0;
  o.test = 2;
  write_synthetic_corpus(make_synthetic_corpus(o), dir.path() / "raw");
  write_json(dir / "config.json", small_config_json());
  auto cfg = RunConfig::load(dir / "config.json");
  cmd_ingest(cfg);
  EXPECT_NO_THROW(cmd_index(cfg));  // an empty index, with a warning
  cmd_pretrain(cfg);
  cmd_train_offline(cfg);
  const auto recs = cmd_run(cfg);
  ASSERT_EQ(recs.size(), 2u);
  for (const auto& r : recs) {
    EXPECT_TRUE(r.online_adapter_ids.empty());
    EXPECT_EQ(r.offline_adapter_ids.size(), 2u);
  }
  cfg.mode = Mode::vanilla_rag;
  EXPECT_EQ(code_of([&] { cmd_run(cfg); }), ErrorCode::retrieval_empty);
}

// CLI exit codes and the override flags.
int run_cli(const std::string& args, const fs::path& out = "/dev/null") {
  const std::string cmd = std::string(PRAG_CLI_PATH) + " " + args + " >" + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("ingest"), 1);  // no --config
  EXPECT_EQ(run_cli("--config " + (dir / "absent.json").string() + " ingest"), 1);

  auto j = small_config_json();
  j["extra"] = 1;
  write_json(dir / "bad.json", j);
  EXPECT_EQ(run_cli("--config " + (dir / "bad.json").string() + " ingest"), 1);

  SyntheticOptions o;
  o.offline = 2;
  o.online = 3;
  o.test = 1;
  write_synthetic_corpus(make_synthetic_corpus(o), dir.path() / "raw");
  write_json(dir / "config.json", small_config_json());
  const std::string cfg = "--config " + (dir / "config.json").string();
  EXPECT_EQ(run_cli(cfg + " --mode nonsense ingest"), 1);
  EXPECT_EQ(run_cli(cfg + " run"), 2);  // no stores or checkpoint yet
  EXPECT_EQ(run_cli(cfg + " ingest"), 0);

  // A malformed raw file is a data error.
  binary::write_file(dir / "raw" / "online.txt", "ID: x\nFACTS: only facts\n");
  EXPECT_EQ(run_cli(cfg + " ingest"), 2);

  // An unreachable rewriter is a runtime error.
  j = small_config_json();
  j["rewriter"] = {{"kind", "chat"}, {"base_url", "http://127.0.0.1:1/v1"}, {"max_retries", 0},
                   {"requests_per_sec", 0}, {"timeout_sec", 1}};
  write_json(dir / "chat.json", j);
  EXPECT_EQ(run_cli("--config " + (dir / "chat.json").string() + " augment"), 3);
}

TEST(Cli, SeedOverrideChangesPretraining) {
  TempDir dir;
  SyntheticOptions o;
  o.offline = 2;
  o.online = 3;
  o.test = 1;
  write_synthetic_corpus(make_synthetic_corpus(o), dir.path() / "raw");
  write_json(dir / "config.json", small_config_json());
  const std::string cfg = "--config " + (dir / "config.json").string();
  ASSERT_EQ(run_cli(cfg + " ingest"), 0);
  ASSERT_EQ(run_cli(cfg + " pretrain"), 0);
  const auto a = binary::read_file(dir / "work" / "base.plcm");
  ASSERT_EQ(run_cli(cfg + " --seed 8 pretrain"), 0);
  EXPECT_NE(binary::read_file(dir / "work" / "base.plcm"), a);
  ASSERT_EQ(run_cli(cfg + " --seed 7 pretrain"), 0);
  EXPECT_EQ(binary::read_file(dir / "work" / "base.plcm"), a);
  EXPECT_EQ(run_cli(cfg + " --seed 8 --mode base run"), 1);  // checkpoint was built for seed 7
  EXPECT_EQ(run_cli(cfg + " --mode base run", dir / "out.txt"), 0);
  EXPECT_TRUE(fs::exists(dir / "work" / "runs" / "base" / "generations.jsonl"));
}

}  // namespace
}  // namespace prag
