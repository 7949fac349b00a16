// Command-line driver: one subcommand per pipeline stage.
#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/logging.hpp"
#include "prag/pipeline.hpp"
#include "prag/synthetic.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

using nlohmann::json;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::size_t> workers;
  std::string log_level = "info";
};

prag::RunConfig load_config(const Globals& g) {
  if (g.config_path.empty()) throw prag::Error(prag::ErrorCode::config_error, "--config is required");
  prag::RunConfig cfg = prag::RunConfig::load(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.mode) cfg.mode = prag::parse_mode(*g.mode);
  if (g.workers) cfg.workers = *g.workers;
  cfg.validate();
  return cfg;
}

void print(const json& j) { std::cout << j.dump() << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parametric retrieval-augmented generation over legal judgments"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_path, "Run configuration (JSON)");
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--mode", g.mode, "base | vanilla_rag | p_rag | combine (overrides the config)");
  app.add_option("--workers", g.workers, "Worker threads (overrides the config)");
  app.add_option("--log-level", g.log_level, "debug | info | warn | error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  prag::SyntheticOptions synth_opts;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic raw corpus (offline/online/test)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--offline", synth_opts.offline, "Offline documents");
  synth->add_option("--online", synth_opts.online, "Online documents");
  synth->add_option("--test", synth_opts.test, "Test cases");
  synth->add_option("--civil-fraction", synth_opts.civil_fraction, "Share of civil cases");
  synth->add_option("--corpus-seed", synth_opts.seed, "Generator seed");

  auto* ingest = app.add_subcommand("ingest", "Parse raw judgments into JSONL stores");
  auto* index = app.add_subcommand("index", "Build the BM25 index over the online store");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the base model");
  auto* augment = app.add_subcommand("augment", "Write the QA pairs of every offline document");
  auto* train_offline = app.add_subcommand("train-offline", "Train offline adapters and the composed delta");
  auto* run = app.add_subcommand("run", "Generate for every test case in the configured mode");
  std::string run_label;
  run->add_option("--label", run_label, "Run directory name (default: the mode)");
  auto* evaluate = app.add_subcommand("evaluate", "Score generations against the test store");
  std::vector<std::string> eval_labels;
  evaluate->add_option("--label", eval_labels, "Run labels to score (default: all)");
  auto* ablate = app.add_subcommand("ablate", "Paired runs for one ablation");
  std::string ablate_kind;
  ablate->add_option("which", ablate_kind, "structure | stage | scale")
      ->required()
      ->check(CLI::IsMember({"structure", "stage", "scale"}));
  auto* report = app.add_subcommand("report", "Combine summaries and retrieval recall");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  using prag::log::Level;
  prag::log::set_min_level(g.log_level == "debug"  ? Level::debug
                           : g.log_level == "warn" ? Level::warn
                           : g.log_level == "error" ? Level::error
                                                    : Level::info);
  try {
    if (synth->parsed()) {
      prag::write_synthetic_corpus(prag::make_synthetic_corpus(synth_opts), synth_out);
      print({{"command", "synth"}, {"out", synth_out}});
      return 0;
    }
    const prag::RunConfig cfg = load_config(g);
    if (ingest->parsed()) {
      const auto s = prag::cmd_ingest(cfg);
      print({{"command", "ingest"}, {"parsed", s.parsed}, {"kept", s.kept}});
    } else if (index->parsed()) {
      prag::cmd_index(cfg);
      print({{"command", "index"}, {"path", cfg.index_path().string()}});
    } else if (pretrain->parsed()) {
      const auto r = prag::cmd_pretrain(cfg);
      print({{"command", "pretrain"}, {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}});
    } else if (augment->parsed()) {
      print({{"command", "augment"}, {"pairs", prag::cmd_augment(cfg)}});
    } else if (train_offline->parsed()) {
      const auto s = prag::cmd_train_offline(cfg);
      print({{"command", "train-offline"}, {"adapters", s.adapters}, {"trained", s.trained}, {"reused", s.reused}});
    } else if (run->parsed()) {
      const auto records = prag::cmd_run(cfg, run_label);
      print({{"command", "run"}, {"mode", prag::to_string(cfg.mode)}, {"cases", records.size()}});
    } else if (evaluate->parsed()) {
      const auto r = prag::cmd_evaluate(cfg, eval_labels);
      std::cout << prag::summary_table(r.report, cfg.doubled_scale);
      for (const auto& w : r.warnings) std::cout << "warning: " << w << "\n";
    } else if (ablate->parsed()) {
      prag::cmd_ablate(cfg, prag::parse_ablation(ablate_kind));
      print({{"command", "ablate"}, {"which", ablate_kind},
             {"report", (cfg.report_dir() / ("ablate-" + ablate_kind + ".json")).string()}});
    } else if (report->parsed()) {
      prag::cmd_report(cfg);
      std::cout << prag::binary::read_file(cfg.report_dir() / "report.txt");
    }
    return 0;
  } catch (const prag::Error& e) {
    prag::log::emit(Level::error, "failed", {{"code", prag::to_string(e.code())}, {"message", e.what()}});
    return prag::exit_code_for(e.code());
  } catch (const std::exception& e) {
    prag::log::emit(Level::error, "failed", {{"code", "Internal"}, {"message", e.what()}});
    return 3;
  }
}
