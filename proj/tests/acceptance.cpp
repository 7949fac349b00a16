// The twelve acceptance criteria, one test each. A custom main prints one
// PASS/FAIL line per criterion after the run.
#include "prag/adapters.hpp"
#include "prag/augmentation.hpp"
#include "prag/evaluation.hpp"
#include "prag/pipeline.hpp"
#include "prag/random.hpp"
#include "prag/retrieval.hpp"
#include "prag/utf8.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

namespace prag {
namespace {

using testing::TempDir;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- shared fixture

// A small pretrained base and the synthetic offline cases with their QA pairs,
// built once for the training and internalization criteria.
struct TrainedFixture {
  BaseModel base;
  std::vector<CaseDocument> offline;
  std::vector<std::vector<QAPair>> pairs;
  std::vector<std::vector<TrainingSequence>> seqs;
  std::vector<LoraAdapter> adapters;
  std::vector<double> initial_nll, final_nll;
};

TrainedFixture& trained_fixture() {
  static TrainedFixture* fx = [] {
    auto* f = new TrainedFixture;
    SyntheticOptions so;
    so.offline = 10;
    so.online = 20;
    so.test = 0;
    so.seed = 101;
    const auto corpus = make_synthetic_corpus(so);
    f->offline = testing::parse_raw(corpus.offline_raw);
    auto online = testing::parse_raw(corpus.online_raw);

    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 64;
    mc.n_heads = 4;
    mc.d_ffn = 256;
    mc.context_len = 384;
    mc.seed = 5;
    f->base = BaseModel(mc);
    CorpusStore pre = testing::store_of(f->offline);
    for (auto& d : online) pre.documents.push_back(d);
    PretrainOptions po;
    po.steps = 1500;
    po.seq_len = 128;
    po.seed = 5;
    pretrain_base(f->base, pre, po);

    BuiltinParaphraser para;
    AdapterOptions ao;
    TrainOptions to;
    for (const auto& d : f->offline) {
      const auto aug = augment_case(d, CaseRole::offline, para, derive_seed(9, d.id));
      f->pairs.push_back(expand_qa(aug));
      std::vector<TrainingSequence> s;
      for (const auto& p : f->pairs.back()) s.push_back(encode_qa(p, mc.context_len, true));
      f->seqs.push_back(std::move(s));
      f->adapters.push_back(train_adapter(f->base, d.id, f->pairs.back(), ao, to, derive_seed(9, "train:" + d.id)));
      f->initial_nll.push_back(f->adapters.back().meta.at("initial_nll").get<double>());
      f->final_nll.push_back(f->adapters.back().meta.at("final_nll").get<double>());
    }
    return f;
  }();
  return *fx;
}

// ---------------------------------------------------------------- 1

TEST(Acceptance, C01_GradientCorrectness) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc = testing::tiny_config(3);
  mc.context_len = 64;
  const BaseModel base = testing::frozen_base(mc);
  AdapterOptions ao;
  ao.rank = 2;
  // Check at a point reached by real training: B starts at zero, so a fresh
  // adapter would leave A without gradient.
  std::vector<QAPair> pairs;
  for (std::uint32_t v = 0; v < 8; ++v)
    pairs.push_back({"doc", "The defendant took " + std::to_string(1000 + v) + " yuan.", "Guilty of theft, 12 months.",
                     SectionKind::judgment, v});
  TrainOptions to;
  LoraAdapter adapter = train_adapter(base, "doc", pairs, ao, to, 17);
  Rng rng(23);
  QAPair pair{"doc", "The defendant took 3000 yuan.", "Guilty of theft, 12 months.", SectionKind::judgment, 0};
  const TrainingSequence seq = encode_qa(pair, mc.context_len, true);

  auto loss_of = [&](const LoraAdapter& a) {
    const Network net = network_with(base, a);
    return nll_loss(forward(net, seq.inputs), seq.targets, seq.mask);
  };
  const Network net = network_with(base, adapter);
  ForwardTrace trace;
  const Matrix logits = forward(net, seq.inputs, &trace);
  const LoraGrads grads = backward_lora(trace, nll_loss_grad(logits, seq.targets, seq.mask), adapter);

  const double h = 1e-3;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t fi = 0; fi < adapter.factors.size(); ++fi) {
    for (int which = 0; which < 2; ++which) {
      const std::size_t n = which == 0 ? adapter.factors[fi].a.data.size() : adapter.factors[fi].b.data.size();
      for (int s = 0; s < 24; ++s) {
        const std::size_t idx = rng.below(n);
        LoraAdapter plus = adapter, minus = adapter;
        float& p = which == 0 ? plus.factors[fi].a.data[idx] : plus.factors[fi].b.data[idx];
        float& m = which == 0 ? minus.factors[fi].a.data[idx] : minus.factors[fi].b.data[idx];
        const float x = p;
        p = static_cast<float>(x + h);
        m = static_cast<float>(x - h);
        // Divide by the perturbation actually stored after float rounding.
        const double numeric = (loss_of(plus) - loss_of(minus)) / (static_cast<double>(p) - static_cast<double>(m));
        const double analytic = which == 0 ? grads.da[fi][idx] : grads.db[fi][idx];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        if (std::abs(analytic - numeric) / denom > 1e-4)
          std::printf("  factor %zu %s[%zu]: analytic %.10e numeric %.10e\n", fi, which == 0 ? "A" : "B", idx, analytic, numeric);
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
        ++checked;
      }
    }
  }
  std::printf("  worst relative error %.3e over %zu coordinates\n", worst, checked);
  EXPECT_LT(worst, 1e-4);
  EXPECT_LT(seconds_since(t0), 60.0);
}

// ---------------------------------------------------------------- 2

TEST(Acceptance, C02_ZeroDeltaIdentity) {
  const BaseModel base = testing::frozen_base(testing::tiny_config(4));
  const Network plain(base);
  const LoraAdapter fresh = init_adapter("doc", base, AdapterOptions{}, 99);
  const Network with = network_with(base, fresh);
  const ComposedDelta composed = compose_deltas(std::vector<LoraAdapter>{fresh});
  const InjectedModel injected(base, composed);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    std::vector<Token> prompt{tokenizer::kBos};
    const std::size_t len = 1 + rng.below(60);
    for (std::size_t t = 0; t < len; ++t) prompt.push_back(static_cast<Token>(rng.below(256)));
    const Matrix a = forward(plain, prompt);
    ASSERT_EQ(a, forward(with, prompt)) << "prompt " << i;
    ASSERT_EQ(a, forward(injected.network(), prompt)) << "prompt " << i;
  }
}

// ---------------------------------------------------------------- 3

TEST(Acceptance, C03_TrainingProgress) {
  const auto t0 = std::chrono::steady_clock::now();
  auto& fx = trained_fixture();
  int decreased = 0;
  for (std::size_t i = 0; i < fx.offline.size(); ++i) {
    EXPECT_EQ(fx.pairs[i].size(), 16u);
    // Recompute the final NLL independently of the recorded value.
    const double after = mean_nll(network_with(fx.base, fx.adapters[i]), fx.seqs[i]);
    EXPECT_DOUBLE_EQ(after, fx.final_nll[i]);
    std::printf("  %s: %.4f -> %.4f\n", fx.offline[i].id.c_str(), fx.initial_nll[i], after);
    if (after < fx.initial_nll[i]) ++decreased;
  }
  EXPECT_EQ(decreased, 10);
  EXPECT_LT(seconds_since(t0), 300.0);
}

// ---------------------------------------------------------------- 4

TEST(Acceptance, C04_KnowledgeInternalization) {
  auto& fx = trained_fixture();
  const std::size_t n = fx.offline.size();
  const Network base_net(fx.base);
  std::vector<double> base_nll(n);
  for (std::size_t j = 0; j < n; ++j) base_nll[j] = mean_nll(base_net, fx.seqs[j]);
  int ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Network net = network_with(fx.base, fx.adapters[i]);
    const double own = base_nll[i] - mean_nll(net, fx.seqs[i]);
    double cross = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cross += base_nll[j] - mean_nll(net, fx.seqs[j]);
    }
    cross /= static_cast<double>(n - 1);
    const bool pass = own > 0.0 && own > cross;
    std::printf("  %s: own drop %.4f, mean cross drop %.4f %s\n", fx.offline[i].id.c_str(), own, cross,
                pass ? "" : "(miss)");
    if (pass) ++ok;
  }
  EXPECT_GE(ok, 8);
}

// ---------------------------------------------------------------- 5

TEST(Acceptance, C05_MergeAlgebra) {
  const BaseModel base = testing::frozen_base(testing::tiny_config(6));
  auto trained_like = [&](const std::string& id, std::uint64_t seed) {
    LoraAdapter a = init_adapter(id, base, AdapterOptions{}, seed);
    Rng rng(seed);
    for (auto& f : a.factors) {
      for (float& v : f.b.data) v = static_cast<float>(rng.normal(0.0, 0.01));
    }
    return a;
  };
  const LoraAdapter a = trained_like("doc-a", 1), b = trained_like("doc-b", 2);

  // Empty composition behaves like the base.
  const ComposedDelta none = compose_deltas(std::vector<LoraAdapter>{});
  EXPECT_TRUE(none.empty());
  const Network plain(base);
  const InjectedModel bare(base, none);
  const std::vector<Token> prompt = tokenizer::encode("FACTS: the defendant");
  EXPECT_EQ(forward(plain, prompt), forward(bare.network(), prompt));

  // Order invariance, bitwise.
  const ComposedDelta ab = compose_deltas(std::vector<LoraAdapter>{a, b});
  const ComposedDelta ba = compose_deltas(std::vector<LoraAdapter>{b, a});
  EXPECT_EQ(ab.deltas.w1, ba.deltas.w1);
  EXPECT_EQ(ab.deltas.w2, ba.deltas.w2);
  EXPECT_EQ(ab.provenance, ba.provenance);

  // Sequential injection (a as the offline delta, b as the online delta)
  // equals injecting the composition.
  const ComposedDelta only_a = compose_deltas(std::vector<LoraAdapter>{a});
  const ComposedDelta only_b = compose_deltas(std::vector<LoraAdapter>{b});
  const InjectedModel sequential(base, only_a, &only_b);
  const InjectedModel composed(base, ab);
  for (int l = 0; l < base.config().n_layers; ++l) {
    for (FfnMatrix m : {FfnMatrix::w1, FfnMatrix::w2}) {
      EXPECT_EQ(sequential.network().ffn_rows(l, m), composed.network().ffn_rows(l, m)) << "layer " << l;
    }
  }
  EXPECT_EQ(forward(sequential.network(), prompt), forward(composed.network(), prompt));
}

// ---------------------------------------------------------------- 6

// Exhaustive BM25, written without the inverted index.
std::vector<RetrievalResult> brute_force_bm25(const std::string& query, const CorpusStore& store, std::size_t k) {
  const double k1 = 1.5, b = 0.75;
  std::map<std::string, std::vector<std::string>> docs;
  for (const auto& d : store.documents) docs[d.id] = tokenize(d.raw_text).tokens;
  double total = 0.0;
  for (const auto& [id, toks] : docs) total += static_cast<double>(toks.size());
  const double n = static_cast<double>(docs.size());
  const double avgdl = total / n;
  std::vector<RetrievalResult> all;
  const auto q = tokenize(query).tokens;
  for (const auto& [id, toks] : docs) {
    double score = 0.0;
    for (const auto& term : q) {
      double df = 0.0;
      for (const auto& [id2, toks2] : docs) df += std::count(toks2.begin(), toks2.end(), term) > 0 ? 1.0 : 0.0;
      const double tf = static_cast<double>(std::count(toks.begin(), toks.end(), term));
      if (tf == 0.0) continue;
      const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
      score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * static_cast<double>(toks.size()) / avgdl));
    }
    all.push_back({id, score});
  }
  std::sort(all.begin(), all.end(), [](const RetrievalResult& x, const RetrievalResult& y) {
    if (x.score != y.score) return x.score > y.score;
    return x.doc_id < y.doc_id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

TEST(Acceptance, C06_Bm25OracleEquivalence) {
  SyntheticOptions so;
  so.offline = 0;
  so.online = 50;
  so.test = 0;
  so.seed = 61;
  const CorpusStore store = testing::store_of(testing::parse_raw(make_synthetic_corpus(so).online_raw));
  ASSERT_EQ(store.size(), 50u);
  const InvertedIndex index = build_index(store);
  std::vector<std::string> vocab;
  for (const auto& d : store.documents) {
    for (const auto& t : tokenize(d.raw_text).tokens) vocab.push_back(t);
  }
  vocab.push_back("unseenterm");
  Rng rng(77);
  std::size_t mismatches = 0;
  for (int qi = 0; qi < 100; ++qi) {
    std::string query;
    const std::size_t len = 1 + rng.below(12);
    for (std::size_t t = 0; t < len; ++t) query += vocab[rng.below(vocab.size())] + " ";
    const std::size_t k = 1 + rng.below(50);
    const auto got = retrieve_topk(query, index, k);
    const auto want = brute_force_bm25(query, store, k);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (got[i].doc_id != want[i].doc_id || std::abs(got[i].score - want[i].score) > 1e-9) {
        // Scores equal within 1e-9 may legitimately order differently only if
        // they are exactly tied in one computation and not the other.
        ++mismatches;
        ADD_FAILURE() << "query " << qi << " rank " << i << ": " << got[i].doc_id << " " << got[i].score << " vs "
                      << want[i].doc_id << " " << want[i].score;
        break;
      }
    }
  }
  EXPECT_EQ(mismatches, 0u);
}

// ---------------------------------------------------------------- 7

TEST(Acceptance, C07_RecallMonotonicity) {
  SyntheticOptions so;
  so.offline = 0;
  so.online = 120;
  so.test = 30;
  so.seed = 71;
  const auto corpus = make_synthetic_corpus(so);
  const CorpusStore online = testing::store_of(testing::parse_raw(corpus.online_raw));
  const auto tests = testing::parse_raw(corpus.test_raw);
  const InvertedIndex index = build_index(online);
  for (const auto& t : tests) {
    const auto results = retrieve_topk(t.fact, index, 100);
    const double r5 = recall_at_k(t.articles, results, online, 5);
    const double r20 = recall_at_k(t.articles, results, online, 20);
    const double r100 = recall_at_k(t.articles, results, online, 100);
    EXPECT_LE(r5, r20) << t.id;
    EXPECT_LE(r20, r100) << t.id;
  }
}

// ---------------------------------------------------------------- 8

TEST(Acceptance, C08_MetricSuite) {
  for (double r : {0.0, 1.0, 12.0, 3000.0, 1e9}) EXPECT_EQ(numeric_diff_metric(r, r), 0.5) << r;
  EXPECT_NEAR(numeric_diff_metric(100.0, 0.0), 1.0 - 1.0 / (1.0 + std::exp(-1.0)), 1e-9);
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double r = rng.uniform() * 1000.0;
    const double a = rng.uniform() * 1000.0;
    const double b = rng.uniform() * 1000.0;
    EXPECT_EQ(numeric_diff_metric(r, a), numeric_diff_metric(a, r));
    // On one side of r, moving further away never increases the score.
    const bool above = rng.below(2) == 1;
    const double near = above ? r + std::min(a, b) : r * (1.0 - std::min(a, b) / 1000.0);
    const double far = above ? r + std::max(a, b) : r * (1.0 - std::max(a, b) / 1000.0);
    EXPECT_LE(numeric_diff_metric(r, far), numeric_diff_metric(r, near)) << r << " " << near << " " << far;
  }
}

// ---------------------------------------------------------------- 9

TEST(Acceptance, C09_AugmentationArithmetic) {
  SyntheticOptions so;
  so.seed = 91;
  const auto corpus = make_synthetic_corpus(so);
  const auto offline = testing::parse_raw(corpus.offline_raw);
  const auto online = testing::parse_raw(corpus.online_raw);
  BuiltinParaphraser para;
  std::size_t checked = 0, failed = 0;
  auto check = [&](const CaseDocument& d, CaseRole role, std::size_t expected) {
    const auto pairs = expand_qa(augment_case(d, role, para, derive_seed(3, d.id)));
    EXPECT_EQ(pairs.size(), expected) << d.id;
    for (const auto& p : pairs) {
      ++checked;
      const bool q_ok = validate_rewrite(d.fact, p.query_text).ok;
      const bool a_ok = validate_rewrite(*section_text(d, p.answer_kind), p.answer_text).ok;
      if (!q_ok || !a_ok) ++failed;
    }
  };
  for (const auto& d : offline) check(d, CaseRole::offline, 16);
  for (const auto& d : online) check(d, CaseRole::online, 12);
  std::printf("  %zu pairs checked, %zu failed entity preservation\n", checked, failed);
  EXPECT_EQ(failed, 0u);
  EXPECT_EQ(checked, offline.size() * 16 + online.size() * 12);
}

// ---------------------------------------------------------------- 10

TEST(Acceptance, C10_CorpusFilterFidelity) {
  SyntheticOptions so;
  so.offline = 0;
  so.online = 80;
  so.test = 0;
  so.civil_fraction = 0.0;
  so.seed = 10;
  auto docs = testing::parse_raw(make_synthetic_corpus(so).online_raw);
  // Shorten some facts below the threshold.
  for (std::size_t i = 0; i < docs.size(); i += 7) {
    docs[i].fact = docs[i].fact.substr(0, 100 + i % 49);
    docs[i].char_count = utf8::count_scalars(docs[i].fact);
  }
  const CorpusStore in = testing::store_of(docs);
  const CorpusStore out = filter_corpus(in, 150, 10);
  std::map<std::string, std::size_t> per_cause;
  for (const auto& d : out.documents) {
    EXPECT_GE(d.char_count, 150u) << d.id;
    ++per_cause[d.cause_of_action];
  }
  for (const auto& [cause, n] : per_cause) EXPECT_LE(n, 10u) << cause;
  // Every kept document came from the input; no eligible document was dropped
  // while its cause still had room.
  std::map<std::string, std::size_t> eligible;
  for (const auto& d : in.documents) {
    if (d.char_count >= 150) ++eligible[d.cause_of_action];
  }
  for (const auto& [cause, n] : eligible) EXPECT_EQ(per_cause[cause], std::min<std::size_t>(n, 10)) << cause;
  EXPECT_EQ(filter_corpus(out, 150, 10), out);
}

// ---------------------------------------------------------------- 11

TEST(Acceptance, C11_Serialization) {
  TempDir dir;
  const BaseModel base = testing::frozen_base(testing::tiny_config(11));
  LoraAdapter adapter = init_adapter("doc/1", base, AdapterOptions{}, 3);
  adapter.meta["note"] = "round trip";
  save_adapter(adapter, dir / "a.plca");
  save_checkpoint(base, dir / "b.plcm");
  EXPECT_EQ(load_adapter(dir / "a.plca"), adapter);
  EXPECT_EQ(load_checkpoint(dir / "b.plcm"), base);

  auto corrupt = [&](const std::filesystem::path& p, std::size_t offset_from_end) {
    std::string bytes = binary::read_file(p);
    bytes[bytes.size() - offset_from_end] ^= 0x5a;
    binary::write_file(p, bytes);
  };
  corrupt(dir / "a.plca", 20);
  corrupt(dir / "b.plcm", 20);
  auto code_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::config_error;
  };
  EXPECT_EQ(code_of([&] { load_adapter(dir / "a.plca"); }), ErrorCode::checksum_failure);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "b.plcm"); }), ErrorCode::checksum_failure);
}

// ---------------------------------------------------------------- 12

RunConfig e2e_config(const std::filesystem::path& dir) {
  SyntheticOptions so;
  so.offline = 10;
  so.online = 20;
  so.test = 5;
  so.seed = 12;
  write_synthetic_corpus(make_synthetic_corpus(so), dir / "raw");
  const nlohmann::json j = {
      {"seed", 2024},
      {"paths", {{"raw_offline", "raw/offline.txt"}, {"raw_online", "raw/online.txt"}, {"raw_test", "raw/test.txt"},
                 {"work_dir", "work"}}},
      {"model", {{"n_layers", 2}, {"d_model", 64}, {"n_heads", 4}, {"d_ffn", 256}, {"context_len", 384}}},
      {"pretrain", {{"steps", 400}, {"seq_len", 128}}},
      {"generation", {{"max_tokens", 48}}},
      {"rewriter", {{"kind", "builtin"}}},
  };
  binary::write_file(dir / "config.json", j.dump(2));
  return RunConfig::load(dir / "config.json");
}

std::map<std::string, std::string> run_everything(const std::filesystem::path& dir) {
  RunConfig cfg = e2e_config(dir);
  cmd_ingest(cfg);
  cmd_index(cfg);
  cmd_pretrain(cfg);
  cmd_train_offline(cfg);
  std::map<std::string, std::string> artifacts;
  for (Mode m : {Mode::base, Mode::vanilla_rag, Mode::p_rag, Mode::combine}) {
    cfg.mode = m;
    cmd_run(cfg);
    const std::string label(to_string(m));
    artifacts["generations/" + label] = binary::read_file(cfg.run_dir(label) / "generations.jsonl");
  }
  cmd_evaluate(cfg);
  cmd_report(cfg);
  artifacts["summary.json"] = binary::read_file(cfg.report_dir() / "summary.json");
  artifacts["report.json"] = binary::read_file(cfg.report_dir() / "report.json");
  return artifacts;
}

TEST(Acceptance, C12_EndToEndDeterminism) {
  const auto t0 = std::chrono::steady_clock::now();
  TempDir first, second;
  const auto a = run_everything(first.path());
  const auto b = run_everything(second.path());
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) EXPECT_TRUE(bytes == b.at(name)) << name << " differs between runs";

  const auto combine = load_generations(first / "work/runs/combine/generations.jsonl");
  ASSERT_EQ(combine.size(), 5u);
  for (const auto& r : combine) {
    EXPECT_FALSE(r.offline_adapter_ids.empty()) << r.case_id;
    EXPECT_FALSE(r.online_adapter_ids.empty()) << r.case_id;
    EXPECT_FALSE(r.context_doc_ids.empty()) << r.case_id;
  }
  const double elapsed = seconds_since(t0);
  std::printf("  two full runs in %.1f s\n", elapsed);
  EXPECT_LT(elapsed / 2.0, 600.0);
}

}  // namespace
}  // namespace prag

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  const int rc = RUN_ALL_TESTS();
  const auto* suite = ::testing::UnitTest::GetInstance();
  std::printf("\nacceptance summary\n");
  for (int i = 0; i < suite->total_test_suite_count(); ++i) {
    const auto* ts = suite->GetTestSuite(i);
    for (int j = 0; j < ts->total_test_count(); ++j) {
      const auto* info = ts->GetTestInfo(j);
      if (!info->should_run()) continue;
      std::printf("%s  %s  (%.1f s)\n", info->result()->Passed() ? "PASS" : "FAIL", info->name(),
                  static_cast<double>(info->result()->elapsed_time()) / 1000.0);
    }
  }
  return rc;
}
