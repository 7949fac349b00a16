#include "prag/pipeline.hpp"

#include "prag/binary_io.hpp"
#include "prag/hashing.hpp"
#include "prag/logging.hpp"
#include "prag/parallel.hpp"
#include "prag/random.hpp"
#include "prag/utf8.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <set>
#include <sstream>

namespace prag {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- enums

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::base: return "base";
    case Mode::vanilla_rag: return "vanilla_rag";
    case Mode::p_rag: return "p_rag";
    case Mode::combine: return "combine";
  }
  return "base";
}

Mode parse_mode(std::string_view s) {
  if (s == "base") return Mode::base;
  if (s == "vanilla_rag") return Mode::vanilla_rag;
  if (s == "p_rag") return Mode::p_rag;
  if (s == "combine") return Mode::combine;
  throw Error(ErrorCode::config_error, "unknown mode '" + std::string(s) + "' (base, vanilla_rag, p_rag, combine)");
}

bool uses_context(Mode m) { return m == Mode::vanilla_rag || m == Mode::combine; }
bool uses_injection(Mode m) { return m == Mode::p_rag || m == Mode::combine; }

std::string_view to_string(ContextFormat f) { return f == ContextFormat::plain ? "plain" : "structured"; }

ContextFormat parse_context_format(std::string_view s) {
  if (s == "plain") return ContextFormat::plain;
  if (s == "structured") return ContextFormat::structured;
  throw Error(ErrorCode::config_error, "context_format must be plain or structured");
}

AblationKind parse_ablation(std::string_view s) {
  if (s == "structure") return AblationKind::structure;
  if (s == "stage") return AblationKind::stage;
  if (s == "scale") return AblationKind::scale;
  throw Error(ErrorCode::config_error, "ablation must be structure, stage or scale");
}

std::string_view to_string(AblationKind k) {
  switch (k) {
    case AblationKind::structure: return "structure";
    case AblationKind::stage: return "stage";
    case AblationKind::scale: return "scale";
  }
  return "structure";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::config_error:
    case ErrorCode::config_mismatch:
    case ErrorCode::bad_rank:
      return 1;
    case ErrorCode::format_error:
    case ErrorCode::io_error:
    case ErrorCode::empty_corpus:
    case ErrorCode::missing_section:
    case ErrorCode::unknown_doc:
    case ErrorCode::empty_input:
    case ErrorCode::version_mismatch:
    case ErrorCode::checksum_failure:
    case ErrorCode::empty_gold:
    case ErrorCode::missing_gold:
    case ErrorCode::schema_mismatch:
    case ErrorCode::retrieval_empty:
      return 2;
    default:
      return 3;
  }
}

// ---------------------------------------------------------------- config

namespace {

const std::vector<std::pair<std::string, IndexField>> kFieldNames = {
    {"raw_text", IndexField::raw_text}, {"fact", IndexField::fact},         {"focus", IndexField::focus},
    {"reason", IndexField::reason},     {"judgment", IndexField::judgment}, {"articles", IndexField::articles}};

IndexField parse_field(const std::string& s) {
  for (const auto& [name, f] : kFieldNames) {
    if (name == s) return f;
  }
  throw Error(ErrorCode::config_error, "unknown index field '" + s + "'");
}

std::string field_name(IndexField f) {
  for (const auto& [name, v] : kFieldNames) {
    if (v == f) return name;
  }
  return "raw_text";
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::config_error, where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw Error(ErrorCode::config_error, "unknown key '" + k + "' in " + where);
  }
}

fs::path resolve(const fs::path& base_dir, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base_dir.empty()) return p.lexically_normal();
  return (base_dir / p).lexically_normal();
}

ModelConfig halved(const ModelConfig& m) {
  ModelConfig s = m;
  s.n_layers = std::max(1, m.n_layers / 2);
  s.n_heads = std::max(1, m.n_heads / 2);
  s.d_model = std::max(s.n_heads, m.d_model / 2 / s.n_heads * s.n_heads);
  s.d_ffn = std::max(1, m.d_ffn / 2);
  return s;
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  try {
    check_keys(j,
               {"mode", "seed", "workers", "paths", "filter", "model", "small_model", "pretrain", "adapter", "training",
                "retrieval", "generation", "context_format", "rewriter", "scorer", "report", "stages"},
               "config");
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      check_keys(p,
                 {"raw_offline", "raw_online", "raw_test", "work_dir", "segmentation_rules", "prosecution_patterns",
                  "field_patterns"},
                 "paths");
      auto get = [&](const char* key, fs::path& out) {
        if (p.contains(key)) out = p.at(key).get<std::string>();
      };
      auto get_opt = [&](const char* key, std::optional<fs::path>& out) {
        if (p.contains(key) && !p.at(key).is_null()) out = fs::path(p.at(key).get<std::string>());
      };
      get("raw_offline", c.raw_offline);
      get("raw_online", c.raw_online);
      get("raw_test", c.raw_test);
      get("work_dir", c.work_dir);
      get_opt("segmentation_rules", c.segmentation_rules);
      get_opt("prosecution_patterns", c.prosecution_patterns);
      get_opt("field_patterns", c.field_patterns);
    }
    if (j.contains("filter")) {
      const auto& f = j.at("filter");
      check_keys(f, {"min_chars", "max_per_cause", "strip_prosecution"}, "filter");
      c.filter.min_chars = f.value("min_chars", c.filter.min_chars);
      c.filter.max_per_cause = f.value("max_per_cause", c.filter.max_per_cause);
      c.filter.strip_prosecution = f.value("strip_prosecution", c.filter.strip_prosecution);
    }
    if (j.contains("model")) {
      check_keys(j.at("model"), {"n_layers", "d_model", "n_heads", "d_ffn", "context_len", "vocab_size", "seed"}, "model");
      c.model = ModelConfig::from_json(j.at("model"));
    }
    if (j.contains("small_model") && !j.at("small_model").is_null()) {
      check_keys(j.at("small_model"), {"n_layers", "d_model", "n_heads", "d_ffn", "context_len", "vocab_size", "seed"},
                 "small_model");
      c.small_model = ModelConfig::from_json(j.at("small_model"));
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      check_keys(p, {"steps", "lr", "seq_len", "batch_size", "eval_windows", "beta1", "beta2", "eps"}, "pretrain");
      c.pretrain.steps = p.value("steps", c.pretrain.steps);
      c.pretrain.lr = p.value("lr", c.pretrain.lr);
      c.pretrain.seq_len = p.value("seq_len", c.pretrain.seq_len);
      c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
      c.pretrain.eval_windows = p.value("eval_windows", c.pretrain.eval_windows);
      c.pretrain.adam.beta1 = p.value("beta1", c.pretrain.adam.beta1);
      c.pretrain.adam.beta2 = p.value("beta2", c.pretrain.adam.beta2);
      c.pretrain.adam.eps = p.value("eps", c.pretrain.adam.eps);
    }
    if (j.contains("adapter")) {
      check_keys(j.at("adapter"), {"rank", "alpha", "targets", "target_mask", "init_std"}, "adapter");
      c.adapter = AdapterOptions::from_json(j.at("adapter"));
    }
    if (j.contains("training")) {
      check_keys(j.at("training"), {"lr", "epochs", "beta1", "beta2", "eps", "answer_only"}, "training");
      c.training = TrainOptions::from_json(j.at("training"));
    }
    if (j.contains("retrieval")) {
      const auto& r = j.at("retrieval");
      check_keys(r, {"k_cases", "k_statutes_from", "context_top_k", "fields", "k1", "b"}, "retrieval");
      c.retrieval.k_cases = r.value("k_cases", c.retrieval.k_cases);
      c.retrieval.k_statutes_from = r.value("k_statutes_from", c.retrieval.k_statutes_from);
      c.retrieval.context_top_k = r.value("context_top_k", c.retrieval.context_top_k);
      c.retrieval.bm25.k1 = r.value("k1", c.retrieval.bm25.k1);
      c.retrieval.bm25.b = r.value("b", c.retrieval.bm25.b);
      if (r.contains("fields")) {
        c.retrieval.fields.fields.clear();
        for (const auto& f : r.at("fields")) c.retrieval.fields.fields.push_back(parse_field(f.get<std::string>()));
      }
    }
    if (j.contains("generation")) {
      const auto& g = j.at("generation");
      check_keys(g, {"max_tokens", "temperature"}, "generation");
      c.generation.max_tokens = g.value("max_tokens", c.generation.max_tokens);
      c.generation.temperature = g.value("temperature", c.generation.temperature);
    }
    if (j.contains("context_format")) c.context_format = parse_context_format(j.at("context_format").get<std::string>());
    if (j.contains("rewriter")) c.rewriter = j.at("rewriter");
    if (j.contains("scorer")) c.scorer = j.at("scorer");
    if (j.contains("report")) {
      check_keys(j.at("report"), {"doubled_scale"}, "report");
      c.doubled_scale = j.at("report").value("doubled_scale", c.doubled_scale);
    }
    if (j.contains("stages")) {
      check_keys(j.at("stages"), {"offline", "online"}, "stages");
      c.use_offline = j.at("stages").value("offline", c.use_offline);
      c.use_online = j.at("stages").value("online", c.use_online);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("config: ") + e.what());
  }
  c.raw_offline = resolve(base_dir, c.raw_offline);
  c.raw_online = resolve(base_dir, c.raw_online);
  c.raw_test = resolve(base_dir, c.raw_test);
  c.work_dir = resolve(base_dir, c.work_dir);
  for (auto* p : {&c.segmentation_rules, &c.prosecution_patterns, &c.field_patterns}) {
    if (*p) *p = resolve(base_dir, **p);
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::config_error, "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(binary::read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config_error, path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json RunConfig::to_json() const {
  auto opt = [](const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); };
  json fields = json::array();
  for (IndexField f : retrieval.fields.fields) fields.push_back(field_name(f));
  json adapter_json = adapter.to_json();
  json j = {
      {"mode", to_string(mode)},
      {"seed", seed},
      {"workers", workers},
      {"paths",
       {{"raw_offline", raw_offline.string()},
        {"raw_online", raw_online.string()},
        {"raw_test", raw_test.string()},
        {"work_dir", work_dir.string()},
        {"segmentation_rules", opt(segmentation_rules)},
        {"prosecution_patterns", opt(prosecution_patterns)},
        {"field_patterns", opt(field_patterns)}}},
      {"filter",
       {{"min_chars", filter.min_chars},
        {"max_per_cause", filter.max_per_cause},
        {"strip_prosecution", filter.strip_prosecution}}},
      {"model", model.to_json()},
      {"small_model", small_model ? small_model->to_json() : json(nullptr)},
      {"pretrain",
       {{"steps", pretrain.steps},
        {"lr", pretrain.lr},
        {"seq_len", pretrain.seq_len},
        {"batch_size", pretrain.batch_size},
        {"eval_windows", pretrain.eval_windows},
        {"beta1", pretrain.adam.beta1},
        {"beta2", pretrain.adam.beta2},
        {"eps", pretrain.adam.eps}}},
      {"adapter", adapter_json},
      {"training", training.to_json()},
      {"retrieval",
       {{"k_cases", retrieval.k_cases},
        {"k_statutes_from", retrieval.k_statutes_from},
        {"context_top_k", retrieval.context_top_k},
        {"fields", fields},
        {"k1", retrieval.bm25.k1},
        {"b", retrieval.bm25.b}}},
      {"generation", {{"max_tokens", generation.max_tokens}, {"temperature", generation.temperature}}},
      {"context_format", to_string(context_format)},
      {"rewriter", rewriter},
      {"scorer", scorer},
      {"report", {{"doubled_scale", doubled_scale}}},
      {"stages", {{"offline", use_offline}, {"online", use_online}}},
  };
  return j;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::config_error, m); };
  model.validate();
  if (small_model) small_model->validate();
  if (workers < 1) fail("workers must be >= 1");
  if (work_dir.empty()) fail("paths.work_dir must be set");
  if (generation.max_tokens < 1 || generation.max_tokens >= static_cast<std::size_t>(model.context_len))
    fail("generation.max_tokens must be in [1, context_len)");
  if (generation.temperature < 0.0) fail("generation.temperature must be >= 0");
  if (retrieval.fields.fields.empty()) fail("retrieval.fields must not be empty");
  if (retrieval.bm25.k1 < 0.0 || retrieval.bm25.b < 0.0 || retrieval.bm25.b > 1.0) fail("bm25 needs k1 >= 0 and b in [0, 1]");
  if (uses_injection(mode)) {
    if (retrieval.k_cases < 1) fail("retrieval.k_cases must be >= 1 for " + std::string(to_string(mode)));
    if (retrieval.k_statutes_from < retrieval.k_cases) fail("retrieval.k_statutes_from must be >= k_cases");
    if (!use_offline && !use_online) fail("stages: at least one of offline/online must be enabled");
  }
  if (uses_context(mode) && retrieval.context_top_k < 1)
    fail("retrieval.context_top_k must be >= 1 for " + std::string(to_string(mode)));
  // Configs are copied into run directories, so credentials never live in them.
  for (const json* service : {&rewriter, &scorer}) {
    if (service->is_object() && service->contains("api_key"))
      fail("api keys are read from the environment; set api_key_env instead of api_key");
  }
  if (training.lr <= 0.0 || training.epochs < 1) fail("training needs lr > 0 and epochs >= 1");
  if (pretrain.seq_len < 2 || pretrain.seq_len > static_cast<std::size_t>(model.context_len))
    fail("pretrain.seq_len must be in [2, context_len]");
  for (const fs::path* p : {&raw_offline, &raw_online, &raw_test}) {
    if (!p->empty() && !fs::exists(*p)) fail("referenced path does not exist: " + p->string());
  }
  for (const auto* p : {&segmentation_rules, &prosecution_patterns, &field_patterns}) {
    if (*p && !fs::exists(**p)) fail("referenced path does not exist: " + (*p)->string());
  }
}

fs::path RunConfig::store_path(StoreKind kind) const {
  return work_dir / "stores" / (std::string(prag::to_string(kind)) + ".jsonl");
}

// ---------------------------------------------------------------- helpers

namespace {

std::string safe_name(const std::string& id) {
  std::string stem;
  for (char c : id) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_';
    stem.push_back(keep ? c : '_');
    if (stem.size() == 48) break;
  }
  return stem + "." + hex64(fnv1a64(id)).substr(0, 8);
}

std::unique_ptr<SimilarityScorer> scorer_for(const RunConfig& cfg) { return make_scorer(cfg.scorer); }

FieldPatternTable field_table(const RunConfig& cfg) {
  return cfg.field_patterns ? FieldPatternTable::load(*cfg.field_patterns) : FieldPatternTable::defaults();
}

CorpusStore load_kind(const RunConfig& cfg, StoreKind kind) {
  const auto path = cfg.store_path(kind);
  if (!fs::exists(path))
    throw Error(ErrorCode::io_error, path.string() + " not found; run `prag ingest` first");
  return load_store(path, kind);
}

BaseModel load_base(const RunConfig& cfg) {
  const auto path = cfg.base_path();
  if (!fs::exists(path)) throw Error(ErrorCode::io_error, path.string() + " not found; run `prag pretrain` first");
  BaseModel base = load_checkpoint(path);
  ModelConfig want = cfg.model;
  want.seed = cfg.seed;
  if (!(base.config() == want))
    throw Error(ErrorCode::config_mismatch, path.string() + " was trained with " + base.config().to_json().dump() +
                                                ", config asks for " + want.to_json().dump() + "; rerun pretrain");
  if (!base.frozen()) base.freeze();
  return base;
}

std::vector<QAPair> offline_pairs(const RunConfig& cfg, const CaseDocument& doc, Rewriter& rewriter) {
  const AugmentedCase aug =
      augment_case(doc, CaseRole::offline, rewriter, derive_seed(cfg.seed, "augment:offline:" + doc.id));
  return expand_qa(aug);
}

fs::path offline_qa_path(const RunConfig& cfg, const std::string& id) {
  return cfg.qa_dir() / "offline" / (safe_name(id) + ".jsonl");
}

std::string offline_cache_key(const BaseModel& base, const RunConfig& cfg, std::uint64_t seed,
                              const std::vector<QAPair>& pairs) {
  Fnv1a64 h;
  h.update(hex64(base.fingerprint()));
  h.update(cfg.adapter.to_json().dump());
  h.update(cfg.training.to_json().dump());
  h.update_pod(seed);
  for (const auto& p : pairs) h.update(to_json(p).dump());
  return hex64(h.digest());
}

std::string statute_hash(const StatuteSet& s) {
  Fnv1a64 h;
  for (const auto& ref : s) {
    h.update(ref.canonical());
    h.update("\n");
  }
  return hex64(h.digest()).substr(0, 8);
}

// Keeps the longest prefix of at most n bytes that does not split a UTF-8 sequence.
std::string utf8_prefix(const std::string& s, std::size_t n) {
  if (n >= s.size()) return s;
  while (n > 0 && (static_cast<unsigned char>(s[n]) & 0xC0) == 0x80) --n;
  return s.substr(0, n);
}

// Drops at least n leading bytes, moving forward to a sequence boundary.
std::string utf8_drop_front(const std::string& s, std::size_t n) {
  if (n >= s.size()) return {};
  while (n < s.size() && (static_cast<unsigned char>(s[n]) & 0xC0) == 0x80) ++n;
  return s.substr(n);
}

void append_tokens(std::vector<Token>& out, std::string_view text) {
  const auto t = tokenizer::encode(text);
  out.insert(out.end(), t.begin(), t.end());
}

json summary_of(const EvalReport& report, bool doubled) { return summary_json(report, doubled); }

}  // namespace

// ---------------------------------------------------------------- ingest / index / pretrain

IngestSummary cmd_ingest(const RunConfig& cfg) {
  const auto rules = cfg.segmentation_rules ? SegmentationRules::load(*cfg.segmentation_rules) : SegmentationRules::defaults();
  const auto patterns =
      cfg.prosecution_patterns ? PatternTable::load(*cfg.prosecution_patterns) : PatternTable::default_prosecution();
  IngestSummary summary;
  const std::pair<StoreKind, fs::path> inputs[] = {
      {StoreKind::offline, cfg.raw_offline}, {StoreKind::online, cfg.raw_online}, {StoreKind::test, cfg.raw_test}};
  for (const auto& [kind, raw] : inputs) {
    CorpusStore store;
    store.kind = kind;
    if (!raw.empty()) store.documents = ingest_raw_file(raw, rules);
    if (cfg.filter.strip_prosecution) {
      for (auto& d : store.documents) {
        d.fact = strip_prosecution_claims(d.fact, patterns);
        d.char_count = utf8::count_scalars(d.fact);
      }
    }
    const std::string name(to_string(kind));
    summary.parsed[name] = store.size();
    if (kind != StoreKind::test) store = filter_corpus(store, cfg.filter.min_chars, cfg.filter.max_per_cause);
    store.kind = kind;
    summary.kept[name] = store.size();
    save_store(store, cfg.store_path(kind));
    log::info("ingest_store", {{"store", name}, {"parsed", summary.parsed[name]}, {"kept", store.size()},
                               {"path", cfg.store_path(kind).string()}});
  }
  return summary;
}

void cmd_index(const RunConfig& cfg) {
  const CorpusStore online = load_kind(cfg, StoreKind::online);
  if (online.empty()) log::warn("online_store_empty", {{"path", cfg.store_path(StoreKind::online).string()}});
  const InvertedIndex index = build_index(online, cfg.retrieval.fields);
  save_index(index, cfg.index_path());
  log::info("index_built", {{"documents", index.doc_count()}, {"terms", index.term_count()},
                            {"path", cfg.index_path().string()}});
}

PretrainReport cmd_pretrain(const RunConfig& cfg) {
  CorpusStore corpus = load_kind(cfg, StoreKind::offline);
  for (auto& d : load_kind(cfg, StoreKind::online).documents) corpus.documents.push_back(std::move(d));
  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  BaseModel base(mc);
  PretrainOptions opts = cfg.pretrain;
  opts.seed = cfg.seed;
  const PretrainReport report = pretrain_base(base, corpus, opts);
  save_checkpoint(base, cfg.base_path());
  const json summary = {{"initial_loss", report.initial_loss},
                        {"final_loss", report.final_loss},
                        {"steps", report.step_losses.size()},
                        {"documents", corpus.size()},
                        {"fingerprint", hex64(base.fingerprint())}};
  binary::write_file(cfg.work_dir / "pretrain_report.json", summary.dump(2) + "\n");
  log::info("checkpoint_saved", summary);
  return report;
}

std::size_t cmd_augment(const RunConfig& cfg) {
  const CorpusStore offline = load_kind(cfg, StoreKind::offline);
  auto rewriter = make_rewriter(cfg.rewriter);
  std::atomic<std::size_t> total{0};
  parallel_for(offline.size(), cfg.workers, [&](std::size_t i) {
    const auto& doc = offline.documents[i];
    const auto pairs = offline_pairs(cfg, doc, *rewriter);
    save_qa_pairs(pairs, offline_qa_path(cfg, doc.id));
    total += pairs.size();
  });
  log::info("augment_done", {{"documents", offline.size()}, {"pairs", total.load()}});
  return total.load();
}

// ---------------------------------------------------------------- offline stage

TrainOfflineSummary cmd_train_offline(const RunConfig& cfg) {
  const BaseModel base = load_base(cfg);
  const CorpusStore offline = load_kind(cfg, StoreKind::offline);
  AdapterStore store(cfg.offline_adapter_dir());
  auto rewriter = make_rewriter(cfg.rewriter);
  std::vector<int> trained(offline.size(), 0);

  parallel_for(offline.size(), cfg.workers, [&](std::size_t i) {
    const auto& doc = offline.documents[i];
    const auto qa_path = offline_qa_path(cfg, doc.id);
    std::vector<QAPair> pairs;
    if (fs::exists(qa_path)) {
      pairs = load_qa_pairs(qa_path);
    } else {
      pairs = offline_pairs(cfg, doc, *rewriter);
      save_qa_pairs(pairs, qa_path);
    }
    const std::uint64_t seed = derive_seed(cfg.seed, "offline:" + doc.id);
    const std::string key = offline_cache_key(base, cfg, seed, pairs);
    if (store.contains(doc.id)) {
      const LoraAdapter cached = store.get(doc.id);
      if (cached.meta.value("cache_key", std::string()) == key) return;
    }
    LoraAdapter adapter = train_adapter(base, doc.id, pairs, cfg.adapter, cfg.training, seed);
    adapter.meta["cache_key"] = key;
    store.put(adapter);
    trained[i] = 1;
    log::info("offline_adapter_trained", {{"doc_id", doc.id},
                                          {"pairs", pairs.size()},
                                          {"initial_nll", adapter.meta.value("initial_nll", 0.0)},
                                          {"final_nll", adapter.meta.value("final_nll", 0.0)}});
  });

  TrainOfflineSummary summary;
  std::vector<LoraAdapter> adapters;
  adapters.reserve(offline.size());
  for (std::size_t i = 0; i < offline.size(); ++i) {
    const auto& id = offline.documents[i].id;
    (trained[i] ? summary.trained : summary.reused).push_back(id);
    adapters.push_back(store.get(id));
  }
  summary.adapters = adapters.size();
  ComposedDelta composed = compose_deltas(adapters);
  if (composed.empty()) composed.config_hash = base.fingerprint();
  save_composed(composed, cfg.offline_delta_path());
  log::info("offline_stage_done", {{"adapters", summary.adapters},
                                   {"trained", summary.trained.size()},
                                   {"reused", summary.reused.size()},
                                   {"delta", cfg.offline_delta_path().string()}});
  return summary;
}

// ---------------------------------------------------------------- generation records

json to_json(const GenerationRecord& r) {
  json retrieved = json::array();
  for (const auto& x : r.retrieved) retrieved.push_back({{"doc_id", x.doc_id}, {"score", x.score}});
  return {{"case_id", r.case_id},
          {"mode", r.mode},
          {"seed", r.seed},
          {"outputs", {{"judgment", r.outputs.judgment}, {"articles", r.outputs.articles}, {"reasoning", r.outputs.reasoning}}},
          {"retrieved", retrieved},
          {"context_doc_ids", r.context_doc_ids},
          {"offline_adapter_ids", r.offline_adapter_ids},
          {"online_adapter_ids", r.online_adapter_ids},
          {"retrieved_statutes", r.retrieved_statutes},
          {"context_truncated", r.context_truncated}};
}

GenerationRecord generation_from_json(const json& j, std::size_t line) {
  GenerationRecord r;
  try {
    r.case_id = j.at("case_id").get<std::string>();
    r.mode = j.at("mode").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    const auto& o = j.at("outputs");
    r.outputs.judgment = o.at("judgment").get<std::string>();
    r.outputs.articles = o.at("articles").get<std::string>();
    r.outputs.reasoning = o.at("reasoning").get<std::string>();
    for (const auto& x : j.at("retrieved"))
      r.retrieved.push_back({x.at("doc_id").get<std::string>(), x.at("score").get<double>()});
    r.context_doc_ids = j.at("context_doc_ids").get<std::vector<std::string>>();
    r.offline_adapter_ids = j.at("offline_adapter_ids").get<std::vector<std::string>>();
    r.online_adapter_ids = j.at("online_adapter_ids").get<std::vector<std::string>>();
    r.retrieved_statutes = j.at("retrieved_statutes").get<std::vector<std::string>>();
    r.context_truncated = j.at("context_truncated").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError("", line, std::string("generation record: ") + e.what());
  }
  return r;
}

void save_generations(const std::vector<GenerationRecord>& records, const fs::path& path) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  binary::write_file(path, out);
}

std::vector<GenerationRecord> load_generations(const fs::path& path) {
  std::istringstream in(binary::read_file(path));
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(generation_from_json(json::parse(line), n));
    } catch (const FormatError& e) {
      throw FormatError(path.string(), n, e.what());
    } catch (const json::exception& e) {
      throw FormatError(path.string(), n, e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- run

RunContext::RunContext(const RunConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  base_ = load_base(cfg_);
  test_ = load_kind(cfg_, StoreKind::test);
  const bool retrieval = uses_context(cfg_.mode) || (uses_injection(cfg_.mode) && cfg_.use_online);
  if (retrieval) {
    online_ = load_kind(cfg_, StoreKind::online);
    if (!online_.empty()) {
      if (!fs::exists(cfg_.index_path()))
        throw Error(ErrorCode::io_error, cfg_.index_path().string() + " not found; run `prag index` first");
      index_ = load_index(cfg_.index_path());
      if (index_->doc_count() != online_.size())
        throw Error(ErrorCode::config_mismatch, "index and online store disagree on document count; rerun index");
    }
  }
  if (uses_injection(cfg_.mode) && cfg_.use_offline) {
    if (!fs::exists(cfg_.offline_delta_path()))
      throw Error(ErrorCode::io_error, cfg_.offline_delta_path().string() + " not found; run `prag train-offline` first");
    offline_delta_ = load_composed(cfg_.offline_delta_path());
    if (offline_delta_.config_hash != base_.fingerprint())
      throw Error(ErrorCode::config_mismatch, "offline delta was built for a different base; rerun train-offline");
  }
  online_cache_ = std::make_unique<AdapterStore>(cfg_.online_adapter_dir());
  rewriter_ = make_rewriter(cfg_.rewriter);
}

CaseDocument build_online_case(const std::vector<RetrievalResult>& results, const CorpusStore& store,
                               std::size_t k_statutes_from, std::size_t which) {
  if (which >= results.size()) throw Error(ErrorCode::retrieval_empty, "no document at retrieval rank " + std::to_string(which));
  const CaseDocument& top = store.at(results[which].doc_id);
  CaseDocument c;
  c.id = top.id;
  c.domain = top.domain;
  c.cause_of_action = top.cause_of_action;
  c.fact = top.fact;
  c.reason = top.reason;
  c.judgment = top.judgment;
  c.articles = extract_statutes_topk(results, store, k_statutes_from);
  c.char_count = top.char_count;
  c.published_date = top.published_date;
  c.raw_text = top.raw_text;
  return c;
}

std::string format_context(const std::vector<const CaseDocument*>& docs, ContextFormat format) {
  std::string out;
  for (const CaseDocument* d : docs) {
    if (!out.empty()) out += "\n\n";
    if (format == ContextFormat::plain) {
      out += d->raw_text;
    } else {
      out += "FACT: " + d->fact + "\nREASON: " + d->reason + "\nJUDGMENT: " + d->judgment + "\nARTICLES: " +
             d->articles_text();
    }
  }
  return out;
}

std::vector<Token> build_prompt(const std::string& context, const std::string& fact, SectionKind kind, int context_len,
                                std::size_t max_tokens, bool* truncated) {
  static const std::string kSep = "\n\n";
  const std::string head = std::string(section_label(SectionKind::fact)) + " ";
  const std::string label = std::string(section_label(kind)) + " ";
  const std::size_t limit = static_cast<std::size_t>(std::max(context_len, 0));
  const std::size_t budget = limit > max_tokens ? limit - max_tokens : 0;
  const std::size_t fixed = 2 + head.size() + label.size();
  bool cut = false;
  std::string fact_used = fact;
  std::string ctx;
  if (fixed + fact.size() > budget) {
    const std::size_t over = fixed + fact.size() - budget;
    fact_used = utf8_drop_front(fact, over);
    cut = !context.empty() || over > 0;
  } else if (!context.empty()) {
    const std::size_t avail = budget - fixed - fact.size();
    if (context.size() + kSep.size() <= avail) {
      ctx = context + kSep;
    } else {
      cut = true;
      if (avail > kSep.size()) ctx = utf8_prefix(context, avail - kSep.size()) + kSep;
    }
  }
  if (truncated) *truncated = cut;
  std::vector<Token> tokens{tokenizer::kBos};
  append_tokens(tokens, ctx);
  append_tokens(tokens, head + fact_used);
  tokens.push_back(tokenizer::kSep);
  append_tokens(tokens, label);
  return tokens;
}

GenerationRecord run_case(RunContext& ctx, const CaseDocument& test_case) {
  const RunConfig& cfg = ctx.config();
  const Mode mode = cfg.mode;
  GenerationRecord rec;
  rec.case_id = test_case.id;
  rec.mode = std::string(to_string(mode));
  rec.seed = cfg.seed;

  const bool want_context = uses_context(mode);
  const bool want_online = uses_injection(mode) && cfg.use_online;
  std::vector<RetrievalResult> results;
  if (want_context || want_online) {
    if (!ctx.index()) {
      if (mode == Mode::vanilla_rag)
        throw Error(ErrorCode::retrieval_empty, "online store is empty; vanilla_rag has no context for " + test_case.id);
      log::warn("online_store_empty", {{"case_id", test_case.id}, {"mode", rec.mode}, {"fallback", "offline-only"}});
    } else {
      std::size_t k = want_online ? std::max(cfg.retrieval.k_cases, cfg.retrieval.k_statutes_from) : 0;
      if (want_context) k = std::max(k, cfg.retrieval.context_top_k);
      results = retrieve_topk(test_case.fact, *ctx.index(), k, cfg.retrieval.bm25);
      if (results.empty()) throw Error(ErrorCode::retrieval_empty, "no documents retrieved for " + test_case.id);
    }
  }
  rec.retrieved = results;
  if (!results.empty()) {
    for (const auto& s : extract_statutes_topk(results, ctx.online(), cfg.retrieval.k_statutes_from))
      rec.retrieved_statutes.push_back(s.canonical());
  }

  ComposedDelta online_delta;
  if (want_online && !results.empty()) {
    std::vector<LoraAdapter> adapters;
    const std::size_t n = std::min(cfg.retrieval.k_cases, results.size());
    for (std::size_t i = 0; i < n; ++i) {
      const CaseDocument oc = build_online_case(results, ctx.online(), cfg.retrieval.k_statutes_from, i);
      const std::string key = oc.id + "@" + statute_hash(oc.articles);
      const std::uint64_t seed = derive_seed(cfg.seed, "online:" + key);
      Fnv1a64 h;
      h.update(hex64(ctx.base().fingerprint()));
      h.update(cfg.adapter.to_json().dump());
      h.update(cfg.training.to_json().dump());
      h.update(cfg.rewriter.dump());
      h.update_pod(seed);
      h.update(to_json(oc).dump());
      const std::string cache_key = hex64(h.digest());
      std::optional<LoraAdapter> adapter;
      if (ctx.online_cache().contains(key)) {
        LoraAdapter cached = ctx.online_cache().get(key);
        if (cached.meta.value("cache_key", std::string()) == cache_key) adapter = std::move(cached);
      }
      if (!adapter) {
        const AugmentedCase aug =
            augment_case(oc, CaseRole::online, ctx.rewriter(), derive_seed(cfg.seed, "augment:online:" + key));
        const auto pairs = expand_qa(aug);
        adapter = train_adapter(ctx.base(), oc.id, pairs, cfg.adapter, cfg.training, seed);
        adapter->meta["cache_key"] = cache_key;
        ctx.online_cache().put(key, *adapter);
        log::info("online_adapter_trained", {{"key", key},
                                             {"case_id", test_case.id},
                                             {"pairs", pairs.size()},
                                             {"initial_nll", adapter->meta.value("initial_nll", 0.0)},
                                             {"final_nll", adapter->meta.value("final_nll", 0.0)}});
      }
      rec.online_adapter_ids.push_back(key);
      adapters.push_back(std::move(*adapter));
    }
    online_delta = compose_deltas(adapters);
  }

  static const ComposedDelta kNoDelta{};
  const ComposedDelta& offline = uses_injection(mode) && cfg.use_offline ? ctx.offline_delta() : kNoDelta;
  rec.offline_adapter_ids = offline.provenance;
  const InjectedModel model(ctx.base(), offline, online_delta.empty() ? nullptr : &online_delta);

  std::string context;
  if (want_context && !results.empty()) {
    std::vector<const CaseDocument*> docs;
    for (std::size_t i = 0; i < std::min(cfg.retrieval.context_top_k, results.size()); ++i) {
      docs.push_back(&ctx.online().at(results[i].doc_id));
      rec.context_doc_ids.push_back(results[i].doc_id);
    }
    context = format_context(docs, cfg.context_format);
  }

  const std::pair<SectionKind, std::string CaseOutputs::*> outputs[] = {{SectionKind::judgment, &CaseOutputs::judgment},
                                                                        {SectionKind::article, &CaseOutputs::articles},
                                                                        {SectionKind::reason, &CaseOutputs::reasoning}};
  for (const auto& [kind, field] : outputs) {
    bool truncated = false;
    const auto prompt = build_prompt(context, test_case.fact, kind, model.network().config().context_len,
                                     cfg.generation.max_tokens, &truncated);
    rec.context_truncated = rec.context_truncated || truncated;
    SamplingOptions so;
    so.max_tokens = cfg.generation.max_tokens;
    so.temperature = cfg.generation.temperature;
    so.seed = derive_seed(cfg.seed, "sample:" + test_case.id + ":" + std::string(to_string(kind)));
    rec.outputs.*field = utf8::sanitize(generate(model.network(), prompt, so));
  }
  if (rec.context_truncated)
    log::info("context_truncated", {{"case_id", test_case.id}, {"mode", rec.mode}, {"context_bytes", context.size()}});
  return rec;
}

std::vector<GenerationRecord> cmd_run(const RunConfig& cfg, const std::string& label) {
  RunContext ctx(cfg);
  const auto& cases = ctx.test().documents;
  if (cases.empty()) log::warn("test_store_empty", {{"path", cfg.store_path(StoreKind::test).string()}});
  std::vector<GenerationRecord> records(cases.size());
  parallel_for(cases.size(), cfg.workers, [&](std::size_t i) { records[i] = run_case(ctx, cases[i]); });
  const std::string name = label.empty() ? std::string(to_string(cfg.mode)) : label;
  save_generations(records, cfg.run_dir(name) / "generations.jsonl");
  binary::write_file(cfg.run_dir(name) / "config.json", cfg.to_json().dump(2) + "\n");
  log::info("run_done", {{"label", name}, {"mode", to_string(cfg.mode)}, {"cases", records.size()}});
  return records;
}

// ---------------------------------------------------------------- evaluation and reports

namespace {

std::vector<std::string> run_labels(const RunConfig& cfg) {
  std::vector<std::string> labels;
  const auto runs = cfg.work_dir / "runs";
  if (!fs::exists(runs)) return labels;
  for (const auto& e : fs::directory_iterator(runs)) {
    if (e.is_directory() && fs::exists(e.path() / "generations.jsonl")) labels.push_back(e.path().filename().string());
  }
  std::sort(labels.begin(), labels.end());
  return labels;
}

EvaluateResult evaluate_labels(const RunConfig& cfg, const std::vector<std::string>& labels) {
  const CorpusStore test = load_kind(cfg, StoreKind::test);
  const FieldPatternTable table = field_table(cfg);
  auto scorer = scorer_for(cfg);
  EvaluateResult result;
  std::vector<CaseRecord> all;
  for (const auto& label : labels) {
    const auto path = cfg.run_dir(label) / "generations.jsonl";
    if (!fs::exists(path)) throw Error(ErrorCode::io_error, path.string() + " not found; run `prag run` first");
    const auto gens = load_generations(path);
    std::vector<std::optional<CaseRecord>> scored(gens.size());
    for (const auto& g : gens) {
      if (!test.find(g.case_id)) result.warnings.push_back("MissingGold: no test case '" + g.case_id + "' for " + label);
    }
    parallel_for(gens.size(), cfg.workers, [&](std::size_t i) {
      const CaseDocument* gold = test.find(gens[i].case_id);
      if (!gold) return;
      scored[i] = evaluate_case(*gold, gens[i].outputs, label, gens[i].seed, table, *scorer);
    });
    std::vector<CaseRecord> records;
    for (auto& s : scored) {
      if (s) records.push_back(std::move(*s));
    }
    save_records(records, cfg.run_dir(label) / "metrics.jsonl");
    all.insert(all.end(), records.begin(), records.end());
  }
  for (const auto& w : result.warnings) log::warn("evaluate_warning", {{"message", w}});
  result.report = aggregate(std::move(all));
  return result;
}

}  // namespace

EvaluateResult cmd_evaluate(const RunConfig& cfg, std::vector<std::string> labels) {
  if (labels.empty()) labels = run_labels(cfg);
  if (labels.empty()) throw Error(ErrorCode::io_error, "no generations under " + (cfg.work_dir / "runs").string());
  EvaluateResult result = evaluate_labels(cfg, labels);
  json out = {{"summary", summary_of(result.report, cfg.doubled_scale)}, {"warnings", result.warnings}};
  binary::write_file(cfg.report_dir() / "summary.json", out.dump(2) + "\n");
  binary::write_file(cfg.report_dir() / "summary.txt", summary_table(result.report, cfg.doubled_scale));
  log::info("evaluate_done", {{"labels", labels}, {"records", result.report.records.size()},
                              {"warnings", result.warnings.size()}});
  return result;
}

nlohmann::json cmd_ablate(const RunConfig& cfg, AblationKind kind) {
  struct Variant {
    std::string name;
    RunConfig cfg;
    std::string label;
  };
  std::vector<Variant> variants;
  const std::string prefix = "ablate-" + std::string(to_string(kind)) + "-";
  switch (kind) {
    case AblationKind::structure: {
      RunConfig base = cfg;
      if (!uses_context(base.mode)) base.mode = Mode::vanilla_rag;
      for (ContextFormat f : {ContextFormat::plain, ContextFormat::structured}) {
        RunConfig v = base;
        v.context_format = f;
        variants.push_back({std::string(to_string(f)), v, prefix + std::string(to_string(f))});
      }
      break;
    }
    case AblationKind::stage: {
      RunConfig base = cfg;
      if (!uses_injection(base.mode)) base.mode = Mode::p_rag;
      RunConfig off = base;
      off.use_offline = true;
      off.use_online = false;
      RunConfig on = base;
      on.use_offline = false;
      on.use_online = true;
      variants.push_back({"offline_only", off, prefix + "offline_only"});
      variants.push_back({"online_only", on, prefix + "online_only"});
      break;
    }
    case AblationKind::scale: {
      RunConfig small = cfg;
      small.model = cfg.small_model ? *cfg.small_model : halved(cfg.model);
      small.model.context_len = cfg.model.context_len;
      small.small_model.reset();
      small.work_dir = cfg.work_dir / "scale-small";
      for (StoreKind k : {StoreKind::offline, StoreKind::online, StoreKind::test})
        binary::write_file(small.store_path(k), binary::read_file(cfg.store_path(k)));
      if (fs::exists(cfg.index_path())) binary::write_file(small.index_path(), binary::read_file(cfg.index_path()));
      cmd_pretrain(small);
      if (uses_injection(small.mode) && small.use_offline) cmd_train_offline(small);
      variants.push_back({"base_model", cfg, prefix + "base_model"});
      variants.push_back({"small_model", small, prefix + "small_model"});
      break;
    }
  }

  json out = {{"kind", to_string(kind)}, {"variants", json::object()}};
  for (const auto& v : variants) {
    v.cfg.validate();
    cmd_run(v.cfg, v.label);
    const EvaluateResult r = evaluate_labels(v.cfg, {v.label});
    out["variants"][v.name] = {{"label", v.label},
                               {"config", v.cfg.to_json()},
                               {"summary", summary_of(r.report, cfg.doubled_scale)}};
  }
  out["config_diff"] = json::diff(variants[0].cfg.to_json(), variants[1].cfg.to_json());
  binary::write_file(cfg.report_dir() / ("ablate-" + std::string(to_string(kind)) + ".json"), out.dump(2) + "\n");
  log::info("ablate_done", {{"kind", to_string(kind)}});
  return out;
}

nlohmann::json cmd_report(const RunConfig& cfg) {
  std::vector<CaseRecord> records;
  for (const auto& label : run_labels(cfg)) {
    const auto path = cfg.run_dir(label) / "metrics.jsonl";
    if (!fs::exists(path)) continue;
    auto r = load_records(path);
    records.insert(records.end(), r.begin(), r.end());
  }
  if (records.empty()) records = cmd_evaluate(cfg).report.records;
  const EvalReport report = aggregate(std::move(records));

  json retrieval = json::object();
  const auto online_path = cfg.store_path(StoreKind::online);
  if (fs::exists(cfg.index_path()) && fs::exists(online_path)) {
    const CorpusStore online = load_store(online_path, StoreKind::online);
    const CorpusStore test = load_kind(cfg, StoreKind::test);
    const InvertedIndex index = load_index(cfg.index_path());
    const std::size_t ks[] = {5, 20, 100};
    std::map<std::size_t, double> sums;
    std::size_t cases = 0;
    if (index.doc_count() > 0) {
      for (const auto& doc : test.documents) {
        if (doc.articles.empty()) continue;
        const auto results = retrieve_topk(doc.fact, index, 100, cfg.retrieval.bm25);
        for (std::size_t k : ks) sums[k] += recall_at_k(doc.articles, results, online, k);
        ++cases;
      }
    }
    retrieval["cases"] = cases;
    for (std::size_t k : ks) retrieval["recall@" + std::to_string(k)] = cases ? sums[k] / static_cast<double>(cases) : 0.0;
  }

  json out = {{"summary", summary_of(report, cfg.doubled_scale)}, {"retrieval", retrieval}};
  std::string text = summary_table(report, cfg.doubled_scale);
  if (!retrieval.empty()) {
    char line[160];
    std::snprintf(line, sizeof line, "\nretrieval over %zu test cases: recall@5 %.4f  recall@20 %.4f  recall@100 %.4f\n",
                  retrieval["cases"].get<std::size_t>(), retrieval["recall@5"].get<double>(),
                  retrieval["recall@20"].get<double>(), retrieval["recall@100"].get<double>());
    text += line;
  }
  binary::write_file(cfg.report_dir() / "report.json", out.dump(2) + "\n");
  binary::write_file(cfg.report_dir() / "report.txt", text);
  log::info("report_done", {{"modes", report.summary.size()}});
  return out;
}

}  // namespace prag
