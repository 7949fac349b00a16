#include "prag/adapters.hpp"

#include "prag/binary_io.hpp"
#include "prag/error.hpp"
#include "prag/hashing.hpp"
#include "prag/logging.hpp"
#include "prag/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace prag {

const LoraFactors* LoraAdapter::find(int layer, FfnMatrix m) const {
  for (const auto& f : factors) {
    if (f.layer == layer && f.matrix == m) return &f;
  }
  return nullptr;
}

nlohmann::json AdapterOptions::to_json() const {
  return {{"rank", rank}, {"alpha", alpha}, {"target_mask", target_mask}, {"init_std", init_std}};
}

AdapterOptions AdapterOptions::from_json(const nlohmann::json& j) {
  AdapterOptions o;
  try {
    o.rank = j.value("rank", o.rank);
    o.alpha = j.value("alpha", o.alpha);
    if (j.contains("targets")) {
      const auto t = j.at("targets").get<std::string>();
      if (t == "w1") {
        o.target_mask = kTargetW1;
      } else if (t == "w2") {
        o.target_mask = kTargetW2;
      } else if (t == "both") {
        o.target_mask = kTargetBoth;
      } else {
        throw Error(ErrorCode::config_error, "adapter targets must be w1, w2 or both");
      }
    }
    o.target_mask = j.value("target_mask", o.target_mask);
    o.init_std = j.value("init_std", o.init_std);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("adapter options: ") + e.what());
  }
  return o;
}

nlohmann::json TrainOptions::to_json() const {
  return {{"lr", lr},
          {"epochs", epochs},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"eps", adam.eps},
          {"answer_only", answer_only}};
}

TrainOptions TrainOptions::from_json(const nlohmann::json& j) {
  TrainOptions o;
  try {
    o.lr = j.value("lr", o.lr);
    o.epochs = j.value("epochs", o.epochs);
    o.adam.beta1 = j.value("beta1", o.adam.beta1);
    o.adam.beta2 = j.value("beta2", o.adam.beta2);
    o.adam.eps = j.value("eps", o.adam.eps);
    o.answer_only = j.value("answer_only", o.answer_only);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("training options: ") + e.what());
  }
  return o;
}

LoraAdapter init_adapter(const std::string& doc_id, const BaseModel& base, const AdapterOptions& opts,
                         std::uint64_t seed) {
  const auto& c = base.config();
  const auto limit = static_cast<std::uint32_t>(std::min(c.d_model, c.d_ffn));
  if (opts.rank == 0 || opts.rank >= limit)
    throw Error(ErrorCode::bad_rank, "rank " + std::to_string(opts.rank) + " must be in [1, " +
                                         std::to_string(limit) + ")");
  if ((opts.target_mask & kTargetBoth) == 0 || (opts.target_mask & ~kTargetBoth) != 0)
    throw Error(ErrorCode::config_error, "adapter target mask must select W1 and/or W2");
  LoraAdapter a;
  a.doc_id = doc_id;
  a.config_hash = base.fingerprint();
  a.rank = opts.rank;
  a.alpha = opts.alpha;
  a.layer_count = static_cast<std::uint32_t>(c.n_layers);
  a.target_mask = opts.target_mask;
  a.meta = {{"seed", seed}, {"adapter", opts.to_json()}};
  Rng rng(derive_seed(seed, "lora-init"));
  const auto D = static_cast<std::size_t>(c.d_model);
  const auto F = static_cast<std::size_t>(c.d_ffn);
  for (int l = 0; l < c.n_layers; ++l) {
    for (FfnMatrix m : {FfnMatrix::w1, FfnMatrix::w2}) {
      const auto bit = m == FfnMatrix::w1 ? kTargetW1 : kTargetW2;
      if (!(opts.target_mask & bit)) continue;
      LoraFactors f;
      f.layer = l;
      f.matrix = m;
      const std::size_t out = m == FfnMatrix::w1 ? F : D;
      const std::size_t in = m == FfnMatrix::w1 ? D : F;
      f.a = Tensor(out, opts.rank);
      for (float& v : f.a.data) v = static_cast<float>(rng.normal(0.0, opts.init_std));
      f.b = Tensor(in, opts.rank);
      a.factors.push_back(std::move(f));
    }
  }
  return a;
}

Vec dense_delta(const LoraFactors& f, double scale) {
  const std::size_t out = f.a.rows;
  const std::size_t in = f.b.rows;
  const std::size_t r = f.a.cols;
  Vec d(out * in, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    const float* ar = f.a.data.data() + o * r;
    double* dr = d.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) {
      const float* br = f.b.data.data() + i * r;
      double acc = 0.0;
      for (std::size_t k = 0; k < r; ++k) acc += static_cast<double>(ar[k]) * static_cast<double>(br[k]);
      dr[i] = scale * acc;
    }
  }
  return d;
}

namespace {

FfnDeltas adapter_deltas(const LoraAdapter& adapter) {
  FfnDeltas d;
  d.w1.resize(adapter.layer_count);
  d.w2.resize(adapter.layer_count);
  for (const auto& f : adapter.factors) d.at(f.layer, f.matrix) = dense_delta(f, adapter.scale());
  return d;
}

void check_base(const BaseModel& base, const LoraAdapter& adapter) {
  if (adapter.config_hash != base.fingerprint())
    throw Error(ErrorCode::config_mismatch, "adapter " + adapter.doc_id + " was built for a different base");
}

Vec effective_rows(const BaseModel& base, const LoraFactors& f, double scale) {
  const Tensor& w = base.ffn_weight(f.layer, f.matrix);
  Vec rows(w.data.begin(), w.data.end());
  const Vec d = dense_delta(f, scale);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] += d[i];
  return rows;
}

}  // namespace

Network network_with(const BaseModel& base, const LoraAdapter& adapter) {
  check_base(base, adapter);
  const FfnDeltas d = adapter_deltas(adapter);
  return Network(base, &d);
}

LoraGrads backward_lora(const ForwardTrace& trace, const Matrix& dlogits, const LoraAdapter& adapter) {
  const FfnOutputGrads og = backward(trace, dlogits);
  const double s = adapter.scale();
  const std::size_t r = adapter.rank;
  LoraGrads g;
  for (const auto& f : adapter.factors) {
    const auto& lt = trace.layers.at(static_cast<std::size_t>(f.layer));
    const Matrix& x = f.matrix == FfnMatrix::w1 ? lt.h2 : lt.g;
    const Matrix& dy = f.matrix == FfnMatrix::w1 ? og.d_w1_out[static_cast<std::size_t>(f.layer)]
                                                 : og.d_w2_out[static_cast<std::size_t>(f.layer)];
    const std::size_t T = x.rows;
    const std::size_t in = f.b.rows;
    const std::size_t out = f.a.rows;
    Vec da(out * r, 0.0);
    Vec db(in * r, 0.0);
    Vec xb(r), dya(r);
    for (std::size_t t = 0; t < T; ++t) {
      const double* xr = x.row(t);
      const double* dyr = dy.row(t);
      std::fill(xb.begin(), xb.end(), 0.0);
      std::fill(dya.begin(), dya.end(), 0.0);
      for (std::size_t i = 0; i < in; ++i) {
        const float* br = f.b.data.data() + i * r;
        for (std::size_t k = 0; k < r; ++k) xb[k] += xr[i] * static_cast<double>(br[k]);
      }
      for (std::size_t o = 0; o < out; ++o) {
        const float* ar = f.a.data.data() + o * r;
        for (std::size_t k = 0; k < r; ++k) dya[k] += dyr[o] * static_cast<double>(ar[k]);
      }
      for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t k = 0; k < r; ++k) da[o * r + k] += dyr[o] * xb[k];
      }
      for (std::size_t i = 0; i < in; ++i) {
        for (std::size_t k = 0; k < r; ++k) db[i * r + k] += xr[i] * dya[k];
      }
    }
    for (double& v : da) v *= s;
    for (double& v : db) v *= s;
    g.da.push_back(std::move(da));
    g.db.push_back(std::move(db));
  }
  return g;
}

TrainingSequence encode_qa(const QAPair& pair, int context_len, bool answer_only) {
  const std::string prefix = std::string(section_label(SectionKind::fact)) + " ";
  const std::string label = std::string(section_label(pair.answer_kind)) + " ";
  const std::size_t overhead = 1 + prefix.size() + 1 + label.size() + 1;
  const std::size_t total = static_cast<std::size_t>(context_len) + 1;
  if (total < overhead + 2) throw Error(ErrorCode::context_overflow, "context too short for a QA sequence");
  const std::size_t budget = total - overhead;
  std::string_view q = pair.query_text;
  std::string_view a = pair.answer_text;
  if (q.size() + a.size() > budget) {
    // The query keeps at least a quarter of the budget so the answer never
    // loses all of its conditioning.
    const std::size_t q_keep = std::min(q.size(), std::max(budget > a.size() ? budget - a.size() : 0, budget / 4));
    q = q.substr(q.size() - q_keep);
    a = a.substr(0, std::min(a.size(), budget - q.size()));
  }
  std::vector<Token> seq;
  seq.reserve(overhead + q.size() + a.size());
  auto append = [&seq](std::string_view s) {
    const auto enc = tokenizer::encode(s);
    seq.insert(seq.end(), enc.begin(), enc.end());
  };
  seq.push_back(tokenizer::kBos);
  append(prefix);
  append(q);
  seq.push_back(tokenizer::kSep);
  append(label);
  const std::size_t answer_start = seq.size();
  append(a);
  seq.push_back(tokenizer::kEos);

  TrainingSequence out;
  out.inputs.assign(seq.begin(), seq.end() - 1);
  out.targets.assign(seq.begin() + 1, seq.end());
  out.mask.resize(out.inputs.size());
  for (std::size_t t = 0; t < out.inputs.size(); ++t) out.mask[t] = (!answer_only || t + 1 >= answer_start) ? 1 : 0;
  return out;
}

double mean_nll(const Network& net, const std::vector<TrainingSequence>& seqs) {
  if (seqs.empty()) throw Error(ErrorCode::empty_training_set, "no sequences to evaluate");
  double total = 0.0;
  for (const auto& s : seqs) total += nll_loss(forward(net, s.inputs), s.targets, s.mask);
  return total / static_cast<double>(seqs.size());
}

LoraAdapter train_adapter(const BaseModel& base, const std::string& doc_id, const std::vector<QAPair>& pairs,
                          const AdapterOptions& aopts, const TrainOptions& topts, std::uint64_t seed) {
  if (!base.frozen()) throw Error(ErrorCode::config_error, "adapter training requires a frozen base");
  if (pairs.empty()) throw Error(ErrorCode::empty_training_set, "no QA pairs for " + doc_id);
  const int context_len = base.config().context_len;
  std::vector<TrainingSequence> seqs;
  seqs.reserve(pairs.size());
  for (const auto& p : pairs) seqs.push_back(encode_qa(p, context_len, topts.answer_only));

  LoraAdapter adapter = init_adapter(doc_id, base, aopts, seed);
  Network net = network_with(base, adapter);
  const double initial = mean_nll(net, seqs);

  std::vector<Vec> ma, va, mb, vb;
  for (const auto& f : adapter.factors) {
    ma.emplace_back(f.a.data.size(), 0.0);
    va.emplace_back(f.a.data.size(), 0.0);
    mb.emplace_back(f.b.data.size(), 0.0);
    vb.emplace_back(f.b.data.size(), 0.0);
  }
  const auto& adam = topts.adam;
  auto update = [&](std::vector<float>& p, const Vec& g, Vec& m, Vec& v, double c1, double c2) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
      v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
      const double step = topts.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + adam.eps);
      p[i] = static_cast<float>(static_cast<double>(p[i]) - step);
    }
  };

  double loss_sum = 0.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < topts.epochs; ++epoch) {
    for (const auto& s : seqs) {
      ForwardTrace trace;
      const Matrix logits = forward(net, s.inputs, &trace);
      loss_sum += nll_loss(logits, s.targets, s.mask);
      const LoraGrads g = backward_lora(trace, nll_loss_grad(logits, s.targets, s.mask), adapter);
      ++step;
      const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < adapter.factors.size(); ++i) {
        auto& f = adapter.factors[i];
        update(f.a.data, g.da[i], ma[i], va[i], c1, c2);
        update(f.b.data, g.db[i], mb[i], vb[i], c1, c2);
        net.set_ffn(f.layer, f.matrix, effective_rows(base, f, adapter.scale()));
      }
    }
  }
  const double final_nll = mean_nll(net, seqs);
  adapter.meta["train"] = topts.to_json();
  adapter.meta["pairs"] = pairs.size();
  adapter.meta["initial_nll"] = initial;
  adapter.meta["final_nll"] = final_nll;
  adapter.meta["mean_step_loss"] = step ? loss_sum / static_cast<double>(step) : 0.0;
  log::debug("adapter_trained", {{"doc_id", doc_id}, {"initial_nll", initial}, {"final_nll", final_nll}});
  return adapter;
}

ComposedDelta compose_deltas(const std::vector<const LoraAdapter*>& adapters) {
  ComposedDelta out;
  if (adapters.empty()) return out;
  std::vector<const LoraAdapter*> sorted = adapters;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const LoraAdapter* a, const LoraAdapter* b) { return a->doc_id < b->doc_id; });
  const std::uint64_t hash = sorted.front()->config_hash;
  const std::uint32_t layers = sorted.front()->layer_count;
  out.config_hash = hash;
  out.deltas.w1.resize(layers);
  out.deltas.w2.resize(layers);
  for (const LoraAdapter* a : sorted) {
    if (a->config_hash != hash || a->layer_count != layers)
      throw Error(ErrorCode::config_mismatch, "adapter " + a->doc_id + " belongs to a different base");
    for (const auto& f : a->factors) {
      if (f.layer < 0 || static_cast<std::uint32_t>(f.layer) >= layers)
        throw Error(ErrorCode::config_mismatch, "adapter " + a->doc_id + " has an out-of-range layer");
      const Vec d = dense_delta(f, a->scale());
      Vec& acc = out.deltas.at(f.layer, f.matrix);
      if (acc.empty()) acc.assign(d.size(), 0.0);
      if (acc.size() != d.size()) throw Error(ErrorCode::config_mismatch, "adapter " + a->doc_id + " shape mismatch");
      for (std::size_t i = 0; i < d.size(); ++i) acc[i] += d[i];
    }
    out.provenance.push_back(a->doc_id);
  }
  return out;
}

ComposedDelta compose_deltas(const std::vector<LoraAdapter>& adapters) {
  std::vector<const LoraAdapter*> ptrs;
  ptrs.reserve(adapters.size());
  for (const auto& a : adapters) ptrs.push_back(&a);
  return compose_deltas(ptrs);
}

namespace {

FfnDeltas sum_deltas(const BaseModel& base, const ComposedDelta& offline, const ComposedDelta* online) {
  const std::uint64_t fp = base.fingerprint();
  const auto layers = static_cast<std::size_t>(base.config().n_layers);
  auto check = [&](const ComposedDelta& d, const char* what) {
    if (d.empty()) return;
    if (d.config_hash != fp) throw Error(ErrorCode::config_mismatch, std::string(what) + " delta was built for a different base");
    if (d.deltas.w1.size() != layers || d.deltas.w2.size() != layers)
      throw Error(ErrorCode::config_mismatch, std::string(what) + " delta layer count differs from base");
  };
  check(offline, "offline");
  if (online) check(*online, "online");
  FfnDeltas total;
  total.w1.resize(layers);
  total.w2.resize(layers);
  auto add = [&](const ComposedDelta& d) {
    if (d.empty()) return;
    for (std::size_t l = 0; l < layers; ++l) {
      for (FfnMatrix m : {FfnMatrix::w1, FfnMatrix::w2}) {
        const Vec& src = d.deltas.at(static_cast<int>(l), m);
        if (src.empty()) continue;
        Vec& dst = total.at(static_cast<int>(l), m);
        if (dst.empty()) {
          dst = src;
        } else {
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
    }
  };
  add(offline);
  if (online) add(*online);
  return total;
}

}  // namespace

InjectedModel::InjectedModel(const BaseModel& base, const ComposedDelta& offline, const ComposedDelta* online)
    : offline_ids_(offline.provenance),
      online_ids_(online ? online->provenance : std::vector<std::string>{}),
      network_([&] {
        const FfnDeltas total = sum_deltas(base, offline, online);
        return Network(base, &total);
      }()) {}

InjectedModel inject(const BaseModel& base, const ComposedDelta& offline, const ComposedDelta* online) {
  return InjectedModel(base, offline, online);
}

// ---------------------------------------------------------------- files

namespace {
constexpr std::uint32_t kAdapterVersion = 1;
constexpr std::uint32_t kComposedVersion = 1;

void check_magic(binary::Reader& r, const char* magic, const std::string& what) {
  if (r.remaining() < 4 || r.get_raw(4) != magic)
    throw Error(ErrorCode::format_error, r.path() + ": not a " + what + " file");
}
}  // namespace

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
  binary::Writer w;
  w.put_bytes("PLCA", 4);
  w.put<std::uint32_t>(kAdapterVersion);
  w.put<std::uint64_t>(adapter.config_hash);
  w.put<std::uint32_t>(adapter.rank);
  w.put<double>(adapter.alpha);
  w.put<std::uint32_t>(adapter.layer_count);
  w.put<std::uint32_t>(adapter.target_mask);
  w.put_string(adapter.doc_id);
  w.put_string(adapter.meta.dump());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(adapter.factors.size()));
  for (const auto& f : adapter.factors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.layer));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(f.matrix));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.a.rows));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.b.rows));
  }
  for (const auto& f : adapter.factors) {
    w.put_floats(f.a.data);
    w.put_floats(f.b.data);
  }
  w.put_checksum();
  binary::write_file(path, w.bytes());
}

LoraAdapter load_adapter(const std::filesystem::path& path) {
  binary::Reader r(binary::read_file(path), path.string());
  check_magic(r, "PLCA", "PLCA adapter");
  r.verify_checksum();
  const auto version = r.get<std::uint32_t>();
  if (version != kAdapterVersion)
    throw Error(ErrorCode::version_mismatch, path.string() + ": adapter version " + std::to_string(version));
  LoraAdapter a;
  a.config_hash = r.get<std::uint64_t>();
  a.rank = r.get<std::uint32_t>();
  a.alpha = r.get<double>();
  a.layer_count = r.get<std::uint32_t>();
  a.target_mask = r.get<std::uint32_t>();
  a.doc_id = r.get_string();
  try {
    a.meta = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format_error, path.string() + ": bad adapter metadata: " + e.what());
  }
  if (a.rank == 0) throw Error(ErrorCode::format_error, path.string() + ": rank 0");
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    LoraFactors f;
    f.layer = static_cast<int>(r.get<std::uint32_t>());
    const auto m = r.get<std::uint8_t>();
    if (m > 1) throw Error(ErrorCode::format_error, path.string() + ": bad matrix id");
    f.matrix = static_cast<FfnMatrix>(m);
    f.a = Tensor(r.get<std::uint32_t>(), a.rank);
    f.b = Tensor(r.get<std::uint32_t>(), a.rank);
    a.factors.push_back(std::move(f));
  }
  for (auto& f : a.factors) {
    f.a.data = r.get_floats(f.a.data.size());
    f.b.data = r.get_floats(f.b.data.size());
  }
  if (r.remaining() != sizeof(std::uint64_t)) throw Error(ErrorCode::format_error, path.string() + ": trailing bytes");
  return a;
}

void save_composed(const ComposedDelta& delta, const std::filesystem::path& path) {
  binary::Writer w;
  w.put_bytes("PLCD", 4);
  w.put<std::uint32_t>(kComposedVersion);
  w.put<std::uint64_t>(delta.config_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(delta.provenance.size()));
  for (const auto& id : delta.provenance) w.put_string(id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(delta.deltas.w1.size()));
  for (std::size_t l = 0; l < delta.deltas.w1.size(); ++l) {
    for (FfnMatrix m : {FfnMatrix::w1, FfnMatrix::w2}) {
      const Vec& v = delta.deltas.at(static_cast<int>(l), m);
      w.put<std::uint64_t>(v.size());
      w.put_bytes(v.data(), v.size() * sizeof(double));
    }
  }
  w.put_checksum();
  binary::write_file(path, w.bytes());
}

ComposedDelta load_composed(const std::filesystem::path& path) {
  binary::Reader r(binary::read_file(path), path.string());
  check_magic(r, "PLCD", "PLCD composed-delta");
  r.verify_checksum();
  const auto version = r.get<std::uint32_t>();
  if (version != kComposedVersion)
    throw Error(ErrorCode::version_mismatch, path.string() + ": composed-delta version " + std::to_string(version));
  ComposedDelta d;
  d.config_hash = r.get<std::uint64_t>();
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) d.provenance.push_back(r.get_string());
  const auto layers = r.get<std::uint32_t>();
  d.deltas.w1.resize(layers);
  d.deltas.w2.resize(layers);
  for (std::uint32_t l = 0; l < layers; ++l) {
    for (FfnMatrix m : {FfnMatrix::w1, FfnMatrix::w2}) {
      const auto size = r.get<std::uint64_t>();
      if (size > r.remaining() / sizeof(double)) throw Error(ErrorCode::format_error, path.string() + ": bad delta size");
      const std::string raw = r.get_raw(size * sizeof(double));
      Vec& v = d.deltas.at(static_cast<int>(l), m);
      v.resize(size);
      std::memcpy(v.data(), raw.data(), raw.size());
    }
  }
  return d;
}

// ---------------------------------------------------------------- store

AdapterStore::AdapterStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw Error(ErrorCode::io_error, dir_.string() + ": " + ec.message());
  const auto manifest = dir_ / "manifest.json";
  if (!std::filesystem::exists(manifest)) return;
  try {
    const auto j = nlohmann::json::parse(binary::read_file(manifest));
    for (const auto& [id, file] : j.at("adapters").items()) files_[id] = file.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format_error, manifest.string() + ": " + e.what());
  }
}

std::filesystem::path AdapterStore::path_for(const std::string& doc_id) const {
  std::string stem;
  for (char c : doc_id) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_';
    stem.push_back(keep ? c : '_');
    if (stem.size() == 48) break;
  }
  return dir_ / (stem + "." + hex64(fnv1a64(doc_id)).substr(0, 8) + ".plca");
}

bool AdapterStore::contains(const std::string& doc_id) const {
  std::lock_guard lock(mu_);
  const auto it = files_.find(doc_id);
  return it != files_.end() && std::filesystem::exists(dir_ / it->second);
}

void AdapterStore::put(const LoraAdapter& adapter) { put(adapter.doc_id, adapter); }

void AdapterStore::put(const std::string& key, const LoraAdapter& adapter) {
  const auto path = path_for(key);
  save_adapter(adapter, path);
  std::lock_guard lock(mu_);
  files_[key] = path.filename().string();
  write_manifest_locked();
}

LoraAdapter AdapterStore::get(const std::string& doc_id) const {
  std::string file;
  {
    std::lock_guard lock(mu_);
    const auto it = files_.find(doc_id);
    if (it == files_.end()) throw Error(ErrorCode::unknown_doc, "no adapter for " + doc_id + " in " + dir_.string());
    file = it->second;
  }
  return load_adapter(dir_ / file);
}

std::vector<std::string> AdapterStore::keys() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> ids;
  for (const auto& [id, file] : files_) ids.push_back(id);
  return ids;
}

void AdapterStore::write_manifest_locked() const {
  nlohmann::json j = {{"version", 1}, {"adapters", nlohmann::json::object()}};
  for (const auto& [id, file] : files_) j["adapters"][id] = file;
  binary::write_file(dir_ / "manifest.json", j.dump(2) + "\n");
}

}  // namespace prag
