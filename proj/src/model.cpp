#include "prag/model.hpp"

#include "prag/binary_io.hpp"
#include "prag/corpus.hpp"
#include "prag/error.hpp"
#include "prag/hashing.hpp"
#include "prag/logging.hpp"
#include "prag/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace prag {

// ---------------------------------------------------------------- tokenizer

namespace tokenizer {

std::vector<Token> encode(std::string_view text) {
  std::vector<Token> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<Token>(static_cast<unsigned char>(c)));
  return out;
}

std::string decode(const std::vector<Token>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

}  // namespace tokenizer

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::config_error, "model config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be >= 1");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ffn < 1) fail("d_ffn must be >= 1");
  if (context_len < 8) fail("context_len must be >= 8");
  if (vocab_size != tokenizer::kVocabSize) fail("vocab_size must be 260 for the byte tokenizer");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers}, {"d_model", d_model},         {"n_heads", n_heads}, {"d_ffn", d_ffn},
          {"context_len", context_len}, {"vocab_size", vocab_size}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ffn = j.value("d_ffn", c.d_ffn);
    c.context_len = j.value("context_len", c.context_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- base model

namespace {

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (float& v : t.data) v = static_cast<float>(rng.normal(0.0, stddev));
}

constexpr double kInitStd = 0.02;
constexpr double kLnEps = 1e-5;

}  // namespace

BaseModel::BaseModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto D = static_cast<std::size_t>(config.d_model);
  const auto F = static_cast<std::size_t>(config.d_ffn);
  const auto C = static_cast<std::size_t>(config.context_len);
  Rng rng(derive_seed(config.seed, "base-init"));
  tok_emb_ = Tensor(V, D);
  fill_normal(tok_emb_, rng, kInitStd);
  pos_emb_ = Tensor(C, D);
  fill_normal(pos_emb_, rng, kInitStd / 2);
  layers_.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& l : layers_) {
    l.ln1_g = Tensor(1, D, 1.0f);
    l.ln1_b = Tensor(1, D);
    for (Tensor* w : {&l.wq, &l.wk, &l.wv, &l.wo}) {
      *w = Tensor(D, D);
      fill_normal(*w, rng, kInitStd);
    }
    l.ln2_g = Tensor(1, D, 1.0f);
    l.ln2_b = Tensor(1, D);
    l.w1 = Tensor(F, D);
    fill_normal(l.w1, rng, kInitStd);
    l.b1 = Tensor(1, F);
    l.w2 = Tensor(D, F);
    fill_normal(l.w2, rng, kInitStd);
    l.b2 = Tensor(1, D);
  }
  lnf_g_ = Tensor(1, D, 1.0f);
  lnf_b_ = Tensor(1, D);
  w_out_ = Tensor(V, D);
  fill_normal(w_out_, rng, kInitStd);
  b_out_ = Tensor(1, V);
}

const Tensor& BaseModel::ffn_weight(int layer, FfnMatrix m) const {
  const auto& l = layers_.at(static_cast<std::size_t>(layer));
  return m == FfnMatrix::w1 ? l.w1 : l.w2;
}

void BaseModel::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  fn("tok_emb", tok_emb_);
  fn("pos_emb", pos_emb_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "ln1_g", l.ln1_g);
    fn(p + "ln1_b", l.ln1_b);
    fn(p + "wq", l.wq);
    fn(p + "wk", l.wk);
    fn(p + "wv", l.wv);
    fn(p + "wo", l.wo);
    fn(p + "ln2_g", l.ln2_g);
    fn(p + "ln2_b", l.ln2_b);
    fn(p + "w1", l.w1);
    fn(p + "b1", l.b1);
    fn(p + "w2", l.w2);
    fn(p + "b2", l.b2);
  }
  fn("lnf_g", lnf_g_);
  fn("lnf_b", lnf_b_);
  fn("w_out", w_out_);
  fn("b_out", b_out_);
}

void BaseModel::visit_mutable(const std::function<void(const std::string&, Tensor&)>& fn) {
  if (frozen_) throw Error(ErrorCode::frozen_model, "base model parameters are frozen");
  const auto& self = *this;
  self.visit([&](const std::string& name, const Tensor& t) { fn(name, const_cast<Tensor&>(t)); });
}

std::uint64_t BaseModel::checksum() const {
  Fnv1a64 h;
  visit([&](const std::string&, const Tensor& t) { h.update(t.data.data(), t.data.size() * sizeof(float)); });
  return h.digest();
}

std::uint64_t BaseModel::fingerprint() const {
  Fnv1a64 h;
  h.update(config_.to_json().dump());
  h.update_pod(checksum());
  return h.digest();
}

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const BaseModel& model, const std::filesystem::path& path) {
  binary::Writer w;
  w.put_bytes("PLCM", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& c = model.config();
  for (int v : {c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.context_len, c.vocab_size})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::uint64_t>(c.seed);
  w.put<std::uint8_t>(model.frozen() ? 1 : 0);
  std::uint32_t count = 0;
  model.visit([&](const std::string&, const Tensor&) { ++count; });
  w.put<std::uint32_t>(count);
  model.visit([&](const std::string&, const Tensor& t) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rows));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.cols));
    w.put_floats(t.data);
  });
  w.put_checksum();
  binary::write_file(path, w.bytes());
}

BaseModel load_checkpoint(const std::filesystem::path& path) {
  binary::Reader r(binary::read_file(path), path.string());
  if (r.remaining() < 4 || r.get_raw(4) != "PLCM")
    throw Error(ErrorCode::format_error, path.string() + ": not a PLCM checkpoint");
  r.verify_checksum();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::version_mismatch, path.string() + ": checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.n_layers = static_cast<int>(r.get<std::uint32_t>());
  c.d_model = static_cast<int>(r.get<std::uint32_t>());
  c.n_heads = static_cast<int>(r.get<std::uint32_t>());
  c.d_ffn = static_cast<int>(r.get<std::uint32_t>());
  c.context_len = static_cast<int>(r.get<std::uint32_t>());
  c.vocab_size = static_cast<int>(r.get<std::uint32_t>());
  c.seed = r.get<std::uint64_t>();
  const bool frozen = r.get<std::uint8_t>() != 0;
  BaseModel model(c);
  const auto count = r.get<std::uint32_t>();
  std::uint32_t expected = 0;
  model.visit([&](const std::string&, const Tensor&) { ++expected; });
  if (count != expected) throw Error(ErrorCode::format_error, path.string() + ": tensor count mismatch");
  model.visit_mutable([&](const std::string& name, Tensor& t) {
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (rows != t.rows || cols != t.cols) throw Error(ErrorCode::format_error, path.string() + ": bad shape for " + name);
    t.data = r.get_floats(t.data.size());
  });
  if (frozen) model.freeze();
  return model;
}

// ---------------------------------------------------------------- network

bool FfnDeltas::empty() const {
  auto all_empty = [](const std::vector<std::vector<double>>& v) {
    return std::all_of(v.begin(), v.end(), [](const auto& m) { return m.empty(); });
  };
  return all_empty(w1) && all_empty(w2);
}

void Kernel::assign(std::size_t out_dim, std::size_t in_dim, const Vec& rows) {
  out = out_dim;
  in = in_dim;
  kt = rows;
  k.assign(in * out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) k[i * out + o] = kt[o * in + i];
  }
}

namespace {

Vec to_double(const Tensor& t) { return Vec(t.data.begin(), t.data.end()); }

Vec with_delta(const Tensor& t, const std::vector<std::vector<double>>* deltas, std::size_t layer) {
  Vec rows = to_double(t);
  if (deltas && layer < deltas->size() && !(*deltas)[layer].empty()) {
    const auto& d = (*deltas)[layer];
    if (d.size() != rows.size()) throw Error(ErrorCode::config_mismatch, "FFN delta shape does not match base weight");
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] += d[i];
  }
  return rows;
}

}  // namespace

Network::Network(const BaseModel& base, const FfnDeltas* deltas) : config_(base.config()) {
  const auto D = static_cast<std::size_t>(config_.d_model);
  const auto F = static_cast<std::size_t>(config_.d_ffn);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  if (deltas && ((!deltas->w1.empty() && deltas->w1.size() != base.layers().size()) ||
                 (!deltas->w2.empty() && deltas->w2.size() != base.layers().size())))
    throw Error(ErrorCode::config_mismatch, "FFN delta layer count does not match base");
  tok_emb_ = to_double(base.tok_emb());
  pos_emb_ = to_double(base.pos_emb());
  for (std::size_t i = 0; i < base.layers().size(); ++i) {
    const auto& l = base.layers()[i];
    NetworkLayer n;
    n.ln1_g = to_double(l.ln1_g);
    n.ln1_b = to_double(l.ln1_b);
    n.wq.assign(D, D, to_double(l.wq));
    n.wk.assign(D, D, to_double(l.wk));
    n.wv.assign(D, D, to_double(l.wv));
    n.wo.assign(D, D, to_double(l.wo));
    n.ln2_g = to_double(l.ln2_g);
    n.ln2_b = to_double(l.ln2_b);
    ffn_rows_w1_.push_back(with_delta(l.w1, deltas ? &deltas->w1 : nullptr, i));
    ffn_rows_w2_.push_back(with_delta(l.w2, deltas ? &deltas->w2 : nullptr, i));
    n.w1.assign(F, D, ffn_rows_w1_.back());
    n.b1 = to_double(l.b1);
    n.w2.assign(D, F, ffn_rows_w2_.back());
    n.b2 = to_double(l.b2);
    layers_.push_back(std::move(n));
  }
  lnf_g_ = to_double(base.lnf_g());
  lnf_b_ = to_double(base.lnf_b());
  head_.assign(V, D, to_double(base.w_out()));
  b_out_ = to_double(base.b_out());
}

const Vec& Network::ffn_rows(int layer, FfnMatrix m) const {
  return m == FfnMatrix::w1 ? ffn_rows_w1_.at(static_cast<std::size_t>(layer))
                            : ffn_rows_w2_.at(static_cast<std::size_t>(layer));
}

void Network::set_ffn(int layer, FfnMatrix m, const Vec& rows) {
  auto& l = layers_.at(static_cast<std::size_t>(layer));
  const auto D = static_cast<std::size_t>(config_.d_model);
  const auto F = static_cast<std::size_t>(config_.d_ffn);
  if (m == FfnMatrix::w1) {
    l.w1.assign(F, D, rows);
  } else {
    l.w2.assign(D, F, rows);
  }
}

// ---------------------------------------------------------------- kernels

namespace {

/// y[t] = x[t]·K (+ bias), rows processed in tiles of four so each kernel row
/// is loaded once per tile. Every output accumulates over `in` in ascending
/// order regardless of tiling, which keeps single-row decoding bit-identical.
void linear_forward(const double* x, std::size_t T, const Kernel& w, const Vec* bias, double* y) {
  const std::size_t in = w.in;
  const std::size_t out = w.out;
  for (std::size_t t = 0; t < T; ++t) {
    double* yr = y + t * out;
    if (bias) {
      std::copy(bias->begin(), bias->end(), yr);
    } else {
      std::fill(yr, yr + out, 0.0);
    }
  }
  std::size_t t = 0;
  for (; t + 4 <= T; t += 4) {
    double* y0 = y + t * out;
    double* y1 = y0 + out;
    double* y2 = y1 + out;
    double* y3 = y2 + out;
    const double* x0 = x + t * in;
    const double* x1 = x0 + in;
    const double* x2 = x1 + in;
    const double* x3 = x2 + in;
    for (std::size_t i = 0; i < in; ++i) {
      const double* kr = w.k.data() + i * out;
      const double a0 = x0[i], a1 = x1[i], a2 = x2[i], a3 = x3[i];
      for (std::size_t o = 0; o < out; ++o) {
        const double kv = kr[o];
        y0[o] += a0 * kv;
        y1[o] += a1 * kv;
        y2[o] += a2 * kv;
        y3[o] += a3 * kv;
      }
    }
  }
  for (; t < T; ++t) {
    double* yr = y + t * out;
    const double* xr = x + t * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double* kr = w.k.data() + i * out;
      const double a = xr[i];
      for (std::size_t o = 0; o < out; ++o) yr[o] += a * kr[o];
    }
  }
}

/// dx[t] += dy[t]·Kᵀ
void linear_backward_input(const double* dy, std::size_t T, const Kernel& w, double* dx) {
  const std::size_t in = w.in;
  const std::size_t out = w.out;
  for (std::size_t t = 0; t < T; ++t) {
    double* dxr = dx + t * in;
    const double* dyr = dy + t * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      const double* kr = w.kt.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dxr[i] += g * kr[i];
    }
  }
}

/// dW[o][:] += Σ_t dy[t][o]·x[t][:]   (dW in [out × in] layout)
void linear_backward_weight(const double* dy, const double* x, std::size_t T, std::size_t in, std::size_t out,
                            Vec& dw) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* dyr = dy + t * out;
    const double* xr = x + t * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      double* dwr = dw.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
    }
  }
}

void bias_backward(const double* dy, std::size_t T, std::size_t out, Vec& db) {
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t o = 0; o < out; ++o) db[o] += dy[t * out + o];
  }
}

void layer_norm_row(const double* x, std::size_t D, const Vec& g, const Vec& b, double* y, double& mean,
                    double& rstd) {
  double m = 0.0;
  for (std::size_t i = 0; i < D; ++i) m += x[i];
  m /= static_cast<double>(D);
  double var = 0.0;
  for (std::size_t i = 0; i < D; ++i) {
    const double d = x[i] - m;
    var += d * d;
  }
  var /= static_cast<double>(D);
  const double rs = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t i = 0; i < D; ++i) y[i] = (x[i] - m) * rs * g[i] + b[i];
  mean = m;
  rstd = rs;
}

/// dx += LN'(dy); optionally accumulates gain/bias gradients.
void layer_norm_backward_row(const double* dy, const double* x, double mean, double rstd, const Vec& g,
                             std::size_t D, double* dx, Vec* dg, Vec* db) {
  double sum_dxhat = 0.0;
  double sum_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < D; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
    if (dg) (*dg)[i] += dy[i] * xhat;
    if (db) (*db)[i] += dy[i];
  }
  const double inv_d = 1.0 / static_cast<double>(D);
  for (std::size_t i = 0; i < D; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    dx[i] += rstd * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double inner = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(inner);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

/// Causal attention for query row t against cached keys/values rows 0..t.
/// probs receives t+1 weights for one head; out receives head_dim values.
void attend_row(const double* q, const Matrix& K, const Matrix& V, std::size_t t, std::size_t head,
                std::size_t head_dim, double scale, double* probs, double* out) {
  const std::size_t off = head * head_dim;
  double mx = -INFINITY;
  for (std::size_t s = 0; s <= t; ++s) {
    const double* kr = K.row(s) + off;
    double dot = 0.0;
    for (std::size_t i = 0; i < head_dim; ++i) dot += q[off + i] * kr[i];
    probs[s] = dot * scale;
    mx = std::max(mx, probs[s]);
  }
  double sum = 0.0;
  for (std::size_t s = 0; s <= t; ++s) {
    probs[s] = std::exp(probs[s] - mx);
    sum += probs[s];
  }
  const double inv = 1.0 / sum;
  for (std::size_t s = 0; s <= t; ++s) probs[s] *= inv;
  std::fill(out + off, out + off + head_dim, 0.0);
  for (std::size_t s = 0; s <= t; ++s) {
    const double p = probs[s];
    const double* vr = V.row(s) + off;
    for (std::size_t i = 0; i < head_dim; ++i) out[off + i] += p * vr[i];
  }
}

void check_tokens(const ModelConfig& c, const std::vector<Token>& tokens) {
  if (tokens.empty()) throw Error(ErrorCode::empty_input, "no tokens");
  if (tokens.size() > static_cast<std::size_t>(c.context_len))
    throw Error(ErrorCode::context_overflow, std::to_string(tokens.size()) + " tokens exceed context_len " +
                                                 std::to_string(c.context_len));
  for (Token t : tokens) {
    if (t < 0 || t >= c.vocab_size) throw Error(ErrorCode::format_error, "token id out of range");
  }
}

}  // namespace

Matrix forward(const Network& net, const std::vector<Token>& tokens, ForwardTrace* trace) {
  const auto& c = net.config();
  check_tokens(c, tokens);
  const std::size_t T = tokens.size();
  const auto D = static_cast<std::size_t>(c.d_model);
  const auto F = static_cast<std::size_t>(c.d_ffn);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const std::size_t hd = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr = ForwardTrace{};
  tr.tokens = tokens;
  tr.layers.resize(net.layers().size());

  Matrix x(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    const double* e = net.tok_emb().data() + static_cast<std::size_t>(tokens[t]) * D;
    const double* p = net.pos_emb().data() + t * D;
    for (std::size_t i = 0; i < D; ++i) x(t, i) = e[i] + p[i];
  }

  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    const auto& L = net.layers()[li];
    auto& lt = tr.layers[li];
    lt.x_in = x;
    lt.mean1.assign(T, 0.0);
    lt.rstd1.assign(T, 0.0);
    lt.h1 = Matrix(T, D);
    for (std::size_t t = 0; t < T; ++t) layer_norm_row(x.row(t), D, L.ln1_g, L.ln1_b, lt.h1.row(t), lt.mean1[t], lt.rstd1[t]);
    lt.q = Matrix(T, D);
    lt.k = Matrix(T, D);
    lt.v = Matrix(T, D);
    linear_forward(lt.h1.data.data(), T, L.wq, nullptr, lt.q.data.data());
    linear_forward(lt.h1.data.data(), T, L.wk, nullptr, lt.k.data.data());
    linear_forward(lt.h1.data.data(), T, L.wv, nullptr, lt.v.data.data());
    lt.probs.assign(H * T * T, 0.0);
    lt.att = Matrix(T, D);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h)
        attend_row(lt.q.row(t), lt.k, lt.v, t, h, hd, scale, lt.probs.data() + (h * T + t) * T, lt.att.row(t));
    }
    Matrix a(T, D);
    linear_forward(lt.att.data.data(), T, L.wo, nullptr, a.data.data());
    lt.x_mid = x;
    for (std::size_t i = 0; i < T * D; ++i) lt.x_mid.data[i] += a.data[i];
    lt.mean2.assign(T, 0.0);
    lt.rstd2.assign(T, 0.0);
    lt.h2 = Matrix(T, D);
    for (std::size_t t = 0; t < T; ++t)
      layer_norm_row(lt.x_mid.row(t), D, L.ln2_g, L.ln2_b, lt.h2.row(t), lt.mean2[t], lt.rstd2[t]);
    lt.u = Matrix(T, F);
    linear_forward(lt.h2.data.data(), T, L.w1, &L.b1, lt.u.data.data());
    lt.g = Matrix(T, F);
    for (std::size_t i = 0; i < T * F; ++i) lt.g.data[i] = gelu(lt.u.data[i]);
    Matrix f(T, D);
    linear_forward(lt.g.data.data(), T, L.w2, &L.b2, f.data.data());
    x = lt.x_mid;
    for (std::size_t i = 0; i < T * D; ++i) x.data[i] += f.data[i];
  }

  tr.x_final = x;
  tr.meanf.assign(T, 0.0);
  tr.rstdf.assign(T, 0.0);
  tr.hf = Matrix(T, D);
  for (std::size_t t = 0; t < T; ++t) layer_norm_row(x.row(t), D, net.lnf_g(), net.lnf_b(), tr.hf.row(t), tr.meanf[t], tr.rstdf[t]);
  Matrix logits(T, V);
  linear_forward(tr.hf.data.data(), T, net.head(), &net.b_out(), logits.data.data());
  if (trace) tr.network = &net;
  return logits;
}

double nll_loss(const Matrix& logits, const std::vector<Token>& targets, const std::vector<std::uint8_t>& mask) {
  if (targets.size() != logits.rows || mask.size() != logits.rows)
    throw Error(ErrorCode::format_error, "logits/targets/mask shapes disagree");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < logits.rows; ++t) {
    if (!mask[t]) continue;
    const double* row = logits.row(t);
    const double mx = *std::max_element(row, row + logits.cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[static_cast<std::size_t>(targets[t])];
    ++count;
  }
  if (count == 0) throw Error(ErrorCode::all_masked, "no position contributes to the loss");
  return total / static_cast<double>(count);
}

Matrix nll_loss_grad(const Matrix& logits, const std::vector<Token>& targets, const std::vector<std::uint8_t>& mask) {
  if (targets.size() != logits.rows || mask.size() != logits.rows)
    throw Error(ErrorCode::format_error, "logits/targets/mask shapes disagree");
  const auto count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
  if (count == 0) throw Error(ErrorCode::all_masked, "no position contributes to the loss");
  const double inv = 1.0 / static_cast<double>(count);
  Matrix d(logits.rows, logits.cols);
  for (std::size_t t = 0; t < logits.rows; ++t) {
    if (!mask[t]) continue;
    const double* row = logits.row(t);
    const double mx = *std::max_element(row, row + logits.cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < logits.cols; ++j) d(t, j) = std::exp(row[j] - mx) / sum * inv;
    d(t, static_cast<std::size_t>(targets[t])) -= inv;
  }
  return d;
}

ParamGrads ParamGrads::zeros(const ModelConfig& c) {
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto D = static_cast<std::size_t>(c.d_model);
  const auto F = static_cast<std::size_t>(c.d_ffn);
  const auto C = static_cast<std::size_t>(c.context_len);
  ParamGrads g;
  g.tok_emb.assign(V * D, 0.0);
  g.pos_emb.assign(C * D, 0.0);
  g.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : g.layers) {
    l.ln1_g.assign(D, 0.0);
    l.ln1_b.assign(D, 0.0);
    for (Vec* w : {&l.wq, &l.wk, &l.wv, &l.wo}) w->assign(D * D, 0.0);
    l.ln2_g.assign(D, 0.0);
    l.ln2_b.assign(D, 0.0);
    l.w1.assign(F * D, 0.0);
    l.b1.assign(F, 0.0);
    l.w2.assign(D * F, 0.0);
    l.b2.assign(D, 0.0);
  }
  g.lnf_g.assign(D, 0.0);
  g.lnf_b.assign(D, 0.0);
  g.w_out.assign(V * D, 0.0);
  g.b_out.assign(V, 0.0);
  return g;
}

void ParamGrads::visit(const std::function<void(const std::string&, Vec&)>& fn) {
  fn("tok_emb", tok_emb);
  fn("pos_emb", pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "ln1_g", l.ln1_g);
    fn(p + "ln1_b", l.ln1_b);
    fn(p + "wq", l.wq);
    fn(p + "wk", l.wk);
    fn(p + "wv", l.wv);
    fn(p + "wo", l.wo);
    fn(p + "ln2_g", l.ln2_g);
    fn(p + "ln2_b", l.ln2_b);
    fn(p + "w1", l.w1);
    fn(p + "b1", l.b1);
    fn(p + "w2", l.w2);
    fn(p + "b2", l.b2);
  }
  fn("lnf_g", lnf_g);
  fn("lnf_b", lnf_b);
  fn("w_out", w_out);
  fn("b_out", b_out);
}

FfnOutputGrads backward(const ForwardTrace& trace, const Matrix& dlogits, ParamGrads* full) {
  if (!trace.recorded()) throw Error(ErrorCode::no_trace, "forward was run without recording a trace");
  const Network& net = *trace.network;
  const auto& c = net.config();
  const std::size_t T = trace.tokens.size();
  const auto D = static_cast<std::size_t>(c.d_model);
  const auto F = static_cast<std::size_t>(c.d_ffn);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const std::size_t hd = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (dlogits.rows != T || dlogits.cols != V) throw Error(ErrorCode::format_error, "dlogits shape mismatch");

  FfnOutputGrads ffn;
  ffn.d_w1_out.resize(net.layers().size());
  ffn.d_w2_out.resize(net.layers().size());

  // Head and final norm.
  Matrix dhf(T, D);
  linear_backward_input(dlogits.data.data(), T, net.head(), dhf.data.data());
  if (full) {
    linear_backward_weight(dlogits.data.data(), trace.hf.data.data(), T, D, V, full->w_out);
    bias_backward(dlogits.data.data(), T, V, full->b_out);
  }
  Matrix dx(T, D);
  for (std::size_t t = 0; t < T; ++t)
    layer_norm_backward_row(dhf.row(t), trace.x_final.row(t), trace.meanf[t], trace.rstdf[t], net.lnf_g(), D, dx.row(t),
                            full ? &full->lnf_g : nullptr, full ? &full->lnf_b : nullptr);

  for (std::size_t li = net.layers().size(); li-- > 0;) {
    const auto& L = net.layers()[li];
    const auto& lt = trace.layers[li];
    ParamGrads::Layer* gl = full ? &full->layers[li] : nullptr;

    // FFN: x_out = x_mid + W2·gelu(W1·h2 + b1) + b2
    const Matrix& df = dx;
    ffn.d_w2_out[li] = df;
    if (gl) {
      linear_backward_weight(df.data.data(), lt.g.data.data(), T, F, D, gl->w2);
      bias_backward(df.data.data(), T, D, gl->b2);
    }
    Matrix du(T, F);
    linear_backward_input(df.data.data(), T, L.w2, du.data.data());
    for (std::size_t i = 0; i < T * F; ++i) du.data[i] *= gelu_grad(lt.u.data[i]);
    if (gl) {
      linear_backward_weight(du.data.data(), lt.h2.data.data(), T, D, F, gl->w1);
      bias_backward(du.data.data(), T, F, gl->b1);
    }
    Matrix dh2(T, D);
    linear_backward_input(du.data.data(), T, L.w1, dh2.data.data());
    ffn.d_w1_out[li] = std::move(du);
    Matrix dx_mid = dx;
    for (std::size_t t = 0; t < T; ++t)
      layer_norm_backward_row(dh2.row(t), lt.x_mid.row(t), lt.mean2[t], lt.rstd2[t], L.ln2_g, D, dx_mid.row(t),
                              gl ? &gl->ln2_g : nullptr, gl ? &gl->ln2_b : nullptr);

    // Attention: x_mid = x_in + Wo·attn(h1)
    if (gl) linear_backward_weight(dx_mid.data.data(), lt.att.data.data(), T, D, D, gl->wo);
    Matrix datt(T, D);
    linear_backward_input(dx_mid.data.data(), T, L.wo, datt.data.data());
    Matrix dq(T, D), dk(T, D), dv(T, D);
    Vec dp(T, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t t = 0; t < T; ++t) {
        const double* p = lt.probs.data() + (h * T + t) * T;
        const double* dout = datt.row(t) + off;
        double dot_pdp = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* vr = lt.v.row(s) + off;
          double acc = 0.0;
          for (std::size_t i = 0; i < hd; ++i) acc += dout[i] * vr[i];
          dp[s] = acc;
          dot_pdp += p[s] * acc;
          double* dvr = dv.row(s) + off;
          for (std::size_t i = 0; i < hd; ++i) dvr[i] += p[s] * dout[i];
        }
        const double* qr = lt.q.row(t) + off;
        double* dqr = dq.row(t) + off;
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = p[s] * (dp[s] - dot_pdp) * scale;
          if (ds == 0.0) continue;
          const double* kr = lt.k.row(s) + off;
          double* dkr = dk.row(s) + off;
          for (std::size_t i = 0; i < hd; ++i) {
            dqr[i] += ds * kr[i];
            dkr[i] += ds * qr[i];
          }
        }
      }
    }
    if (gl) {
      linear_backward_weight(dq.data.data(), lt.h1.data.data(), T, D, D, gl->wq);
      linear_backward_weight(dk.data.data(), lt.h1.data.data(), T, D, D, gl->wk);
      linear_backward_weight(dv.data.data(), lt.h1.data.data(), T, D, D, gl->wv);
    }
    Matrix dh1(T, D);
    linear_backward_input(dq.data.data(), T, L.wq, dh1.data.data());
    linear_backward_input(dk.data.data(), T, L.wk, dh1.data.data());
    linear_backward_input(dv.data.data(), T, L.wv, dh1.data.data());
    dx = dx_mid;
    for (std::size_t t = 0; t < T; ++t)
      layer_norm_backward_row(dh1.row(t), lt.x_in.row(t), lt.mean1[t], lt.rstd1[t], L.ln1_g, D, dx.row(t),
                              gl ? &gl->ln1_g : nullptr, gl ? &gl->ln1_b : nullptr);
  }

  if (full) {
    for (std::size_t t = 0; t < T; ++t) {
      double* te = full->tok_emb.data() + static_cast<std::size_t>(trace.tokens[t]) * D;
      double* pe = full->pos_emb.data() + t * D;
      for (std::size_t i = 0; i < D; ++i) {
        te[i] += dx(t, i);
        pe[i] += dx(t, i);
      }
    }
  }
  return ffn;
}

// ---------------------------------------------------------------- decoding

Decoder::Decoder(const Network& net) : net_(net) {
  const auto D = static_cast<std::size_t>(net.config().d_model);
  const auto C = static_cast<std::size_t>(net.config().context_len);
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    k_cache_.emplace_back(C, D);
    v_cache_.emplace_back(C, D);
  }
  logits_.assign(static_cast<std::size_t>(net.config().vocab_size), 0.0);
}

const Vec& Decoder::step(Token token) {
  const auto& c = net_.config();
  if (pos_ >= static_cast<std::size_t>(c.context_len))
    throw Error(ErrorCode::context_overflow, "decoder context is full");
  if (token < 0 || token >= c.vocab_size) throw Error(ErrorCode::format_error, "token id out of range");
  const auto D = static_cast<std::size_t>(c.d_model);
  const auto F = static_cast<std::size_t>(c.d_ffn);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const std::size_t hd = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t t = pos_;

  Vec x(D), h(D), q(D), att(D), a(D), u(F), f(D);
  Vec probs(t + 1);
  const double* e = net_.tok_emb().data() + static_cast<std::size_t>(token) * D;
  const double* p = net_.pos_emb().data() + t * D;
  for (std::size_t i = 0; i < D; ++i) x[i] = e[i] + p[i];
  double mean, rstd;
  for (std::size_t li = 0; li < net_.layers().size(); ++li) {
    const auto& L = net_.layers()[li];
    layer_norm_row(x.data(), D, L.ln1_g, L.ln1_b, h.data(), mean, rstd);
    linear_forward(h.data(), 1, L.wq, nullptr, q.data());
    linear_forward(h.data(), 1, L.wk, nullptr, k_cache_[li].row(t));
    linear_forward(h.data(), 1, L.wv, nullptr, v_cache_[li].row(t));
    for (std::size_t hh = 0; hh < H; ++hh)
      attend_row(q.data(), k_cache_[li], v_cache_[li], t, hh, hd, scale, probs.data(), att.data());
    linear_forward(att.data(), 1, L.wo, nullptr, a.data());
    for (std::size_t i = 0; i < D; ++i) x[i] += a[i];
    layer_norm_row(x.data(), D, L.ln2_g, L.ln2_b, h.data(), mean, rstd);
    linear_forward(h.data(), 1, L.w1, &L.b1, u.data());
    for (double& v : u) v = gelu(v);
    linear_forward(u.data(), 1, L.w2, &L.b2, f.data());
    for (std::size_t i = 0; i < D; ++i) x[i] += f[i];
  }
  layer_norm_row(x.data(), D, net_.lnf_g(), net_.lnf_b(), h.data(), mean, rstd);
  linear_forward(h.data(), 1, net_.head(), &net_.b_out(), logits_.data());
  ++pos_;
  return logits_;
}

std::vector<Token> generate_tokens(const Network& net, std::vector<Token> prompt, const SamplingOptions& opts) {
  const auto C = static_cast<std::size_t>(net.config().context_len);
  if (prompt.empty()) prompt.push_back(tokenizer::kBos);
  if (prompt.size() > C) prompt.erase(prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(prompt.size() - C));
  std::vector<Token> out;
  if (opts.max_tokens == 0) return out;
  Decoder dec(net);
  const Vec* logits = nullptr;
  for (Token t : prompt) logits = &dec.step(t);
  Rng rng(opts.seed);
  const bool greedy = opts.temperature < 1e-6;
  Vec probs(logits->size());
  while (out.size() < opts.max_tokens) {
    const Vec& l = *logits;
    // PAD, BOS and SEP are never emitted.
    auto allowed = [](std::size_t j) {
      return j != static_cast<std::size_t>(tokenizer::kPad) && j != static_cast<std::size_t>(tokenizer::kBos) &&
             j != static_cast<std::size_t>(tokenizer::kSep);
    };
    std::size_t choice = 0;
    if (greedy) {
      double best = -INFINITY;
      for (std::size_t j = 0; j < l.size(); ++j) {
        if (allowed(j) && l[j] > best) {
          best = l[j];
          choice = j;
        }
      }
    } else {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < l.size(); ++j) {
        if (allowed(j)) mx = std::max(mx, l[j] / opts.temperature);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < l.size(); ++j) {
        probs[j] = allowed(j) ? std::exp(l[j] / opts.temperature - mx) : 0.0;
        sum += probs[j];
      }
      const double r = rng.uniform() * sum;
      double acc = 0.0;
      choice = l.size();
      for (std::size_t j = 0; j < l.size(); ++j) {
        if (probs[j] == 0.0) continue;
        acc += probs[j];
        choice = j;
        if (r < acc) break;
      }
    }
    const auto tok = static_cast<Token>(choice);
    if (tok == tokenizer::kEos) break;
    out.push_back(tok);
    if (dec.position() >= C) break;
    logits = &dec.step(tok);
  }
  return out;
}

std::string generate(const Network& net, const std::vector<Token>& prompt, const SamplingOptions& opts) {
  return tokenizer::decode(generate_tokens(net, prompt, opts));
}

// ---------------------------------------------------------------- pretraining

PretrainReport pretrain_base(BaseModel& base, const CorpusStore& store, const PretrainOptions& opts) {
  if (base.frozen()) throw Error(ErrorCode::frozen_model, "cannot pretrain a frozen base");
  if (store.empty()) throw Error(ErrorCode::empty_corpus, "pretraining corpus is empty");
  const auto& cfg = base.config();
  std::vector<Token> stream;
  for (const auto& d : store.documents) {
    stream.push_back(tokenizer::kBos);
    const auto enc = tokenizer::encode(d.raw_text);
    stream.insert(stream.end(), enc.begin(), enc.end());
    stream.push_back(tokenizer::kEos);
  }
  const std::size_t window =
      std::min({opts.seq_len, static_cast<std::size_t>(cfg.context_len), stream.size() - 1});
  if (window == 0) throw Error(ErrorCode::empty_corpus, "pretraining corpus has no text");
  const std::size_t max_start = stream.size() - window - 1;

  auto slice = [&](std::size_t start, std::vector<Token>& in, std::vector<Token>& target) {
    in.assign(stream.begin() + static_cast<std::ptrdiff_t>(start), stream.begin() + static_cast<std::ptrdiff_t>(start + window));
    target.assign(stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                  stream.begin() + static_cast<std::ptrdiff_t>(start + window + 1));
  };
  const std::vector<std::uint8_t> mask(window, 1);

  Rng eval_rng(derive_seed(opts.seed, "pretrain-eval"));
  std::vector<std::size_t> eval_starts;
  for (std::size_t i = 0; i < opts.eval_windows; ++i) eval_starts.push_back(max_start ? eval_rng.below(max_start + 1) : 0);
  auto evaluate = [&]() {
    const Network net(base);
    double total = 0.0;
    std::vector<Token> in, target;
    for (std::size_t s : eval_starts) {
      slice(s, in, target);
      total += nll_loss(forward(net, in), target, mask);
    }
    return eval_starts.empty() ? 0.0 : total / static_cast<double>(eval_starts.size());
  };

  PretrainReport report;
  report.initial_loss = evaluate();

  std::vector<Vec> m1, m2;
  base.visit([&](const std::string&, const Tensor& t) {
    m1.emplace_back(t.data.size(), 0.0);
    m2.emplace_back(t.data.size(), 0.0);
  });
  Rng rng(derive_seed(opts.seed, "pretrain-windows"));
  std::vector<Token> in, target;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    const Network net(base);
    ParamGrads grads = ParamGrads::zeros(cfg);
    double step_loss = 0.0;
    const std::size_t batch = std::max<std::size_t>(1, opts.batch_size);
    for (std::size_t b = 0; b < batch; ++b) {
      slice(max_start ? rng.below(max_start + 1) : 0, in, target);
      ForwardTrace trace;
      const Matrix logits = forward(net, in, &trace);
      step_loss += nll_loss(logits, target, mask);
      Matrix d = nll_loss_grad(logits, target, mask);
      for (double& v : d.data) v /= static_cast<double>(batch);
      backward(trace, d, &grads);
    }
    report.step_losses.push_back(step_loss / static_cast<double>(batch));

    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(opts.adam.beta1, t);
    const double c2 = 1.0 - std::pow(opts.adam.beta2, t);
    std::vector<Vec*> gvecs;
    grads.visit([&](const std::string&, Vec& g) { gvecs.push_back(&g); });
    std::size_t idx = 0;
    base.visit_mutable([&](const std::string&, Tensor& p) {
      const Vec& g = *gvecs[idx];
      Vec& a = m1[idx];
      Vec& b = m2[idx];
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        a[i] = opts.adam.beta1 * a[i] + (1.0 - opts.adam.beta1) * g[i];
        b[i] = opts.adam.beta2 * b[i] + (1.0 - opts.adam.beta2) * g[i] * g[i];
        const double upd = opts.lr * (a[i] / c1) / (std::sqrt(b[i] / c2) + opts.adam.eps);
        p.data[i] = static_cast<float>(static_cast<double>(p.data[i]) - upd);
      }
      ++idx;
    });
    if ((step + 1) % 50 == 0 || step + 1 == opts.steps)
      log::debug("pretrain_step", {{"step", step + 1}, {"loss", report.step_losses.back()}});
  }
  report.final_loss = evaluate();
  base.freeze();
  log::info("pretrain_done", {{"steps", opts.steps}, {"initial_loss", report.initial_loss}, {"final_loss", report.final_loss}});
  return report;
}

}  // namespace prag
