#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace prag {

struct CorpusStore;

using Token = std::int32_t;

/// Byte-level vocabulary: ids 0..255 are bytes, followed by four specials.
namespace tokenizer {
inline constexpr Token kPad = 256;
inline constexpr Token kBos = 257;
inline constexpr Token kEos = 258;
inline constexpr Token kSep = 259;
inline constexpr int kVocabSize = 260;

std::vector<Token> encode(std::string_view text);
/// Specials are dropped; byte tokens are emitted verbatim.
std::string decode(const std::vector<Token>& tokens);
inline bool is_special(Token t) { return t >= 256; }
}  // namespace tokenizer

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_ffn = 512;
  int context_len = 512;
  int vocab_size = tokenizer::kVocabSize;
  std::uint64_t seed = 0;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Row-major float tensor. Linear weights are stored [out × in].
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct LayerWeights {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;  // d_model × d_model
  Tensor ln2_g, ln2_b;
  Tensor w1, b1;  // d_ffn × d_model, d_ffn
  Tensor w2, b2;  // d_model × d_ffn, d_model
  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

enum class FfnMatrix : std::uint8_t { w1 = 0, w2 = 1 };

/// Pre-norm decoder-only transformer with learned positions, GELU FFN and an
/// untied output head. Parameters are 32-bit; all arithmetic runs in 64-bit.
class BaseModel {
 public:
  BaseModel() = default;
  /// Seeded initialization: weights ~ N(0, 0.02), biases 0, norm gains 1.
  explicit BaseModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  const Tensor& tok_emb() const { return tok_emb_; }
  const Tensor& pos_emb() const { return pos_emb_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Tensor& lnf_g() const { return lnf_g_; }
  const Tensor& lnf_b() const { return lnf_b_; }
  const Tensor& w_out() const { return w_out_; }
  const Tensor& b_out() const { return b_out_; }
  const Tensor& ffn_weight(int layer, FfnMatrix m) const;

  /// Visits every parameter tensor in checkpoint order. Throws FrozenModel
  /// from the mutable overload when the model is frozen.
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  void visit_mutable(const std::function<void(const std::string&, Tensor&)>& fn);

  /// FNV-1a64 over every parameter byte.
  std::uint64_t checksum() const;
  /// Identity used to bind adapters to a base: config and parameter checksum.
  std::uint64_t fingerprint() const;

  friend bool operator==(const BaseModel&, const BaseModel&) = default;

 private:
  ModelConfig config_;
  Tensor tok_emb_, pos_emb_;
  std::vector<LayerWeights> layers_;
  Tensor lnf_g_, lnf_b_, w_out_, b_out_;
  bool frozen_ = false;
};

/// "PLCM" checkpoint, see docs/formats.md.
void save_checkpoint(const BaseModel& model, const std::filesystem::path& path);
BaseModel load_checkpoint(const std::filesystem::path& path);

/// Dense additive FFN deltas in [out × in] layout, one pair per layer. An
/// empty vector stands for an all-zero delta.
struct FfnDeltas {
  std::vector<std::vector<double>> w1;
  std::vector<std::vector<double>> w2;

  bool empty() const;
  std::vector<double>& at(int layer, FfnMatrix m) { return m == FfnMatrix::w1 ? w1[layer] : w2[layer]; }
  const std::vector<double>& at(int layer, FfnMatrix m) const { return m == FfnMatrix::w1 ? w1[layer] : w2[layer]; }
};

using Vec = std::vector<double>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vec data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// A linear map held in both layouts: `k` is [in × out] for the forward
/// pass, `kt` is [out × in] (the stored weight layout) for the backward pass.
struct Kernel {
  std::size_t in = 0;
  std::size_t out = 0;
  Vec k;
  Vec kt;

  /// rows is [out × in].
  void assign(std::size_t out_dim, std::size_t in_dim, const Vec& rows);
};

struct NetworkLayer {
  Vec ln1_g, ln1_b;
  Kernel wq, wk, wv, wo;
  Vec ln2_g, ln2_b;
  Kernel w1;
  Vec b1;
  Kernel w2;
  Vec b2;
};

/// Effective 64-bit weights of a base model plus optional FFN deltas. This is
/// what forward, backward and sampling run on; it is immutable once built
/// except for FFN replacement during adapter training.
class Network {
 public:
  Network(const BaseModel& base, const FfnDeltas* deltas = nullptr);

  const ModelConfig& config() const { return config_; }
  const std::vector<NetworkLayer>& layers() const { return layers_; }

  /// FFN weight rows ([out × in]) of the base plus any deltas applied at construction.
  const Vec& ffn_rows(int layer, FfnMatrix m) const;
  /// Replaces one FFN matrix's effective weights.
  void set_ffn(int layer, FfnMatrix m, const Vec& rows);

  // Shared parameters, exposed for the forward/backward kernels.
  const Vec& tok_emb() const { return tok_emb_; }
  const Vec& pos_emb() const { return pos_emb_; }
  const Vec& lnf_g() const { return lnf_g_; }
  const Vec& lnf_b() const { return lnf_b_; }
  const Kernel& head() const { return head_; }
  const Vec& b_out() const { return b_out_; }

 private:
  ModelConfig config_;
  Vec tok_emb_, pos_emb_;
  std::vector<NetworkLayer> layers_;
  std::vector<Vec> ffn_rows_w1_, ffn_rows_w2_;
  Vec lnf_g_, lnf_b_;
  Kernel head_;
  Vec b_out_;
};

struct LayerTrace {
  Matrix x_in;
  Vec mean1, rstd1;
  Matrix h1, q, k, v;
  Vec probs;  // [heads × T × T], causal (entries above the diagonal stay 0)
  Matrix att;
  Matrix x_mid;
  Vec mean2, rstd2;
  Matrix h2, u, g;
};

/// Activations recorded by forward() for a later backward pass. The network
/// it was produced from must outlive the trace.
struct ForwardTrace {
  const Network* network = nullptr;
  std::vector<Token> tokens;
  std::vector<LayerTrace> layers;
  Matrix x_final;
  Vec meanf, rstdf;
  Matrix hf;
  bool recorded() const { return network != nullptr; }
};

/// Per-position logits [T × vocab]. Throws ContextOverflow when the input is
/// longer than context_len and EmptyInput on no tokens.
Matrix forward(const Network& net, const std::vector<Token>& tokens, ForwardTrace* trace = nullptr);

/// Mean negative log-likelihood over positions with mask[i] set. Throws AllMasked.
double nll_loss(const Matrix& logits, const std::vector<Token>& targets, const std::vector<std::uint8_t>& mask);
/// d(nll_loss)/d(logits).
Matrix nll_loss_grad(const Matrix& logits, const std::vector<Token>& targets, const std::vector<std::uint8_t>& mask);

/// Parameter gradients in the BaseModel layout (64-bit).
struct ParamGrads {
  Vec tok_emb, pos_emb;
  struct Layer {
    Vec ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  Vec lnf_g, lnf_b, w_out, b_out;

  static ParamGrads zeros(const ModelConfig& c);
  /// Same order as BaseModel::visit.
  void visit(const std::function<void(const std::string&, Vec&)>& fn);
};

/// Gradients flowing into each FFN linear output: d_w1_out[l] is [T × d_ffn],
/// d_w2_out[l] is [T × d_model]. Together with the recorded inputs (h2, g)
/// they determine every FFN weight gradient.
struct FfnOutputGrads {
  std::vector<Matrix> d_w1_out;
  std::vector<Matrix> d_w2_out;
};

/// Backpropagates dlogits through the recorded trace. Accumulates into `full`
/// when given (pretraining); always returns the FFN output gradients.
/// Throws NoTrace when the trace was not recorded.
FfnOutputGrads backward(const ForwardTrace& trace, const Matrix& dlogits, ParamGrads* full = nullptr);

/// Incremental decoder with a key/value cache. Produces the same logits as
/// forward() row by row.
class Decoder {
 public:
  explicit Decoder(const Network& net);
  /// Appends one token and returns its logits row. Throws ContextOverflow.
  const Vec& step(Token token);
  std::size_t position() const { return pos_; }

 private:
  const Network& net_;
  std::size_t pos_ = 0;
  std::vector<Matrix> k_cache_, v_cache_;
  Vec logits_;
};

struct SamplingOptions {
  std::size_t max_tokens = 128;
  double temperature = 0.7;
  std::uint64_t seed = 0;
};

/// Autoregressive temperature sampling from a prompt token sequence. Prompts
/// that do not fit are truncated from the left; generation stops at EOS,
/// max_tokens, or a full context. Temperatures below 1e-6 switch to argmax.
std::vector<Token> generate_tokens(const Network& net, std::vector<Token> prompt, const SamplingOptions& opts);
std::string generate(const Network& net, const std::vector<Token>& prompt, const SamplingOptions& opts);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct PretrainOptions {
  std::size_t steps = 500;
  double lr = 3e-3;
  std::size_t seq_len = 128;
  std::size_t batch_size = 1;
  std::size_t eval_windows = 8;
  AdamSettings adam;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> step_losses;
};

/// Next-token training of every parameter on the documents' raw text
/// ([BOS] text [EOS] streams, random windows), then freezes the model.
/// Throws EmptyCorpus, or FrozenModel if already frozen.
PretrainReport pretrain_base(BaseModel& base, const CorpusStore& store, const PretrainOptions& opts);

}  // namespace prag
