#pragma once

#include "prag/augmentation.hpp"
#include "prag/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace prag {

/// Bit set over FfnMatrix: bit 0 = W1, bit 1 = W2.
inline constexpr std::uint32_t kTargetW1 = 1u;
inline constexpr std::uint32_t kTargetW2 = 2u;
inline constexpr std::uint32_t kTargetBoth = kTargetW1 | kTargetW2;

/// Low-rank factors for one host matrix. delta = scale · A · Bᵀ, where A has
/// the host's output dimension as rows and B its input dimension.
struct LoraFactors {
  int layer = 0;
  FfnMatrix matrix = FfnMatrix::w1;
  Tensor a;  // out × rank
  Tensor b;  // in × rank

  friend bool operator==(const LoraFactors&, const LoraFactors&) = default;
};

struct LoraAdapter {
  std::string doc_id;
  std::uint64_t config_hash = 0;  // BaseModel::fingerprint of the base it was built for
  std::uint32_t rank = 2;
  double alpha = 32.0;
  std::uint32_t layer_count = 0;
  std::uint32_t target_mask = kTargetBoth;
  std::vector<LoraFactors> factors;  // ordered by (layer, matrix)
  nlohmann::json meta = nlohmann::json::object();

  double scale() const { return alpha / static_cast<double>(rank); }
  const LoraFactors* find(int layer, FfnMatrix m) const;

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

struct AdapterOptions {
  std::uint32_t rank = 2;
  double alpha = 32.0;
  std::uint32_t target_mask = kTargetBoth;
  double init_std = 0.02;

  nlohmann::json to_json() const;
  static AdapterOptions from_json(const nlohmann::json& j);
};

/// A ~ N(0, init_std), B = 0. Throws BadRank when rank is 0 or not below
/// min(d_model, d_ffn), ConfigError on an empty target mask.
LoraAdapter init_adapter(const std::string& doc_id, const BaseModel& base, const AdapterOptions& opts,
                         std::uint64_t seed);

/// scale · A · Bᵀ as a dense [out × in] matrix.
Vec dense_delta(const LoraFactors& f, double scale);

/// Network with the adapter's delta applied to its target matrices.
Network network_with(const BaseModel& base, const LoraAdapter& adapter);

/// Gradients for the factors, in the same order as LoraAdapter::factors.
struct LoraGrads {
  std::vector<Vec> da;
  std::vector<Vec> db;
};

/// Backpropagates dlogits and reduces the FFN output gradients onto the
/// adapter's factors. The trace must come from a network carrying this
/// adapter. Base parameters receive no gradient. Throws NoTrace.
LoraGrads backward_lora(const ForwardTrace& trace, const Matrix& dlogits, const LoraAdapter& adapter);

/// One tokenized training example: inputs, next-token targets and loss mask.
struct TrainingSequence {
  std::vector<Token> inputs;
  std::vector<Token> targets;
  std::vector<std::uint8_t> mask;
};

/// [BOS] "FACTS: " q′ [SEP] "<LABEL> " a′ [EOS]. With answer_only, only the
/// positions predicting a′ and EOS count. Over-long sequences lose query
/// bytes from the left first, then answer bytes from the end.
TrainingSequence encode_qa(const QAPair& pair, int context_len, bool answer_only = true);

struct TrainOptions {
  double lr = 1e-3;
  std::size_t epochs = 1;
  AdamSettings adam;
  bool answer_only = true;

  nlohmann::json to_json() const;
  static TrainOptions from_json(const nlohmann::json& j);
};

/// Mean of the per-sequence NLLs.
double mean_nll(const Network& net, const std::vector<TrainingSequence>& seqs);

/// Trains a fresh adapter on the pairs, one Adam step per pair, pairs in the
/// given order. Records initial/final mean NLL in meta. Requires a frozen
/// base (ConfigError otherwise); throws EmptyTrainingSet.
LoraAdapter train_adapter(const BaseModel& base, const std::string& doc_id, const std::vector<QAPair>& pairs,
                          const AdapterOptions& aopts, const TrainOptions& topts, std::uint64_t seed);

/// Summed FFN deltas of a set of adapters. The zero delta has empty `deltas`.
struct ComposedDelta {
  FfnDeltas deltas;
  std::vector<std::string> provenance;  // doc ids in accumulation order
  std::uint64_t config_hash = 0;

  bool empty() const { return provenance.empty(); }
};

/// Σ scale·A·Bᵀ accumulated in ascending doc_id order whatever the input
/// order. Throws ConfigMismatch when adapters disagree on base or shapes.
ComposedDelta compose_deltas(const std::vector<const LoraAdapter*>& adapters);
ComposedDelta compose_deltas(const std::vector<LoraAdapter>& adapters);

/// Base weights plus the offline and online deltas, applied to FFN matrices
/// as W + (offline + online). The base itself is never modified.
class InjectedModel {
 public:
  /// Throws ConfigMismatch when a delta was built for another base.
  InjectedModel(const BaseModel& base, const ComposedDelta& offline, const ComposedDelta* online = nullptr);

  const Network& network() const { return network_; }
  const std::vector<std::string>& offline_ids() const { return offline_ids_; }
  const std::vector<std::string>& online_ids() const { return online_ids_; }

 private:
  std::vector<std::string> offline_ids_;
  std::vector<std::string> online_ids_;
  Network network_;
};

InjectedModel inject(const BaseModel& base, const ComposedDelta& offline, const ComposedDelta* online = nullptr);

/// "PLCA" adapter file, see docs/formats.md.
void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path);
/// Throws IoError, VersionMismatch, ChecksumFailure.
LoraAdapter load_adapter(const std::filesystem::path& path);

/// "PLCD" composed-delta file (dense 64-bit deltas plus provenance).
void save_composed(const ComposedDelta& delta, const std::filesystem::path& path);
ComposedDelta load_composed(const std::filesystem::path& path);

/// Directory of adapter files plus manifest.json mapping keys to files. The
/// key is the doc id unless the caller supplies a more specific one.
/// The manifest is rewritten after every put, so an interrupted offline
/// training run resumes from the adapters already on disk.
class AdapterStore {
 public:
  explicit AdapterStore(std::filesystem::path dir);

  /// Path the adapter for a key lives at (sanitized key plus hash suffix).
  std::filesystem::path path_for(const std::string& key) const;
  bool contains(const std::string& key) const;
  void put(const LoraAdapter& adapter);
  void put(const std::string& key, const LoraAdapter& adapter);
  LoraAdapter get(const std::string& key) const;
  std::vector<std::string> keys() const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  void write_manifest_locked() const;

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> files_;
};

}  // namespace prag
