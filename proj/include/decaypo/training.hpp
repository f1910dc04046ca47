#pragma once

// Preference training on the toy policy: cosine schedule, AdamW, float32
// checkpoints, SFT pretraining on the synthetic task, and oracle win rates.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "decaypo/data.hpp"
#include "decaypo/losses.hpp"
#include "decaypo/policy_model.hpp"

namespace decaypo {

/// Linear warmup from 0 to base_lr over ceil(warmup_fraction * total_steps)
/// steps, then base_lr * (1 + cos(pi * progress)) / 2.
double cosine_lr(int step, int total_steps, double warmup_fraction, double base_lr);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay over a list of parameter arrays.
class AdamW {
 public:
  AdamW(const std::vector<Parameter>& params, AdamWConfig cfg);
  void step(std::vector<Parameter>& params, const std::vector<RealArray>& grads, double lr);
  long steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<RealArray> m_, v_;
  long t_ = 0;
};

struct TrainConfig {
  LossConfig loss{};
  /// Reference learning rate and the desk-scale multiplier applied to it.
  double base_lr = 5e-7;
  double lr_multiplier = 1e3;
  int batch_size = 32;
  double warmup_fraction = 0.10;
  int epochs = 1;
  /// If > 0, train for exactly this many steps, cycling through epochs.
  int steps = 0;
  std::uint64_t seed = 0;
  int max_response_len = 256;
  AdamWConfig optimizer{};
  /// Global-norm clipping threshold; 0 disables clipping.
  double grad_clip = 0.0;

  double learning_rate() const { return base_lr * lr_multiplier; }
  void validate() const;
};

struct Checkpoint {
  explicit Checkpoint(PolicyModel m) : model(std::move(m)) {}

  PolicyModel model;
  std::string vocabulary = "bytes256+bos+eos";
  std::string config_hash;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  /// Rounds the parameters to float32 so the in-memory checkpoint equals
  /// what a save/load round trip produces.
  static Checkpoint from_model(PolicyModel model, std::string config_hash, std::uint64_t step,
                               std::uint64_t seed);
  bool operator==(const Checkpoint&) const = default;
};

/// Container: "DPOCKPT1", uint64 LE manifest length, manifest JSON, then the
/// parameters as little-endian float32 in manifest order.
std::string checkpoint_to_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Stable short hash of arbitrary text (used for config hashes).
std::string hash_text(std::string_view text);

struct StepMetrics {
  long step = 0;
  double loss = 0.0;
  double margin = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool operator==(const StepMetrics&) const = default;
};
/// One JSON object per line: {"step","loss","margin","grad_norm","lr"}.
std::string metrics_to_jsonl(const std::vector<StepMetrics>& metrics);

/// Token sequences of a pair plus precomputed reference log-probabilities.
struct PreparedPair {
  TokenSequence chosen;
  TokenSequence rejected;
  std::optional<RealArray> chosen_ref;
  std::optional<RealArray> rejected_ref;
  std::uint64_t example_id = 0;
};

/// Tokenizes a pair; returns nullopt if it would not fit the context.
std::optional<PreparedPair> prepare_pair(const PolicyModel& policy, const PolicyModel* reference,
                                         const PreferencePair& pair, int max_response_len);

/// Log-probabilities of both responses under the policy (and reference).
PairScore score_pair(const PolicyModel& policy, const PolicyModel* reference,
                     const PreferencePair& pair);

struct BatchGradient {
  double loss = 0.0;
  double margin = 0.0;
  std::vector<RealArray> grads;
  double norm() const;
};

/// Mean batch loss and its gradient with respect to every parameter.
BatchGradient batch_gradient(const PolicyModel& policy, const std::vector<const PreparedPair*>& batch,
                             const LossConfig& cfg);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> metrics;
  std::size_t skipped_overflow = 0;
};

using WarningSink = std::function<void(const std::string&)>;

/// Deterministic per (cfg, pairs, init): batches follow a per-epoch
/// permutation drawn from the "data" substream of cfg.seed.
TrainResult train(const TrainConfig& cfg, const std::vector<PreferencePair>& pairs,
                  const Checkpoint& init, const Checkpoint* reference,
                  const WarningSink& warn = {});

struct SftConfig {
  int steps = 300;
  int batch_size = 16;
  double lr = 3e-3;
  double warmup_fraction = 0.10;
  std::uint64_t seed = 0;
};

/// Plain next-token NLL on prompt -> target + EOS pairs from the corpus.
PolicyModel pretrain_sft(const ModelConfig& model_cfg, const TaskCorpus& corpus, const SftConfig& cfg,
                         std::vector<StepMetrics>* metrics = nullptr);

struct WinRate {
  int win = 0;
  int tie = 0;
  int lose = 0;
  int total() const { return win + tie + lose; }
  /// (win + tie / 2) / total.
  double rate() const;
};

/// One sample per model per prompt; both models use the same seed for a
/// given prompt.
WinRate evaluate_winrate(const PolicyModel& candidate, const PolicyModel& baseline,
                         const RewardOracle& oracle, const std::vector<std::string>& prompts,
                         double temperature, std::uint64_t seed, int max_len = 256);

}  // namespace decaypo
