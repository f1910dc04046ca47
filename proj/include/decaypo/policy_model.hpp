#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decaypo/tensor.hpp"

namespace decaypo {

/// Byte-level vocabulary: 256 byte values plus BOS and EOS.
struct Vocabulary {
  static constexpr int kSize = 258;
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;

  static std::vector<int> encode(std::string_view bytes);
  /// Inverse of encode(). BOS/EOS ids carry no bytes and are dropped.
  static std::string decode(std::span<const int> tokens);

  /// BOS followed by the prompt bytes.
  static std::vector<int> encode_prompt(std::string_view prompt);
  /// Response bytes followed by EOS.
  static std::vector<int> encode_response(std::string_view response);
  /// Bytes of a sampled response, stopping at the first EOS.
  static std::string decode_response(std::span<const int> tokens);
};

struct TokenSequence {
  std::vector<int> prompt_tokens;
  std::vector<int> response_tokens;

  std::size_t prompt_len() const { return prompt_tokens.size(); }
  std::size_t response_len() const { return response_tokens.size(); }
  std::size_t total_len() const { return prompt_tokens.size() + response_tokens.size(); }
  bool operator==(const TokenSequence&) const = default;
};

struct ModelConfig {
  int vocab_size = Vocabulary::kSize;
  int d_model = 64;
  int context = 256;
  int blocks = 2;
  int ff_mult = 4;
  double norm_eps = 1e-6;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

struct Parameter {
  std::string name;
  RealArray value;
};

/// Decoder-only transformer: token + learned position embeddings, pre-norm
/// single-head causal attention and ReLU feed-forward blocks, RMS-normalized
/// output projection. The output projection starts at zero, so a fresh model
/// predicts the uniform distribution.
class PolicyModel {
 public:
  static PolicyModel initialize(const ModelConfig& cfg);

  /// Builds a model from an explicit parameter list (checkpoint loading).
  PolicyModel(ModelConfig cfg, std::vector<Parameter> params);

  const ModelConfig& config() const { return cfg_; }
  int vocab_size() const { return cfg_.vocab_size; }
  int context() const { return cfg_.context; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Architecture string recorded in checkpoint manifests.
  std::string architecture() const;

  /// Records every parameter on the tape, as leaves or as constants.
  std::vector<Var> bind(Tape& tape, bool trainable) const;

  /// Next-token logits for rows [first_row, first_row + count) of the input.
  Var logits(std::span<const Var> params, std::span<const int> input, std::size_t first_row,
             std::size_t count) const;

  /// Per-token log-probabilities of the response tokens, on a tape.
  Var token_logprobs(std::span<const Var> params, const TokenSequence& seq) const;

  RealArray next_token_logits(std::span<const int> context) const;
  RealArray next_token_distribution(std::span<const int> context) const;
  RealArray token_logprobs(const TokenSequence& seq) const;
  /// Next-token logits at every response position, [T, V], in one pass.
  RealArray response_logits(const TokenSequence& seq) const;

  /// Temperature sampling; temperature 0 is greedy with ties to the lowest id.
  /// Stops after EOS or max_len tokens, or when the context is full.
  TokenSequence sample(std::span<const int> prompt, double temperature, int max_len,
                       std::uint64_t seed) const;

  bool operator==(const PolicyModel& other) const;

 private:
  void check_sequence(const TokenSequence& seq) const;

  ModelConfig cfg_;
  std::vector<Parameter> params_;
};

/// Draws one token from logits at the given temperature.
int sample_token(std::span<const double> logits, double temperature, double uniform01);

}  // namespace decaypo
