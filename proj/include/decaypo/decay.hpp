#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace decaypo {

enum class DecayKind { Uniform, Exponential, Head, Linear, PowerLaw };

/// Where position counting starts: the first prompt token or the first
/// response token.
enum class DecayOrigin { PromptStart, AnswerStart };

struct DecaySchedule {
  DecayKind kind = DecayKind::Exponential;
  double gamma = 0.98;
  DecayOrigin origin = DecayOrigin::PromptStart;

  /// Throws std::invalid_argument when gamma is outside the kind's range.
  void validate() const;
  /// True for Exponential with gamma > 1: later tokens outweigh earlier ones.
  bool emphasizes_later_tokens() const;

  bool operator==(const DecaySchedule&) const = default;
};

/// Per-position coefficients w_0 .. w_{T-1} for a response of length T that
/// follows a prompt of length l.
///
///   Uniform      1
///   Exponential  gamma^(o + t)                       o = l for PromptStart, else 0
///   Head         1 for t < ceil(gamma T), else 0     (origin ignored)
///   Linear       1 - t / (gamma T) for t < ceil(gamma T), else 0
///   PowerLaw     1 / (o + t + 1)^gamma
std::vector<double> decay_weights(const DecaySchedule& schedule, int response_len, int prompt_len);

std::string to_string(DecayKind kind);
std::string to_string(DecayOrigin origin);
DecayKind parse_decay_kind(std::string_view s);
DecayOrigin parse_decay_origin(std::string_view s);

}  // namespace decaypo
