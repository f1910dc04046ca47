#include "decaypo/decay.hpp"

#include <cmath>
#include <stdexcept>

namespace decaypo {

void DecaySchedule::validate() const {
  if (!std::isfinite(gamma)) throw std::invalid_argument("decay gamma must be finite");
  switch (kind) {
    case DecayKind::Uniform:
      return;
    case DecayKind::Exponential:
      if (gamma <= 0.0) throw std::invalid_argument("exponential decay requires gamma > 0");
      return;
    case DecayKind::Head:
    case DecayKind::Linear:
      if (gamma <= 0.0 || gamma > 1.0) {
        throw std::invalid_argument(to_string(kind) + " decay requires 0 < gamma <= 1");
      }
      return;
    case DecayKind::PowerLaw:
      if (gamma < 0.0) throw std::invalid_argument("power-law decay requires gamma >= 0");
      return;
  }
}

bool DecaySchedule::emphasizes_later_tokens() const {
  return kind == DecayKind::Exponential && gamma > 1.0;
}

std::vector<double> decay_weights(const DecaySchedule& s, int response_len, int prompt_len) {
  if (response_len < 1) throw std::invalid_argument("decay_weights: response length must be >= 1");
  if (prompt_len < 0) throw std::invalid_argument("decay_weights: prompt length must be >= 0");
  s.validate();
  const int origin = s.origin == DecayOrigin::PromptStart ? prompt_len : 0;
  std::vector<double> w(static_cast<std::size_t>(response_len), 0.0);
  // gamma^(o+t) is formed as gamma^o * gamma^t so that prompt-origin weights
  // are exactly the answer-origin weights times gamma^l.
  const double origin_factor = std::pow(s.gamma, origin);
  const double span = s.gamma * response_len;
  // gamma * T is rounded up; the slack absorbs representation error such as
  // 0.3 * 10 = 3.0000000000000004.
  const auto cutoff = static_cast<int>(std::ceil(span - 1e-9));
  for (int t = 0; t < response_len; ++t) {
    double& wt = w[static_cast<std::size_t>(t)];
    switch (s.kind) {
      case DecayKind::Uniform:
        wt = 1.0;
        break;
      case DecayKind::Exponential:
        wt = origin_factor * std::pow(s.gamma, t);
        break;
      case DecayKind::Head:
        wt = t < cutoff ? 1.0 : 0.0;
        break;
      case DecayKind::Linear:
        wt = t < cutoff ? 1.0 - t / span : 0.0;
        break;
      case DecayKind::PowerLaw:
        wt = 1.0 / std::pow(static_cast<double>(origin + t + 1), s.gamma);
        break;
    }
  }
  return w;
}

std::string to_string(DecayKind kind) {
  switch (kind) {
    case DecayKind::Uniform: return "uniform";
    case DecayKind::Exponential: return "exponential";
    case DecayKind::Head: return "head";
    case DecayKind::Linear: return "linear";
    case DecayKind::PowerLaw: return "power-law";
  }
  return "?";
}

std::string to_string(DecayOrigin origin) {
  return origin == DecayOrigin::PromptStart ? "prompt" : "answer";
}

DecayKind parse_decay_kind(std::string_view s) {
  if (s == "uniform") return DecayKind::Uniform;
  if (s == "exponential" || s == "exp") return DecayKind::Exponential;
  if (s == "head") return DecayKind::Head;
  if (s == "linear") return DecayKind::Linear;
  if (s == "power-law" || s == "powerlaw") return DecayKind::PowerLaw;
  throw std::invalid_argument("unknown decay schedule '" + std::string(s) + "'");
}

DecayOrigin parse_decay_origin(std::string_view s) {
  if (s == "prompt") return DecayOrigin::PromptStart;
  if (s == "answer") return DecayOrigin::AnswerStart;
  throw std::invalid_argument("unknown decay origin '" + std::string(s) + "'");
}

}  // namespace decaypo
