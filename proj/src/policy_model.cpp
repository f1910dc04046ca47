#include "decaypo/policy_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "decaypo/rng.hpp"

namespace decaypo {

// ---------------------------------------------------------------------------
// Vocabulary

std::vector<int> Vocabulary::encode(std::string_view bytes) {
  std::vector<int> out;
  out.reserve(bytes.size());
  for (char c : bytes) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::string Vocabulary::decode(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  }
  return out;
}

std::vector<int> Vocabulary::encode_prompt(std::string_view prompt) {
  std::vector<int> out{kBos};
  for (char c : prompt) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::vector<int> Vocabulary::encode_response(std::string_view response) {
  std::vector<int> out = encode(response);
  out.push_back(kEos);
  return out;
}

std::string Vocabulary::decode_response(std::span<const int> tokens) {
  auto end = std::find(tokens.begin(), tokens.end(), kEos);
  return decode(std::span<const int>(tokens.begin(), end));
}

// ---------------------------------------------------------------------------
// Layout

namespace {

struct Shape {
  std::string name;
  std::size_t rows, cols;
};

std::vector<Shape> layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto ff = d * static_cast<std::size_t>(c.ff_mult);
  std::vector<Shape> out{{"tok_emb", v, d}, {"pos_emb", static_cast<std::size_t>(c.context), d}};
  for (int b = 0; b < c.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    out.push_back({p + "wq", d, d});
    out.push_back({p + "wk", d, d});
    out.push_back({p + "wv", d, d});
    out.push_back({p + "wo", d, d});
    out.push_back({p + "w1", d, ff});
    out.push_back({p + "w2", ff, d});
  }
  out.push_back({"out", d, v});
  return out;
}

void validate_config(const ModelConfig& c) {
  if (c.vocab_size < 2 || c.d_model < 1 || c.context < 2 || c.blocks < 0 || c.ff_mult < 1) {
    throw std::invalid_argument("invalid model configuration");
  }
}

constexpr std::size_t kPerBlock = 6;

}  // namespace

PolicyModel PolicyModel::initialize(const ModelConfig& cfg) {
  validate_config(cfg);
  Rng rng(substream(cfg.seed, "init"));
  std::vector<Parameter> params;
  const double d = cfg.d_model;
  const double depth_scale = 1.0 / std::sqrt(2.0 * std::max(cfg.blocks, 1));
  for (const Shape& s : layout(cfg)) {
    RealArray a({s.rows, s.cols});
    double stddev = 1.0 / std::sqrt(static_cast<double>(s.rows));
    if (s.name == "tok_emb" || s.name == "pos_emb") stddev = 1.0 / std::sqrt(d);
    if (s.name.ends_with(".wo") || s.name.ends_with(".w2")) stddev *= depth_scale;
    if (s.name == "out") stddev = 0.0;
    if (stddev > 0.0) {
      for (double& v : a.values()) v = stddev * rng.normal();
    }
    params.push_back({s.name, std::move(a)});
  }
  return PolicyModel(cfg, std::move(params));
}

PolicyModel::PolicyModel(ModelConfig cfg, std::vector<Parameter> params)
    : cfg_(cfg), params_(std::move(params)) {
  validate_config(cfg_);
  const auto expected = layout(cfg_);
  if (expected.size() != params_.size()) {
    throw std::invalid_argument("PolicyModel: expected " + std::to_string(expected.size()) +
                                " parameter arrays, got " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& p = params_[i];
    if (p.name != expected[i].name ||
        p.value.shape() != std::vector<std::size_t>{expected[i].rows, expected[i].cols}) {
      throw std::invalid_argument("PolicyModel: parameter " + std::to_string(i) + " (" + p.name +
                                  ") does not match the architecture");
    }
  }
}

std::size_t PolicyModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::string PolicyModel::architecture() const {
  return "transformer-prenorm-rms/single-head-causal-attention/relu-ffn;vocab=" +
         std::to_string(cfg_.vocab_size) + ";d=" + std::to_string(cfg_.d_model) +
         ";context=" + std::to_string(cfg_.context) + ";blocks=" + std::to_string(cfg_.blocks) +
         ";ff_mult=" + std::to_string(cfg_.ff_mult);
}

std::vector<Var> PolicyModel::bind(Tape& tape, bool trainable) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(trainable ? tape.leaf(p.value) : tape.constant(p.value));
  return vars;
}

Var PolicyModel::logits(std::span<const Var> params, std::span<const int> input,
                        std::size_t first_row, std::size_t count) const {
  if (input.empty()) throw std::invalid_argument("logits: empty input");
  if (input.size() > static_cast<std::size_t>(cfg_.context)) {
    throw std::invalid_argument("input of length " + std::to_string(input.size()) +
                                " exceeds context " + std::to_string(cfg_.context));
  }
  if (first_row + count > input.size()) throw std::invalid_argument("logits: row range");
  std::vector<int> positions(input.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

  Var x = add(take_rows(params[0], input), take_rows(params[1], positions));
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::size_t o = 2 + kPerBlock * static_cast<std::size_t>(b);
    Var h = rms_norm(x, cfg_.norm_eps);
    Var q = matmul(h, params[o + 0]);
    Var k = matmul(h, params[o + 1]);
    Var v = matmul(h, params[o + 2]);
    Var att = causal_softmax(matmul(q, transpose(k)), att_scale);
    x = add(x, matmul(matmul(att, v), params[o + 3]));
    Var h2 = rms_norm(x, cfg_.norm_eps);
    x = add(x, matmul(relu(matmul(h2, params[o + 4])), params[o + 5]));
  }
  Var rows = slice_rows(x, first_row, count);
  return matmul(rms_norm(rows, cfg_.norm_eps), params.back());
}

void PolicyModel::check_sequence(const TokenSequence& seq) const {
  if (seq.prompt_tokens.empty()) throw std::invalid_argument("sequence has an empty prompt");
  if (seq.response_tokens.empty()) throw std::invalid_argument("sequence has an empty response");
  if (seq.total_len() > static_cast<std::size_t>(cfg_.context)) {
    throw std::invalid_argument("sequence of length " + std::to_string(seq.total_len()) +
                                " exceeds context " + std::to_string(cfg_.context));
  }
  for (int t : seq.prompt_tokens)
    if (t < 0 || t >= cfg_.vocab_size) throw std::invalid_argument("token id out of range");
  for (int t : seq.response_tokens)
    if (t < 0 || t >= cfg_.vocab_size) throw std::invalid_argument("token id out of range");
}

Var PolicyModel::token_logprobs(std::span<const Var> params, const TokenSequence& seq) const {
  check_sequence(seq);
  std::vector<int> input = seq.prompt_tokens;
  input.insert(input.end(), seq.response_tokens.begin(), seq.response_tokens.end() - 1);
  const std::size_t l = seq.prompt_len();
  Var z = logits(params, input, l - 1, seq.response_len());
  return log_softmax_gather(z, seq.response_tokens);
}

RealArray PolicyModel::next_token_logits(std::span<const int> context) const {
  if (context.empty()) throw std::invalid_argument("next_token_distribution: empty context");
  Tape tape;
  auto vars = bind(tape, false);
  Var z = logits(vars, context, context.size() - 1, 1);
  return RealArray({static_cast<std::size_t>(cfg_.vocab_size)}, z.value().data());
}

RealArray PolicyModel::next_token_distribution(std::span<const int> context) const {
  RealArray z = next_token_logits(context);
  const double m = *std::max_element(z.values().begin(), z.values().end());
  double s = 0.0;
  for (double& v : z.values()) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : z.values()) v /= s;
  return z;
}

RealArray PolicyModel::token_logprobs(const TokenSequence& seq) const {
  Tape tape;
  auto vars = bind(tape, false);
  return token_logprobs(vars, seq).value();
}

RealArray PolicyModel::response_logits(const TokenSequence& seq) const {
  check_sequence(seq);
  std::vector<int> input = seq.prompt_tokens;
  input.insert(input.end(), seq.response_tokens.begin(), seq.response_tokens.end() - 1);
  Tape tape;
  auto vars = bind(tape, false);
  return logits(vars, input, seq.prompt_len() - 1, seq.response_len()).value();
}

int sample_token(std::span<const double> logits, double temperature, double uniform01) {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  if (temperature == 0.0) {
    // max_element returns the first maximum, i.e. the lowest id.
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp((logits[i] - m) / temperature);
    s += w[i];
  }
  const double target = uniform01 * s;
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (target < acc) return static_cast<int>(i);
  }
  // Rounding can leave target == s; fall back to the last nonzero weight.
  for (std::size_t i = w.size(); i-- > 0;)
    if (w[i] > 0.0) return static_cast<int>(i);
  return 0;
}

TokenSequence PolicyModel::sample(std::span<const int> prompt, double temperature, int max_len,
                                  std::uint64_t seed) const {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  if (prompt.empty()) throw std::invalid_argument("sample: empty prompt");
  Rng rng(seed);
  TokenSequence seq{{prompt.begin(), prompt.end()}, {}};
  std::vector<int> context(prompt.begin(), prompt.end());
  while (static_cast<int>(seq.response_tokens.size()) < max_len &&
         context.size() < static_cast<std::size_t>(cfg_.context)) {
    RealArray z = next_token_logits(context);
    const double u = rng.uniform();
    const int tok = sample_token(z.values(), temperature, u);
    seq.response_tokens.push_back(tok);
    context.push_back(tok);
    if (tok == Vocabulary::kEos && cfg_.vocab_size == Vocabulary::kSize) break;
  }
  return seq;
}

bool PolicyModel::operator==(const PolicyModel& other) const {
  if (!(cfg_ == other.cfg_) || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name || !(params_[i].value == other.params_[i].value))
      return false;
  }
  return true;
}

}  // namespace decaypo
