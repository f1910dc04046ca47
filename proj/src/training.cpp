#include "decaypo/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "decaypo/rng.hpp"
#include "json.hpp"

namespace decaypo {

namespace {

constexpr std::string_view kMagic = "DPOCKPT1";

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

/// Per-epoch permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, long epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(substream(substream(seed, "data"), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

double global_norm(const std::vector<RealArray>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

[[noreturn]] void fail(const std::string& what) {
  throw std::runtime_error("invalid checkpoint: " + what);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule and optimizer

double cosine_lr(int step, int total_steps, double warmup_fraction, double base_lr) {
  require(total_steps >= 0 && step >= 0 && step <= total_steps, "cosine_lr: need 0 <= step <= total");
  require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "cosine_lr: warmup fraction in [0, 1)");
  if (total_steps == 0) return base_lr;
  const int warmup = static_cast<int>(std::ceil(warmup_fraction * total_steps));
  if (step < warmup) return base_lr * static_cast<double>(step) / warmup;
  const int decay_steps = total_steps - warmup;
  if (decay_steps == 0) return base_lr;
  const double progress = static_cast<double>(step - warmup) / decay_steps;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const std::vector<Parameter>& params, AdamWConfig cfg) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void AdamW::step(std::vector<Parameter>& params, const std::vector<RealArray>& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw std::invalid_argument("AdamW::step: parameter/gradient count mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.values();
    const auto g = grads[i].values();
    auto m = m_[i].values();
    auto v = v_[i].values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      w[j] -= lr * (update + cfg_.weight_decay * w[j]);
    }
  }
}

void TrainConfig::validate() const {
  loss.validate();
  require(std::isfinite(learning_rate()) && learning_rate() > 0.0, "learning rate must be > 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "warmup_fraction must lie in [0, 1)");
  require(epochs >= 0, "epochs must be >= 0");
  require(steps >= 0, "steps must be >= 0");
  require(max_response_len >= 1, "max_response_len must be >= 1");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "adam beta1 must lie in [0, 1)");
  require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "adam beta2 must lie in [0, 1)");
  require(optimizer.eps > 0.0, "adam eps must be > 0");
  require(optimizer.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(grad_clip >= 0.0, "grad_clip must be >= 0");
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint Checkpoint::from_model(PolicyModel model, std::string config_hash, std::uint64_t step,
                                  std::uint64_t seed) {
  for (auto& p : model.parameters())
    for (double& v : p.value.values()) v = static_cast<double>(static_cast<float>(v));
  Checkpoint c{std::move(model)};
  c.config_hash = std::move(config_hash);
  c.step = step;
  c.seed = seed;
  return c;
}

std::string checkpoint_to_bytes(const Checkpoint& ckpt) {
  const ModelConfig& mc = ckpt.model.config();
  nlohmann::ordered_json manifest;
  manifest["format"] = "decaypo-checkpoint";
  manifest["architecture"] = ckpt.model.architecture();
  manifest["model"] = {{"vocab_size", mc.vocab_size}, {"d_model", mc.d_model},
                       {"context", mc.context},       {"blocks", mc.blocks},
                       {"ff_mult", mc.ff_mult},       {"norm_eps", mc.norm_eps},
                       {"seed", mc.seed}};
  manifest["vocabulary"] = ckpt.vocabulary;
  manifest["config_hash"] = ckpt.config_hash;
  manifest["step"] = ckpt.step;
  manifest["seed"] = ckpt.seed;
  manifest["dtype"] = "float32-le";
  auto list = nlohmann::ordered_json::array();
  for (const auto& p : ckpt.model.parameters()) list.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  manifest["parameters"] = list;
  const std::string text = manifest.dump();

  std::string out(kMagic);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + 4 * ckpt.model.parameter_count());
  for (const auto& p : ckpt.model.parameters())
    for (double v : p.value.values()) put_f32(out, static_cast<float>(v));
  return out;
}

Checkpoint checkpoint_from_bytes(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) fail("bad magic");
  const std::uint64_t len = get_u64(bytes.substr(kMagic.size(), 8));
  const std::size_t body = kMagic.size() + 8;
  if (len > bytes.size() - body) fail("truncated manifest");
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(bytes.substr(body, len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("manifest is not JSON: ") + e.what());
  }
  try {
    const auto& m = manifest.at("model");
    ModelConfig mc;
    mc.vocab_size = m.at("vocab_size").get<int>();
    mc.d_model = m.at("d_model").get<int>();
    mc.context = m.at("context").get<int>();
    mc.blocks = m.at("blocks").get<int>();
    mc.ff_mult = m.at("ff_mult").get<int>();
    mc.norm_eps = m.at("norm_eps").get<double>();
    mc.seed = m.at("seed").get<std::uint64_t>();

    const char* cursor = bytes.data() + body + len;
    const char* end = bytes.data() + bytes.size();
    std::vector<Parameter> params;
    for (const auto& entry : manifest.at("parameters")) {
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      RealArray a(shape);
      if (static_cast<std::size_t>(end - cursor) < 4 * a.size()) fail("truncated parameter data");
      for (double& v : a.values()) {
        v = get_f32(cursor);
        cursor += 4;
      }
      params.push_back({entry.at("name").get<std::string>(), std::move(a)});
    }
    if (cursor != end) fail("trailing bytes after parameter data");
    Checkpoint c{PolicyModel(mc, std::move(params))};
    if (c.model.architecture() != manifest.at("architecture").get<std::string>()) {
      fail("architecture string does not match the model configuration");
    }
    c.vocabulary = manifest.at("vocabulary").get<std::string>();
    c.config_hash = manifest.at("config_hash").get<std::string>();
    c.step = manifest.at("step").get<std::uint64_t>();
    c.seed = manifest.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("manifest field: ") + e.what());
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  atomic_write(path, checkpoint_to_bytes(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_bytes(read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string hash_text(std::string_view text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(mix64(fnv1a(text))));
  return buf;
}

std::string metrics_to_jsonl(const std::vector<StepMetrics>& metrics) {
  std::string out;
  for (const auto& m : metrics) {
    out += "{\"step\":" + std::to_string(m.step) + ",\"loss\":" + fmt(m.loss) + ",\"margin\":" +
           fmt(m.margin) + ",\"grad_norm\":" + fmt(m.grad_norm) + ",\"lr\":" + fmt(m.lr) + "}\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring

std::optional<PreparedPair> prepare_pair(const PolicyModel& policy, const PolicyModel* reference,
                                         const PreferencePair& pair, int max_response_len) {
  PreparedPair out;
  const auto prompt = Vocabulary::encode_prompt(pair.prompt);
  out.chosen = {prompt, Vocabulary::encode_response(pair.chosen)};
  out.rejected = {prompt, Vocabulary::encode_response(pair.rejected)};
  const auto ctx = static_cast<std::size_t>(policy.context());
  const auto max_len = static_cast<std::size_t>(max_response_len);
  if (out.chosen.total_len() > ctx || out.rejected.total_len() > ctx ||
      out.chosen.response_len() > max_len || out.rejected.response_len() > max_len) {
    return std::nullopt;
  }
  out.example_id = fnv1a(pair.id);
  if (reference) {
    out.chosen_ref = reference->token_logprobs(out.chosen);
    out.rejected_ref = reference->token_logprobs(out.rejected);
  }
  return out;
}

PairScore score_pair(const PolicyModel& policy, const PolicyModel* reference, const PreferencePair& pair) {
  auto prepared = prepare_pair(policy, reference, pair, policy.context());
  if (!prepared) throw std::invalid_argument("pair '" + pair.id + "' does not fit the model context");
  PairScore s;
  s.chosen_logps = policy.token_logprobs(prepared->chosen);
  s.rejected_logps = policy.token_logprobs(prepared->rejected);
  s.chosen_ref_logps = prepared->chosen_ref;
  s.rejected_ref_logps = prepared->rejected_ref;
  s.prompt_len = static_cast<int>(prepared->chosen.prompt_len());
  s.example_id = prepared->example_id;
  return s;
}

double BatchGradient::norm() const { return global_norm(grads); }

BatchGradient batch_gradient(const PolicyModel& policy, const std::vector<const PreparedPair*>& batch,
                             const LossConfig& cfg) {
  Tape tape;
  const auto params = policy.bind(tape, true);
  std::vector<TapedPair> taped;
  taped.reserve(batch.size());
  for (const PreparedPair* p : batch) {
    TapedPair t;
    t.chosen = policy.token_logprobs(params, p->chosen);
    t.rejected = policy.token_logprobs(params, p->rejected);
    t.chosen_ref = p->chosen_ref ? &*p->chosen_ref : nullptr;
    t.rejected_ref = p->rejected_ref ? &*p->rejected_ref : nullptr;
    t.prompt_len = static_cast<int>(p->chosen.prompt_len());
    t.example_id = p->example_id;
    taped.push_back(t);
  }
  const LossValue lv = batch_loss(taped, cfg);
  const Gradients g = tape.gradients(lv.loss);
  BatchGradient out;
  out.loss = lv.loss.item();
  out.margin = lv.margin;
  for (const Var& v : params) out.grads.push_back(g[v]);
  return out;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const TrainConfig& cfg, const std::vector<PreferencePair>& pairs,
                  const Checkpoint& init, const Checkpoint* reference, const WarningSink& warn) {
  cfg.validate();
  const bool wants_ref = needs_reference(cfg.loss.method);
  if (wants_ref && !reference) {
    throw std::invalid_argument("method " + to_string(cfg.loss.method) + " requires a reference model");
  }
  if (!wants_ref && reference) {
    throw std::invalid_argument("method " + to_string(cfg.loss.method) + " is reference-free; no reference expected");
  }
  if (reference && (reference->model.vocab_size() != init.model.vocab_size())) {
    throw std::invalid_argument("reference and policy vocabularies differ");
  }

  TrainResult result{init, {}, 0};
  std::vector<PreparedPair> prepared;
  prepared.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto pp = prepare_pair(init.model, reference ? &reference->model : nullptr, p, cfg.max_response_len);
    if (!pp) {
      ++result.skipped_overflow;
      if (warn) warn("skipping pair '" + p.id + "': exceeds context or max_response_len");
      continue;
    }
    prepared.push_back(std::move(*pp));
  }

  const auto n = prepared.size();
  const long steps_per_epoch =
      n == 0 ? 0 : static_cast<long>((n + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size);
  const long total = cfg.steps > 0 ? (n == 0 ? 0 : cfg.steps) : steps_per_epoch * cfg.epochs;
  if (total == 0) return result;

  PolicyModel model = init.model;
  AdamW opt(model.parameters(), cfg.optimizer);
  std::vector<std::size_t> order;
  long epoch = -1;
  std::size_t cursor = n;
  for (long step = 0; step < total; ++step) {
    std::vector<const PreparedPair*> batch;
    while (batch.size() < static_cast<std::size_t>(cfg.batch_size)) {
      if (cursor >= n) {
        // An epoch boundary ends the current batch unless it is still empty.
        if (!batch.empty()) break;
        order = epoch_order(n, cfg.seed, ++epoch);
        cursor = 0;
      }
      batch.push_back(&prepared[order[cursor++]]);
    }
    BatchGradient g = batch_gradient(model, batch, cfg.loss);
    const double norm = g.norm();
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
      const double c = cfg.grad_clip / norm;
      for (auto& a : g.grads)
        for (double& v : a.values()) v *= c;
    }
    const double lr = cosine_lr(static_cast<int>(step), static_cast<int>(total), cfg.warmup_fraction,
                                cfg.learning_rate());
    opt.step(model.parameters(), g.grads, lr);
    result.metrics.push_back({step, g.loss, g.margin, norm, lr});
  }
  result.checkpoint = Checkpoint::from_model(std::move(model), init.config_hash,
                                             init.step + static_cast<std::uint64_t>(total), cfg.seed);
  return result;
}

PolicyModel pretrain_sft(const ModelConfig& model_cfg, const TaskCorpus& corpus, const SftConfig& cfg,
                         std::vector<StepMetrics>* metrics) {
  require(corpus.size() > 0, "pretrain_sft: empty corpus");
  require(cfg.steps >= 0 && cfg.batch_size >= 1 && cfg.lr > 0.0, "pretrain_sft: invalid configuration");
  PolicyModel model = PolicyModel::initialize(model_cfg);
  std::vector<TokenSequence> seqs;
  for (const auto& e : corpus.entries()) {
    TokenSequence s{Vocabulary::encode_prompt(e.prompt), Vocabulary::encode_response(e.target)};
    if (s.total_len() > static_cast<std::size_t>(model_cfg.context)) {
      throw std::invalid_argument("corpus entry '" + e.prompt + "' exceeds the model context");
    }
    seqs.push_back(std::move(s));
  }
  AdamW opt(model.parameters(), {});
  Rng rng(substream(cfg.seed, "data"));
  for (int step = 0; step < cfg.steps; ++step) {
    Tape tape;
    const auto params = model.bind(tape, true);
    Var total;
    std::size_t tokens = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& s = seqs[static_cast<std::size_t>(rng.below(seqs.size()))];
      Var lp = sum(model.token_logprobs(params, s));
      total = b == 0 ? lp : add(total, lp);
      tokens += s.response_len();
    }
    Var loss = scale(total, -1.0 / static_cast<double>(tokens));
    const Gradients g = tape.gradients(loss);
    std::vector<RealArray> grads;
    for (const Var& v : params) grads.push_back(g[v]);
    const double lr = cosine_lr(step, cfg.steps, cfg.warmup_fraction, cfg.lr);
    opt.step(model.parameters(), grads, lr);
    if (metrics) metrics->push_back({step, loss.item(), 0.0, global_norm(grads), lr});
  }
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

double WinRate::rate() const {
  return total() == 0 ? 0.0 : (win + 0.5 * tie) / static_cast<double>(total());
}

WinRate evaluate_winrate(const PolicyModel& candidate, const PolicyModel& baseline,
                         const RewardOracle& oracle, const std::vector<std::string>& prompts,
                         double temperature, std::uint64_t seed, int max_len) {
  if (candidate.vocab_size() != baseline.vocab_size()) {
    throw std::invalid_argument("evaluate_winrate: models have different vocabularies");
  }
  WinRate wr;
  const std::uint64_t sampling = substream(seed, "sampling");
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto prompt = Vocabulary::encode_prompt(prompts[i]);
    const std::uint64_t s = substream(sampling, static_cast<std::uint64_t>(i));
    const auto a = candidate.sample(prompt, temperature, max_len, s);
    const auto b = baseline.sample(prompt, temperature, max_len, s);
    const double sa = oracle_score(oracle, prompts[i], Vocabulary::decode_response(a.response_tokens));
    const double sb = oracle_score(oracle, prompts[i], Vocabulary::decode_response(b.response_tokens));
    if (sa > sb) {
      ++wr.win;
    } else if (sa == sb) {
      ++wr.tie;
    } else {
      ++wr.lose;
    }
  }
  return wr;
}

}  // namespace decaypo
