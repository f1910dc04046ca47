#include "decaypo/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "decaypo/analysis.hpp"
#include "decaypo/data.hpp"
#include "decaypo/mdp.hpp"
#include "decaypo/rng.hpp"
#include "decaypo/training.hpp"
#include "json.hpp"

namespace decaypo {

namespace fs = std::filesystem;

namespace {

/// A bad value for a named flag or key.
class FlagError : public std::invalid_argument {
 public:
  FlagError(const std::string& flag, const std::string& what)
      : std::invalid_argument("--" + flag + ": " + what) {}
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out + "\"";
}

/// Options of one (sub)command: registers each with CLI11 and remembers how
/// to print its resolved value for the config snapshot.
class OptionSet {
 public:
  explicit OptionSet(CLI::App* app) : app_(app) {}

  CLI::App* app() const { return app_; }

  template <class T>
  CLI::Option* add(const std::string& key, T& value, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + key, value, help)->capture_default_str();
    entries_.push_back({key, [&value] { return render(value); }});
    return opt;
  }

  CLI::Option* required(const std::string& key, std::string& value, const std::string& help) {
    return add(key, value, help)->required();
  }

  /// "key = value" lines in registration order.
  std::string render_lines() const {
    std::string out;
    for (const auto& [key, get] : entries_) out += key + " = " + get() + "\n";
    return out;
  }

 private:
  static std::string render(const std::string& s) { return quote(s); }
  static std::string render(double v) { return fmt(v); }
  static std::string render(int v) { return std::to_string(v); }
  static std::string render(std::uint64_t v) { return std::to_string(v); }

  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<std::string()>>> entries_;
};

struct LossFlags {
  std::string method = "d2po";
  double beta = 0.1;
  std::string schedule = "exponential";
  double gamma = 0.98;
  std::string origin = "prompt";
  double tau = 0.1;
  double lambda_w = 1.0;
  double lambda_l = 1.0;
  double lambda_orpo = 1.0;
  double target_margin = 0.5;

  void add_to(OptionSet& o) {
    o.add("method", method, "Objective: d2po, dpo, d2po-ref-free, simpo, ipo, kto, orpo, sampo");
    o.add("beta", beta, "Inverse-temperature beta");
    o.add("schedule", schedule, "Decay schedule: uniform, exponential, head, linear, power-law");
    o.add("gamma", gamma, "Decay parameter gamma");
    o.add("origin", origin, "Decay origin: prompt or answer");
    o.add("tau", tau, "IPO tau");
    o.add("lambda-w", lambda_w, "KTO desirable weight");
    o.add("lambda-l", lambda_l, "KTO undesirable weight");
    o.add("lambda-orpo", lambda_orpo, "ORPO odds-ratio weight");
    o.add("target-margin", target_margin, "SimPO target reward margin");
  }

  LossConfig resolve(std::uint64_t seed) const {
    LossConfig c;
    try {
      c.method = parse_loss_method(method);
    } catch (const std::invalid_argument& e) {
      throw FlagError("method", e.what());
    }
    try {
      c.schedule.kind = parse_decay_kind(schedule);
    } catch (const std::invalid_argument& e) {
      throw FlagError("schedule", e.what());
    }
    try {
      c.schedule.origin = parse_decay_origin(origin);
    } catch (const std::invalid_argument& e) {
      throw FlagError("origin", e.what());
    }
    // "dpo" is D2PO with the uniform schedule.
    if (method == "dpo") c.schedule.kind = DecayKind::Uniform;
    c.schedule.gamma = gamma;
    c.beta = beta;
    c.tau = tau;
    c.lambda_w = lambda_w;
    c.lambda_l = lambda_l;
    c.lambda_orpo = lambda_orpo;
    c.target_margin = target_margin;
    c.sampo_seed = seed;
    c.validate();
    return c;
  }
};

RewardOracle make_oracle(const std::string& kind, double brevity, std::shared_ptr<const TaskCorpus> corpus) {
  RewardOracle o;
  if (kind == "target-match") {
    o.kind = OracleKind::TargetMatch;
  } else if (kind == "length-penalized") {
    o.kind = OracleKind::LengthPenalizedMatch;
  } else {
    throw FlagError("oracle", "unknown oracle '" + kind + "' (expected target-match or length-penalized)");
  }
  o.brevity_coefficient = brevity;
  o.corpus = std::move(corpus);
  return o;
}

std::string json_line(const nlohmann::ordered_json& j) { return j.dump() + "\n"; }

/// Sampled responses, n per prompt, seeded per (prompt, sample) index.
std::vector<TokenSequence> draw_samples(const PolicyModel& model, const std::vector<std::string>& prompts,
                                        int per_prompt, double temperature, int max_len, std::uint64_t seed) {
  if (per_prompt < 1) throw FlagError("samples-per-prompt", "must be >= 1");
  std::vector<TokenSequence> out;
  const std::uint64_t sampling = substream(seed, "sampling");
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto prompt = Vocabulary::encode_prompt(prompts[i]);
    for (int j = 0; j < per_prompt; ++j) {
      const auto idx = static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(per_prompt) + j;
      out.push_back(model.sample(prompt, temperature, max_len, substream(sampling, idx)));
    }
  }
  return out;
}

struct Cli {
  CLI::App app{"decaypo: temporal-decay preference optimization lab"};
  std::uint64_t seed = 0;
  std::vector<std::pair<CLI::App*, std::unique_ptr<OptionSet>>> sets;
  std::vector<std::pair<CLI::App*, std::function<void()>>> actions;
  std::string snapshot;  // filled once the active command is known
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;

  OptionSet& options(CLI::App* sub) {
    sets.emplace_back(sub, std::make_unique<OptionSet>(sub));
    return *sets.back().second;
  }

  /// Writes a file atomically and reports it.
  void emit(const fs::path& path, std::string_view contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    atomic_write(path, contents);
    *out << "wrote " << path.string() << "\n";
  }

  /// Resolved-config snapshot next to the primary output.
  void emit_snapshot(const fs::path& primary) { emit(fs::path(primary.string() + ".config.ini"), snapshot); }
};

std::string section_name(const CLI::App* sub) {
  std::string name = sub->get_name();
  for (const CLI::App* p = sub->get_parent(); p && p->get_parent(); p = p->get_parent()) {
    name = p->get_name() + "." + name;
  }
  return name;
}

void register_commands(Cli& cli) {
  CLI::App& app = cli.app;

  // corpus ------------------------------------------------------------------
  {
    auto* sub = app.add_subcommand("corpus", "Generate the synthetic prompt -> target corpus");
    auto& o = cli.options(sub);
    auto s = std::make_shared<std::tuple<int, int, int, std::string>>(200, 1, 9, "");
    o.add("prompts", std::get<0>(*s), "Number of prompts");
    o.add("min-len", std::get<1>(*s), "Shortest target length (1..9)");
    o.add("max-len", std::get<2>(*s), "Longest target length (1..9)");
    o.required("out", std::get<3>(*s), "Output corpus JSONL");
    cli.actions.emplace_back(sub, [&cli, s] {
      auto& [prompts, lo, hi, path] = *s;
      if (prompts < 1) throw FlagError("prompts", "must be >= 1");
      const TaskCorpus c = TaskCorpus::synthetic(static_cast<std::size_t>(prompts), lo, hi, cli.seed);
      if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
      c.save(path);
      *cli.out << "wrote " << path << "\n";
      cli.emit_snapshot(path);
    });
  }

  // pretrain ----------------------------------------------------------------
  {
    auto* sub = app.add_subcommand("pretrain", "Supervised NLL pretraining on the corpus (the SFT init)");
    auto& o = cli.options(sub);
    struct P {
      std::string corpus, out;
      int d_model = 64, context = 256, blocks = 2, ff_mult = 4;
      SftConfig sft{};
    };
    auto p = std::make_shared<P>();
    o.required("corpus", p->corpus, "Corpus JSONL");
    o.required("out", p->out, "Output checkpoint");
    o.add("d-model", p->d_model, "Model width");
    o.add("context", p->context, "Context length in tokens");
    o.add("blocks", p->blocks, "Transformer blocks");
    o.add("ff-mult", p->ff_mult, "Feed-forward width multiplier");
    o.add("steps", p->sft.steps, "Optimizer steps");
    o.add("batch-size", p->sft.batch_size, "Sequences per step");
    o.add("lr", p->sft.lr, "Peak learning rate");
    o.add("warmup", p->sft.warmup_fraction, "Warmup fraction of the cosine schedule");
    cli.actions.emplace_back(sub, [&cli, p] {
      const TaskCorpus corpus = TaskCorpus::load(p->corpus);
      ModelConfig mc;
      mc.d_model = p->d_model;
      mc.context = p->context;
      mc.blocks = p->blocks;
      mc.ff_mult = p->ff_mult;
      mc.seed = cli.seed;
      SftConfig sft = p->sft;
      sft.seed = cli.seed;
      std::vector<StepMetrics> metrics;
      PolicyModel model = pretrain_sft(mc, corpus, sft, &metrics);
      const Checkpoint ckpt = Checkpoint::from_model(std::move(model), hash_text(cli.snapshot),
                                                     static_cast<std::uint64_t>(sft.steps), cli.seed);
      cli.emit(p->out, checkpoint_to_bytes(ckpt));
      cli.emit(p->out + ".metrics.jsonl", metrics_to_jsonl(metrics));
      cli.emit_snapshot(p->out);
    });
  }

  // build-pairs -------------------------------------------------------------
  {
    auto* sub = app.add_subcommand("build-pairs", "Sample K responses per prompt and keep best/worst by oracle score");
    auto& o = cli.options(sub);
    struct P {
      std::string model, corpus, out, oracle = "target-match";
      double brevity = 0.0;
      int rounds = 1;
      OnPolicyOptions opts{};
    };
    auto p = std::make_shared<P>();
    o.required("model", p->model, "Checkpoint to sample from");
    o.required("corpus", p->corpus, "Corpus JSONL (prompts and targets)");
    o.required("out", p->out, "Output pairs JSONL");
    o.add("k", p->opts.k, "Samples per prompt");
    o.add("temperature", p->opts.temperature, "Sampling temperature");
    o.add("max-len", p->opts.max_len, "Maximum sampled response length");
    o.add("rounds", p->rounds, "Passes over the prompt list (each pass draws fresh samples)");
    o.add("oracle", p->oracle, "Reward oracle: target-match or length-penalized");
    o.add("brevity", p->brevity, "Per-byte length penalty of the length-penalized oracle");
    cli.actions.emplace_back(sub, [&cli, p] {
      if (p->rounds < 1) throw FlagError("rounds", "must be >= 1");
      if (p->opts.k < 2) throw FlagError("k", "must be >= 2");
      if (p->opts.temperature < 0.0) throw FlagError("temperature", "must be >= 0");
      if (p->opts.max_len < 1) throw FlagError("max-len", "must be >= 1");
      auto corpus = std::make_shared<const TaskCorpus>(TaskCorpus::load(p->corpus));
      const RewardOracle oracle = make_oracle(p->oracle, p->brevity, corpus);
      const Checkpoint ckpt = load_checkpoint(p->model);
      std::vector<std::string> prompts;
      for (int r = 0; r < p->rounds; ++r)
        for (const auto& e : corpus->entries()) prompts.push_back(e.prompt);
      OnPolicyOptions opts = p->opts;
      opts.seed = cli.seed;
      const OnPolicyResult res = build_onpolicy_pairs(ckpt.model, oracle, prompts, opts);
      cli.emit(p->out, pairs_to_jsonl(res.pairs));
      nlohmann::ordered_json summary;
      summary["prompts"] = prompts.size();
      summary["pairs"] = res.pairs.size();
      summary["skipped_ties"] = res.skipped_ties;
      cli.emit(p->out + ".summary.json", json_line(summary));
      cli.emit_snapshot(p->out);
    });
  }

  // train -------------------------------------------------------------------
  {
    auto* sub = app.add_subcommand("train", "Preference training from an init checkpoint");
    auto& o = cli.options(sub);
    struct P {
      std::string pairs, init, reference, out, metrics;
      LossFlags loss;
      TrainConfig cfg{};
    };
    auto p = std::make_shared<P>();
    o.required("pairs", p->pairs, "Preference pairs JSONL");
    o.required("init", p->init, "Initial policy checkpoint");
    o.add("reference", p->reference, "Reference checkpoint (defaults to --init for reference-based methods)");
    o.required("out", p->out, "Output checkpoint");
    o.add("metrics", p->metrics, "Metrics JSONL (defaults to <out>.metrics.jsonl)");
    p->loss.add_to(o);
    o.add("base-lr", p->cfg.base_lr, "Reference learning rate");
    o.add("lr-multiplier", p->cfg.lr_multiplier, "Desk-scale multiplier applied to base-lr");
    o.add("batch-size", p->cfg.batch_size, "Pairs per step");
    o.add("warmup", p->cfg.warmup_fraction, "Warmup fraction of the cosine schedule");
    o.add("epochs", p->cfg.epochs, "Epochs (ignored when --steps > 0)");
    o.add("steps", p->cfg.steps, "Exact number of steps (0: derived from epochs)");
    o.add("max-response-len", p->cfg.max_response_len, "Longer responses are skipped");
    o.add("adam-beta1", p->cfg.optimizer.beta1, "AdamW first-moment coefficient");
    o.add("adam-beta2", p->cfg.optimizer.beta2, "AdamW second-moment coefficient");
    o.add("adam-eps", p->cfg.optimizer.eps, "AdamW epsilon");
    o.add("weight-decay", p->cfg.optimizer.weight_decay, "Decoupled weight decay");
    o.add("grad-clip", p->cfg.grad_clip, "Global gradient-norm clip (0: off)");
    cli.actions.emplace_back(sub, [&cli, p] {
      TrainConfig cfg = p->cfg;
      cfg.seed = cli.seed;
      cfg.loss = p->loss.resolve(cli.seed);
      cfg.validate();
      if (cfg.loss.schedule.emphasizes_later_tokens()) {
        *cli.err << "warning: --gamma > 1 weights later tokens more than earlier ones\n";
      }
      const auto pairs = load_pairs(p->pairs);
      const Checkpoint init = load_checkpoint(p->init);
      std::optional<Checkpoint> reference;
      if (needs_reference(cfg.loss.method)) {
        reference.emplace(p->reference.empty() ? init : load_checkpoint(p->reference));
      } else if (!p->reference.empty()) {
        throw FlagError("reference", "method " + to_string(cfg.loss.method) + " does not use a reference model");
      }
      Checkpoint base = init;
      base.config_hash = hash_text(cli.snapshot);
      const TrainResult res = train(cfg, pairs, base, reference ? &*reference : nullptr,
                                    [&cli](const std::string& w) { *cli.err << "warning: " << w << "\n"; });
      cli.emit(p->out, checkpoint_to_bytes(res.checkpoint));
      cli.emit(p->metrics.empty() ? p->out + ".metrics.jsonl" : p->metrics, metrics_to_jsonl(res.metrics));
      nlohmann::ordered_json summary;
      summary["pairs"] = pairs.size();
      summary["skipped_overflow"] = res.skipped_overflow;
      summary["steps"] = res.metrics.size();
      cli.emit(p->out + ".summary.json", json_line(summary));
      cli.emit_snapshot(p->out);
    });
  }

  // sample ------------------------------------------------------------------
  {
    auto* sub = app.add_subcommand("sample", "Sample responses for every corpus prompt");
    auto& o = cli.options(sub);
    struct P {
      std::string model, corpus, out;
      int n = 1, max_len = 256;
      double temperature = 0.8;
    };
    auto p = std::make_shared<P>();
    o.required("model", p->model, "Checkpoint");
    o.required("corpus", p->corpus, "Corpus JSONL");
    o.required("out", p->out, "Output JSONL");
    o.add("samples-per-prompt", p->n, "Samples per prompt");
    o.add("temperature", p->temperature, "Sampling temperature (0: greedy)");
    o.add("max-len", p->max_len, "Maximum response length");
    cli.actions.emplace_back(sub, [&cli, p] {
      if (p->temperature < 0.0) throw FlagError("temperature", "must be >= 0");
      if (p->max_len < 1) throw FlagError("max-len", "must be >= 1");
      const TaskCorpus corpus = TaskCorpus::load(p->corpus);
      const Checkpoint ckpt = load_checkpoint(p->model);
      const auto prompts = corpus.prompts();
      const auto samples = draw_samples(ckpt.model, prompts, p->n, p->temperature, p->max_len, cli.seed);
      std::string text;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        nlohmann::ordered_json j;
        j["prompt"] = prompts[i / static_cast<std::size_t>(p->n)];
        j["sample"] = i % static_cast<std::size_t>(p->n);
        j["response"] = encode_byte_string(Vocabulary::decode_response(samples[i].response_tokens));
        text += json_line(j);
      }
      cli.emit(p->out, text);
      cli.emit_snapshot(p->out);
    });
  }

  // eval --------------------------------------------------------------------
  {
    auto* sub = app.add_subcommand("eval", "Oracle win rate of a candidate against a baseline");
    auto& o = cli.options(sub);
    struct P {
      std::string candidate, baseline, corpus, out, oracle = "target-match";
      double brevity = 0.0, temperature = 0.8;
      int max_len = 256;
    };
    auto p = std::make_shared<P>();
    o.required("candidate", p->candidate, "Candidate checkpoint");
    o.required("baseline", p->baseline, "Baseline checkpoint");
    o.required("corpus", p->corpus, "Corpus JSONL (evaluation prompts)");
    o.required("out", p->out, "Output JSON");
    o.add("temperature", p->temperature, "Sampling temperature");
    o.add("max-len", p->max_len, "Maximum response length");
    o.add("oracle", p->oracle, "Reward oracle: target-match or length-penalized");
    o.add("brevity", p->brevity, "Per-byte length penalty of the length-penalized oracle");
    cli.actions.emplace_back(sub, [&cli, p] {
      if (p->temperature < 0.0) throw FlagError("temperature", "must be >= 0");
      if (p->max_len < 1) throw FlagError("max-len", "must be >= 1");
      auto corpus = std::make_shared<const TaskCorpus>(TaskCorpus::load(p->corpus));
      const RewardOracle oracle = make_oracle(p->oracle, p->brevity, corpus);
      const Checkpoint cand = load_checkpoint(p->candidate);
      const Checkpoint base = load_checkpoint(p->baseline);
      const WinRate wr = evaluate_winrate(cand.model, base.model, oracle, corpus->prompts(), p->temperature,
                                          cli.seed, p->max_len);
      nlohmann::ordered_json j;
      j["win"] = wr.win;
      j["tie"] = wr.tie;
      j["lose"] = wr.lose;
      j["total"] = wr.total();
      j["rate"] = wr.rate();
      cli.emit(p->out, json_line(j));
      cli.emit_snapshot(p->out);
    });
  }

  // analyze -----------------------------------------------------------------
  {
    auto* analyze = app.add_subcommand("analyze", "Diagnostic analyses");
    analyze->require_subcommand(1);

    struct SampleFlags {
      int per_prompt = 1, max_len = 256, max_pos = 32;
      double temperature = 0.8;
      void add_to(OptionSet& o) {
        o.add("samples-per-prompt", per_prompt, "Samples per prompt");
        o.add("temperature", temperature, "Sampling temperature");
        o.add("max-len", max_len, "Maximum sampled response length");
        o.add("max-pos", max_pos, "Positions reported: 0..max-pos-1");
      }
    };
    auto survivors_note = [](const std::vector<TokenSequence>& samples, int max_pos) {
      std::string note = "survivors:";
      for (std::size_t c : survivor_counts(samples, max_pos)) note += " " + std::to_string(c);
      return note;
    };

    {
      auto* sub = analyze->add_subcommand("kl-position", "Per-position KL(policy || reference) on policy samples");
      auto& o = cli.options(sub);
      struct P {
        std::string policy, reference, corpus, out;
        SampleFlags s;
      };
      auto p = std::make_shared<P>();
      o.required("policy", p->policy, "Policy checkpoint (samples are drawn from it)");
      o.required("reference", p->reference, "Reference checkpoint");
      o.required("corpus", p->corpus, "Corpus JSONL (prompts)");
      o.required("out", p->out, "Output CSV");
      p->s.add_to(o);
      cli.actions.emplace_back(sub, [&cli, p, survivors_note] {
        if (p->s.max_pos < 1) throw FlagError("max-pos", "must be >= 1");
        const TaskCorpus corpus = TaskCorpus::load(p->corpus);
        const Checkpoint pol = load_checkpoint(p->policy);
        const Checkpoint ref = load_checkpoint(p->reference);
        const auto samples =
            draw_samples(pol.model, corpus.prompts(), p->s.per_prompt, p->s.temperature, p->s.max_len, cli.seed);
        PositionCurve curve = kl_per_position(pol.model, ref.model, samples, p->s.max_pos);
        curve.notes.push_back(survivors_note(samples, p->s.max_pos));
        cli.emit(p->out, to_csv(curve));
        cli.emit_snapshot(p->out);
      });
    }
    {
      auto* sub = analyze->add_subcommand("prob-position", "Per-position realized token probability");
      auto& o = cli.options(sub);
      struct P {
        std::string model, corpus, out;
        SampleFlags s;
      };
      auto p = std::make_shared<P>();
      o.required("model", p->model, "Checkpoint (samples are drawn from it)");
      o.required("corpus", p->corpus, "Corpus JSONL (prompts)");
      o.required("out", p->out, "Output CSV");
      p->s.add_to(o);
      cli.actions.emplace_back(sub, [&cli, p, survivors_note] {
        if (p->s.max_pos < 1) throw FlagError("max-pos", "must be >= 1");
        const TaskCorpus corpus = TaskCorpus::load(p->corpus);
        const Checkpoint m = load_checkpoint(p->model);
        const auto samples =
            draw_samples(m.model, corpus.prompts(), p->s.per_prompt, p->s.temperature, p->s.max_len, cli.seed);
        PositionCurve curve = prob_per_position(m.model, samples, p->s.max_pos);
        curve.notes.push_back(survivors_note(samples, p->s.max_pos));
        cli.emit(p->out, to_csv(curve));
        cli.emit_snapshot(p->out);
      });
    }
    {
      auto* sub = analyze->add_subcommand("ref-margin", "Density of reference margins over a pair set");
      auto& o = cli.options(sub);
      struct P {
        std::string reference, pairs, out;
        int bins = 20;
      };
      auto p = std::make_shared<P>();
      o.required("reference", p->reference, "Reference checkpoint");
      o.required("pairs", p->pairs, "Preference pairs JSONL");
      o.required("out", p->out, "Output CSV");
      o.add("bins", p->bins, "Histogram bins");
      cli.actions.emplace_back(sub, [&cli, p] {
        if (p->bins < 2) throw FlagError("bins", "must be >= 2");
        const Checkpoint ref = load_checkpoint(p->reference);
        const auto pairs = load_pairs(p->pairs);
        if (pairs.empty()) throw FlagError("pairs", "pair file is empty");
        cli.emit(p->out, to_csv(ref_margin_density(ref.model, pairs, p->bins)));
        cli.emit_snapshot(p->out);
      });
    }
    {
      auto* sub = analyze->add_subcommand("length-bias", "Mean loss by chosen-minus-rejected length gap");
      auto& o = cli.options(sub);
      struct P {
        std::string policy, reference, pairs, out, gap_bins = "-8,-4,-2,0,2,4,8";
        LossFlags loss;
      };
      auto p = std::make_shared<P>();
      o.required("policy", p->policy, "Policy checkpoint");
      o.add("reference", p->reference, "Reference checkpoint (required by reference-based methods)");
      o.required("pairs", p->pairs, "Preference pairs JSONL");
      o.required("out", p->out, "Output CSV");
      o.add("gap-bins", p->gap_bins, "Increasing gap boundaries, comma separated");
      p->loss.add_to(o);
      cli.actions.emplace_back(sub, [&cli, p] {
        const LossConfig cfg = p->loss.resolve(cli.seed);
        std::vector<int> bins;
        try {
          bins = parse_int_list(p->gap_bins);
        } catch (const std::invalid_argument& e) {
          throw FlagError("gap-bins", e.what());
        }
        const Checkpoint pol = load_checkpoint(p->policy);
        std::optional<Checkpoint> ref;
        if (needs_reference(cfg.method)) {
          if (p->reference.empty()) throw FlagError("reference", "required by method " + to_string(cfg.method));
          ref.emplace(load_checkpoint(p->reference));
        }
        std::vector<PairScore> scored;
        for (const auto& pair : load_pairs(p->pairs)) {
          scored.push_back(score_pair(pol.model, ref ? &ref->model : nullptr, pair));
        }
        cli.emit(p->out, to_csv(loss_by_length_gap(cfg, scored, bins)));
        cli.emit_snapshot(p->out);
      });
    }
  }

  // mdp-verify --------------------------------------------------------------
  {
    auto* sub = app.add_subcommand("mdp-verify", "Suboptimality decomposition and bound sweep on random MDPs");
    auto& o = cli.options(sub);
    struct P {
      int seeds = 100;
      std::string gammas = "0.5,0.9,0.95,0.98,1.0";
      BoundSweepOptions opts{};
      std::string out;
    };
    auto p = std::make_shared<P>();
    o.add("seeds", p->seeds, "Number of random MDPs");
    o.add("gammas", p->gammas, "Discount factors in (0, 1], comma separated");
    o.add("max-states", p->opts.max_states, "Largest state count");
    o.add("max-actions", p->opts.max_actions, "Largest action count");
    o.add("max-horizon", p->opts.max_horizon, "Largest horizon");
    o.add("reward-bound", p->opts.R, "Reward bound R");
    o.add("beta", p->opts.beta, "Soft-optimality temperature beta");
    o.required("out", p->out, "Output CSV");
    cli.actions.emplace_back(sub, [&cli, p] {
      std::vector<double> gammas;
      try {
        gammas = parse_real_list(p->gammas);
      } catch (const std::invalid_argument& e) {
        throw FlagError("gammas", e.what());
      }
      for (double g : gammas)
        if (!(g > 0.0 && g <= 1.0)) throw FlagError("gammas", "each gamma must lie in (0, 1]");
      if (p->seeds < 1) throw FlagError("seeds", "must be >= 1");
      if (!(p->opts.R > 0.0)) throw FlagError("reward-bound", "must be > 0");
      if (!(p->opts.beta > 0.0)) throw FlagError("beta", "must be > 0");
      const auto rows = theorem1_sweep(cli.seed, p->seeds, gammas, p->opts);
      std::string csv =
          "# pi_star: soft-optimal at gamma_e=1; pi: soft-optimal at gamma; shared beta and uniform pi_ref\n"
          "# tv: pi_star state visitation from s0, averaged uniformly over timesteps 0..H-1\n"
          "seed,gamma,delta1,delta2,delta3,subopt,term1,term2,bound,tv,holds\n";
      for (const auto& r : rows) {
        const auto& x = r.report;
        csv += std::to_string(r.seed) + "," + fmt(x.gamma) + "," + fmt(x.delta1) + "," + fmt(x.delta2) + "," +
               fmt(x.delta3) + "," + fmt(x.subopt) + "," + fmt(x.bound_term1) + "," + fmt(x.bound_term2) + "," +
               fmt(x.bound_total) + "," + fmt(x.tv_expectation) + "," + (r.holds ? "1" : "0") + "\n";
      }
      cli.emit(p->out, csv);
      cli.emit_snapshot(p->out);
    });
  }
}

/// Root options, then the sections of the active command chain.
std::string render_snapshot(const Cli& cli, const CLI::App* active) {
  std::string text = "# resolved configuration; rerun with: decaypo --config <this file>";
  std::vector<const CLI::App*> chain;
  for (const CLI::App* a = active; a && a->get_parent(); a = a->get_parent()) chain.insert(chain.begin(), a);
  for (const CLI::App* a : chain) text += " " + a->get_name();
  text += "\nseed = " + std::to_string(cli.seed) + "\n";
  for (const auto& [sub, set] : cli.sets) {
    if (sub == active) text += "\n[" + section_name(sub) + "]\n" + set->render_lines();
  }
  return text;
}

bool seed_on_command_line(const std::vector<std::string>& args) {
  for (const auto& a : args)
    if (a == "--seed" || a.starts_with("--seed=")) return true;
  return false;
}

}  // namespace

std::vector<double> parse_real_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw std::invalid_argument("empty list item in '" + text + "'");
    item = item.substr(b, e - b + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || !std::isfinite(v)) throw std::invalid_argument("'" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (double v : parse_real_list(text)) {
    if (v != std::floor(v) || std::abs(v) > 1e9) throw std::invalid_argument(fmt(v) + " is not an integer");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Cli cli;
  cli.out = &out;
  cli.err = &err;
  CLI::App& app = cli.app;
  app.set_config("--config", "", "Read options from an INI file ([section] per subcommand)");
  app.allow_config_extras(false);
  app.add_option("--seed", cli.seed, "Root seed (environment: DECAYPO_SEED)")->capture_default_str();
  app.require_subcommand(1);
  register_commands(cli);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  if (const char* env = std::getenv("DECAYPO_SEED"); env && !seed_on_command_line(args)) {
    const std::string s(env);
    std::size_t used = 0;
    try {
      cli.seed = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (s.empty() || used != s.size() || s[0] == '-') {
      err << "error: DECAYPO_SEED: '" << s << "' is not an unsigned integer\n";
      return kExitValidation;
    }
  }

  const CLI::App* active = nullptr;
  std::function<void()> action;
  for (const auto& [sub, act] : cli.actions) {
    if (sub->parsed()) {
      active = sub;
      action = act;
    }
  }
  if (!action) {
    err << "error: no command selected\n";
    return kExitValidation;
  }
  cli.snapshot = render_snapshot(cli, active);

  try {
    action();
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::domain_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_command(const std::vector<std::string>& args) { return run_command(args, std::cout, std::cerr); }

}  // namespace decaypo
