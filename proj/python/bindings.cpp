#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "decaypo/config.hpp"
#include "decaypo/decay.hpp"
#include "decaypo/losses.hpp"
#include "decaypo/mdp.hpp"

namespace py = pybind11;
using namespace decaypo;

namespace {

DecaySchedule make_schedule(const std::string& kind, double gamma, const std::string& origin) {
  DecaySchedule s;
  s.kind = parse_decay_kind(kind);
  s.gamma = gamma;
  s.origin = parse_decay_origin(origin);
  s.validate();
  return s;
}

py::dict report_dict(const SuboptimalityReport& r) {
  py::dict d;
  d["gamma"] = r.gamma;
  d["gamma_e"] = r.gamma_e;
  d["delta1"] = r.delta1;
  d["delta2"] = r.delta2;
  d["delta3"] = r.delta3;
  d["subopt"] = r.subopt;
  d["bound_term1"] = r.bound_term1;
  d["bound_term2"] = r.bound_term2;
  d["bound_total"] = r.bound_total;
  d["tv_expectation"] = r.tv_expectation;
  return d;
}

double pair_loss_py(const std::vector<double>& chosen, const std::vector<double>& rejected,
                    std::optional<std::vector<double>> chosen_ref,
                    std::optional<std::vector<double>> rejected_ref, const std::string& method,
                    double beta, const std::string& schedule, double gamma,
                    const std::string& origin, int prompt_len, double tau, double target_margin,
                    double lambda_orpo, std::uint64_t example_id) {
  LossConfig cfg;
  cfg.method = parse_loss_method(method);
  cfg.beta = beta;
  cfg.schedule = make_schedule(method == "dpo" ? "uniform" : schedule, gamma, origin);
  cfg.tau = tau;
  cfg.target_margin = target_margin;
  cfg.lambda_orpo = lambda_orpo;
  cfg.validate();
  if (cfg.method == LossMethod::KTO)
    throw std::invalid_argument("kto is a batch loss; use the CLI train command");
  PairScore s;
  s.chosen_logps = RealArray::vector(chosen);
  s.rejected_logps = RealArray::vector(rejected);
  if (chosen_ref) s.chosen_ref_logps = RealArray::vector(*chosen_ref);
  if (rejected_ref) s.rejected_ref_logps = RealArray::vector(*rejected_ref);
  s.prompt_len = prompt_len;
  s.example_id = example_id;
  s.validate();
  return pair_loss(s, cfg);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Temporal-decay preference optimisation: losses, schedules, MDP bounds and CLI";

  m.def(
      "decay_weights",
      [](const std::string& kind, double gamma, int response_len, int prompt_len,
         const std::string& origin) {
        return decay_weights(make_schedule(kind, gamma, origin), response_len, prompt_len);
      },
      py::arg("kind"), py::arg("gamma"), py::arg("response_len"), py::arg("prompt_len") = 0,
      py::arg("origin") = "prompt",
      "Per-position weights for a response of the given length.");

  m.def("pair_loss", &pair_loss_py, py::arg("chosen"), py::arg("rejected"),
        py::arg("chosen_ref") = py::none(), py::arg("rejected_ref") = py::none(),
        py::arg("method") = "d2po", py::arg("beta") = 0.1, py::arg("schedule") = "exponential",
        py::arg("gamma") = 0.98, py::arg("origin") = "prompt", py::arg("prompt_len") = 0,
        py::arg("tau") = 0.1, py::arg("target_margin") = 0.5, py::arg("lambda_orpo") = 1.0,
        py::arg("example_id") = 0,
        "Loss of one preference pair from per-token log-probabilities.");

  m.def("effective_horizon", &effective_horizon, py::arg("H"), py::arg("gamma"));

  m.def(
      "suboptimality_bound",
      [](int H, double R, double gamma, double tv) {
        return report_dict(theorem1_bound(H, R, gamma, tv));
      },
      py::arg("H"), py::arg("R"), py::arg("gamma"), py::arg("tv"),
      "Bound terms for an explicit expected total-variation distance.");

  m.def(
      "suboptimality_report",
      [](int S, int A, int H, double R, std::uint64_t seed, double beta, double gamma) {
        const TabularMDP mdp = random_mdp(S, A, H, R, seed);
        const PolicyTable ref = PolicyTable::uniform(H, S, A);
        const PolicyTable star = soft_value_iteration(mdp, ref, beta, 1.0).policy;
        const PolicyTable pi = soft_value_iteration(mdp, ref, beta, gamma).policy;
        return report_dict(suboptimality_report(mdp, star, pi, gamma));
      },
      py::arg("S"), py::arg("A"), py::arg("H"), py::arg("R"), py::arg("seed"),
      py::arg("beta"), py::arg("gamma"),
      "Decomposition and bound for a random MDP: soft-optimal at 1 versus at gamma.");

  m.def(
      "bound_sweep",
      [](std::uint64_t root_seed, int seeds, const std::vector<double>& gammas) {
        py::list rows;
        for (const auto& row : theorem1_sweep(root_seed, seeds, gammas)) {
          py::dict d = report_dict(row.report);
          d["seed"] = row.seed;
          d["holds"] = row.holds;
          rows.append(d);
        }
        return rows;
      },
      py::arg("root_seed"), py::arg("seeds"), py::arg("gammas"));

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_command(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a CLI command in-process; returns (exit_code, stdout, stderr).");
}
