#include "decaypo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace decaypo {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void require_matrix(const RealArray& a, const char* op) {
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                shape_str(a.shape()));
  }
}

void require_same_shape(const RealArray& a, const RealArray& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

// out[m,n] += a[m,k] * b[k,n]
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
    }
  }
}

// out[m,n] += a[m,k] * b[n,k]^T
void gemm_nt_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      out[i * n + j] += acc;
    }
  }
}

// out[k,n] += a[m,k]^T * b[m,n]
void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bi[j];
    }
  }
}

template <class F, class G>
Var unary(Var a, F forward, G derivative) {
  const RealArray& x = a.value();
  RealArray y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  return a.tape().record(std::move(y), {a}, [a, derivative](const RealArray& g, const RealArray&, Tape& t) {
    const RealArray& x = a.value();
    RealArray& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * derivative(x[i]);
  });
}

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

}  // namespace

// ---------------------------------------------------------------------------
// RealArray

RealArray::RealArray(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), values_(product(shape_), fill) {}

RealArray::RealArray(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != product(shape_)) {
    throw std::invalid_argument("RealArray: " + std::to_string(values_.size()) +
                                " values for shape " + shape_str(shape_));
  }
}

RealArray RealArray::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return RealArray({n}, std::move(v));
}

RealArray RealArray::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return RealArray({rows, cols}, std::move(v));
}

std::size_t RealArray::rows() const { return shape_.empty() ? 1 : shape_[0]; }

std::size_t RealArray::cols() const {
  if (shape_.size() < 2) return shape_.empty() ? 1 : shape_[0];
  return shape_[1];
}

double RealArray::item() const {
  if (values_.size() != 1) {
    throw ContractError("item() on array of shape " + shape_str(shape_));
  }
  return values_[0];
}

// ---------------------------------------------------------------------------
// Tape

const RealArray& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

const RealArray& Gradients::operator[](Var v) const { return grads_.at(v.index()); }

Var Tape::leaf(RealArray value) {
  nodes_.push_back(Node{std::move(value), true, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(RealArray value) {
  nodes_.push_back(Node{std::move(value), false, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::record(RealArray value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (Var in : inputs) needs = needs || nodes_[in.index()].requires_grad;
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : Backward{}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

RealArray& Tape::grad_buffer(Var v) {
  RealArray& g = (*sweep_)[v.index()];
  if (g.size() == 0 && nodes_[v.index()].value.size() != 0) {
    g = RealArray(nodes_[v.index()].value.shape());
  }
  return g;
}

Gradients Tape::gradients(Var output) {
  if (&output.tape() != this) throw ContractError("output recorded on a different tape");
  const RealArray& out = nodes_[output.index()].value;
  if (out.size() != 1) {
    throw ContractError("gradients() requires a scalar output, got shape " +
                        shape_str(out.shape()));
  }
  std::vector<RealArray> g(nodes_.size());
  g[output.index()] = RealArray(out.shape(), 1.0);
  sweep_ = &g;
  for (std::size_t i = output.index() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || g[i].size() == 0) continue;
    node.backward(g[i], node.value, *this);
  }
  sweep_ = nullptr;
  Gradients result;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].size() == 0) g[i] = RealArray(nodes_[i].value.shape());
  }
  result.grads_ = std::move(g);
  return result;
}

// ---------------------------------------------------------------------------
// Scalar helpers

double logsigmoid(double x) {
  if (!std::isfinite(x)) throw std::invalid_argument("logsigmoid: non-finite input");
  return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

double row_logsumexp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

void check_targets(const RealArray& logits, std::span<const int> targets, const char* op) {
  require_matrix(logits, op);
  if (targets.size() != logits.rows()) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(logits.rows()) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
      throw std::invalid_argument(std::string(op) + ": target index " + std::to_string(t) +
                                  " outside vocabulary of size " +
                                  std::to_string(logits.cols()));
    }
  }
}

}  // namespace

RealArray sequence_logprobs_from_logits(const RealArray& logits, std::span<const int> targets) {
  check_targets(logits, targets, "sequence_logprobs_from_logits");
  RealArray out({targets.size()});
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto row = logits.row(t);
    out[t] = row[static_cast<std::size_t>(targets[t])] - row_logsumexp(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const RealArray& x = a.value();
  const RealArray& y = b.value();
  require_matrix(x, "matmul");
  require_matrix(y, "matmul");
  if (x.cols() != y.rows()) {
    throw std::invalid_argument("matmul: inner dimensions " + shape_str(x.shape()) + " x " +
                                shape_str(y.shape()));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
  RealArray out({m, n});
  gemm_acc(x.data().data(), y.data().data(), out.values().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](const RealArray& g, const RealArray&, Tape& t) {
    if (a.requires_grad()) {
      gemm_nt_acc(g.data().data(), b.value().data().data(), t.grad_buffer(a).values().data(), m,
                  n, k);
    }
    if (b.requires_grad()) {
      gemm_tn_acc(a.value().data().data(), g.data().data(), t.grad_buffer(b).values().data(), m,
                  k, n);
    }
  });
}

Var transpose(Var a) {
  const RealArray& x = a.value();
  require_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  RealArray out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
  return a.tape().record(std::move(out), {a}, [a, m, n](const RealArray& g, const RealArray&, Tape& t) {
    RealArray& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  RealArray out = a.value();
  const RealArray& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](const RealArray& g, const RealArray&, Tape& t) {
    for (Var v : {a, b}) {
      if (!v.requires_grad()) continue;
      RealArray& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  RealArray out = a.value();
  const RealArray& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](const RealArray& g, const RealArray&, Tape& t) {
    if (a.requires_grad()) {
      RealArray& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      RealArray& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  RealArray out = a.value();
  const RealArray& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](const RealArray& g, const RealArray&, Tape& t) {
    if (a.requires_grad()) {
      RealArray& ga = t.grad_buffer(a);
      const RealArray& y = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      RealArray& gb = t.grad_buffer(b);
      const RealArray& x = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Var shift(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var sum(Var a) {
  const RealArray& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  return a.tape().record(RealArray::scalar(s), {a}, [a](const RealArray& g, const RealArray&, Tape& t) {
    RealArray& ga = t.grad_buffer(a);
    const double gv = g[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv;
  });
}

Var weighted_sum(Var a, std::span<const double> weights) {
  const RealArray& x = a.value();
  if (weights.size() != x.size()) {
    throw std::invalid_argument("weighted_sum: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(x.size()) + " values");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += weights[i] * x[i];
  std::vector<double> w(weights.begin(), weights.end());
  return a.tape().record(RealArray::scalar(s), {a},
                         [a, w = std::move(w)](const RealArray& g, const RealArray&, Tape& t) {
                           RealArray& ga = t.grad_buffer(a);
                           const double gv = g[0];
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv * w[i];
                         });
}

Var logsigmoid(Var a) {
  for (double v : a.value().values()) {
    if (!std::isfinite(v)) throw std::invalid_argument("logsigmoid: non-finite input");
  }
  return unary(
      a, [](double x) { return logsigmoid(x); }, [](double x) { return sigmoid(-x); });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return sigmoid(x); },
      [](double x) {
        const double s = sigmoid(x);
        return s * (1.0 - s);
      });
}

Var log1mexp(Var a) {
  for (double v : a.value().values()) {
    if (!(v < 0.0)) throw std::invalid_argument("log1mexp: argument must be negative");
  }
  return unary(
      a,
      [](double x) {
        // Maechler's split keeps both branches accurate.
        return x > -std::numbers::ln2 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x));
      },
      [](double x) { return -1.0 / std::expm1(-x); });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var log_softmax_gather(Var logits, std::span<const int> targets) {
  const RealArray& x = logits.value();
  check_targets(x, targets, "log_softmax_gather");
  const std::size_t rows = x.rows(), cols = x.cols();
  RealArray out({rows});
  std::vector<double> lse(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    lse[r] = row_logsumexp(x.row(r));
    out[r] = x.at(r, static_cast<std::size_t>(targets[r])) - lse[r];
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return logits.tape().record(
      std::move(out), {logits},
      [logits, tgt = std::move(tgt), lse = std::move(lse), cols](const RealArray& g, const RealArray&, Tape& t) {
        const RealArray& x = logits.value();
        RealArray& gx = t.grad_buffer(logits);
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          for (std::size_t c = 0; c < cols; ++c) gx.at(r, c) -= gr * std::exp(x.at(r, c) - lse[r]);
          gx.at(r, static_cast<std::size_t>(tgt[r])) += gr;
        }
      });
}

Var take_rows(Var table, std::span<const int> ids) {
  const RealArray& x = table.value();
  require_matrix(x, "take_rows");
  const std::size_t d = x.cols();
  RealArray out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= x.rows()) {
      throw std::invalid_argument("take_rows: row index " + std::to_string(ids[i]) +
                                  " out of range");
    }
    std::copy_n(x.row(static_cast<std::size_t>(ids[i])).begin(), d, out.row(i).begin());
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table},
                             [table, idx = std::move(idx), d](const RealArray& g, const RealArray&, Tape& t) {
                               RealArray& gt = t.grad_buffer(table);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 auto dst = gt.row(static_cast<std::size_t>(idx[i]));
                                 auto src = g.row(i);
                                 for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                               }
                             });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const RealArray& x = a.value();
  require_matrix(x, "slice_rows");
  if (begin + count > x.rows()) throw std::invalid_argument("slice_rows: range out of bounds");
  const std::size_t d = x.cols();
  RealArray out({count, d});
  std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(begin * d), count * d,
              out.values().begin());
  return a.tape().record(std::move(out), {a}, [a, begin, count, d](const RealArray& g, const RealArray&, Tape& t) {
    RealArray& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < count * d; ++i) ga[begin * d + i] += g[i];
  });
}

Var causal_softmax(Var scores, double scale) {
  const RealArray& s = scores.value();
  require_matrix(s, "causal_softmax");
  if (s.rows() != s.cols()) throw std::invalid_argument("causal_softmax: scores must be square");
  const std::size_t n = s.rows();
  RealArray p({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j <= i; ++j) m = std::max(m, scale * s.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      p.at(i, j) = std::exp(scale * s.at(i, j) - m);
      z += p.at(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) p.at(i, j) /= z;
  }
  return scores.tape().record(
      std::move(p), {scores}, [scores, n, scale](const RealArray& g, const RealArray& p, Tape& t) {
        RealArray& gs = t.grad_buffer(scores);
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dot += g.at(i, j) * p.at(i, j);
          for (std::size_t j = 0; j <= i; ++j) gs.at(i, j) += scale * p.at(i, j) * (g.at(i, j) - dot);
        }
      });
}

Var rms_norm(Var a, double eps) {
  const RealArray& x = a.value();
  require_matrix(x, "rms_norm");
  const std::size_t rows = x.rows(), d = x.cols();
  RealArray out({rows, d});
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (double v : x.row(r)) ms += v * v;
    ms /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) * inv[r];
  }
  return a.tape().record(
      std::move(out), {a}, [a, inv = std::move(inv), rows, d](const RealArray& g, const RealArray&, Tape& t) {
        const RealArray& x = a.value();
        RealArray& ga = t.grad_buffer(a);
        for (std::size_t r = 0; r < rows; ++r) {
          double gx = 0.0;
          for (std::size_t c = 0; c < d; ++c) gx += g.at(r, c) * x.at(r, c);
          const double k = inv[r] * inv[r] * inv[r] * gx / static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) ga.at(r, c) += inv[r] * g.at(r, c) - k * x.at(r, c);
        }
      });
}

}  // namespace decaypo
