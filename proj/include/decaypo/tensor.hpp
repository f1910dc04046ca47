#pragma once

// Dense 64-bit arrays and a small reverse-mode tape.
//
// The primitive set is deliberately closed: everything the policy model and
// the preference losses need, and nothing else, so that the finite-difference
// checks in tests/ can cover every primitive.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <vector>

namespace decaypo {

/// Raised when a caller breaks an API contract that is not a data error
/// (for example asking for gradients of a non-scalar output).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class RealArray {
 public:
  RealArray() = default;
  explicit RealArray(std::vector<std::size_t> shape, double fill = 0.0);
  RealArray(std::vector<std::size_t> shape, std::vector<double> values);

  static RealArray scalar(double v) { return RealArray({}, std::vector<double>{v}); }
  static RealArray vector(std::vector<double> v);
  static RealArray matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& data() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols(), cols()};
  }

  /// The single value of a one-element array.
  double item() const;

  bool operator==(const RealArray&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t index) : tape_(tape), index_(index) {}

  Tape& tape() const { return *tape_; }
  std::uint32_t index() const { return index_; }
  const RealArray& value() const;
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t index_ = 0;
};

class Gradients {
 public:
  /// Gradient with respect to a recorded value; zeros if it did not participate.
  const RealArray& operator[](Var v) const;

 private:
  friend class Tape;
  std::vector<RealArray> grads_;
};

/// Records primitive operations in execution order. A node requires a
/// gradient iff it is a leaf created with leaf() or depends on one; values
/// built only from constants carry no backward closure, so inference on a
/// tape of constants records no gradient work at all.
class Tape {
 public:
  using Backward =
      std::function<void(const RealArray& grad_out, const RealArray& out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(RealArray value);
  Var constant(RealArray value);

  const RealArray& value(Var v) const { return nodes_[v.index()].value; }
  bool requires_grad(Var v) const { return nodes_[v.index()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar output. Each node is visited once, in
  /// reverse recording order.
  Gradients gradients(Var output);

  // Used by primitive implementations.
  Var record(RealArray value, std::initializer_list<Var> inputs, Backward backward);
  /// Accumulate into the gradient buffer of an input during a backward sweep.
  RealArray& grad_buffer(Var v);

 private:
  struct Node {
    RealArray value;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::vector<RealArray>* sweep_ = nullptr;
};

// ---------------------------------------------------------------------------
// Scalar helpers

/// log(sigmoid(x)) = -softplus(-x), stable for any finite x.
double logsigmoid(double x);
double sigmoid(double x);

/// Row-wise log-softmax evaluated at one target per row. Plain (untaped) form.
RealArray sequence_logprobs_from_logits(const RealArray& logits, std::span<const int> targets);

// ---------------------------------------------------------------------------
// Primitives. Every primitive checks shapes and throws std::invalid_argument
// on mismatch.

Var matmul(Var a, Var b);                 // [m,k] x [k,n]
Var transpose(Var a);                     // [m,n] -> [n,m]
Var add(Var a, Var b);                    // same shape
Var sub(Var a, Var b);                    // same shape
Var mul(Var a, Var b);                    // elementwise, same shape
Var scale(Var a, double c);
Var shift(Var a, double c);               // a + c
Var sum(Var a);                           // -> scalar
Var weighted_sum(Var a, std::span<const double> weights);  // sum_i w_i a_i, w constant
Var logsigmoid(Var a);
Var sigmoid(Var a);
Var log1mexp(Var a);                      // log(1 - e^a), requires a < 0
Var square(Var a);
Var relu(Var a);
Var log_softmax_gather(Var logits, std::span<const int> targets);  // [T,V] -> [T]
Var take_rows(Var table, std::span<const int> ids);                // [N,d] -> [n,d]
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var causal_softmax(Var scores, double scale);  // row i attends to columns <= i
Var rms_norm(Var a, double eps);               // row-wise x / sqrt(mean(x^2) + eps)

}  // namespace decaypo
