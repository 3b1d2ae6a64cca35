#pragma once

// Minimal reverse-mode automatic differentiation over dense rank-2 tensors.
//
// A Tape records every operation in creation order, which is a topological
// order of the expression DAG. backward() walks it once in reverse, so each
// node is visited exactly once and gradient accumulation order is fixed.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "qforget/kernels.hpp"
#include "qforget/tensor.hpp"

namespace qforget::ad {

enum class OpKind {
  Parameter,
  Constant,
  MatMul,
  Add,
  Scale,
  Mul,
  Gelu,
  Embedding,
  ConcatCols,
  CrossEntropy,
  SoftmaxKl,
  Softplus,
  Mean,
  L2Norm,
  StraightThrough,
};

const char* op_name(OpKind kind);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a named differentiable leaf. Names must be unique per tape.
  Var parameter(const std::string& name, Tensor value);
  /// Registers a non-differentiable leaf.
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  std::size_t size() const { return nodes_.size(); }
  OpKind kind(Var v) const { return nodes_[v.id()].kind; }

  /// Gradients of a 1x1 loss with respect to every registered parameter.
  /// Parameters the loss does not reach get zero tensors. The tape is not
  /// modified, so repeated calls return identical results.
  NamedTensors backward(Var loss) const;

 private:
  friend Var matmul(Var a, Var b, kernels::Trans tb);
  friend Var add(Var a, Var b);
  friend Var scale(Var a, double factor);
  friend Var mul(Var a, Var b);
  friend Var gelu(Var x);
  friend Var embedding(Var table, std::vector<std::size_t> indices);
  friend Var concat_cols(Var a, Var b);
  friend Var cross_entropy(Var logits, std::vector<std::size_t> targets);
  friend Var softmax_kl(Var logits, Tensor reference_log_probs);
  friend Var softplus(Var x);
  friend Var mean(Var x);
  friend Var l2_norm(Var x);
  friend Var straight_through(Var x, Tensor forward_value);

  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs = {};
    Tensor value = {};
    double factor = 0.0;
    kernels::Trans trans = kernels::Trans::No;
    std::vector<std::size_t> indices = {};
    Tensor aux = {};  // cached softmax or reference log-probs
    std::string name = {};
  };

  Var push(Node node);
  void accumulate_input_grads(const Node& node, const Tensor& grad, std::vector<Tensor>& grads,
                              std::vector<bool>& has_grad) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> parameters_;
};

/// a (m x k) times b (k x n), or times b^T when tb == Trans::Yes (b is n x k).
Var matmul(Var a, Var b, kernels::Trans tb = kernels::Trans::No);
Var add(Var a, Var b);
Var scale(Var a, double factor);
/// Elementwise product.
Var mul(Var a, Var b);
/// tanh-approximation GELU.
Var gelu(Var x);
/// Row lookup: out[i] = table[indices[i]].
Var embedding(Var table, std::vector<std::size_t> indices);
Var concat_cols(Var a, Var b);
/// Per-example softmax cross-entropy, n x 1.
Var cross_entropy(Var logits, std::vector<std::size_t> targets);
/// Per-example KL(softmax(logits) || reference), n x 1. The reference is
/// given as log-probabilities and is not differentiated.
Var softmax_kl(Var logits, Tensor reference_log_probs);
/// log(1 + exp(x)) elementwise.
Var softplus(Var x);
/// Mean over all elements, 1x1.
Var mean(Var x);
/// Euclidean norm over all elements, 1x1.
Var l2_norm(Var x);
/// Forward value replaced by forward_value; backward is the identity.
Var straight_through(Var x, Tensor forward_value);

double gelu_value(double x);
double gelu_derivative(double x);

/// Result of comparing backward() against central finite differences.
struct FiniteDiffReport {
  double max_rel_error = 0.0;   // over coordinates with |analytic| >= near_zero
  double max_abs_error = 0.0;   // over coordinates with |analytic| < near_zero
  std::size_t coordinates_checked = 0;
  std::string worst_coordinate;
  bool passed = true;
};

using LossBuilder = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

struct FiniteDiffOptions {
  double step = 1e-3;
  double rel_tolerance = 1e-6;
  double abs_tolerance = 1e-9;
  double near_zero = 1e-6;
  std::size_t max_coordinates = 256;
  std::uint64_t seed = 0;
};

/// Fourth-order central differences on a seeded sample of at most max_coordinates
/// coordinates drawn across all parameters. Never throws for a mismatch;
/// the report carries the outcome.
FiniteDiffReport finite_diff_check(const LossBuilder& build_loss, const NamedTensors& params,
                                   const FiniteDiffOptions& options = {});

}  // namespace qforget::ad
