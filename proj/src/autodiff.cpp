#include "qforget/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "qforget/error.hpp"
#include "qforget/rng.hpp"

namespace qforget::ad {

namespace {

using kernels::Trans;

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

void require_same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Row-wise log-softmax of an n x v matrix.
Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  for (std::size_t i = 0; i < n; ++i) {
    auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(sum);
    for (std::size_t j = 0; j < v; ++j) out.at(i, j) = z[j] - lse;
  }
  return out;
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Parameter: return "parameter";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Mul: return "mul";
    case OpKind::Gelu: return "gelu";
    case OpKind::Embedding: return "embedding";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::SoftmaxKl: return "softmax_kl";
    case OpKind::Softplus: return "softplus";
    case OpKind::Mean: return "mean";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::StraightThrough: return "straight_through";
  }
  return "unknown";
}

double gelu_value(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

const Tensor& Var::value() const { return tape_->value(*this); }

Var Tape::push(Node node) {
  if (!node.value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op_name(node.kind) +
                       (node.name.empty() ? "" : " '" + node.name + "'"));
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const std::string& name, Tensor value) {
  if (parameters_.count(name)) throw Error("duplicate parameter '" + name + "' on tape");
  Node node{OpKind::Parameter, {}, std::move(value)};
  node.name = name;
  Var v = push(std::move(node));
  parameters_[name] = v.id();
  return v;
}

Var Tape::constant(Tensor value) { return push(Node{OpKind::Constant, {}, std::move(value)}); }

Var matmul(Var a, Var b, Trans tb) {
  require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows();
  const std::size_t k = av.cols();
  const std::size_t kb = tb == Trans::No ? bv.rows() : bv.cols();
  const std::size_t n = tb == Trans::No ? bv.cols() : bv.rows();
  if (k != kb) {
    throw ShapeError("matmul: shape mismatch " + shape_string(av.shape()) + " vs " +
                     shape_string(bv.shape()) + (tb == Trans::Yes ? " (transposed)" : ""));
  }
  Tensor out = Tensor::zeros(m, n);
  kernels::gemm(Trans::No, tb, m, n, k, av.values().data(), bv.values().data(), out.values().data());
  Tape::Node node{OpKind::MatMul, {a.id(), b.id()}, std::move(out)};
  node.trans = tb;
  return a.tape().push(std::move(node));
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  add_into(out, b.value());
  return a.tape().push({OpKind::Add, {a.id(), b.id()}, std::move(out)});
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  Tape::Node node{OpKind::Scale, {a.id()}, std::move(out)};
  node.factor = factor;
  return a.tape().push(std::move(node));
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto bv = b.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape().push({OpKind::Mul, {a.id(), b.id()}, std::move(out)});
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = gelu_value(v);
  return x.tape().push({OpKind::Gelu, {x.id()}, std::move(out)});
}

Var embedding(Var table, std::vector<std::size_t> indices) {
  const Tensor& tv = table.value();
  if (indices.empty()) throw ShapeError("embedding: empty index list");
  const std::size_t d = tv.cols();
  Tensor out = Tensor::zeros(indices.size(), d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw ShapeError("embedding: index " + std::to_string(indices[i]) + " out of range for table " +
                       shape_string(tv.shape()));
    }
    std::copy_n(tv.row(indices[i]).begin(), d, out.row(i).begin());
  }
  Tape::Node node{OpKind::Embedding, {table.id()}, std::move(out)};
  node.indices = std::move(indices);
  return table.tape().push(std::move(node));
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b, "concat_cols");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: shape mismatch " + shape_string(av.shape()) + " vs " +
                     shape_string(bv.shape()));
  }
  const std::size_t ca = av.cols();
  const std::size_t cb = bv.cols();
  Tensor out = Tensor::zeros(av.rows(), ca + cb);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    std::copy_n(av.row(i).begin(), ca, out.row(i).begin());
    std::copy_n(bv.row(i).begin(), cb, out.row(i).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  return a.tape().push({OpKind::ConcatCols, {a.id(), b.id()}, std::move(out)});
}

Var cross_entropy(Var logits, std::vector<std::size_t> targets) {
  const Tensor& z = logits.value();
  if (targets.size() != z.rows()) {
    throw ShapeError("cross_entropy: shape mismatch " + shape_string(z.shape()) + " vs targets [" +
                     std::to_string(targets.size()) + "]");
  }
  Tensor log_p = log_softmax_rows(z);
  Tensor out = Tensor::zeros(z.rows(), 1);
  Tensor probs(z.shape());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (targets[i] >= z.cols()) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " out of range for logits " +
                       shape_string(z.shape()));
    }
    out.at(i, 0) = -log_p.at(i, targets[i]);
    for (std::size_t j = 0; j < z.cols(); ++j) probs.at(i, j) = std::exp(log_p.at(i, j));
  }
  Tape::Node node{OpKind::CrossEntropy, {logits.id()}, std::move(out)};
  node.indices = std::move(targets);
  node.aux = std::move(probs);
  return logits.tape().push(std::move(node));
}

Var softmax_kl(Var logits, Tensor reference_log_probs) {
  const Tensor& z = logits.value();
  require_same_shape(z, reference_log_probs, "softmax_kl");
  Tensor log_p = log_softmax_rows(z);
  Tensor out = Tensor::zeros(z.rows(), 1);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double kl = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) {
      kl += std::exp(log_p.at(i, j)) * (log_p.at(i, j) - reference_log_probs.at(i, j));
    }
    out.at(i, 0) = kl;
  }
  // aux holds log p - log q; backward needs p and this difference.
  for (std::size_t i = 0; i < log_p.size(); ++i) log_p[i] -= reference_log_probs[i];
  Tape::Node node{OpKind::SoftmaxKl, {logits.id()}, std::move(out)};
  node.aux = std::move(log_p);
  return logits.tape().push(std::move(node));
}

Var softplus(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  return x.tape().push({OpKind::Softplus, {x.id()}, std::move(out)});
}

Var mean(Var x) {
  double sum = 0.0;
  for (double v : x.value().values()) sum += v;
  return x.tape().push(
      {OpKind::Mean, {x.id()}, Tensor::scalar(sum / static_cast<double>(x.value().size()))});
}

Var l2_norm(Var x) {
  return x.tape().push({OpKind::L2Norm, {x.id()}, Tensor::scalar(qforget::l2_norm(x.value().values()))});
}

Var straight_through(Var x, Tensor forward_value) {
  require_same_shape(x.value(), forward_value, "straight_through");
  return x.tape().push({OpKind::StraightThrough, {x.id()}, std::move(forward_value)});
}

void Tape::accumulate_input_grads(const Node& node, const Tensor& grad, std::vector<Tensor>& grads,
                                  std::vector<bool>& has_grad) const {
  auto send = [&](std::size_t input, Tensor g) {
    if (!has_grad[input]) {
      grads[input] = std::move(g);
      has_grad[input] = true;
    } else {
      add_into(grads[input], g);
    }
  };
  auto in_value = [&](std::size_t k) -> const Tensor& { return nodes_[node.inputs[k]].value; };

  switch (node.kind) {
    case OpKind::Parameter:
    case OpKind::Constant:
      return;
    case OpKind::MatMul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      const std::size_t m = a.rows();
      const std::size_t k = a.cols();
      const std::size_t n = grad.cols();
      Tensor da = Tensor::zeros(m, k);
      // C = A B  -> dA = dC B^T,  dB = A^T dC
      // C = A B^T -> dA = dC B,   dB = dC^T A
      if (node.trans == Trans::No) {
        kernels::gemm(Trans::No, Trans::Yes, m, k, n, grad.values().data(), b.values().data(), da.values().data());
        Tensor db = Tensor::zeros(k, n);
        kernels::gemm(Trans::Yes, Trans::No, k, n, m, a.values().data(), grad.values().data(), db.values().data());
        send(node.inputs[0], std::move(da));
        send(node.inputs[1], std::move(db));
      } else {
        kernels::gemm(Trans::No, Trans::No, m, k, n, grad.values().data(), b.values().data(), da.values().data());
        Tensor db = Tensor::zeros(n, k);
        kernels::gemm(Trans::Yes, Trans::No, n, k, m, grad.values().data(), a.values().data(), db.values().data());
        send(node.inputs[0], std::move(da));
        send(node.inputs[1], std::move(db));
      }
      return;
    }
    case OpKind::Add:
      send(node.inputs[0], grad);
      send(node.inputs[1], grad);
      return;
    case OpKind::Scale: {
      Tensor g = grad;
      for (double& v : g.values()) v *= node.factor;
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::Mul: {
      Tensor ga = grad;
      Tensor gb = grad;
      auto av = in_value(0).values();
      auto bv = in_value(1).values();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] *= bv[i];
        gb[i] *= av[i];
      }
      send(node.inputs[0], std::move(ga));
      send(node.inputs[1], std::move(gb));
      return;
    }
    case OpKind::Gelu: {
      Tensor g = grad;
      auto x = in_value(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= gelu_derivative(x[i]);
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::Embedding: {
      Tensor g(in_value(0).shape());
      const std::size_t d = g.cols();
      for (std::size_t i = 0; i < node.indices.size(); ++i) {
        auto dst = g.row(node.indices[i]);
        auto src = grad.row(i);
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::ConcatCols: {
      const std::size_t ca = in_value(0).cols();
      const std::size_t cb = in_value(1).cols();
      Tensor ga = Tensor::zeros(grad.rows(), ca);
      Tensor gb = Tensor::zeros(grad.rows(), cb);
      for (std::size_t i = 0; i < grad.rows(); ++i) {
        auto src = grad.row(i);
        std::copy_n(src.begin(), ca, ga.row(i).begin());
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ca), cb, gb.row(i).begin());
      }
      send(node.inputs[0], std::move(ga));
      send(node.inputs[1], std::move(gb));
      return;
    }
    case OpKind::CrossEntropy: {
      Tensor g = node.aux;  // softmax probabilities
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const double up = grad.at(i, 0);
        auto row = g.row(i);
        row[node.indices[i]] -= 1.0;
        for (double& v : row) v *= up;
      }
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::SoftmaxKl: {
      // d KL / d z_j = p_j (log p_j - log q_j - KL)
      const Tensor& diff = node.aux;
      Tensor g(diff.shape());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const double kl = node.value.at(i, 0);
        const double up = grad.at(i, 0);
        const Tensor& z = in_value(0);
        auto zr = z.row(i);
        const double zmax = *std::max_element(zr.begin(), zr.end());
        double sum = 0.0;
        for (double v : zr) sum += std::exp(v - zmax);
        for (std::size_t j = 0; j < g.cols(); ++j) {
          const double p = std::exp(zr[j] - zmax) / sum;
          g.at(i, j) = up * p * (diff.at(i, j) - kl);
        }
      }
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::Softplus: {
      Tensor g = grad;
      auto x = in_value(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
        g[i] *= s;
      }
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::Mean: {
      const Tensor& x = in_value(0);
      Tensor g(x.shape());
      const double v = grad.item() / static_cast<double>(x.size());
      for (double& e : g.values()) e = v;
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::L2Norm: {
      const Tensor& x = in_value(0);
      Tensor g(x.shape());
      const double norm = node.value.item();
      if (norm > 0.0) {
        const double f = grad.item() / norm;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = f * x[i];
      }
      send(node.inputs[0], std::move(g));
      return;
    }
    case OpKind::StraightThrough:
      send(node.inputs[0], grad);
      return;
  }
}

NamedTensors Tape::backward(Var loss) const {
  if (&loss.tape() != this) throw Error("backward: loss belongs to a different tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_string(lv.shape()));

  std::vector<Tensor> grads(loss.id() + 1);
  std::vector<bool> has_grad(loss.id() + 1, false);
  grads[loss.id()] = Tensor(lv.shape(), {1.0});
  has_grad[loss.id()] = true;

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (!has_grad[id]) continue;
    const Node& node = nodes_[id];
    accumulate_input_grads(node, grads[id], grads, has_grad);
    if (node.kind != OpKind::Parameter) grads[id] = Tensor();
  }

  NamedTensors out;
  for (const auto& [name, id] : parameters_) {
    if (id < has_grad.size() && has_grad[id]) {
      if (!grads[id].all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
      out.emplace(name, std::move(grads[id]));
    } else {
      out.emplace(name, Tensor::zeros_like(nodes_[id].value));
    }
  }
  return out;
}

FiniteDiffReport finite_diff_check(const LossBuilder& build_loss, const NamedTensors& params,
                                   const FiniteDiffOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("finite_diff_check: step must be positive");

  auto evaluate = [&](const NamedTensors& p) {
    Tape tape;
    std::map<std::string, Var> vars;
    for (const auto& [name, t] : p) vars.emplace(name, tape.parameter(name, t));
    return tape.value(build_loss(tape, vars)).item();
  };

  NamedTensors analytic;
  {
    Tape tape;
    std::map<std::string, Var> vars;
    for (const auto& [name, t] : params) vars.emplace(name, tape.parameter(name, t));
    analytic = tape.backward(build_loss(tape, vars));
  }

  // Flat coordinate list in map order, then a seeded sample without replacement.
  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, t] : params) {
    for (std::size_t i = 0; i < t.size(); ++i) coords.emplace_back(name, i);
  }
  Rng rng(options.seed);
  rng.shuffle(std::span(coords));
  if (coords.size() > options.max_coordinates) coords.resize(options.max_coordinates);

  FiniteDiffReport report;
  NamedTensors work = params;
  for (const auto& [name, index] : coords) {
    double& x = work.at(name)[index];
    const double original = x;
    // Fourth-order central stencil: truncation O(h^4), so a coarse step
    // keeps cancellation error far below the tolerance.
    auto at = [&](double offset) {
      x = original + offset;
      return evaluate(work);
    };
    const double h = options.step;
    const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
    x = original;
    const double exact = analytic.at(name)[index];
    const double abs_err = std::abs(numeric - exact);
    ++report.coordinates_checked;
    if (std::abs(exact) < options.near_zero) {
      if (abs_err > report.max_abs_error) report.max_abs_error = abs_err;
    } else {
      const double rel = abs_err / std::max(std::abs(exact), std::abs(numeric));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_coordinate = name + "[" + std::to_string(index) + "]";
      }
    }
  }
  report.passed = report.max_rel_error <= options.rel_tolerance && report.max_abs_error <= options.abs_tolerance;
  return report;
}

}  // namespace qforget::ad
