#include "qforget/evalsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "qforget/error.hpp"

namespace qforget::eval {

double accuracy(const ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> split) {
  if (split.empty()) throw ShapeError("accuracy: empty split");
  const Tensor out = model::logits(params, config, split);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto row = out.row(i);
    // max_element returns the first maximum, i.e. the lowest index on ties.
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == split[i].value) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(split.size());
}

double quantized_accuracy(const ParamSet& params, const model::ModelConfig& config, const quant::QuantSpec& spec,
                          std::span<const data::Fact> split) {
  return accuracy(quant::quantize(params, spec), config, split);
}

double auc(std::span<const double> members, std::span<const double> nonmembers) {
  if (members.empty() || nonmembers.empty()) throw ShapeError("auc: both score sets must be non-empty");
  std::vector<double> sorted(nonmembers.begin(), nonmembers.end());
  std::sort(sorted.begin(), sorted.end());
  // Twice the Mann-Whitney U statistic, kept integral so auc(a, b) +
  // auc(b, a) == 1 holds exactly.
  std::uint64_t twice_u = 0;
  for (double m : members) {
    if (std::isnan(m)) throw NumericError("auc: NaN score");
    const auto lo = std::lower_bound(sorted.begin(), sorted.end(), m);
    const auto hi = std::upper_bound(lo, sorted.end(), m);
    twice_u += 2 * static_cast<std::uint64_t>(lo - sorted.begin()) + static_cast<std::uint64_t>(hi - lo);
  }
  const double denom = 2.0 * static_cast<double>(members.size()) * static_cast<double>(nonmembers.size());
  return static_cast<double>(twice_u) / denom;
}

double mia_auc(const ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> members,
               std::span<const data::Fact> nonmembers) {
  auto score = [&](std::span<const data::Fact> facts) {
    std::vector<double> s = model::example_losses(params, config, facts);
    for (double& v : s) v = -v;
    return s;
  };
  const auto m = score(members);
  const auto n = score(nonmembers);
  return auc(m, n);
}

// ---------------------------------------------------------------------------

ForgetObjective::ForgetObjective(const model::ModelConfig& config, std::vector<data::Fact> facts)
    : config_(config), facts_(std::move(facts)) {
  if (facts_.empty()) throw ShapeError("ForgetObjective: empty fact list");
}

double ForgetObjective::value(const ParamSet& params) const { return model::mean_loss(params, config_, facts_); }

NamedTensors ForgetObjective::gradient(const ParamSet& params) const {
  ad::Tape tape;
  const auto vars = model::bind(tape, params);
  const auto loss = model::mean_loss(vars, config_, facts_);
  return tape.backward(loss);
}

double gradient_norm(const NamedTensors& grads, const std::vector<std::string>& names) {
  double sq = 0.0;
  for (const auto& name : names) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw ShapeError("gradient_norm: no gradient for " + name);
    for (double g : it->second.values()) sq += g * g;
  }
  return std::sqrt(sq);
}

double sharpness(const Objective& objective, const ParamSet& params) {
  return gradient_norm(objective.gradient(params), params.trainable_names());
}

double sharpness(const ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> forget) {
  const ForgetObjective objective(config, {forget.begin(), forget.end()});
  return sharpness(objective, params);
}

namespace {

void check_compatible(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) throw ShapeError("parameter sets differ in entry count");
  for (const auto& [name, entry] : a) {
    if (!b.contains(name)) throw ShapeError("parameter sets differ: missing " + name);
    if (b.at(name).value.shape() != entry.value.shape()) throw ShapeError("parameter sets differ in shape of " + name);
  }
}

ParamSet lerp(const ParamSet& from, const ParamSet& to, double t) {
  ParamSet out = from;
  for (const auto& [name, entry] : from) {
    auto dst = out.at(name).value.values();
    const auto& b = to.at(name).value.values();
    const auto& a = entry.value.values();
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] = a[i] + t * (b[i] - a[i]);
  }
  return out;
}

double restricted_distance(const ParamSet& a, const ParamSet& b, const std::vector<std::string>& names) {
  double sq = 0.0;
  for (const auto& name : names) {
    const auto& x = a.at(name).value.values();
    const auto& y = b.at(name).value.values();
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
  }
  return std::sqrt(sq);
}

double restricted_gradient_distance(const NamedTensors& a, const NamedTensors& b,
                                    const std::vector<std::string>& names) {
  double sq = 0.0;
  for (const auto& name : names) {
    const auto& x = a.at(name).values();
    const auto& y = b.at(name).values();
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
  }
  return std::sqrt(sq);
}

}  // namespace

double estimate_smoothness(const Objective& objective, const ParamSet& from, const ParamSet& to,
                           const std::vector<std::string>& names, std::size_t samples) {
  if (samples < 2) throw ConfigError("estimate_smoothness: need at least 2 samples");
  check_compatible(from, to);
  double best = 0.0;
  ParamSet prev_point = from;
  NamedTensors prev_grad = objective.gradient(from);
  for (std::size_t k = 1; k < samples; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(samples - 1);
    ParamSet point = k + 1 == samples ? to : lerp(from, to, t);
    NamedTensors grad = objective.gradient(point);
    const double step = restricted_distance(prev_point, point, names);
    if (step > 0.0) best = std::max(best, restricted_gradient_distance(prev_grad, grad, names) / step);
    prev_point = std::move(point);
    prev_grad = std::move(grad);
  }
  return best;
}

SharpnessReport recovery_bound_check(const Objective& objective, const ParamSet& theta_star,
                                     const quant::QuantSpec& spec, std::size_t samples, double tolerance) {
  const ParamSet theta_q = quant::quantize(theta_star, spec);
  const auto names = quant::scope_names(theta_star, spec.scope);
  SharpnessReport r;
  r.delta = restricted_distance(theta_star, theta_q, names);
  r.kappa = gradient_norm(objective.gradient(theta_star), names);
  r.l_hat = r.delta > 0.0 ? estimate_smoothness(objective, theta_star, theta_q, names, samples) : 0.0;
  r.bound_lhs = std::abs(objective.value(theta_q) - objective.value(theta_star));
  r.bound_rhs = r.kappa * r.delta + 0.5 * r.l_hat * r.delta * r.delta;
  r.bound_satisfied = r.bound_lhs <= r.bound_rhs + tolerance;
  return r;
}

SharpnessReport prop1_check(const Objective& objective, const ParamSet& theta0, const ParamSet& theta_star,
                            std::size_t samples) {
  check_compatible(theta0, theta_star);
  const auto names = theta_star.trainable_names();
  SharpnessReport r;
  r.m = objective.value(theta_star) - objective.value(theta0);
  r.rho = restricted_distance(theta_star, theta0, names);
  r.kappa = gradient_norm(objective.gradient(theta_star), names);
  if (r.rho > 0.0) {
    r.l_hat = estimate_smoothness(objective, theta0, theta_star, names, samples);
    r.prop1_rhs = r.m / r.rho - r.l_hat * r.rho;
    r.prop1_holds = r.kappa >= *r.prop1_rhs;
  }
  return r;
}

// ---------------------------------------------------------------------------

const char* precision_name(Precision p) {
  switch (p) {
    case Precision::Full: return "fp";
    case Precision::Int8: return "int8";
    case Precision::Int4: return "int4";
  }
  return "?";
}

Precision parse_precision(const std::string& text) {
  for (Precision p : {Precision::Full, Precision::Int8, Precision::Int4})
    if (text == precision_name(p)) return p;
  throw ConfigError("unknown precision: " + text);
}

bool certificate(const std::map<Precision, double>& fa_by_precision, double epsilon,
                 const std::vector<Precision>& required) {
  bool ok = true;
  for (Precision p : required) {
    const auto it = fa_by_precision.find(p);
    if (it == fa_by_precision.end())
      throw ConfigError(std::string("certificate: no FA for precision ") + precision_name(p));
    ok = ok && it->second <= epsilon;
  }
  return ok;
}

TrilemmaResult trilemma(double fa, double ra, double q_int4, const TrilemmaThresholds& t) {
  TrilemmaResult r;
  if (fa > t.max_fa) r.failed.insert(1);
  if (ra < t.min_ra) r.failed.insert(2);
  if (q_int4 > t.max_q_int4) r.failed.insert(3);
  r.satisfied = r.failed.empty();
  return r;
}

// ---------------------------------------------------------------------------

EvalReport evaluate(const ParamSet& params, const model::ModelConfig& config, const data::FactDataset& dataset,
                    const EvalOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  const auto forget = dataset.split_facts(data::Split::Forget);
  const auto retain = dataset.split_facts(data::Split::Retain);
  const auto holdout = dataset.split_facts(data::Split::Holdout);

  EvalReport r;
  r.fa = accuracy(params, config, forget);
  r.ra = accuracy(params, config, retain);
  const ParamSet q8 = quant::quantize(params, options.int8);
  const ParamSet q4 = quant::quantize(params, options.int4);
  r.q_int8 = accuracy(q8, config, forget);
  r.q_int4 = accuracy(q4, config, forget);
  r.ra_int4 = accuracy(q4, config, retain);
  r.mia_auc = mia_auc(params, config, forget, holdout);
  r.kappa = sharpness(params, config, forget);
  r.cert = certificate({{Precision::Full, r.fa}, {Precision::Int8, r.q_int8}, {Precision::Int4, r.q_int4}},
                       options.epsilon, options.precisions);
  if (r.fa > 0.0) r.recovery_ratio = r.q_int4 / r.fa;
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

FieldStats mean_std(std::span<const double> values) {
  if (values.empty()) throw ShapeError("mean_std: no values");
  FieldStats s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

Aggregate seed_aggregate(std::span<const EvalReport> reports) {
  if (reports.empty()) throw ShapeError("seed_aggregate: no reports");
  Aggregate a;
  a.count = reports.size();
  const std::pair<const char*, double EvalReport::*> fields[] = {
      {"fa", &EvalReport::fa},         {"ra", &EvalReport::ra},           {"q_int8", &EvalReport::q_int8},
      {"q_int4", &EvalReport::q_int4}, {"ra_int4", &EvalReport::ra_int4}, {"mia_auc", &EvalReport::mia_auc},
      {"kappa", &EvalReport::kappa}};
  for (const auto& [name, member] : fields) {
    std::vector<double> v;
    v.reserve(reports.size());
    for (const auto& r : reports) v.push_back(r.*member);
    a.fields[name] = mean_std(v);
  }
  for (const auto& r : reports) a.certified += r.cert ? 1 : 0;
  a.cert_rate = static_cast<double>(a.certified) / static_cast<double>(a.count);
  return a;
}

}  // namespace qforget::eval
