#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "qforget/datagen.hpp"
#include "qforget/factmodel.hpp"
#include "qforget/params.hpp"
#include "qforget/quantsim.hpp"

namespace qforget::eval {

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of facts whose argmax logit (lowest index on ties) is the value.
double accuracy(const ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> split);

/// accuracy(quantize(params, spec), split); params are not modified.
double quantized_accuracy(const ParamSet& params, const model::ModelConfig& config, const quant::QuantSpec& spec,
                          std::span<const data::Fact> split);

/// Rank-sum AUC of member scores against non-member scores, ties count 1/2.
double auc(std::span<const double> member_scores, std::span<const double> nonmember_scores);

/// Loss-threshold membership inference: score = -per-example loss.
double mia_auc(const ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> members,
               std::span<const data::Fact> nonmembers);

// ---------------------------------------------------------------------------
// Landscape diagnostics

/// A differentiable scalar function of a parameter set.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual double value(const ParamSet& params) const = 0;
  virtual NamedTensors gradient(const ParamSet& params) const = 0;
};

/// Mean cross-entropy of the model over a fixed fact list.
class ForgetObjective final : public Objective {
 public:
  ForgetObjective(const model::ModelConfig& config, std::vector<data::Fact> facts);
  double value(const ParamSet& params) const override;
  NamedTensors gradient(const ParamSet& params) const override;

 private:
  model::ModelConfig config_;
  std::vector<data::Fact> facts_;
};

/// ||grad||_2 restricted to the named entries.
double gradient_norm(const NamedTensors& grads, const std::vector<std::string>& names);

/// kappa = ||grad L_f(params)||_2 over trainable (unfrozen) entries.
double sharpness(const Objective& objective, const ParamSet& params);
double sharpness(const ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> forget);

/// max over adjacent pairs of `samples` evenly spaced points on [from, to]
/// of ||grad(p1) - grad(p2)|| / ||p1 - p2||, over the named entries.
double estimate_smoothness(const Objective& objective, const ParamSet& from, const ParamSet& to,
                           const std::vector<std::string>& names, std::size_t samples = 32);

struct SharpnessReport {
  double kappa = 0.0;
  double delta = 0.0;
  double l_hat = 0.0;
  double bound_lhs = 0.0;  // |L(theta_q) - L(theta*)|
  double bound_rhs = 0.0;  // kappa delta + L_hat delta^2 / 2
  bool bound_satisfied = true;
  // Proposition-style sharpness floor: kappa >= M / rho - L_hat rho.
  double m = 0.0;
  double rho = 0.0;
  std::optional<double> prop1_rhs;  // undefined when rho == 0
  bool prop1_holds = true;
};

/// Loss-level recovery bound under the quantization perturbation of spec,
/// with kappa and L_hat taken over the quantization scope.
SharpnessReport recovery_bound_check(const Objective& objective, const ParamSet& theta_star,
                                     const quant::QuantSpec& spec, std::size_t samples = 32,
                                     double tolerance = 1e-9);

/// M = L(theta*) - L(theta0), rho = ||theta* - theta0|| over trainable
/// entries, kappa at theta*, L_hat on the segment [theta0, theta*].
SharpnessReport prop1_check(const Objective& objective, const ParamSet& theta0, const ParamSet& theta_star,
                            std::size_t samples = 32);

// ---------------------------------------------------------------------------
// Durability predicates

enum class Precision { Full, Int8, Int4 };
const char* precision_name(Precision p);
Precision parse_precision(const std::string& text);

/// True iff every precision in `required` has FA <= epsilon. A required
/// precision missing from the map is an error.
bool certificate(const std::map<Precision, double>& fa_by_precision, double epsilon,
                 const std::vector<Precision>& required = {Precision::Full, Precision::Int8, Precision::Int4});

struct TrilemmaThresholds {
  double max_fa = 0.05;
  double min_ra = 0.50;
  double max_q_int4 = 0.05;
};

struct TrilemmaResult {
  bool satisfied = false;
  /// Subset of {1, 2, 3}: (i) forgetting, (ii) utility, (iii) INT4 robustness.
  std::set<int> failed;
};

TrilemmaResult trilemma(double fa, double ra, double q_int4, const TrilemmaThresholds& thresholds = {});

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  double fa = 0.0;
  double ra = 0.0;
  double q_int8 = 0.0;
  double q_int4 = 0.0;
  double ra_int4 = 0.0;
  double mia_auc = 0.5;
  double kappa = 0.0;
  bool cert = false;
  std::optional<double> recovery_ratio;  // q_int4 / fa, undefined for fa == 0
  double runtime_seconds = 0.0;
};

struct EvalOptions {
  quant::QuantSpec int8 = quant::QuantSpec::int8();
  quant::QuantSpec int4 = quant::QuantSpec::int4();
  double epsilon = 0.05;
  std::vector<Precision> precisions{Precision::Full, Precision::Int8, Precision::Int4};
};

EvalReport evaluate(const ParamSet& params, const model::ModelConfig& config, const data::FactDataset& dataset,
                    const EvalOptions& options = {});

struct FieldStats {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1) standard deviation; 0 for n == 1
};

struct Aggregate {
  std::size_t count = 0;
  std::map<std::string, FieldStats> fields;  // fa, ra, q_int8, q_int4, ra_int4, mia_auc, kappa
  std::size_t certified = 0;
  double cert_rate = 0.0;
};

FieldStats mean_std(std::span<const double> values);
Aggregate seed_aggregate(std::span<const EvalReport> reports);

}  // namespace qforget::eval
