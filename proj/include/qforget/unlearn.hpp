#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include "qforget/datagen.hpp"
#include "qforget/factmodel.hpp"
#include "qforget/optim.hpp"
#include "qforget/params.hpp"
#include "qforget/quantsim.hpp"

namespace qforget::unlearn {

// ---------------------------------------------------------------------------
// Pretraining: produces the memorized checkpoint that unlearning starts from.

struct PretrainConfig {
  std::size_t epochs = 60;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  double clip_norm = 0.0;
  /// Train the adapter pairs together with the base. When false the
  /// adapters keep their zero-delta initialization.
  bool train_adapters = false;
  std::uint64_t seed = 42;
  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

/// Initializes the model from config (seeded by pretrain.seed) and fits it
/// to forget + retain facts. Throws NumericError on divergence.
ParamSet pretrain(const model::ModelConfig& config, const data::FactDataset& dataset, const PretrainConfig& pretrain);

// ---------------------------------------------------------------------------
// Unlearning methods.

enum class Method { GA, GradDiff, NPO, SCRUB, SalUn, TaskArith, SAF };
const char* method_name(Method m);
Method parse_method(const std::string& text);

/// Which entries an unlearning run updates: the adapter pairs only, every
/// linear weight (base and adapters, embeddings frozen), or everything.
enum class TrainScope { Adapters, Linear, All };
const char* train_scope_name(TrainScope s);
TrainScope parse_train_scope(const std::string& text);
/// Sets the frozen flags of params for the scope.
void apply_train_scope(ParamSet& params, TrainScope scope);

/// alpha(t) = min(alpha_max, 2 alpha_max (t - t_w) / (T - t_w)) * 1[t > t_w].
double alpha_schedule(std::size_t t, std::size_t warmup, std::size_t total_steps, double alpha_max);

/// max(1, alpha_max + 1).
double default_lambda(double alpha_max);

struct MethodConfig {
  Method method = Method::GA;
  optim::AdamWConfig optimizer{};
  std::size_t batch_size = 4;
  std::uint64_t seed = 42;
  TrainScope train_scope = TrainScope::Adapters;
  /// Retain weight for GradDiff, NPO, SalUn and SAF. Unset: 1, or the
  /// max(1, alpha_max + 1) rule for SAF.
  std::optional<double> lambda;

  double npo_beta = 0.1;
  double salun_fraction = 0.5;
  double scrub_kl_weight = 1.0;
  double taskarith_eta = 1.0;
  std::size_t taskarith_ft_steps = 100;

  double alpha_max = 3.0;
  std::size_t warmup = 100;
  /// Ablation arm: alpha = alpha_max from step 1.
  bool warmup_enabled = true;
  quant::Scope ste_scope = quant::Scope::AllTrainable;
  int ste_bits = 4;

  std::size_t total_steps() const { return optimizer.total_steps; }
  double effective_lambda() const;
  /// Throws ConfigError naming the offending knob.
  void validate() const;
};

/// The three coefficients of one objective evaluation:
/// -forget_weight * L_f - alpha * L_f(Q_STE) + lambda * L_r.
struct ObjectiveWeights {
  double alpha = 0.0;
  double lambda = 0.0;
};

/// One optimizer step on -L_f(theta, b_f) - alpha L_f(Q_STE(theta), b_f)
/// + lambda L_r(theta, b_r). With alpha == 0 the quantized forward is not
/// built; with lambda == 0 the retain forward is not built.
void saf_step(ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> forget_batch,
              std::span<const data::Fact> retain_batch, ObjectiveWeights weights, const quant::QuantSpec& ste_spec,
              optim::AdamW& optimizer, const NamedTensors* mask = nullptr);

/// Called after every step with the 1-based step index.
using StepObserver = std::function<void(std::size_t step, const ParamSet& params)>;

/// Runs the configured method from theta0 and returns theta*. Divergence is
/// reported as NumericError naming the step.
ParamSet run_method(const MethodConfig& method, const ParamSet& theta0, const model::ModelConfig& config,
                    const data::FactDataset& dataset, const StepObserver& observer = {});

/// Top-fraction 0/1 mask over trainable coordinates ranked by
/// |grad L_f(theta0)| on the whole forget split; ties keep lower
/// (name, index) first.
NamedTensors saliency_mask(const ParamSet& theta0, const model::ModelConfig& config,
                           std::span<const data::Fact> forget, double fraction);

}  // namespace qforget::unlearn
