#include "qforget/unlearn.hpp"

#include <algorithm>
#include <cmath>

#include "qforget/error.hpp"
#include "qforget/rng.hpp"

namespace qforget::unlearn {

namespace {

// Stream tags for derive_seed; fixed so every method sees the same batches.
constexpr std::uint64_t kForgetStream = 1;
constexpr std::uint64_t kRetainStream = 2;
constexpr std::uint64_t kPretrainStream = 3;

std::vector<double> log_softmax_row_major(const Tensor& logits) {
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    for (std::size_t j = 0; j < z.size(); ++j) out[i * z.size() + j] = z[j] - lse;
  }
  return out;
}

std::vector<std::size_t> targets_of(std::span<const data::Fact> batch) {
  std::vector<std::size_t> t;
  t.reserve(batch.size());
  for (const auto& f : batch) t.push_back(f.value);
  return t;
}

template <typename Fn>
void with_step_context(std::size_t step, Fn&& fn) {
  try {
    fn();
  } catch (const NumericError& e) {
    throw NumericError("diverged at step " + std::to_string(step) + ": " + e.what());
  }
}

}  // namespace

ParamSet pretrain(const model::ModelConfig& config, const data::FactDataset& dataset, const PretrainConfig& pretrain) {
  model::ModelConfig seeded = config;
  seeded.seed = pretrain.seed;
  ParamSet params = model::init_model(seeded);
  if (pretrain.epochs == 0) return params;

  // Adapter B starts at zero; freezing the pairs keeps the delta at zero.
  for (const auto& name : params.trainable_names()) {
    if (!pretrain.train_adapters && params.is_adapter(name)) params.at(name).frozen = true;
  }

  const std::vector<data::Fact> facts = dataset.trained_facts();
  data::BatchSampler sampler(facts, pretrain.batch_size, derive_seed(pretrain.seed, kPretrainStream));
  const std::size_t steps_per_epoch = (facts.size() + pretrain.batch_size - 1) / pretrain.batch_size;
  optim::AdamWConfig oc;
  oc.lr = pretrain.lr;
  oc.weight_decay = pretrain.weight_decay;
  oc.clip_norm = pretrain.clip_norm;
  oc.total_steps = steps_per_epoch * pretrain.epochs;
  optim::AdamW opt(oc);
  for (std::size_t step = 1; step <= oc.total_steps; ++step) {
    const auto batch = sampler.next();
    with_step_context(step, [&] {
      ad::Tape tape;
      ad::Var loss = model::mean_loss(model::bind(tape, params), config, batch);
      opt.step(params, tape.backward(loss));
    });
  }
  // Unlearning decides its own trainable scope.
  params.set_trainable(false);
  return params;
}

const char* method_name(Method m) {
  switch (m) {
    case Method::GA: return "GA";
    case Method::GradDiff: return "GradDiff";
    case Method::NPO: return "NPO";
    case Method::SCRUB: return "SCRUB";
    case Method::SalUn: return "SalUn";
    case Method::TaskArith: return "TaskArith";
    case Method::SAF: return "SAF";
  }
  return "GA";
}

Method parse_method(const std::string& text) {
  for (Method m : {Method::GA, Method::GradDiff, Method::NPO, Method::SCRUB, Method::SalUn, Method::TaskArith,
                   Method::SAF}) {
    if (text == method_name(m)) return m;
  }
  throw ConfigError("unknown method '" + text + "'");
}

const char* train_scope_name(TrainScope s) {
  switch (s) {
    case TrainScope::Adapters: return "adapters";
    case TrainScope::Linear: return "linear";
    case TrainScope::All: return "all";
  }
  return "adapters";
}

TrainScope parse_train_scope(const std::string& text) {
  for (TrainScope s : {TrainScope::Adapters, TrainScope::Linear, TrainScope::All}) {
    if (text == train_scope_name(s)) return s;
  }
  throw ConfigError("unknown train scope '" + text + "'");
}

void apply_train_scope(ParamSet& params, TrainScope scope) {
  if (scope == TrainScope::Adapters && !params.has_adapters()) {
    throw ConfigError("adapter-only unlearning requested but the checkpoint has no adapters");
  }
  params.set_trainable(scope == TrainScope::Adapters);
  if (scope == TrainScope::Linear) {
    for (const auto& name : params.trainable_names()) {
      if (params.at(name).kind == ParamKind::Embedding) params.at(name).frozen = true;
    }
  }
}

double alpha_schedule(std::size_t t, std::size_t warmup, std::size_t total_steps, double alpha_max) {
  if (t <= warmup) return 0.0;
  const double ramp = 2.0 * alpha_max * static_cast<double>(t - warmup) / static_cast<double>(total_steps - warmup);
  return std::min(alpha_max, ramp);
}

double default_lambda(double alpha_max) { return std::max(1.0, alpha_max + 1.0); }

double MethodConfig::effective_lambda() const {
  if (lambda) return *lambda;
  return method == Method::SAF ? default_lambda(alpha_max) : 1.0;
}

void MethodConfig::validate() const {
  if (optimizer.total_steps == 0) throw ConfigError("method.total_steps must be positive");
  if (batch_size == 0) throw ConfigError("method.batch_size must be positive");
  if (!(optimizer.lr >= 0.0)) throw ConfigError("method.lr must be non-negative");
  if (lambda && !std::isfinite(*lambda)) throw ConfigError("method.lambda must be finite");
  switch (method) {
    case Method::NPO:
      if (!(npo_beta > 0.0)) throw ConfigError("method.npo_beta must be positive");
      break;
    case Method::SalUn:
      if (!(salun_fraction > 0.0 && salun_fraction <= 1.0)) {
        throw ConfigError("method.salun_fraction must be in (0, 1]");
      }
      break;
    case Method::SCRUB:
      if (!(scrub_kl_weight >= 0.0)) throw ConfigError("method.scrub_kl_weight must be non-negative");
      break;
    case Method::TaskArith:
      if (!std::isfinite(taskarith_eta)) throw ConfigError("method.taskarith_eta must be finite");
      if (taskarith_ft_steps == 0) throw ConfigError("method.taskarith_ft_steps must be positive");
      break;
    case Method::SAF:
      if (!(alpha_max >= 0.0)) throw ConfigError("method.alpha_max must be non-negative");
      if (warmup >= optimizer.total_steps) throw ConfigError("method.warmup must be below total_steps");
      if (ste_bits != 4 && ste_bits != 8) throw ConfigError("method.ste_bits must be 4 or 8");
      if (ste_scope != quant::Scope::AdaptersOnly && ste_scope != quant::Scope::AllTrainable) {
        throw ConfigError("method.ste_scope must be adapters-only or all-trainable");
      }
      break;
    default:
      break;
  }
}

void saf_step(ParamSet& params, const model::ModelConfig& config, std::span<const data::Fact> forget_batch,
              std::span<const data::Fact> retain_batch, ObjectiveWeights weights, const quant::QuantSpec& ste_spec,
              optim::AdamW& optimizer, const NamedTensors* mask) {
  ad::Tape tape;
  const auto vars = model::bind(tape, params);
  ad::Var loss = ad::scale(model::mean_loss(vars, config, forget_batch), -1.0);
  if (weights.alpha > 0.0) {
    const auto quantized = quant::ste_quantize(vars, params, ste_spec);
    loss = ad::add(loss, ad::scale(model::mean_loss(quantized, config, forget_batch), -weights.alpha));
  }
  if (weights.lambda != 0.0) {
    loss = ad::add(loss, ad::scale(model::mean_loss(vars, config, retain_batch), weights.lambda));
  }
  optimizer.step(params, tape.backward(loss), mask);
}

NamedTensors saliency_mask(const ParamSet& theta0, const model::ModelConfig& config,
                           std::span<const data::Fact> forget, double fraction) {
  ad::Tape tape;
  const NamedTensors grads = tape.backward(model::mean_loss(model::bind(tape, theta0), config, forget));
  struct Coord {
    double magnitude;
    const std::string* name;
    std::size_t index;
  };
  std::vector<Coord> coords;
  NamedTensors mask;
  for (const auto& name : theta0.trainable_names()) {
    const Tensor& g = grads.at(name);
    mask.emplace(name, Tensor::zeros_like(g));
    for (std::size_t i = 0; i < g.size(); ++i) coords.push_back({std::abs(g[i]), &mask.find(name)->first, i});
  }
  // coords are already in (name, index) order, so a stable sort on
  // magnitude alone keeps the documented tie order.
  std::stable_sort(coords.begin(), coords.end(),
                   [](const Coord& a, const Coord& b) { return a.magnitude > b.magnitude; });
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(coords.size())));
  for (std::size_t k = 0; k < std::min(keep, coords.size()); ++k) mask.at(*coords[k].name)[coords[k].index] = 1.0;
  return mask;
}

namespace {

ParamSet run_task_arithmetic(const MethodConfig& mc, const ParamSet& theta0, const model::ModelConfig& config,
                             const data::FactDataset& dataset, const StepObserver& observer) {
  // Auxiliary fine-tune on the forget split, then subtract eta times the
  // resulting task vector.
  ParamSet tuned = theta0;
  optim::AdamWConfig oc = mc.optimizer;
  oc.total_steps = mc.taskarith_ft_steps;
  optim::AdamW opt(oc);
  data::BatchSampler forget(dataset.split_facts(data::Split::Forget), mc.batch_size,
                            derive_seed(mc.seed, kForgetStream));
  for (std::size_t step = 1; step <= oc.total_steps; ++step) {
    const auto batch = forget.next();
    with_step_context(step, [&] {
      ad::Tape tape;
      opt.step(tuned, tape.backward(model::mean_loss(model::bind(tape, tuned), config, batch)));
    });
  }
  ParamSet out = theta0;
  for (const auto& name : out.trainable_names()) {
    Tensor& w = out.at(name).value;
    const Tensor& base = theta0.at(name).value;
    const Tensor& ft = tuned.at(name).value;
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = base[i] - mc.taskarith_eta * (ft[i] - base[i]);
  }
  if (observer) observer(mc.total_steps(), out);
  return out;
}

}  // namespace

ParamSet run_method(const MethodConfig& mc, const ParamSet& theta0, const model::ModelConfig& config,
                    const data::FactDataset& dataset, const StepObserver& observer) {
  mc.validate();
  ParamSet params = theta0;
  apply_train_scope(params, mc.train_scope);

  if (mc.method == Method::TaskArith) return run_task_arithmetic(mc, params, config, dataset, observer);

  const auto forget_facts = dataset.split_facts(data::Split::Forget);
  const auto retain_facts = dataset.split_facts(data::Split::Retain);
  data::BatchSampler forget(forget_facts, mc.batch_size, derive_seed(mc.seed, kForgetStream));
  data::BatchSampler retain(retain_facts, mc.batch_size, derive_seed(mc.seed, kRetainStream));
  optim::AdamW opt(mc.optimizer);
  const double lambda = mc.effective_lambda();
  const quant::QuantSpec ste_spec = mc.ste_bits == 4 ? quant::QuantSpec::int4(mc.ste_scope)
                                                     : quant::QuantSpec::int8(mc.ste_scope);

  NamedTensors mask;
  if (mc.method == Method::SalUn) mask = saliency_mask(params, config, forget_facts, mc.salun_fraction);
  const ParamSet reference = params;  // frozen theta0 for NPO / SCRUB

  for (std::size_t t = 1; t <= mc.total_steps(); ++t) {
    const auto bf = forget.next();
    const auto br = retain.next();
    with_step_context(t, [&] {
      switch (mc.method) {
        case Method::GA:
          saf_step(params, config, bf, br, {0.0, 0.0}, ste_spec, opt);
          break;
        case Method::GradDiff:
          saf_step(params, config, bf, br, {0.0, lambda}, ste_spec, opt);
          break;
        case Method::SalUn:
          saf_step(params, config, bf, br, {0.0, lambda}, ste_spec, opt, &mask);
          break;
        case Method::SAF: {
          const double alpha = mc.warmup_enabled ? alpha_schedule(t, mc.warmup, mc.total_steps(), mc.alpha_max)
                                                 : mc.alpha_max;
          saf_step(params, config, bf, br, {alpha, lambda}, ste_spec, opt);
          break;
        }
        case Method::NPO: {
          // (2/beta) mean softplus(beta (log p_theta - log p_ref)) + lambda L_r
          const std::vector<double> ref_ce = model::example_losses(reference, config, bf);
          Tensor ref_term = Tensor::zeros(bf.size(), 1);
          for (std::size_t i = 0; i < bf.size(); ++i) ref_term[i] = mc.npo_beta * ref_ce[i];
          ad::Tape tape;
          const auto vars = model::bind(tape, params);
          ad::Var ce = ad::cross_entropy(model::forward_logits(vars, config, bf), targets_of(bf));
          ad::Var margin = ad::add(ad::scale(ce, -mc.npo_beta), tape.constant(std::move(ref_term)));
          ad::Var loss = ad::scale(ad::mean(ad::softplus(margin)), 2.0 / mc.npo_beta);
          if (lambda != 0.0) loss = ad::add(loss, ad::scale(model::mean_loss(vars, config, br), lambda));
          opt.step(params, tape.backward(loss));
          break;
        }
        case Method::SCRUB: {
          const Tensor ref_logits = model::logits(reference, config, br);
          Tensor ref_log_probs(ref_logits.shape(), log_softmax_row_major(ref_logits));
          ad::Tape tape;
          const auto vars = model::bind(tape, params);
          ad::Var loss = ad::scale(model::mean_loss(vars, config, bf), -1.0);
          ad::Var kl = ad::mean(ad::softmax_kl(model::forward_logits(vars, config, br), std::move(ref_log_probs)));
          loss = ad::add(loss, ad::scale(kl, mc.scrub_kl_weight));
          opt.step(params, tape.backward(loss));
          break;
        }
        case Method::TaskArith:
          break;
      }
    });
    if (observer) observer(t, params);
  }
  return params;
}

}  // namespace qforget::unlearn
