#include "qforget/attacks.hpp"

#include <set>
#include <sstream>

#include "qforget/error.hpp"
#include "qforget/evalsuite.hpp"
#include "qforget/optim.hpp"
#include "qforget/rng.hpp"

namespace qforget::attacks {

const char* attack_kind_name(AttackKind k) { return k == AttackKind::Quant ? "quant" : "finetune"; }

AttackOutcome quant_attack(const ParamSet& theta, const model::ModelConfig& config, const quant::QuantSpec& spec,
                           std::span<const data::Fact> forget, std::span<const data::Fact> retain) {
  AttackOutcome out;
  out.kind = AttackKind::Quant;
  out.spec = spec;
  out.fa_before = eval::accuracy(theta, config, forget);
  out.ra_before = eval::accuracy(theta, config, retain);
  const ParamSet q = quant::quantize(theta, spec);
  out.fa_after = eval::accuracy(q, config, forget);
  out.ra_after = eval::accuracy(q, config, retain);
  return out;
}

AttackOutcome finetune_attack(const ParamSet& theta, const model::ModelConfig& config,
                              std::span<const data::Fact> unrelated, std::span<const data::Fact> forget,
                              std::span<const data::Fact> retain, const FinetuneConfig& ft) {
  if (ft.record_every == 0) throw ConfigError("finetune.record_every must be positive");
  std::set<std::size_t> forget_entities;
  for (const auto& f : forget) forget_entities.insert(f.entity);
  for (const auto& f : unrelated) {
    if (forget_entities.count(f.entity)) {
      throw ConfigError("finetune attack data shares entity " + std::to_string(f.entity) + " with the forget split");
    }
  }

  AttackOutcome out;
  out.kind = AttackKind::Finetune;
  out.finetune = ft;
  out.fa_before = eval::accuracy(theta, config, forget);
  out.ra_before = eval::accuracy(theta, config, retain);
  out.trajectory.push_back({0, out.fa_before, out.ra_before});
  out.fa_after = out.fa_before;
  out.ra_after = out.ra_before;
  if (ft.steps == 0) return out;

  ParamSet params = theta;
  unlearn::apply_train_scope(params, ft.train_scope);
  optim::AdamWConfig oc;
  oc.lr = ft.lr;
  oc.weight_decay = ft.weight_decay;
  oc.clip_norm = ft.clip_norm;
  oc.total_steps = ft.steps;
  optim::AdamW opt(oc);
  data::BatchSampler sampler({unrelated.begin(), unrelated.end()}, ft.batch_size, derive_seed(ft.seed, 4));
  for (std::size_t step = 1; step <= ft.steps; ++step) {
    const auto batch = sampler.next();
    try {
      ad::Tape tape;
      opt.step(params, tape.backward(model::mean_loss(model::bind(tape, params), config, batch)));
    } catch (const NumericError& e) {
      throw NumericError("finetune attack diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (step % ft.record_every == 0 || step == ft.steps) {
      out.trajectory.push_back(
          {step, eval::accuracy(params, config, forget), eval::accuracy(params, config, retain)});
    }
  }
  out.fa_after = out.trajectory.back().fa;
  out.ra_after = out.trajectory.back().ra;
  return out;
}

std::pair<AttackOutcome, AttackOutcome> adapter_vs_merged(const ParamSet& theta, const model::ModelConfig& config,
                                                          const quant::QuantSpec& spec,
                                                          std::span<const data::Fact> forget,
                                                          std::span<const data::Fact> retain) {
  if (!theta.has_adapters()) throw ConfigError("adapter_vs_merged needs a checkpoint with adapters");
  quant::QuantSpec adapter_spec = spec;
  quant::QuantSpec merged_spec = spec;
  if (spec.scope != quant::Scope::None) {
    adapter_spec.scope = quant::Scope::AdaptersOnly;
    merged_spec.scope = quant::Scope::MergedModel;
  }
  AttackOutcome adapter = quant_attack(theta, config, adapter_spec, forget, retain);
  AttackOutcome merged = quant_attack(model::merge_adapters(theta, config), config, merged_spec, forget, retain);
  return {std::move(adapter), std::move(merged)};
}

std::string trajectory_csv(const AttackOutcome& outcome) {
  std::ostringstream os;
  os.precision(17);
  os << "step,fa,ra\n";
  for (const auto& p : outcome.trajectory) os << p.step << ',' << p.fa << ',' << p.ra << '\n';
  return os.str();
}

}  // namespace qforget::attacks
