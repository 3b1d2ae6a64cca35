#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qforget/datagen.hpp"
#include "qforget/factmodel.hpp"
#include "qforget/params.hpp"
#include "qforget/quantsim.hpp"
#include "qforget/unlearn.hpp"

namespace qforget::attacks {

enum class AttackKind { Quant, Finetune };
const char* attack_kind_name(AttackKind k);

struct TrajectoryPoint {
  std::size_t step = 0;
  double fa = 0.0;
  double ra = 0.0;
};

struct FinetuneConfig {
  std::size_t steps = 50;
  double lr = 2e-5;
  std::size_t batch_size = 4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t record_every = 10;
  unlearn::TrainScope train_scope = unlearn::TrainScope::Adapters;
  std::uint64_t seed = 42;
  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

struct AttackOutcome {
  AttackKind kind = AttackKind::Quant;
  double fa_before = 0.0;
  double fa_after = 0.0;
  double ra_before = 0.0;
  double ra_after = 0.0;
  std::vector<TrajectoryPoint> trajectory;  // finetune only; includes step 0
  std::optional<quant::QuantSpec> spec;
  std::optional<FinetuneConfig> finetune;
};

/// Zero-step recovery: FA and RA of quantize(theta, spec).
AttackOutcome quant_attack(const ParamSet& theta, const model::ModelConfig& config, const quant::QuantSpec& spec,
                           std::span<const data::Fact> forget, std::span<const data::Fact> retain);

/// Fine-tunes a copy of theta on facts that share no entity with the
/// forget split, recording FA and RA every record_every steps and at the
/// end. Throws ConfigError on overlap and NumericError on divergence.
AttackOutcome finetune_attack(const ParamSet& theta, const model::ModelConfig& config,
                              std::span<const data::Fact> unrelated, std::span<const data::Fact> forget,
                              std::span<const data::Fact> retain, const FinetuneConfig& finetune);

/// quant_attack on the unmerged model with the adapters-only scope, and on
/// merge_adapters(theta) with the merged-model scope. spec.scope is ignored.
std::pair<AttackOutcome, AttackOutcome> adapter_vs_merged(const ParamSet& theta, const model::ModelConfig& config,
                                                          const quant::QuantSpec& spec,
                                                          std::span<const data::Fact> forget,
                                                          std::span<const data::Fact> retain);

/// step,fa,ra rows.
std::string trajectory_csv(const AttackOutcome& outcome);

}  // namespace qforget::attacks
