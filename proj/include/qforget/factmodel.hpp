#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qforget/autodiff.hpp"
#include "qforget/datagen.hpp"
#include "qforget/params.hpp"

namespace qforget::model {

/// concat(entity emb, attribute emb) -> linear -> GELU -> linear -> GELU ->
/// linear -> logits over values. Each adapter target carries a low-rank
/// pair. On a linear layer: y = x W^T + scale * (x A^T) B^T with A: r x in
/// (random) and B: out x r (zero). On the entity table: E[e] + scale * B
/// A[:, e] with A: r x vocab (zero) and B: embed x r (random).
struct ModelConfig {
  std::size_t entity_vocab = 240;
  std::size_t attribute_vocab = 10;
  std::size_t value_vocab = 64;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 128;
  std::size_t adapter_rank = 4;
  double adapter_scale = 2.0;
  /// Any of "layer1", "layer2", "head", "embed.entity". Empty: no adapters.
  std::vector<std::string> adapter_targets{"layer1", "layer2", "head"};
  std::uint64_t seed = 42;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Names of the three linear layers, input to output.
inline constexpr const char* kLayers[] = {"layer1", "layer2", "head"};
std::string weight_name(const std::string& layer);
std::string adapter_a_name(const std::string& layer);
std::string adapter_b_name(const std::string& layer);
inline constexpr const char* kEntityEmbedding = "embed.entity";
inline constexpr const char* kAttributeEmbedding = "embed.attribute";

/// Seeded init: linear weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// embeddings U(-1, 1), adapter A like a linear weight, adapter B zero.
ParamSet init_model(const ModelConfig& config);

/// Registers every entry of params as a tape parameter.
std::map<std::string, ad::Var> bind(ad::Tape& tape, const ParamSet& params);

/// Logits (batch x value_vocab) on the tape. Adapters are applied for every
/// layer whose pair is present in vars.
ad::Var forward_logits(const std::map<std::string, ad::Var>& vars, const ModelConfig& config,
                       std::span<const data::Fact> batch);

/// Untaped convenience: logits for a batch.
Tensor logits(const ParamSet& params, const ModelConfig& config, std::span<const data::Fact> batch);

/// Mean softmax cross-entropy of the batch's value tokens (L_f on a forget
/// batch, L_r on a retain batch).
ad::Var mean_loss(const std::map<std::string, ad::Var>& vars, const ModelConfig& config,
                  std::span<const data::Fact> batch);
double mean_loss(const ParamSet& params, const ModelConfig& config, std::span<const data::Fact> batch);

/// Per-example cross-entropy, one value per fact.
std::vector<double> example_losses(const ParamSet& params, const ModelConfig& config,
                                   std::span<const data::Fact> batch);

/// Folds W + scale * B A into each adapted base weight and drops the adapters.
ParamSet merge_adapters(const ParamSet& params, const ModelConfig& config);

}  // namespace qforget::model
