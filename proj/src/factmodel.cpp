#include "qforget/factmodel.hpp"

#include <algorithm>
#include <cmath>

#include "qforget/error.hpp"
#include "qforget/kernels.hpp"
#include "qforget/rng.hpp"

namespace qforget::model {

using kernels::Trans;

void ModelConfig::validate() const {
  if (entity_vocab == 0 || attribute_vocab == 0 || value_vocab == 0 || embed_dim == 0 || hidden_dim == 0) {
    throw ConfigError("model: all dimensions must be positive");
  }
  for (const auto& t : adapter_targets) {
    bool known = t == kEntityEmbedding;
    for (const char* layer : kLayers) known = known || t == layer;
    if (!known) throw ConfigError("model: unknown adapter target '" + t + "'");
  }
  if (!adapter_targets.empty() && adapter_rank == 0) throw ConfigError("model: adapter_rank must be positive");
  if (!std::isfinite(adapter_scale)) throw ConfigError("model: adapter_scale must be finite");
}

std::string weight_name(const std::string& layer) { return layer + ".weight"; }
std::string adapter_a_name(const std::string& layer) { return layer + ".lora_a"; }
std::string adapter_b_name(const std::string& layer) { return layer + ".lora_b"; }

namespace {

struct LayerShape {
  std::size_t out;
  std::size_t in;
};

LayerShape layer_shape(const ModelConfig& c, std::size_t index) {
  switch (index) {
    case 0: return {c.hidden_dim, 2 * c.embed_dim};
    case 1: return {c.hidden_dim, c.hidden_dim};
    default: return {c.value_vocab, c.hidden_dim};
  }
}

Tensor uniform(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

ad::Var linear(const std::map<std::string, ad::Var>& vars, const ModelConfig& config, const std::string& layer,
               ad::Var x) {
  ad::Var y = ad::matmul(x, vars.at(weight_name(layer)), Trans::Yes);
  auto a = vars.find(adapter_a_name(layer));
  auto b = vars.find(adapter_b_name(layer));
  if (a != vars.end() && b != vars.end()) {
    ad::Var low = ad::matmul(ad::matmul(x, a->second, Trans::Yes), b->second, Trans::Yes);
    y = ad::add(y, ad::scale(low, config.adapter_scale));
  }
  return y;
}

}  // namespace

bool has_target(const ModelConfig& config, const std::string& target) {
  return std::find(config.adapter_targets.begin(), config.adapter_targets.end(), target) !=
         config.adapter_targets.end();
}

ParamSet init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  ParamSet params;
  params.add(kEntityEmbedding, uniform(rng, config.entity_vocab, config.embed_dim, 1.0), ParamKind::Embedding);
  params.add(kAttributeEmbedding, uniform(rng, config.attribute_vocab, config.embed_dim, 1.0), ParamKind::Embedding);
  for (std::size_t i = 0; i < std::size(kLayers); ++i) {
    const std::string layer = kLayers[i];
    const LayerShape s = layer_shape(config, i);
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
    params.add(weight_name(layer), uniform(rng, s.out, s.in, bound), ParamKind::Base);
    if (has_target(config, layer)) {
      params.add(adapter_a_name(layer), uniform(rng, config.adapter_rank, s.in, bound), ParamKind::AdapterA);
      params.add(adapter_b_name(layer), Tensor::zeros(s.out, config.adapter_rank), ParamKind::AdapterB);
    }
  }
  // Drawn last so adding the table adapter leaves the other entries unchanged.
  if (has_target(config, kEntityEmbedding)) {
    params.add(adapter_a_name(kEntityEmbedding), Tensor::zeros(config.adapter_rank, config.entity_vocab),
               ParamKind::AdapterA);
    params.add(adapter_b_name(kEntityEmbedding), uniform(rng, config.embed_dim, config.adapter_rank, 1.0),
               ParamKind::AdapterB);
  }
  return params;
}

std::map<std::string, ad::Var> bind(ad::Tape& tape, const ParamSet& params) {
  std::map<std::string, ad::Var> vars;
  for (const auto& [name, e] : params) vars.emplace(name, tape.parameter(name, e.value));
  return vars;
}

ad::Var forward_logits(const std::map<std::string, ad::Var>& vars, const ModelConfig& config,
                       std::span<const data::Fact> batch) {
  if (batch.empty()) throw ShapeError("forward_logits: empty batch");
  std::vector<std::size_t> entities;
  std::vector<std::size_t> attributes;
  entities.reserve(batch.size());
  attributes.reserve(batch.size());
  for (const auto& f : batch) {
    entities.push_back(f.entity);
    attributes.push_back(f.attribute);
  }
  ad::Var entity = ad::embedding(vars.at(kEntityEmbedding), entities);
  auto ea = vars.find(adapter_a_name(kEntityEmbedding));
  auto eb = vars.find(adapter_b_name(kEntityEmbedding));
  if (ea != vars.end() && eb != vars.end()) {
    // Column lookup in A as a one-hot product, then up-projection by B.
    Tensor onehot = Tensor::zeros(batch.size(), config.entity_vocab);
    for (std::size_t i = 0; i < entities.size(); ++i) {
      if (entities[i] >= config.entity_vocab) throw ShapeError("forward_logits: entity index out of range");
      onehot.at(i, entities[i]) = 1.0;
    }
    ad::Var codes = ad::matmul(ea->second.tape().constant(std::move(onehot)), ea->second, Trans::Yes);
    entity = ad::add(entity, ad::scale(ad::matmul(codes, eb->second, Trans::Yes), config.adapter_scale));
  }
  ad::Var x = ad::concat_cols(entity, ad::embedding(vars.at(kAttributeEmbedding), std::move(attributes)));
  x = ad::gelu(linear(vars, config, kLayers[0], x));
  x = ad::gelu(linear(vars, config, kLayers[1], x));
  return linear(vars, config, kLayers[2], x);
}

Tensor logits(const ParamSet& params, const ModelConfig& config, std::span<const data::Fact> batch) {
  ad::Tape tape;
  return forward_logits(bind(tape, params), config, batch).value();
}

ad::Var mean_loss(const std::map<std::string, ad::Var>& vars, const ModelConfig& config,
                  std::span<const data::Fact> batch) {
  if (batch.empty()) throw ShapeError("loss: empty batch");
  std::vector<std::size_t> targets;
  targets.reserve(batch.size());
  for (const auto& f : batch) targets.push_back(f.value);
  return ad::mean(ad::cross_entropy(forward_logits(vars, config, batch), std::move(targets)));
}

double mean_loss(const ParamSet& params, const ModelConfig& config, std::span<const data::Fact> batch) {
  ad::Tape tape;
  return mean_loss(bind(tape, params), config, batch).value().item();
}

std::vector<double> example_losses(const ParamSet& params, const ModelConfig& config,
                                   std::span<const data::Fact> batch) {
  ad::Tape tape;
  std::vector<std::size_t> targets;
  for (const auto& f : batch) targets.push_back(f.value);
  ad::Var ce = ad::cross_entropy(forward_logits(bind(tape, params), config, batch), std::move(targets));
  auto v = ce.value().values();
  return {v.begin(), v.end()};
}

ParamSet merge_adapters(const ParamSet& params, const ModelConfig& config) {
  ParamSet out;
  for (const auto& [name, e] : params) {
    if (e.kind == ParamKind::AdapterA || e.kind == ParamKind::AdapterB) continue;
    out.add(name, e.value, e.kind, e.frozen);
  }
  for (const char* layer_cstr : kLayers) {
    const std::string layer = layer_cstr;
    if (!params.contains(adapter_a_name(layer)) || !params.contains(adapter_b_name(layer))) continue;
    const Tensor& a = params.at(adapter_a_name(layer)).value;
    const Tensor& b = params.at(adapter_b_name(layer)).value;
    Tensor& w = out.at(weight_name(layer)).value;
    if (b.rows() != w.rows() || a.cols() != w.cols() || b.cols() != a.rows()) {
      throw ShapeError("merge_adapters: shape mismatch for " + layer);
    }
    Tensor delta = Tensor::zeros(w.rows(), w.cols());
    kernels::gemm(Trans::No, Trans::No, b.rows(), a.cols(), a.rows(), b.values().data(), a.values().data(),
                  delta.values().data());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += config.adapter_scale * delta[i];
  }
  const std::string table = kEntityEmbedding;
  if (params.contains(adapter_a_name(table)) && params.contains(adapter_b_name(table))) {
    const Tensor& a = params.at(adapter_a_name(table)).value;  // r x vocab
    const Tensor& b = params.at(adapter_b_name(table)).value;  // embed x r
    Tensor& e = out.at(table).value;                            // vocab x embed
    if (a.cols() != e.rows() || b.rows() != e.cols() || b.cols() != a.rows()) {
      throw ShapeError("merge_adapters: shape mismatch for " + table);
    }
    Tensor delta = Tensor::zeros(e.rows(), e.cols());
    kernels::gemm(Trans::Yes, Trans::Yes, a.cols(), b.rows(), a.rows(), a.values().data(), b.values().data(),
                  delta.values().data());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += config.adapter_scale * delta[i];
  }
  return out;
}

}  // namespace qforget::model
