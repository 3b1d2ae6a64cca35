#include "qforget/datagen.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

#include "qforget/error.hpp"

namespace qforget::data {

const char* split_name(Split s) {
  switch (s) {
    case Split::Forget: return "forget";
    case Split::Retain: return "retain";
    case Split::Holdout: return "holdout";
  }
  return "retain";
}

FactDataset FactDataset::generate(const DatasetConfig& config) {
  if (config.n_attributes == 0) throw ConfigError("dataset: n_attributes must be positive");
  if (config.value_vocab < 2) throw ConfigError("dataset: value_vocab must be at least 2");
  if (config.forget_entities + config.holdout_entities >= config.n_entities) {
    throw ConfigError("dataset: forget_entities + holdout_entities must be below n_entities");
  }
  FactDataset ds;
  ds.config_ = config;
  Rng rng(config.seed);
  const std::size_t holdout_start = config.n_entities - config.holdout_entities;
  for (std::size_t e = 0; e < config.n_entities; ++e) {
    for (std::size_t a = 0; a < config.n_attributes; ++a) {
      const std::size_t index = ds.facts_.size();
      ds.facts_.push_back({config.entity_offset + e, a, rng.uniform_index(config.value_vocab)});
      if (e < config.forget_entities) {
        ds.forget_.push_back(index);
      } else if (e < holdout_start) {
        ds.retain_.push_back(index);
      } else {
        ds.holdout_.push_back(index);
      }
    }
  }
  return ds;
}

std::span<const std::size_t> FactDataset::split(Split s) const {
  switch (s) {
    case Split::Forget: return forget_;
    case Split::Retain: return retain_;
    case Split::Holdout: return holdout_;
  }
  return retain_;
}

std::vector<Fact> FactDataset::split_facts(Split s) const {
  std::vector<Fact> out;
  for (std::size_t i : split(s)) out.push_back(facts_[i]);
  return out;
}

std::vector<Fact> FactDataset::trained_facts() const {
  std::vector<Fact> out = split_facts(Split::Forget);
  for (std::size_t i : retain_) out.push_back(facts_[i]);
  return out;
}

std::string FactDataset::to_csv() const {
  std::vector<const char*> label(facts_.size(), "");
  for (std::size_t i : forget_) label[i] = "forget";
  for (std::size_t i : retain_) label[i] = "retain";
  for (std::size_t i : holdout_) label[i] = "holdout";
  std::ostringstream out;
  out << "entity,attribute,value,split\n";
  for (std::size_t i = 0; i < facts_.size(); ++i) {
    out << facts_[i].entity << ',' << facts_[i].attribute << ',' << facts_[i].value << ',' << label[i] << '\n';
  }
  return out.str();
}

void FactDataset::export_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_csv();
}

BatchSampler::BatchSampler(std::vector<Fact> items, std::size_t batch_size, std::uint64_t seed)
    : items_(std::move(items)), batch_size_(batch_size), rng_(seed) {
  if (items_.empty()) throw ConfigError("batch sampler: split is empty");
  if (batch_size_ == 0) throw ConfigError("batch sampler: batch size must be positive");
  order_.resize(items_.size());
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  rng_.shuffle(std::span(order_));
  cursor_ = 0;
}

std::vector<Fact> BatchSampler::next() {
  if (cursor_ >= order_.size()) {
    reshuffle();
    ++epoch_;
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  std::vector<Fact> batch;
  batch.reserve(end - cursor_);
  for (std::size_t i = cursor_; i < end; ++i) batch.push_back(items_[order_[i]]);
  cursor_ = end;
  return batch;
}

}  // namespace qforget::data
