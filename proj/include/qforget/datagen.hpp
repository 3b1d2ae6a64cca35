#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qforget/rng.hpp"

namespace qforget::data {

/// (entity, attribute) -> value token triple.
struct Fact {
  std::size_t entity = 0;
  std::size_t attribute = 0;
  std::size_t value = 0;
  friend bool operator==(const Fact&, const Fact&) = default;
};

enum class Split { Forget, Retain, Holdout };
const char* split_name(Split s);

struct DatasetConfig {
  std::size_t n_entities = 220;
  std::size_t n_attributes = 10;
  std::size_t value_vocab = 64;
  std::size_t forget_entities = 20;
  std::size_t holdout_entities = 20;
  /// First entity token; lets an unrelated corpus occupy a disjoint range.
  std::size_t entity_offset = 0;
  std::uint64_t seed = 7;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// Seeded facts with forget/retain/holdout splits over entity ranges:
/// [0, forget) forget, [forget, n - holdout) retain, [n - holdout, n)
/// holdout (never trained). Every (entity, attribute) pair gets an
/// independently drawn value token.
class FactDataset {
 public:
  static FactDataset generate(const DatasetConfig& config);

  const DatasetConfig& config() const { return config_; }
  const std::vector<Fact>& facts() const { return facts_; }
  std::span<const std::size_t> split(Split s) const;
  std::vector<Fact> split_facts(Split s) const;
  /// forget + retain, in fact order.
  std::vector<Fact> trained_facts() const;

  /// entity,attribute,value,split rows in fact order.
  std::string to_csv() const;
  void export_csv(const std::filesystem::path& path) const;

 private:
  DatasetConfig config_;
  std::vector<Fact> facts_;
  std::vector<std::size_t> forget_;
  std::vector<std::size_t> retain_;
  std::vector<std::size_t> holdout_;
};

/// Seeded shuffled cycling over a split. Each pass is a fresh permutation;
/// the last batch of a pass may be short.
class BatchSampler {
 public:
  BatchSampler(std::vector<Fact> items, std::size_t batch_size, std::uint64_t seed);

  std::vector<Fact> next();
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::vector<Fact> items_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  Rng rng_;
};

}  // namespace qforget::data
