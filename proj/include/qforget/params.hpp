#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qforget/tensor.hpp"

namespace qforget {

/// Embedding tables are base weights that are not linear layers; they are
/// kept apart so quantization scopes can follow the linear-layers-only
/// deployment convention.
enum class ParamKind { Base, AdapterA, AdapterB, Embedding };

const char* kind_name(ParamKind kind);
ParamKind parse_kind(const std::string& text);

struct ParamEntry {
  Tensor value;
  bool frozen = false;
  ParamKind kind = ParamKind::Base;

  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

/// Named weight matrices with frozen/adapter metadata. Value semantic:
/// copies are deep and independent.
class ParamSet {
 public:
  using Map = std::map<std::string, ParamEntry>;

  void add(const std::string& name, Tensor value, ParamKind kind = ParamKind::Base, bool frozen = false);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const ParamEntry& at(const std::string& name) const;
  ParamEntry& at(const std::string& name);
  void erase(const std::string& name) { entries_.erase(name); }

  const Map& entries() const { return entries_; }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  bool has_adapters() const;
  bool is_adapter(const std::string& name) const;
  /// Freezes base entries and unfreezes adapters (adapter-only training),
  /// or unfreezes everything.
  void set_trainable(bool adapters_only);
  std::vector<std::string> trainable_names() const;
  std::size_t element_count() const;

  NamedTensors values() const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  Map entries_;
};

/// Euclidean norm of (a - b) over entries selected by the predicate.
double distance(const ParamSet& a, const ParamSet& b, bool trainable_only);

/// Binary container of named 64-bit matrices plus a plain-text manifest
/// sidecar (<path>.manifest). Bit-exact round trip.
void save_params(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path);

}  // namespace qforget
