#pragma once

#include <map>
#include <string>
#include <vector>

#include "qforget/autodiff.hpp"
#include "qforget/params.hpp"

namespace qforget::quant {

enum class Granularity { PerRow, Global, PerTensor };
enum class Rounding { HalfAwayFromZero };
/// Which matrices a spec perturbs. Only linear-layer weights are ever
/// quantized; embedding tables are left at full precision. None is the
/// identity (control arm). AllTrainable covers base and adapter linear
/// weights; MergedModel covers base linear weights, which on a merged
/// model is every linear weight.
enum class Scope { None, AdaptersOnly, AllTrainable, MergedModel };

const char* granularity_name(Granularity g);
const char* scope_name(Scope s);
Granularity parse_granularity(const std::string& text);
Scope parse_scope(const std::string& text);

struct QuantSpec {
  int bits = 4;
  Granularity granularity = Granularity::PerRow;
  Rounding rounding = Rounding::HalfAwayFromZero;
  Scope scope = Scope::AllTrainable;

  /// 2^(bits-1) - 1: 7 for INT4, 127 for INT8.
  int max_level() const { return (1 << (bits - 1)) - 1; }
  /// Throws ConfigError unless bits is 4 or 8.
  void validate() const;

  /// Per-row INT4 (the default granularity for 4 bits).
  static QuantSpec int4(Scope scope = Scope::AllTrainable) { return {4, Granularity::PerRow, Rounding::HalfAwayFromZero, scope}; }
  /// INT8 with a single scale over the whole scope.
  static QuantSpec int8(Scope scope = Scope::AllTrainable) { return {8, Granularity::Global, Rounding::HalfAwayFromZero, scope}; }

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

bool in_scope(const ParamEntry& entry, Scope scope);
std::vector<std::string> scope_names(const ParamSet& params, Scope scope);

/// Dequantized image of params under spec. Out-of-scope entries and
/// all-zero rows (or an all-zero scope) pass through unchanged.
ParamSet quantize(const ParamSet& params, const QuantSpec& spec);

/// Same, for a bare matrix (treated as a single-entry scope).
Tensor quantize_matrix(const Tensor& matrix, const QuantSpec& spec);

struct NoiseStats {
  double delta_inf = 0.0;   // max |q - w|
  double delta_2 = 0.0;     // ||q - w||_2
  double relative_2 = 0.0;  // delta_2 / ||w||_2 (0 when ||w|| = 0)
};

/// Perturbation norms over the entries selected by scope.
NoiseStats noise_stats(const ParamSet& original, const ParamSet& quantized, Scope scope = Scope::AllTrainable);

/// Largest per-row half step s_r / 2 over the scope (per-row granularity),
/// or s / 2 for the scope-wide / per-tensor scales.
double max_half_step(const ParamSet& params, const QuantSpec& spec);

/// Straight-through quantization of the tape variables for params: in-scope
/// entries are replaced by nodes whose forward value is quantize(params)
/// and whose backward is the identity. Out-of-scope variables are returned
/// unchanged.
std::map<std::string, ad::Var> ste_quantize(const std::map<std::string, ad::Var>& vars, const ParamSet& params,
                                            const QuantSpec& spec);

}  // namespace qforget::quant
