#include "qforget/quantsim.hpp"

#include <algorithm>
#include <cmath>

#include "qforget/error.hpp"
#include "qforget/kernels.hpp"

namespace qforget::quant {

const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PerRow: return "per-row";
    case Granularity::Global: return "global";
    case Granularity::PerTensor: return "per-tensor";
  }
  return "per-row";
}

const char* scope_name(Scope s) {
  switch (s) {
    case Scope::None: return "none";
    case Scope::AdaptersOnly: return "adapters-only";
    case Scope::AllTrainable: return "all-trainable";
    case Scope::MergedModel: return "merged-model";
  }
  return "none";
}

Granularity parse_granularity(const std::string& text) {
  if (text == "per-row") return Granularity::PerRow;
  if (text == "global") return Granularity::Global;
  if (text == "per-tensor") return Granularity::PerTensor;
  throw ConfigError("unknown quantization granularity '" + text + "'");
}

Scope parse_scope(const std::string& text) {
  if (text == "none") return Scope::None;
  if (text == "adapters-only") return Scope::AdaptersOnly;
  if (text == "all-trainable") return Scope::AllTrainable;
  if (text == "merged-model") return Scope::MergedModel;
  throw ConfigError("unknown quantization scope '" + text + "'");
}

void QuantSpec::validate() const {
  if (bits != 4 && bits != 8) throw ConfigError("quantization bits must be 4 or 8, got " + std::to_string(bits));
}

bool in_scope(const ParamEntry& entry, Scope scope) {
  switch (scope) {
    case Scope::None: return false;
    case Scope::AdaptersOnly: return entry.kind == ParamKind::AdapterA || entry.kind == ParamKind::AdapterB;
    case Scope::AllTrainable: return entry.kind != ParamKind::Embedding;
    case Scope::MergedModel: return entry.kind == ParamKind::Base;
  }
  return false;
}

std::vector<std::string> scope_names(const ParamSet& params, Scope scope) {
  std::vector<std::string> out;
  for (const auto& [name, e] : params) {
    if (in_scope(e, scope)) out.push_back(name);
  }
  return out;
}

namespace {

void quantize_in_place(Tensor& t, const QuantSpec& spec, double scope_max) {
  switch (spec.granularity) {
    case Granularity::PerRow:
      kernels::fake_quantize_rows(t.values(), t.shape().back(), spec.max_level());
      return;
    case Granularity::PerTensor:
      kernels::fake_quantize_range(t.values(), kernels::max_abs(t.values()), spec.max_level());
      return;
    case Granularity::Global:
      kernels::fake_quantize_range(t.values(), scope_max, spec.max_level());
      return;
  }
}

}  // namespace

ParamSet quantize(const ParamSet& params, const QuantSpec& spec) {
  spec.validate();
  ParamSet out = params;
  const auto names = scope_names(params, spec.scope);
  double scope_max = 0.0;
  if (spec.granularity == Granularity::Global) {
    for (const auto& name : names) scope_max = std::max(scope_max, kernels::max_abs(params.at(name).value.values()));
  }
  for (const auto& name : names) quantize_in_place(out.at(name).value, spec, scope_max);
  return out;
}

Tensor quantize_matrix(const Tensor& matrix, const QuantSpec& spec) {
  spec.validate();
  Tensor out = matrix;
  quantize_in_place(out, spec, kernels::max_abs(matrix.values()));
  return out;
}

NoiseStats noise_stats(const ParamSet& original, const ParamSet& quantized, Scope scope) {
  NoiseStats stats;
  double diff_sq = 0.0;
  double norm_sq = 0.0;
  if (original.size() != quantized.size()) throw ShapeError("noise_stats: parameter sets have different entries");
  for (const auto& [name, e] : original) {
    if (!quantized.contains(name)) throw ShapeError("noise_stats: '" + name + "' missing from quantized set");
    const Tensor& q = quantized.at(name).value;
    if (q.shape() != e.value.shape()) {
      throw ShapeError("noise_stats: shape mismatch for '" + name + "' " + shape_string(e.value.shape()) + " vs " +
                       shape_string(q.shape()));
    }
    if (!in_scope(e, scope)) continue;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double d = q[i] - e.value[i];
      stats.delta_inf = std::max(stats.delta_inf, std::abs(d));
      diff_sq += d * d;
      norm_sq += e.value[i] * e.value[i];
    }
  }
  stats.delta_2 = std::sqrt(diff_sq);
  stats.relative_2 = norm_sq > 0.0 ? stats.delta_2 / std::sqrt(norm_sq) : 0.0;
  return stats;
}

double max_half_step(const ParamSet& params, const QuantSpec& spec) {
  const auto names = scope_names(params, spec.scope);
  double largest = 0.0;
  for (const auto& name : names) {
    const Tensor& t = params.at(name).value;
    if (spec.granularity == Granularity::PerRow) {
      const std::size_t cols = t.shape().back();
      for (std::size_t r = 0; r < t.size() / cols; ++r) {
        largest = std::max(largest, kernels::max_abs(t.values().subspan(r * cols, cols)));
      }
    } else {
      largest = std::max(largest, kernels::max_abs(t.values()));
    }
  }
  // For global granularity the scope-wide max is the largest tensor max.
  return largest / spec.max_level() / 2.0;
}

std::map<std::string, ad::Var> ste_quantize(const std::map<std::string, ad::Var>& vars, const ParamSet& params,
                                            const QuantSpec& spec) {
  const ParamSet q = quantize(params, spec);
  std::map<std::string, ad::Var> out = vars;
  for (const auto& name : scope_names(params, spec.scope)) {
    auto it = out.find(name);
    if (it == out.end()) continue;
    it->second = ad::straight_through(it->second, q.at(name).value);
  }
  return out;
}

}  // namespace qforget::quant
