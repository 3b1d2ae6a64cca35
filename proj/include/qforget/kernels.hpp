#pragma once

// Data-parallel inner loops. Every OpenMP kernel has a serial *_reference
// twin with the same per-element operation order, so the two are
// bit-identical; tests compare them and bench/ times them.

#include <cmath>
#include <cstddef>
#include <span>

namespace qforget::kernels {

enum class Trans { No, Yes };

/// C (m x n) = op(A) * op(B) with op(A) m x k and op(B) k x n.
/// A is stored m x k (or k x m when transposed), B k x n (or n x k).
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c);
void gemm_reference(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
                    const double* b, double* c);

/// Symmetric fake quantization of one value against a range maximum.
/// q = round_half_away(w / s), s = range_max / max_level, clamped to
/// [-max_level, max_level]; dequantized as (q / max_level) * range_max so
/// that the range extremes map onto themselves exactly.
inline double fake_quantize_value(double w, double range_max, double scale, int max_level) {
  double q = std::round(w / scale);
  if (q > max_level) q = max_level;
  if (q < -max_level) q = -max_level;
  return (q / max_level) * range_max;
}

/// Per-row quantization in place. Rows whose max |w| is zero pass through.
void fake_quantize_rows(std::span<double> data, std::size_t cols, int max_level);
void fake_quantize_rows_reference(std::span<double> data, std::size_t cols, int max_level);

/// Quantization in place against a caller-supplied range maximum
/// (global or per-tensor granularity). range_max == 0 passes through.
void fake_quantize_range(std::span<double> data, double range_max, int max_level);
void fake_quantize_range_reference(std::span<double> data, double range_max, int max_level);

/// max |x|; order-independent, so the parallel reduction is exact.
double max_abs(std::span<const double> data);
double max_abs_reference(std::span<const double> data);

}  // namespace qforget::kernels
