#include "qforget/kernels.hpp"

#include <algorithm>

namespace qforget::kernels {

namespace {

// Below this many multiply-adds the fork/join cost outweighs the loop.
constexpr std::size_t kParallelWork = 1u << 15;

inline double elem(const double* p, Trans t, std::size_t i, std::size_t j, std::size_t ld) {
  return t == Trans::No ? p[i * ld + j] : p[j * ld + i];
}

}  // namespace

void gemm_reference(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
                    const double* b, double* c) {
  const std::size_t lda = ta == Trans::No ? k : m;
  const std::size_t ldb = tb == Trans::No ? n : k;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < k; ++p) sum += elem(a, ta, i, p, lda) * elem(b, tb, p, j, ldb);
      c[i * n + j] = sum;
    }
  }
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c) {
  const bool parallel = m > 1 && m * n * k >= kParallelWork;
  const auto rows = static_cast<long>(m);
  if (tb == Trans::No) {
    // i-p-j order streams rows of B; each c[i][j] still accumulates over p
    // ascending from 0.0, matching the reference bit for bit.
#pragma omp parallel for schedule(static) if (parallel)
    for (long ii = 0; ii < rows; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      double* crow = c + i * n;
      std::fill(crow, crow + n, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
#pragma omp parallel for schedule(static) if (parallel)
    for (long ii = 0; ii < rows; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double sum = 0.0;
        if (ta == Trans::No) {
          const double* arow = a + i * k;
          for (std::size_t p = 0; p < k; ++p) sum += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) sum += a[p * m + i] * brow[p];
        }
        c[i * n + j] = sum;
      }
    }
  }
}

void fake_quantize_rows_reference(std::span<double> data, std::size_t cols, int max_level) {
  const std::size_t rows = data.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<double> row = data.subspan(r * cols, cols);
    const double range_max = max_abs_reference(row);
    if (range_max == 0.0) continue;
    const double scale = range_max / max_level;
    for (double& w : row) w = fake_quantize_value(w, range_max, scale, max_level);
  }
}

void fake_quantize_rows(std::span<double> data, std::size_t cols, int max_level) {
  const auto rows = static_cast<long>(data.size() / cols);
  const bool parallel = data.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (long r = 0; r < rows; ++r) {
    double* row = data.data() + static_cast<std::size_t>(r) * cols;
    double range_max = 0.0;
    for (std::size_t j = 0; j < cols; ++j) range_max = std::max(range_max, std::abs(row[j]));
    if (range_max == 0.0) continue;
    const double scale = range_max / max_level;
    for (std::size_t j = 0; j < cols; ++j) row[j] = fake_quantize_value(row[j], range_max, scale, max_level);
  }
}

void fake_quantize_range_reference(std::span<double> data, double range_max, int max_level) {
  if (range_max == 0.0) return;
  const double scale = range_max / max_level;
  for (double& w : data) w = fake_quantize_value(w, range_max, scale, max_level);
}

void fake_quantize_range(std::span<double> data, double range_max, int max_level) {
  if (range_max == 0.0) return;
  const double scale = range_max / max_level;
  const auto n = static_cast<long>(data.size());
  const bool parallel = data.size() >= kParallelWork;
  double* p = data.data();
#pragma omp parallel for schedule(static) if (parallel)
  for (long i = 0; i < n; ++i) p[i] = fake_quantize_value(p[i], range_max, scale, max_level);
}

double max_abs_reference(std::span<const double> data) {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::abs(v));
  return m;
}

double max_abs(std::span<const double> data) {
  double m = 0.0;
  const auto n = static_cast<long>(data.size());
  const double* p = data.data();
  const bool parallel = data.size() >= kParallelWork;
#pragma omp parallel for reduction(max : m) schedule(static) if (parallel)
  for (long i = 0; i < n; ++i) m = std::max(m, std::abs(p[i]));
  return m;
}

}  // namespace qforget::kernels
