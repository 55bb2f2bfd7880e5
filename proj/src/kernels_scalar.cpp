#include <cmath>
#include <cstring>
#include <vector>

#include "l2t/kernels.hpp"

namespace l2t::kern {
namespace {

void gemm_scalar(double* c, const double* a, const double* b, size_t m,
                 size_t k, size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = b + kk * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn_scalar(double* c, const double* a, const double* b, size_t m,
                    size_t k, size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
  for (size_t kk = 0; kk < k; ++kk) {
    const double* arow = a + kk * m;
    const double* brow = b + kk * n;
    for (size_t i = 0; i < m; ++i) {
      double av = arow[i];
      double* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_scalar(double* c, const double* a, const double* b, size_t m,
                    size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      crow[j] = s;
    }
  }
}

void add_scalar(double* out, const double* a, const double* b, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_scalar(double* out, const double* a, const double* b, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar(double* out, const double* a, double s, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

void axpy_scalar(double* y, const double* x, double s, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

double sum_abs_scalar(const double* x, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += std::fabs(x[i]);
  return s;
}

void adamw_scalar(double* p, double* m, double* v, const double* g, size_t n,
                  double lr, double b1, double b2, double eps, double wd,
                  double bc1, double bc2) {
  for (size_t i = 0; i < n; ++i) {
    double gi = g[i];
    m[i] = b1 * m[i] + (1.0 - b1) * gi;
    v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi);
    double mhat = m[i] / bc1;
    double vhat = v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

}  // namespace

const Kernels& scalar_kernels() {
  static const Kernels k = {
      "scalar",    gemm_scalar,  gemm_tn_scalar, gemm_nt_scalar,
      add_scalar,  mul_scalar,   scale_scalar,   axpy_scalar,
      sum_abs_scalar, adamw_scalar,
  };
  return k;
}

}  // namespace l2t::kern
