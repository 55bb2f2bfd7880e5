// AVX2 variants. Vectorization runs across output columns so every output
// element accumulates in the same k order as the scalar kernels; combined
// with mul+add (no FMA) this keeps results bitwise equal to the reference.

#include "l2t/kernels.hpp"

#if defined(__AVX2__) && (defined(__x86_64__) || defined(_M_X64))
#define L2T_AVX2_ENABLED 1
#else
#define L2T_AVX2_ENABLED 0
#endif

#if L2T_AVX2_ENABLED

#include <immintrin.h>

#include <cmath>
#include <cstring>
#include <vector>

namespace l2t::kern {
namespace {

void gemm_avx2(double* c, const double* a, const double* b, size_t m, size_t k,
               size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      __m256d avv = _mm256_set1_pd(av);
      size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d cv = _mm256_loadu_pd(crow + j);
        __m256d bv = _mm256_loadu_pd(brow + j);
        cv = _mm256_add_pd(cv, _mm256_mul_pd(avv, bv));
        _mm256_storeu_pd(crow + j, cv);
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn_avx2(double* c, const double* a, const double* b, size_t m,
                  size_t k, size_t n) {
  std::memset(c, 0, m * n * sizeof(double));
  for (size_t kk = 0; kk < k; ++kk) {
    const double* arow = a + kk * m;
    const double* brow = b + kk * n;
    for (size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      __m256d avv = _mm256_set1_pd(av);
      size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d cv = _mm256_loadu_pd(crow + j);
        __m256d bv = _mm256_loadu_pd(brow + j);
        cv = _mm256_add_pd(cv, _mm256_mul_pd(avv, bv));
        _mm256_storeu_pd(crow + j, cv);
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// A * B^T via an explicit transpose of B, then the contiguous gemm loop.
// Per-element accumulation stays in k order, matching the scalar dot loop.
void gemm_nt_avx2(double* c, const double* a, const double* b, size_t m,
                  size_t k, size_t n) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (size_t j = 0; j < n; ++j) {
    const double* brow = b + j * k;
    for (size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = brow[kk];
  }
  gemm_avx2(c, a, bt.data(), m, k, n);
}

void add_avx2(double* out, const double* a, const double* b, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_avx2(double* out, const double* a, const double* b, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(double* out, const double* a, double s, size_t n) {
  __m256d sv = _mm256_set1_pd(s);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), sv));
  }
  for (; i < n; ++i) out[i] = a[i] * s;
}

void axpy_avx2(double* y, const double* x, double s, size_t n) {
  __m256d sv = _mm256_set1_pd(s);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d yv = _mm256_loadu_pd(y + i);
    yv = _mm256_add_pd(yv, _mm256_mul_pd(sv, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, yv);
  }
  for (; i < n; ++i) y[i] += s * x[i];
}

double sum_abs_avx2(const double* x, size_t n) {
  const __m256d absmask =
      _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffll));
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(acc, _mm256_and_pd(absmask, _mm256_loadu_pd(x + i)));
  }
  double lanes[4];
  _mm256_storeu_pd(lanes, acc);
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) s += std::fabs(x[i]);
  return s;
}

void adamw_avx2(double* p, double* m, double* v, const double* g, size_t n,
                double lr, double b1, double b2, double eps, double wd,
                double bc1, double bc2) {
  const __m256d b1v = _mm256_set1_pd(b1);
  const __m256d b2v = _mm256_set1_pd(b2);
  const __m256d omb1 = _mm256_set1_pd(1.0 - b1);
  const __m256d omb2 = _mm256_set1_pd(1.0 - b2);
  const __m256d bc1v = _mm256_set1_pd(bc1);
  const __m256d bc2v = _mm256_set1_pd(bc2);
  const __m256d epsv = _mm256_set1_pd(eps);
  const __m256d lrv = _mm256_set1_pd(lr);
  const __m256d wdv = _mm256_set1_pd(wd);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d gv = _mm256_loadu_pd(g + i);
    __m256d mv = _mm256_add_pd(_mm256_mul_pd(b1v, _mm256_loadu_pd(m + i)),
                               _mm256_mul_pd(omb1, gv));
    __m256d vv = _mm256_add_pd(_mm256_mul_pd(b2v, _mm256_loadu_pd(v + i)),
                               _mm256_mul_pd(omb2, _mm256_mul_pd(gv, gv)));
    _mm256_storeu_pd(m + i, mv);
    _mm256_storeu_pd(v + i, vv);
    __m256d mhat = _mm256_div_pd(mv, bc1v);
    __m256d vhat = _mm256_div_pd(vv, bc2v);
    __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), epsv);
    __m256d pv = _mm256_loadu_pd(p + i);
    __m256d upd = _mm256_add_pd(_mm256_div_pd(mhat, denom),
                                _mm256_mul_pd(wdv, pv));
    _mm256_storeu_pd(p + i, _mm256_sub_pd(pv, _mm256_mul_pd(lrv, upd)));
  }
  for (; i < n; ++i) {
    double gi = g[i];
    m[i] = b1 * m[i] + (1.0 - b1) * gi;
    v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi);
    double mhat = m[i] / bc1;
    double vhat = v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

}  // namespace

const Kernels* avx2_kernels() {
  static const Kernels k = {
      "avx2",    gemm_avx2,  gemm_tn_avx2, gemm_nt_avx2, add_avx2,
      mul_avx2,  scale_avx2, axpy_avx2,    sum_abs_avx2, adamw_avx2,
  };
  return &k;
}

}  // namespace l2t::kern

#else

namespace l2t::kern {
const Kernels* avx2_kernels() { return nullptr; }
}  // namespace l2t::kern

#endif
