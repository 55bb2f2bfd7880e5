#pragma once

#include <cstddef>

// f64 array kernels behind the tensor ops. Each entry has a scalar reference
// implementation and, on x86-64, an AVX2 variant selected at runtime. The
// variants are written to accumulate in the same per-element order as the
// scalar reference (mul+add, no FMA, k ascending), so results are bitwise
// identical across backends and the equivalence tests can assert exact
// equality.
namespace l2t::kern {

struct Kernels {
  const char* name;

  // C[m x n] = A[m x k] * B[k x n], row-major. C is overwritten.
  void (*gemm)(double* c, const double* a, const double* b, size_t m, size_t k,
               size_t n);
  // C[m x n] = A^T * B with A[k x m], B[k x n].
  void (*gemm_tn)(double* c, const double* a, const double* b, size_t m,
                  size_t k, size_t n);
  // C[m x n] = A * B^T with A[m x k], B[n x k].
  void (*gemm_nt)(double* c, const double* a, const double* b, size_t m,
                  size_t k, size_t n);

  void (*add)(double* out, const double* a, const double* b, size_t n);
  void (*mul)(double* out, const double* a, const double* b, size_t n);
  void (*scale)(double* out, const double* a, double s, size_t n);
  // y += s * x
  void (*axpy)(double* y, const double* x, double s, size_t n);
  // Reduction used only for finiteness checks; order unspecified.
  double (*sum_abs)(const double* x, size_t n);

  // Decoupled-weight-decay Adam update, elementwise:
  //   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g*g
  //   p -= lr * ((m/bc1) / (sqrt(v/bc2) + eps) + wd*p)
  // bc1/bc2 are the bias corrections 1-b1^t, 1-b2^t.
  void (*adamw)(double* p, double* m, double* v, const double* g, size_t n,
                double lr, double b1, double b2, double eps, double wd,
                double bc1, double bc2);
};

enum class Backend { Auto, Scalar, Avx2 };

const Kernels& scalar_kernels();
const Kernels* avx2_kernels();  // nullptr when unavailable

// Active backend. Auto picks AVX2 when the CPU supports it; the environment
// variable L2T_KERNELS=scalar|avx2 overrides.
const Kernels& active();
bool set_backend(Backend b);  // false if the backend is unavailable
Backend current_backend();

}  // namespace l2t::kern
