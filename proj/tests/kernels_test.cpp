#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <vector>

#include "l2t/kernels.hpp"

using namespace l2t;

namespace {

std::vector<double> random_vec(std::mt19937_64& rng, size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

bool bitwise_equal(const std::vector<double>& a,
                   const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("gemm matches hand arithmetic") {
  const auto& K = kern::active();
  // [[1,2],[3,4]] * [[0],[1]] = [[2],[4]]
  std::vector<double> a = {1, 2, 3, 4};
  std::vector<double> b = {0, 1};
  std::vector<double> c(2);
  K.gemm(c.data(), a.data(), b.data(), 2, 2, 1);
  CHECK(c[0] == 2.0);
  CHECK(c[1] == 4.0);
}

TEST_CASE("identity gemm") {
  const auto& K = kern::active();
  std::vector<double> eye = {1, 0, 0, 1};
  std::vector<double> c(4);
  K.gemm(c.data(), eye.data(), eye.data(), 2, 2, 2);
  CHECK(bitwise_equal(c, eye));
}

TEST_CASE("scalar and simd kernels agree bitwise") {
  const kern::Kernels* simd = kern::avx2_kernels();
  if (simd == nullptr) return;  // nothing to compare on this platform
  const kern::Kernels& ref = kern::scalar_kernels();

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    size_t m = 1 + rng() % 9;
    size_t k = 1 + rng() % 17;
    size_t n = 1 + rng() % 13;
    auto a = random_vec(rng, m * k);
    auto b = random_vec(rng, k * n);
    std::vector<double> c1(m * n), c2(m * n);

    ref.gemm(c1.data(), a.data(), b.data(), m, k, n);
    simd->gemm(c2.data(), a.data(), b.data(), m, k, n);
    CHECK(bitwise_equal(c1, c2));

    auto at = random_vec(rng, k * m);
    ref.gemm_tn(c1.data(), at.data(), b.data(), m, k, n);
    simd->gemm_tn(c2.data(), at.data(), b.data(), m, k, n);
    CHECK(bitwise_equal(c1, c2));

    auto bt = random_vec(rng, n * k);
    ref.gemm_nt(c1.data(), a.data(), bt.data(), m, k, n);
    simd->gemm_nt(c2.data(), a.data(), bt.data(), m, k, n);
    CHECK(bitwise_equal(c1, c2));

    size_t len = 1 + rng() % 200;
    auto x = random_vec(rng, len);
    auto y = random_vec(rng, len);
    std::vector<double> o1(len), o2(len);
    ref.add(o1.data(), x.data(), y.data(), len);
    simd->add(o2.data(), x.data(), y.data(), len);
    CHECK(bitwise_equal(o1, o2));
    ref.mul(o1.data(), x.data(), y.data(), len);
    simd->mul(o2.data(), x.data(), y.data(), len);
    CHECK(bitwise_equal(o1, o2));
    ref.scale(o1.data(), x.data(), 1.7, len);
    simd->scale(o2.data(), x.data(), 1.7, len);
    CHECK(bitwise_equal(o1, o2));
    o1 = y;
    o2 = y;
    ref.axpy(o1.data(), x.data(), -0.3, len);
    simd->axpy(o2.data(), x.data(), -0.3, len);
    CHECK(bitwise_equal(o1, o2));

    // adamw: same state updates elementwise
    auto p1 = random_vec(rng, len);
    auto p2 = p1;
    auto m1 = random_vec(rng, len);
    auto m2 = m1;
    auto v1 = random_vec(rng, len);
    for (double& vv : v1) vv = std::fabs(vv);
    auto v2 = v1;
    auto g = random_vec(rng, len);
    ref.adamw(p1.data(), m1.data(), v1.data(), g.data(), len, 1e-3, 0.9,
              0.999, 1e-8, 0.01, 0.1, 0.001999);
    simd->adamw(p2.data(), m2.data(), v2.data(), g.data(), len, 1e-3, 0.9,
                0.999, 1e-8, 0.01, 0.1, 0.001999);
    CHECK(bitwise_equal(p1, p2));
    CHECK(bitwise_equal(m1, m2));
    CHECK(bitwise_equal(v1, v2));
  }
}

TEST_CASE("sum_abs is finite-detecting") {
  const auto& K = kern::active();
  std::vector<double> ok = {1.0, -2.0, 3.0};
  CHECK(std::isfinite(K.sum_abs(ok.data(), ok.size())));
  std::vector<double> bad = {1.0, std::nan(""), 3.0, 4.0, 5.0};
  CHECK(!std::isfinite(K.sum_abs(bad.data(), bad.size())));
  std::vector<double> inf = {1.0, 2.0, 3.0, 4.0,
                             std::numeric_limits<double>::infinity()};
  CHECK(!std::isfinite(K.sum_abs(inf.data(), inf.size())));
}

TEST_CASE("backend dispatch is switchable") {
  kern::Backend before = kern::current_backend();
  CHECK(kern::set_backend(kern::Backend::Scalar));
  CHECK(std::string(kern::active().name) == "scalar");
  CHECK(kern::set_backend(before));
}
