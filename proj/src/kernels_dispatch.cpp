#include <cstdlib>
#include <string>

#include "l2t/common.hpp"
#include "l2t/kernels.hpp"

namespace l2t::kern {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

struct State {
  const Kernels* active = nullptr;
  Backend backend = Backend::Auto;
};

State& state() {
  static State s = [] {
    State init;
    Backend want = Backend::Auto;
    if (const char* env = std::getenv("L2T_KERNELS")) {
      std::string v = env;
      if (v == "scalar") want = Backend::Scalar;
      else if (v == "avx2") want = Backend::Avx2;
    }
    const Kernels* avx2 = avx2_kernels();
    bool avx2_ok = avx2 != nullptr && cpu_has_avx2();
    switch (want) {
      case Backend::Scalar:
        init.active = &scalar_kernels();
        init.backend = Backend::Scalar;
        break;
      case Backend::Avx2:
        if (avx2_ok) {
          init.active = avx2;
          init.backend = Backend::Avx2;
          break;
        }
        [[fallthrough]];
      case Backend::Auto:
        if (avx2_ok) {
          init.active = avx2;
          init.backend = Backend::Avx2;
        } else {
          init.active = &scalar_kernels();
          init.backend = Backend::Scalar;
        }
        break;
    }
    return init;
  }();
  return s;
}

}  // namespace

const Kernels& active() { return *state().active; }

Backend current_backend() { return state().backend; }

bool set_backend(Backend b) {
  State& s = state();
  switch (b) {
    case Backend::Scalar:
      s.active = &scalar_kernels();
      s.backend = Backend::Scalar;
      return true;
    case Backend::Avx2: {
      const Kernels* avx2 = avx2_kernels();
      if (avx2 == nullptr || !cpu_has_avx2()) return false;
      s.active = avx2;
      s.backend = Backend::Avx2;
      return true;
    }
    case Backend::Auto: {
      const Kernels* avx2 = avx2_kernels();
      if (avx2 != nullptr && cpu_has_avx2()) {
        s.active = avx2;
        s.backend = Backend::Avx2;
      } else {
        s.active = &scalar_kernels();
        s.backend = Backend::Scalar;
      }
      return true;
    }
  }
  return false;
}

}  // namespace l2t::kern
