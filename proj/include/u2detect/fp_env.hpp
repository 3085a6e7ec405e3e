#pragma once

#if defined(__SSE2__) || defined(_M_X64)
#include <xmmintrin.h>
#define U2D_HAS_MXCSR 1
#endif

namespace u2d {

// Stiff modes (fast insulin clearance) decay into the subnormal range within a
// few thousand steps, and subnormal arithmetic is ~10x slower on x86. The hot
// simulation loops run under this guard; the previous mode is restored on exit.
class ScopedFlushDenormals {
 public:
  ScopedFlushDenormals() noexcept {
#ifdef U2D_HAS_MXCSR
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);  // FTZ | DAZ
#endif
  }
  ~ScopedFlushDenormals() {
#ifdef U2D_HAS_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  ScopedFlushDenormals(const ScopedFlushDenormals&) = delete;
  ScopedFlushDenormals& operator=(const ScopedFlushDenormals&) = delete;

 private:
  unsigned int saved_ = 0;
};

}  // namespace u2d
