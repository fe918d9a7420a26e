#pragma once

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif
#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace ssdctx {

/// Process-level tuning for the math-heavy paths. Keeps multi-megabyte
/// tensor blocks on the heap freelist instead of round-tripping through
/// mmap, and flushes denormals, which otherwise stall dying activations.
/// Call once from main().
inline void runtime_init() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
#if defined(__SSE2__)
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
}

}  // namespace ssdctx
