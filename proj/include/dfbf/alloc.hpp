#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dfbf {

/// Keeps glibc from returning activation buffers to the OS between steps.
/// Each training step frees and reallocates the same few large blocks; with
/// the default thresholds every one of them is an mmap/munmap pair.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace dfbf
