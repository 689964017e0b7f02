// SPDX-License-Identifier: Apache-2.0
#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace attnocr {

/**
 * Keeps freed tensor buffers in the process heap instead of returning them
 * to the kernel. Training allocates and frees buffers of the same sizes every
 * batch; with glibc defaults each large buffer is a fresh mmap that page-faults
 * on first touch. Process-wide: call once from main. No-op off glibc.
 */
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 1 << 28);
#endif
}

}  // namespace attnocr
