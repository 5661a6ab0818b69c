#pragma once

// Keeps large temporaries on the heap instead of fresh mmap pages. Without
// this, glibc maps and unmaps every matrix above its dynamic threshold and
// each forward pass pays page faults that depend on allocation history.

#include <cstdlib>  // defines __GLIBC__ on glibc

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace semamil {

inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace semamil
