#pragma once

// Hot numeric loops get an AVX2 clone picked at load time. Only the vector
// width changes; no FMA contraction, so results match the baseline build.
#if defined(__x86_64__) && defined(__GNUC__) && !defined(__clang__)
#define ROE_HOT __attribute__((target_clones("avx2", "default")))
#else
#define ROE_HOT
#endif
