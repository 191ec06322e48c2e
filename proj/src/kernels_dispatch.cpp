// SPDX-License-Identifier: Apache-2.0
#include "loramerge/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace loramerge::kernels {

bool simd_supported() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2");
#elif defined(__aarch64__)
    return true;  // NEON is baseline on aarch64
#else
    return false;
#endif
}

namespace {

const Ops& resolve() {
    const char* override = std::getenv("LORAMERGE_KERNELS");
    if (override && std::strcmp(override, "scalar") == 0) return scalar_ops();
    if (!simd_supported()) return scalar_ops();
#if defined(__x86_64__) || defined(_M_X64)
    return avx2_ops();
#elif defined(__aarch64__)
    return neon_ops();
#else
    return scalar_ops();
#endif
}

}  // namespace

const Ops& active() {
    static const Ops& ops = resolve();
    return ops;
}

}  // namespace loramerge::kernels
