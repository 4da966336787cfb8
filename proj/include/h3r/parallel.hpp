#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "h3r/common.hpp"

namespace h3r::par {

// Global switch between the OpenMP kernels and their serial twins. Every
// kernel parallelizes over output elements only (each element is a serial
// reduction in a fixed order), so results are bit-identical either way;
// tests assert that and the bench tool measures the gap.
inline bool& enabled_flag() {
    static bool flag = true;
    return flag;
}

inline bool enabled() { return enabled_flag(); }
inline void set_enabled(bool on) { enabled_flag() = on; }

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

struct SerialScope {
    bool prev;
    SerialScope() : prev(enabled()) { set_enabled(false); }
    ~SerialScope() { set_enabled(prev); }
};

// Runs fn(i) for i in [0, n). Grain keeps tiny loops serial.
template <typename F>
inline void parallel_for(i64 n, F&& fn, i64 grain = 256) {
#ifdef _OPENMP
    if (enabled() && n > grain) {
#pragma omp parallel for schedule(static)
        for (i64 i = 0; i < n; ++i) fn(i);
        return;
    }
#else
    (void)grain;
#endif
    for (i64 i = 0; i < n; ++i) fn(i);
}

}  // namespace h3r::par
