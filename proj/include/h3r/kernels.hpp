#pragma once

#include <cmath>
#include <cstring>

#include "h3r/common.hpp"
#include "h3r/parallel.hpp"

// Raw-buffer kernels shared by the forward ops and the hand-written backward
// closures. Parallelism is always over output elements; each element is a
// serial reduction in a fixed order, so serial and OpenMP runs agree bitwise.
namespace h3r::kernels {

// Deterministic full-buffer sum: fixed 4096-element blocks reduced in block
// order, independent of thread count.
template <typename T>
T block_sum(const T* x, i64 n) {
    constexpr i64 kBlock = 4096;
    const i64 nblocks = (n + kBlock - 1) / kBlock;
    std::vector<T> partial(static_cast<size_t>(nblocks), T(0));
    par::parallel_for(nblocks, [&](i64 b) {
        const i64 lo = b * kBlock;
        const i64 hi = lo + kBlock < n ? lo + kBlock : n;
        T s = T(0);
        for (i64 i = lo; i < hi; ++i) s += x[i];
        partial[static_cast<size_t>(b)] = s;
    }, 1);
    T total = T(0);
    for (i64 b = 0; b < nblocks; ++b) total += partial[static_cast<size_t>(b)];
    return total;
}

template <typename T>
bool all_finite(const T* x, i64 n) {
    for (i64 i = 0; i < n; ++i)
        if (!std::isfinite(x[i])) return false;
    return true;
}

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major, op = optional
// transpose. Parallel over rows of C.
template <typename T>
void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, T alpha, const T* a,
          const T* b, T beta, T* c) {
    par::parallel_for(m, [&](i64 i) {
        T* crow = c + i * n;
        if (beta == T(0)) {
            for (i64 j = 0; j < n; ++j) crow[j] = T(0);
        } else if (beta != T(1)) {
            for (i64 j = 0; j < n; ++j) crow[j] *= beta;
        }
        if (!trans_a && !trans_b) {
            // dot-product free: accumulate rank-1 rows, k outer keeps B row-contiguous
            const T* arow = a + i * k;
            for (i64 p = 0; p < k; ++p) {
                const T av = alpha * arow[p];
                if (av == T(0)) continue;
                const T* brow = b + p * n;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else if (!trans_a && trans_b) {
            const T* arow = a + i * k;
            for (i64 j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T s = T(0);
                for (i64 p = 0; p < k; ++p) s += arow[p] * brow[p];
                crow[j] += alpha * s;
            }
        } else if (trans_a && !trans_b) {
            for (i64 p = 0; p < k; ++p) {
                const T av = alpha * a[p * m + i];
                if (av == T(0)) continue;
                const T* brow = b + p * n;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            for (i64 j = 0; j < n; ++j) {
                T s = T(0);
                for (i64 p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
                crow[j] += alpha * s;
            }
        }
    }, 8);
}

// ---- conv2d, NHWC layout, weight [kh, kw, cin, cout] ----

struct ConvDims {
    i64 batch, in_h, in_w, in_c;
    i64 kh, kw, out_c;
    i64 stride, pad;
    i64 out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
    i64 out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
};

template <typename T>
void conv2d_forward(const ConvDims& d, const T* x, const T* w, const T* bias, T* y) {
    const i64 oh = d.out_h(), ow = d.out_w();
    par::parallel_for(d.batch * oh * ow, [&](i64 idx) {
        const i64 n = idx / (oh * ow);
        const i64 oy = (idx / ow) % oh;
        const i64 ox = idx % ow;
        T* out = y + ((n * oh + oy) * ow + ox) * d.out_c;
        for (i64 c = 0; c < d.out_c; ++c) out[c] = bias ? bias[c] : T(0);
        for (i64 ky = 0; ky < d.kh; ++ky) {
            const i64 iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.in_h) continue;
            for (i64 kx = 0; kx < d.kw; ++kx) {
                const i64 ix = ox * d.stride + kx - d.pad;
                if (ix < 0 || ix >= d.in_w) continue;
                const T* in = x + ((n * d.in_h + iy) * d.in_w + ix) * d.in_c;
                const T* wk = w + (ky * d.kw + kx) * d.in_c * d.out_c;
                for (i64 ci = 0; ci < d.in_c; ++ci) {
                    const T xv = in[ci];
                    if (xv == T(0)) continue;
                    const T* wrow = wk + ci * d.out_c;
                    for (i64 c = 0; c < d.out_c; ++c) out[c] += xv * wrow[c];
                }
            }
        }
    }, 4);
}

// Gather form: each input element sums the output positions it fed.
template <typename T>
void conv2d_backward_input(const ConvDims& d, const T* gy, const T* w, T* gx_accum) {
    const i64 oh = d.out_h(), ow = d.out_w();
    par::parallel_for(d.batch * d.in_h * d.in_w, [&](i64 idx) {
        const i64 n = idx / (d.in_h * d.in_w);
        const i64 iy = (idx / d.in_w) % d.in_h;
        const i64 ix = idx % d.in_w;
        T* gin = gx_accum + ((n * d.in_h + iy) * d.in_w + ix) * d.in_c;
        for (i64 ky = 0; ky < d.kh; ++ky) {
            const i64 num_y = iy + d.pad - ky;
            if (num_y < 0 || num_y % d.stride) continue;
            const i64 oy = num_y / d.stride;
            if (oy >= oh) continue;
            for (i64 kx = 0; kx < d.kw; ++kx) {
                const i64 num_x = ix + d.pad - kx;
                if (num_x < 0 || num_x % d.stride) continue;
                const i64 ox = num_x / d.stride;
                if (ox >= ow) continue;
                const T* gout = gy + ((n * oh + oy) * ow + ox) * d.out_c;
                const T* wk = w + (ky * d.kw + kx) * d.in_c * d.out_c;
                for (i64 ci = 0; ci < d.in_c; ++ci) {
                    const T* wrow = wk + ci * d.out_c;
                    T s = T(0);
                    for (i64 c = 0; c < d.out_c; ++c) s += gout[c] * wrow[c];
                    gin[ci] += s;
                }
            }
        }
    }, 4);
}

template <typename T>
void conv2d_backward_weight(const ConvDims& d, const T* x, const T* gy, T* gw_accum) {
    const i64 oh = d.out_h(), ow = d.out_w();
    par::parallel_for(d.kh * d.kw * d.in_c, [&](i64 widx) {
        const i64 ky = widx / (d.kw * d.in_c);
        const i64 kx = (widx / d.in_c) % d.kw;
        const i64 ci = widx % d.in_c;
        T* grow = gw_accum + widx * d.out_c;
        for (i64 n = 0; n < d.batch; ++n) {
            for (i64 oy = 0; oy < oh; ++oy) {
                const i64 iy = oy * d.stride + ky - d.pad;
                if (iy < 0 || iy >= d.in_h) continue;
                for (i64 ox = 0; ox < ow; ++ox) {
                    const i64 ix = ox * d.stride + kx - d.pad;
                    if (ix < 0 || ix >= d.in_w) continue;
                    const T xv = x[((n * d.in_h + iy) * d.in_w + ix) * d.in_c + ci];
                    if (xv == T(0)) continue;
                    const T* gout = gy + ((n * oh + oy) * ow + ox) * d.out_c;
                    for (i64 c = 0; c < d.out_c; ++c) grow[c] += xv * gout[c];
                }
            }
        }
    }, 1);
}

template <typename T>
void conv2d_backward_bias(const ConvDims& d, const T* gy, T* gb_accum) {
    const i64 pixels = d.batch * d.out_h() * d.out_w();
    par::parallel_for(d.out_c, [&](i64 c) {
        T s = T(0);
        for (i64 p = 0; p < pixels; ++p) s += gy[p * d.out_c + c];
        gb_accum[c] += s;
    }, 1);
}

}  // namespace h3r::kernels
