#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "h3r/kernels.hpp"
#include "h3r/parallel.hpp"
#include "h3r/tensor.hpp"

// Differentiable tensor operations. Every op is a pure function returning a
// fresh tensor; when a tape is active and any input requires grad, a backward
// closure is recorded. Outputs of finite inputs are checked for NaN/Inf and
// surfaced as NumericError instead of propagating.
namespace h3r {

inline bool& finite_checks() {
    static bool on = true;
    return on;
}

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    if (!finite_checks()) return;
    if (!kernels::all_finite(t.data(), t.numel()))
        throw NumericError(std::string(op) + " produced non-finite values");
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (size_t i = 0; i < r; ++i) {
        const i64 da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const i64 db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides of `shape` padded to rank r, with 0 on broadcast dims.
inline std::vector<i64> bcast_strides(const Shape& shape, const Shape& out) {
    const size_t r = out.size();
    std::vector<i64> strides(r, 0);
    i64 s = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        const size_t oi = i + (r - shape.size());
        strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

template <typename T>
inline i64 bcast_offset(i64 flat, const Shape& out, const std::vector<i64>& strides) {
    i64 off = 0;
    for (size_t i = out.size(); i-- > 0;) {
        const i64 c = flat % out[i];
        flat /= out[i];
        off += c * strides[i];
    }
    return off;
}

// Sums `g` (shape `os`) down to `target`; deterministic per-target fibers.
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
    if (g.shape() == target) return g.clone();
    const Shape& os = g.shape();
    const size_t r = os.size();
    Shape padded(r, 1);
    for (size_t i = 0; i < target.size(); ++i) padded[r - target.size() + i] = target[i];

    std::vector<i64> ostrides(r, 0);
    {
        i64 s = 1;
        for (size_t i = r; i-- > 0;) {
            ostrides[i] = s;
            s *= os[i];
        }
    }
    std::vector<size_t> red_dims, kept_dims;
    for (size_t i = 0; i < r; ++i)
        (padded[i] == 1 && os[i] != 1 ? red_dims : kept_dims).push_back(i);

    Tensor<T> out(target);
    T* dst = out.data();
    const T* src = g.data();
    par::parallel_for(out.numel(), [&](i64 tflat) {
        // coordinates of the target element over the kept dims
        i64 rem = tflat;
        i64 base = 0;
        for (size_t i = kept_dims.size(); i-- > 0;) {
            const size_t d = kept_dims[i];
            const i64 c = rem % padded[d];
            rem /= padded[d];
            base += c * ostrides[d];
        }
        i64 red_count = 1;
        for (size_t d : red_dims) red_count *= os[d];
        T s = T(0);
        for (i64 k = 0; k < red_count; ++k) {
            i64 kk = k, off = base;
            for (size_t i = red_dims.size(); i-- > 0;) {
                const size_t d = red_dims[i];
                off += (kk % os[d]) * ostrides[d];
                kk /= os[d];
            }
            s += src[off];
        }
        dst[tflat] = s;
    });
    return out;
}

template <typename T>
inline void accumulate(Tensor<T> t, const Tensor<T>& g) {
    t.accumulate_grad(g.data(), g.numel());
}

// f(a_i, b_i) with numpy broadcasting; dfa/dfb give d(out)/d(input) at each
// element, multiplied by the incoming grad and reduced over broadcast dims.
template <typename T, class F, class DFa, class DFb>
Tensor<T> binary_op(const char* name, Tensor<T> a, Tensor<T> b, F f,
                    DFa dfa, DFb dfb) {
    const Shape os = broadcast_shape(a.shape(), b.shape(), name);
    Tensor<T> out(os);
    const auto sa = bcast_strides(a.shape(), os);
    const auto sb = bcast_strides(b.shape(), os);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const bool simple = (a.shape() == os && b.shape() == os);
    if (simple) {
        par::parallel_for(out.numel(), [&](i64 i) { po[i] = f(pa[i], pb[i]); });
    } else {
        par::parallel_for(out.numel(), [&](i64 i) {
            po[i] = f(pa[bcast_offset<T>(i, os, sa)], pb[bcast_offset<T>(i, os, sb)]);
        });
    }
    check_finite(out, name);

    if (auto* tp = Tape<T>::active(); tp && (a.requires_grad() || b.requires_grad())) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& gout = out.storage()->grad;
            if (a.requires_grad()) {
                Tensor<T> gfull(os);
                T* pg = gfull.data();
                par::parallel_for(gfull.numel(), [&](i64 i) {
                    const T av = pa[simple ? i : bcast_offset<T>(i, os, sa)];
                    const T bv = pb[simple ? i : bcast_offset<T>(i, os, sb)];
                    pg[i] = dfa(av, bv) * gout[static_cast<size_t>(i)];
                });
                accumulate(a, reduce_to(gfull, a.shape()));
            }
            if (b.requires_grad()) {
                Tensor<T> gfull(os);
                T* pg = gfull.data();
                par::parallel_for(gfull.numel(), [&](i64 i) {
                    const T av = pa[simple ? i : bcast_offset<T>(i, os, sa)];
                    const T bv = pb[simple ? i : bcast_offset<T>(i, os, sb)];
                    pg[i] = dfb(av, bv) * gout[static_cast<size_t>(i)];
                });
                accumulate(b, reduce_to(gfull, b.shape()));
            }
        });
    }
    return out;
}

template <typename T, class F, class DF>
Tensor<T> unary_op(const char* name, Tensor<T> x, F f, DF df) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    par::parallel_for(out.numel(), [&](i64 i) { po[i] = f(px[i]); });
    check_finite(out, name);
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& gout = out.storage()->grad;
            Tensor<T> gx(x.shape());
            T* pg = gx.data();
            const T* py = out.data();
            par::parallel_for(gx.numel(), [&](i64 i) {
                pg[i] = df(px[i], py[i]) * gout[static_cast<size_t>(i)];
            });
            accumulate(x, gx);
        });
    }
    return out;
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(Tensor<T> a, Tensor<T> b) {
    return detail::binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(Tensor<T> x, T s) {
    return detail::unary_op<T>(
        "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(Tensor<T> x, T s) {
    return detail::unary_op<T>(
        "mul_scalar", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(Tensor<T> x) {
    return mul_scalar(x, T(-1));
}

template <typename T>
Tensor<T> relu(Tensor<T> x) {
    return detail::unary_op<T>(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> x) {
    return detail::unary_op<T>(
        "sigmoid", x,
        [](T v) {
            return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                             : std::exp(v) / (T(1) + std::exp(v));
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(Tensor<T> x) {
    return detail::unary_op<T>(
        "silu", x,
        [](T v) {
            const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                  : std::exp(v) / (T(1) + std::exp(v));
            return v * s;
        },
        [](T v, T) {
            const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                  : std::exp(v) / (T(1) + std::exp(v));
            return s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
Tensor<T> exp_op(Tensor<T> x) {
    return detail::unary_op<T>(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> abs_op(Tensor<T> x) {
    return detail::unary_op<T>(
        "abs", x, [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(Tensor<T> x) {
    return detail::unary_op<T>(
        "square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// ---- reductions ----

template <typename T>
Tensor<T> sum_all(Tensor<T> x) {
    Tensor<T> out = Tensor<T>::scalar(kernels::block_sum(x.data(), x.numel()));
    detail::check_finite(out, "sum");
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            const T g = out.storage()->grad[0];
            x.ensure_grad();
            T* pg = x.grad_data();
            par::parallel_for(x.numel(), [&](i64 i) { pg[i] += g; });
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(Tensor<T> x) {
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_axis(Tensor<T> x, int axis, bool keepdim = false) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw ShapeError("sum_axis: axis out of range for " + shape_str(x.shape()));
    i64 outer = 1, inner = 1;
    const i64 n = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);

    Shape os;
    for (int i = 0; i < r; ++i) {
        if (i == axis) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(x.dim(i));
        }
    }
    if (os.empty()) os.push_back(1);
    Tensor<T> out(os);
    const T* px = x.data();
    T* po = out.data();
    par::parallel_for(outer * inner, [&](i64 oi) {
        const i64 o = oi / inner, in = oi % inner;
        T s = T(0);
        for (i64 k = 0; k < n; ++k) s += px[(o * n + k) * inner + in];
        po[oi] = s;
    });
    detail::check_finite(out, "sum_axis");
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& g = out.storage()->grad;
            x.ensure_grad();
            T* pg = x.grad_data();
            par::parallel_for(x.numel(), [&](i64 i) {
                const i64 in = i % inner;
                const i64 o = i / (inner * n);
                pg[i] += g[static_cast<size_t>(o * inner + in)];
            });
        });
    }
    return out;
}

// ---- shape ops (all materialize copies; buffers stay contiguous) ----

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape shape) {
    // one extent may be -1
    i64 known = 1;
    int wild = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (wild >= 0) throw ShapeError("reshape: more than one -1 extent");
            wild = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (wild >= 0) shape[static_cast<size_t>(wild)] = x.numel() / known;
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    Tensor<T> out = Tensor<T>::from(shape, x.vec());
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            x.accumulate_grad(out.storage()->grad.data(), x.numel());
        });
    }
    return out;
}

template <typename T>
Tensor<T> permute(Tensor<T> x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r)
        throw ShapeError("permute: rank mismatch for " + shape_str(x.shape()));
    Shape os(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
    std::vector<i64> xstr(static_cast<size_t>(r)), push(static_cast<size_t>(r));
    {
        i64 s = 1;
        for (int i = r; i-- > 0;) {
            xstr[static_cast<size_t>(i)] = s;
            s *= x.dim(i);
        }
    }
    for (int i = 0; i < r; ++i) push[static_cast<size_t>(i)] = xstr[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    Tensor<T> out(os);
    const T* px = x.data();
    T* po = out.data();
    par::parallel_for(out.numel(), [&](i64 flat) {
        i64 rem = flat, off = 0;
        for (int i = r; i-- > 0;) {
            off += (rem % os[static_cast<size_t>(i)]) * push[static_cast<size_t>(i)];
            rem /= os[static_cast<size_t>(i)];
        }
        po[flat] = px[off];
    });
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        std::vector<int> inv(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
        tp->record(out, [=]() mutable {
            Tensor<T> go = Tensor<T>::from(os, out.storage()->grad);
            // permuting the grad back needs no taping; tape is inactive here
            Tensor<T> gx = permute(go, inv);
            detail::accumulate(x, gx);
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    const int r = parts[0].rank();
    if (axis < 0) axis += r;
    Shape os = parts[0].shape();
    i64 total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != os[static_cast<size_t>(i)])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(os));
        total += p.dim(axis);
    }
    os[static_cast<size_t>(axis)] = total;
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];

    Tensor<T> out(os);
    T* po = out.data();
    i64 offset = 0;
    for (const auto& p : parts) {
        const i64 na = p.dim(axis);
        const T* pp = p.data();
        par::parallel_for(outer * na * inner, [&](i64 i) {
            const i64 o = i / (na * inner);
            const i64 rest = i % (na * inner);
            po[(o * total + offset) * inner + rest] = pp[i];
        });
        offset += na;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad |= p.requires_grad();
    if (auto* tp = Tape<T>::active(); tp && any_grad) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& g = out.storage()->grad;
            i64 off = 0;
            for (auto p : parts) {
                const i64 na = p.dim(axis);
                if (p.requires_grad()) {
                    p.ensure_grad();
                    T* pg = p.grad_data();
                    par::parallel_for(outer * na * inner, [&](i64 i) {
                        const i64 o = i / (na * inner);
                        const i64 rest = i % (na * inner);
                        pg[i] += g[static_cast<size_t>((o * total + off) * inner + rest)];
                    });
                }
                off += na;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice(Tensor<T> x, int axis, i64 start, i64 len) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    const i64 n = x.dim(axis);
    if (start < 0 || len <= 0 || start + len > n)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of bounds for axis extent " +
                         std::to_string(n));
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    Tensor<T> out(os);
    const T* px = x.data();
    T* po = out.data();
    par::parallel_for(out.numel(), [&](i64 i) {
        const i64 o = i / (len * inner);
        const i64 k = (i / inner) % len;
        const i64 in = i % inner;
        po[i] = px[(o * n + start + k) * inner + in];
    });
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& g = out.storage()->grad;
            x.ensure_grad();
            T* pg = x.grad_data();
            par::parallel_for(numel_of(os), [&](i64 i) {
                const i64 o = i / (len * inner);
                const i64 k = (i / inner) % len;
                const i64 in = i % inner;
                pg[(o * n + start + k) * inner + in] += g[static_cast<size_t>(i)];
            });
        });
    }
    return out;
}

// ---- matmul / linear ----

template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const i64 m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const i64 kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    Shape ab(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    const Shape batch = detail::broadcast_shape(ab, bb, "matmul");
    Shape os = batch;
    os.push_back(m);
    os.push_back(n);

    const auto sa = detail::bcast_strides(ab, batch);
    const auto sb = detail::bcast_strides(bb, batch);
    const i64 nbatch = numel_of(batch);
    Tensor<T> out(os);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (i64 bi = 0; bi < nbatch; ++bi) {
        const i64 ao = detail::bcast_offset<T>(bi, batch, sa) * m * k;
        const i64 bo = detail::bcast_offset<T>(bi, batch, sb) * k * n;
        kernels::gemm(false, false, m, n, k, T(1), pa + ao, pb + bo, T(0), po + bi * m * n);
    }
    detail::check_finite(out, "matmul");

    if (auto* tp = Tape<T>::active(); tp && (a.requires_grad() || b.requires_grad())) {
        tp->record(out, [=]() mutable {
            const T* g = out.storage()->grad.data();
            if (a.requires_grad()) {
                a.ensure_grad();
                T* ga = a.grad_data();
                // serial over batches: broadcast sides accumulate into one slice
                for (i64 bi = 0; bi < nbatch; ++bi) {
                    const i64 ao = detail::bcast_offset<T>(bi, batch, sa) * m * k;
                    const i64 bo = detail::bcast_offset<T>(bi, batch, sb) * k * n;
                    kernels::gemm(false, true, m, k, n, T(1), g + bi * m * n, pb + bo, T(1),
                                  ga + ao);
                }
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                T* gb = b.grad_data();
                for (i64 bi = 0; bi < nbatch; ++bi) {
                    const i64 ao = detail::bcast_offset<T>(bi, batch, sa) * m * k;
                    const i64 bo = detail::bcast_offset<T>(bi, batch, sb) * k * n;
                    kernels::gemm(true, false, k, n, m, T(1), pa + ao, g + bi * m * n, T(1),
                                  gb + bo);
                }
            }
        });
    }
    return out;
}

// y[..., out] = x[..., in] * w[in, out] + b[out]
template <typename T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
    const i64 in = w.dim(0), nout = w.dim(1);
    if (x.dim(x.rank() - 1) != in)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
    if (b.defined() && b.numel() != nout) throw ShapeError("linear: bias size mismatch");
    const i64 rows = x.numel() / in;
    Shape os = x.shape();
    os.back() = nout;
    Tensor<T> out(os);
    kernels::gemm(false, false, rows, nout, in, T(1), x.data(), w.data(), T(0), out.data());
    if (b.defined()) {
        const T* pb = b.data();
        T* po = out.data();
        par::parallel_for(rows, [&](i64 r) {
            T* prow = po + r * nout;
            for (i64 j = 0; j < nout; ++j) prow[j] += pb[j];
        });
    }
    detail::check_finite(out, "linear");

    const bool need = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
    if (auto* tp = Tape<T>::active(); tp && need) {
        tp->record(out, [=]() mutable {
            const T* g = out.storage()->grad.data();
            if (x.requires_grad()) {
                x.ensure_grad();
                kernels::gemm(false, true, rows, in, nout, T(1), g, w.data(), T(1), x.grad_data());
            }
            if (w.requires_grad()) {
                w.ensure_grad();
                kernels::gemm(true, false, in, nout, rows, T(1), x.data(), g, T(1), w.grad_data());
            }
            if (b.defined() && b.requires_grad()) {
                b.ensure_grad();
                T* gb = b.grad_data();
                par::parallel_for(nout, [&](i64 j) {
                    T s = T(0);
                    for (i64 r = 0; r < rows; ++r) s += g[r * nout + j];
                    gb[j] += s;
                }, 16);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w) {
    return linear(x, w, Tensor<T>());
}

// ---- softmax / normalization ----

template <typename T>
Tensor<T> softmax(Tensor<T> x, int axis) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    i64 outer = 1, inner = 1;
    const i64 n = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);

    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    par::parallel_for(outer * inner, [&](i64 oi) {
        const i64 o = oi / inner, in = oi % inner;
        const auto at = [&](i64 k) { return (o * n + k) * inner + in; };
        T mx = px[at(0)];
        for (i64 k = 1; k < n; ++k) mx = std::max(mx, px[at(k)]);
        T denom = T(0);
        for (i64 k = 0; k < n; ++k) {
            const T e = std::exp(px[at(k)] - mx);
            po[at(k)] = e;
            denom += e;
        }
        for (i64 k = 0; k < n; ++k) po[at(k)] /= denom;
    });
    detail::check_finite(out, "softmax");
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& g = out.storage()->grad;
            const T* py = out.data();
            x.ensure_grad();
            T* pg = x.grad_data();
            par::parallel_for(outer * inner, [&](i64 oi) {
                const i64 o = oi / inner, in = oi % inner;
                const auto at = [&](i64 k) { return (o * n + k) * inner + in; };
                T dot = T(0);
                for (i64 k = 0; k < n; ++k) dot += g[static_cast<size_t>(at(k))] * py[at(k)];
                for (i64 k = 0; k < n; ++k)
                    pg[at(k)] += py[at(k)] * (g[static_cast<size_t>(at(k))] - dot);
            });
        });
    }
    return out;
}

// Normalizes the last axis to zero mean / unit variance (biased variance),
// then applies the per-channel affine.
template <typename T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                     T eps = T(1e-5)) {
    const i64 c = x.dim(x.rank() - 1);
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layer_norm: affine parameters must have " + std::to_string(c) +
                         " elements");
    if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
    const i64 rows = x.numel() / c;
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());   // saved for backward
    std::vector<T> inv_std(static_cast<size_t>(rows));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pbta = beta.data();
    T* po = out.data();
    T* ph = xhat.data();
    par::parallel_for(rows, [&](i64 r) {
        const T* row = px + r * c;
        T mean = T(0);
        for (i64 j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (i64 j = 0; j < c; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = istd;
        for (i64 j = 0; j < c; ++j) {
            const T h = (row[j] - mean) * istd;
            ph[r * c + j] = h;
            po[r * c + j] = pg[j] * h + pbta[j];
        }
    }, 16);
    detail::check_finite(out, "layer_norm");

    const bool need = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if (auto* tp = Tape<T>::active(); tp && need) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& g = out.storage()->grad;
            const T* phat = xhat.data();
            if (gamma.requires_grad() || beta.requires_grad()) {
                if (gamma.requires_grad()) gamma.ensure_grad();
                if (beta.requires_grad()) beta.ensure_grad();
                T* ga = gamma.requires_grad() ? gamma.grad_data() : nullptr;
                T* gb = beta.requires_grad() ? beta.grad_data() : nullptr;
                par::parallel_for(c, [&](i64 j) {
                    T sa = T(0), sb = T(0);
                    for (i64 r = 0; r < rows; ++r) {
                        const T gv = g[static_cast<size_t>(r * c + j)];
                        sa += gv * phat[r * c + j];
                        sb += gv;
                    }
                    if (ga) ga[j] += sa;
                    if (gb) gb[j] += sb;
                }, 4);
            }
            if (x.requires_grad()) {
                x.ensure_grad();
                T* gx = x.grad_data();
                const T* pgam = gamma.data();
                par::parallel_for(rows, [&](i64 r) {
                    const T istd = inv_std[static_cast<size_t>(r)];
                    T m1 = T(0), m2 = T(0);
                    for (i64 j = 0; j < c; ++j) {
                        const T gy = g[static_cast<size_t>(r * c + j)] * pgam[j];
                        m1 += gy;
                        m2 += gy * phat[r * c + j];
                    }
                    m1 /= static_cast<T>(c);
                    m2 /= static_cast<T>(c);
                    for (i64 j = 0; j < c; ++j) {
                        const T gy = g[static_cast<size_t>(r * c + j)] * pgam[j];
                        gx[r * c + j] += istd * (gy - m1 - phat[r * c + j] * m2);
                    }
                }, 16);
            }
        });
    }
    return out;
}

// Unit-normalizes the last axis. Rows with tiny norm divide by eps instead,
// keeping the op differentiable everywhere.
template <typename T>
Tensor<T> l2_normalize(Tensor<T> x, T eps = T(1e-12)) {
    const i64 c = x.dim(x.rank() - 1);
    const i64 rows = x.numel() / c;
    Tensor<T> out(x.shape());
    std::vector<T> norms(static_cast<size_t>(rows));
    const T* px = x.data();
    T* po = out.data();
    par::parallel_for(rows, [&](i64 r) {
        const T* row = px + r * c;
        T s = T(0);
        for (i64 j = 0; j < c; ++j) s += row[j] * row[j];
        const T nrm = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(r)] = nrm;
        for (i64 j = 0; j < c; ++j) po[r * c + j] = row[j] / nrm;
    }, 16);
    detail::check_finite(out, "l2_normalize");
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& g = out.storage()->grad;
            x.ensure_grad();
            T* gx = x.grad_data();
            par::parallel_for(rows, [&](i64 r) {
                const T* row = px + r * c;
                const T nrm = norms[static_cast<size_t>(r)];
                T dot = T(0);
                for (i64 j = 0; j < c; ++j) dot += g[static_cast<size_t>(r * c + j)] * row[j];
                const T scale = T(1) / nrm;
                const T corr = dot / (nrm * nrm * nrm);
                for (i64 j = 0; j < c; ++j)
                    gx[r * c + j] += g[static_cast<size_t>(r * c + j)] * scale - row[j] * corr;
            }, 16);
        });
    }
    return out;
}

// ---- bilinear sampling ----

template <typename T>
struct SampleResult {
    Tensor<T> values;  // [..., c]
    Tensor<T> mask;    // [...], 1 where every nonzero-weight neighbor is in bounds
};

// coords are (x, y) in pixel units with (0,0) at the center of the top-left
// pixel. A neighbor only counts against the mask if its weight is nonzero,
// so exact integer coordinates on the last row/column remain valid.
template <typename T>
SampleResult<T> bilinear_sample(Tensor<T> map, Tensor<T> coords) {
    if (map.rank() != 3) throw ShapeError("bilinear_sample: map must be [h,w,c]");
    if (coords.dim(coords.rank() - 1) != 2)
        throw ShapeError("bilinear_sample: coords must have a trailing extent of 2");
    const i64 h = map.dim(0), w = map.dim(1), c = map.dim(2);
    const i64 npts = coords.numel() / 2;

    Shape vshape(coords.shape().begin(), coords.shape().end() - 1);
    Shape mshape = vshape;
    vshape.push_back(c);
    if (mshape.empty()) mshape.push_back(1);
    Tensor<T> values(vshape);
    Tensor<T> mask(mshape);

    const T* pm = map.data();
    const T* pc = coords.data();
    T* pv = values.data();
    T* pk = mask.data();

    struct Corner {
        i64 off;  // flat offset into map, -1 if out of bounds
        T weight;
    };
    // captured by value: the backward closure outlives this stack frame
    const auto corners = [pc, w, h, c](i64 p, Corner corner[4], bool& valid) {
        const T x = pc[p * 2 + 0];
        const T y = pc[p * 2 + 1];
        const T fx0 = std::floor(x), fy0 = std::floor(y);
        const i64 x0 = static_cast<i64>(fx0), y0 = static_cast<i64>(fy0);
        const T ax = x - fx0, ay = y - fy0;
        const T ws[4] = {(T(1) - ax) * (T(1) - ay), ax * (T(1) - ay), (T(1) - ax) * ay,
                         ax * ay};
        const i64 xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const i64 ys[4] = {y0, y0, y0 + 1, y0 + 1};
        valid = true;
        for (int k = 0; k < 4; ++k) {
            const bool in = xs[k] >= 0 && xs[k] < w && ys[k] >= 0 && ys[k] < h;
            corner[k].off = in ? (ys[k] * w + xs[k]) * c : -1;
            corner[k].weight = ws[k];
            if (!in && ws[k] != T(0)) valid = false;
        }
    };

    par::parallel_for(npts, [&](i64 p) {
        Corner cr[4];
        bool valid;
        corners(p, cr, valid);
        T* out = pv + p * c;
        if (!valid) {
            for (i64 j = 0; j < c; ++j) out[j] = T(0);
            pk[p] = T(0);
            return;
        }
        for (i64 j = 0; j < c; ++j) out[j] = T(0);
        for (int k = 0; k < 4; ++k) {
            if (cr[k].off < 0 || cr[k].weight == T(0)) continue;
            const T* src = pm + cr[k].off;
            for (i64 j = 0; j < c; ++j) out[j] += cr[k].weight * src[j];
        }
        pk[p] = T(1);
    });
    detail::check_finite(values, "bilinear_sample");

    const bool need = map.requires_grad() || coords.requires_grad();
    if (auto* tp = Tape<T>::active(); tp && need) {
        tp->record(values, [=]() mutable {
            const std::vector<T>& g = values.storage()->grad;
            if (map.requires_grad()) {
                map.ensure_grad();
                T* gm = map.grad_data();
                // scatter is serial: arbitrary coords may collide
                for (i64 p = 0; p < npts; ++p) {
                    Corner cr[4];
                    bool valid;
                    corners(p, cr, valid);
                    if (!valid) continue;
                    const T* gout = g.data() + p * c;
                    for (int k = 0; k < 4; ++k) {
                        if (cr[k].off < 0 || cr[k].weight == T(0)) continue;
                        T* dst = gm + cr[k].off;
                        for (i64 j = 0; j < c; ++j) dst[j] += cr[k].weight * gout[j];
                    }
                }
            }
            if (coords.requires_grad()) {
                coords.ensure_grad();
                T* gc = coords.grad_data();
                par::parallel_for(npts, [&](i64 p) {
                    Corner cr[4];
                    bool valid;
                    corners(p, cr, valid);
                    if (!valid) return;
                    const T x = pc[p * 2 + 0];
                    const T y = pc[p * 2 + 1];
                    const T ax = x - std::floor(x), ay = y - std::floor(y);
                    const T* gout = g.data() + p * c;
                    const auto fetch = [&](int k, i64 j) {
                        return cr[k].off >= 0 ? pm[cr[k].off + j] : T(0);
                    };
                    T gx = T(0), gy = T(0);
                    for (i64 j = 0; j < c; ++j) {
                        const T m00 = fetch(0, j), m10 = fetch(1, j);
                        const T m01 = fetch(2, j), m11 = fetch(3, j);
                        gx += gout[j] * ((T(1) - ay) * (m10 - m00) + ay * (m11 - m01));
                        gy += gout[j] * ((T(1) - ax) * (m01 - m00) + ax * (m11 - m10));
                    }
                    gc[p * 2 + 0] += gx;
                    gc[p * 2 + 1] += gy;
                });
            }
        });
    }
    return {values, mask};
}

// ---- convolution / upsampling ----

template <typename T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> w, Tensor<T> b, i64 stride,
                 i64 pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d: expects x[N,H,W,C] and w[kh,kw,cin,cout]");
    if (x.dim(3) != w.dim(2))
        throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
    kernels::ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
                        w.dim(0), w.dim(1), w.dim(3), stride, pad};
    if (d.out_h() <= 0 || d.out_w() <= 0)
        throw ShapeError("conv2d: kernel larger than padded input");
    Tensor<T> out({d.batch, d.out_h(), d.out_w(), d.out_c});
    kernels::conv2d_forward(d, x.data(), w.data(), b.defined() ? b.data() : nullptr,
                            out.data());
    detail::check_finite(out, "conv2d");
    const bool need = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
    if (auto* tp = Tape<T>::active(); tp && need) {
        tp->record(out, [=]() mutable {
            const T* g = out.storage()->grad.data();
            if (x.requires_grad()) {
                x.ensure_grad();
                kernels::conv2d_backward_input(d, g, w.data(), x.grad_data());
            }
            if (w.requires_grad()) {
                w.ensure_grad();
                kernels::conv2d_backward_weight(d, x.data(), g, w.grad_data());
            }
            if (b.defined() && b.requires_grad()) {
                b.ensure_grad();
                kernels::conv2d_backward_bias(d, g, b.grad_data());
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(Tensor<T> x) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest2x: expects [N,H,W,C]");
    const i64 n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    Tensor<T> out({n, 2 * h, 2 * w, c});
    const T* px = x.data();
    T* po = out.data();
    par::parallel_for(out.numel() / c, [&](i64 p) {
        const i64 ox = p % (2 * w);
        const i64 oy = (p / (2 * w)) % (2 * h);
        const i64 ni = p / (4 * h * w);
        const T* src = px + ((ni * h + oy / 2) * w + ox / 2) * c;
        T* dst = po + p * c;
        for (i64 j = 0; j < c; ++j) dst[j] = src[j];
    });
    if (auto* tp = Tape<T>::active(); tp && x.requires_grad()) {
        tp->record(out, [=]() mutable {
            const std::vector<T>& g = out.storage()->grad;
            x.ensure_grad();
            T* gx = x.grad_data();
            par::parallel_for(x.numel() / c, [&](i64 p) {
                const i64 ix = p % w;
                const i64 iy = (p / w) % h;
                const i64 ni = p / (h * w);
                T* dst = gx + p * c;
                for (i64 dy = 0; dy < 2; ++dy)
                    for (i64 dx = 0; dx < 2; ++dx) {
                        const i64 q = ((ni * 2 * h + 2 * iy + dy) * 2 * w + 2 * ix + dx) * c;
                        for (i64 j = 0; j < c; ++j) dst[j] += g[static_cast<size_t>(q + j)];
                    }
            });
        });
    }
    return out;
}

// ---- operators ----

template <typename T>
Tensor<T> operator+(Tensor<T> a, Tensor<T> b) {
    return add(a, b);
}
template <typename T>
Tensor<T> operator-(Tensor<T> a, Tensor<T> b) {
    return sub(a, b);
}
template <typename T>
Tensor<T> operator*(Tensor<T> a, Tensor<T> b) {
    return mul(a, b);
}
template <typename T>
Tensor<T> operator/(Tensor<T> a, Tensor<T> b) {
    return div(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
    return mul_scalar(a, s);
}
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
    return mul_scalar(a, s);
}
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) {
    return add_scalar(a, s);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) {
    return neg(a);
}

}  // namespace h3r
