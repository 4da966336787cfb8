#include "h3r/rasterizer.hpp"

#include <algorithm>
#include <cmath>

#include "h3r/parallel.hpp"

namespace h3r {

namespace {

template <typename T>
struct CamT {
    T fx, fy, cx, cy;
    T R[9];  // camera-from-world rotation
    T t[3];
    i64 width, height;

    static CamT from(const Camera& cam) {
        cam.intr.validate();
        cam.pose.validate();
        CamT c;
        c.fx = static_cast<T>(cam.intr.fx);
        c.fy = static_cast<T>(cam.intr.fy);
        c.cx = static_cast<T>(cam.intr.cx);
        c.cy = static_cast<T>(cam.intr.cy);
        for (int i = 0; i < 9; ++i) c.R[i] = static_cast<T>(cam.pose.R.m[static_cast<size_t>(i)]);
        c.t[0] = static_cast<T>(cam.pose.t.x);
        c.t[1] = static_cast<T>(cam.pose.t.y);
        c.t[2] = static_cast<T>(cam.pose.t.z);
        c.width = cam.intr.width;
        c.height = cam.intr.height;
        return c;
    }
};

template <typename T>
void quat_to_rotmat(const T q[4], T r[9]) {
    const T w = q[0], x = q[1], y = q[2], z = q[3];
    r[0] = T(1) - T(2) * (y * y + z * z);
    r[1] = T(2) * (x * y - w * z);
    r[2] = T(2) * (x * z + w * y);
    r[3] = T(2) * (x * y + w * z);
    r[4] = T(1) - T(2) * (x * x + z * z);
    r[5] = T(2) * (y * z - w * x);
    r[6] = T(2) * (x * z - w * y);
    r[7] = T(2) * (y * z + w * x);
    r[8] = T(1) - T(2) * (x * x + y * y);
}

// dL/dq from dL/dR for the polynomial map above.
template <typename T>
void quat_backward(const T q[4], const T gr[9], T gq[4]) {
    const T w = q[0], x = q[1], y = q[2], z = q[3];
    gq[0] += T(2) * (-z * gr[1] + y * gr[2] + z * gr[3] - x * gr[5] - y * gr[6] + x * gr[7]);
    gq[1] += T(2) * (y * gr[1] + z * gr[2] + y * gr[3] - T(2) * x * gr[4] - w * gr[5] +
                     z * gr[6] + w * gr[7] - T(2) * x * gr[8]);
    gq[2] += T(2) * (-T(2) * y * gr[0] + x * gr[1] + w * gr[2] + x * gr[3] + z * gr[5] -
                     w * gr[6] + z * gr[7] - T(2) * y * gr[8]);
    gq[3] += T(2) * (-T(2) * z * gr[0] - w * gr[1] + x * gr[2] + w * gr[3] - T(2) * z * gr[4] +
                     y * gr[5] + x * gr[6] + y * gr[7]);
}

// Shared compositing predicate: contribution bbox == binning bbox, which is
// what makes the tiled and naive renderers agree bitwise.
template <typename T>
void splat_bbox(T u, T v, T rx, T ry, i64 width, i64 height, i64& x0, i64& x1, i64& y0,
                i64& y1) {
    x0 = std::max<i64>(0, static_cast<i64>(std::ceil(u - rx)));
    x1 = std::min<i64>(width, static_cast<i64>(std::floor(u + rx)) + 1);
    y0 = std::max<i64>(0, static_cast<i64>(std::ceil(v - ry)));
    y1 = std::min<i64>(height, static_cast<i64>(std::floor(v + ry)) + 1);
}

template <typename T>
struct SortedSplats {
    std::vector<Splat2D<T>> splats;   // depth order (ties by input index)
};

template <typename T>
SortedSplats<T> project_sorted(const GaussianFields<T>& g, const Camera& cam,
                               const RenderOptions& opt) {
    SortedSplats<T> out;
    out.splats = project(g, cam, opt);
    std::sort(out.splats.begin(), out.splats.end(), [](const Splat2D<T>& a, const Splat2D<T>& b) {
        return a.depth != b.depth ? a.depth < b.depth : a.index < b.index;
    });
    return out;
}

template <typename T>
inline T splat_alpha(const Splat2D<T>& s, T px, T py, const RenderOptions& opt) {
    const T dx = px - s.u;
    const T dy = py - s.v;
    const T power = T(0.5) * (s.inv[0] * dx * dx + s.inv[2] * dy * dy) + s.inv[1] * dx * dy;
    // outside the sigma_range ellipse: below the alpha cutoff by construction,
    // skip the exp on the bbox corners
    if (power > static_cast<T>(0.5 * opt.sigma_range * opt.sigma_range)) return T(0);
    const T a = s.opacity * std::exp(-power);
    return std::min(a, static_cast<T>(opt.alpha_clamp));
}

// ---- backward ----

template <typename T>
struct SplatGrad {
    T du = 0, dv = 0;
    T da = 0, db = 0, dc = 0;  // wrt inverse covariance entries
    T dop = 0;
    T drgb[3] = {0, 0, 0};
};

// Per-tile pixel backward: recomposites the pixel front-to-back, then walks
// the contribution list back-to-front with an exact suffix accumulator.
template <typename T>
void pixel_backward(const std::vector<Splat2D<T>>& splats, const std::vector<i64>& list,
                    i64 px, i64 py, const T* gcolor, const T* galpha,
                    const std::array<T, 3>& bg, const RenderOptions& opt,
                    std::vector<SplatGrad<T>>& tile_grads,
                    std::vector<std::pair<i64, T>>& scratch) {
    const T fx = static_cast<T>(px), fy = static_cast<T>(py);
    scratch.clear();
    T trans = T(1);
    for (size_t li = 0; li < list.size(); ++li) {
        const Splat2D<T>& s = splats[static_cast<size_t>(list[li])];
        if (px < s.x0 || px >= s.x1 || py < s.y0 || py >= s.y1) continue;
        const T a = splat_alpha(s, fx, fy, opt);
        if (a < static_cast<T>(opt.alpha_min)) continue;
        scratch.emplace_back(static_cast<i64>(li), trans);
        trans *= (T(1) - a);
    }
    if (scratch.empty() && !galpha) return;

    const T gc0 = gcolor[0], gc1 = gcolor[1], gc2 = gcolor[2];
    const T ga = galpha ? *galpha : T(0);
    // suffix color sums, background folded in so every term carries (1-a_i)
    T suf[3] = {bg[0] * trans, bg[1] * trans, bg[2] * trans};
    for (size_t k = scratch.size(); k-- > 0;) {
        const i64 li = scratch[k].first;
        const T ti = scratch[k].second;
        const Splat2D<T>& s = splats[static_cast<size_t>(list[li])];
        SplatGrad<T>& sg = tile_grads[static_cast<size_t>(li)];

        const T dx = fx - s.u;
        const T dy = fy - s.v;
        const T power = T(0.5) * (s.inv[0] * dx * dx + s.inv[2] * dy * dy) + s.inv[1] * dx * dy;
        const T gexp = std::exp(-power);
        const T araw = s.opacity * gexp;
        const bool clamped = araw > static_cast<T>(opt.alpha_clamp);
        const T a = clamped ? static_cast<T>(opt.alpha_clamp) : araw;
        const T one_m = T(1) - a;

        const T w = a * ti;
        sg.drgb[0] += gc0 * w;
        sg.drgb[1] += gc1 * w;
        sg.drgb[2] += gc2 * w;

        // dL/da: color terms + accumulated-alpha term
        T dl_da = gc0 * (s.rgb[0] * ti - suf[0] / one_m) +
                  gc1 * (s.rgb[1] * ti - suf[1] / one_m) +
                  gc2 * (s.rgb[2] * ti - suf[2] / one_m);
        dl_da += ga * (trans / one_m);

        if (!clamped) {
            sg.dop += dl_da * gexp;
            const T dl_dpower = -dl_da * araw;
            sg.da += dl_dpower * T(0.5) * dx * dx;
            sg.db += dl_dpower * dx * dy;
            sg.dc += dl_dpower * T(0.5) * dy * dy;
            const T gdx = dl_dpower * (s.inv[0] * dx + s.inv[1] * dy);
            const T gdy = dl_dpower * (s.inv[1] * dx + s.inv[2] * dy);
            sg.du -= gdx;
            sg.dv -= gdy;
        }

        suf[0] += s.rgb[0] * w;
        suf[1] += s.rgb[1] * w;
        suf[2] += s.rgb[2] * w;
    }
}

// Chains the accumulated screen-space gradients of one splat back to the
// world-space gaussian fields.
template <typename T>
void splat_backward_chain(const Splat2D<T>& s, const SplatGrad<T>& sg, const CamT<T>& cam,
                          const GaussianFields<T>& g, Tensor<T>& gcen, Tensor<T>& gscale,
                          Tensor<T>& gquat, Tensor<T>& gop, Tensor<T>& grgb) {
    const i64 i = s.index;
    gop.at(i) += sg.dop;
    for (int c = 0; c < 3; ++c) grgb.at(i * 3 + c) += sg.drgb[c];

    // inverse covariance -> covariance (a = syy/det, b = -sxy/det, c = sxx/det)
    const T sxx = s.cov[0], sxy = s.cov[1], syy = s.cov[2];
    const T det = sxx * syy - sxy * sxy;
    const T id2 = T(1) / (det * det);
    const T ga = sg.da, gb = sg.db, gc = sg.dc;
    const T dsxx = id2 * (-ga * syy * syy + gb * sxy * syy - gc * sxy * sxy);
    const T dsyy = id2 * (-ga * sxy * sxy + gb * sxx * sxy - gc * sxx * sxx);
    const T dsxy = id2 * (T(2) * ga * sxy * syy - gb * (det + T(2) * sxy * sxy) +
                          T(2) * gc * sxx * sxy);

    // full-matrix gradient of cov2d (lowpass floor is an additive constant)
    const T G[4] = {dsxx, dsxy / T(2), dsxy / T(2), dsyy};

    // recompute projection intermediates
    const T* q = g.quats.data() + i * 4;
    const T* sc = g.scales.data() + i * 3;
    const T* cen = g.centers.data() + i * 3;
    T pc[3];
    for (int r = 0; r < 3; ++r)
        pc[r] = cam.R[r * 3 + 0] * cen[0] + cam.R[r * 3 + 1] * cen[1] +
                cam.R[r * 3 + 2] * cen[2] + cam.t[r];
    const T x = pc[0], y = pc[1], z = pc[2];

    T rq[9];
    quat_to_rotmat(q, rq);
    // Sigma3 = Rq * diag(s^2) * Rq^T
    T rs[9];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rs[r * 3 + c] = rq[r * 3 + c] * sc[c] * sc[c];
    T sigma3[9];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            T acc = T(0);
            for (int k = 0; k < 3; ++k) acc += rs[r * 3 + k] * rq[c * 3 + k];
            sigma3[r * 3 + c] = acc;
        }

    // J (2x3) and M = J * R_cw (2x3)
    const T iz = T(1) / z;
    const T iz2 = iz * iz;
    const T J[6] = {cam.fx * iz, T(0), -cam.fx * x * iz2,
                    T(0),        cam.fy * iz, -cam.fy * y * iz2};
    T M[6];
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) {
            T acc = T(0);
            for (int k = 0; k < 3; ++k) acc += J[r * 3 + k] * cam.R[k * 3 + c];
            M[r * 3 + c] = acc;
        }

    // dSigma3 = M^T G M, dM = 2 G M Sigma3
    T gsigma3[9];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            T acc = T(0);
            for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) acc += M[a * 3 + r] * G[a * 2 + b] * M[b * 3 + c];
            gsigma3[r * 3 + c] = acc;
        }
    T gM[6];
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) {
            T acc = T(0);
            for (int a = 0; a < 2; ++a)
                for (int k = 0; k < 3; ++k)
                    acc += T(2) * G[r * 2 + a] * M[a * 3 + k] * sigma3[k * 3 + c];
            gM[r * 3 + c] = acc;
        }

    // scale & quaternion chains
    T rtqr[3];  // diag of Rq^T * gsigma3 * Rq
    for (int k = 0; k < 3; ++k) {
        T acc = T(0);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) acc += rq[r * 3 + k] * gsigma3[r * 3 + c] * rq[c * 3 + k];
        rtqr[k] = acc;
    }
    for (int k = 0; k < 3; ++k) gscale.at(i * 3 + k) += T(2) * sc[k] * rtqr[k];

    // dRq = (Q + Q^T) Rq diag(s^2)
    T grq[9];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            T acc = T(0);
            for (int k = 0; k < 3; ++k)
                acc += (gsigma3[r * 3 + k] + gsigma3[k * 3 + r]) * rq[k * 3 + c];
            grq[r * 3 + c] = acc * sc[c] * sc[c];
        }
    T gq[4] = {0, 0, 0, 0};
    quat_backward(q, grq, gq);
    for (int k = 0; k < 4; ++k) gquat.at(i * 4 + k) += gq[k];

    // dJ = dM * R_cw^T, then camera-space point partials
    T gJ[6];
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) {
            T acc = T(0);
            for (int k = 0; k < 3; ++k) acc += gM[r * 3 + k] * cam.R[c * 3 + k];
            gJ[r * 3 + c] = acc;
        }

    T gx = -gJ[2] * cam.fx * iz2;
    T gy = -gJ[5] * cam.fy * iz2;
    T gz = -gJ[0] * cam.fx * iz2 + gJ[2] * T(2) * cam.fx * x * iz2 * iz -
           gJ[4] * cam.fy * iz2 + gJ[5] * T(2) * cam.fy * y * iz2 * iz;

    // mean2d = (fx x / z + cx, fy y / z + cy)
    gx += sg.du * cam.fx * iz;
    gy += sg.dv * cam.fy * iz;
    gz += -sg.du * cam.fx * x * iz2 - sg.dv * cam.fy * y * iz2;

    for (int c = 0; c < 3; ++c)
        gcen.at(i * 3 + c) +=
            cam.R[0 * 3 + c] * gx + cam.R[1 * 3 + c] * gy + cam.R[2 * 3 + c] * gz;
}

template <typename T>
void render_backward_impl(const GaussianFields<T>& g, const Camera& cam,
                          const std::array<T, 3>& bg, const RenderOptions& opt,
                          const T* gcolor, const T* galpha, Tensor<T> gcen, Tensor<T> gscale,
                          Tensor<T> gquat, Tensor<T> gop, Tensor<T> grgb) {
    const CamT<T> c = CamT<T>::from(cam);
    SortedSplats<T> sorted = project_sorted(g, cam, opt);
    const auto& splats = sorted.splats;
    if (splats.empty()) return;

    const int tile = opt.tile;
    const i64 ntx = (c.width + tile - 1) / tile;
    const i64 nty = (c.height + tile - 1) / tile;

    std::vector<std::vector<i64>> tile_lists(static_cast<size_t>(ntx * nty));
    for (size_t si = 0; si < splats.size(); ++si) {
        const auto& s = splats[si];
        if (s.x0 >= s.x1 || s.y0 >= s.y1) continue;
        const i64 tx0 = s.x0 / tile, tx1 = (s.x1 - 1) / tile;
        const i64 ty0 = s.y0 / tile, ty1 = (s.y1 - 1) / tile;
        for (i64 ty = ty0; ty <= ty1; ++ty)
            for (i64 tx = tx0; tx <= tx1; ++tx)
                tile_lists[static_cast<size_t>(ty * ntx + tx)].push_back(static_cast<i64>(si));
    }

    // per-tile partial gradients, reduced in tile order for determinism
    std::vector<std::vector<SplatGrad<T>>> tile_grads(tile_lists.size());
    par::parallel_for(static_cast<i64>(tile_lists.size()), [&](i64 tidx) {
        const auto& list = tile_lists[static_cast<size_t>(tidx)];
        if (list.empty()) return;
        auto& grads = tile_grads[static_cast<size_t>(tidx)];
        grads.assign(list.size(), SplatGrad<T>{});
        const i64 tx = tidx % ntx, ty = tidx / ntx;
        const i64 px0 = tx * tile, px1 = std::min<i64>(c.width, px0 + tile);
        const i64 py0 = ty * tile, py1 = std::min<i64>(c.height, py0 + tile);
        std::vector<std::pair<i64, T>> scratch;
        scratch.reserve(64);
        for (i64 py = py0; py < py1; ++py)
            for (i64 px = px0; px < px1; ++px) {
                const i64 p = py * c.width + px;
                pixel_backward(splats, list, px, py, gcolor + p * 3,
                               galpha ? galpha + p : nullptr, bg, opt, grads, scratch);
            }
    }, 1);

    std::vector<SplatGrad<T>> total(splats.size());
    for (size_t tidx = 0; tidx < tile_lists.size(); ++tidx) {
        const auto& list = tile_lists[tidx];
        const auto& grads = tile_grads[tidx];
        for (size_t k = 0; k < list.size(); ++k) {
            SplatGrad<T>& dst = total[static_cast<size_t>(list[k])];
            const SplatGrad<T>& src = grads[k];
            dst.du += src.du;
            dst.dv += src.dv;
            dst.da += src.da;
            dst.db += src.db;
            dst.dc += src.dc;
            dst.dop += src.dop;
            for (int j = 0; j < 3; ++j) dst.drgb[j] += src.drgb[j];
        }
    }

    par::parallel_for(static_cast<i64>(splats.size()), [&](i64 si) {
        splat_backward_chain(splats[static_cast<size_t>(si)], total[static_cast<size_t>(si)], c,
                             g, gcen, gscale, gquat, gop, grgb);
    }, 8);
}

}  // namespace

template <typename T>
std::vector<Splat2D<T>> project(const GaussianFields<T>& g, const Camera& cam,
                                const RenderOptions& opt) {
    const CamT<T> c = CamT<T>::from(cam);
    const i64 n = g.count();
    std::vector<Splat2D<T>> out;
    out.reserve(static_cast<size_t>(n));
    const T* cen = g.centers.data();
    const T* sc = g.scales.data();
    const T* qu = g.quats.data();
    const T* op = g.opacities.data();
    const T* rgb = g.rgbs.data();

    for (i64 i = 0; i < n; ++i) {
        T pc[3];
        for (int r = 0; r < 3; ++r)
            pc[r] = c.R[r * 3 + 0] * cen[i * 3 + 0] + c.R[r * 3 + 1] * cen[i * 3 + 1] +
                    c.R[r * 3 + 2] * cen[i * 3 + 2] + c.t[r];
        if (!(pc[2] > static_cast<T>(opt.z_cull))) continue;

        Splat2D<T> s;
        s.index = i;
        s.depth = pc[2];
        const T iz = T(1) / pc[2];
        s.u = c.fx * pc[0] * iz + c.cx;
        s.v = c.fy * pc[1] * iz + c.cy;

        T rq[9];
        quat_to_rotmat(qu + i * 4, rq);
        T rs[9];
        for (int r = 0; r < 3; ++r)
            for (int cc = 0; cc < 3; ++cc)
                rs[r * 3 + cc] = rq[r * 3 + cc] * sc[i * 3 + cc] * sc[i * 3 + cc];
        T sigma3[9];
        for (int r = 0; r < 3; ++r)
            for (int cc = 0; cc < 3; ++cc) {
                T acc = T(0);
                for (int k = 0; k < 3; ++k) acc += rs[r * 3 + k] * rq[cc * 3 + k];
                sigma3[r * 3 + cc] = acc;
            }

        const T iz2 = iz * iz;
        const T J[6] = {c.fx * iz, T(0), -c.fx * pc[0] * iz2,
                        T(0),      c.fy * iz, -c.fy * pc[1] * iz2};
        T M[6];
        for (int r = 0; r < 2; ++r)
            for (int cc = 0; cc < 3; ++cc) {
                T acc = T(0);
                for (int k = 0; k < 3; ++k) acc += J[r * 3 + k] * c.R[k * 3 + cc];
                M[r * 3 + cc] = acc;
            }
        T cov[3] = {T(0), T(0), T(0)};  // xx, xy, yy
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                const T s3 = sigma3[a * 3 + b];
                cov[0] += M[0 * 3 + a] * s3 * M[0 * 3 + b];
                cov[1] += M[0 * 3 + a] * s3 * M[1 * 3 + b];
                cov[2] += M[1 * 3 + a] * s3 * M[1 * 3 + b];
            }
        cov[0] += static_cast<T>(opt.lowpass);
        cov[2] += static_cast<T>(opt.lowpass);
        s.cov[0] = cov[0];
        s.cov[1] = cov[1];
        s.cov[2] = cov[2];
        const T det = cov[0] * cov[2] - cov[1] * cov[1];
        s.inv[0] = cov[2] / det;
        s.inv[1] = -cov[1] / det;
        s.inv[2] = cov[0] / det;

        const T rx = static_cast<T>(opt.sigma_range) * std::sqrt(cov[0]);
        const T ry = static_cast<T>(opt.sigma_range) * std::sqrt(cov[2]);
        splat_bbox(s.u, s.v, rx, ry, c.width, c.height, s.x0, s.x1, s.y0, s.y1);

        s.opacity = op[i];
        s.rgb[0] = rgb[i * 3 + 0];
        s.rgb[1] = rgb[i * 3 + 1];
        s.rgb[2] = rgb[i * 3 + 2];
        out.push_back(s);
    }
    return out;
}

template <typename T>
RenderOutput<T> render(const GaussianFields<T>& g, const Camera& cam,
                       const std::array<T, 3>& bg, const RenderOptions& opt) {
    const CamT<T> c = CamT<T>::from(cam);
    RenderOutput<T> out;
    out.color = Tensor<T>({c.height, c.width, 3});
    out.alpha = Tensor<T>({c.height, c.width});
    out.depth.assign(static_cast<size_t>(c.height * c.width), T(0));

    SortedSplats<T> sorted = project_sorted(g, cam, opt);
    const auto& splats = sorted.splats;

    const int tile = opt.tile;
    const i64 ntx = (c.width + tile - 1) / tile;
    const i64 nty = (c.height + tile - 1) / tile;
    std::vector<std::vector<i64>> tile_lists(static_cast<size_t>(ntx * nty));
    for (size_t si = 0; si < splats.size(); ++si) {
        const auto& s = splats[si];
        if (s.x0 >= s.x1 || s.y0 >= s.y1) continue;
        const i64 tx0 = s.x0 / tile, tx1 = (s.x1 - 1) / tile;
        const i64 ty0 = s.y0 / tile, ty1 = (s.y1 - 1) / tile;
        for (i64 ty = ty0; ty <= ty1; ++ty)
            for (i64 tx = tx0; tx <= tx1; ++tx)
                tile_lists[static_cast<size_t>(ty * ntx + tx)].push_back(static_cast<i64>(si));
    }

    T* pc = out.color.data();
    T* pa = out.alpha.data();
    T* pd = out.depth.data();
    par::parallel_for(ntx * nty, [&](i64 tidx) {
        const i64 tx = tidx % ntx, ty = tidx / ntx;
        const i64 px0 = tx * tile, px1 = std::min<i64>(c.width, px0 + tile);
        const i64 py0 = ty * tile, py1 = std::min<i64>(c.height, py0 + tile);
        const i64 tw = px1 - px0, th = py1 - py0;
        std::vector<T> col(static_cast<size_t>(tw * th * 3), T(0));
        std::vector<T> trans(static_cast<size_t>(tw * th), T(1));
        std::vector<T> depth(static_cast<size_t>(tw * th), T(0));
        for (i64 si : tile_lists[static_cast<size_t>(tidx)]) {
            const Splat2D<T>& s = splats[static_cast<size_t>(si)];
            const i64 ax0 = std::max(s.x0, px0), ax1 = std::min(s.x1, px1);
            const i64 ay0 = std::max(s.y0, py0), ay1 = std::min(s.y1, py1);
            for (i64 py = ay0; py < ay1; ++py)
                for (i64 px = ax0; px < ax1; ++px) {
                    const T a = splat_alpha(s, static_cast<T>(px), static_cast<T>(py), opt);
                    if (a < static_cast<T>(opt.alpha_min)) continue;
                    const i64 lp = (py - py0) * tw + (px - px0);
                    const T w = a * trans[static_cast<size_t>(lp)];
                    col[static_cast<size_t>(lp * 3 + 0)] += w * s.rgb[0];
                    col[static_cast<size_t>(lp * 3 + 1)] += w * s.rgb[1];
                    col[static_cast<size_t>(lp * 3 + 2)] += w * s.rgb[2];
                    depth[static_cast<size_t>(lp)] += w * s.depth;
                    trans[static_cast<size_t>(lp)] *= (T(1) - a);
                }
        }
        for (i64 py = py0; py < py1; ++py)
            for (i64 px = px0; px < px1; ++px) {
                const i64 lp = (py - py0) * tw + (px - px0);
                const i64 p = py * c.width + px;
                const T tr = trans[static_cast<size_t>(lp)];
                for (int ch = 0; ch < 3; ++ch)
                    pc[p * 3 + ch] = col[static_cast<size_t>(lp * 3 + ch)] + tr * bg[static_cast<size_t>(ch)];
                pa[p] = T(1) - tr;
                pd[p] = depth[static_cast<size_t>(lp)];
            }
    }, 1);

    const bool need = g.centers.requires_grad() || g.scales.requires_grad() ||
                      g.quats.requires_grad() || g.opacities.requires_grad() ||
                      g.rgbs.requires_grad();
    if (auto* tp = Tape<T>::active(); tp && need) {
        GaussianFields<T> gg = g;
        Tensor<T> color = out.color;
        Tensor<T> alpha = out.alpha;
        // one node per output; the color node does the full backward and the
        // alpha node is folded into it by reading alpha.grad there
        tp->record(alpha, [] {});
        tp->record(color, [=]() mutable {
            const T* gcol = color.storage()->grad.data();
            const T* galp = alpha.storage()->grad.empty() ? nullptr : alpha.storage()->grad.data();
            gg.centers.ensure_grad();
            gg.scales.ensure_grad();
            gg.quats.ensure_grad();
            gg.opacities.ensure_grad();
            gg.rgbs.ensure_grad();
            Tensor<T> gcen = Tensor<T>::zeros(gg.centers.shape());
            Tensor<T> gscale = Tensor<T>::zeros(gg.scales.shape());
            Tensor<T> gquat = Tensor<T>::zeros(gg.quats.shape());
            Tensor<T> gop = Tensor<T>::zeros(gg.opacities.shape());
            Tensor<T> grgb = Tensor<T>::zeros(gg.rgbs.shape());
            render_backward_impl(gg, cam, bg, opt, gcol, galp, gcen, gscale, gquat, gop, grgb);
            if (gg.centers.requires_grad()) gg.centers.accumulate_grad(gcen.data(), gcen.numel());
            if (gg.scales.requires_grad()) gg.scales.accumulate_grad(gscale.data(), gscale.numel());
            if (gg.quats.requires_grad()) gg.quats.accumulate_grad(gquat.data(), gquat.numel());
            if (gg.opacities.requires_grad()) gg.opacities.accumulate_grad(gop.data(), gop.numel());
            if (gg.rgbs.requires_grad()) gg.rgbs.accumulate_grad(grgb.data(), grgb.numel());
        });
    }
    return out;
}

template <typename T>
RenderOutput<T> render_reference(const GaussianFields<T>& g, const Camera& cam,
                                 const std::array<T, 3>& bg, const RenderOptions& opt) {
    const CamT<T> c = CamT<T>::from(cam);
    RenderOutput<T> out;
    out.color = Tensor<T>({c.height, c.width, 3});
    out.alpha = Tensor<T>({c.height, c.width});
    out.depth.assign(static_cast<size_t>(c.height * c.width), T(0));

    SortedSplats<T> sorted = project_sorted(g, cam, opt);
    const auto& splats = sorted.splats;
    T* pc = out.color.data();
    T* pa = out.alpha.data();
    T* pd = out.depth.data();
    par::parallel_for(c.height * c.width, [&](i64 p) {
        const i64 px = p % c.width, py = p / c.width;
        T col[3] = {0, 0, 0};
        T trans = T(1);
        T depth = T(0);
        for (const auto& s : splats) {
            if (px < s.x0 || px >= s.x1 || py < s.y0 || py >= s.y1) continue;
            const T a = splat_alpha(s, static_cast<T>(px), static_cast<T>(py), opt);
            if (a < static_cast<T>(opt.alpha_min)) continue;
            const T w = a * trans;
            col[0] += w * s.rgb[0];
            col[1] += w * s.rgb[1];
            col[2] += w * s.rgb[2];
            depth += w * s.depth;
            trans *= (T(1) - a);
        }
        for (int ch = 0; ch < 3; ++ch) pc[p * 3 + ch] = col[ch] + trans * bg[static_cast<size_t>(ch)];
        pa[p] = T(1) - trans;
        pd[p] = depth;
    }, 8);
    return out;
}

template std::vector<Splat2D<float>> project<float>(const GaussianFields<float>&, const Camera&,
                                                    const RenderOptions&);
template std::vector<Splat2D<double>> project<double>(const GaussianFields<double>&,
                                                      const Camera&, const RenderOptions&);
template RenderOutput<float> render<float>(const GaussianFields<float>&, const Camera&,
                                           const std::array<float, 3>&, const RenderOptions&);
template RenderOutput<double> render<double>(const GaussianFields<double>&, const Camera&,
                                             const std::array<double, 3>&, const RenderOptions&);
template RenderOutput<float> render_reference<float>(const GaussianFields<float>&, const Camera&,
                                                     const std::array<float, 3>&,
                                                     const RenderOptions&);
template RenderOutput<double> render_reference<double>(const GaussianFields<double>&,
                                                       const Camera&,
                                                       const std::array<double, 3>&,
                                                       const RenderOptions&);

}  // namespace h3r
