#pragma once

#include <string>
#include <vector>

#include "h3r/camera.hpp"
#include "h3r/ops.hpp"

namespace h3r {

// Activated splat in world space.
struct Gaussian3D {
    Vec3 center;
    Vec3 scale;              // world units, > 0
    double quat[4] = {1, 0, 0, 0};  // (w,x,y,z), unit
    double opacity = 0.5;    // (0,1)
    Vec3 rgb;                // >= 0, zero-order SH color
};

struct ScaleRange {
    double s_min = 0.5;   // pixel units
    double s_max = 15.0;
    void validate() const {
        if (!(s_min > 0 && s_min < s_max))
            throw ContractError("scale range requires 0 < s_min < s_max");
    }
};

// Tensor-typed gaussian fields, still on the tape; one row per splat.
template <typename T>
struct GaussianFields {
    Tensor<T> centers;    // [G,3]
    Tensor<T> scales;     // [G,3]
    Tensor<T> quats;      // [G,4] unit rows
    Tensor<T> opacities;  // [G]
    Tensor<T> rgbs;       // [G,3]
    i64 count() const { return centers.defined() ? centers.dim(0) : 0; }
};

// Expected depth along the ray under a softmax over the hypothesis bank:
// t = sum_k softmax(logits)_k * d_k, always inside [near, far].
template <typename T>
Tensor<T> ray_distance(Tensor<T> logits, const DepthSamples& samples) {
    const i64 d = logits.dim(logits.rank() - 1);
    if (d != samples.count())
        throw ShapeError("ray_distance: " + std::to_string(d) + " logits vs " +
                         std::to_string(samples.count()) + " depth samples");
    Tensor<T> bank({d});
    for (i64 k = 0; k < d; ++k) bank.at(k) = static_cast<T>(samples.values[static_cast<size_t>(k)]);
    auto w = softmax(logits, -1);
    return sum_axis(mul(w, bank), -1);
}

// s_pixel = (1-sigmoid(logit)) * s_min + sigmoid(logit) * s_max, then scaled
// into world units by the pixel footprint p_world and the ray distance t.
// Broadcast shapes: logits [...,3], p_world and t broadcastable against them.
template <typename T>
Tensor<T> scale_activation(Tensor<T> scale_logits, const ScaleRange& range, Tensor<T> p_world,
                           Tensor<T> t) {
    range.validate();
    auto w = sigmoid(scale_logits);
    auto s_pixel = add_scalar(mul_scalar(w, static_cast<T>(range.s_max - range.s_min)),
                              static_cast<T>(range.s_min));
    return mul(mul(s_pixel, p_world), t);
}

// Unit quaternions with a degenerate-row guard: rows with norm < 1e-8 become
// the identity rotation and bump the counter.
template <typename T>
Tensor<T> normalize_quat(Tensor<T> raw, i64* degenerate_counter = nullptr) {
    if (raw.dim(raw.rank() - 1) != 4)
        throw ShapeError("normalize_quat: trailing extent must be 4");
    const i64 rows = raw.numel() / 4;
    const T* pr = raw.data();
    std::vector<char> degenerate(static_cast<size_t>(rows), 0);
    i64 ndeg = 0;
    for (i64 r = 0; r < rows; ++r) {
        const T* q = pr + r * 4;
        const T n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
        if (std::sqrt(n2) < T(1e-8)) {
            degenerate[static_cast<size_t>(r)] = 1;
            ++ndeg;
        }
    }
    if (degenerate_counter) *degenerate_counter += ndeg;
    if (ndeg == 0) return l2_normalize(raw);

    // Patch degenerate rows to the identity quaternion off-tape, then
    // normalize; the substituted rows carry no gradient.
    Tensor<T> patched = raw.clone();
    for (i64 r = 0; r < rows; ++r) {
        if (!degenerate[static_cast<size_t>(r)]) continue;
        T* q = patched.data() + r * 4;
        q[0] = T(1);
        q[1] = q[2] = q[3] = T(0);
    }
    if (auto* tp = Tape<T>::active(); tp && raw.requires_grad()) {
        // recorded before l2_normalize so backward sees the chain in order
        tp->record(patched, [=]() mutable {
            const std::vector<T>& g = patched.storage()->grad;
            raw.ensure_grad();
            T* gr = raw.grad_data();
            for (i64 r = 0; r < rows; ++r) {
                if (degenerate[static_cast<size_t>(r)]) continue;
                for (i64 j = 0; j < 4; ++j) gr[r * 4 + j] += g[static_cast<size_t>(r * 4 + j)];
            }
        });
    }
    return l2_normalize(patched);
}

// center = ray_o + t * ray_d, rays as a [G,3]/[G,3] pair of constant tensors.
template <typename T>
Tensor<T> center_from_distance(Tensor<T> ray_origins, Tensor<T> ray_dirs, Tensor<T> t) {
    if (t.rank() == 1) t = reshape(t, {t.numel(), 1});
    return add(ray_origins, mul(ray_dirs, t));
}

// ---- splat export: count u64 LE, then per splat
//      xyz f32*3, scale f32*3, quat f32*4 (w,x,y,z), opacity f32, rgb f32*3 ----

void save_splats(const std::vector<Gaussian3D>& splats, const std::string& path);
std::vector<Gaussian3D> load_splats(const std::string& path);

template <typename T>
std::vector<Gaussian3D> to_gaussians(const GaussianFields<T>& f);

template <typename T>
GaussianFields<T> from_gaussians(const std::vector<Gaussian3D>& splats);

}  // namespace h3r
