#pragma once

#include <utility>
#include <vector>

#include "h3r/geometry.hpp"
#include "h3r/ops.hpp"

namespace h3r {

// Convention used everywhere: camera-from-world extrinsics, x right, y down,
// z forward; pixel (0,0) is the center of the top-left pixel.

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    i64 width = 0, height = 0;

    void validate() const {
        if (fx <= 0 || fy <= 0) throw ContractError("intrinsics: focal lengths must be positive");
        if (width <= 0 || height <= 0) throw ContractError("intrinsics: image extents must be positive");
        if (cx < 0 || cx >= static_cast<double>(width) || cy < 0 || cy >= static_cast<double>(height))
            throw ContractError("intrinsics: principal point outside the image");
    }

    Mat3 matrix() const {
        Mat3 k = Mat3::identity();
        k(0, 0) = fx;
        k(1, 1) = fy;
        k(0, 2) = cx;
        k(1, 2) = cy;
        return k;
    }

    // Half-pixel-correct rescaling to a new resolution: pixel centers of the
    // coarse grid stay aligned with the fine grid.
    Intrinsics scaled_to(i64 new_w, i64 new_h) const {
        const double rw = static_cast<double>(new_w) / static_cast<double>(width);
        const double rh = static_cast<double>(new_h) / static_cast<double>(height);
        Intrinsics s;
        s.fx = fx * rw;
        s.fy = fy * rh;
        s.cx = (cx + 0.5) * rw - 0.5;
        s.cy = (cy + 0.5) * rh - 0.5;
        s.width = new_w;
        s.height = new_h;
        return s;
    }
};

struct Pose {
    Mat3 R = Mat3::identity();  // camera-from-world rotation
    Vec3 t{};                   // camera-from-world translation

    static Pose identity() { return Pose{}; }

    void validate(double tol = 1e-6) const {
        const Mat3 gram = R.transposed() * R;
        if (gram.max_abs_diff(Mat3::identity()) > tol)
            throw ContractError("pose: rotation is not orthonormal");
        if (std::abs(R.det() - 1.0) > tol)
            throw ContractError("pose: rotation determinant is not +1");
    }

    Vec3 camera_center() const { return -(R.transposed() * t); }

    Vec3 world_to_camera(const Vec3& p) const { return R * p + t; }
    Vec3 camera_to_world(const Vec3& p) const { return R.transposed() * (p - t); }

    // other ∘ this⁻¹ : maps this camera's frame into other's frame
    static Pose relative(const Pose& from, const Pose& to) {
        Pose r;
        r.R = to.R * from.R.transposed();
        r.t = to.t - r.R * from.t;
        return r;
    }
};

struct Camera {
    Intrinsics intr;
    Pose pose;

    Camera at_resolution(i64 w, i64 h) const { return {intr.scaled_to(w, h), pose}; }

    // Projects a world point; returns (x, y, z_cam).
    Vec3 project(const Vec3& p_world) const {
        const Vec3 pc = pose.world_to_camera(p_world);
        return {intr.fx * pc.x / pc.z + intr.cx, intr.fy * pc.y / pc.z + intr.cy, pc.z};
    }
};

struct Ray {
    Vec3 origin;
    Vec3 dir;  // unit
};

struct PluckerRay {
    Vec3 moment;  // origin x dir
    Vec3 dir;
};

struct DepthSamples {
    double near = 0, far = 0;
    std::vector<double> values;  // uniform in inverse depth, near..far inclusive
    int count() const { return static_cast<int>(values.size()); }
};

// Per-pixel world-frame rays through pixel centers, row-major [h*w].
std::vector<Ray> pixel_rays(const Camera& cam);

PluckerRay plucker(const Ray& ray);

// [h,w,6] map of (moment, direction) channels.
template <typename T>
Tensor<T> plucker_map(const Camera& cam);

DepthSamples inverse_depth_samples(double near, double far, int count);

// Warps src (at any resolution; intrinsics are rescaled to match) from view j
// onto the fronto-parallel plane at `depth` in view i's frame. Out-of-frustum
// pixels come back as zeros with mask 0.
template <typename T>
SampleResult<T> homography_warp(const Tensor<T>& src_latent, const Camera& cam_i,
                                const Camera& cam_j, double depth);

// Stack of warps over all depth planes: [h,w,d,c], depth-major per pixel.
template <typename T>
Tensor<T> plane_sweep(const Tensor<T>& x_j, const Camera& cam_i, const Camera& cam_j,
                      const DepthSamples& samples);

struct NormalizedPoses {
    std::vector<Pose> poses;
    Pose mean;  // the canonicalizing transform; apply it to undo
};

// Re-expresses all poses in the frame of their mean pose (chordal-mean
// rotation, arithmetic-mean center). Relative poses are unchanged.
NormalizedPoses normalize_poses(const std::vector<Pose>& poses);

// Fraction of view-a pixels whose back-projection at depth_mid lands inside
// view b's frame.
double view_overlap(const Camera& a, const Camera& b, double depth_mid);

}  // namespace h3r
