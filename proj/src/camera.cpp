#include "h3r/camera.hpp"

#include <cmath>

#include "h3r/parallel.hpp"

namespace h3r {

std::vector<Ray> pixel_rays(const Camera& cam) {
    cam.intr.validate();
    cam.pose.validate();
    const i64 w = cam.intr.width, h = cam.intr.height;
    const Vec3 center = cam.pose.camera_center();
    const Mat3 rt = cam.pose.R.transposed();
    std::vector<Ray> rays(static_cast<size_t>(w * h));
    par::parallel_for(w * h, [&](i64 p) {
        const double px = static_cast<double>(p % w);
        const double py = static_cast<double>(p / w);
        const Vec3 dir_cam{(px - cam.intr.cx) / cam.intr.fx, (py - cam.intr.cy) / cam.intr.fy, 1.0};
        rays[static_cast<size_t>(p)] = Ray{center, (rt * dir_cam).normalized()};
    });
    return rays;
}

PluckerRay plucker(const Ray& ray) { return {ray.origin.cross(ray.dir), ray.dir}; }

template <typename T>
Tensor<T> plucker_map(const Camera& cam) {
    const auto rays = pixel_rays(cam);
    const i64 w = cam.intr.width, h = cam.intr.height;
    Tensor<T> out({h, w, 6});
    T* po = out.data();
    par::parallel_for(h * w, [&](i64 p) {
        const PluckerRay pr = plucker(rays[static_cast<size_t>(p)]);
        T* dst = po + p * 6;
        dst[0] = static_cast<T>(pr.moment.x);
        dst[1] = static_cast<T>(pr.moment.y);
        dst[2] = static_cast<T>(pr.moment.z);
        dst[3] = static_cast<T>(pr.dir.x);
        dst[4] = static_cast<T>(pr.dir.y);
        dst[5] = static_cast<T>(pr.dir.z);
    });
    return out;
}

DepthSamples inverse_depth_samples(double near, double far, int count) {
    if (!(near > 0) || !(far > near))
        throw ContractError("inverse_depth_samples: need 0 < near < far, got near=" +
                            std::to_string(near) + " far=" + std::to_string(far));
    if (count < 2) throw ContractError("inverse_depth_samples: count must be >= 2");
    DepthSamples s;
    s.near = near;
    s.far = far;
    s.values.resize(static_cast<size_t>(count));
    const double inv_near = 1.0 / near, inv_far = 1.0 / far;
    for (int k = 0; k < count; ++k) {
        const double a = static_cast<double>(k) / static_cast<double>(count - 1);
        s.values[static_cast<size_t>(k)] = 1.0 / (inv_near + (inv_far - inv_near) * a);
    }
    // endpoints are contractual, not subject to reciprocal round-off
    s.values.front() = near;
    s.values.back() = far;
    return s;
}

namespace {

// Plane-induced homography from view i pixels to view j pixels for the
// fronto-parallel plane at `depth` in i's frame:
//   H = K_j * (R_ji * K_i^-1 + t_ji * e3^T / depth)
Mat3 plane_homography(const Camera& ci, const Camera& cj, double depth) {
    const Pose rel = Pose::relative(ci.pose, cj.pose);
    Mat3 a = rel.R * ci.intr.matrix().inverse();
    a(0, 2) += rel.t.x / depth;
    a(1, 2) += rel.t.y / depth;
    a(2, 2) += rel.t.z / depth;
    return cj.intr.matrix() * a;
}

}  // namespace

template <typename T>
SampleResult<T> homography_warp(const Tensor<T>& src_latent, const Camera& cam_i,
                                const Camera& cam_j, double depth) {
    if (src_latent.rank() != 3) throw ShapeError("homography_warp: latent must be [h,w,c]");
    if (!(depth > 0)) throw ContractError("homography_warp: depth must be positive");
    const i64 h = src_latent.dim(0), w = src_latent.dim(1);
    const Camera ci = cam_i.at_resolution(w, h);
    const Camera cj = cam_j.at_resolution(w, h);
    const Mat3 hmg = plane_homography(ci, cj, depth);

    // Sentinel coordinates far outside the map read back as masked zeros.
    constexpr double kBehind = -1e6;
    Tensor<T> coords({h, w, 2});
    T* pc = coords.data();
    par::parallel_for(h * w, [&](i64 p) {
        const double px = static_cast<double>(p % w);
        const double py = static_cast<double>(p / w);
        const Vec3 q = hmg * Vec3{px, py, 1.0};
        if (q.z <= 0) {
            pc[p * 2 + 0] = static_cast<T>(kBehind);
            pc[p * 2 + 1] = static_cast<T>(kBehind);
        } else {
            // snap away round-off at pixel-exact alignments (identity pose,
            // integer disparities); keeps the sampler's edge mask honest
            double sx = q.x / q.z, sy = q.y / q.z;
            if (std::abs(sx - std::round(sx)) < 1e-9) sx = std::round(sx);
            if (std::abs(sy - std::round(sy)) < 1e-9) sy = std::round(sy);
            pc[p * 2 + 0] = static_cast<T>(sx);
            pc[p * 2 + 1] = static_cast<T>(sy);
        }
    });
    return bilinear_sample(src_latent, coords);
}

template <typename T>
Tensor<T> plane_sweep(const Tensor<T>& x_j, const Camera& cam_i, const Camera& cam_j,
                      const DepthSamples& samples) {
    const i64 h = x_j.dim(0), w = x_j.dim(1), c = x_j.dim(2);
    std::vector<Tensor<T>> slabs;
    slabs.reserve(samples.values.size());
    for (double depth : samples.values) {
        auto warped = homography_warp(x_j, cam_i, cam_j, depth);
        slabs.push_back(reshape(warped.values, {h, w, 1, c}));
    }
    return concat(slabs, 2);
}

NormalizedPoses normalize_poses(const std::vector<Pose>& poses) {
    if (poses.empty()) throw ContractError("normalize_poses: need at least one pose");

    Vec3 mean_center{};
    Mat3 rot_sum;
    for (const auto& p : poses) {
        mean_center = mean_center + p.camera_center();
        rot_sum = rot_sum + p.R;
    }
    const double n = static_cast<double>(poses.size());
    mean_center = mean_center * (1.0 / n);

    Pose mean;
    mean.R = orthogonal_project(rot_sum * (1.0 / n));
    mean.t = -(mean.R * mean_center);

    NormalizedPoses out;
    out.mean = mean;
    out.poses.reserve(poses.size());
    for (const auto& p : poses) {
        // p ∘ mean⁻¹ : world re-expressed in the mean camera frame
        Pose q;
        q.R = p.R * mean.R.transposed();
        q.t = p.t - q.R * mean.t;
        out.poses.push_back(q);
    }
    return out;
}

double view_overlap(const Camera& a, const Camera& b, double depth_mid) {
    a.intr.validate();
    b.intr.validate();
    if (!(depth_mid > 0)) throw ContractError("view_overlap: depth must be positive");
    const i64 w = a.intr.width, h = a.intr.height;
    const Mat3 rt = a.pose.R.transposed();
    const Vec3 center = a.pose.camera_center();
    i64 hits = 0;
    for (i64 p = 0; p < w * h; ++p) {
        const double px = static_cast<double>(p % w);
        const double py = static_cast<double>(p / w);
        const Vec3 dir_cam{(px - a.intr.cx) / a.intr.fx, (py - a.intr.cy) / a.intr.fy, 1.0};
        const Vec3 world = center + rt * (dir_cam * depth_mid);
        const Vec3 proj = b.project(world);
        if (proj.z > 0 && proj.x >= -0.5 && proj.x < static_cast<double>(b.intr.width) - 0.5 &&
            proj.y >= -0.5 && proj.y < static_cast<double>(b.intr.height) - 0.5)
            ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(w * h);
}

template Tensor<float> plucker_map<float>(const Camera&);
template Tensor<double> plucker_map<double>(const Camera&);
template SampleResult<float> homography_warp<float>(const Tensor<float>&, const Camera&,
                                                    const Camera&, double);
template SampleResult<double> homography_warp<double>(const Tensor<double>&, const Camera&,
                                                      const Camera&, double);
template Tensor<float> plane_sweep<float>(const Tensor<float>&, const Camera&, const Camera&,
                                          const DepthSamples&);
template Tensor<double> plane_sweep<double>(const Tensor<double>&, const Camera&,
                                            const Camera&, const DepthSamples&);

}  // namespace h3r
