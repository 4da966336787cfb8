#pragma once

#include <array>
#include <vector>

#include "h3r/camera.hpp"
#include "h3r/gaussian.hpp"
#include "h3r/ops.hpp"

namespace h3r {

struct RenderOptions {
    int tile = 16;
    double alpha_clamp = 0.99;
    double alpha_min = 1.0 / 255.0;
    double lowpass = 0.3;   // added to cov2d diagonal, pixel^2
    double z_cull = 1e-4;   // splats with camera z below this are dropped
    double sigma_range = 3.0;
};

// Screen-space splat after EWA projection.
template <typename T>
struct Splat2D {
    T u, v;        // mean, pixel coords
    T cov[3];      // 2x2 symmetric: xx, xy, yy (lowpass applied)
    T inv[3];      // inverse covariance, same layout
    T depth;       // camera-frame z (> 0)
    T opacity;
    T rgb[3];
    i64 x0, x1, y0, y1;  // pixel bbox [x0,x1) x [y0,y1), clamped to image
    i64 index;     // position in the input arrays
};

template <typename T>
struct RenderOutput {
    Tensor<T> color;          // [H,W,3] = composited + (1-alpha) * background
    Tensor<T> alpha;          // [H,W], accumulated opacity in [0,1]
    std::vector<T> depth;     // [H*W] expected depth, diagnostic only (no grad)
};

// EWA projection of world-space gaussians; splats behind the near plane are
// culled. Returned in input order.
template <typename T>
std::vector<Splat2D<T>> project(const GaussianFields<T>& g, const Camera& cam,
                                const RenderOptions& opt = {});

// Tile-parallel differentiable forward; records a backward node when a tape
// is active. Depth sort with input-index tie-break keeps results independent
// of input order and thread count.
template <typename T>
RenderOutput<T> render(const GaussianFields<T>& g, const Camera& cam,
                       const std::array<T, 3>& background, const RenderOptions& opt = {});

// Naive per-pixel full-list compositing. Kept as the reference the tiled
// renderer is checked against (bit-exact); never taped.
template <typename T>
RenderOutput<T> render_reference(const GaussianFields<T>& g, const Camera& cam,
                                 const std::array<T, 3>& background,
                                 const RenderOptions& opt = {});

}  // namespace h3r
