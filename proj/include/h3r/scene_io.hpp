#pragma once

#include <optional>
#include <string>
#include <vector>

#include "h3r/camera.hpp"
#include "h3r/tensor.hpp"

namespace h3r {

// ---- images (P6 pixmaps, values kept in [0,1]) ----

struct Image {
    i64 width = 0, height = 0;
    std::vector<float> rgb;  // h*w*3 row-major

    float& at(i64 y, i64 x, int c) { return rgb[static_cast<size_t>((y * width + x) * 3 + c)]; }
    float at(i64 y, i64 x, int c) const { return rgb[static_cast<size_t>((y * width + x) * 3 + c)]; }
};

void save_ppm(const Image& img, const std::string& path);
Image load_ppm(const std::string& path);

template <typename T>
Tensor<T> to_tensor(const Image& img);

template <typename T>
Image to_image(const Tensor<T>& t);  // [H,W,3], clamped to [0,1]

// ---- scenes ----

struct SceneView {
    Camera cam;
    std::string role;  // "context" | "target"
    std::string image_file;
    Image image;
    std::vector<float> depth;  // h*w ray depths, 0 where no hit; diagnostics
};

struct SceneBundle {
    double near = 1.0, far = 100.0;
    std::vector<SceneView> views;

    std::vector<int> context_ids() const;
    std::vector<int> target_ids() const;
    const SceneView& view(int i) const { return views[static_cast<size_t>(i)]; }
};

// Directory layout: cameras.json manifest + view_###.ppm (+ .depth rasters).
void save_scene(const SceneBundle& bundle, const std::string& dir);
SceneBundle load_scene(const std::string& dir);

// Mirrors all images horizontally and conjugates every camera by the same
// world reflection, so multi-view geometry stays consistent.
SceneBundle hflip_scene(const SceneBundle& bundle);

// ---- synthetic scenes with analytic ground truth ----

struct TextureParams {
    Vec3 color_a{0.9, 0.9, 0.9}, color_b{0.1, 0.1, 0.1};
    double freq_u = 3.0, freq_v = 3.0;
    double phase_u = 0.0, phase_v = 0.0;
    double checker = 0.5;  // checker cell size in surface units
};

Vec3 texture_color(const TextureParams& tex, double u, double v);

struct PlanePrim {
    Vec3 center;
    Vec3 u_axis, v_axis;  // unit, orthogonal
    double half_u = 1.0, half_v = 1.0;
    TextureParams tex;
};

struct BoxPrim {
    Vec3 lo, hi;  // axis-aligned
    TextureParams tex;
};

struct SceneGeometry {
    std::vector<PlanePrim> planes;
    std::vector<BoxPrim> boxes;
    Vec3 background{0.05, 0.05, 0.08};
};

// Exact ray-cast render: nearest ray/plane and ray/box hit per pixel. This is
// the second renderer, independent of the gaussian rasterizer.
Image raycast_image(const SceneGeometry& geo, const Camera& cam,
                    std::vector<float>* depth_out = nullptr);

struct SyntheticSceneSpec {
    std::uint64_t seed = 1;
    int num_boxes = 2;
    int context_views = 2;
    int target_views = 3;
    i64 width = 64, height = 64;
    double arc_degrees = 24.0;   // total angular spread of the camera arc
    double radius = 4.0;         // arc radius around the look-at point
    double radius_jitter = 0.25;
    double focal_scale = 0.9;    // fx = focal_scale * width
};

SceneBundle generate_scene(const SyntheticSceneSpec& spec);

// Cameras used by generate_scene, exposed for tests and the data CLI.
std::vector<Camera> arc_cameras(const SyntheticSceneSpec& spec, Rng& rng);

// ---- checkpoint container ("H3RT", version 1) ----

struct TensorRecord {
    std::string name;
    bool is_f64 = false;
    Shape shape;
    std::vector<float> f32;
    std::vector<double> f64;

    i64 numel() const { return numel_of(shape); }
};

void write_container(const std::string& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_container(const std::string& path);

template <typename T>
TensorRecord make_record(const std::string& name, const Tensor<T>& t);

// Copies matching records into the parameter map; throws DataError listing
// missing and unexpected names. Records outside `prefix` are ignored when
// `prefix` is non-empty (it is stripped before matching).
template <typename T>
void apply_records(const std::vector<TensorRecord>& records, ParamMap<T>& params,
                   const std::string& prefix = "", bool allow_missing = false);

template <typename T>
void save_checkpoint(ParamMap<T>& params,
                     const std::vector<std::pair<std::string, Tensor<T>>>& extra,
                     const std::string& path);

}  // namespace h3r
