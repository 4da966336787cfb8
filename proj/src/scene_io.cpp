#include "h3r/scene_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "h3r/parallel.hpp"

namespace h3r {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- PPM ----

void save_ppm(const Image& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.rgb.size());
    for (size_t i = 0; i < img.rgb.size(); ++i) {
        const float v = std::clamp(img.rgb[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("failed writing " + path);
}

Image load_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw DataError(path + ": not a P6 pixmap");
    i64 w, h, maxval;
    is >> w >> h >> maxval;
    if (!is || w <= 0 || h <= 0 || maxval != 255)
        throw DataError(path + ": unsupported pixmap header");
    is.get();  // single whitespace after header
    Image img;
    img.width = w;
    img.height = h;
    std::vector<unsigned char> bytes(static_cast<size_t>(w * h * 3));
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw DataError(path + ": truncated pixel data");
    img.rgb.resize(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

template <typename T>
Tensor<T> to_tensor(const Image& img) {
    Tensor<T> t({img.height, img.width, 3});
    for (i64 i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(img.rgb[static_cast<size_t>(i)]);
    return t;
}

template <typename T>
Image to_image(const Tensor<T>& t) {
    if (t.rank() != 3 || t.dim(2) != 3) throw ShapeError("to_image: expected [H,W,3]");
    Image img;
    img.height = t.dim(0);
    img.width = t.dim(1);
    img.rgb.resize(static_cast<size_t>(t.numel()));
    for (i64 i = 0; i < t.numel(); ++i)
        img.rgb[static_cast<size_t>(i)] = std::clamp(static_cast<float>(t.at(i)), 0.0f, 1.0f);
    return img;
}

// ---- depth rasters (H3RD, f32 LE) ----

namespace {

void save_depth(const std::vector<float>& depth, i64 w, i64 h, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os.write("H3RD", 4);
    const std::uint32_t uw = static_cast<std::uint32_t>(w), uh = static_cast<std::uint32_t>(h);
    os.write(reinterpret_cast<const char*>(&uw), 4);
    os.write(reinterpret_cast<const char*>(&uh), 4);
    os.write(reinterpret_cast<const char*>(depth.data()),
             static_cast<std::streamsize>(depth.size() * 4));
}

std::vector<float> load_depth(const std::string& path, i64 w, i64 h) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return {};
    char magic[4];
    is.read(magic, 4);
    std::uint32_t uw = 0, uh = 0;
    is.read(reinterpret_cast<char*>(&uw), 4);
    is.read(reinterpret_cast<char*>(&uh), 4);
    if (!is || std::string(magic, 4) != "H3RD" || uw != static_cast<std::uint32_t>(w) || uh != static_cast<std::uint32_t>(h))
        throw DataError(path + ": bad depth raster header");
    std::vector<float> depth(static_cast<size_t>(w * h));
    is.read(reinterpret_cast<char*>(depth.data()), static_cast<std::streamsize>(depth.size() * 4));
    if (!is) throw DataError(path + ": truncated depth raster");
    return depth;
}

json mat3_to_json(const Mat3& m) {
    json a = json::array();
    for (int i = 0; i < 9; ++i) a.push_back(m.m[static_cast<size_t>(i)]);
    return a;
}

json cam4x4_to_json(const Pose& p) {
    json a = json::array();
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) a.push_back(p.R(r, c));
        a.push_back(r == 0 ? p.t.x : (r == 1 ? p.t.y : p.t.z));
    }
    a.push_back(0.0);
    a.push_back(0.0);
    a.push_back(0.0);
    a.push_back(1.0);
    return a;
}

}  // namespace

std::vector<int> SceneBundle::context_ids() const {
    std::vector<int> out;
    for (size_t i = 0; i < views.size(); ++i)
        if (views[i].role == "context") out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> SceneBundle::target_ids() const {
    std::vector<int> out;
    for (size_t i = 0; i < views.size(); ++i)
        if (views[i].role == "target") out.push_back(static_cast<int>(i));
    return out;
}

void save_scene(const SceneBundle& bundle, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["near"] = bundle.near;
    manifest["far"] = bundle.far;
    json views = json::array();
    for (size_t i = 0; i < bundle.views.size(); ++i) {
        const SceneView& v = bundle.views[i];
        char name[32];
        std::snprintf(name, sizeof(name), "view_%03zu.ppm", i);
        json jv;
        jv["image"] = name;
        jv["role"] = v.role;
        jv["width"] = v.cam.intr.width;
        jv["height"] = v.cam.intr.height;
        jv["intrinsics"] = mat3_to_json(v.cam.intr.matrix());
        jv["camera_from_world"] = cam4x4_to_json(v.cam.pose);
        views.push_back(jv);
        save_ppm(v.image, dir + "/" + name);
        if (!v.depth.empty()) {
            std::string dname(name);
            dname.replace(dname.size() - 4, 4, ".depth");
            save_depth(v.depth, v.cam.intr.width, v.cam.intr.height, dir + "/" + dname);
        }
    }
    manifest["views"] = views;
    std::ofstream os(dir + "/cameras.json");
    if (!os) throw DataError("cannot write manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

SceneBundle load_scene(const std::string& dir) {
    std::ifstream is(dir + "/cameras.json");
    if (!is) throw DataError("missing manifest " + dir + "/cameras.json");
    json manifest;
    try {
        is >> manifest;
    } catch (const json::parse_error& e) {
        throw DataError(dir + "/cameras.json: " + e.what());
    }
    SceneBundle bundle;
    try {
        bundle.near = manifest.at("near").get<double>();
        bundle.far = manifest.at("far").get<double>();
        for (const auto& jv : manifest.at("views")) {
            SceneView v;
            v.role = jv.at("role").get<std::string>();
            if (v.role != "context" && v.role != "target")
                throw DataError("view role must be context|target, got " + v.role);
            v.image_file = jv.at("image").get<std::string>();
            const auto& k = jv.at("intrinsics");
            if (k.size() != 9) throw DataError("intrinsics must have 9 entries");
            v.cam.intr.fx = k[0].get<double>();
            v.cam.intr.fy = k[4].get<double>();
            v.cam.intr.cx = k[2].get<double>();
            v.cam.intr.cy = k[5].get<double>();
            v.cam.intr.width = jv.at("width").get<i64>();
            v.cam.intr.height = jv.at("height").get<i64>();
            const auto& m = jv.at("camera_from_world");
            if (m.size() != 16) throw DataError("camera_from_world must have 16 entries");
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) v.cam.pose.R(r, c) = m[static_cast<size_t>(r * 4 + c)].get<double>();
            v.cam.pose.t = {m[3].get<double>(), m[7].get<double>(), m[11].get<double>()};
            bundle.views.push_back(v);
        }
    } catch (const json::exception& e) {
        throw DataError(dir + "/cameras.json: " + e.what());
    }
    if (!(bundle.near > 0 && bundle.far > bundle.near))
        throw DataError(dir + ": manifest needs 0 < near < far");

    i64 w0 = -1, h0 = -1;
    for (size_t i = 0; i < bundle.views.size(); ++i) {
        SceneView& v = bundle.views[i];
        v.cam.intr.validate();
        const Mat3 gram = v.cam.pose.R.transposed() * v.cam.pose.R;
        if (gram.max_abs_diff(Mat3::identity()) > 1e-4 || std::abs(v.cam.pose.R.det() - 1.0) > 1e-4)
            throw DataError(dir + ": view " + std::to_string(i) +
                            " rotation is not orthonormal (tolerance 1e-4)");
        const std::string img_path = dir + "/" + v.image_file;
        if (!fs::exists(img_path))
            throw DataError(dir + ": view " + std::to_string(i) + " image missing: " + v.image_file);
        v.image = load_ppm(img_path);
        if (v.image.width != v.cam.intr.width || v.image.height != v.cam.intr.height)
            throw DataError(dir + ": view " + std::to_string(i) + " image size mismatch");
        if (w0 < 0) {
            w0 = v.image.width;
            h0 = v.image.height;
        } else if (v.image.width != w0 || v.image.height != h0) {
            throw DataError(dir + ": all views must share one resolution");
        }
        std::string dpath = img_path;
        dpath.replace(dpath.size() - 4, 4, ".depth");
        if (fs::exists(dpath)) v.depth = load_depth(dpath, w0, h0);
    }
    return bundle;
}

SceneBundle hflip_scene(const SceneBundle& bundle) {
    SceneBundle out = bundle;
    const Mat3 reflect = Mat3::diag(-1, 1, 1);
    for (auto& v : out.views) {
        const i64 w = v.image.width, h = v.image.height;
        for (i64 y = 0; y < h; ++y)
            for (i64 x = 0; x < w / 2; ++x)
                for (int c = 0; c < 3; ++c) std::swap(v.image.at(y, x, c), v.image.at(y, w - 1 - x, c));
        if (!v.depth.empty()) {
            for (i64 y = 0; y < h; ++y)
                for (i64 x = 0; x < w / 2; ++x)
                    std::swap(v.depth[static_cast<size_t>(y * w + x)],
                              v.depth[static_cast<size_t>(y * w + (w - 1 - x))]);
        }
        v.cam.pose.R = reflect * v.cam.pose.R * reflect;
        v.cam.pose.t = reflect * v.cam.pose.t;
        v.cam.intr.cx = static_cast<double>(w - 1) - v.cam.intr.cx;
    }
    return out;
}

// ---- procedural texture & ray casting ----

Vec3 texture_color(const TextureParams& tex, double u, double v) {
    const double s = 0.5 + 0.5 * std::sin(tex.freq_u * u + tex.phase_u) *
                               std::sin(tex.freq_v * v + tex.phase_v);
    const double cell = std::max(tex.checker, 1e-6);
    const long long pu = static_cast<long long>(std::floor(u / cell));
    const long long pv = static_cast<long long>(std::floor(v / cell));
    const double k = ((pu + pv) & 1) ? 1.0 : 0.0;
    const double m = 0.5 * s + 0.5 * k;
    return tex.color_a * (1.0 - m) + tex.color_b * m;
}

namespace {

struct Hit {
    double t = -1.0;
    Vec3 color;
    bool valid() const { return t > 0; }
};

Hit intersect_plane(const PlanePrim& pl, const Vec3& o, const Vec3& d) {
    Hit h;
    const Vec3 n = pl.u_axis.cross(pl.v_axis);
    const double denom = d.dot(n);
    if (std::abs(denom) < 1e-12) return h;
    const double t = (pl.center - o).dot(n) / denom;
    if (t <= 1e-9) return h;
    const Vec3 p = o + d * t;
    const double u = (p - pl.center).dot(pl.u_axis);
    const double v = (p - pl.center).dot(pl.v_axis);
    if (std::abs(u) > pl.half_u || std::abs(v) > pl.half_v) return h;
    h.t = t;
    h.color = texture_color(pl.tex, u, v);
    return h;
}

Hit intersect_box(const BoxPrim& bx, const Vec3& o, const Vec3& d) {
    Hit h;
    double tmin = 0.0, tmax = 1e300;
    int axis = -1;
    for (int a = 0; a < 3; ++a) {
        const double da = d[a], oa = o[a];
        const double lo = bx.lo[a], hi = bx.hi[a];
        if (std::abs(da) < 1e-12) {
            if (oa < lo || oa > hi) return h;
            continue;
        }
        double t0 = (lo - oa) / da, t1 = (hi - oa) / da;
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > tmin) {
            tmin = t0;
            axis = a;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return h;
    }
    if (axis < 0 || tmin <= 1e-9) return h;  // origin inside, or degenerate
    const Vec3 p = o + d * tmin;
    // texture coordinates from the two in-face axes
    double u, v;
    if (axis == 0) {
        u = p.y;
        v = p.z;
    } else if (axis == 1) {
        u = p.x;
        v = p.z;
    } else {
        u = p.x;
        v = p.y;
    }
    h.t = tmin;
    h.color = texture_color(bx.tex, u, v);
    return h;
}

}  // namespace

Image raycast_image(const SceneGeometry& geo, const Camera& cam, std::vector<float>* depth_out) {
    cam.intr.validate();
    cam.pose.validate();
    const i64 w = cam.intr.width, h = cam.intr.height;
    Image img;
    img.width = w;
    img.height = h;
    img.rgb.assign(static_cast<size_t>(w * h * 3), 0.0f);
    if (depth_out) depth_out->assign(static_cast<size_t>(w * h), 0.0f);

    const Vec3 origin = cam.pose.camera_center();
    const Mat3 rt = cam.pose.R.transposed();
    par::parallel_for(w * h, [&](i64 p) {
        const double px = static_cast<double>(p % w);
        const double py = static_cast<double>(p / w);
        const Vec3 dir =
            (rt * Vec3{(px - cam.intr.cx) / cam.intr.fx, (py - cam.intr.cy) / cam.intr.fy, 1.0})
                .normalized();
        Hit best;
        best.t = 1e300;
        bool any = false;
        for (const auto& pl : geo.planes) {
            const Hit hh = intersect_plane(pl, origin, dir);
            if (hh.valid() && hh.t < best.t) {
                best = hh;
                any = true;
            }
        }
        for (const auto& bx : geo.boxes) {
            const Hit hh = intersect_box(bx, origin, dir);
            if (hh.valid() && hh.t < best.t) {
                best = hh;
                any = true;
            }
        }
        const Vec3 col = any ? best.color : geo.background;
        img.rgb[static_cast<size_t>(p * 3 + 0)] = static_cast<float>(std::clamp(col.x, 0.0, 1.0));
        img.rgb[static_cast<size_t>(p * 3 + 1)] = static_cast<float>(std::clamp(col.y, 0.0, 1.0));
        img.rgb[static_cast<size_t>(p * 3 + 2)] = static_cast<float>(std::clamp(col.z, 0.0, 1.0));
        if (depth_out && any) {
            // depth stored as camera-frame z of the hit
            const Vec3 pc = cam.pose.world_to_camera(origin + dir * best.t);
            (*depth_out)[static_cast<size_t>(p)] = static_cast<float>(pc.z);
        }
    });
    return img;
}

std::vector<Camera> arc_cameras(const SyntheticSceneSpec& spec, Rng& rng) {
    const int total = spec.context_views + spec.target_views;
    const Vec3 look_at{0.0, 0.0, spec.radius};
    std::vector<Camera> cams;
    cams.reserve(static_cast<size_t>(total));
    for (int k = 0; k < total; ++k) {
        const double frac = total == 1 ? 0.5 : static_cast<double>(k) / (total - 1);
        const double theta = (frac - 0.5) * spec.arc_degrees * 3.14159265358979323846 / 180.0;
        const double r = spec.radius + rng.uniform(-spec.radius_jitter, spec.radius_jitter);
        const Vec3 pos = look_at + Vec3{std::sin(theta) * r, rng.uniform(-0.08, 0.08) * r,
                                        -std::cos(theta) * r};
        const Vec3 forward = (look_at - pos).normalized();
        const Vec3 right = Vec3{0, 1, 0}.cross(forward).normalized();
        const Vec3 down = forward.cross(right);

        Camera cam;
        cam.intr.width = spec.width;
        cam.intr.height = spec.height;
        cam.intr.fx = cam.intr.fy = spec.focal_scale * static_cast<double>(spec.width);
        cam.intr.cx = (static_cast<double>(spec.width) - 1.0) / 2.0;
        cam.intr.cy = (static_cast<double>(spec.height) - 1.0) / 2.0;
        cam.pose.R = Mat3::from_rows(right, down, forward);
        cam.pose.t = -(cam.pose.R * pos);
        cams.push_back(cam);
    }
    return cams;
}

SceneBundle generate_scene(const SyntheticSceneSpec& spec) {
    Rng root(spec.seed);
    for (int attempt = 0; attempt < 32; ++attempt) {
        Rng rng = root.fork(static_cast<std::uint64_t>(attempt));
        std::vector<Camera> cams = arc_cameras(spec, rng);

        SceneGeometry geo;
        const auto palette = [&rng]() {
            return Vec3{rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95)};
        };
        const auto rand_tex = [&](double scale) {
            TextureParams t;
            t.color_a = palette();
            t.color_b = palette();
            t.freq_u = rng.uniform(2.0, 5.0) / scale;
            t.freq_v = rng.uniform(2.0, 5.0) / scale;
            t.phase_u = rng.uniform(0.0, 6.28);
            t.phase_v = rng.uniform(0.0, 6.28);
            t.checker = rng.uniform(0.35, 0.7) * scale;
            return t;
        };

        // large backdrop behind the boxes, covering every frustum
        PlanePrim backdrop;
        const double zb = spec.radius * 2.061803;
        backdrop.center = {0, 0, zb};
        backdrop.u_axis = {1, 0, 0};
        backdrop.v_axis = {0, 1, 0};
        backdrop.half_u = backdrop.half_v = zb * 2.4;
        backdrop.tex = rand_tex(2.2);
        geo.planes.push_back(backdrop);

        for (int b = 0; b < spec.num_boxes; ++b) {
            BoxPrim box;
            const Vec3 center{rng.uniform(-1.4, 1.4), rng.uniform(-1.0, 1.0),
                              spec.radius + rng.uniform(-1.0, 1.8)};
            const Vec3 half{rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8)};
            box.lo = center - half;
            box.hi = center + half;
            box.tex = rand_tex(0.8);
            geo.boxes.push_back(box);
        }

        // reject degenerate placements (camera inside a box)
        bool degenerate = false;
        for (const auto& cam : cams) {
            const Vec3 c = cam.pose.camera_center();
            for (const auto& box : geo.boxes) {
                if (c.x > box.lo.x && c.x < box.hi.x && c.y > box.lo.y && c.y < box.hi.y &&
                    c.z > box.lo.z && c.z < box.hi.z) {
                    degenerate = true;
                    break;
                }
            }
        }
        if (degenerate) continue;

        // context views span the arc; targets sit between them
        std::vector<char> is_context(cams.size(), 0);
        if (spec.context_views >= static_cast<int>(cams.size())) {
            std::fill(is_context.begin(), is_context.end(), 1);
        } else {
            for (int i = 0; i < spec.context_views; ++i) {
                const double frac = spec.context_views == 1
                                        ? 0.0
                                        : static_cast<double>(i) / (spec.context_views - 1);
                const auto idx = static_cast<size_t>(
                    std::lround(frac * static_cast<double>(cams.size() - 1)));
                is_context[idx] = 1;
            }
        }

        SceneBundle bundle;
        double dmin = 1e300, dmax = 0.0;
        for (size_t v = 0; v < cams.size(); ++v) {
            SceneView view;
            view.cam = cams[v];
            view.role = is_context[v] ? "context" : "target";
            view.image = raycast_image(geo, cams[v], &view.depth);
            for (float d : view.depth) {
                if (d <= 0) continue;
                dmin = std::min(dmin, static_cast<double>(d));
                dmax = std::max(dmax, static_cast<double>(d));
            }
            bundle.views.push_back(std::move(view));
        }
        if (!(dmax > 0)) continue;  // nothing visible; try again
        bundle.near = std::max(0.25, 0.75 * dmin);
        bundle.far = 1.35 * dmax;
        return bundle;
    }
    throw DataError("generate_scene: no valid geometry after bounded retries (seed " +
                    std::to_string(spec.seed) + ")");
}

// ---- checkpoint container ----

namespace {

constexpr char kMagic[4] = {'H', '3', 'R', 'T'};
constexpr unsigned char kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}

}  // namespace

void write_container(const std::string& path, const std::vector<TensorRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    for (const auto& r : records) {
        write_u32(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        os.write(r.is_f64 ? "f64" : "f32", 3);
        write_u32(os, static_cast<std::uint32_t>(r.shape.size()));
        for (i64 d : r.shape) write_u64(os, static_cast<std::uint64_t>(d));
        if (r.is_f64) {
            os.write(reinterpret_cast<const char*>(r.f64.data()),
                     static_cast<std::streamsize>(r.f64.size() * 8));
        } else {
            os.write(reinterpret_cast<const char*>(r.f32.data()),
                     static_cast<std::streamsize>(r.f32.size() * 4));
        }
    }
    if (!os) throw DataError("failed writing container " + path);
}

std::vector<TensorRecord> read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open container " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError(path + ": bad magic, not a tensor container");
    const int version = is.get();
    if (version != kVersion)
        throw DataError(path + ": unsupported container version " + std::to_string(version));

    std::vector<TensorRecord> records;
    while (true) {
        std::uint32_t name_len = 0;
        is.read(reinterpret_cast<char*>(&name_len), 4);
        if (is.eof()) break;
        if (!is || name_len > (1u << 20)) throw DataError(path + ": corrupt record header");
        TensorRecord r;
        r.name.resize(name_len);
        is.read(r.name.data(), name_len);
        char tag[3];
        is.read(tag, 3);
        if (!is) throw DataError(path + ": truncated record " + r.name);
        if (std::memcmp(tag, "f32", 3) == 0) {
            r.is_f64 = false;
        } else if (std::memcmp(tag, "f64", 3) == 0) {
            r.is_f64 = true;
        } else {
            throw DataError(path + ": unknown dtype tag in record " + r.name);
        }
        std::uint32_t rank = 0;
        is.read(reinterpret_cast<char*>(&rank), 4);
        if (!is || rank > 16) throw DataError(path + ": corrupt rank in record " + r.name);
        r.shape.resize(rank);
        for (std::uint32_t k = 0; k < rank; ++k) {
            std::uint64_t v = 0;
            is.read(reinterpret_cast<char*>(&v), 8);
            r.shape[k] = static_cast<i64>(v);
        }
        if (!is) throw DataError(path + ": truncated shape in record " + r.name);
        const i64 n = r.numel();
        if (r.is_f64) {
            r.f64.resize(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(r.f64.data()), static_cast<std::streamsize>(n * 8));
        } else {
            r.f32.resize(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(r.f32.data()), static_cast<std::streamsize>(n * 4));
        }
        if (!is) throw DataError(path + ": truncated payload in record " + r.name);
        records.push_back(std::move(r));
    }
    return records;
}

template <typename T>
TensorRecord make_record(const std::string& name, const Tensor<T>& t) {
    TensorRecord r;
    r.name = name;
    r.shape = t.shape();
    r.is_f64 = std::is_same_v<T, double>;
    if (r.is_f64) {
        r.f64.resize(static_cast<size_t>(t.numel()));
        for (i64 i = 0; i < t.numel(); ++i) r.f64[static_cast<size_t>(i)] = static_cast<double>(t.at(i));
    } else {
        r.f32.resize(static_cast<size_t>(t.numel()));
        for (i64 i = 0; i < t.numel(); ++i) r.f32[static_cast<size_t>(i)] = static_cast<float>(t.at(i));
    }
    return r;
}

template <typename T>
void apply_records(const std::vector<TensorRecord>& records, ParamMap<T>& params,
                   const std::string& prefix, bool allow_missing) {
    std::vector<std::string> missing, unexpected, mismatched;
    std::vector<const TensorRecord*> in_scope;
    for (const auto& r : records) {
        if (!prefix.empty() && r.name.rfind(prefix, 0) != 0) continue;
        in_scope.push_back(&r);
    }
    for (const auto& e : params.entries()) {
        bool found = false;
        for (const TensorRecord* r : in_scope)
            if (r->name.substr(prefix.size()) == e.name) found = true;
        if (!found) missing.push_back(e.name);
    }
    for (const TensorRecord* r : in_scope) {
        const std::string key = r->name.substr(prefix.size());
        Tensor<T>* t = params.find(key);
        if (!t) {
            unexpected.push_back(r->name);
            continue;
        }
        if (t->shape() != r->shape) {
            mismatched.push_back(r->name + " " + shape_str(r->shape) + " vs " +
                                 shape_str(t->shape()));
            continue;
        }
        for (i64 i = 0; i < t->numel(); ++i)
            t->at(i) = r->is_f64 ? static_cast<T>(r->f64[static_cast<size_t>(i)])
                                 : static_cast<T>(r->f32[static_cast<size_t>(i)]);
    }
    if (allow_missing) missing.clear();
    if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
        std::string msg = "checkpoint does not match the model:";
        if (!missing.empty()) {
            msg += " missing:";
            for (const auto& s : missing) msg += " " + s;
        }
        if (!unexpected.empty()) {
            msg += " unexpected:";
            for (const auto& s : unexpected) msg += " " + s;
        }
        if (!mismatched.empty()) {
            msg += " shape-mismatch:";
            for (const auto& s : mismatched) msg += " " + s;
        }
        throw DataError(msg);
    }
}

template <typename T>
void save_checkpoint(ParamMap<T>& params,
                     const std::vector<std::pair<std::string, Tensor<T>>>& extra,
                     const std::string& path) {
    std::vector<TensorRecord> records;
    records.reserve(params.size() + extra.size());
    for (const auto& e : params.entries()) records.push_back(make_record(e.name, *e.tensor));
    for (const auto& [name, t] : extra) records.push_back(make_record(name, t));
    write_container(path, records);
}

template Tensor<float> to_tensor<float>(const Image&);
template Tensor<double> to_tensor<double>(const Image&);
template Image to_image<float>(const Tensor<float>&);
template Image to_image<double>(const Tensor<double>&);
template TensorRecord make_record<float>(const std::string&, const Tensor<float>&);
template TensorRecord make_record<double>(const std::string&, const Tensor<double>&);
template void apply_records<float>(const std::vector<TensorRecord>&, ParamMap<float>&,
                                   const std::string&, bool);
template void apply_records<double>(const std::vector<TensorRecord>&, ParamMap<double>&,
                                    const std::string&, bool);
template void save_checkpoint<float>(ParamMap<float>&,
                                     const std::vector<std::pair<std::string, Tensor<float>>>&,
                                     const std::string&);
template void save_checkpoint<double>(ParamMap<double>&,
                                      const std::vector<std::pair<std::string, Tensor<double>>>&,
                                      const std::string&);

}  // namespace h3r
