#include "h3r/gaussian.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace h3r {

namespace {

void write_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }

float read_f32(std::istream& is) {
    float v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

}  // namespace

void save_splats(const std::vector<Gaussian3D>& splats, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    const std::uint64_t count = splats.size();
    os.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& g : splats) {
        write_f32(os, static_cast<float>(g.center.x));
        write_f32(os, static_cast<float>(g.center.y));
        write_f32(os, static_cast<float>(g.center.z));
        write_f32(os, static_cast<float>(g.scale.x));
        write_f32(os, static_cast<float>(g.scale.y));
        write_f32(os, static_cast<float>(g.scale.z));
        for (int i = 0; i < 4; ++i) write_f32(os, static_cast<float>(g.quat[i]));
        write_f32(os, static_cast<float>(g.opacity));
        write_f32(os, static_cast<float>(g.rgb.x));
        write_f32(os, static_cast<float>(g.rgb.y));
        write_f32(os, static_cast<float>(g.rgb.z));
    }
    if (!os) throw DataError("failed writing splats to " + path);
}

std::vector<Gaussian3D> load_splats(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open splat file " + path);
    std::uint64_t count = 0;
    is.read(reinterpret_cast<char*>(&count), 8);
    if (!is) throw DataError("truncated splat file " + path);
    std::vector<Gaussian3D> splats(count);
    for (auto& g : splats) {
        g.center.x = read_f32(is);
        g.center.y = read_f32(is);
        g.center.z = read_f32(is);
        g.scale.x = read_f32(is);
        g.scale.y = read_f32(is);
        g.scale.z = read_f32(is);
        for (int i = 0; i < 4; ++i) g.quat[i] = read_f32(is);
        g.opacity = read_f32(is);
        g.rgb.x = read_f32(is);
        g.rgb.y = read_f32(is);
        g.rgb.z = read_f32(is);
        if (!is) throw DataError("truncated splat file " + path);
    }
    return splats;
}

template <typename T>
std::vector<Gaussian3D> to_gaussians(const GaussianFields<T>& f) {
    const i64 n = f.count();
    std::vector<Gaussian3D> out(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        Gaussian3D& g = out[static_cast<size_t>(i)];
        g.center = {f.centers.at(i * 3), f.centers.at(i * 3 + 1), f.centers.at(i * 3 + 2)};
        g.scale = {f.scales.at(i * 3), f.scales.at(i * 3 + 1), f.scales.at(i * 3 + 2)};
        for (int j = 0; j < 4; ++j) g.quat[j] = f.quats.at(i * 4 + j);
        g.opacity = f.opacities.at(i);
        g.rgb = {f.rgbs.at(i * 3), f.rgbs.at(i * 3 + 1), f.rgbs.at(i * 3 + 2)};
    }
    return out;
}

template <typename T>
GaussianFields<T> from_gaussians(const std::vector<Gaussian3D>& splats) {
    const i64 n = static_cast<i64>(splats.size());
    GaussianFields<T> f;
    f.centers = Tensor<T>({n, 3});
    f.scales = Tensor<T>({n, 3});
    f.quats = Tensor<T>({n, 4});
    f.opacities = Tensor<T>({n});
    f.rgbs = Tensor<T>({n, 3});
    for (i64 i = 0; i < n; ++i) {
        const Gaussian3D& g = splats[static_cast<size_t>(i)];
        for (int j = 0; j < 3; ++j) {
            f.centers.at(i * 3 + j) = static_cast<T>(g.center[j]);
            f.scales.at(i * 3 + j) = static_cast<T>(g.scale[j]);
            f.rgbs.at(i * 3 + j) = static_cast<T>(g.rgb[j]);
        }
        for (int j = 0; j < 4; ++j) f.quats.at(i * 4 + j) = static_cast<T>(g.quat[j]);
        f.opacities.at(i) = static_cast<T>(g.opacity);
    }
    return f;
}

template std::vector<Gaussian3D> to_gaussians<float>(const GaussianFields<float>&);
template std::vector<Gaussian3D> to_gaussians<double>(const GaussianFields<double>&);
template GaussianFields<float> from_gaussians<float>(const std::vector<Gaussian3D>&);
template GaussianFields<double> from_gaussians<double>(const std::vector<Gaussian3D>&);

}  // namespace h3r
