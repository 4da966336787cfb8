#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "grad_check.hpp"
#include "h3r/parallel.hpp"
#include "h3r/rasterizer.hpp"

using namespace h3r;

namespace {

Camera test_camera(i64 w = 8, i64 h = 8, double fx = 8) {
    Camera c;
    c.intr = {fx, fx, (w - 1) / 2.0, (h - 1) / 2.0, w, h};
    return c;
}

GaussianFields<double> make_fields(const std::vector<Gaussian3D>& splats) {
    return from_gaussians<double>(splats);
}

Gaussian3D splat_at_pixel(const Camera& cam, double px, double py, double z, double scale,
                          double opacity, Vec3 rgb) {
    Gaussian3D g;
    g.center = {(px - cam.intr.cx) * z / cam.intr.fx, (py - cam.intr.cy) * z / cam.intr.fy, z};
    g.scale = {scale, scale, scale};
    g.opacity = opacity;
    g.rgb = rgb;
    return g;
}

std::vector<Gaussian3D> random_splats(Rng& rng, int n, const Camera& cam) {
    std::vector<Gaussian3D> splats;
    for (int i = 0; i < n; ++i) {
        Gaussian3D g = splat_at_pixel(cam, rng.uniform(1.3, 6.3), rng.uniform(1.3, 6.3),
                                      rng.uniform(1.5, 4.0) + 0.37 * i, rng.uniform(0.1, 0.45),
                                      rng.uniform(0.2, 0.75),
                                      {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)});
        const Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
        const double angle = rng.uniform(-0.6, 0.6);
        const double s = std::sin(angle / 2), c = std::cos(angle / 2);
        const Vec3 a = axis.normalized();
        g.quat[0] = c;
        g.quat[1] = s * a.x;
        g.quat[2] = s * a.y;
        g.quat[3] = s * a.z;
        g.scale = {rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3)};
        splats.push_back(g);
    }
    return splats;
}

}  // namespace

TEST_CASE("project: on-axis closed form, culling, 1/z law") {
    auto cam = test_camera(16, 16, 16);
    RenderOptions opt;
    const double s = 0.25, z = 2.0;
    Gaussian3D g = splat_at_pixel(cam, cam.intr.cx, cam.intr.cy, z, s, 0.7, {1, 0, 0});
    auto splats = project(make_fields({g}), cam, opt);
    REQUIRE(splats.size() == 1);
    const double expect = (cam.intr.fx * s / z) * (cam.intr.fx * s / z);
    CHECK(splats[0].cov[0] - opt.lowpass == doctest::Approx(expect).epsilon(1e-9));
    CHECK(splats[0].cov[2] - opt.lowpass == doctest::Approx(expect).epsilon(1e-9));
    CHECK(splats[0].cov[1] == doctest::Approx(0).epsilon(1e-12));
    CHECK(splats[0].depth == doctest::Approx(z));

    Gaussian3D behind = g;
    behind.center.z = -1.0;
    Gaussian3D at_zero = g;
    at_zero.center = {0, 0, 0};
    auto culled = project(make_fields({behind, at_zero, g}), cam, opt);
    REQUIRE(culled.size() == 1);
    CHECK(culled[0].index == 2);

    Gaussian3D far_g = g;
    far_g.center.z = 2 * z;
    far_g.center.x *= 2;  // stays on the same pixel ray
    far_g.center.y *= 2;
    auto two = project(make_fields({g, far_g}), cam, opt);
    const double sig_near = std::sqrt(two[0].cov[0] - opt.lowpass);
    const double sig_far = std::sqrt(two[1].cov[0] - opt.lowpass);
    CHECK(sig_near == doctest::Approx(2 * sig_far).epsilon(1e-9));
}

TEST_CASE("render: empty scene gives background and zero alpha") {
    auto cam = test_camera();
    GaussianFields<double> empty;
    empty.centers = Tensor<double>::zeros({1, 3});
    empty.centers.at(2) = -5;  // culled
    empty.scales = Tensor<double>::full({1, 3}, 0.1);
    empty.quats = Tensor<double>::zeros({1, 4});
    empty.quats.at(0) = 1;
    empty.opacities = Tensor<double>::full({1}, 0.5);
    empty.rgbs = Tensor<double>::full({1, 3}, 1.0);
    auto out = render(empty, cam, {0.2, 0.4, 0.6});
    for (i64 p = 0; p < 64; ++p) {
        CHECK(out.color.at(p * 3 + 0) == doctest::Approx(0.2));
        CHECK(out.color.at(p * 3 + 1) == doctest::Approx(0.4));
        CHECK(out.color.at(p * 3 + 2) == doctest::Approx(0.6));
        CHECK(out.alpha.at(p) == 0);
    }
}

TEST_CASE("render: opaque splat composites as 0.99 rgb + 0.01 background") {
    auto cam = test_camera(8, 8, 8);
    // pixel (3,3) with cx=3.5: offsets are powers of two, projection exact
    Gaussian3D g = splat_at_pixel(cam, 3.0, 3.0, 2.0, 0.5, 1.0, {1, 0, 0});
    auto out = render(make_fields({g}), cam, {0, 0, 1});
    const i64 p = 3 * 8 + 3;
    CHECK(out.color.at(p * 3 + 0) == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(out.color.at(p * 3 + 2) == doctest::Approx(0.01).epsilon(1e-9));
    CHECK(out.alpha.at(p) == doctest::Approx(0.99).epsilon(1e-9));
}

TEST_CASE("render: two-splat front-to-back closed form") {
    auto cam = test_camera(8, 8, 8);
    Gaussian3D red = splat_at_pixel(cam, 3.0, 3.0, 2.0, 0.4, 0.6, {1, 0, 0});
    Gaussian3D blue = splat_at_pixel(cam, 3.0, 3.0, 4.0, 0.8, 1.0, {0, 0, 1});
    auto out = render(make_fields({red, blue}), cam, {0.5, 0.5, 0.5});
    const i64 p = 3 * 8 + 3;
    // C = 0.6 red + 0.4*0.99 blue + 0.4*0.01 bg
    CHECK(out.color.at(p * 3 + 0) == doctest::Approx(0.6 + 0.4 * 0.01 * 0.5).epsilon(1e-6));
    CHECK(out.color.at(p * 3 + 2) == doctest::Approx(0.4 * 0.99 + 0.4 * 0.01 * 0.5).epsilon(1e-6));
    CHECK(out.alpha.at(p) == doctest::Approx(1 - 0.4 * 0.01).epsilon(1e-6));
}

TEST_CASE("permutation invariance is bit-exact") {
    Rng rng(3);
    auto cam = test_camera(16, 16, 14);
    auto splats = random_splats(rng, 12, cam);
    auto base = render(make_fields(splats), cam, {0.1, 0.2, 0.3});
    std::vector<Gaussian3D> shuffled = splats;
    for (size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    auto perm = render(make_fields(shuffled), cam, {0.1, 0.2, 0.3});
    CHECK(std::memcmp(base.color.data(), perm.color.data(),
                      sizeof(double) * static_cast<size_t>(base.color.numel())) == 0);
    CHECK(std::memcmp(base.alpha.data(), perm.alpha.data(),
                      sizeof(double) * static_cast<size_t>(base.alpha.numel())) == 0);
}

TEST_CASE("tiled renderer equals the naive reference bit-exactly") {
    Rng rng(5);
    for (int trial = 0; trial < 3; ++trial) {
        auto cam = test_camera(37, 23, 20);  // sizes that straddle tile boundaries
        auto splats = random_splats(rng, 40, cam);
        auto fields = make_fields(splats);
        auto tiled = render(fields, cam, {0.3, 0.3, 0.3});
        auto naive = render_reference(fields, cam, {0.3, 0.3, 0.3});
        CHECK(std::memcmp(tiled.color.data(), naive.color.data(),
                          sizeof(double) * static_cast<size_t>(tiled.color.numel())) == 0);
        CHECK(std::memcmp(tiled.alpha.data(), naive.alpha.data(),
                          sizeof(double) * static_cast<size_t>(tiled.alpha.numel())) == 0);
    }
}

TEST_CASE("serial and parallel rasterization agree bit-exactly, forward and backward") {
    Rng rng(7);
    auto cam = test_camera(32, 32, 28);
    auto splats = random_splats(rng, 30, cam);

    auto run = [&](bool parallel) {
        par::set_enabled(parallel);
        auto fields = make_fields(splats);
        fields.centers.set_requires_grad(true);
        fields.scales.set_requires_grad(true);
        fields.quats.set_requires_grad(true);
        fields.opacities.set_requires_grad(true);
        fields.rgbs.set_requires_grad(true);
        Tape<double> tape;
        Tensor<double> color;
        {
            Tape<double>::Scope scope(tape);
            auto out = render(fields, cam, {0.2, 0.1, 0.4});
            color = out.color;
            auto loss = mean_all(square(out.color));
            tape.backward(loss);
        }
        par::set_enabled(true);
        return std::make_pair(color, fields.centers.grad());
    };
    auto [color_s, grad_s] = run(false);
    auto [color_p, grad_p] = run(true);
    CHECK(std::memcmp(color_s.data(), color_p.data(),
                      sizeof(double) * static_cast<size_t>(color_s.numel())) == 0);
    CHECK(std::memcmp(grad_s.data(), grad_p.data(),
                      sizeof(double) * static_cast<size_t>(grad_s.numel())) == 0);
}

TEST_CASE("per-pixel alpha stays in [0,1]; colors stay in the convex hull") {
    Rng rng(9);
    auto cam = test_camera(24, 24, 20);
    auto splats = random_splats(rng, 60, cam);
    auto out = render(make_fields(splats), cam, {0.5, 0.5, 0.5});
    for (i64 p = 0; p < out.alpha.numel(); ++p) {
        CHECK(out.alpha.at(p) >= 0);
        CHECK(out.alpha.at(p) <= 1);
        for (int ch = 0; ch < 3; ++ch) {
            CHECK(out.color.at(p * 3 + ch) >= -1e-12);
            CHECK(out.color.at(p * 3 + ch) <= 1 + 1e-12);
        }
    }
}

TEST_CASE("backward: rgb gradient of a single splat matches the hand formula") {
    auto cam = test_camera(8, 8, 8);
    Gaussian3D g = splat_at_pixel(cam, 3.2, 3.7, 2.0, 0.4, 0.55, {0.8, 0.3, 0.1});
    auto fields = make_fields({g});
    fields.rgbs.set_requires_grad(true);

    Tensor<double> gt = Tensor<double>::full({8, 8, 3}, 0.25);
    Tape<double> tape;
    Tensor<double> color;
    {
        Tape<double>::Scope scope(tape);
        auto out = render(fields, cam, {0, 0, 0});
        color = out.color;
        auto loss = sum_all(square(sub(out.color, gt)));
        tape.backward(loss);
    }

    // alpha per covered pixel from the projected splat
    RenderOptions opt;
    auto proj = project(make_fields({g}), cam, opt);
    REQUIRE(proj.size() == 1);
    const auto& s = proj[0];
    double want[3] = {0, 0, 0};
    for (i64 py = s.y0; py < s.y1; ++py)
        for (i64 px = s.x0; px < s.x1; ++px) {
            const double dx = px - s.u, dy = py - s.v;
            const double power =
                0.5 * (s.inv[0] * dx * dx + s.inv[2] * dy * dy) + s.inv[1] * dx * dy;
            double a = s.opacity * std::exp(-power);
            a = std::min(a, opt.alpha_clamp);
            if (a < opt.alpha_min) continue;
            const i64 p = py * 8 + px;
            for (int ch = 0; ch < 3; ++ch)
                want[ch] += 2 * (color.at(p * 3 + ch) - 0.25) * a;  // T = 1
        }
    for (int ch = 0; ch < 3; ++ch)
        CHECK(fields.rgbs.grad_vec()[static_cast<size_t>(ch)] ==
              doctest::Approx(want[ch]).epsilon(1e-9));
}

TEST_CASE("backward: occluded splat sees only the leaked transmittance") {
    auto cam = test_camera(8, 8, 8);
    // front splat wide enough that alpha clamps at 0.99 across the frame
    Gaussian3D front = splat_at_pixel(cam, 3.5, 3.5, 2.0, 12.0, 1.0, {1, 1, 1});
    Gaussian3D back = splat_at_pixel(cam, 3.0, 3.0, 4.0, 1.6, 0.9, {0.2, 0.2, 0.2});

    auto run = [&](std::vector<Gaussian3D> splats, i64 back_index) {
        auto fields = make_fields(splats);
        fields.rgbs.set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto out = render(fields, cam, {0, 0, 0});
        auto loss = sum_all(out.color);  // linear: grad is exactly alpha*T per pixel
        tape.backward(loss);
        auto g = fields.rgbs.grad();
        double total = 0;
        for (i64 j = 0; j < 3; ++j) total += std::abs(g.at(back_index * 3 + j));
        return total;
    };
    const double occluded = run({front, back}, 1);
    const double alone = run({back}, 0);
    CHECK(occluded > 0);
    CHECK(occluded == doctest::Approx(0.01 * alone).epsilon(1e-6));
}

TEST_CASE("finite differences validate the full backward on a 3-splat scene") {
    Rng rng(11);
    auto cam = test_camera(8, 8, 8);
    auto splats = random_splats(rng, 3, cam);
    auto fields = make_fields(splats);
    Tensor<double> gt = Tensor<double>::rand_normal({8, 8, 3}, rng, 0.5, 0.2);

    auto loss = [&]() {
        auto out = render(fields, cam, {0.1, 0.1, 0.1});
        return mean_all(square(sub(out.color, gt)));
    };
    auto res = h3r::testing::grad_check(
        {fields.centers, fields.scales, fields.quats, fields.opacities, fields.rgbs}, loss, 1e-5);
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("alpha output is differentiable") {
    Rng rng(13);
    auto cam = test_camera(8, 8, 8);
    auto splats = random_splats(rng, 2, cam);
    auto fields = make_fields(splats);
    auto loss = [&]() {
        auto out = render(fields, cam, {0, 0, 0});
        return mean_all(square(out.alpha));
    };
    auto res = h3r::testing::grad_check({fields.opacities, fields.centers}, loss, 1e-5);
    CHECK(res.max_rel_err < 1e-3);
}
