#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "h3r/camera.hpp"
#include "test_support.hpp"

using namespace h3r;
using namespace h3r::testing;



TEST_CASE("pixel_rays: optical axis, pinhole unprojection, shared origin") {
    auto cam = make_camera(1, 1, 2, 2, 5, 5);
    auto rays = pixel_rays(cam);
    const Ray& center = rays[2 * 5 + 2];
    CHECK(center.origin.norm() == doctest::Approx(0));
    CHECK(center.dir.x == doctest::Approx(0));
    CHECK(center.dir.y == doctest::Approx(0));
    CHECK(center.dir.z == doctest::Approx(1));

    auto cam2 = make_camera(1, 1, 0, 0, 3, 3);
    auto rays2 = pixel_rays(cam2);
    const Ray& r10 = rays2[0 * 3 + 1];  // pixel (x=1, y=0)
    const Vec3 expect = Vec3{1, 0, 1}.normalized();
    CHECK(r10.dir.x == doctest::Approx(expect.x));
    CHECK(r10.dir.y == doctest::Approx(expect.y));
    CHECK(r10.dir.z == doctest::Approx(expect.z));

    auto cam3 = make_camera(4, 4, 2, 2, 5, 5, Mat3::identity(), Vec3{0, 0, -5});
    auto rays3 = pixel_rays(cam3);
    const Vec3 center3 = cam3.pose.camera_center();
    CHECK(center3.z == doctest::Approx(5));
    for (const auto& r : rays3) {
        CHECK(r.origin.x == doctest::Approx(center3.x));
        CHECK(r.origin.y == doctest::Approx(center3.y));
        CHECK(r.origin.z == doctest::Approx(center3.z));
    }
}

TEST_CASE("plucker coordinates and origin-slide invariance") {
    PluckerRay p = plucker({{0, 0, 0}, {0, 0, 1}});
    CHECK(p.moment.norm() == doctest::Approx(0));
    CHECK(p.dir.z == doctest::Approx(1));

    PluckerRay q = plucker({{1, 0, 0}, {0, 0, 1}});
    CHECK(q.moment.x == doctest::Approx(0));
    CHECK(q.moment.y == doctest::Approx(-1));
    CHECK(q.moment.z == doctest::Approx(0));

    Rng rng(3);
    for (int it = 0; it < 10000; ++it) {
        const Vec3 o{rng.normal(), rng.normal(), rng.normal()};
        const Vec3 d = Vec3{rng.normal(), rng.normal(), rng.normal()}.normalized();
        const PluckerRay a = plucker({o, d});
        CHECK(std::abs(a.moment.dot(a.dir)) < 1e-6);
        CHECK(std::abs(a.dir.norm() - 1.0) < 1e-6);
        const double s = rng.uniform(-5, 5);
        const PluckerRay b = plucker({o + d * s, d});
        CHECK(std::abs(a.moment.x - b.moment.x) < 1e-6);
        CHECK(std::abs(a.moment.y - b.moment.y) < 1e-6);
        CHECK(std::abs(a.moment.z - b.moment.z) < 1e-6);
    }
}

TEST_CASE("plucker_map rays satisfy the line invariants") {
    Rng rng(9);
    auto cam = random_camera(rng, 16, 12);
    auto map = plucker_map<double>(cam);
    CHECK(map.shape() == Shape{12, 16, 6});
    for (i64 p = 0; p < 12 * 16; ++p) {
        const Vec3 m{map.at(p * 6 + 0), map.at(p * 6 + 1), map.at(p * 6 + 2)};
        const Vec3 d{map.at(p * 6 + 3), map.at(p * 6 + 4), map.at(p * 6 + 5)};
        CHECK(std::abs(m.dot(d)) < 1e-6);
        CHECK(std::abs(d.norm() - 1) < 1e-6);
    }
}

TEST_CASE("inverse-depth sampling") {
    auto s = inverse_depth_samples(1, 100, 3);
    CHECK(s.values[0] == 1.0);
    CHECK(s.values[1] == doctest::Approx(1.98019801980198).epsilon(1e-12));
    CHECK(s.values[2] == 100.0);

    auto dtu = inverse_depth_samples(2.215, 4.525, 2);
    CHECK(dtu.values[0] == 2.215);
    CHECK(dtu.values[1] == 4.525);

    CHECK_THROWS_AS(inverse_depth_samples(5, 5, 4), ContractError);
    CHECK_THROWS_AS(inverse_depth_samples(5, 4.9999, 4), ContractError);

    auto many = inverse_depth_samples(0.7, 42.0, 17);
    const double d0 = 1.0 / many.values[1] - 1.0 / many.values[0];
    for (size_t k = 1; k + 1 < many.values.size(); ++k) {
        const double dk = 1.0 / many.values[k + 1] - 1.0 / many.values[k];
        CHECK(std::abs(dk - d0) < 1e-9);
    }
}

TEST_CASE("homography_warp identity pose returns the input with full mask") {
    Rng rng(21);
    auto cam = random_camera(rng, 40, 32);
    auto src = Tensor<double>::rand_normal({8, 10, 3}, rng, 0, 1);
    for (double depth : {0.5, 2.0, 50.0}) {
        auto r = homography_warp(src, cam, cam, depth);
        for (i64 i = 0; i < src.numel(); ++i)
            CHECK(r.values.at(i) == doctest::Approx(src.at(i)).epsilon(1e-9));
        for (i64 i = 0; i < r.mask.numel(); ++i) CHECK(r.mask.at(i) == 1);
    }
}

TEST_CASE("homography_warp: pure x baseline shifts content by fx*b/z") {
    const i64 n = 16;
    auto cam_i = make_camera(8, 8, (n - 1) / 2.0, (n - 1) / 2.0, n, n);
    auto cam_j = cam_i;
    const double b = 2.0, z = 4.0;
    cam_j.pose.t = Vec3{-b, 0, 0};              // camera center at world x=+b
    const double disp = cam_i.intr.fx * b / z;  // 4 pixels
    Rng rng(2);
    auto src = Tensor<double>::rand_normal({n, n, 2}, rng, 0, 1);
    auto r = homography_warp(src, cam_i, cam_j, z);
    for (i64 y = 0; y < n; ++y)
        for (i64 x = 0; x < n; ++x) {
            const i64 sx = x - static_cast<i64>(disp);
            if (sx < 0) {
                CHECK(r.mask(y, x) == 0);
                continue;
            }
            CHECK(r.mask(y, x) == 1);
            for (i64 c = 0; c < 2; ++c)
                CHECK(r.values(y, x, c) == doctest::Approx(src(y, sx, c)).epsilon(1e-9));
        }
}

TEST_CASE("homography_warp matches the per-pixel oracle on random pairs") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        auto cam_i = random_camera(rng, 48, 48);
        auto cam_j = random_camera(rng, 48, 48);
        auto src = Tensor<double>::rand_normal({12, 12, 2}, rng, 0, 1);
        const double depth = rng.uniform(1.5, 8.0);
        auto got = homography_warp(src, cam_i, cam_j, depth);
        Tensor<double> want, want_mask;
        warp_oracle(src, cam_i, cam_j, depth, want, want_mask);
        for (i64 i = 0; i < want_mask.numel(); ++i) CHECK(got.mask.at(i) == want_mask.at(i));
        for (i64 i = 0; i < want.numel(); ++i)
            CHECK(std::abs(got.values.at(i) - want.at(i)) < 1e-5);
    }
}

TEST_CASE("wrong-depth warp disagrees with the true-depth warp") {
    Rng rng(37);
    auto cam_i = random_camera(rng, 32, 32);
    auto cam_j = cam_i;
    cam_j.pose.t = cam_j.pose.t + Vec3{-0.8, 0, 0};
    auto src = Tensor<double>::rand_normal({16, 16, 1}, rng, 0, 1);
    auto right = homography_warp(src, cam_i, cam_j, 4.0);
    auto wrong = homography_warp(src, cam_i, cam_j, 1.3);
    double diff = 0;
    for (i64 i = 0; i < right.values.numel(); ++i)
        if (right.mask.at(i) > 0 && wrong.mask.at(i) > 0)
            diff = std::max(diff, std::abs(right.values.at(i) - wrong.values.at(i)));
    CHECK(diff > 1e-2);
}

TEST_CASE("plane_sweep stacks per-depth warps in order") {
    Rng rng(41);
    auto cam_i = random_camera(rng, 24, 24);
    auto cam_j = random_camera(rng, 24, 24);
    auto src = Tensor<double>::rand_normal({6, 6, 3}, rng, 0, 1);

    DepthSamples single;
    single.near = single.far = 3.0;
    single.values = {3.0};
    auto vol1 = plane_sweep(src, cam_i, cam_j, single);
    auto w1 = homography_warp(src, cam_i, cam_j, 3.0);
    CHECK(vol1.shape() == Shape{6, 6, 1, 3});
    for (i64 i = 0; i < w1.values.numel(); ++i) CHECK(vol1.at(i) == w1.values.at(i));

    auto samples = inverse_depth_samples(1.5, 9.0, 4);
    auto vol = plane_sweep(src, cam_i, cam_j, samples);
    CHECK(vol.shape() == Shape{6, 6, 4, 3});
    for (int k = 0; k < 4; ++k) {
        auto wk = homography_warp(src, cam_i, cam_j, samples.values[static_cast<size_t>(k)]);
        for (i64 y = 0; y < 6; ++y)
            for (i64 x = 0; x < 6; ++x)
                for (i64 c = 0; c < 3; ++c) CHECK(vol(y, x, k, c) == wk.values(y, x, c));
    }

    auto volid = plane_sweep(src, cam_i, cam_i, samples);
    for (i64 y = 0; y < 6; ++y)
        for (i64 x = 0; x < 6; ++x)
            for (int k = 0; k < 4; ++k)
                for (i64 c = 0; c < 3; ++c)
                    CHECK(volid(y, x, k, c) == doctest::Approx(src(y, x, c)).epsilon(1e-9));
}

TEST_CASE("warp is differentiable wrt the source latent") {
    Rng rng(43);
    auto cam_i = random_camera(rng, 20, 20);
    auto cam_j = random_camera(rng, 20, 20);
    auto src = Tensor<double>::rand_normal({5, 5, 2}, rng, 0, 1);
    auto loss = [&]() {
        auto r = homography_warp(src, cam_i, cam_j, 3.0);
        return sum_all(r.values);
    };
    auto res = h3r::testing::grad_check({src}, loss);
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("normalize_poses: identity, fixed point and relative invariance") {
    Rng rng(47);
    auto cam = random_camera(rng, 8, 8);
    auto single = normalize_poses({cam.pose});
    CHECK(single.poses[0].R.max_abs_diff(Mat3::identity()) < 1e-9);
    CHECK(single.poses[0].t.norm() < 1e-9);

    // mirrored pair: mean pose is the identity by symmetry
    Pose a, b;
    a.R = rotation_axis_angle({0, 1, 0}, 0.2);
    b.R = rotation_axis_angle({0, 1, 0}, -0.2);
    a.t = -(a.R * Vec3{-1, 0, 0});
    b.t = -(b.R * Vec3{1, 0, 0});
    auto sym = normalize_poses({a, b});
    CHECK(sym.mean.R.max_abs_diff(Mat3::identity()) < 1e-9);
    CHECK(sym.mean.t.norm() < 1e-9);
    CHECK(sym.poses[0].R.max_abs_diff(a.R) < 1e-9);

    std::vector<Pose> poses;
    for (int i = 0; i < 4; ++i) poses.push_back(random_camera(rng, 8, 8).pose);
    auto norm = normalize_poses(poses);
    for (size_t i = 0; i < poses.size(); ++i) {
        norm.poses[i].validate(1e-9);
        for (size_t j = 0; j < poses.size(); ++j) {
            const Pose before = Pose::relative(poses[i], poses[j]);
            const Pose after = Pose::relative(norm.poses[i], norm.poses[j]);
            CHECK(before.R.max_abs_diff(after.R) < 1e-6);
            CHECK((before.t - after.t).norm() < 1e-6);
        }
    }
}

TEST_CASE("view_overlap: identical, opposite and half-shifted cameras") {
    auto cam = make_camera(16, 16, 7.5, 7.5, 16, 16);
    CHECK(view_overlap(cam, cam, 4.0) == doctest::Approx(1.0));

    auto back = cam;
    back.pose.R = rotation_axis_angle({0, 1, 0}, 3.14159265358979323846);
    CHECK(view_overlap(cam, back, 4.0) == doctest::Approx(0.0));

    const double depth = 4.0;
    const double half_frame_world = 8.0 * depth / 16.0;  // (w/2) * z / fx
    auto shifted = cam;
    shifted.pose.t = Vec3{-half_frame_world, 0, 0};
    const double ov = view_overlap(cam, shifted, depth);
    CHECK(ov == doctest::Approx(0.5).epsilon(0.08));
}
