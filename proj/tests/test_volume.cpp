#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "h3r/volume.hpp"

using namespace h3r;

namespace {

// random orthonormal basis of R^c via Gram-Schmidt
Tensor<double> random_rotation(i64 c, Rng& rng) {
    Tensor<double> q({c, c});
    for (i64 i = 0; i < c; ++i) {
        std::vector<double> v(static_cast<size_t>(c));
        for (auto& x : v) x = rng.normal();
        for (i64 j = 0; j < i; ++j) {
            double dot = 0;
            for (i64 k = 0; k < c; ++k) dot += v[static_cast<size_t>(k)] * q(j, k);
            for (i64 k = 0; k < c; ++k) v[static_cast<size_t>(k)] -= dot * q(j, k);
        }
        double n = 0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        for (i64 k = 0; k < c; ++k) q(i, k) = v[static_cast<size_t>(k)] / n;
    }
    return q;
}

}  // namespace

TEST_CASE("channel-count law for all strategies") {
    Rng rng(1);
    for (i64 d : {2, 5}) {
        for (i64 c : {3, 8}) {
            auto x = Tensor<double>::rand_normal({4, 6, c}, rng, 0, 1);
            auto sweep = Tensor<double>::rand_normal({4, 6, d, c}, rng, 0, 1);
            CHECK(build_volume(x, sweep, CostStrategy::Correlation).values.shape() ==
                  Shape{4, 6, d});
            CHECK(build_volume(x, sweep, CostStrategy::Difference).values.shape() ==
                  Shape{4, 6, d * c});
            CHECK(build_volume(x, sweep, CostStrategy::CostFree).values.shape() ==
                  Shape{4, 6, d * c});
            CHECK(volume_channels(CostStrategy::Correlation, d, c) == d);
            CHECK(volume_channels(CostStrategy::Difference, d, c) == d * c);
        }
    }
}

TEST_CASE("difference volume of identical latents is zero") {
    Rng rng(2);
    auto x = Tensor<double>::rand_normal({3, 3, 4}, rng, 0, 1);
    Tensor<double> sweep({3, 3, 5, 4});
    for (i64 y = 0; y < 3; ++y)
        for (i64 xx = 0; xx < 3; ++xx)
            for (i64 k = 0; k < 5; ++k)
                for (i64 c = 0; c < 4; ++c) sweep(y, xx, k, c) = x(y, xx, c);
    auto vol = build_volume(x, sweep, CostStrategy::Difference);
    for (i64 i = 0; i < vol.values.numel(); ++i) CHECK(vol.values.at(i) == 0);
}

TEST_CASE("correlation cell value is the scaled dot product") {
    auto x = Tensor<double>::full({1, 1, 4}, 1.0);
    auto sweep = Tensor<double>::full({1, 1, 1, 4}, 1.0);
    auto vol = build_volume(x, sweep, CostStrategy::Correlation);
    CHECK(vol.values.at(0) == doctest::Approx(2.0));  // 4 / sqrt(4)
}

TEST_CASE("cost-free volume reshapes back to the sweep") {
    Rng rng(3);
    auto x = Tensor<double>::rand_normal({2, 3, 4}, rng, 0, 1);
    auto sweep = Tensor<double>::rand_normal({2, 3, 5, 4}, rng, 0, 1);
    auto vol = build_volume(x, sweep, CostStrategy::CostFree);
    auto back = reshape(vol.values, {2, 3, 5, 4});
    for (i64 i = 0; i < sweep.numel(); ++i) CHECK(back.at(i) == sweep.at(i));
}

TEST_CASE("correlation is invariant under a shared orthonormal feature rotation") {
    Rng rng(5);
    const i64 c = 6;
    auto x = Tensor<double>::rand_normal({3, 2, c}, rng, 0, 1);
    auto sweep = Tensor<double>::rand_normal({3, 2, 4, c}, rng, 0, 1);
    auto q = random_rotation(c, rng);

    auto xr = matmul(reshape(x, {6, c}), q);
    auto sr = matmul(reshape(sweep, {24, c}), q);
    auto vol = build_volume(x, sweep, CostStrategy::Correlation);
    auto vol_r = build_volume(reshape(xr, {3, 2, c}), reshape(sr, {3, 2, 4, c}),
                              CostStrategy::Correlation);
    for (i64 i = 0; i < vol.values.numel(); ++i)
        CHECK(std::abs(vol.values.at(i) - vol_r.values.at(i)) < 1e-5);
}

TEST_CASE("fuse: ablation limits and dense-algebra oracle") {
    Rng rng(7);
    const i64 c = 3, cv = 6, cp = 4;
    auto x = Tensor<double>::rand_normal({2, 2, c}, rng, 0, 1);
    auto sweep = Tensor<double>::rand_normal({2, 2, 2, c}, rng, 0, 1);
    auto vol = build_volume(x, sweep, CostStrategy::CostFree);
    REQUIRE(vol.values.dim(2) == cv);

    FusionWeights<double> fw;
    fw.w1 = Tensor<double>::rand_normal({c, cp}, rng, 0, 1);
    fw.b1 = Tensor<double>::rand_normal({cp}, rng, 0, 1);
    fw.w2 = Tensor<double>::zeros({cv, cp});
    fw.b2 = Tensor<double>::zeros({cp});

    // W2 = 0: the volume is ignored
    auto z = fuse(x, vol, fw);
    auto lin1 = linear(x, fw.w1, fw.b1);
    for (i64 i = 0; i < z.numel(); ++i) CHECK(z.at(i) == doctest::Approx(lin1.at(i)));

    // all weights zero: constant b1 + b2
    fw.w1 = Tensor<double>::zeros({c, cp});
    fw.b2 = Tensor<double>::rand_normal({cp}, rng, 0, 1);
    auto zc = fuse(x, vol, fw);
    for (i64 p = 0; p < 4; ++p)
        for (i64 j = 0; j < cp; ++j)
            CHECK(zc.at(p * cp + j) == doctest::Approx(fw.b1.at(j) + fw.b2.at(j)));

    // random case vs hand-computed product
    fw.w1 = Tensor<double>::rand_normal({c, cp}, rng, 0, 1);
    fw.w2 = Tensor<double>::rand_normal({cv, cp}, rng, 0, 1);
    auto zr = fuse(x, vol, fw);
    for (i64 y = 0; y < 2; ++y)
        for (i64 xx = 0; xx < 2; ++xx)
            for (i64 j = 0; j < cp; ++j) {
                double want = fw.b1.at(j) + fw.b2.at(j);
                for (i64 k = 0; k < c; ++k) want += x(y, xx, k) * fw.w1(k, j);
                for (i64 k = 0; k < cv; ++k) want += vol.values(y, xx, k) * fw.w2(k, j);
                CHECK(zr(y, xx, j) == doctest::Approx(want).epsilon(1e-9));
            }
}

TEST_CASE("multi_view_average: degenerate mean, arithmetic, permutation invariance") {
    Rng rng(11);
    auto mk = [&](double v) {
        LatentVolume<double> lv;
        lv.values = Tensor<double>::full({2, 2, 3}, v);
        lv.strategy = CostStrategy::CostFree;
        return lv;
    };
    auto one = multi_view_average<double>({mk(4.0)});
    for (i64 i = 0; i < one.values.numel(); ++i) CHECK(one.values.at(i) == 4.0);

    auto two = multi_view_average<double>({mk(2.0), mk(4.0)});
    for (i64 i = 0; i < two.values.numel(); ++i) CHECK(two.values.at(i) == doctest::Approx(3.0));

    LatentVolume<double> a = mk(0), b = mk(0), c = mk(0);
    a.values = Tensor<double>::rand_normal({2, 2, 3}, rng, 0, 1);
    b.values = Tensor<double>::rand_normal({2, 2, 3}, rng, 0, 1);
    c.values = Tensor<double>::rand_normal({2, 2, 3}, rng, 0, 1);
    auto abc = multi_view_average<double>({a, b, c});
    auto cab = multi_view_average<double>({c, a, b});
    for (i64 i = 0; i < abc.values.numel(); ++i)
        CHECK(abc.values.at(i) == doctest::Approx(cab.values.at(i)).epsilon(1e-12));

    // idempotent on identical inputs
    auto same = multi_view_average<double>({a, a, a});
    for (i64 i = 0; i < same.values.numel(); ++i)
        CHECK(same.values.at(i) == doctest::Approx(a.values.at(i)).epsilon(1e-12));

    CHECK_THROWS_AS(multi_view_average<double>({}), ContractError);
    LatentVolume<double> mixed = mk(1.0);
    mixed.strategy = CostStrategy::Difference;
    CHECK_THROWS_AS(multi_view_average<double>({a, mixed}), ContractError);
}

TEST_CASE("gradients flow through every strategy and the fusion") {
    Rng rng(13);
    const i64 c = 4, d = 3, cp = 5;
    auto x = Tensor<double>::rand_normal({2, 3, c}, rng, 0, 1);
    auto sweep = Tensor<double>::rand_normal({2, 3, d, c}, rng, 0, 1);
    for (auto strategy :
         {CostStrategy::Correlation, CostStrategy::Difference, CostStrategy::CostFree}) {
        FusionWeights<double> fw;
        fw.w1 = Tensor<double>::rand_normal({c, cp}, rng, 0, 0.7);
        fw.b1 = Tensor<double>::rand_normal({cp}, rng, 0, 0.3);
        fw.w2 = Tensor<double>::rand_normal({volume_channels(strategy, d, c), cp}, rng, 0, 0.7);
        fw.b2 = Tensor<double>::rand_normal({cp}, rng, 0, 0.3);
        auto loss = [&]() {
            auto vol = build_volume(x, sweep, strategy);
            return mean_all(square(fuse(x, vol, fw)));
        };
        auto res = h3r::testing::grad_check({x, sweep, fw.w1, fw.b1, fw.w2, fw.b2}, loss);
        CHECK(res.max_rel_err < 1e-3);
    }
}
