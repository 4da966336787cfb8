// Times the OpenMP kernels against their serial runs on pipeline-sized
// workloads. Serial and parallel paths are bit-identical by construction;
// this tool reports the wall-clock gap.

#include <chrono>
#include <cstdio>
#include <functional>

#include "h3r/camera.hpp"
#include "h3r/network.hpp"
#include "h3r/ops.hpp"
#include "h3r/parallel.hpp"
#include "h3r/rasterizer.hpp"
#include "h3r/scene_io.hpp"

using namespace h3r;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void row(const char* name, const std::function<void()>& fn, int reps) {
    par::set_enabled(false);
    const double serial = time_ms(fn, reps);
    par::set_enabled(true);
    const double parallel = time_ms(fn, reps);
    std::printf("%-28s %10.2f ms %10.2f ms %8.2fx\n", name, serial, parallel, serial / parallel);
}

}  // namespace

int main() {
    Rng rng(42);
    std::printf("%-28s %13s %13s %9s   (threads: %d)\n", "kernel", "serial", "openmp", "speedup",
                par::max_threads());

    {
        auto a = Tensor<float>::rand_normal({512, 512}, rng, 0, 1);
        auto b = Tensor<float>::rand_normal({512, 512}, rng, 0, 1);
        row("matmul 512x512", [&] { matmul(a, b); }, 5);
    }
    {
        auto x = Tensor<float>::rand_normal({2, 64, 64, 32}, rng, 0, 1);
        auto w = Tensor<float>::rand_normal({3, 3, 32, 32}, rng, 0, 0.1f);
        auto bias = Tensor<float>::zeros({32});
        row("conv2d 64x64x32", [&] { conv2d(x, w, bias, 1, 1); }, 5);
    }

    SyntheticSceneSpec spec;
    spec.seed = 7;
    SceneBundle scene = generate_scene(spec);
    const Camera cam_i = scene.views[0].cam;
    const Camera cam_j = scene.views[1].cam;
    {
        auto latent = Tensor<float>::rand_normal({16, 16, 16}, rng, 0, 1);
        const DepthSamples samples = inverse_depth_samples(scene.near, scene.far, 8);
        row("plane_sweep 16x16x16 d=8", [&] { plane_sweep(latent, cam_i, cam_j, samples); }, 10);
    }

    {
        ModelConfig cfg;
        Rng mrng(3);
        H3RModel<float> model;
        model.init(cfg, mrng);
        ForwardInput<float> in;
        Tensor<float> images({2, 64, 64, 3});
        for (int v = 0; v < 2; ++v) {
            const Image& img = scene.views[static_cast<size_t>(v)].image;
            std::copy(img.rgb.begin(), img.rgb.end(), images.data() + v * 64 * 64 * 3);
            in.context_cams.push_back(scene.views[static_cast<size_t>(v)].cam);
        }
        in.images = images;
        in.near = scene.near;
        in.far = scene.far;
        GaussianFields<float> g = model.forward(in).gaussians;
        const Camera target = scene.views[3].cam;
        row("render 8192 splats 64x64", [&] { render(g, target, {0, 0, 0}); }, 5);

        row("forward+backward full", [&] {
            Tape<float> tape;
            Tape<float>::Scope scope(tape);
            auto out = model.forward(in);
            auto rendered = render(out.gaussians, target, {0, 0, 0});
            auto loss = mean_all(square(rendered.color));
            tape.backward(loss);
            model.params().zero_grads();
        }, 3);
    }
    return 0;
}
