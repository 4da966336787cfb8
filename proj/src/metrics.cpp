#include "h3r/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "h3r/rasterizer.hpp"

namespace h3r {

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double max_val) {
    if (a.shape() != b.shape())
        throw ShapeError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    double mse = 0;
    const T* pa = a.data();
    const T* pb = b.data();
    for (i64 i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse / (max_val * max_val)));
}

namespace {

std::vector<double> gaussian_window(int radius, double sigma) {
    const int n = 2 * radius + 1;
    std::vector<double> w(static_cast<size_t>(n * n));
    double total = 0;
    for (int y = -radius; y <= radius; ++y)
        for (int x = -radius; x <= radius; ++x) {
            const double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
            w[static_cast<size_t>((y + radius) * n + (x + radius))] = v;
            total += v;
        }
    for (auto& v : w) v /= total;
    return w;
}

}  // namespace

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    if (a.rank() != 2 && a.rank() != 3) throw ShapeError("ssim: expected [H,W] or [H,W,C]");
    const i64 h = a.dim(0), w = a.dim(1);
    const i64 c = a.rank() == 3 ? a.dim(2) : 1;
    constexpr int kRadius = 5;  // 11x11
    if (h < 2 * kRadius + 1 || w < 2 * kRadius + 1)
        throw ContractError("ssim: image must be at least 11x11");

    static const std::vector<double> win = gaussian_window(kRadius, 1.5);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // max_val 1

    const T* pa = a.data();
    const T* pb = b.data();
    double total = 0;
    i64 count = 0;
    for (i64 ch = 0; ch < c; ++ch) {
        for (i64 y = kRadius; y < h - kRadius; ++y) {
            for (i64 x = kRadius; x < w - kRadius; ++x) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int dy = -kRadius; dy <= kRadius; ++dy)
                    for (int dx = -kRadius; dx <= kRadius; ++dx) {
                        const double wv =
                            win[static_cast<size_t>((dy + kRadius) * (2 * kRadius + 1) + dx + kRadius)];
                        const double va = pa[((y + dy) * w + (x + dx)) * c + ch];
                        const double vb = pb[((y + dy) * w + (x + dx)) * c + ch];
                        mx += wv * va;
                        my += wv * vb;
                        mxx += wv * va * va;
                        myy += wv * vb * vb;
                        mxy += wv * va * vb;
                    }
                const double sx = mxx - mx * mx;
                const double sy = myy - my * my;
                const double sxy = mxy - mx * my;
                total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                         ((mx * mx + my * my + c1) * (sx + sy + c2));
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

double scene_overlap(const SceneBundle& scene) {
    const auto ctx = scene.context_ids();
    if (ctx.size() < 2) return 1.0;
    const double mid = std::sqrt(scene.near * scene.far);
    double total = 0;
    int pairs = 0;
    for (size_t i = 0; i < ctx.size(); ++i)
        for (size_t j = 0; j < ctx.size(); ++j) {
            if (i == j) continue;
            total += view_overlap(scene.view(ctx[i]).cam, scene.view(ctx[j]).cam, mid);
            ++pairs;
        }
    return total / pairs;
}

EvalReport evaluate_scenes(H3RModel<float>& model,
                           const std::vector<std::pair<std::string, SceneBundle>>& scenes,
                           const EvalOptions& opt) {
    EvalReport report;
    for (const auto& [name, scene] : scenes) {
        auto ctx = scene.context_ids();
        const auto tgt = scene.target_ids();
        if (tgt.empty()) throw DataError(name + ": scene has no target views with ground truth");
        if (opt.max_context_views > 0 && static_cast<int>(ctx.size()) > opt.max_context_views)
            ctx.resize(static_cast<size_t>(opt.max_context_views));
        if (ctx.size() < 2) throw DataError(name + ": need at least two context views");

        const i64 H = scene.view(ctx[0]).image.height;
        const i64 W = scene.view(ctx[0]).image.width;
        ForwardInput<float> in;
        Tensor<float> images({static_cast<i64>(ctx.size()), H, W, 3});
        for (size_t i = 0; i < ctx.size(); ++i) {
            const SceneView& v = scene.view(ctx[i]);
            std::copy(v.image.rgb.begin(), v.image.rgb.end(),
                      images.data() + static_cast<i64>(i) * H * W * 3);
            in.context_cams.push_back(v.cam);
        }
        in.images = images;
        in.near = scene.near;
        in.far = scene.far;
        if (opt.include_target_poses) {
            for (int t : tgt) in.target_cams.push_back(scene.view(t).cam);
            in.include_target_tokens = true;
        }
        ForwardOutput<float> out = model.forward(in);

        const std::array<float, 3> bg{static_cast<float>(opt.background[0]),
                                      static_cast<float>(opt.background[1]),
                                      static_cast<float>(opt.background[2])};
        double psnr_sum = 0, ssim_sum = 0;
        for (int t : tgt) {
            const SceneView& v = scene.view(t);
            auto rendered = render(out.gaussians, v.cam, bg);
            // clamp to the displayable range before scoring
            Tensor<float> pred = rendered.color;
            for (i64 i = 0; i < pred.numel(); ++i)
                pred.at(i) = std::clamp(pred.at(i), 0.0f, 1.0f);
            Tensor<float> gt = to_tensor<float>(v.image);
            psnr_sum += psnr(gt, pred);
            ssim_sum += ssim(gt, pred);
        }
        SceneScore score;
        score.scene = name;
        score.psnr = psnr_sum / static_cast<double>(tgt.size());
        score.ssim = ssim_sum / static_cast<double>(tgt.size());
        if (opt.bucket == BucketMode::Overlap) {
            const double ov = scene_overlap(scene);
            const double lo = std::floor(std::min(ov, 0.999) * 10.0) / 10.0;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "[%.1f,%.1f)", lo, lo + 0.1);
            score.bucket = buf;
        } else if (opt.bucket == BucketMode::Views) {
            score.bucket = std::to_string(ctx.size()) + "views";
        }
        report.scenes.push_back(score);
    }

    // aggregates: stable bucket order of first appearance, then "all"
    std::vector<std::string> keys;
    for (const auto& s : report.scenes)
        if (std::find(keys.begin(), keys.end(), s.bucket) == keys.end()) keys.push_back(s.bucket);
    for (const auto& key : keys) {
        EvalReport::Aggregate agg;
        agg.bucket = key.empty() ? "all" : key;
        for (const auto& s : report.scenes) {
            if (s.bucket != key) continue;
            agg.psnr += s.psnr;
            agg.ssim += s.ssim;
            ++agg.count;
        }
        agg.psnr /= agg.count;
        agg.ssim /= agg.count;
        report.buckets.push_back(agg);
    }
    if (!keys.empty() && !(keys.size() == 1 && keys[0].empty())) {
        EvalReport::Aggregate all;
        all.bucket = "all";
        for (const auto& s : report.scenes) {
            all.psnr += s.psnr;
            all.ssim += s.ssim;
            ++all.count;
        }
        all.psnr /= all.count;
        all.ssim /= all.count;
        report.buckets.push_back(all);
    }
    return report;
}

void write_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write report " + path);
    os << "scene,bucket,psnr,ssim\n";
    for (const auto& s : report.scenes)
        os << s.scene << "," << (s.bucket.empty() ? "all" : s.bucket) << "," << s.psnr << ","
           << s.ssim << "\n";
    for (const auto& a : report.buckets)
        os << "aggregate," << a.bucket << "," << a.psnr << "," << a.ssim << "\n";
}

template double psnr<float>(const Tensor<float>&, const Tensor<float>&, double);
template double psnr<double>(const Tensor<double>&, const Tensor<double>&, double);
template double ssim<float>(const Tensor<float>&, const Tensor<float>&);
template double ssim<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace h3r
