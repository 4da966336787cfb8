#pragma once

#include <string>
#include <vector>

#include "h3r/network.hpp"
#include "h3r/scene_io.hpp"

namespace h3r {

// Peak signal-to-noise ratio in dB, capped at 99 for identical images.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double max_val = 1.0);

// Mean local SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// valid windows only, per channel then averaged.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b);

enum class BucketMode { None, Overlap, Views };

inline BucketMode parse_bucket(const std::string& s) {
    if (s == "none") return BucketMode::None;
    if (s == "overlap") return BucketMode::Overlap;
    if (s == "views") return BucketMode::Views;
    throw ConfigError("unknown bucket mode: " + s + " (expected overlap|views|none)");
}

struct SceneScore {
    std::string scene;
    std::string bucket;  // empty when unbucketed
    double psnr = 0, ssim = 0;
};

struct EvalReport {
    std::vector<SceneScore> scenes;
    struct Aggregate {
        std::string bucket;
        int count = 0;
        double psnr = 0, ssim = 0;
    };
    std::vector<Aggregate> buckets;  // per bucket, plus an "all" row
};

struct EvalOptions {
    BucketMode bucket = BucketMode::None;
    bool include_target_poses = false;
    std::array<double, 3> background{0, 0, 0};
    int max_context_views = 0;  // 0 = use every context view
};

// Renders each scene's target views with the model and scores them.
EvalReport evaluate_scenes(H3RModel<float>& model,
                           const std::vector<std::pair<std::string, SceneBundle>>& scenes,
                           const EvalOptions& opt);

void write_report_csv(const EvalReport& report, const std::string& path);

// Mean pairwise context overlap at the scene's inverse-depth midpoint.
double scene_overlap(const SceneBundle& scene);

}  // namespace h3r
