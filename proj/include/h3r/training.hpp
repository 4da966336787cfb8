#pragma once

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "h3r/network.hpp"
#include "h3r/rasterizer.hpp"
#include "h3r/scene_io.hpp"

namespace h3r {

template <typename T>
struct LossWeights {
    T lambda_perceptual = T(0.05);
    bool perceptual_enabled = false;  // hook off by default; lambda keeps its value
    std::function<Tensor<T>(Tensor<T>, Tensor<T>)> perceptual_hook;
    bool gradient_loss = true;
};

// Forward differences along x and y, zero-padded on the last column/row.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> image_gradient(Tensor<T> img);

// MSE + lambda * perceptual hook + MAE of the image gradients.
template <typename T>
Tensor<T> reconstruction_loss(Tensor<T> gt, Tensor<T> pred, const LossWeights<T>& weights);

struct Schedule {
    double peak_lr = 1e-4;
    double min_lr = 5e-5;
    i64 warmup_steps = 3000;
    i64 decay_until = 150000;  // cosine reaches min_lr here, constant after

    void validate() const {
        if (min_lr > peak_lr) throw ConfigError("schedule: min_lr must be <= peak_lr");
        if (warmup_steps >= decay_until)
            throw ConfigError("schedule: warmup must end before the decay horizon");
    }
};

double lr_at(i64 step, const Schedule& s);

template <typename T>
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // weight decay 0
    i64 step = 0;
    std::vector<std::vector<T>> m, v;
    void init(const ParamMap<T>& params);
};

// One bias-corrected Adam update from the accumulated grads.
template <typename T>
void adam_step(ParamMap<T>& params, AdamState<T>& state, double lr);

template <typename T>
double global_grad_norm(ParamMap<T>& params);

// Scales all grads to max_norm when the global L2 norm exceeds it; returns
// the pre-clip norm.
template <typename T>
double clip_global_norm(ParamMap<T>& params, double max_norm);

template <typename T>
struct EmaState {
    double decay = 0.999;
    std::vector<std::pair<std::string, Tensor<T>>> shadow;

    void init(ParamMap<T>& params);
    void update(ParamMap<T>& params);       // shadow <- decay*shadow + (1-decay)*param
    void copy_to(ParamMap<T>& params) const;
    bool empty() const { return shadow.empty(); }
};

struct TrainConfig {
    Schedule schedule{3e-4, 1.5e-4, 100, 2000};  // desk-scale defaults
    i64 steps = 2000;
    double grad_clip = 0.5;
    double target_pose_prob = 0.5;
    double hflip_prob = 0.5;
    double aux_weight = 1.0;
    double ema_decay = 0.999;
    bool use_gradient_loss = true;
    bool aux_enabled = true;
    std::array<double, 3> background{0, 0, 0};
    std::uint64_t seed = 7;
    i64 targets_per_step = 0;   // 0 = supervise every target view
    i64 min_context_views = 0;  // 0 = use every context view; otherwise a
    i64 max_context_views = 0;  // random count in [min,max] is sampled per step
    i64 grad_accum = 1;
    i64 log_every = 25;
    i64 checkpoint_every = 1000;
};

struct StepMetrics {
    i64 step = 0;
    double loss = 0, mse = 0, grad_mae = 0, aux = 0;
    double psnr_train = 0;
    double lr = 0;
    double grad_norm = 0;       // pre-clip global L2 norm
    double grad_norm_post = 0;  // after clipping, <= grad_clip
    bool aborted = false;  // non-finite loss; parameters untouched
};

// Owns the optimizer and EMA state around one model; one scene per step.
class Trainer {
public:
    Trainer(H3RModel<float>& model, TrainConfig cfg);

    StepMetrics step(const SceneBundle& scene);
    i64 steps_done() const { return step_count_; }
    EmaState<float>& ema() { return ema_; }
    ParamMap<float>& params() { return params_; }
    Rng& rng() { return rng_; }
    const TrainConfig& config() const { return cfg_; }

    // Renders every target view and averages the losses; shared by the
    // training step and by loss probes in tests.
    struct LossParts {
        Tensor<float> total, render, aux;
        double mse = 0, grad_mae = 0;
    };
    LossParts compute_loss(const SceneBundle& scene, bool include_target_tokens,
                           bool aux_enabled, const std::vector<int>& target_subset = {},
                           const std::vector<int>& context_subset = {});

private:
    H3RModel<float>& model_;
    TrainConfig cfg_;
    ParamMap<float> params_;
    AdamState<float> adam_;
    EmaState<float> ema_;
    Rng rng_;
    i64 step_count_ = 0;
    i64 accum_count_ = 0;
};

}  // namespace h3r
