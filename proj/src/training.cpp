#include "h3r/training.hpp"

#include <algorithm>
#include <cmath>

namespace h3r {

template <typename T>
std::pair<Tensor<T>, Tensor<T>> image_gradient(Tensor<T> img) {
    if (img.rank() != 3) throw ShapeError("image_gradient: expected [H,W,C]");
    const i64 h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (h < 2 || w < 2) throw ContractError("image_gradient: image must be at least 2x2");
    Tensor<T> zcol = Tensor<T>::zeros({h, 1, c});
    Tensor<T> zrow = Tensor<T>::zeros({1, w, c});
    auto gx = concat<T>({sub(slice(img, 1, 1, w - 1), slice(img, 1, 0, w - 1)), zcol}, 1);
    auto gy = concat<T>({sub(slice(img, 0, 1, h - 1), slice(img, 0, 0, h - 1)), zrow}, 0);
    return {gx, gy};
}

template <typename T>
Tensor<T> reconstruction_loss(Tensor<T> gt, Tensor<T> pred, const LossWeights<T>& weights) {
    if (gt.shape() != pred.shape())
        throw ShapeError("reconstruction_loss: shape mismatch " + shape_str(gt.shape()) +
                         " vs " + shape_str(pred.shape()));
    Tensor<T> total = mean_all(square(sub(pred, gt)));
    if (weights.gradient_loss) {
        auto [gx_t, gy_t] = image_gradient(gt);
        auto [gx_p, gy_p] = image_gradient(pred);
        auto mae = mul_scalar(
            add(mean_all(abs_op(sub(gx_p, gx_t))), mean_all(abs_op(sub(gy_p, gy_t)))),
            T(0.5));
        total = add(total, mae);
    }
    if (weights.perceptual_enabled && weights.perceptual_hook)
        total = add(total, mul_scalar(weights.perceptual_hook(gt, pred), weights.lambda_perceptual));
    return total;
}

double lr_at(i64 step, const Schedule& s) {
    s.validate();
    if (step < 0) throw ContractError("lr_at: negative step");
    if (step < s.warmup_steps)
        return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    if (step >= s.decay_until) return s.min_lr;
    const double progress = static_cast<double>(step - s.warmup_steps) /
                            static_cast<double>(s.decay_until - s.warmup_steps);
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <typename T>
void AdamState<T>::init(const ParamMap<T>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& e : params.entries()) {
        m.emplace_back(static_cast<size_t>(e.tensor->numel()), T(0));
        v.emplace_back(static_cast<size_t>(e.tensor->numel()), T(0));
    }
}

template <typename T>
void adam_step(ParamMap<T>& params, AdamState<T>& state, double lr) {
    if (state.m.size() != params.size())
        throw ContractError("adam_step: state does not match parameter count");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& p = *params.entries()[pi].tensor;
        if (static_cast<i64>(state.m[pi].size()) != p.numel())
            throw ShapeError("adam_step: moment shape mismatch for " + params.entries()[pi].name);
        p.ensure_grad();
        const std::vector<T>& g = p.grad_vec();
        T* pm = state.m[pi].data();
        T* pv = state.v[pi].data();
        T* pd = p.data();
        const i64 n = p.numel();
        for (i64 i = 0; i < n; ++i) {
            const T gi = g[static_cast<size_t>(i)];
            pm[i] = b1 * pm[i] + (T(1) - b1) * gi;
            pv[i] = b2 * pv[i] + (T(1) - b2) * gi * gi;
            const double mhat = static_cast<double>(pm[i]) / bc1;
            const double vhat = static_cast<double>(pv[i]) / bc2;
            pd[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

template <typename T>
double global_grad_norm(ParamMap<T>& params) {
    double sq = 0;
    for (const auto& e : params.entries()) {
        if (!e.tensor->has_grad()) continue;
        for (T g : e.tensor->grad_vec()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(sq);
}

template <typename T>
double clip_global_norm(ParamMap<T>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto& e : params.entries()) {
            if (!e.tensor->has_grad()) continue;
            T* g = e.tensor->grad_data();
            for (i64 i = 0; i < e.tensor->numel(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

template <typename T>
void EmaState<T>::init(ParamMap<T>& params) {
    shadow.clear();
    for (const auto& e : params.entries()) shadow.emplace_back(e.name, e.tensor->clone());
}

template <typename T>
void EmaState<T>::update(ParamMap<T>& params) {
    if (shadow.size() != params.size()) throw ContractError("ema: state/parameter mismatch");
    const T d = static_cast<T>(decay);
    for (size_t i = 0; i < shadow.size(); ++i) {
        T* s = shadow[i].second.data();
        const T* p = params.entries()[i].tensor->data();
        const i64 n = shadow[i].second.numel();
        for (i64 k = 0; k < n; ++k) s[k] = d * s[k] + (T(1) - d) * p[k];
    }
}

template <typename T>
void EmaState<T>::copy_to(ParamMap<T>& params) const {
    if (shadow.size() != params.size()) throw ContractError("ema: state/parameter mismatch");
    for (size_t i = 0; i < shadow.size(); ++i) {
        T* p = params.entries()[i].tensor->data();
        const T* s = shadow[i].second.data();
        for (i64 k = 0; k < shadow[i].second.numel(); ++k) p[k] = s[k];
    }
}

Trainer::Trainer(H3RModel<float>& model, TrainConfig cfg)
    : model_(model), cfg_(cfg), rng_(cfg.seed) {
    cfg_.schedule.validate();
    params_ = model_.trainable_params();
    adam_.init(params_);
    ema_.decay = cfg_.ema_decay;
    ema_.init(params_);
}

Trainer::LossParts Trainer::compute_loss(const SceneBundle& scene, bool include_target_tokens,
                                         bool aux_enabled,
                                         const std::vector<int>& target_subset,
                                         const std::vector<int>& context_subset) {
    std::vector<int> ctx = scene.context_ids();
    if (!context_subset.empty()) ctx = context_subset;
    std::vector<int> tgt = scene.target_ids();
    if (!target_subset.empty()) tgt = target_subset;
    if (ctx.size() < 2) throw DataError("training scene needs at least two context views");
    if (tgt.empty()) throw DataError("training scene needs at least one target view");

    const i64 H = scene.view(ctx[0]).image.height;
    const i64 W = scene.view(ctx[0]).image.width;
    Tensor<float> images({static_cast<i64>(ctx.size()), H, W, 3});
    ForwardInput<float> in;
    for (size_t i = 0; i < ctx.size(); ++i) {
        const SceneView& v = scene.view(ctx[i]);
        std::copy(v.image.rgb.begin(), v.image.rgb.end(), images.data() + static_cast<i64>(i) * H * W * 3);
        in.context_cams.push_back(v.cam);
    }
    in.images = images;
    for (int t : tgt) in.target_cams.push_back(scene.view(t).cam);
    in.include_target_tokens = include_target_tokens;

    // scene depth range drives both hypothesis banks
    in.near = scene.near;
    in.far = scene.far;
    ForwardOutput<float> out = model_.forward(in);

    LossWeights<float> lw;
    lw.gradient_loss = cfg_.use_gradient_loss;
    const std::array<float, 3> bg{static_cast<float>(cfg_.background[0]),
                                  static_cast<float>(cfg_.background[1]),
                                  static_cast<float>(cfg_.background[2])};

    LossParts parts;
    Tensor<float> render_sum;
    double mse_sum = 0, mae_sum = 0;
    for (size_t k = 0; k < tgt.size(); ++k) {
        const SceneView& v = scene.view(tgt[k]);
        auto rendered = render(out.gaussians, v.cam, bg);
        Tensor<float> gt = to_tensor<float>(v.image);
        Tensor<float> loss_k = reconstruction_loss(gt, rendered.color, lw);
        render_sum = render_sum.defined() ? add(render_sum, loss_k) : loss_k;

        // detached diagnostics
        Tensor<float> diff = sub(rendered.color.detach(), gt);
        mse_sum += mean_all(square(diff)).item();
        auto [gxd, gyd] = image_gradient(diff);
        mae_sum += 0.5 * (mean_all(abs_op(gxd)).item() + mean_all(abs_op(gyd)).item());
    }
    parts.render = mul_scalar(render_sum, 1.0f / static_cast<float>(tgt.size()));
    parts.mse = mse_sum / static_cast<double>(tgt.size());
    parts.grad_mae = mae_sum / static_cast<double>(tgt.size());

    parts.total = parts.render;
    if (aux_enabled && !out.aux_images.empty()) {
        Tensor<float> aux_sum;
        for (size_t k = 0; k < out.aux_images.size(); ++k) {
            Tensor<float> gt = to_tensor<float>(scene.view(tgt[k]).image);
            Tensor<float> loss_k = reconstruction_loss(gt, out.aux_images[k], lw);
            aux_sum = aux_sum.defined() ? add(aux_sum, loss_k) : loss_k;
        }
        parts.aux = mul_scalar(aux_sum, 1.0f / static_cast<float>(out.aux_images.size()));
        parts.total = add(parts.total, mul_scalar(parts.aux, static_cast<float>(cfg_.aux_weight)));
    }
    return parts;
}

StepMetrics Trainer::step(const SceneBundle& scene) {
    StepMetrics m;
    m.step = step_count_;
    m.lr = lr_at(step_count_, cfg_.schedule);

    const bool flip = rng_.uniform() < cfg_.hflip_prob;
    const bool with_targets = cfg_.target_pose_prob > 0 && rng_.uniform() < cfg_.target_pose_prob;
    const SceneBundle* batch = &scene;
    SceneBundle flipped;
    if (flip) {
        flipped = hflip_scene(scene);
        batch = &flipped;
    }

    std::vector<int> subset;
    if (cfg_.targets_per_step > 0) {
        std::vector<int> all = batch->target_ids();
        for (i64 k = 0; k < cfg_.targets_per_step && !all.empty(); ++k) {
            const size_t pick = rng_.below(all.size());
            subset.push_back(all[pick]);
            all.erase(all.begin() + static_cast<std::ptrdiff_t>(pick));
        }
    }
    std::vector<int> ctx_subset;
    if (cfg_.max_context_views > 0) {
        std::vector<int> all = batch->context_ids();
        const i64 lo = std::max<i64>(2, cfg_.min_context_views);
        const i64 hi = std::min<i64>(cfg_.max_context_views, static_cast<i64>(all.size()));
        if (hi > lo || hi < static_cast<i64>(all.size())) {
            const i64 count = lo + static_cast<i64>(rng_.below(static_cast<std::uint64_t>(hi - lo + 1)));
            for (i64 k = 0; k < count && !all.empty(); ++k) {
                const size_t pick = rng_.below(all.size());
                ctx_subset.push_back(all[pick]);
                all.erase(all.begin() + static_cast<std::ptrdiff_t>(pick));
            }
            std::sort(ctx_subset.begin(), ctx_subset.end());
        }
    }

    Tape<float> tape;
    LossParts parts;
    const bool saved_checks = finite_checks();
    finite_checks() = false;  // the step checks the loss itself
    {
        Tape<float>::Scope scope(tape);
        parts = compute_loss(*batch, with_targets, cfg_.aux_enabled, subset, ctx_subset);
        const double loss_val = parts.total.item();
        if (!std::isfinite(loss_val)) {
            finite_checks() = saved_checks;
            m.aborted = true;
            m.loss = loss_val;
            return m;
        }
        tape.backward(parts.total);
    }
    finite_checks() = saved_checks;

    m.loss = parts.total.item();
    m.mse = parts.mse;
    m.grad_mae = parts.grad_mae;
    m.aux = parts.aux.defined() ? parts.aux.item() : 0.0;
    m.psnr_train = parts.mse > 0 ? -10.0 * std::log10(parts.mse) : 99.0;

    ++accum_count_;
    if (accum_count_ >= cfg_.grad_accum) {
        if (cfg_.grad_accum > 1) {
            const float inv = 1.0f / static_cast<float>(cfg_.grad_accum);
            for (auto& e : params_.entries()) {
                if (!e.tensor->has_grad()) continue;
                float* g = e.tensor->grad_data();
                for (i64 i = 0; i < e.tensor->numel(); ++i) g[i] *= inv;
            }
        }
        m.grad_norm = clip_global_norm(params_, cfg_.grad_clip);
        m.grad_norm_post = global_grad_norm(params_);
        adam_step(params_, adam_, m.lr);
        ema_.update(params_);
        params_.zero_grads();
        accum_count_ = 0;
    }
    ++step_count_;
    return m;
}

template std::pair<Tensor<float>, Tensor<float>> image_gradient<float>(Tensor<float>);
template std::pair<Tensor<double>, Tensor<double>> image_gradient<double>(Tensor<double>);
template Tensor<float> reconstruction_loss<float>(Tensor<float>, Tensor<float>,
                                                  const LossWeights<float>&);
template Tensor<double> reconstruction_loss<double>(Tensor<double>, Tensor<double>,
                                                    const LossWeights<double>&);
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(ParamMap<float>&, AdamState<float>&, double);
template void adam_step<double>(ParamMap<double>&, AdamState<double>&, double);
template double global_grad_norm<float>(ParamMap<float>&);
template double global_grad_norm<double>(ParamMap<double>&);
template double clip_global_norm<float>(ParamMap<float>&, double);
template double clip_global_norm<double>(ParamMap<double>&, double);
template struct EmaState<float>;
template struct EmaState<double>;

}  // namespace h3r
