#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "h3r/ops.hpp"

namespace h3r {

enum class CostStrategy { Correlation, Difference, CostFree };

inline const char* to_string(CostStrategy s) {
    switch (s) {
        case CostStrategy::Correlation: return "correlation";
        case CostStrategy::Difference: return "difference";
        case CostStrategy::CostFree: return "cost-free";
    }
    return "?";
}

inline CostStrategy parse_cost_strategy(const std::string& s) {
    if (s == "correlation") return CostStrategy::Correlation;
    if (s == "difference") return CostStrategy::Difference;
    if (s == "cost-free" || s == "costfree") return CostStrategy::CostFree;
    throw ConfigError("unknown cost strategy: " + s +
                      " (expected correlation|difference|cost-free)");
}

// Channel count of a volume: d for correlation, d*c otherwise.
inline i64 volume_channels(CostStrategy s, i64 depth_planes, i64 feat_channels) {
    return s == CostStrategy::Correlation ? depth_planes : depth_planes * feat_channels;
}

template <typename T>
struct LatentVolume {
    Tensor<T> values;  // [h, w, d] or [h, w, d*c]
    CostStrategy strategy = CostStrategy::CostFree;
    int source_view = -1;
    int reference_view = -1;
};

// Collapses a plane sweep [h,w,d,c] against the reference latent [h,w,c].
template <typename T>
LatentVolume<T> build_volume(Tensor<T> x_i, Tensor<T> sweep, CostStrategy strategy,
                             int source_view = -1, int reference_view = -1) {
    if (x_i.rank() != 3 || sweep.rank() != 4)
        throw ShapeError("build_volume: expected x_i[h,w,c] and sweep[h,w,d,c]");
    const i64 h = x_i.dim(0), w = x_i.dim(1), c = x_i.dim(2), d = sweep.dim(2);
    if (sweep.dim(0) != h || sweep.dim(1) != w || sweep.dim(3) != c)
        throw ShapeError("build_volume: channel/shape mismatch, x_i " + shape_str(x_i.shape()) +
                         " vs sweep " + shape_str(sweep.shape()));

    LatentVolume<T> vol;
    vol.strategy = strategy;
    vol.source_view = source_view;
    vol.reference_view = reference_view;
    switch (strategy) {
        case CostStrategy::Correlation: {
            auto ref = reshape(x_i, {h, w, 1, c});
            auto prod = sum_axis(mul(sweep, ref), 3);  // [h,w,d]
            vol.values = mul_scalar(prod, static_cast<T>(1.0 / std::sqrt(static_cast<double>(c))));
            break;
        }
        case CostStrategy::Difference: {
            auto ref = reshape(x_i, {h, w, 1, c});
            vol.values = reshape(sub(sweep, ref), {h, w, d * c});
            break;
        }
        case CostStrategy::CostFree:
            vol.values = reshape(sweep, {h, w, d * c});
            break;
    }
    return vol;
}

template <typename T>
struct FusionWeights {
    Tensor<T> w1, b1;  // c  -> c'
    Tensor<T> w2, b2;  // volume channels -> c'
};

// z_i = Linear1(x_i) + Linear2(volume)
template <typename T>
Tensor<T> fuse(Tensor<T> x_i, const LatentVolume<T>& volume, const FusionWeights<T>& fw) {
    return add(linear(x_i, fw.w1, fw.b1), linear(volume.values, fw.w2, fw.b2));
}

// Arithmetic mean over source views for a fixed reference view.
template <typename T>
LatentVolume<T> multi_view_average(const std::vector<LatentVolume<T>>& volumes) {
    if (volumes.empty()) throw ContractError("multi_view_average: empty volume list");
    const auto& first = volumes.front();
    for (const auto& v : volumes) {
        if (v.strategy != first.strategy)
            throw ContractError("multi_view_average: mixed cost strategies");
        if (v.values.shape() != first.values.shape())
            throw ShapeError("multi_view_average: shape mismatch " + shape_str(v.values.shape()) +
                             " vs " + shape_str(first.values.shape()));
    }
    Tensor<T> acc = volumes[0].values;
    for (size_t i = 1; i < volumes.size(); ++i) acc = add(acc, volumes[i].values);
    LatentVolume<T> out;
    out.values = mul_scalar(acc, static_cast<T>(1.0 / static_cast<double>(volumes.size())));
    out.strategy = first.strategy;
    out.reference_view = first.reference_view;
    return out;
}

}  // namespace h3r
