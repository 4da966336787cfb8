#include "h3r/network.hpp"

namespace h3r {

template <typename T>
void H3RModel<T>::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    config = cfg;
    encoder.init(cfg.enc_channels, rng);

    const i64 vol_ch = volume_channels(cfg.strategy, cfg.depth_planes, cfg.enc_channels);
    LinearLayer<T> l1, l2;
    l1.init(cfg.enc_channels, cfg.hidden, rng);
    l2.init(vol_ch, cfg.hidden, rng);
    fusion.w1 = l1.w;
    fusion.b1 = l1.b;
    fusion.w2 = l2.w;
    fusion.b2 = l2.b;

    pos_embed.init(6, cfg.hidden, rng);
    blocks.assign(static_cast<size_t>(cfg.layers), TransformerBlock<T>{});
    for (auto& b : blocks) b.init(cfg, rng);

    decoder.init(cfg.hidden, cfg.dec_channels, cfg.raw_channels(), rng);
    // starting map: mid-grey color, 0.5 opacity, ~2px footprint, near-identity
    // rotation, uniform distance distribution
    {
        T* hb = decoder.head.b.data();
        hb[0] = hb[1] = hb[2] = T(0.5);              // rgb raw (ReLU keeps them alive)
        hb[3] = hb[4] = hb[5] = T(-3);               // scale logits, ~1.2 px start
        hb[6] = T(1);                                // quat w
    }
    if (cfg.aux_head) aux_decoder.init(cfg.hidden, cfg.dec_channels, 3, rng);
    params();  // marks every parameter as requiring grad
}

template <typename T>
ParamMap<T> H3RModel<T>::params() {
    ParamMap<T> pm;
    encoder.collect("encoder", pm);
    pm.add("fusion.linear1.weight", fusion.w1);
    pm.add("fusion.linear1.bias", fusion.b1);
    pm.add("fusion.linear2.weight", fusion.w2);
    pm.add("fusion.linear2.bias", fusion.b2);
    pos_embed.collect("posemb", pm);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect("blocks." + std::to_string(i), pm);
    decoder.collect("decoder", pm);
    if (config.aux_head) aux_decoder.collect("aux", pm);
    return pm;
}

template <typename T>
ParamMap<T> H3RModel<T>::trainable_params() {
    ParamMap<T> all = params();
    if (!config.encoder_frozen) return all;
    ParamMap<T> pm;
    for (const auto& e : all.entries())
        if (e.name.rfind("encoder.", 0) != 0) pm.add(e.name, *e.tensor);
    return pm;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> H3RModel<T>::assemble_target_tokens(
    const std::vector<Camera>& target_cams) const {
    const i64 h = config.latent_h(), w = config.latent_w();
    const i64 m = static_cast<i64>(target_cams.size());
    if (m == 0) return {Tensor<T>(), Tensor<T>()};
    Tensor<T> feats = Tensor<T>::zeros({m * h * w, config.hidden});
    std::vector<Tensor<T>> rays;
    rays.reserve(target_cams.size());
    for (const auto& cam : target_cams)
        rays.push_back(reshape(plucker_map<T>(cam.at_resolution(w, h)), {h * w, 6}));
    return {feats, concat(rays, 0)};
}

template <typename T>
Tensor<T> H3RModel<T>::transformer_forward(Tensor<T> z, Tensor<T> rays) const {
    if (z.dim(0) != rays.dim(0))
        throw ShapeError("transformer_forward: token/ray count mismatch " +
                         shape_str(z.shape()) + " vs " + shape_str(rays.shape()));
    z = add(z, pos_embed.forward(rays));
    for (const auto& b : blocks) z = b.forward(z);
    return z;
}

template <typename T>
GaussianFields<T> H3RModel<T>::decode_view(Tensor<T> token_map, const Camera& cam,
                                           RawGaussianMap<T>* raw_out, i64* degenerate,
                                           double near, double far) const {
    if (!(near > 0)) near = config.near;
    if (!(far > 0)) far = config.far;
    const i64 hh = token_map.dim(1), ww = token_map.dim(2);
    const i64 H = hh * 4, W = ww * 4;
    Tensor<T> raw = decoder.forward(token_map);  // [1,H,W,11+D]
    const i64 pixels = H * W;

    auto rgb_raw = reshape(slice(raw, 3, 0, 3), {pixels, 3});
    auto scale_logits = reshape(slice(raw, 3, 3, 3), {pixels, 3});
    auto quat_raw = reshape(slice(raw, 3, 6, 4), {pixels, 4});
    auto opacity_logit = reshape(slice(raw, 3, 10, 1), {pixels});
    auto dist_logits = reshape(slice(raw, 3, 11, config.distance_bins), {pixels, config.distance_bins});

    const DepthSamples dist_samples = inverse_depth_samples(near, far, config.distance_bins);
    Tensor<T> t = ray_distance(dist_logits, dist_samples);  // [pixels]

    // rays at the native full resolution of this view
    const Camera full = cam.at_resolution(W, H);
    const auto rays = pixel_rays(full);
    Tensor<T> origins({pixels, 3}), dirs({pixels, 3});
    for (i64 p = 0; p < pixels; ++p) {
        const Ray& r = rays[static_cast<size_t>(p)];
        origins.at(p * 3 + 0) = static_cast<T>(r.origin.x);
        origins.at(p * 3 + 1) = static_cast<T>(r.origin.y);
        origins.at(p * 3 + 2) = static_cast<T>(r.origin.z);
        dirs.at(p * 3 + 0) = static_cast<T>(r.dir.x);
        dirs.at(p * 3 + 1) = static_cast<T>(r.dir.y);
        dirs.at(p * 3 + 2) = static_cast<T>(r.dir.z);
    }

    GaussianFields<T> g;
    Tensor<T> t_col = reshape(t, {pixels, 1});
    g.centers = center_from_distance(origins, dirs, t_col);
    ScaleRange range{config.scale_min, config.scale_max};
    Tensor<T> p_world = Tensor<T>::full({1, 1}, static_cast<T>(1.0 / full.intr.fx));
    g.scales = scale_activation(scale_logits, range, p_world, t_col);
    g.quats = normalize_quat(quat_raw, degenerate);
    g.opacities = sigmoid(opacity_logit);
    g.rgbs = relu(rgb_raw);

    if (raw_out) {
        auto front = slice(raw, 3, 0, 11);
        raw_out->values = concat<T>({front, reshape(t, {i64(1), H, W, 1})}, 3);
    }
    return g;
}

template <typename T>
ForwardOutput<T> H3RModel<T>::forward(const ForwardInput<T>& in) const {
    const i64 n = static_cast<i64>(in.context_cams.size());
    if (n < 2) throw ContractError("forward: need at least two context views");
    if (in.images.rank() != 4 || in.images.dim(0) != n)
        throw ShapeError("forward: images " + shape_str(in.images.shape()) + " do not match " +
                         std::to_string(n) + " context cameras");
    const i64 h = config.latent_h(), w = config.latent_w();
    if (in.images.dim(1) != config.image_h || in.images.dim(2) != config.image_w)
        throw ShapeError("forward: expected " + std::to_string(config.image_h) + "x" +
                         std::to_string(config.image_w) + " images");

    const double near = in.near > 0 ? in.near : config.near;
    const double far = in.far > 0 ? in.far : config.far;
    Tensor<T> feats = encode(in.images);  // [N,h,w,c]
    const DepthSamples sweep_samples = inverse_depth_samples(near, far, config.depth_planes);

    // per-reference fused tokens
    std::vector<Tensor<T>> view_tokens;
    std::vector<Tensor<T>> view_rays;
    for (i64 i = 0; i < n; ++i) {
        auto x_i = reshape(slice(feats, 0, i, 1), {h, w, config.enc_channels});
        std::vector<LatentVolume<T>> vols;
        for (i64 j = 0; j < n; ++j) {
            if (j == i) continue;
            auto x_j = reshape(slice(feats, 0, j, 1), {h, w, config.enc_channels});
            auto sweep = plane_sweep(x_j, in.context_cams[static_cast<size_t>(i)],
                                     in.context_cams[static_cast<size_t>(j)], sweep_samples);
            vols.push_back(build_volume(x_i, sweep, config.strategy, static_cast<int>(j),
                                        static_cast<int>(i)));
        }
        auto vol = multi_view_average(vols);
        auto z_i = fuse(x_i, vol, fusion);  // [h,w,c']
        view_tokens.push_back(reshape(z_i, {h * w, config.hidden}));
        view_rays.push_back(reshape(
            plucker_map<T>(in.context_cams[static_cast<size_t>(i)].at_resolution(w, h)),
            {h * w, 6}));
    }

    Tensor<T> z = concat(view_tokens, 0);
    Tensor<T> rays = concat(view_rays, 0);
    i64 total_views = n;
    const i64 m = static_cast<i64>(in.target_cams.size());
    if (in.include_target_tokens && m > 0) {
        auto [tz, tr] = assemble_target_tokens(in.target_cams);
        z = concat<T>({z, tz}, 0);
        rays = concat<T>({rays, tr}, 0);
        total_views += m;
    }

    z = transformer_forward(z, rays);

    ForwardOutput<T> out;
    out.token_count = z.dim(0);

    // decode every tokenized view into pixel-aligned gaussians
    std::vector<Tensor<T>> cen, sca, qua, opa, rgb;
    for (i64 v = 0; v < total_views; ++v) {
        auto tokens = slice(z, 0, v * h * w, h * w);
        auto map = reshape(tokens, {i64(1), h, w, config.hidden});
        const Camera& cam = v < n ? in.context_cams[static_cast<size_t>(v)]
                                  : in.target_cams[static_cast<size_t>(v - n)];
        GaussianFields<T> g = decode_view(map, cam, nullptr, &out.degenerate_quats, near, far);
        cen.push_back(g.centers);
        sca.push_back(g.scales);
        qua.push_back(g.quats);
        opa.push_back(g.opacities);
        rgb.push_back(g.rgbs);
    }
    out.gaussians.centers = concat(cen, 0);
    out.gaussians.scales = concat(sca, 0);
    out.gaussians.quats = concat(qua, 0);
    out.gaussians.opacities = concat(opa, 0);
    out.gaussians.rgbs = concat(rgb, 0);

    // auxiliary target reconstructions from final-layer target tokens
    if (in.include_target_tokens && m > 0 && config.aux_head) {
        for (i64 k = 0; k < m; ++k) {
            auto tokens = slice(z, 0, (n + k) * h * w, h * w);
            auto map = reshape(tokens, {i64(1), h, w, config.hidden});
            auto img = sigmoid(aux_decoder.forward(map));
            out.aux_images.push_back(reshape(img, {config.image_h, config.image_w, 3}));
        }
    }
    return out;
}

template class H3RModel<float>;
template class H3RModel<double>;

}  // namespace h3r
