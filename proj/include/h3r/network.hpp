#pragma once

#include <string>
#include <vector>

#include "h3r/camera.hpp"
#include "h3r/gaussian.hpp"
#include "h3r/ops.hpp"
#include "h3r/volume.hpp"

namespace h3r {

struct ModelConfig {
    i64 image_h = 64, image_w = 64;
    i64 enc_channels = 16;   // c, encoder output
    i64 hidden = 64;         // c', transformer width
    i64 mlp_hidden = 192;    // SwiGLU gate width
    int layers = 2;
    int heads = 4;
    int depth_planes = 8;    // plane-sweep hypotheses
    int distance_bins = 32;  // ray-distance logit bank (128 at paper scale)
    i64 dec_channels = 32;
    CostStrategy strategy = CostStrategy::CostFree;
    double near = 1.0, far = 100.0;
    double scale_min = 0.5, scale_max = 15.0;
    double qk_scale_init = 0.0;  // <= 0 means 1/sqrt(head_dim)
    bool encoder_frozen = false;
    bool aux_head = true;

    i64 latent_h() const { return image_h / 4; }
    i64 latent_w() const { return image_w / 4; }
    i64 raw_channels() const { return 11 + distance_bins; }

    void validate() const {
        if (image_h % 4 || image_w % 4)
            throw ConfigError("image resolution must be divisible by 4");
        if (hidden % heads) throw ConfigError("hidden width must be divisible by heads");
        if (!(near > 0 && far > near)) throw ConfigError("need 0 < near < far");
        if (depth_planes < 2 || distance_bins < 2)
            throw ConfigError("depth hypothesis counts must be >= 2");
        if (!(scale_min > 0 && scale_min < scale_max))
            throw ConfigError("need 0 < scale_min < scale_max");
        if (layers < 1 || heads < 1) throw ConfigError("need at least one layer and head");
    }
};

template <typename T>
struct LinearLayer {
    Tensor<T> w, b;
    void init(i64 in, i64 out, Rng& rng) {
        const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
        w = Tensor<T>::rand_uniform({in, out}, rng, -bound, bound);
        b = Tensor<T>::zeros({out});
    }
    void collect(const std::string& prefix, ParamMap<T>& pm) {
        pm.add(prefix + ".weight", w);
        pm.add(prefix + ".bias", b);
    }
    Tensor<T> forward(Tensor<T> x) const { return linear(x, w, b); }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    i64 stride = 1, pad = 1;
    void init(i64 kh, i64 kw, i64 cin, i64 cout, i64 stride_, Rng& rng) {
        stride = stride_;
        pad = kh / 2;
        const T std_dev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(kh * kw * cin)));
        w = Tensor<T>::rand_normal({kh, kw, cin, cout}, rng, T(0), std_dev);
        b = Tensor<T>::zeros({cout});
    }
    void collect(const std::string& prefix, ParamMap<T>& pm) {
        pm.add(prefix + ".weight", w);
        pm.add(prefix + ".bias", b);
    }
    Tensor<T> forward(Tensor<T> x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma, beta;
    void init(i64 c) {
        gamma = Tensor<T>::full({c}, T(1));
        beta = Tensor<T>::zeros({c});
    }
    void collect(const std::string& prefix, ParamMap<T>& pm) {
        pm.add(prefix + ".gamma", gamma);
        pm.add(prefix + ".beta", beta);
    }
    Tensor<T> forward(Tensor<T> x) const { return layer_norm(x, gamma, beta); }
};

// Two strided conv stages, 4x spatial reduction, per-view independent.
template <typename T>
struct EncoderStub {
    Conv2dLayer<T> conv1, conv2;
    void init(i64 channels, Rng& rng) {
        conv1.init(3, 3, 3, channels, 2, rng);
        conv2.init(3, 3, channels, channels, 2, rng);
    }
    void collect(const std::string& prefix, ParamMap<T>& pm) {
        conv1.collect(prefix + ".conv1", pm);
        conv2.collect(prefix + ".conv2", pm);
    }
    // [N,H,W,3] -> [N,H/4,W/4,c]
    Tensor<T> forward(Tensor<T> images) const {
        if (images.rank() != 4 || images.dim(3) != 3)
            throw ShapeError("encode: expected [N,H,W,3], got " + shape_str(images.shape()));
        if (images.dim(1) % 4 || images.dim(2) % 4)
            throw ContractError("encode: image extents must be divisible by 4");
        return conv2.forward(silu(conv1.forward(images)));
    }
};

// Pre-LayerNorm attention with QK-Norm (L2-normalized per-head queries and
// keys, learnable per-head logit scale) followed by a Pre-LN SwiGLU FFN.
template <typename T>
struct TransformerBlock {
    LayerNormLayer<T> ln1, ln2;
    LinearLayer<T> wq, wk, wv, wo;
    Tensor<T> qk_scale;  // [heads]
    LinearLayer<T> ffn_gate, ffn_up, ffn_down;
    int heads = 1;

    void init(const ModelConfig& cfg, Rng& rng) {
        heads = cfg.heads;
        ln1.init(cfg.hidden);
        ln2.init(cfg.hidden);
        wq.init(cfg.hidden, cfg.hidden, rng);
        wk.init(cfg.hidden, cfg.hidden, rng);
        wv.init(cfg.hidden, cfg.hidden, rng);
        wo.init(cfg.hidden, cfg.hidden, rng);
        const double head_dim = static_cast<double>(cfg.hidden / cfg.heads);
        const double s = cfg.qk_scale_init > 0 ? cfg.qk_scale_init : 1.0 / std::sqrt(head_dim);
        qk_scale = Tensor<T>::full({cfg.heads}, static_cast<T>(s));
        ffn_gate.init(cfg.hidden, cfg.mlp_hidden, rng);
        ffn_up.init(cfg.hidden, cfg.mlp_hidden, rng);
        ffn_down.init(cfg.mlp_hidden, cfg.hidden, rng);
    }

    void collect(const std::string& prefix, ParamMap<T>& pm) {
        ln1.collect(prefix + ".ln1", pm);
        wq.collect(prefix + ".attn.wq", pm);
        wk.collect(prefix + ".attn.wk", pm);
        wv.collect(prefix + ".attn.wv", pm);
        wo.collect(prefix + ".attn.wo", pm);
        pm.add(prefix + ".attn.qk_scale", qk_scale);
        ln2.collect(prefix + ".ln2", pm);
        ffn_gate.collect(prefix + ".ffn.gate", pm);
        ffn_up.collect(prefix + ".ffn.up", pm);
        ffn_down.collect(prefix + ".ffn.down", pm);
    }

    // z: [tokens, c']
    Tensor<T> forward(Tensor<T> z) const {
        const i64 tokens = z.dim(0), c = z.dim(1);
        const i64 hd = c / heads;

        auto x = ln1.forward(z);
        const auto split = [&](Tensor<T> t) {
            return permute(reshape(t, {tokens, heads, hd}), {1, 0, 2});  // [heads,T,hd]
        };
        auto q = l2_normalize(split(wq.forward(x)));
        auto k = l2_normalize(split(wk.forward(x)));
        auto v = split(wv.forward(x));
        auto logits = matmul(q, permute(k, {0, 2, 1}));  // [heads,T,T], |entries| <= 1
        logits = mul(logits, reshape(qk_scale, {heads, 1, 1}));
        auto attn = softmax(logits, -1);
        auto ctx = matmul(attn, v);  // [heads,T,hd]
        auto merged = reshape(permute(ctx, {1, 0, 2}), {tokens, c});
        z = add(z, wo.forward(merged));

        auto y = ln2.forward(z);
        auto gated = mul(silu(ffn_gate.forward(y)), ffn_up.forward(y));
        return add(z, ffn_down.forward(gated));
    }
};

template <typename T>
struct ResBlock {
    Conv2dLayer<T> conv1, conv2;
    void init(i64 c, Rng& rng) {
        conv1.init(3, 3, c, c, 1, rng);
        conv2.init(3, 3, c, c, 1, rng);
    }
    void collect(const std::string& prefix, ParamMap<T>& pm) {
        conv1.collect(prefix + ".conv1", pm);
        conv2.collect(prefix + ".conv2", pm);
    }
    Tensor<T> forward(Tensor<T> x) const {
        return add(x, conv2.forward(silu(conv1.forward(silu(x)))));
    }
};

// Hierarchical decoder: two nearest-neighbor x2 upsampling stages between
// residual conv blocks, 4x total.
template <typename T>
struct Decoder {
    Conv2dLayer<T> conv_in;
    ResBlock<T> res1, res2;
    Conv2dLayer<T> up1, up2;
    Conv2dLayer<T> head;

    void init(i64 in_c, i64 dec_c, i64 out_c, Rng& rng) {
        conv_in.init(3, 3, in_c, dec_c, 1, rng);
        res1.init(dec_c, rng);
        up1.init(3, 3, dec_c, dec_c, 1, rng);
        res2.init(dec_c, rng);
        up2.init(3, 3, dec_c, dec_c, 1, rng);
        head.init(3, 3, dec_c, out_c, 1, rng);
    }
    void collect(const std::string& prefix, ParamMap<T>& pm) {
        conv_in.collect(prefix + ".conv_in", pm);
        res1.collect(prefix + ".res1", pm);
        up1.collect(prefix + ".up1", pm);
        res2.collect(prefix + ".res2", pm);
        up2.collect(prefix + ".up2", pm);
        head.collect(prefix + ".head", pm);
    }
    // [N,h,w,in_c] -> [N,4h,4w,out_c]
    Tensor<T> forward(Tensor<T> z) const {
        auto x = conv_in.forward(z);
        x = res1.forward(x);
        x = up1.forward(upsample_nearest2x(x));
        x = res2.forward(x);
        x = up2.forward(upsample_nearest2x(x));
        return head.forward(x);
    }
};

template <typename T>
struct ForwardInput {
    Tensor<T> images;                  // [N,H,W,3] context images in [0,1]
    std::vector<Camera> context_cams;  // size N
    std::vector<Camera> target_cams;   // size M, may be empty
    bool include_target_tokens = false;
    double near = 0, far = 0;          // per-scene override of the config bounds
};

template <typename T>
struct ForwardOutput {
    GaussianFields<T> gaussians;        // one splat per pixel of every tokenized view
    std::vector<Tensor<T>> aux_images;  // per target view [H,W,3], empty unless aux ran
    i64 token_count = 0;
    i64 degenerate_quats = 0;
};

// Raw per-pixel gaussian channels: rgb 3, scale 3, rotation 4, opacity 1,
// activated ray distance 1.
template <typename T>
struct RawGaussianMap {
    Tensor<T> values;  // [N,H,W,12]
};

template <typename T>
class H3RModel {
public:
    ModelConfig config;
    EncoderStub<T> encoder;
    FusionWeights<T> fusion;
    LinearLayer<T> pos_embed;
    std::vector<TransformerBlock<T>> blocks;
    Decoder<T> decoder;      // head: 11 raw channels + distance logits
    Decoder<T> aux_decoder;  // 3-channel target-view reconstruction head

    void init(const ModelConfig& cfg, Rng& rng);
    ParamMap<T> params();
    ParamMap<T> trainable_params();

    Tensor<T> encode(Tensor<T> images) const { return encoder.forward(images); }

    // PosEmb: R^6 -> R^c', a single affine map.
    Tensor<T> pos_embed_plucker(Tensor<T> plucker6) const { return pos_embed.forward(plucker6); }

    // Zero visual tokens paired with real Plücker rays for the target poses.
    std::pair<Tensor<T>, Tensor<T>> assemble_target_tokens(
        const std::vector<Camera>& target_cams) const;

    // transformer over a pre-assembled token sequence (adds PosEmb once)
    Tensor<T> transformer_forward(Tensor<T> z, Tensor<T> rays) const;

    ForwardOutput<T> forward(const ForwardInput<T>& in) const;

    // Decodes one view's token map into activated gaussian fields.
    GaussianFields<T> decode_view(Tensor<T> token_map, const Camera& cam,
                                  RawGaussianMap<T>* raw_out, i64* degenerate,
                                  double near = 0, double far = 0) const;
};

}  // namespace h3r
