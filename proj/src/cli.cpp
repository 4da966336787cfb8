#include "h3r/cli.hpp"

#include <CLI11.hpp>
#include <map>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "h3r/config.hpp"
#include "h3r/metrics.hpp"
#include "h3r/network.hpp"
#include "h3r/rasterizer.hpp"
#include "h3r/scene_io.hpp"
#include "h3r/training.hpp"

namespace h3r::cli {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> list_scene_dirs(const std::string& root) {
    if (!fs::is_directory(root)) throw DataError(root + " is not a directory");
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "cameras.json"))
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw DataError("no scenes (directories with cameras.json) under " + root);
    return dirs;
}

void print_resolved(const std::string& cmd, const KeyValues& kv) {
    std::cout << "resolved config (" << cmd << "):\n";
    print_config(kv, std::cout);
}

// Loads model weights; EMA shadows (ema/ prefix) replace base weights unless
// disabled.
void load_model_weights(H3RModel<float>& model, const std::string& ckpt, bool use_ema) {
    auto records = read_container(ckpt);
    std::vector<TensorRecord> base, ema;
    for (auto& r : records) {
        if (r.name.rfind("ema/", 0) == 0) {
            TensorRecord e = r;
            e.name = r.name.substr(4);
            ema.push_back(std::move(e));
        } else {
            base.push_back(r);
        }
    }
    ParamMap<float> params = model.params();
    apply_records(base, params);
    if (use_ema && !ema.empty()) apply_records(ema, params, "", /*allow_missing=*/true);
}

ModelConfig load_model_config(const std::string& explicit_cfg, const std::string& ckpt) {
    std::string path = explicit_cfg;
    if (path.empty() && !ckpt.empty()) {
        const fs::path sibling = fs::path(ckpt).parent_path() / "model.cfg";
        if (fs::exists(sibling)) path = sibling.string();
    }
    ModelConfig cfg;
    if (!path.empty()) {
        KeyValues kv = parse_config_file(path);
        apply_model_config(kv, cfg);
        // train configs share the file; ignore their keys here
        TrainConfig tc;
        apply_train_config(kv, tc);
        const auto leftovers = kv.unconsumed();
        if (!leftovers.empty()) throw ConfigError("unknown config key: " + leftovers.front());
    }
    return cfg;
}

int cmd_generate_data(const std::string& out_dir, std::uint64_t seed, int scenes, int views,
                      int context, i64 resolution, int boxes, double arc) {
    SyntheticSceneSpec spec;
    spec.context_views = context;
    spec.target_views = views - context;
    spec.width = spec.height = resolution;
    spec.num_boxes = boxes;
    spec.arc_degrees = arc;
    if (spec.target_views < 1) throw ConfigError("--views must exceed --context");

    KeyValues kv;
    kv.set("out", out_dir);
    kv.set("seed", std::to_string(seed));
    kv.set("scenes", std::to_string(scenes));
    kv.set("views", std::to_string(views));
    kv.set("context", std::to_string(context));
    kv.set("resolution", std::to_string(resolution));
    kv.set("boxes", std::to_string(boxes));
    kv.set("arc_degrees", std::to_string(arc));
    print_resolved("generate-data", kv);

    fs::create_directories(out_dir);
    for (int i = 0; i < scenes; ++i) {
        spec.seed = seed + static_cast<std::uint64_t>(i);
        SceneBundle bundle = generate_scene(spec);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        save_scene(bundle, out_dir + "/" + name);
        std::cout << "wrote " << out_dir << "/" << name << " (" << bundle.views.size()
                  << " views)\n";
    }
    return 0;
}

int cmd_train(const std::string& scenes_dir, const std::string& out_dir,
              const std::string& config_path, KeyValues overrides) {
    ModelConfig mcfg;
    TrainConfig tcfg;
    KeyValues kv;
    if (!config_path.empty()) kv = parse_config_file(config_path);
    for (const auto& [k, v] : overrides.items()) kv.set(k, v);
    apply_model_config(kv, mcfg);
    apply_train_config(kv, tcfg);
    const auto leftovers = kv.unconsumed();
    if (!leftovers.empty()) throw ConfigError("unknown config key: " + leftovers.front());

    const auto dirs = list_scene_dirs(scenes_dir);
    std::vector<SceneBundle> scenes;
    scenes.reserve(dirs.size());
    for (const auto& d : dirs) scenes.push_back(load_scene(d));

    // the data decides the working resolution
    mcfg.image_h = scenes[0].views[0].image.height;
    mcfg.image_w = scenes[0].views[0].image.width;
    mcfg.validate();

    KeyValues resolved = model_config_to_kv(mcfg);
    const KeyValues train_kv = train_config_to_kv(tcfg);
    for (const auto& [k, v] : train_kv.items()) resolved.set(k, v);
    resolved.set("scenes", scenes_dir);
    resolved.set("out", out_dir);
    print_resolved("train", resolved);

    fs::create_directories(out_dir);
    write_config_file(model_config_to_kv(mcfg), out_dir + "/model.cfg");

    Rng init_rng(tcfg.seed);
    H3RModel<float> model;
    model.init(mcfg, init_rng);
    Trainer trainer(model, tcfg);

    std::ofstream log(out_dir + "/metrics.csv");
    log << "step,loss,mse,grad_mae,psnr_train,lr\n";

    const auto save_ckpt = [&](const std::string& name) {
        ParamMap<float> all = model.params();
        std::vector<std::pair<std::string, Tensor<float>>> extra;
        for (const auto& [n, t] : trainer.ema().shadow) extra.emplace_back("ema/" + n, t);
        save_checkpoint(all, extra, out_dir + "/" + name);
    };

    Rng pick(tcfg.seed ^ 0x5ca1ab1eull);
    for (i64 step = 0; step < tcfg.steps; ++step) {
        const SceneBundle& scene = scenes[pick.below(scenes.size())];
        StepMetrics m = trainer.step(scene);
        if (m.aborted)
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               "; aborting training");
        if (step % tcfg.log_every == 0 || step + 1 == tcfg.steps) {
            log << m.step << "," << m.loss << "," << m.mse << "," << m.grad_mae << ","
                << m.psnr_train << "," << m.lr << "\n";
            log.flush();
            std::cout << "step " << m.step << " loss " << m.loss << " psnr " << m.psnr_train
                      << " lr " << m.lr << "\n";
        }
        if (tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 &&
            step + 1 != tcfg.steps)
            save_ckpt("ckpt_" + std::to_string(step + 1) + ".h3rt");
    }
    save_ckpt("ckpt_final.h3rt");
    std::cout << "wrote " << out_dir << "/ckpt_final.h3rt\n";
    return 0;
}

int cmd_render(const std::string& ckpt, const std::string& scene_dir, int view_index,
               const std::string& out_path, const std::string& config_path,
               const std::string& splat_path, const std::string& save_splats_path,
               bool use_ema) {
    SceneBundle scene = load_scene(scene_dir);
    if (view_index < 0 || view_index >= static_cast<int>(scene.views.size()))
        throw DataError("view index " + std::to_string(view_index) + " out of range (scene has " +
                        std::to_string(scene.views.size()) + " views)");
    const Camera cam = scene.view(view_index).cam;

    KeyValues kv;
    kv.set("scene", scene_dir);
    kv.set("view", std::to_string(view_index));
    kv.set("out", out_path);
    if (!splat_path.empty()) kv.set("splats", splat_path);
    if (!ckpt.empty()) kv.set("ckpt", ckpt);
    kv.set("use_ema", use_ema ? "true" : "false");
    print_resolved("render", kv);

    GaussianFields<float> fields;
    if (!splat_path.empty()) {
        fields = from_gaussians<float>(load_splats(splat_path));
    } else {
        if (ckpt.empty()) throw ConfigError("render needs --ckpt or --splats");
        ModelConfig mcfg = load_model_config(config_path, ckpt);
        mcfg.image_h = scene.views[0].image.height;
        mcfg.image_w = scene.views[0].image.width;
        Rng rng(1);
        H3RModel<float> model;
        model.init(mcfg, rng);
        load_model_weights(model, ckpt, use_ema);

        const auto ctx = scene.context_ids();
        if (ctx.size() < 2) throw DataError("scene has fewer than two context views");
        Tensor<float> images({static_cast<i64>(ctx.size()), mcfg.image_h, mcfg.image_w, 3});
        ForwardInput<float> in;
        for (size_t i = 0; i < ctx.size(); ++i) {
            const SceneView& v = scene.view(ctx[i]);
            std::copy(v.image.rgb.begin(), v.image.rgb.end(),
                      images.data() + static_cast<i64>(i) * mcfg.image_h * mcfg.image_w * 3);
            in.context_cams.push_back(v.cam);
        }
        in.images = images;
        in.near = scene.near;
        in.far = scene.far;
        fields = model.forward(in).gaussians;
        if (!save_splats_path.empty()) {
            save_splats(to_gaussians(fields), save_splats_path);
            std::cout << "wrote " << save_splats_path << "\n";
        }
    }
    auto outimg = render(fields, cam, std::array<float, 3>{0, 0, 0});
    save_ppm(to_image(outimg.color), out_path);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& scenes_dir,
                 const std::string& bucket, const std::string& out_csv,
                 const std::string& config_path, bool use_ema, int max_context,
                 bool include_target_poses) {
    ModelConfig mcfg = load_model_config(config_path, ckpt);
    const auto dirs = list_scene_dirs(scenes_dir);
    std::vector<std::pair<std::string, SceneBundle>> scenes;
    for (const auto& d : dirs) scenes.emplace_back(fs::path(d).filename().string(), load_scene(d));

    mcfg.image_h = scenes[0].second.views[0].image.height;
    mcfg.image_w = scenes[0].second.views[0].image.width;
    Rng rng(1);
    H3RModel<float> model;
    model.init(mcfg, rng);
    load_model_weights(model, ckpt, use_ema);

    KeyValues kv;
    kv.set("ckpt", ckpt);
    kv.set("scenes", scenes_dir);
    kv.set("bucket", bucket);
    kv.set("out", out_csv);
    kv.set("use_ema", use_ema ? "true" : "false");
    kv.set("max_context", std::to_string(max_context));
    print_resolved("evaluate", kv);

    EvalOptions opt;
    opt.bucket = parse_bucket(bucket);
    opt.max_context_views = max_context;
    opt.include_target_poses = include_target_poses;
    EvalReport report = evaluate_scenes(model, scenes, opt);
    write_report_csv(report, out_csv);
    for (const auto& a : report.buckets)
        std::cout << a.bucket << ": psnr " << a.psnr << " ssim " << a.ssim << " (" << a.count
                  << " scenes)\n";
    std::cout << "wrote " << out_csv << "\n";
    return 0;
}

int cmd_inspect(const std::string& ckpt) {
    const auto records = read_container(ckpt);
    for (const auto& r : records)
        std::cout << r.name << " " << (r.is_f64 ? "f64" : "f32") << " " << shape_str(r.shape)
                  << "\n";
    std::cout << records.size() << " tensors\n";
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"H3R: feed-forward 3D gaussian reconstruction"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "synthesize posed scenes with ground truth");
    std::string gen_out;
    std::uint64_t gen_seed = 1;
    int gen_scenes = 8, gen_views = 5, gen_context = 2, gen_boxes = 2;
    i64 gen_res = 64;
    double gen_arc = 24.0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "base seed");
    gen->add_option("--scenes", gen_scenes, "number of scenes");
    gen->add_option("--views", gen_views, "views per scene (context + target)");
    gen->add_option("--context", gen_context, "context views per scene");
    gen->add_option("--resolution", gen_res, "image side in pixels");
    gen->add_option("--boxes", gen_boxes, "textured boxes per scene");
    gen->add_option("--arc", gen_arc, "camera arc in degrees");

    // train
    auto* train = app.add_subcommand("train", "train on a scene directory");
    std::string tr_scenes, tr_out, tr_config;
    train->add_option("--scenes", tr_scenes, "scene directory")->required();
    train->add_option("--out", tr_out, "run directory")->required();
    train->add_option("--config", tr_config, "key = value config file");
    std::vector<std::pair<std::string, std::string>> tr_flag_keys = {
        {"--steps", "steps"},         {"--seed", "seed"},
        {"--cost-strategy", "cost_strategy"}, {"--peak-lr", "peak_lr"},
        {"--min-lr", "min_lr"},       {"--warmup-steps", "warmup_steps"},
        {"--decay-until", "decay_until"}, {"--target-pose-prob", "target_pose_prob"},
        {"--hflip-prob", "hflip_prob"}, {"--layers", "layers"},
        {"--hidden", "hidden"},       {"--heads", "heads"},
        {"--depth-planes", "depth_planes"}, {"--distance-bins", "distance_bins"},
        {"--enc-channels", "enc_channels"}, {"--aux-weight", "aux_weight"},
        {"--checkpoint-every", "checkpoint_every"}};
    std::map<std::string, std::string> tr_flag_values;
    for (const auto& [flag, key] : tr_flag_keys)
        train->add_option(flag, tr_flag_values[key], "overrides config key " + key);

    // render
    auto* rend = app.add_subcommand("render", "render one view from a checkpoint or splat file");
    std::string rd_ckpt, rd_scene, rd_out, rd_config, rd_splats, rd_save_splats;
    int rd_view = 0;
    bool rd_no_ema = false;
    rend->add_option("--ckpt", rd_ckpt, "model checkpoint");
    rend->add_option("--scene", rd_scene, "scene directory")->required();
    rend->add_option("--view", rd_view, "view index to render")->required();
    rend->add_option("--out", rd_out, "output .ppm")->required();
    rend->add_option("--config", rd_config, "model config (default: model.cfg next to ckpt)");
    rend->add_option("--splats", rd_splats, "render this splat file instead of a model");
    rend->add_option("--save-splats", rd_save_splats, "also export predicted splats");
    rend->add_flag("--no-ema", rd_no_ema, "ignore EMA weights in the checkpoint");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "psnr/ssim over a scene set");
    std::string ev_ckpt, ev_scenes, ev_bucket = "none", ev_out = "report.csv", ev_config;
    bool ev_no_ema = false, ev_target_poses = false;
    int ev_max_context = 0;
    ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--scenes", ev_scenes, "scene directory")->required();
    ev->add_option("--bucket", ev_bucket, "overlap|views|none");
    ev->add_option("--out", ev_out, "report csv path");
    ev->add_option("--config", ev_config, "model config file");
    ev->add_option("--context", ev_max_context, "cap on context views (0 = all)");
    ev->add_flag("--no-ema", ev_no_ema, "ignore EMA weights");
    ev->add_flag("--include-target-poses", ev_target_poses,
                 "feed target camera poses as zero-feature tokens");

    // inspect
    auto* ins = app.add_subcommand("inspect", "list checkpoint tensors");
    std::string in_ckpt;
    ins->add_option("--ckpt", in_ckpt, "checkpoint path")->required();

    std::vector<std::string> argv(args);
    try {
        std::vector<const char*> cargv;
        cargv.push_back("h3r");
        for (const auto& a : argv) cargv.push_back(a.c_str());
        app.parse(static_cast<int>(cargv.size()), cargv.data());

        if (gen->parsed())
            return cmd_generate_data(gen_out, gen_seed, gen_scenes, gen_views, gen_context,
                                     gen_res, gen_boxes, gen_arc);
        if (train->parsed()) {
            KeyValues overrides;
            for (const auto& [key, value] : tr_flag_values)
                if (!value.empty()) overrides.set(key, value);
            return cmd_train(tr_scenes, tr_out, tr_config, overrides);
        }
        if (rend->parsed())
            return cmd_render(rd_ckpt, rd_scene, rd_view, rd_out, rd_config, rd_splats,
                              rd_save_splats, !rd_no_ema);
        if (ev->parsed())
            return cmd_evaluate(ev_ckpt, ev_scenes, ev_bucket, ev_out, ev_config, !ev_no_ema,
                                ev_max_context, ev_target_poses);
        if (ins->parsed()) return cmd_inspect(in_ckpt);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // --help exits 0
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace h3r::cli
