#include "h3r/config.hpp"

#include <fstream>
#include <sstream>

namespace h3r {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    const auto b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

i64 to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const i64 x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

void KeyValues::set(const std::string& key, const std::string& value) {
    for (size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].first == key) {
            items_[i].second = value;
            consumed_[i] = false;
            return;
        }
    }
    items_.emplace_back(key, value);
    consumed_.push_back(false);
}

std::optional<std::string> KeyValues::get(const std::string& key) const {
    for (const auto& [k, v] : items_)
        if (k == key) return v;
    return std::nullopt;
}

bool KeyValues::consume_into(const std::string& key, std::string& out) {
    for (size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].first == key) {
            out = items_[i].second;
            consumed_[i] = true;
            return true;
        }
    }
    return false;
}

std::vector<std::string> KeyValues::unconsumed() const {
    std::vector<std::string> out;
    for (size_t i = 0; i < items_.size(); ++i)
        if (!consumed_[i]) out.push_back(items_[i].first);
    return out;
}

KeyValues parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key or value");
        kv.set(key, value);
    }
    return kv;
}

void apply_model_config(KeyValues& kv, ModelConfig& cfg) {
    std::string v;
    if (kv.consume_into("image_h", v)) cfg.image_h = to_int("image_h", v);
    if (kv.consume_into("image_w", v)) cfg.image_w = to_int("image_w", v);
    if (kv.consume_into("enc_channels", v)) cfg.enc_channels = to_int("enc_channels", v);
    if (kv.consume_into("hidden", v)) cfg.hidden = to_int("hidden", v);
    if (kv.consume_into("mlp_hidden", v)) cfg.mlp_hidden = to_int("mlp_hidden", v);
    if (kv.consume_into("layers", v)) cfg.layers = static_cast<int>(to_int("layers", v));
    if (kv.consume_into("heads", v)) cfg.heads = static_cast<int>(to_int("heads", v));
    if (kv.consume_into("depth_planes", v))
        cfg.depth_planes = static_cast<int>(to_int("depth_planes", v));
    if (kv.consume_into("distance_bins", v))
        cfg.distance_bins = static_cast<int>(to_int("distance_bins", v));
    if (kv.consume_into("dec_channels", v)) cfg.dec_channels = to_int("dec_channels", v);
    if (kv.consume_into("cost_strategy", v)) cfg.strategy = parse_cost_strategy(v);
    if (kv.consume_into("near", v)) cfg.near = to_double("near", v);
    if (kv.consume_into("far", v)) cfg.far = to_double("far", v);
    if (kv.consume_into("scale_min", v)) cfg.scale_min = to_double("scale_min", v);
    if (kv.consume_into("scale_max", v)) cfg.scale_max = to_double("scale_max", v);
    if (kv.consume_into("qk_scale_init", v)) cfg.qk_scale_init = to_double("qk_scale_init", v);
    if (kv.consume_into("encoder_frozen", v)) cfg.encoder_frozen = to_bool("encoder_frozen", v);
    if (kv.consume_into("aux_head", v)) cfg.aux_head = to_bool("aux_head", v);
    cfg.validate();
}

void apply_train_config(KeyValues& kv, TrainConfig& cfg) {
    std::string v;
    if (kv.consume_into("steps", v)) cfg.steps = to_int("steps", v);
    if (kv.consume_into("peak_lr", v)) cfg.schedule.peak_lr = to_double("peak_lr", v);
    if (kv.consume_into("min_lr", v)) cfg.schedule.min_lr = to_double("min_lr", v);
    if (kv.consume_into("warmup_steps", v)) cfg.schedule.warmup_steps = to_int("warmup_steps", v);
    if (kv.consume_into("decay_until", v)) cfg.schedule.decay_until = to_int("decay_until", v);
    if (kv.consume_into("grad_clip", v)) cfg.grad_clip = to_double("grad_clip", v);
    if (kv.consume_into("target_pose_prob", v))
        cfg.target_pose_prob = to_double("target_pose_prob", v);
    if (kv.consume_into("hflip_prob", v)) cfg.hflip_prob = to_double("hflip_prob", v);
    if (kv.consume_into("aux_weight", v)) cfg.aux_weight = to_double("aux_weight", v);
    if (kv.consume_into("aux_enabled", v)) cfg.aux_enabled = to_bool("aux_enabled", v);
    if (kv.consume_into("ema_decay", v)) cfg.ema_decay = to_double("ema_decay", v);
    if (kv.consume_into("use_gradient_loss", v))
        cfg.use_gradient_loss = to_bool("use_gradient_loss", v);
    if (kv.consume_into("seed", v)) cfg.seed = static_cast<std::uint64_t>(to_int("seed", v));
    if (kv.consume_into("grad_accum", v)) cfg.grad_accum = to_int("grad_accum", v);
    if (kv.consume_into("log_every", v)) cfg.log_every = to_int("log_every", v);
    if (kv.consume_into("checkpoint_every", v)) cfg.checkpoint_every = to_int("checkpoint_every", v);
    cfg.schedule.validate();
}

KeyValues model_config_to_kv(const ModelConfig& cfg) {
    KeyValues kv;
    kv.set("image_h", std::to_string(cfg.image_h));
    kv.set("image_w", std::to_string(cfg.image_w));
    kv.set("enc_channels", std::to_string(cfg.enc_channels));
    kv.set("hidden", std::to_string(cfg.hidden));
    kv.set("mlp_hidden", std::to_string(cfg.mlp_hidden));
    kv.set("layers", std::to_string(cfg.layers));
    kv.set("heads", std::to_string(cfg.heads));
    kv.set("depth_planes", std::to_string(cfg.depth_planes));
    kv.set("distance_bins", std::to_string(cfg.distance_bins));
    kv.set("dec_channels", std::to_string(cfg.dec_channels));
    kv.set("cost_strategy", to_string(cfg.strategy));
    kv.set("near", fmt(cfg.near));
    kv.set("far", fmt(cfg.far));
    kv.set("scale_min", fmt(cfg.scale_min));
    kv.set("scale_max", fmt(cfg.scale_max));
    kv.set("qk_scale_init", fmt(cfg.qk_scale_init));
    kv.set("encoder_frozen", cfg.encoder_frozen ? "true" : "false");
    kv.set("aux_head", cfg.aux_head ? "true" : "false");
    return kv;
}

KeyValues train_config_to_kv(const TrainConfig& cfg) {
    KeyValues kv;
    kv.set("steps", std::to_string(cfg.steps));
    kv.set("peak_lr", fmt(cfg.schedule.peak_lr));
    kv.set("min_lr", fmt(cfg.schedule.min_lr));
    kv.set("warmup_steps", std::to_string(cfg.schedule.warmup_steps));
    kv.set("decay_until", std::to_string(cfg.schedule.decay_until));
    kv.set("grad_clip", fmt(cfg.grad_clip));
    kv.set("target_pose_prob", fmt(cfg.target_pose_prob));
    kv.set("hflip_prob", fmt(cfg.hflip_prob));
    kv.set("aux_weight", fmt(cfg.aux_weight));
    kv.set("aux_enabled", cfg.aux_enabled ? "true" : "false");
    kv.set("ema_decay", fmt(cfg.ema_decay));
    kv.set("use_gradient_loss", cfg.use_gradient_loss ? "true" : "false");
    kv.set("seed", std::to_string(cfg.seed));
    kv.set("grad_accum", std::to_string(cfg.grad_accum));
    kv.set("log_every", std::to_string(cfg.log_every));
    kv.set("checkpoint_every", std::to_string(cfg.checkpoint_every));
    return kv;
}

void write_config_file(const KeyValues& kv, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write config " + path);
    for (const auto& [k, v] : kv.items()) os << k << " = " << v << "\n";
}

void print_config(const KeyValues& kv, std::ostream& os) {
    for (const auto& [k, v] : kv.items()) os << "  " << k << " = " << v << "\n";
}

}  // namespace h3r
