#include "dfkt/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "dfkt/errors.hpp"

namespace dfkt {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ParameterError("config: '" + key + "' expects a number, got '" + v + "'");
    }
}

long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ParameterError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ParameterError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ParameterError("config: '" + key + "' expects a boolean, got '" + v + "'");
}

std::string mode_name(SemanticMode m) { return m == SemanticMode::text ? "text" : "class"; }
std::string profile_name(ControlProfileKind k) { return k == ControlProfileKind::uniform ? "uniform" : "cosine"; }
std::string weighting_name(LossWeighting::Kind k) {
    switch (k) {
    case LossWeighting::Kind::unit:
        return "unit";
    case LossWeighting::Kind::capped:
        return "capped";
    case LossWeighting::Kind::inverse_sigma_sq:
        break;
    }
    return "inverse_sigma_sq";
}

std::string marker_name(MarkerPolicy m) { return m == MarkerPolicy::random ? "random" : "right"; }

} // namespace

ConfigMap parse_config(const std::string& text) {
    ConfigMap out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParameterError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParameterError("config line " + std::to_string(lineno) + ": empty key");
        if (!out.emplace(key, value).second) {
            throw ParameterError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
    }
    return out;
}

ConfigMap load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParameterError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const ConfigMap& cfg) {
    std::string out;
    for (const auto& [k, v] : cfg) out += k + " = " + v + "\n";
    return out;
}

std::string config_hash(const ConfigMap& cfg) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : serialize_config(cfg)) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& w) { throw ParameterError("TrainConfig: " + w); };
    if (steps < 0) fail("steps must be nonnegative");
    if (batch <= 0) fail("batch must be positive");
    if (!(lr > 0.0)) fail("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("momentums must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be nonnegative");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("ema_decay must lie in [0, 1)");
    if (!(p_sem >= 0.0 && p_sem <= 1.0 && p_ctl >= 0.0 && p_ctl <= 1.0)) fail("dropout rates must lie in [0, 1]");
    if (dataset_size <= 0) fail("dataset_size must be positive");
    if (!(loss_weight.cap > 0.0)) fail("loss_cap must be positive");
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    data.validate();
    if (data.resolution != model.image_size) {
        throw ParameterError("RunConfig: data.resolution must equal model.image_size");
    }
    if (model.mode == SemanticMode::class_label && model.vocab < data.classes) {
        throw ParameterError("RunConfig: class mode needs model.vocab >= data.classes");
    }
    if (schedule.num_steps < 2) throw ParameterError("RunConfig: schedule.steps must be at least 2");
}

ConfigMap to_config_map(const RunConfig& c) {
    ConfigMap m;
    m["model.image_size"] = std::to_string(c.model.image_size);
    m["model.patch_size"] = std::to_string(c.model.patch_size);
    m["model.channels"] = std::to_string(c.model.channels);
    m["model.depth"] = std::to_string(c.model.depth);
    m["model.width"] = std::to_string(c.model.width);
    m["model.heads"] = std::to_string(c.model.heads);
    m["model.tokens"] = std::to_string(c.model.tokens);
    m["model.cond_width"] = std::to_string(c.model.cond_width);
    m["model.vocab"] = std::to_string(c.model.vocab);
    m["model.embed_dim"] = std::to_string(c.model.embed_dim);
    m["model.mlp_ratio"] = std::to_string(c.model.mlp_ratio);
    m["model.mode"] = mode_name(c.model.mode);
    m["model.text_pad_noise"] = fmt_double(c.model.text_pad_noise);
    m["model.use_control"] = c.model.use_control ? "1" : "0";
    m["model.use_flip"] = c.model.use_flip ? "1" : "0";
    m["model.control_profile"] = profile_name(c.model.control_profile.kind);
    m["model.control_alpha"] = fmt_double(c.model.control_profile.alpha);

    m["train.steps"] = std::to_string(c.train.steps);
    m["train.batch"] = std::to_string(c.train.batch);
    m["train.lr"] = fmt_double(c.train.lr);
    m["train.beta1"] = fmt_double(c.train.beta1);
    m["train.beta2"] = fmt_double(c.train.beta2);
    m["train.adam_eps"] = fmt_double(c.train.adam_eps);
    m["train.weight_decay"] = fmt_double(c.train.weight_decay);
    m["train.ema_decay"] = fmt_double(c.train.ema_decay);
    m["train.p_sem"] = fmt_double(c.train.p_sem);
    m["train.p_ctl"] = fmt_double(c.train.p_ctl);
    m["train.dataset_size"] = std::to_string(c.train.dataset_size);
    m["train.seed"] = std::to_string(c.train.seed);
    m["train.loss_weight"] = weighting_name(c.train.loss_weight.kind);
    m["train.loss_cap"] = fmt_double(c.train.loss_weight.cap);

    m["data.classes"] = std::to_string(c.data.classes);
    m["data.resolution"] = std::to_string(c.data.resolution);
    m["data.crop_strategy"] = c.data.strategy.name();
    m["data.p_flip"] = fmt_double(c.data.p_flip);
    m["data.source_min"] = std::to_string(c.data.source_min);
    m["data.source_max"] = std::to_string(c.data.source_max);
    m["data.marker"] = marker_name(c.data.marker);
    m["data.jitter"] = fmt_double(c.data.jitter);

    m["schedule.steps"] = std::to_string(c.schedule.num_steps);
    m["schedule.beta_start"] = fmt_double(c.schedule.beta_start);
    m["schedule.beta_end"] = fmt_double(c.schedule.beta_end);

    m["guidance.lambda"] = fmt_double(c.guidance.lambda);
    m["guidance.beta"] = fmt_double(c.guidance.beta);
    return m;
}

RunConfig apply_config(const ConfigMap& map, RunConfig c) {
    using Setter = std::function<void(const std::string&, const std::string&)>;
    const std::map<std::string, Setter> setters = {
        {"model.image_size", [&](auto& k, auto& v) { c.model.image_size = static_cast<int>(parse_int(k, v)); }},
        {"model.patch_size", [&](auto& k, auto& v) { c.model.patch_size = static_cast<int>(parse_int(k, v)); }},
        {"model.channels", [&](auto& k, auto& v) { c.model.channels = static_cast<int>(parse_int(k, v)); }},
        {"model.depth", [&](auto& k, auto& v) { c.model.depth = static_cast<int>(parse_int(k, v)); }},
        {"model.width", [&](auto& k, auto& v) { c.model.width = static_cast<int>(parse_int(k, v)); }},
        {"model.heads", [&](auto& k, auto& v) { c.model.heads = static_cast<int>(parse_int(k, v)); }},
        {"model.tokens", [&](auto& k, auto& v) { c.model.tokens = static_cast<int>(parse_int(k, v)); }},
        {"model.cond_width", [&](auto& k, auto& v) { c.model.cond_width = static_cast<int>(parse_int(k, v)); }},
        {"model.vocab", [&](auto& k, auto& v) { c.model.vocab = static_cast<int>(parse_int(k, v)); }},
        {"model.embed_dim", [&](auto& k, auto& v) { c.model.embed_dim = static_cast<int>(parse_int(k, v)); }},
        {"model.mlp_ratio", [&](auto& k, auto& v) { c.model.mlp_ratio = static_cast<int>(parse_int(k, v)); }},
        {"model.mode",
         [&](auto& k, auto& v) {
             if (v == "class") c.model.mode = SemanticMode::class_label;
             else if (v == "text") c.model.mode = SemanticMode::text;
             else throw ParameterError("config: '" + k + "' must be class or text");
         }},
        {"model.text_pad_noise", [&](auto& k, auto& v) { c.model.text_pad_noise = parse_double(k, v); }},
        {"model.use_control", [&](auto& k, auto& v) { c.model.use_control = parse_bool(k, v); }},
        {"model.use_flip", [&](auto& k, auto& v) { c.model.use_flip = parse_bool(k, v); }},
        {"model.control_profile",
         [&](auto& k, auto& v) {
             if (v == "cosine") c.model.control_profile.kind = ControlProfileKind::power_cosine;
             else if (v == "uniform") c.model.control_profile.kind = ControlProfileKind::uniform;
             else throw ParameterError("config: '" + k + "' must be cosine or uniform");
         }},
        {"model.control_alpha", [&](auto& k, auto& v) { c.model.control_profile.alpha = parse_double(k, v); }},

        {"train.steps", [&](auto& k, auto& v) { c.train.steps = static_cast<int>(parse_int(k, v)); }},
        {"train.batch", [&](auto& k, auto& v) { c.train.batch = static_cast<int>(parse_int(k, v)); }},
        {"train.lr", [&](auto& k, auto& v) { c.train.lr = parse_double(k, v); }},
        {"train.beta1", [&](auto& k, auto& v) { c.train.beta1 = parse_double(k, v); }},
        {"train.beta2", [&](auto& k, auto& v) { c.train.beta2 = parse_double(k, v); }},
        {"train.adam_eps", [&](auto& k, auto& v) { c.train.adam_eps = parse_double(k, v); }},
        {"train.weight_decay", [&](auto& k, auto& v) { c.train.weight_decay = parse_double(k, v); }},
        {"train.ema_decay", [&](auto& k, auto& v) { c.train.ema_decay = parse_double(k, v); }},
        {"train.p_sem", [&](auto& k, auto& v) { c.train.p_sem = parse_double(k, v); }},
        {"train.p_ctl", [&](auto& k, auto& v) { c.train.p_ctl = parse_double(k, v); }},
        {"train.dataset_size", [&](auto& k, auto& v) { c.train.dataset_size = static_cast<int>(parse_int(k, v)); }},
        {"train.seed", [&](auto& k, auto& v) { c.train.seed = parse_u64(k, v); }},
        {"train.loss_weight",
         [&](auto& k, auto& v) {
             if (v == "inverse_sigma_sq") c.train.loss_weight.kind = LossWeighting::Kind::inverse_sigma_sq;
             else if (v == "unit") c.train.loss_weight.kind = LossWeighting::Kind::unit;
             else if (v == "capped") c.train.loss_weight.kind = LossWeighting::Kind::capped;
             else throw ParameterError("config: '" + k + "' must be inverse_sigma_sq, unit or capped");
         }},
        {"train.loss_cap", [&](auto& k, auto& v) { c.train.loss_weight.cap = parse_double(k, v); }},

        {"data.classes", [&](auto& k, auto& v) { c.data.classes = static_cast<int>(parse_int(k, v)); }},
        {"data.resolution", [&](auto& k, auto& v) { c.data.resolution = static_cast<int>(parse_int(k, v)); }},
        {"data.crop_strategy", [&](auto&, auto& v) { c.data.strategy = CropStrategy::parse(v); }},
        {"data.p_flip", [&](auto& k, auto& v) { c.data.p_flip = parse_double(k, v); }},
        {"data.source_min", [&](auto& k, auto& v) { c.data.source_min = static_cast<int>(parse_int(k, v)); }},
        {"data.source_max", [&](auto& k, auto& v) { c.data.source_max = static_cast<int>(parse_int(k, v)); }},
        {"data.marker",
         [&](auto& k, auto& v) {
             if (v == "right") c.data.marker = MarkerPolicy::canonical_right;
             else if (v == "random") c.data.marker = MarkerPolicy::random;
             else throw ParameterError("config: '" + k + "' must be right or random");
         }},
        {"data.jitter", [&](auto& k, auto& v) { c.data.jitter = parse_double(k, v); }},

        {"schedule.steps", [&](auto& k, auto& v) { c.schedule.num_steps = static_cast<int>(parse_int(k, v)); }},
        {"schedule.beta_start", [&](auto& k, auto& v) { c.schedule.beta_start = parse_double(k, v); }},
        {"schedule.beta_end", [&](auto& k, auto& v) { c.schedule.beta_end = parse_double(k, v); }},

        {"guidance.lambda", [&](auto& k, auto& v) { c.guidance.lambda = parse_double(k, v); }},
        {"guidance.beta", [&](auto& k, auto& v) { c.guidance.beta = parse_double(k, v); }},
    };
    for (const auto& [k, v] : map) {
        const auto it = setters.find(k);
        if (it == setters.end()) throw ParameterError("config: unknown key '" + k + "'");
        it->second(k, v);
    }
    return c;
}

} // namespace dfkt
