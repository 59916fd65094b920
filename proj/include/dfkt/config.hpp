#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "dfkt/data.hpp"
#include "dfkt/guidance.hpp"
#include "dfkt/model.hpp"

namespace dfkt {

/// Flat `key = value` configuration; iteration order is the canonical
/// (sorted) order.
using ConfigMap = std::map<std::string, std::string>;

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys and
/// malformed lines raise ParameterError.
ConfigMap parse_config(const std::string& text);
ConfigMap load_config_file(const std::filesystem::path& path);

/// Sorted `key = value\n` lines.
std::string serialize_config(const ConfigMap& cfg);

/// 64-bit FNV-1a of serialize_config(cfg), as 16 hex digits.
std::string config_hash(const ConfigMap& cfg);

struct ScheduleConfig {
    int num_steps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
};

struct TrainConfig {
    int steps = 2000;
    int batch = 32;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.03;
    double ema_decay = 0.999; // 0 disables the EMA shadow
    double p_sem = 0.1;
    double p_ctl = 0.1;
    int dataset_size = 4096;
    std::uint64_t seed = 0;
    LossWeighting loss_weight{};

    void validate() const;
};

/// Everything a run needs besides the weights.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    ScheduleConfig schedule;
    GuidanceParams guidance; // sampling defaults

    void validate() const;
};

ConfigMap to_config_map(const RunConfig& cfg);

/// Applies keys on top of `base`. Unknown keys raise ParameterError.
RunConfig apply_config(const ConfigMap& map, RunConfig base = {});

} // namespace dfkt
