#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dfkt/config.hpp"
#include "dfkt/model.hpp"

namespace dfkt {

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Everything needed to resume training or sample: configuration, schedule,
/// positional grid, weights, optional EMA shadow, and the control records
/// logged during training (used by the train-distribution size policy).
struct Checkpoint {
    RunConfig config;
    NoiseSchedule schedule;
    GridDescriptor grid;
    ParamSet<float> params;
    std::optional<ParamSet<float>> ema;
    std::vector<ControlMeta> train_metas;

    /// Model view over the EMA weights when present and requested.
    Model model(bool prefer_ema = true) const;
};

/// Byte layout, all integers and reals little-endian:
///   "DFKT" u16 version
///   u32 len, config text (sorted `key = value` lines)
///   u32 T, f64 scale, T x f64 betas, T x f64 alpha_bars
///   i32 grid_size, i32 grid_scale, u8 grid_mode
///   tensor block (params)
///   u8 has_ema [tensor block]
///   u32 n, n x (i32 orig_h, i32 orig_w, i32 top, i32 left, f64 crop_scale, u8 flip)
///   u32 crc32 of all preceding bytes
/// A tensor block is u32 count followed by, per tensor,
///   u16 name_len, name, u8 rank, rank x u32 dims, f32 values.
std::string encode_checkpoint(const Checkpoint& ckpt);

/// Throws ChecksumError on checksum or framing damage, ParameterError on an
/// unknown version or inconsistent content.
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes atomically (temp file + rename) while holding `<path>.lock`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

bool same_tensors(const ParamSet<float>& a, const ParamSet<float>& b);
bool operator==(const Checkpoint& a, const Checkpoint& b);

} // namespace dfkt
