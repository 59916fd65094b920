#pragma once

#include <cstdint>
#include <optional>

#include "dfkt/checkpoint.hpp"
#include "dfkt/metrics.hpp"

namespace dfkt {

/// Shared settings for checkpoint evaluations. Samples use the logged
/// training sizes when the checkpoint has them, the model resolution otherwise.
struct EvalOptions {
    int count = 256;
    int num_steps = 50;
    std::optional<GuidanceParams> guidance; // unset: checkpoint defaults
    std::uint64_t seed = 0;
    bool use_ema = true;
};

/// Class oracle agreement, classes cycled over the samples.
OracleScore evaluate_class_accuracy(const Checkpoint& ckpt, const EvalOptions& opts);

/// Flip oracle agreement; the first half requests no flip, the second half a flip.
OracleScore evaluate_flip_accuracy(const Checkpoint& ckpt, const EvalOptions& opts);

/// Frechet distance between `count` samples and `count` dataset images. The
/// extractor and the real images depend only on the seed and the data config.
double evaluate_frechet(const Checkpoint& ckpt, const EvalOptions& opts);

/// Same reference, compared against uniform noise images.
double noise_frechet(const DataConfig& data, int channels, const EvalOptions& opts);

/// Diversity over one condition per class and a few padding seeds.
double evaluate_diversity(const Checkpoint& ckpt, const EvalOptions& opts, bool high_res = false);

} // namespace dfkt
