#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dfkt/checkpoint.hpp"
#include "dfkt/data.hpp"
#include "dfkt/guidance.hpp"
#include "dfkt/image.hpp"

namespace dfkt {

/// Frozen random projection of flattened pixels followed by tanh.
class FeatureExtractor {
public:
    FeatureExtractor(int input_dim, std::uint64_t seed, int features = 64);

    int input_dim() const { return static_cast<int>(proj_.rows()); }
    int features() const { return static_cast<int>(proj_.cols()); }

    /// One row per image.
    MatrixD extract(const std::vector<Image>& images) const;
    MatrixD extract(const MatrixD& rows) const;

private:
    MatrixD proj_;
};

/// Squared Frechet distance between Gaussian fits of two feature sets.
/// Both covariances get a 1e-6 ridge; needs more rows than columns.
double frechet_distance(const MatrixD& a, const MatrixD& b);

/// Mean pairwise per-pixel squared distance among generations that share
/// start noise and condition but differ in (orig_h, orig_w), averaged over
/// conditions. Start noise is keyed on the condition, so the result does not
/// depend on list order.
struct DiversityOptions {
    int num_steps = 50;
    GuidanceParams guidance{1.0, 1.0};
    bool use_ema = true;
};

double diversity_score(const Checkpoint& ckpt, const std::vector<ConditioningBundle>& conditions,
                       const std::vector<std::pair<int, int>>& sizes, std::uint64_t seed,
                       const DiversityOptions& opts = {});

/// {8, 12, 16, 24, 32} square sizes; the high-resolution variant drops the
/// two smallest.
std::vector<std::pair<int, int>> diversity_sizes();
std::vector<std::pair<int, int>> diversity_sizes_high_res();

enum class FlipVerdict { left, right, undecided };

/// Side of the white marker, from near-white pixel mass in each half.
FlipVerdict flip_oracle(const Image& image);

/// Clean per-class renders over a grid of positions and sizes, marker on the
/// right.
struct TemplateBank {
    int resolution = 16;
    std::vector<Image> images;
    std::vector<int> labels;

    static TemplateBank build(int classes, int resolution);
};

struct ClassVerdict {
    int class_id = 0;
    double distance = 0.0; // per-pixel mean squared distance to the best template
    double margin = 0.0;   // runner-up class distance minus best
    bool low_confidence = false;
};

/// Nearest template after mirroring left-marker images.
ClassVerdict class_oracle(const Image& image, const TemplateBank& templates);

/// Oracle agreement over a batch. `flagged` counts undecided flips or
/// low-confidence classes; those still count in `total`.
struct OracleScore {
    int total = 0;
    int correct = 0;
    int flagged = 0;

    double accuracy() const { return total > 0 ? static_cast<double>(correct) / total : 0.0; }
    double decided_accuracy() const {
        return total > flagged ? static_cast<double>(correct) / (total - flagged) : 0.0;
    }
};

OracleScore class_accuracy(const std::vector<Image>& images, const std::vector<int>& labels,
                           const TemplateBank& templates);

/// A requested flip puts the marker on the left.
OracleScore flip_accuracy(const std::vector<Image>& images, const std::vector<bool>& requested_flip);

/// Frechet distance between two image sets through one extractor.
double image_frechet_distance(const std::vector<Image>& a, const std::vector<Image>& b,
                              const FeatureExtractor& features);

/// Dataset images at indices [0, n).
std::vector<Image> real_images(const DataConfig& cfg, int n, std::uint64_t seed);

/// Pixels i.i.d. uniform on [-1, 1].
std::vector<Image> uniform_noise_images(int n, int channels, int resolution, std::uint64_t seed);

/// `metric,value,config_hash,seed` line.
std::string eval_csv_row(const std::string& metric, double value, const std::string& config_hash,
                         std::uint64_t seed);

} // namespace dfkt
