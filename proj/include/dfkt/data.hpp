#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dfkt/conditioning.hpp"
#include "dfkt/image.hpp"

namespace dfkt {

enum class ShapeKind { circle = 0, ring = 1, triangle = 2, cross = 3 };
enum class MarkerSide { left, right };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 2;

/// Ground truth of one synthetic image. Coordinates are fractions of the
/// image side, x to the right and y downwards. Class id = shape * 2 + color.
struct ShapeSpec {
    int class_id = 0;
    MarkerSide marker_side = MarkerSide::right;
    double cx = 0.5;
    double cy = 0.5;
    double size = 0.4; // shape extent as a fraction of the image side
    double zoom = 1.0; // marker and gap scale; > 1 after cropping into the frame
    bool blank = false; // background only

    static constexpr double marker_size = 0.2;
    static constexpr double marker_gap = 0.03;

    ShapeKind shape() const { return static_cast<ShapeKind>(class_id / kNumColors); }
    int color() const { return class_id % kNumColors; }
    double marker_cx() const;
    double marker_half() const { return zoom * marker_size / 2; }
    /// Shape and marker fully inside the unit frame.
    void validate() const;
    /// Same scene mirrored left-right.
    ShapeSpec mirrored() const;
    bool operator==(const ShapeSpec&) const = default;
};

/// Anti-aliased render. Draws one brightness jitter value from `rng`.
Image render(const ShapeSpec& spec, int resolution, std::mt19937_64& rng, double jitter = 0.05);

/// Render without frame validation, for specs describing a cropped viewport.
Image rasterize(const ShapeSpec& spec, int resolution, double brightness_offset);

std::string caption(const ShapeSpec& spec);

enum class CropKind { global, local, mix };

struct CropStrategy {
    CropKind kind = CropKind::global;
    double lo = 0.9;
    double hi = 1.0;

    static CropStrategy named(CropKind kind);
    static CropStrategy parse(const std::string& name);
    std::string name() const;
};

struct Augmented {
    Image image;
    ControlMeta meta;
    ShapeSpec spec; // ground truth in the output frame
};

/// Square crop of area fraction ~ U(strategy range), resized to
/// `target_resolution`, then flipped with probability `p_flip`.
Augmented augment(const Image& image, const ShapeSpec& spec, const CropStrategy& strategy,
                  int target_resolution, double p_flip, std::mt19937_64& rng);

enum class MarkerPolicy {
    canonical_right, // every source has the marker on the right; flips move it
    random,
};

struct DataConfig {
    int classes = 8;
    int resolution = 16;
    CropStrategy strategy{};
    double p_flip = 0.5;
    int source_min = 0; // 0 -> resolution / 2
    int source_max = 0; // 0 -> resolution * 2
    MarkerPolicy marker = MarkerPolicy::canonical_right;
    double jitter = 0.05;

    void validate() const;
    int min_source() const { return source_min > 0 ? source_min : std::max(8, resolution / 2); }
    int max_source() const { return source_max > 0 ? source_max : resolution * 2; }
};

struct Sample {
    Image image;
    int label = 0;
    std::string prompt;
    ControlMeta meta;
    ShapeSpec spec; // ground truth after augmentation
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Deterministic, index-addressable sample stream. Classes are balanced in
/// every consecutive block of `classes` indices.
class ShapeDataset {
public:
    ShapeDataset(DataConfig cfg, std::uint64_t seed);

    Sample at(std::uint64_t index) const;
    int class_of(std::uint64_t index) const;
    const DataConfig& config() const { return cfg_; }

private:
    DataConfig cfg_;
    std::uint64_t seed_;
};

std::vector<Sample> dataset(std::size_t n, const DataConfig& cfg, std::uint64_t seed);

/// One file per sample: `<stem>.ppm` (or .pgm) and `<stem>.txt` holding
/// `class,marker_side,orig_h,orig_w,crop_top,crop_left,crop_scale,flip`.
void write_sample(const std::filesystem::path& dir, std::uint64_t index, const Sample& sample);
Sample read_sample(const std::filesystem::path& dir, std::uint64_t index);

} // namespace dfkt
