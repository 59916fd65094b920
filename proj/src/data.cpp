#include "dfkt/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "dfkt/errors.hpp"

namespace dfkt {

namespace {

constexpr std::array<std::array<float, 3>, kNumColors> kColors = {{
    {0.85f, -0.75f, -0.70f}, // red
    {-0.75f, -0.35f, 0.90f}, // blue
}};
constexpr std::array<float, 3> kBackground = {-0.55f, -0.55f, -0.55f};
constexpr std::array<float, 3> kMarker = {1.0f, 1.0f, 1.0f};
constexpr std::array<const char*, kNumShapes> kShapeNames = {"circle", "ring", "triangle", "cross"};
constexpr std::array<const char*, kNumColors> kColorNames = {"red", "blue"};
constexpr int kSupersample = 4;

bool inside_shape(const ShapeSpec& s, double x, double y) {
    const double half = s.size / 2;
    const double dx = x - s.cx;
    const double dy = y - s.cy;
    switch (s.shape()) {
    case ShapeKind::circle:
        return dx * dx + dy * dy <= half * half;
    case ShapeKind::ring: {
        const double r2 = dx * dx + dy * dy;
        return r2 <= half * half && r2 >= 0.2 * half * half;
    }
    case ShapeKind::triangle: {
        // Apex up, base at cy + half; width grows linearly downwards.
        if (dy < -half || dy > half) return false;
        const double w = (dy + half) / 2.0;
        return std::abs(dx) <= w;
    }
    case ShapeKind::cross: {
        const double arm = s.size / 5;
        return (std::abs(dx) <= half && std::abs(dy) <= arm) || (std::abs(dy) <= half && std::abs(dx) <= arm);
    }
    }
    return false;
}

bool inside_marker(const ShapeSpec& s, double x, double y) {
    const double h = s.marker_half();
    return std::abs(x - s.marker_cx()) <= h && std::abs(y - s.cy) <= h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

double ShapeSpec::marker_cx() const {
    const double offset = size / 2 + zoom * marker_gap + marker_half();
    return marker_side == MarkerSide::right ? cx + offset : cx - offset;
}

void ShapeSpec::validate() const {
    if (blank) return;
    if (class_id < 0 || class_id >= kNumShapes * kNumColors) throw ParameterError("ShapeSpec: class id out of range");
    if (!(size > 0.0 && size < 1.0)) throw ParameterError("ShapeSpec: size must lie in (0, 1)");
    const double half = size / 2;
    if (cx - half < 0 || cx + half > 1 || cy - half < 0 || cy + half > 1) {
        throw ParameterError("ShapeSpec: shape leaves the frame");
    }
    if (!(zoom > 0.0)) throw ParameterError("ShapeSpec: zoom must be positive");
    const double mh = marker_half();
    const double mx = marker_cx();
    if (mx - mh < 0 || mx + mh > 1 || cy - mh < 0 || cy + mh > 1) {
        throw ParameterError("ShapeSpec: marker leaves the frame");
    }
}

ShapeSpec ShapeSpec::mirrored() const {
    ShapeSpec m = *this;
    m.cx = 1.0 - cx;
    m.marker_side = marker_side == MarkerSide::right ? MarkerSide::left : MarkerSide::right;
    return m;
}

Image rasterize(const ShapeSpec& spec, int resolution, double brightness_offset) {
    Image img(3, resolution, resolution);
    std::array<float, 3> color{};
    if (!spec.blank) {
        for (int c = 0; c < 3; ++c) {
            color[static_cast<std::size_t>(c)] = static_cast<float>(std::clamp(
                kColors[static_cast<std::size_t>(spec.color())][static_cast<std::size_t>(c)] + brightness_offset, -1.0,
                1.0));
        }
    }
    const double inv = 1.0 / resolution;
    const double sub = 1.0 / kSupersample;
    const float w = 1.0f / (kSupersample * kSupersample);
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            int n_marker = 0, n_shape = 0;
            for (int sy = 0; sy < kSupersample && !spec.blank; ++sy) {
                for (int sx = 0; sx < kSupersample; ++sx) {
                    const double px = (x + (sx + 0.5) * sub) * inv;
                    const double py = (y + (sy + 0.5) * sub) * inv;
                    if (inside_marker(spec, px, py)) {
                        ++n_marker;
                    } else if (inside_shape(spec, px, py)) {
                        ++n_shape;
                    }
                }
            }
            // Integer coverage counts keep uniform pixels exact.
            const int n_bg = kSupersample * kSupersample - n_marker - n_shape;
            for (int c = 0; c < 3; ++c) {
                const auto k = static_cast<std::size_t>(c);
                img.at(c, y, x) = (static_cast<float>(n_bg) * kBackground[k] + static_cast<float>(n_marker) * kMarker[k] +
                                   static_cast<float>(n_shape) * color[k]) *
                                  w;
            }
        }
    }
    return img;
}

Image render(const ShapeSpec& spec, int resolution, std::mt19937_64& rng, double jitter) {
    if (resolution < 8) throw ParameterError("render: resolution must be at least 8");
    spec.validate();
    const double offset = jitter > 0.0 ? std::uniform_real_distribution<double>(-jitter, jitter)(rng) : 0.0;
    return rasterize(spec, resolution, offset);
}

std::string caption(const ShapeSpec& spec) {
    std::ostringstream os;
    os << "a " << kColorNames[static_cast<std::size_t>(spec.color())] << " "
       << kShapeNames[static_cast<std::size_t>(spec.shape())] << " with a marker on the "
       << (spec.marker_side == MarkerSide::right ? "right" : "left");
    return os.str();
}

CropStrategy CropStrategy::named(CropKind kind) {
    switch (kind) {
    case CropKind::global: return {kind, 0.9, 1.0};
    case CropKind::local: return {kind, 0.4, 0.6};
    case CropKind::mix: return {kind, 0.4, 1.0};
    }
    throw ParameterError("CropStrategy: unknown kind");
}

CropStrategy CropStrategy::parse(const std::string& name) {
    if (name == "global") return named(CropKind::global);
    if (name == "local") return named(CropKind::local);
    if (name == "mix") return named(CropKind::mix);
    throw ParameterError("unknown crop strategy '" + name + "'");
}

std::string CropStrategy::name() const {
    switch (kind) {
    case CropKind::global: return "global";
    case CropKind::local: return "local";
    case CropKind::mix: return "mix";
    }
    return "global";
}

Augmented augment(const Image& image, const ShapeSpec& spec, const CropStrategy& strategy,
                  int target_resolution, double p_flip, std::mt19937_64& rng) {
    if (!(strategy.lo > 0.0 && strategy.lo <= strategy.hi && strategy.hi <= 1.0)) {
        throw ParameterError("augment: crop scale range must lie in (0, 1]");
    }
    if (target_resolution <= 0) throw ParameterError("augment: target resolution must be positive");
    const double scale = strategy.lo == strategy.hi
                             ? strategy.lo
                             : std::uniform_real_distribution<double>(strategy.lo, strategy.hi)(rng);
    const int side = std::max(1, static_cast<int>(std::lround(std::sqrt(scale * image.height * image.width))));
    if (side > image.height || side > image.width) throw ParameterError("augment: crop larger than image");
    const int top = std::uniform_int_distribution<int>(0, image.height - side)(rng);
    const int left = std::uniform_int_distribution<int>(0, image.width - side)(rng);
    const bool flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p_flip;

    Augmented out;
    out.image = resize(crop(image, top, left, side, side), target_resolution, target_resolution);
    if (flip) out.image = flip_horizontal(out.image);
    out.meta = ControlMeta{image.height, image.width, top, left, scale, flip};

    out.spec = spec;
    out.spec.cx = (spec.cx * image.width - left) / side;
    out.spec.cy = (spec.cy * image.height - top) / side;
    out.spec.size = spec.size * image.width / side;
    out.spec.zoom = spec.zoom * image.width / side;
    if (flip) out.spec = out.spec.mirrored();
    return out;
}

void DataConfig::validate() const {
    if (classes <= 0 || classes > kNumShapes * kNumColors) throw ParameterError("DataConfig: classes must lie in [1, 8]");
    if (resolution < 8) throw ParameterError("DataConfig: resolution must be at least 8");
    if (!(p_flip >= 0.0 && p_flip <= 1.0)) throw ParameterError("DataConfig: p_flip must lie in [0, 1]");
    if (min_source() < 8 || min_source() > max_source()) throw ParameterError("DataConfig: bad source size range");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL));
}

ShapeDataset::ShapeDataset(DataConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) { cfg_.validate(); }

int ShapeDataset::class_of(std::uint64_t index) const {
    const auto k = static_cast<std::uint64_t>(cfg_.classes);
    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(derive_seed(seed_ ^ 0x5bd1e995ULL, index / k));
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm[static_cast<std::size_t>(index % k)];
}

Sample ShapeDataset::at(std::uint64_t index) const {
    std::mt19937_64 rng(derive_seed(seed_, index));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    ShapeSpec spec;
    spec.class_id = class_of(index);
    spec.size = 0.4 + 0.15 * unif(rng);
    // Shape + marker group centered near the middle, marker towards its side.
    const double group_cx = 0.46 + 0.08 * unif(rng);
    spec.cy = 0.4 + 0.2 * unif(rng);
    spec.marker_side = MarkerSide::right;
    if (cfg_.marker == MarkerPolicy::random && unif(rng) < 0.5) spec.marker_side = MarkerSide::left;
    const double shift = (ShapeSpec::marker_gap + ShapeSpec::marker_size) / 2;
    spec.cx = spec.marker_side == MarkerSide::right ? group_cx - shift : group_cx + shift;
    const int source = std::uniform_int_distribution<int>(cfg_.min_source(), cfg_.max_source())(rng);
    const Image src = render(spec, source, rng, cfg_.jitter);
    Augmented aug = augment(src, spec, cfg_.strategy, cfg_.resolution, cfg_.p_flip, rng);

    Sample s;
    s.image = std::move(aug.image);
    s.label = spec.class_id;
    s.meta = aug.meta;
    s.spec = aug.spec;
    s.prompt = caption(aug.spec);
    return s;
}

std::vector<Sample> dataset(std::size_t n, const DataConfig& cfg, std::uint64_t seed) {
    if (n == 0) throw ParameterError("dataset: need at least one sample");
    const ShapeDataset ds(cfg, seed);
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(ds.at(i));
    return out;
}

namespace {

std::filesystem::path stem_path(const std::filesystem::path& dir, std::uint64_t index) {
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << index;
    return dir / os.str();
}

} // namespace

void write_sample(const std::filesystem::path& dir, std::uint64_t index, const Sample& sample) {
    std::filesystem::create_directories(dir);
    const auto stem = stem_path(dir, index);
    write_pnm(stem.string() + (sample.image.channels == 3 ? ".ppm" : ".pgm"), sample.image);
    std::ofstream meta(stem.string() + ".txt");
    meta << sample.label << "," << (sample.spec.marker_side == MarkerSide::right ? "right" : "left") << ","
         << sample.meta.orig_h << "," << sample.meta.orig_w << "," << sample.meta.crop_top << ","
         << sample.meta.crop_left << "," << std::setprecision(17) << sample.meta.crop_scale << ","
         << (sample.meta.flip ? 1 : 0) << "\n";
    if (!meta) throw std::runtime_error("write_sample: cannot write metadata for " + stem.string());
}

Sample read_sample(const std::filesystem::path& dir, std::uint64_t index) {
    const auto stem = stem_path(dir, index);
    Sample s;
    const std::filesystem::path ppm = stem.string() + ".ppm";
    s.image = read_pnm(std::filesystem::exists(ppm) ? ppm : std::filesystem::path(stem.string() + ".pgm"));
    std::ifstream in(stem.string() + ".txt");
    std::string line;
    if (!std::getline(in, line)) throw ParameterError("read_sample: missing metadata for " + stem.string());
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
    if (f.size() != 8) throw ParameterError("read_sample: malformed metadata line");
    s.label = std::stoi(f[0]);
    s.spec.class_id = s.label;
    s.spec.marker_side = f[1] == "right" ? MarkerSide::right : MarkerSide::left;
    s.meta = ControlMeta{std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4]), std::stoi(f[5]), std::stod(f[6]),
                         f[7] == "1"};
    s.prompt = caption(s.spec);
    return s;
}

} // namespace dfkt
