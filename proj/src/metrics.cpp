#include "dfkt/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "dfkt/data.hpp"
#include "dfkt/engine.hpp"
#include "dfkt/errors.hpp"

namespace dfkt {

FeatureExtractor::FeatureExtractor(int input_dim, std::uint64_t seed, int features) {
    if (input_dim <= 0 || features <= 0) throw ParameterError("FeatureExtractor: dimensions must be positive");
    proj_.resize(input_dim, features);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(input_dim)));
    for (Eigen::Index k = 0; k < proj_.size(); ++k) proj_.data()[k] = normal(rng);
}

MatrixD FeatureExtractor::extract(const MatrixD& rows) const {
    if (rows.cols() != proj_.rows()) throw ShapeError("FeatureExtractor: input width mismatch");
    return (rows * proj_).array().tanh().matrix();
}

MatrixD FeatureExtractor::extract(const std::vector<Image>& images) const {
    MatrixD rows(static_cast<Eigen::Index>(images.size()), proj_.rows());
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (static_cast<Eigen::Index>(images[i].data.size()) != proj_.rows()) {
            throw ShapeError("FeatureExtractor: image size mismatch");
        }
        for (Eigen::Index k = 0; k < proj_.rows(); ++k) {
            rows(static_cast<Eigen::Index>(i), k) = images[i].data[static_cast<std::size_t>(k)];
        }
    }
    return extract(rows);
}

namespace {

void moments(const MatrixD& x, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
    mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
    cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    cov.diagonal().array() += 1e-6;
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

// Tr((sqrt(A) B sqrt(A))^(1/2)), which equals Tr((A B)^(1/2)) for PSD A, B.
double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::MatrixXd ra = sym_sqrt(a);
    Eigen::MatrixXd m = ra * b * ra;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

} // namespace

double frechet_distance(const MatrixD& a, const MatrixD& b) {
    if (a.cols() != b.cols()) throw ShapeError("frechet_distance: feature widths differ");
    if (a.rows() <= a.cols() || b.rows() <= b.cols()) {
        throw ParameterError("frechet_distance: need more samples than feature dimensions");
    }
    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd ca, cb;
    moments(a, ma, ca);
    moments(b, mb, cb);
    // Averaging both orderings makes the result symmetric to rounding.
    const double cross = 0.5 * (trace_sqrt_product(ca, cb) + trace_sqrt_product(cb, ca));
    const double d = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * cross;
    return std::max(0.0, d);
}

std::vector<std::pair<int, int>> diversity_sizes() { return {{8, 8}, {12, 12}, {16, 16}, {24, 24}, {32, 32}}; }

std::vector<std::pair<int, int>> diversity_sizes_high_res() { return {{16, 16}, {24, 24}, {32, 32}}; }

namespace {

std::uint64_t condition_key(const ConditioningBundle& c) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](std::uint64_t v) {
        h ^= v;
        h *= 1099511628211ULL;
    };
    for (int t : c.tokens) mix(static_cast<std::uint64_t>(t));
    mix(static_cast<std::uint64_t>(c.control.crop_top));
    mix(static_cast<std::uint64_t>(c.control.crop_left));
    mix(std::bit_cast<std::uint64_t>(c.control.crop_scale));
    mix(c.control.flip ? 1 : 0);
    mix(c.drop_semantic ? 1 : 0);
    mix(c.drop_control ? 1 : 0);
    mix(c.pad_seed);
    return h;
}

} // namespace

double diversity_score(const Checkpoint& ckpt, const std::vector<ConditioningBundle>& conditions,
                       const std::vector<std::pair<int, int>>& sizes, std::uint64_t seed,
                       const DiversityOptions& opts) {
    if (conditions.empty()) throw ParameterError("diversity_score: empty condition list");
    if (sizes.size() < 2) throw ParameterError("diversity_score: need at least two sizes");
    const Model model = ckpt.model(opts.use_ema);
    const int pixels = model.config.pixels();
    const int n = static_cast<int>(sizes.size());

    std::vector<double> per_condition;
    per_condition.reserve(conditions.size());
    for (const auto& cond : conditions) {
        std::vector<ConditioningBundle> bundles(sizes.size(), cond);
        for (int i = 0; i < n; ++i) {
            bundles[static_cast<std::size_t>(i)].control.orig_h = sizes[static_cast<std::size_t>(i)].first;
            bundles[static_cast<std::size_t>(i)].control.orig_w = sizes[static_cast<std::size_t>(i)].second;
        }
        const MatrixF one = initial_noise(1, pixels, derive_seed(seed, condition_key(cond)));
        const MatrixF noise = one.replicate(n, 1);
        const MatrixF x = sample_bundles(model, ckpt.schedule, bundles, noise, opts.num_steps, opts.guidance);

        double sum = 0.0;
        int pairs = 0;
        for (int a = 0; a < n; ++a) {
            for (int b = a + 1; b < n; ++b) {
                sum += (x.row(a).cast<double>() - x.row(b).cast<double>()).squaredNorm() / pixels;
                ++pairs;
            }
        }
        per_condition.push_back(sum / pairs);
    }
    std::sort(per_condition.begin(), per_condition.end());
    double total = 0.0;
    for (double v : per_condition) total += v;
    return total / static_cast<double>(per_condition.size());
}

FlipVerdict flip_oracle(const Image& image) {
    // Only the marker is bright in every channel: shapes and background keep
    // at least one channel at or below -0.55.
    constexpr double threshold = -0.2;
    double left = 0.0, right = 0.0;
    const int half = image.width / 2;
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            double lo = std::numeric_limits<double>::infinity();
            for (int c = 0; c < image.channels; ++c) lo = std::min(lo, static_cast<double>(image.at(c, y, x)));
            const double mass = std::max(0.0, lo - threshold);
            if (image.width % 2 == 1 && x == half) continue;
            (x < half ? left : right) += mass;
        }
    }
    const double total = left + right;
    // A marker covers 4% of the frame; require a quarter of that at full strength.
    const double min_mass = 0.01 * image.width * image.height * (1.0 - threshold);
    if (total < min_mass || std::abs(left - right) < 0.2 * total) return FlipVerdict::undecided;
    return left > right ? FlipVerdict::left : FlipVerdict::right;
}

TemplateBank TemplateBank::build(int classes, int resolution) {
    TemplateBank bank;
    bank.resolution = resolution;
    // Covers the sampling ranges of ShapeDataset plus a margin for crops.
    const double group_x[] = {0.42, 0.46, 0.5, 0.54, 0.58};
    const double centers_y[] = {0.36, 0.43, 0.5, 0.57, 0.64};
    const double sizes[] = {0.38, 0.43, 0.48, 0.53, 0.58};
    const double shift = (ShapeSpec::marker_gap + ShapeSpec::marker_size) / 2;
    for (int k = 0; k < classes; ++k) {
        for (double gx : group_x) {
            for (double cy : centers_y) {
                for (double size : sizes) {
                    ShapeSpec spec;
                    spec.class_id = k;
                    spec.marker_side = MarkerSide::right;
                    spec.cx = gx - shift;
                    spec.cy = cy;
                    spec.size = size;
                    bank.images.push_back(rasterize(spec, resolution, 0.0));
                    bank.labels.push_back(k);
                }
            }
        }
    }
    return bank;
}

ClassVerdict class_oracle(const Image& image, const TemplateBank& templates) {
    if (templates.images.empty()) throw ParameterError("class_oracle: empty template bank");
    const Image probe = flip_oracle(image) == FlipVerdict::left ? flip_horizontal(image) : image;
    if (probe.data.size() != templates.images.front().data.size()) {
        throw ShapeError("class_oracle: image and templates differ in size");
    }
    const int classes = *std::max_element(templates.labels.begin(), templates.labels.end()) + 1;
    std::vector<double> best(static_cast<std::size_t>(classes), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < templates.images.size(); ++i) {
        const auto& t = templates.images[i].data;
        double d = 0.0;
        for (std::size_t k = 0; k < t.size(); ++k) {
            const double diff = static_cast<double>(probe.data[k]) - t[k];
            d += diff * diff;
        }
        auto& slot = best[static_cast<std::size_t>(templates.labels[i])];
        slot = std::min(slot, d / static_cast<double>(t.size()));
    }
    ClassVerdict v;
    v.class_id = static_cast<int>(std::min_element(best.begin(), best.end()) - best.begin());
    v.distance = best[static_cast<std::size_t>(v.class_id)];
    double runner_up = std::numeric_limits<double>::infinity();
    for (int k = 0; k < classes; ++k) {
        if (k != v.class_id) runner_up = std::min(runner_up, best[static_cast<std::size_t>(k)]);
    }
    v.margin = classes > 1 ? runner_up - v.distance : 0.0;
    v.low_confidence = v.distance > 0.15 || v.margin < 0.1 * v.distance;
    return v;
}

OracleScore class_accuracy(const std::vector<Image>& images, const std::vector<int>& labels,
                           const TemplateBank& templates) {
    if (images.size() != labels.size()) throw ShapeError("class_accuracy: one label per image");
    OracleScore s;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const ClassVerdict v = class_oracle(images[i], templates);
        ++s.total;
        s.correct += v.class_id == labels[i];
        s.flagged += v.low_confidence;
    }
    return s;
}

OracleScore flip_accuracy(const std::vector<Image>& images, const std::vector<bool>& requested_flip) {
    if (images.size() != requested_flip.size()) throw ShapeError("flip_accuracy: one flag per image");
    OracleScore s;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const FlipVerdict v = flip_oracle(images[i]);
        ++s.total;
        if (v == FlipVerdict::undecided) {
            ++s.flagged;
            continue;
        }
        s.correct += (v == FlipVerdict::left) == requested_flip[i];
    }
    return s;
}

double image_frechet_distance(const std::vector<Image>& a, const std::vector<Image>& b,
                              const FeatureExtractor& features) {
    return frechet_distance(features.extract(a), features.extract(b));
}

std::vector<Image> real_images(const DataConfig& cfg, int n, std::uint64_t seed) {
    if (n <= 0) throw ParameterError("real_images: count must be positive");
    const ShapeDataset ds(cfg, seed);
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(ds.at(static_cast<std::uint64_t>(i)).image);
    return out;
}

std::vector<Image> uniform_noise_images(int n, int channels, int resolution, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<Image> out(static_cast<std::size_t>(n), Image(channels, resolution, resolution));
    for (auto& img : out) {
        for (float& v : img.data) v = u(rng);
    }
    return out;
}

std::string eval_csv_row(const std::string& metric, double value, const std::string& config_hash,
                         std::uint64_t seed) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", value);
    return metric + "," + buf + "," + config_hash + "," + std::to_string(seed);
}

} // namespace dfkt
