#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "dfkt/data.hpp"
#include "dfkt/errors.hpp"

using namespace dfkt;

namespace {

ShapeSpec sample_spec(int cls, MarkerSide side) {
    ShapeSpec s;
    s.class_id = cls;
    s.marker_side = side;
    s.size = 0.45;
    s.cx = side == MarkerSide::right ? 0.38 : 0.62;
    s.cy = 0.47;
    return s;
}

} // namespace

TEST_CASE("render is deterministic and validates") {
    const ShapeSpec s = sample_spec(3, MarkerSide::right);
    std::mt19937_64 a(1), b(1), c(2);
    const Image x = render(s, 16, a);
    CHECK(x == render(s, 16, b));
    CHECK_FALSE(x == render(s, 16, c)); // different brightness jitter
    for (float v : x.data) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }

    ShapeSpec off = s;
    off.cx = 0.9;
    CHECK_THROWS_AS(render(off, 16, a), ParameterError);
    CHECK_THROWS_AS(render(s, 7, a), ParameterError);
}

TEST_CASE("blank spec is exactly the background") {
    ShapeSpec blank;
    blank.blank = true;
    std::mt19937_64 rng(0);
    const Image img = render(blank, 12, rng);
    for (float v : img.data) CHECK(v == -0.55f);
}

TEST_CASE("mirrored spec renders as the flipped image") {
    for (int cls = 0; cls < 8; ++cls) {
        const ShapeSpec s = sample_spec(cls, MarkerSide::left);
        const Image direct = rasterize(s, 16, 0.0);
        const Image mirrored = flip_horizontal(rasterize(s.mirrored(), 16, 0.0));
        for (std::size_t i = 0; i < direct.data.size(); ++i) {
            CHECK(std::abs(direct.data[i] - mirrored.data[i]) <= 1.0f / 127.5f);
        }
    }
}

TEST_CASE("rendering at 2r and downsampling matches direct rendering") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 40; ++trial) {
        ShapeSpec s = sample_spec(trial % 8, trial % 2 ? MarkerSide::left : MarkerSide::right);
        s.cy = 0.4 + 0.2 * u(rng);
        for (int r : {8, 16, 32}) {
            const Image big = resize(rasterize(s, 2 * r, 0.0), r, r);
            CHECK(mean_abs_diff(big, rasterize(s, r, 0.0)) < 0.05);
        }
    }
}

TEST_CASE("augment identity and flip") {
    const ShapeSpec s = sample_spec(2, MarkerSide::right);
    const Image src = rasterize(s, 16, 0.0);
    std::mt19937_64 rng(4);

    const Augmented id = augment(src, s, CropStrategy{CropKind::global, 1.0, 1.0}, 16, 0.0, rng);
    CHECK(id.image == src);
    CHECK(id.meta == ControlMeta{16, 16, 0, 0, 1.0, false});
    CHECK(id.spec == s);

    const Augmented fl = augment(src, s, CropStrategy{CropKind::global, 1.0, 1.0}, 16, 1.0, rng);
    CHECK(fl.meta.flip);
    CHECK(fl.spec.marker_side == MarkerSide::left);
    CHECK(fl.image == flip_horizontal(src));

    CHECK_THROWS_AS(augment(src, s, CropStrategy{CropKind::global, 0.5, 1.2}, 16, 0.0, rng), ParameterError);
}

TEST_CASE("augment records the sampled crop scale and flip") {
    const ShapeSpec s = sample_spec(5, MarkerSide::right);
    const Image src = rasterize(s, 24, 0.0);
    const CropStrategy mix = CropStrategy::named(CropKind::mix);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        std::mt19937_64 rng(seed), replay(seed);
        const Augmented a = augment(src, s, mix, 16, 0.5, rng);
        CHECK(a.meta.crop_scale == std::uniform_real_distribution<double>(0.4, 1.0)(replay));
        CHECK(a.meta.flip == (a.spec.marker_side == MarkerSide::left));
    }
}

TEST_CASE("mix crop scales are uniform on [0.4, 1.0]") {
    ShapeSpec s = sample_spec(0, MarkerSide::right);
    const Image src = rasterize(s, 10, 0.0);
    std::mt19937_64 rng(99);
    const CropStrategy mix = CropStrategy::named(CropKind::mix);
    const int n = 10000;
    std::vector<double> v;
    v.reserve(n);
    for (int i = 0; i < n; ++i) v.push_back(augment(src, s, mix, 8, 0.0, rng).meta.crop_scale);
    std::sort(v.begin(), v.end());
    double d = 0.0;
    for (int i = 0; i < n; ++i) {
        const double f = (v[static_cast<std::size_t>(i)] - 0.4) / 0.6;
        d = std::max({d, std::abs(f - i / double(n)), std::abs(f - (i + 1) / double(n))});
    }
    // Kolmogorov-Smirnov critical value at the 1% level.
    CHECK(d < 1.628 / std::sqrt(double(n)));
}

TEST_CASE("augmented image matches a render of the adjusted spec") {
    DataConfig cfg;
    cfg.jitter = 0.0;
    cfg.strategy = CropStrategy::named(CropKind::mix);
    const ShapeDataset ds(cfg, 21);
    for (std::uint64_t i = 0; i < 100; ++i) {
        const Sample s = ds.at(i);
        // Render the crop viewport at its native pixel count, then resize.
        const int side = static_cast<int>(std::lround(std::sqrt(s.meta.crop_scale * s.meta.orig_h * s.meta.orig_w)));
        const Image viewport = resize(rasterize(s.spec, side, 0.0), cfg.resolution, cfg.resolution);
        float worst = 0.0f;
        for (std::size_t k = 0; k < viewport.data.size(); ++k) {
            worst = std::max(worst, std::abs(viewport.data[k] - s.image.data[k]));
        }
        CHECK(worst <= 1.0f / 127.5f);
    }
}

TEST_CASE("dataset stream") {
    DataConfig cfg;
    const ShapeDataset a(cfg, 3), b(cfg, 3), c(cfg, 4);
    CHECK(a.at(17).image == b.at(17).image);
    CHECK(a.at(17).meta == b.at(17).meta);
    CHECK_FALSE(a.at(17).image == c.at(17).image);

    std::vector<int> hist(8, 0);
    for (std::uint64_t i = 0; i < 10000; ++i) ++hist[static_cast<std::size_t>(a.class_of(i))];
    for (int h : hist) CHECK(std::abs(h - 1250) <= 0.03 * 1250);

    const auto few = dataset(5, cfg, 3);
    REQUIRE(few.size() == 5);
    CHECK(few[2].image == a.at(2).image);
    CHECK(few[2].label == a.class_of(2));
    CHECK_THROWS_AS(dataset(0, cfg, 3), ParameterError);
}

TEST_CASE("source sizes and crops stay in the configured ranges") {
    DataConfig cfg;
    const ShapeDataset ds(cfg, 5);
    for (std::uint64_t i = 0; i < 300; ++i) {
        const Sample s = ds.at(i);
        CHECK(s.meta.orig_h >= cfg.min_source());
        CHECK(s.meta.orig_h <= cfg.max_source());
        CHECK(s.meta.orig_h == s.meta.orig_w);
        CHECK(s.meta.crop_scale >= 0.9);
        CHECK(s.meta.crop_scale <= 1.0);
        CHECK(s.image.height == 16);
        // Canonical markers sit on the right, so the side follows the flip.
        CHECK((s.spec.marker_side == MarkerSide::left) == s.meta.flip);
    }
}

TEST_CASE("captions") {
    ShapeSpec s = sample_spec(0, MarkerSide::right);
    CHECK(caption(s) == "a red circle with a marker on the right");
    s = sample_spec(7, MarkerSide::left);
    CHECK(caption(s) == "a blue cross with a marker on the left");
    CHECK(caption(sample_spec(3, MarkerSide::right)).find("right") != std::string::npos);
}

TEST_CASE("sample files round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "dfkt_test_samples";
    std::filesystem::remove_all(dir);
    DataConfig cfg;
    const ShapeDataset ds(cfg, 12);
    for (std::uint64_t i = 0; i < 4; ++i) {
        const Sample s = ds.at(i);
        write_sample(dir, i, s);
        const Sample r = read_sample(dir, i);
        CHECK(r.label == s.label);
        CHECK(r.meta == s.meta);
        CHECK(r.spec.marker_side == s.spec.marker_side);
        REQUIRE(r.image.data.size() == s.image.data.size());
        for (std::size_t k = 0; k < s.image.data.size(); ++k) {
            CHECK(r.image.data[k] == from_byte(to_byte(s.image.data[k])));
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("image helpers") {
    Image img(1, 2, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 10.0f;
    const Image f = flip_horizontal(img);
    CHECK(f.at(0, 0, 0) == img.at(0, 0, 2));
    CHECK(flip_horizontal(f) == img);
    const Image c = crop(img, 1, 1, 1, 2);
    CHECK(c.at(0, 0, 0) == img.at(0, 1, 1));
    CHECK_THROWS_AS(crop(img, 1, 2, 1, 2), ParameterError);
    CHECK(resize(img, 2, 3) == img);
    CHECK(to_byte(-1.0f) == 0);
    CHECK(to_byte(1.0f) == 255);
    CHECK(to_byte(5.0f) == 255);
    const Image grid = make_grid({img, img, img}, 2);
    CHECK(grid.width == 2 * 3 + 3);
    CHECK(grid.height == 2 * 2 + 3);
}
