#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dfkt {

/// Planar (CHW) float image, values nominally in [-1, 1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

Image flip_horizontal(const Image& img);
Image crop(const Image& img, int top, int left, int h, int w);

/// Area averaging when shrinking an axis, bilinear (half-pixel centers) when
/// enlarging it.
Image resize(const Image& img, int h, int w);

double mean_abs_diff(const Image& a, const Image& b);

/// [-1, 1] -> [0, 255] with rounding and clamping.
std::uint8_t to_byte(float v);
float from_byte(std::uint8_t b);

/// Binary PNM: P6 for 3 channels, P5 for 1 channel, 8-bit.
void write_pnm(const std::filesystem::path& path, const Image& img);
Image read_pnm(const std::filesystem::path& path);

/// Tiles images row-major into one grid image with a 1-pixel border.
Image make_grid(const std::vector<Image>& images, int columns);

} // namespace dfkt
