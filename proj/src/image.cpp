#include "dfkt/image.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "dfkt/errors.hpp"

namespace dfkt {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// (dst x src) weights mapping one axis of length src onto length dst.
MatD axis_weights(int src, int dst) {
    MatD w = MatD::Zero(dst, src);
    if (dst == src) {
        w.setIdentity();
        return w;
    }
    const double ratio = static_cast<double>(src) / dst;
    if (dst < src) {
        for (int i = 0; i < dst; ++i) {
            const double lo = i * ratio;
            const double hi = (i + 1) * ratio;
            for (int j = static_cast<int>(std::floor(lo)); j < src && j < hi; ++j) {
                const double overlap = std::min(hi, j + 1.0) - std::max(lo, static_cast<double>(j));
                if (overlap > 0) w(i, j) += overlap / ratio;
            }
        }
        return w;
    }
    for (int i = 0; i < dst; ++i) {
        const double pos = std::clamp((i + 0.5) * ratio - 0.5, 0.0, static_cast<double>(src - 1));
        const int j0 = static_cast<int>(std::floor(pos));
        const int j1 = std::min(j0 + 1, src - 1);
        const double f = pos - j0;
        w(i, j0) += 1.0 - f;
        w(i, j1) += f;
    }
    return w;
}

} // namespace

Image flip_horizontal(const Image& img) {
    Image out(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

Image crop(const Image& img, int top, int left, int h, int w) {
    if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > img.height || left + w > img.width) {
        throw ParameterError("crop: window exceeds the image");
    }
    Image out(img.channels, h, w);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, top + y, left + x);
    return out;
}

Image resize(const Image& img, int h, int w) {
    if (h <= 0 || w <= 0) throw ParameterError("resize: target size must be positive");
    if (h == img.height && w == img.width) return img;
    const MatD wy = axis_weights(img.height, h);
    const MatD wx = axis_weights(img.width, w);
    Image out(img.channels, h, w);
    for (int c = 0; c < img.channels; ++c) {
        MatD plane(img.height, img.width);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) plane(y, x) = img.at(c, y, x);
        const MatD res = wy * plane * wx.transpose();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(c, y, x) = static_cast<float>(res(y, x));
    }
    return out;
}

double mean_abs_diff(const Image& a, const Image& b) {
    if (a.data.size() != b.data.size()) throw ShapeError("mean_abs_diff: image sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
    return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

std::uint8_t to_byte(float v) {
    const double x = std::round((std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5);
    return static_cast<std::uint8_t>(x);
}

float from_byte(std::uint8_t b) { return static_cast<float>(b / 127.5 - 1.0); }

void write_pnm(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw ParameterError("write_pnm: need 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pnm: cannot open " + path.string());
    out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    std::vector<char> bytes;
    bytes.reserve(img.data.size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) bytes.push_back(static_cast<char>(to_byte(img.at(c, y, x))));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write_pnm: write failed for " + path.string());
}

Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pnm: cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    in.get();
    if ((magic != "P6" && magic != "P5") || w <= 0 || h <= 0 || maxval != 255) {
        throw ParameterError("read_pnm: unsupported file " + path.string());
    }
    const int channels = magic == "P6" ? 3 : 1;
    std::vector<char> bytes(static_cast<std::size_t>(channels) * w * h);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ParameterError("read_pnm: truncated file " + path.string());
    Image img(channels, h, w);
    std::size_t k = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) img.at(c, y, x) = from_byte(static_cast<std::uint8_t>(bytes[k++]));
    return img;
}

Image make_grid(const std::vector<Image>& images, int columns) {
    if (images.empty() || columns <= 0) throw ParameterError("make_grid: nothing to tile");
    const Image& first = images.front();
    const int rows = (static_cast<int>(images.size()) + columns - 1) / columns;
    const int cols = std::min(columns, static_cast<int>(images.size()));
    Image grid(first.channels, rows * (first.height + 1) + 1, cols * (first.width + 1) + 1, 1.0f);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const int gy = static_cast<int>(i) / columns;
        const int gx = static_cast<int>(i) % columns;
        for (int c = 0; c < first.channels; ++c)
            for (int y = 0; y < first.height; ++y)
                for (int x = 0; x < first.width; ++x)
                    grid.at(c, 1 + gy * (first.height + 1) + y, 1 + gx * (first.width + 1) + x) =
                        images[i].at(c, y, x);
    }
    return grid;
}

} // namespace dfkt
