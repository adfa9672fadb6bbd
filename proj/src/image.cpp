#include "surgmotion/image.hpp"

#include <png.h>

#include <cmath>
#include <limits>
#include <string>

namespace surgmotion {

namespace {

struct PngImageGuard {
  png_image image{};
  PngImageGuard() {
    image.version = PNG_IMAGE_VERSION;
  }
  ~PngImageGuard() { png_image_free(&image); }
};

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, png_uint_32 format, int& width, int& height) {
  PngImageGuard guard;
  if (!png_image_begin_read_from_file(&guard.image, path.c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + guard.image.message);
  }
  guard.image.format = format;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(guard.image));
  if (!png_image_finish_read(&guard.image, nullptr, buffer.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG '" + path.string() + "': " + guard.image.message);
  }
  width = static_cast<int>(guard.image.width);
  height = static_cast<int>(guard.image.height);
  return buffer;
}

void write_png_raw(const std::filesystem::path& path, png_uint_32 format, int width, int height,
                   const std::vector<std::uint8_t>& data) {
  PngImageGuard guard;
  guard.image.width = static_cast<png_uint_32>(width);
  guard.image.height = static_cast<png_uint_32>(height);
  guard.image.format = format;
  if (!png_image_write_to_file(&guard.image, path.c_str(), 0, data.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + guard.image.message);
  }
}

// 1D squared Euclidean distance transform (Felzenszwalb & Huttenlocher).
// Unreachable cells carry kFar instead of infinity so the envelope algebra stays finite.
constexpr double kFar = 1e20;

void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

// Squared distance from every pixel to the nearest pixel where `seed` is true.
Eigen::ArrayXXd squared_distance_to(const LabelImage& mask, bool seed_value) {
  const int w = mask.width;
  const int h = mask.height;
  Eigen::ArrayXXd grid(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) grid(y, x) = ((mask.at(x, y) > 0) == seed_value) ? 0.0 : kFar;

  const int n = std::max(w, h);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < w; ++x) {
    f.resize(h);
    d.resize(h);
    for (int y = 0; y < h; ++y) f[y] = grid(y, x);
    edt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) grid(y, x) = d[y];
  }
  for (int y = 0; y < h; ++y) {
    f.resize(w);
    d.resize(w);
    for (int x = 0; x < w; ++x) f[x] = grid(y, x);
    edt_1d(f, d, v, z);
    for (int x = 0; x < w; ++x) grid(y, x) = d[x];
  }
  return grid;
}

}  // namespace

Plane RgbImage::channel(int c) const {
  Plane plane(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) plane(y, x) = static_cast<float>(at(x, y, c)) / 255.0f;
  return plane;
}

LabelImage LabelImage::binarized() const {
  LabelImage out(width, height);
  for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = data[i] > 0 ? 1 : 0;
  return out;
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
  RgbImage image;
  image.data = read_png(path, PNG_FORMAT_RGB, image.width, image.height);
  return image;
}

LabelImage read_png_gray(const std::filesystem::path& path) {
  LabelImage image;
  image.data = read_png(path, PNG_FORMAT_GRAY, image.width, image.height);
  return image;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  write_png_raw(path, PNG_FORMAT_RGB, image.width, image.height, image.data);
}

void write_png(const std::filesystem::path& path, const LabelImage& image) {
  write_png_raw(path, PNG_FORMAT_GRAY, image.width, image.height, image.data);
}

Eigen::Vector3d sample_rgb(const RgbImage& image, double x, double y) {
  // Sampling a 2x2 neighbourhood directly avoids building full planes per lookup.
  double gx = std::clamp(x - 0.5, 0.0, static_cast<double>(image.width - 1));
  double gy = std::clamp(y - 0.5, 0.0, static_cast<double>(image.height - 1));
  const int x0 = std::min(static_cast<int>(gx), std::max(image.width - 2, 0));
  const int y0 = std::min(static_cast<int>(gy), std::max(image.height - 2, 0));
  const int x1 = std::min(x0 + 1, image.width - 1);
  const int y1 = std::min(y0 + 1, image.height - 1);
  const double fx = gx - x0;
  const double fy = gy - y0;
  Eigen::Vector3d out;
  for (int c = 0; c < 3; ++c) {
    const double top = image.at(x0, y0, c) * (1 - fx) + image.at(x1, y0, c) * fx;
    const double bottom = image.at(x0, y1, c) * (1 - fx) + image.at(x1, y1, c) * fx;
    out[c] = (top * (1 - fy) + bottom * fy) / 255.0;
  }
  return out;
}

Plane signed_distance(const LabelImage& mask) {
  const Eigen::ArrayXXd to_outside = squared_distance_to(mask, false);
  const Eigen::ArrayXXd to_inside = squared_distance_to(mask, true);
  const float far = static_cast<float>(mask.width + mask.height);
  Plane sdf(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y) > 0) {
        const double d = to_outside(y, x);
        sdf(y, x) = d >= kFar * 0.5 ? far : static_cast<float>(std::sqrt(d) - 0.5);
      } else {
        const double d = to_inside(y, x);
        sdf(y, x) = d >= kFar * 0.5 ? -far : static_cast<float>(-(std::sqrt(d) - 0.5));
      }
    }
  }
  return sdf;
}

}  // namespace surgmotion
