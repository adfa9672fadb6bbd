#pragma once

#include "surgmotion/types.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace surgmotion {

/// 8-bit interleaved RGB image.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  /// Channel c as a float plane scaled to [0, 1].
  Plane channel(int c) const;

  bool operator==(const RgbImage&) const = default;
};

/// 8-bit single-channel image; used for instance masks (0 = background).
struct LabelImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  LabelImage() = default;
  LabelImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

  /// label > 0
  LabelImage binarized() const;

  bool operator==(const LabelImage&) const = default;
};

RgbImage read_png_rgb(const std::filesystem::path& path);
LabelImage read_png_gray(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);
void write_png(const std::filesystem::path& path, const LabelImage& image);

/// Value and spatial derivatives of a bilinear lookup.
template <typename Scalar>
struct BilinearSample {
  Scalar value;
  Scalar d_dx;
  Scalar d_dy;
};

/// Bilinear lookup at a continuous pixel coordinate, where (0.5, 0.5) is the
/// center of pixel (0, 0). Edge pixels are clamped.
template <typename Scalar, typename PlaneT>
BilinearSample<Scalar> sample_bilinear(const PlaneT& plane, Scalar x, Scalar y) {
  const int h = static_cast<int>(plane.rows());
  const int w = static_cast<int>(plane.cols());
  Scalar gx = x - Scalar(0.5);
  Scalar gy = y - Scalar(0.5);
  Scalar ddx = Scalar(1);
  Scalar ddy = Scalar(1);
  // Clamped regions have zero derivative along the clamped axis.
  if (gx <= Scalar(0)) {
    gx = Scalar(0);
    ddx = Scalar(0);
  } else if (gx >= Scalar(w - 1)) {
    gx = Scalar(w - 1);
    ddx = Scalar(0);
  }
  if (gy <= Scalar(0)) {
    gy = Scalar(0);
    ddy = Scalar(0);
  } else if (gy >= Scalar(h - 1)) {
    gy = Scalar(h - 1);
    ddy = Scalar(0);
  }
  int x0 = static_cast<int>(gx);
  int y0 = static_cast<int>(gy);
  if (x0 > w - 2) x0 = std::max(w - 2, 0);
  if (y0 > h - 2) y0 = std::max(h - 2, 0);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const Scalar fx = gx - Scalar(x0);
  const Scalar fy = gy - Scalar(y0);
  const Scalar v00 = static_cast<Scalar>(plane(y0, x0));
  const Scalar v01 = static_cast<Scalar>(plane(y0, x1));
  const Scalar v10 = static_cast<Scalar>(plane(y1, x0));
  const Scalar v11 = static_cast<Scalar>(plane(y1, x1));
  const Scalar top = v00 + (v01 - v00) * fx;
  const Scalar bottom = v10 + (v11 - v10) * fx;
  BilinearSample<Scalar> s;
  s.value = top + (bottom - top) * fy;
  s.d_dx = ddx * ((v01 - v00) * (Scalar(1) - fy) + (v11 - v10) * fy);
  s.d_dy = ddy * (bottom - top);
  return s;
}

/// RGB in [0,1] at a continuous coordinate.
Eigen::Vector3d sample_rgb(const RgbImage& image, double x, double y);

/// Signed Euclidean distance (pixels) to the mask boundary, evaluated at pixel
/// centers: positive inside (label > 0), negative outside. The zero level set
/// lies halfway between an inside and an outside pixel center.
Plane signed_distance(const LabelImage& mask);

}  // namespace surgmotion
