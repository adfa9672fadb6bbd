#pragma once

#include "surgmotion/motion_model.hpp"

#include <Eigen/Core>

#include <optional>
#include <random>
#include <vector>

namespace surgmotion {

enum class SampleMode { train, eval };

/// Depth-ordered samples on the ray through one pixel, orthogonal to the
/// image plane. Coordinates are normalized: x, y, depth all in [-1, 1].
template <typename Scalar>
struct RaySamples {
  Vec2<Scalar> pixel;
  int frame = 0;
  std::vector<Vec3<Scalar>> points;
  std::vector<Scalar> depths;
  Scalar stratum = 0;  // width of one depth stratum, 2 / K

  int size() const { return static_cast<int>(points.size()); }
};

template <typename Scalar>
struct CompositeResult {
  Vec3<Scalar> point;     // accumulated 3D point, sum_k T_k alpha_k x_k
  Vec2<Scalar> pixel;     // acc-normalized planar projection, in pixels
  Vec3<Scalar> color;     // sum_k T_k alpha_k c_k
  Scalar acc = 0;         // sum_k T_k alpha_k
  bool degenerate = false;  // acc too small to project
};

template <typename Scalar>
struct Prediction {
  Vec2<Scalar> pixel;
  Vec3<Scalar> color;
  Scalar acc = 0;
  bool visible = false;
  bool degenerate = false;
};

struct RenderSettings {
  int width = 0;
  int height = 0;
  int samples = 16;
  SampleMode mode = SampleMode::eval;
  double visibility_threshold = 0.5;
};

/// Accumulated opacity below which a ray has no defined projection.
inline constexpr double kMinOpacity = 1e-6;

template <typename Scalar>
Vec2<Scalar> pixel_to_normalized(const Vec2<Scalar>& p, int width, int height) {
  return {Scalar(2) * p.x() / Scalar(width) - Scalar(1), Scalar(2) * p.y() / Scalar(height) - Scalar(1)};
}

template <typename Scalar>
Vec2<Scalar> normalized_to_pixel(const Vec2<Scalar>& n, int width, int height) {
  return {(n.x() + Scalar(1)) * Scalar(width) / Scalar(2), (n.y() + Scalar(1)) * Scalar(height) / Scalar(2)};
}

/// Stratified depth samples: stratum midpoints in eval mode, uniformly
/// jittered within each stratum in train mode (rng required).
template <typename Scalar>
RaySamples<Scalar> lift(const Vec2<Scalar>& pixel, int frame, const RenderSettings& settings,
                        std::mt19937_64* rng = nullptr);

/// x_j^k = T_dst^{-1}(T_src(x_i^k)) for every sample.
template <typename Scalar>
std::vector<Vec3<Scalar>> map_chain(const RaySamples<Scalar>& samples, int dst_frame, const MotionModel<Scalar>& model);

/// Alpha-composites mapped samples with densities/colors queried at the
/// canonical images of the source samples.
template <typename Scalar>
CompositeResult<Scalar> composite(const RaySamples<Scalar>& samples, const std::vector<Vec3<Scalar>>& mapped,
                                  const MotionModel<Scalar>& model, const RenderSettings& settings);

/// Composites given densities and colors; the arithmetic core of composite().
template <typename Scalar>
CompositeResult<Scalar> composite_values(const RaySamples<Scalar>& samples, const std::vector<Vec3<Scalar>>& mapped,
                                         const std::vector<Scalar>& sigma, const std::vector<Vec3<Scalar>>& colors,
                                         const RenderSettings& settings);

/// Full pipeline for one query: lift, map, composite, threshold visibility.
template <typename Scalar>
Prediction<Scalar> predict(const Vec2<Scalar>& pixel, int src_frame, int dst_frame, const MotionModel<Scalar>& model,
                           const RenderSettings& settings);

/// One correspondence query per column of a batched render.
struct RayQuery {
  int src = 0;
  int dst = 0;
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
};

/// Tape outputs of a batched render over n queries.
template <typename Scalar>
struct RenderOutputs {
  ad::Var<Scalar> pixel;        // 2 x n predicted positions in dst, pixels
  ad::Var<Scalar> color;        // 3 x n
  ad::Var<Scalar> acc;          // 1 x n
  ad::Var<Scalar> mapped_mid;   // 3 x n, central sample mapped into dst (pixel-scaled)
  Matrix<Scalar> lifted_mid;    // 3 x n, central sample in src (pixel-scaled)
};

/// Renders every query on one tape. 3D outputs are scaled to pixel units:
/// (x, y, depth) -> ((x+1) W/2, (y+1) H/2, (depth+1) W/2).
template <typename Scalar>
RenderOutputs<Scalar> render_batch(typename MotionModel<Scalar>::Graph& graph, const std::vector<RayQuery>& queries,
                                   const RenderSettings& settings, std::mt19937_64* rng = nullptr);

/// Non-differentiable batched prediction.
template <typename Scalar>
std::vector<Prediction<Scalar>> predict_batch(const MotionModel<Scalar>& model, const std::vector<RayQuery>& queries,
                                              const RenderSettings& settings);

}  // namespace surgmotion
