#pragma once

#include "surgmotion/dataset_io.hpp"
#include "surgmotion/renderer.hpp"
#include "surgmotion/supervision.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

namespace surgmotion {

/// Loss weights and ablation switches. Mask and ARAP weights are forced to 0
/// before `schedule_boundary`.
struct LossWeights {
  double flow = 1.0;
  double rgb = 1.0;
  double mask = 1.0;
  double arap = 1.0;
  double long_term = 0.3;
  bool use_flow = true;
  bool use_rgb = true;
  bool use_mask = true;
  bool use_arap = true;
  bool use_long_term = true;
  long schedule_boundary = 20000;

  void validate() const;
};

/// Weights in effect at one iteration; a disabled loss has weight 0.
struct EffectiveWeights {
  double flow = 0;
  double rgb = 0;
  double mask = 0;
  double arap = 0;
  double long_term = 0;
};

EffectiveWeights weights_at(const LossWeights& weights, long iteration);

/// Smooth relaxation of a binary tool mask:
/// (sigmoid(c) - sigmoid(-band)) / (sigmoid(band) - sigmoid(-band)) with
/// c = clamp(sdf / softness, -band, band). Exactly 1 deep inside, exactly 0
/// far outside, 0.5 on the boundary.
struct SoftMask {
  double softness = 2.0;  // pixels
  double band = 4.0;      // half-width of the transition, in units of softness

  double operator()(double sdf) const;
  template <typename Scalar>
  ad::Var<Scalar> apply(ad::Var<Scalar> sdf) const;
};

/// Per-video data shared by all loss evaluations.
class LossContext {
 public:
  LossContext(const VideoSequence& seq, SoftMask soft = {});

  int width() const { return width_; }
  int height() const { return height_; }
  bool has_masks() const { return !sdf_.empty(); }
  const SoftMask& soft_mask() const { return soft_; }
  const std::vector<Plane>& sdf() const { return sdf_; }

  /// Instance label under p in frame f (0 when no masks or background).
  int instance_at(int frame, const Eigen::Vector2d& p) const;
  double soft_mask_at(int frame, const Eigen::Vector2d& p) const;
  Eigen::Vector3d color_at(int frame, const Eigen::Vector2d& p) const;

 private:
  int width_;
  int height_;
  const VideoSequence* seq_;
  SoftMask soft_;
  std::vector<Plane> sdf_;
};

/// K-means cluster assignment of tool-point displacements.
struct RigidGroups {
  std::vector<int> assignment;             // cluster id per point, 0-based
  std::vector<Eigen::Vector3d> centroids;  // cluster displacement centroids
  double inertia = 0;                      // sum of squared distances to centroids

  int clusters() const { return static_cast<int>(centroids.size()); }
};

/// Seeded k-means++ initialization followed by Lloyd iterations (capped).
RigidGroups rigid_grouping(const std::vector<Eigen::Vector3d>& displacements, int clusters, std::uint64_t seed,
                           int max_iterations = 50);

/// Unweighted per-term values plus the weighted total.
struct LossReport {
  double flow = 0;
  double rgb = 0;
  double mask = 0;
  double arap = 0;
  double long_term = 0;
  double total = 0;
  EffectiveWeights weights;
};

// Tape-level terms over a batched render. Each returns nullopt when its pool is empty.

template <typename Scalar>
std::optional<ad::Var<Scalar>> flow_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch);

template <typename Scalar>
std::optional<ad::Var<Scalar>> rgb_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch,
                                        const LossContext& ctx);

template <typename Scalar>
std::optional<ad::Var<Scalar>> mask_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch,
                                         const LossContext& ctx);

template <typename Scalar>
std::optional<ad::Var<Scalar>> long_term_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch);

/// Mean over same-cluster pairs (k < p) of |d_k - d_p|, with d the Euclidean
/// length of each column of (mapped - lifted). Clusters of one point add nothing.
template <typename Scalar>
std::optional<ad::Var<Scalar>> arap_term(ad::Var<Scalar> mapped, const Matrix<Scalar>& lifted,
                                         const std::vector<int>& cluster_of);

/// Groups the batch's tool points per frame pair by their current displacements.
/// Returns a cluster id per batch item (-1 for items outside any tool mask).
template <typename Scalar>
std::vector<int> group_tool_points(const RenderOutputs<Scalar>& r, const TrainingBatch& batch, const LossContext& ctx,
                                   std::uint64_t seed);

/// Renders the batch and assembles the scheduled, weighted objective.
template <typename Scalar>
struct Objective {
  ad::Var<Scalar> total;
  LossReport report;
};

template <typename Scalar>
Objective<Scalar> total_loss(typename MotionModel<Scalar>::Graph& graph, const TrainingBatch& batch,
                             const LossContext& ctx, const LossWeights& weights, long iteration,
                             const RenderSettings& settings, std::uint64_t seed, std::mt19937_64* rng = nullptr);

// Value-only conveniences (eval-mode rendering, no gradients).

template <typename Scalar>
double flow_loss(const TrainingBatch& batch, const MotionModel<Scalar>& model, const RenderSettings& settings);
template <typename Scalar>
double rgb_loss(const TrainingBatch& batch, const LossContext& ctx, const MotionModel<Scalar>& model,
                const RenderSettings& settings);
template <typename Scalar>
double mask_loss(const TrainingBatch& batch, const LossContext& ctx, const MotionModel<Scalar>& model,
                 const RenderSettings& settings);
template <typename Scalar>
double long_term_loss(const TrainingBatch& batch, const MotionModel<Scalar>& model, const RenderSettings& settings);

/// ARAP value for explicit point pairs (x_i, x_j) and a grouping.
double arap_loss(const RigidGroups& groups, const std::vector<Eigen::Vector3d>& from,
                 const std::vector<Eigen::Vector3d>& to);

/// Flow/long-term value for explicit predicted and target positions (2 x n).
double l1_position_loss(const Eigen::Matrix2Xd& predicted, const Eigen::Matrix2Xd& target);

}  // namespace surgmotion
