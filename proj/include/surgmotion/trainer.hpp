#pragma once

#include "surgmotion/dataset_io.hpp"
#include "surgmotion/losses.hpp"
#include "surgmotion/motion_model.hpp"
#include "surgmotion/renderer.hpp"
#include "surgmotion/supervision.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace surgmotion {

enum class Precision { f32, f64 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& text);

struct AdamSettings {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct TrainConfig {
  long iterations = 100000;
  AdamSettings adam;
  BatchQuotas quotas;
  LossWeights weights;  // includes the mask/ARAP schedule boundary
  std::uint64_t seed = 0;
  long checkpoint_every = 0;  // 0: only the final checkpoint
  Precision precision = Precision::f32;
  int samples = 16;       // samples per ray while training
  int eval_samples = 32;  // samples per ray when tracking
  double visibility_threshold = 0.5;
  SoftMask soft_mask;
  ModelConfig model;
  SupervisionConfig supervision;

  void validate() const;
};

template <typename Scalar>
struct AdamState {
  long step = 0;
  Vector<Scalar> m;
  Vector<Scalar> v;

  explicit AdamState(Eigen::Index size = 0) : m(Vector<Scalar>::Zero(size)), v(Vector<Scalar>::Zero(size)) {}
};

/// One bias-corrected Adam update. Throws NumericalError naming the first
/// non-finite gradient entry (by parameter block) before touching anything.
template <typename Scalar>
void adam_step(Vector<Scalar>& params, const Vector<Scalar>& grads, AdamState<Scalar>& state,
               const AdamSettings& settings, const std::vector<ParamBlock>& blocks = {});

struct LossRecord {
  long iteration = 0;
  LossReport report;
};

/// Where train() writes its logs; any empty path disables that output.
struct TrainOutputs {
  std::filesystem::path loss_csv;     // iteration,flow,rgb,mask,arap,long,total
  std::filesystem::path weights_csv;  // iteration,flow,rgb,mask,arap,long
  std::filesystem::path checkpoint_dir;
};

template <typename Scalar>
struct TrainState {
  long iteration = 0;
  AdamState<Scalar> adam;
  std::vector<LossRecord> history;
};

using ProgressCallback = std::function<void(const LossRecord&)>;

/// Optimizes `model` in place on one video. Deterministic for a fixed
/// (config, inputs): per-iteration randomness is derived from (seed, iteration).
template <typename Scalar>
TrainState<Scalar> train(MotionModel<Scalar>& model, const VideoSequence& seq, const SupervisionStore& store,
                         const TrainConfig& config, const TrainOutputs& outputs = {},
                         const ProgressCallback& progress = {});

RenderSettings eval_settings(const TrainConfig& config, int width, int height);

/// Tracks every query through every frame. Off-frame predictions are
/// out_of_view without position, degenerate rays are occluded without
/// position, low-opacity rays are occluded with position.
template <typename Scalar>
TrajectorySet export_trajectories(const MotionModel<Scalar>& model, const QuerySpec& queries,
                                  const TrajectorySet& layout, const RenderSettings& settings);

std::string loss_csv_header();
std::string weights_csv_header();
std::string loss_csv_row(const LossRecord& record);
std::string weights_csv_row(const LossRecord& record);

}  // namespace surgmotion
