#pragma once

#include "surgmotion/config.hpp"
#include "surgmotion/dataset_io.hpp"
#include "surgmotion/supervision.hpp"
#include "surgmotion/trainer.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace surgmotion {

/// Everything read from one dataset directory.
struct VideoData {
  VideoSequence sequence;
  std::vector<FlowField> flows;
  std::vector<MatchSet> matches;
  std::optional<TrajectorySet> ground_truth;  // from gt.json when present
};

VideoData load_video(const std::filesystem::path& dir);

/// Filters flows (unless `prefiltered`) and builds the store.
SupervisionStore prepare_supervision(const VideoData& data, const SupervisionConfig& config, bool prefiltered = false);

struct TrainRun {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> prediction;  // pred.json, written when ground truth exists
  LossRecord last;
};

/// Trains on one dataset directory and writes config.toml, losses.csv,
/// weights.csv, checkpoints/ and (given gt.json) pred.json into `out_dir`.
/// `flow_dir`, when set, supplies already-filtered flows.
TrainRun train_video(const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                     const TrainConfig& config, const std::optional<std::filesystem::path>& flow_dir = std::nullopt);

/// Loads a checkpoint at the given precision and tracks the queries.
TrajectorySet track_video(const std::filesystem::path& checkpoint, Precision precision, const QuerySpec& queries,
                          const TrajectorySet& layout, const RenderSettings& settings);

/// Scalar width recorded in a checkpoint header.
Precision checkpoint_precision(const std::filesystem::path& checkpoint);

/// Keeps freed memory in the process; the trainer allocates and frees
/// similar-sized buffers every iteration.
void tune_allocator();

}  // namespace surgmotion
