#pragma once

#include "surgmotion/dataset_io.hpp"
#include "surgmotion/types.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace surgmotion {

/// Dense flow from src to dst at frame resolution, (dx, dy) per pixel center.
struct FlowField {
  int src = 0;
  int dst = 0;
  Plane dx;
  Plane dy;
  BoolPlane valid;

  FlowField() = default;
  FlowField(int src_frame, int dst_frame, int width, int height);

  int width() const { return static_cast<int>(dx.cols()); }
  int height() const { return static_cast<int>(dx.rows()); }
  Eigen::Index valid_count() const;
  void validate() const;
};

struct Match {
  Eigen::Vector2d from;
  Eigen::Vector2d to;
  double confidence = 1.0;
};

/// Sparse matches from src to dst.
struct MatchSet {
  int src = 0;
  int dst = 0;
  std::vector<Match> matches;

  void validate(int width, int height) const;
};

enum class Provenance : std::uint8_t { flow, match };

struct Correspondence {
  Eigen::Vector2f from;
  Eigen::Vector2f to;
  float weight = 1.0f;  // 1 for flow, match confidence otherwise
};

struct PairSupervision {
  std::vector<Correspondence> flow;
  std::vector<Correspondence> match;
};

using FramePair = std::pair<int, int>;

/// Filtered correspondences per ordered frame pair. Immutable after build_store.
class SupervisionStore {
 public:
  SupervisionStore() = default;
  SupervisionStore(int width, int height, int num_frames, std::map<FramePair, PairSupervision> pairs);

  const std::map<FramePair, PairSupervision>& pairs() const { return pairs_; }
  const std::vector<FramePair>& pair_list() const { return pair_list_; }
  std::size_t flow_count() const { return flow_count_; }
  std::size_t match_count() const { return match_count_; }
  bool empty() const { return flow_count_ + match_count_ == 0; }
  int width() const { return width_; }
  int height() const { return height_; }
  int num_frames() const { return num_frames_; }

 private:
  int width_ = 0;
  int height_ = 0;
  int num_frames_ = 0;
  std::map<FramePair, PairSupervision> pairs_;
  std::vector<FramePair> pair_list_;  // pairs with at least one correspondence
  std::size_t flow_count_ = 0;
  std::size_t match_count_ = 0;
};

struct SupervisionConfig {
  double cycle_tau = 3.0;
  double rgb_tau = 0.15;
  std::vector<int> flow_offsets{1, 2, 4, 8};
  double min_confidence = 0.5;
  int flow_stride = 1;  // keep every n-th valid pixel in x and y
  bool cycle_filter = true;
  bool appearance_filter = true;

  void validate() const;
};

struct BatchQuotas {
  int frame_pairs = 8;
  int flow_points = 192;
  int match_points = 64;

  void validate() const;
};

struct BatchItem {
  int src = 0;
  int dst = 0;
  Eigen::Vector2d from;
  Eigen::Vector2d to;
  Provenance provenance = Provenance::flow;
};

struct TrainingBatch {
  std::vector<FramePair> frame_pairs;
  std::vector<BatchItem> items;

  std::size_t count(Provenance p) const;
  bool operator==(const TrainingBatch& other) const;
};

/// Keeps pixels whose forward-backward round trip returns within tau pixels.
FlowField cycle_filter(const FlowField& fwd, const FlowField& bwd, double tau);

/// Keeps pixels whose source and target colors differ by at most tau_rgb in
/// every channel (colors in [0, 1]).
FlowField appearance_filter(const VideoSequence& seq, const FlowField& flow, double tau_rgb);

/// Collects flow correspondences for the configured offsets and all matches
/// above the confidence threshold. Flows must already be filtered.
SupervisionStore build_store(const VideoSequence& seq, const std::vector<FlowField>& flows,
                             const std::vector<MatchSet>& matches, const SupervisionConfig& config);

/// Applies cycle and appearance filters to every flow that has its reverse.
std::vector<FlowField> filter_flows(const VideoSequence& seq, const std::vector<FlowField>& flows,
                                    const SupervisionConfig& config);

/// Splits the frame-pair budget between flow and match pairs in proportion to
/// the point quotas, draws distinct pairs, then correspondences from them.
TrainingBatch sample_batch(const SupervisionStore& store, std::uint64_t seed, const BatchQuotas& quotas);

// File formats ---------------------------------------------------------------

/// Middlebury .flo: float 202021.25, int32 width, int32 height, then
/// row-major interleaved float32 (dx, dy), little-endian.
FlowField read_flo(const std::filesystem::path& file, int src, int dst);
void write_flo(const std::filesystem::path& file, const FlowField& flow);

MatchSet read_matches(const std::filesystem::path& file, int src, int dst);
void write_matches(const std::filesystem::path& file, const MatchSet& matches);

std::string pair_file_stem(int src, int dst);

/// Reads `<dir>/flow/%05d_%05d.flo` (with optional `.valid.png`).
std::vector<FlowField> load_flows(const std::filesystem::path& dir);
/// Reads `<dir>/matches/%05d_%05d.txt`.
std::vector<MatchSet> load_matches(const std::filesystem::path& dir);
void save_flows(const std::filesystem::path& dir, const std::vector<FlowField>& flows, bool write_valid);
void save_matches(const std::filesystem::path& dir, const std::vector<MatchSet>& matches);

}  // namespace surgmotion
