#pragma once

#include "surgmotion/image.hpp"
#include "surgmotion/types.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace surgmotion {

enum class Category { tool, tissue };
enum class Visibility { visible, occluded, out_of_view };

std::string_view to_string(Category c);
std::string_view to_string(Visibility v);
/// Case-insensitive; accepts "out_of_view", "out-of-view" and "out of view".
Visibility parse_visibility(std::string_view text);
Category parse_category(std::string_view text);

/// Frames plus optional instance masks of one video.
struct VideoSequence {
  std::string name;
  int width = 0;
  int height = 0;
  std::vector<RgbImage> frames;
  std::vector<LabelImage> masks;  // empty, or one per frame

  int num_frames() const { return static_cast<int>(frames.size()); }
  bool has_masks() const { return !masks.empty(); }
  /// Throws ValidationError if frame sizes, mask sizes or counts disagree, or F < 2.
  void validate() const;
};

struct TrackPoint {
  int id = 0;
  Category category = Category::tissue;
  std::optional<int> instrument_id;
  std::vector<std::optional<Eigen::Vector2d>> positions;
  std::vector<Visibility> visibility;

  bool operator==(const TrackPoint&) const = default;
};

/// Per-point positions and visibility over all frames. Serves both as ground
/// truth and as tracker output.
struct TrajectorySet {
  std::string video;
  int width = 0;
  int height = 0;
  int num_frames = 0;
  std::vector<TrackPoint> points;

  /// Throws ValidationError naming the first violated invariant.
  void validate() const;
  const TrackPoint* find(int id) const;

  bool operator==(const TrajectorySet&) const = default;
};

/// One point to track, given at its first visible location.
struct Query {
  int point_id = 0;
  int frame = 0;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
};
using QuerySpec = std::vector<Query>;

/// First visible frame of each point; points never visible are skipped.
QuerySpec queries_from(const TrajectorySet& t);
void validate_queries(const QuerySpec& q, int width, int height, int num_frames);
/// `{"queries": [{"point_id": int, "frame": int, "x": num, "y": num}, ...]}`
QuerySpec load_queries(const std::filesystem::path& file);
void save_queries(const QuerySpec& q, const std::filesystem::path& file);

/// Reads `<dir>/frames/%05d.png` and, when present, `<dir>/masks/%05d.png`.
VideoSequence load_sequence(const std::filesystem::path& dir);
void save_sequence(const VideoSequence& seq, const std::filesystem::path& dir);

TrajectorySet load_trajectories(const std::filesystem::path& file);
TrajectorySet trajectories_from_json(std::string_view text);
void save_trajectories(const TrajectorySet& t, const std::filesystem::path& file);
std::string trajectories_to_json(const TrajectorySet& t);

/// Scales coordinates independently per axis to a target resolution.
TrajectorySet resize_for_eval(const TrajectorySet& t, int target_width, int target_height);

std::string frame_file_name(int index, std::string_view extension = ".png");

}  // namespace surgmotion
