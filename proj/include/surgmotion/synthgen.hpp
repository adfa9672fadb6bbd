#pragma once

#include "surgmotion/dataset_io.hpp"
#include "surgmotion/supervision.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace surgmotion {

/// Sinusoidal background warp relative to frame 0:
/// dx = A (sin(2 pi k Y / H + w f + phase) - sin(2 pi k Y / H + phase)), dy likewise in X.
struct WarpSpec {
  double amplitude = 2.5;       // pixels
  double frequency = 1.0;       // cycles per frame extent
  double phase_velocity = 0.2;  // radians per frame
  double phase = 0.0;
};

/// A textured rigid square. Pose at frame f: center + f * velocity,
/// rotation + f * rotation_rate.
struct RigidObject {
  double size = 18.0;
  Eigen::Vector2d center{20.0, 30.0};
  Eigen::Vector2d velocity{1.0, 0.4};
  double rotation = 0.0;
  double rotation_rate = 0.01;
  int label = 1;
  int tracked_points = 5;
};

/// Axis-aligned bar drawn on top of everything during [first_frame, last_frame].
struct Occluder {
  Eigen::Vector2d min{0.0, 0.0};
  Eigen::Vector2d max{0.0, 0.0};
  int first_frame = 0;
  int last_frame = 1 << 30;
};

struct SceneSpec {
  std::string name = "synthetic";
  int width = 64;
  int height = 64;
  int frames = 24;
  WarpSpec warp;
  std::vector<RigidObject> objects{RigidObject{}};
  std::vector<Occluder> occluders;
  int tissue_points = 20;
  double texture_blur = 1.5;  // Gaussian sigma of the noise textures, pixels
  double image_noise = 0.0;   // Gaussian sigma added to rendered colors in [0, 1]
  std::vector<int> flow_offsets{1, 2, 4, 8};
  int matches_per_pair = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

SceneSpec preset_scene(const std::string& name);  // "default", "static", "occluded"
nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const nlohmann::json& j);

/// Which surface is on top at a location.
struct Surface {
  enum class Kind { background, object, occluder } kind = Kind::background;
  int index = 0;  // object or occluder index

  bool operator==(const Surface&) const = default;
};

/// Analytic motion of a scene.
class SceneMotion {
 public:
  explicit SceneMotion(SceneSpec spec);

  const SceneSpec& spec() const { return spec_; }

  /// Background material point (frame-0 coordinates) to its frame-f position and back.
  Eigen::Vector2d warp(const Eigen::Vector2d& rest, int frame) const;
  Eigen::Vector2d unwarp(const Eigen::Vector2d& p, int frame) const;

  Eigen::Vector2d object_to_image(int object, const Eigen::Vector2d& local, int frame) const;
  Eigen::Vector2d image_to_object(int object, const Eigen::Vector2d& p, int frame) const;
  bool inside_object(int object, const Eigen::Vector2d& p, int frame) const;
  bool occluded_by_bar(const Eigen::Vector2d& p, int frame) const;

  Surface surface_at(const Eigen::Vector2d& p, int frame) const;
  /// Where the surface point under p in src lies in dst; nullopt for occluder
  /// pixels whose bar is absent in dst.
  std::optional<Eigen::Vector2d> map(const Eigen::Vector2d& p, int src, int dst) const;

 private:
  SceneSpec spec_;
};

struct SynthData {
  VideoSequence sequence;
  TrajectorySet ground_truth;
  std::vector<FlowField> flows;
  std::vector<MatchSet> matches;
};

SynthData generate(const SceneSpec& spec);

struct CorruptionSpec {
  double flow_noise = 0.0;         // Gaussian sigma, pixels
  double flow_outliers = 0.0;      // fraction of pixels
  double outlier_magnitude = 10.0; // pixels; actual offset length in [m, 1.5 m]
  int min_offset = 4;              // only flows with |dst - src| >= min_offset
  bool forward_only = false;       // corrupt only flows with src < dst
  double match_noise = 0.0;
  double match_outliers = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-pixel record of which flow entries were replaced by outliers.
struct CorruptionLog {
  std::vector<BoolPlane> outlier;  // parallel to the flow list
};

void corrupt_supervision(std::vector<FlowField>& flows, std::vector<MatchSet>& matches, const CorruptionSpec& spec,
                         CorruptionLog* log = nullptr);

/// Writes frames/, masks/, gt.json, flow/, matches/ and scene.json.
void write_dataset(const std::filesystem::path& dir, const SynthData& data, const SceneSpec& spec);

}  // namespace surgmotion
