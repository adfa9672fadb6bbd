#include "helpers.hpp"

#include <doctest.h>

#include "surgmotion/synthgen.hpp"

#include <fstream>
#include <random>

using namespace surgmotion;

namespace {

SceneSpec small_scene() {
  SceneSpec s;
  s.width = 40;
  s.height = 40;
  s.frames = 6;
  s.warp.amplitude = 1.5;
  s.objects[0].size = 12;
  s.objects[0].center = {14, 16};
  s.tissue_points = 9;
  s.flow_offsets = {1, 3};
  s.matches_per_pair = 6;
  s.seed = 11;
  return s;
}

}  // namespace

TEST_CASE("background warp and unwarp are inverse maps (property)") {
  const SceneMotion m(preset_scene("default"));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 64);
  for (int i = 0; i < 500; ++i) {
    const Eigen::Vector2d p(u(rng), u(rng));
    const int f = i % 24;
    CHECK((m.unwarp(m.warp(p, f), f) - p).norm() < 1e-9);
    CHECK((m.warp(m.unwarp(p, f), f) - p).norm() < 1e-9);
    CHECK((m.image_to_object(0, m.object_to_image(0, p, f), f) - p).norm() < 1e-9);
  }
  CHECK((m.warp({10, 20}, 0) - Eigen::Vector2d(10, 20)).norm() < 1e-12);
}

TEST_CASE("scene specs round trip through JSON") {
  for (const char* name : {"default", "static", "occluded"}) {
    const SceneSpec s = preset_scene(name);
    const nlohmann::json j = to_json(s);
    CHECK(to_json(scene_from_json(nlohmann::json::parse(j.dump()))) == j);
  }
  CHECK_THROWS_AS(preset_scene("nope"), ValidationError);
  nlohmann::json bad = to_json(small_scene());
  bad["width"] = "wide";
  CHECK_THROWS_AS(scene_from_json(bad), ValidationError);
  bad = to_json(small_scene());
  bad["frames"] = 1;
  CHECK_THROWS_AS(scene_from_json(bad), ValidationError);
}

TEST_CASE("scene validation rejects non-invertible warps and objects that leave the frame") {
  SceneSpec s = small_scene();
  s.warp.amplitude = 10;
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("invertible"), ValidationError);
  s = small_scene();
  s.objects[0].velocity = {10, 0};
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("leaves the frame"), ValidationError);
}

TEST_CASE("generated data agrees with the analytic motion") {
  const SceneSpec spec = small_scene();
  const SceneMotion motion(spec);
  const SynthData d = generate(spec);
  REQUIRE(d.sequence.num_frames() == 6);
  REQUIRE(d.sequence.has_masks());
  CHECK_NOTHROW(d.sequence.validate());
  CHECK(d.ground_truth.points.size() == 5 + 9);

  // masks label exactly the object's pixels
  for (int f = 0; f < 6; ++f)
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        const bool object = motion.surface_at({x + 0.5, y + 0.5}, f).kind == Surface::Kind::object;
        CHECK((d.sequence.masks[f].at(x, y) == 1) == object);
      }

  // ground-truth tracks follow the motion from their first frame
  for (const auto& p : d.ground_truth.points) {
    CHECK((p.category == Category::tool) == p.instrument_id.has_value());
    for (int f = 1; f < 6; ++f) {
      if (!p.positions[0] || !p.positions[f]) continue;
      const auto q = motion.map(*p.positions[0], 0, f);
      if (p.visibility[0] == Visibility::visible && q) CHECK((*q - *p.positions[f]).norm() < 1e-6);
    }
  }

  // flows: both directions per offset, values equal the analytic displacement
  CHECK(d.flows.size() == 2 * (5 + 3));
  for (const auto& flow : d.flows) {
    CHECK(std::abs(flow.dst - flow.src) % 2 == 1);
    for (int y = 0; y < 40; y += 3)
      for (int x = 0; x < 40; x += 3) {
        const Eigen::Vector2d p(x + 0.5, y + 0.5);
        const auto q = motion.map(p, flow.src, flow.dst);
        REQUIRE(q);
        CHECK(flow.dx(y, x) == doctest::Approx(q->x() - p.x()).epsilon(1e-5));
        CHECK(flow.dy(y, x) == doctest::Approx(q->y() - p.y()).epsilon(1e-5));
      }
  }

  // matches land on the same surface in the target frame
  CHECK(d.matches.size() == 6 * 5);
  for (const auto& set : d.matches)
    for (const auto& m : set.matches) {
      CHECK(motion.surface_at(m.from, set.src) == motion.surface_at(m.to, set.dst));
      CHECK((*motion.map(m.from, set.src, set.dst) - m.to).norm() < 1e-9);
    }
}

TEST_CASE("generation is deterministic per seed") {
  SceneSpec s = small_scene();
  const SynthData a = generate(s);
  const SynthData b = generate(s);
  CHECK(a.sequence.frames == b.sequence.frames);
  CHECK(a.ground_truth == b.ground_truth);
  s.seed = 12;
  CHECK(generate(s).sequence.frames != a.sequence.frames);
}

TEST_CASE("an occluder hides the tracked object and invalidates flows into its absence") {
  const SceneSpec spec = preset_scene("occluded");
  const SceneMotion motion(spec);
  const SynthData d = generate(spec);
  bool saw_occluded_tool = false;
  for (const auto& p : d.ground_truth.points)
    for (int f = 5; f <= 8; ++f)
      if (p.category == Category::tool && p.visibility[f] == Visibility::occluded) saw_occluded_tool = true;
  CHECK(saw_occluded_tool);
  for (const auto& flow : d.flows) {
    if (!(flow.src == 6 && flow.dst == 10)) continue;
    CHECK(flow.valid(30, 28) == 0);  // bar pixel, bar gone at frame 10
    CHECK(flow.valid(30, 50) == 1);
  }
}

TEST_CASE("corruption follows its scope and records every outlier") {
  const SceneSpec spec = small_scene();
  SynthData clean = generate(spec);
  SynthData d = clean;
  CorruptionSpec c;
  c.flow_outliers = 0.3;
  c.outlier_magnitude = 10;
  c.min_offset = 3;
  c.forward_only = true;
  c.seed = 4;
  CorruptionLog log;
  corrupt_supervision(d.flows, d.matches, c, &log);
  REQUIRE(log.outlier.size() == d.flows.size());
  long hits = 0, cells = 0;
  for (std::size_t i = 0; i < d.flows.size(); ++i) {
    const auto& f = d.flows[i];
    const bool scoped = f.dst - f.src >= 3;
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        const double shift = std::hypot(f.dx(y, x) - clean.flows[i].dx(y, x), f.dy(y, x) - clean.flows[i].dy(y, x));
        if (log.outlier[i](y, x)) {
          CHECK(scoped);
          CHECK(shift >= 10 - 1e-3);
          CHECK(shift <= 15 + 1e-3);
          ++hits;
        } else {
          CHECK(shift == 0.0);
        }
        if (scoped) ++cells;
      }
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(cells) == doctest::Approx(0.3).epsilon(0.1));
  CHECK(d.matches.front().matches.front().to == clean.matches.front().matches.front().to);

  CorruptionSpec bad;
  bad.flow_outliers = 1.5;
  CHECK_THROWS_AS(corrupt_supervision(d.flows, d.matches, bad), ValidationError);
}

TEST_CASE("written datasets load back unchanged") {
  const SceneSpec spec = small_scene();
  const SynthData d = generate(spec);
  const auto dir = testing::scratch("synth_dataset");
  write_dataset(dir, d, spec);
  const VideoSequence seq = load_sequence(dir);
  CHECK(seq.frames == d.sequence.frames);
  CHECK(seq.masks == d.sequence.masks);
  CHECK(load_trajectories(dir / "gt.json") == d.ground_truth);
  const auto flows = load_flows(dir);
  REQUIRE(flows.size() == d.flows.size());
  const auto matches = load_matches(dir);
  CHECK(matches.size() == d.matches.size());
  std::ifstream in(dir / "scene.json");
  CHECK(to_json(scene_from_json(nlohmann::json::parse(in))) == to_json(spec));
}
