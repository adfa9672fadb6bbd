#include "surgmotion/synthgen.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

namespace surgmotion {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kTexturePad = 16;

/// Gaussian-blurred white noise, rescaled to mean `mean` and std `spread`.
Plane noise_texture(int w, int h, double blur, double mean, double spread, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Plane p(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p(y, x) = static_cast<float>(normal(rng));
  if (blur > 0) {
    const int r = static_cast<int>(std::ceil(3 * blur));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0;
    for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (blur * blur));
    for (auto& v : k) v /= sum;
    Plane tmp(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * p(y, std::clamp(x + i, 0, w - 1));
        tmp(y, x) = static_cast<float>(acc);
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp(std::clamp(y + i, 0, h - 1), x);
        p(y, x) = static_cast<float>(acc);
      }
  }
  const double m = p.mean();
  const double sd = std::sqrt((p - static_cast<float>(m)).square().mean());
  const double scale = sd > 0 ? spread / sd : 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p(y, x) = static_cast<float>(std::clamp(mean + (p(y, x) - m) * scale, 0.02, 0.98));
  return p;
}

struct Textures {
  std::array<Plane, 3> background;
  std::vector<std::array<Plane, 3>> objects;
};

Textures make_textures(const SceneSpec& spec, std::mt19937_64& rng) {
  Textures t;
  const int w = spec.width + 2 * kTexturePad;
  const int h = spec.height + 2 * kTexturePad;
  const double bg_mean[3] = {0.62, 0.38, 0.36};  // reddish tissue tone
  for (int c = 0; c < 3; ++c) t.background[c] = noise_texture(w, h, spec.texture_blur, bg_mean[c], 0.14, rng);
  const double tool_mean[3] = {0.45, 0.5, 0.6};
  for (const auto& o : spec.objects) {
    const int n = static_cast<int>(std::ceil(o.size)) + 4;
    std::array<Plane, 3> tex;
    for (int c = 0; c < 3; ++c) tex[c] = noise_texture(n, n, spec.texture_blur, tool_mean[c], 0.18, rng);
    t.objects.push_back(std::move(tex));
  }
  return t;
}

Eigen::Vector2d rotate(const Eigen::Vector2d& v, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y()};
}

bool in_frame(const Eigen::Vector2d& p, int w, int h) { return p.x() >= 0 && p.y() >= 0 && p.x() < w && p.y() < h; }

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

json vec_json(const Eigen::Vector2d& v) { return json::array({v.x(), v.y()}); }
Eigen::Vector2d vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

void SceneSpec::validate() const {
  if (width < 8 || height < 8) throw ValidationError("scene must be at least 8x8 pixels");
  if (frames < 2) throw ValidationError("scene needs at least 2 frames");
  if (tissue_points < 0) throw ValidationError("tissue_points must be >= 0");
  if (!(texture_blur >= 0) || !(image_noise >= 0)) throw ValidationError("texture_blur and image_noise must be >= 0");
  if (matches_per_pair < 0) throw ValidationError("matches_per_pair must be >= 0");
  if (!(std::abs(warp.amplitude) * kTwoPi * warp.frequency * 2 / std::min(width, height) < 0.9))
    throw ValidationError("warp amplitude too large: the background map must stay invertible");
  for (int o : flow_offsets)
    if (o < 1) throw ValidationError("flow offsets must be >= 1");
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    if (!(o.size > 2)) throw ValidationError("object size must exceed 2 pixels");
    if (o.label < 1 || o.label > 255) throw ValidationError("object labels must be in [1, 255]");
    if (o.tracked_points < 0) throw ValidationError("tracked_points must be >= 0");
    for (int f : {0, frames - 1}) {
      const Eigen::Vector2d c = o.center + f * o.velocity;
      if (!in_frame(c, width, height))
        throw ValidationError(fmt::format("object {} center leaves the frame at frame {}", i, f));
    }
  }
  for (const auto& b : occluders)
    if (!(b.max.x() > b.min.x() && b.max.y() > b.min.y())) throw ValidationError("occluder bars need positive extent");
}

SceneSpec preset_scene(const std::string& name) {
  SceneSpec s;
  s.name = name;
  if (name == "default") return s;
  if (name == "static") {
    s.warp.amplitude = 0;
    s.objects[0].velocity.setZero();
    s.objects[0].rotation_rate = 0;
    return s;
  }
  if (name == "occluded") {
    // A bar that hides the square's path during frames 5-8.
    s.occluders.push_back({{24.0, 0.0}, {32.0, 64.0}, 5, 8});
    return s;
  }
  throw ValidationError("unknown scene preset '" + name + "' (default, static, occluded)");
}

json to_json(const SceneSpec& s) {
  json j;
  j["name"] = s.name;
  j["width"] = s.width;
  j["height"] = s.height;
  j["frames"] = s.frames;
  j["warp"] = {{"amplitude", s.warp.amplitude},
               {"frequency", s.warp.frequency},
               {"phase_velocity", s.warp.phase_velocity},
               {"phase", s.warp.phase}};
  j["objects"] = json::array();
  for (const auto& o : s.objects) {
    j["objects"].push_back({{"size", o.size},
                            {"center", vec_json(o.center)},
                            {"velocity", vec_json(o.velocity)},
                            {"rotation", o.rotation},
                            {"rotation_rate", o.rotation_rate},
                            {"label", o.label},
                            {"tracked_points", o.tracked_points}});
  }
  j["occluders"] = json::array();
  for (const auto& b : s.occluders) {
    j["occluders"].push_back(
        {{"min", vec_json(b.min)}, {"max", vec_json(b.max)}, {"first_frame", b.first_frame}, {"last_frame", b.last_frame}});
  }
  j["tissue_points"] = s.tissue_points;
  j["texture_blur"] = s.texture_blur;
  j["image_noise"] = s.image_noise;
  j["flow_offsets"] = s.flow_offsets;
  j["matches_per_pair"] = s.matches_per_pair;
  j["seed"] = s.seed;
  return j;
}

SceneSpec scene_from_json(const json& j) {
  try {
    SceneSpec s;
    s.name = j.value("name", s.name);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.frames = j.value("frames", s.frames);
    if (j.contains("warp")) {
      const auto& w = j.at("warp");
      s.warp.amplitude = w.value("amplitude", s.warp.amplitude);
      s.warp.frequency = w.value("frequency", s.warp.frequency);
      s.warp.phase_velocity = w.value("phase_velocity", s.warp.phase_velocity);
      s.warp.phase = w.value("phase", s.warp.phase);
    }
    if (j.contains("objects")) {
      s.objects.clear();
      for (const auto& o : j.at("objects")) {
        RigidObject r;
        r.size = o.value("size", r.size);
        if (o.contains("center")) r.center = vec_from(o.at("center"));
        if (o.contains("velocity")) r.velocity = vec_from(o.at("velocity"));
        r.rotation = o.value("rotation", r.rotation);
        r.rotation_rate = o.value("rotation_rate", r.rotation_rate);
        r.label = o.value("label", r.label);
        r.tracked_points = o.value("tracked_points", r.tracked_points);
        s.objects.push_back(r);
      }
    }
    if (j.contains("occluders")) {
      for (const auto& b : j.at("occluders")) {
        Occluder o;
        o.min = vec_from(b.at("min"));
        o.max = vec_from(b.at("max"));
        o.first_frame = b.value("first_frame", o.first_frame);
        o.last_frame = b.value("last_frame", o.last_frame);
        s.occluders.push_back(o);
      }
    }
    s.tissue_points = j.value("tissue_points", s.tissue_points);
    s.texture_blur = j.value("texture_blur", s.texture_blur);
    s.image_noise = j.value("image_noise", s.image_noise);
    if (j.contains("flow_offsets")) s.flow_offsets = j.at("flow_offsets").get<std::vector<int>>();
    s.matches_per_pair = j.value("matches_per_pair", s.matches_per_pair);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed scene spec: ") + e.what());
  }
}

SceneMotion::SceneMotion(SceneSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

Eigen::Vector2d SceneMotion::warp(const Eigen::Vector2d& rest, int frame) const {
  const auto& w = spec_.warp;
  const double ay = kTwoPi * w.frequency * rest.y() / spec_.height + w.phase;
  const double ax = kTwoPi * w.frequency * rest.x() / spec_.width + w.phase;
  const double t = w.phase_velocity * frame;
  return rest + w.amplitude * Eigen::Vector2d(std::sin(ay + t) - std::sin(ay), std::sin(ax + t) - std::sin(ax));
}

Eigen::Vector2d SceneMotion::unwarp(const Eigen::Vector2d& p, int frame) const {
  // Fixed point of rest = p - displacement(rest); contractive by validate().
  Eigen::Vector2d rest = p;
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector2d next = p - (warp(rest, frame) - rest);
    const double change = (next - rest).lpNorm<Eigen::Infinity>();
    rest = next;
    if (change < 1e-13) break;
  }
  return rest;
}

Eigen::Vector2d SceneMotion::object_to_image(int object, const Eigen::Vector2d& local, int frame) const {
  const auto& o = spec_.objects[object];
  return o.center + frame * o.velocity + rotate(local, o.rotation + frame * o.rotation_rate);
}

Eigen::Vector2d SceneMotion::image_to_object(int object, const Eigen::Vector2d& p, int frame) const {
  const auto& o = spec_.objects[object];
  return rotate(p - (o.center + frame * o.velocity), -(o.rotation + frame * o.rotation_rate));
}

bool SceneMotion::inside_object(int object, const Eigen::Vector2d& p, int frame) const {
  const Eigen::Vector2d l = image_to_object(object, p, frame);
  const double half = spec_.objects[object].size / 2;
  return std::abs(l.x()) <= half && std::abs(l.y()) <= half;
}

bool SceneMotion::occluded_by_bar(const Eigen::Vector2d& p, int frame) const {
  return surface_at(p, frame).kind == Surface::Kind::occluder;
}

Surface SceneMotion::surface_at(const Eigen::Vector2d& p, int frame) const {
  for (std::size_t i = 0; i < spec_.occluders.size(); ++i) {
    const auto& b = spec_.occluders[i];
    if (frame >= b.first_frame && frame <= b.last_frame && p.x() >= b.min.x() && p.x() < b.max.x() &&
        p.y() >= b.min.y() && p.y() < b.max.y()) {
      return {Surface::Kind::occluder, static_cast<int>(i)};
    }
  }
  // Later objects are drawn on top.
  for (int i = static_cast<int>(spec_.objects.size()) - 1; i >= 0; --i)
    if (inside_object(i, p, frame)) return {Surface::Kind::object, i};
  return {};
}

std::optional<Eigen::Vector2d> SceneMotion::map(const Eigen::Vector2d& p, int src, int dst) const {
  const Surface s = surface_at(p, src);
  switch (s.kind) {
    case Surface::Kind::occluder: {
      const auto& b = spec_.occluders[s.index];
      if (dst < b.first_frame || dst > b.last_frame) return std::nullopt;
      return p;
    }
    case Surface::Kind::object:
      return object_to_image(s.index, image_to_object(s.index, p, src), dst);
    case Surface::Kind::background:
      return warp(unwarp(p, src), dst);
  }
  return std::nullopt;
}

SynthData generate(const SceneSpec& spec) {
  const SceneMotion motion(spec);
  std::mt19937_64 rng(spec.seed);
  const Textures tex = make_textures(spec, rng);
  const int w = spec.width;
  const int h = spec.height;

  SynthData out;
  auto& seq = out.sequence;
  seq.name = spec.name;
  seq.width = w;
  seq.height = h;

  std::normal_distribution<double> pixel_noise(0.0, 1.0);
  for (int f = 0; f < spec.frames; ++f) {
    RgbImage img(w, h);
    LabelImage mask(w, h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Eigen::Vector2d p(x + 0.5, y + 0.5);
        const Surface s = motion.surface_at(p, f);
        std::array<double, 3> color{0.5, 0.5, 0.5};
        if (s.kind == Surface::Kind::background) {
          const Eigen::Vector2d rest = motion.unwarp(p, f) + Eigen::Vector2d::Constant(kTexturePad);
          for (int c = 0; c < 3; ++c) color[c] = sample_bilinear<double>(tex.background[c], rest.x(), rest.y()).value;
        } else if (s.kind == Surface::Kind::object) {
          const double offset = spec.objects[s.index].size / 2 + 2;
          const Eigen::Vector2d l = motion.image_to_object(s.index, p, f) + Eigen::Vector2d::Constant(offset);
          for (int c = 0; c < 3; ++c) color[c] = sample_bilinear<double>(tex.objects[s.index][c], l.x(), l.y()).value;
          mask.at(x, y) = static_cast<std::uint8_t>(spec.objects[s.index].label);
        }
        for (int c = 0; c < 3; ++c) {
          const double noise = spec.image_noise > 0 ? spec.image_noise * pixel_noise(rng) : 0.0;
          img.at(x, y, c) = quantize(color[c] + noise);
        }
      }
    }
    seq.frames.push_back(std::move(img));
    seq.masks.push_back(std::move(mask));
  }
  if (spec.objects.empty()) seq.masks.clear();

  // Ground-truth trajectories.
  auto& gt = out.ground_truth;
  gt.video = spec.name;
  gt.width = w;
  gt.height = h;
  gt.num_frames = spec.frames;
  int next_id = 0;
  auto add_track = [&](Category category, std::optional<int> instrument, auto&& position_at, auto&& hidden_at) {
    TrackPoint t;
    t.id = next_id++;
    t.category = category;
    t.instrument_id = instrument;
    for (int f = 0; f < spec.frames; ++f) {
      const Eigen::Vector2d p = position_at(f);
      if (!in_frame(p, w, h)) {
        t.positions.emplace_back(std::nullopt);
        t.visibility.push_back(Visibility::out_of_view);
      } else {
        t.positions.emplace_back(p);
        t.visibility.push_back(hidden_at(p, f) ? Visibility::occluded : Visibility::visible);
      }
    }
    gt.points.push_back(std::move(t));
  };
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    const double r = o.size / 2 - std::max(3.0, o.size / 5);
    std::vector<Eigen::Vector2d> locals{{0, 0}, {-r, -r}, {r, -r}, {r, r}, {-r, r}};
    std::uniform_real_distribution<double> inner(-r, r);
    while (static_cast<int>(locals.size()) < o.tracked_points) locals.emplace_back(inner(rng), inner(rng));
    locals.resize(static_cast<std::size_t>(o.tracked_points));
    const int obj = static_cast<int>(i);
    for (const auto& l : locals) {
      add_track(Category::tool, o.label, [&](int f) { return motion.object_to_image(obj, l, f); },
                [&](const Eigen::Vector2d& p, int f) { return motion.surface_at(p, f) != Surface{Surface::Kind::object, obj}; });
    }
  }
  {
    // Tissue points on a jittered grid of rest positions, away from the border.
    const int n = spec.tissue_points;
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const int rows = cols == 0 ? 0 : (n + cols - 1) / cols;
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);
    const double margin = 6.0;
    for (int k = 0; k < n; ++k) {
      const int gx = k % cols;
      const int gy = k / cols;
      const double fx = (gx + 0.5 + jitter(rng)) / cols;
      const double fy = (gy + 0.5 + jitter(rng)) / rows;
      const Eigen::Vector2d rest(margin + fx * (w - 2 * margin), margin + fy * (h - 2 * margin));
      add_track(Category::tissue, std::nullopt, [&](int f) { return motion.warp(rest, f); },
                [&](const Eigen::Vector2d& p, int f) { return motion.surface_at(p, f).kind != Surface::Kind::background; });
    }
  }
  gt.validate();

  // Dense flow, both directions for every configured offset.
  for (int offset : spec.flow_offsets) {
    for (int s = 0; s + offset < spec.frames; ++s) {
      for (const auto& [src, dst] : {std::pair{s, s + offset}, std::pair{s + offset, s}}) {
        FlowField flow(src, dst, w, h);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const Eigen::Vector2d p(x + 0.5, y + 0.5);
            const auto q = motion.map(p, src, dst);
            if (!q) {
              flow.valid(y, x) = 0;
              continue;
            }
            flow.dx(y, x) = static_cast<float>(q->x() - p.x());
            flow.dy(y, x) = static_cast<float>(q->y() - p.y());
          }
        out.flows.push_back(std::move(flow));
      }
    }
  }

  // Sparse matches between every ordered frame pair, visible at both ends.
  if (spec.matches_per_pair > 0) {
    std::uniform_int_distribution<int> px(0, w - 1);
    std::uniform_int_distribution<int> py(0, h - 1);
    for (int i = 0; i < spec.frames; ++i)
      for (int j = 0; j < spec.frames; ++j) {
        if (i == j) continue;
        MatchSet set{i, j, {}};
        for (int attempt = 0; attempt < 10 * spec.matches_per_pair &&
                              static_cast<int>(set.matches.size()) < spec.matches_per_pair;
             ++attempt) {
          const Eigen::Vector2d p(px(rng) + 0.5, py(rng) + 0.5);
          const Surface s = motion.surface_at(p, i);
          if (s.kind == Surface::Kind::occluder) continue;
          const auto q = motion.map(p, i, j);
          if (!q || !in_frame(*q, w, h) || motion.surface_at(*q, j) != s) continue;
          set.matches.push_back({p, *q, 1.0});
        }
        out.matches.push_back(std::move(set));
      }
  }
  return out;
}

void CorruptionSpec::validate() const {
  if (!(flow_noise >= 0) || !(match_noise >= 0)) throw ValidationError("noise sigmas must be >= 0");
  if (!(flow_outliers >= 0 && flow_outliers <= 1) || !(match_outliers >= 0 && match_outliers <= 1))
    throw ValidationError("outlier fractions must be in [0, 1]");
  if (!(outlier_magnitude >= 0)) throw ValidationError("outlier magnitude must be >= 0");
  if (min_offset < 1) throw ValidationError("min_offset must be >= 1");
}

void corrupt_supervision(std::vector<FlowField>& flows, std::vector<MatchSet>& matches, const CorruptionSpec& spec,
                         CorruptionLog* log) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (log) log->outlier.clear();
  for (auto& f : flows) {
    BoolPlane hit = BoolPlane::Zero(f.height(), f.width());
    const bool scoped = std::abs(f.dst - f.src) >= spec.min_offset && (!spec.forward_only || f.dst > f.src);
    if (scoped && (spec.flow_noise > 0 || spec.flow_outliers > 0)) {
      for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) {
          if (spec.flow_noise > 0) {
            f.dx(y, x) += static_cast<float>(spec.flow_noise * normal(rng));
            f.dy(y, x) += static_cast<float>(spec.flow_noise * normal(rng));
          }
          if (spec.flow_outliers > 0 && unit(rng) < spec.flow_outliers) {
            const double angle = kTwoPi * unit(rng);
            const double length = spec.outlier_magnitude * (1.0 + 0.5 * unit(rng));
            f.dx(y, x) += static_cast<float>(length * std::cos(angle));
            f.dy(y, x) += static_cast<float>(length * std::sin(angle));
            hit(y, x) = 1;
          }
        }
    }
    if (log) log->outlier.push_back(std::move(hit));
  }
  if (spec.match_noise == 0 && spec.match_outliers == 0) return;
  // Keep corrupted matches inside the frame so the files stay valid.
  const double max_x = flows.empty() ? std::numeric_limits<double>::infinity() : flows.front().width() - 1e-3;
  const double max_y = flows.empty() ? std::numeric_limits<double>::infinity() : flows.front().height() - 1e-3;
  for (auto& set : matches) {
    for (auto& m : set.matches) {
      if (spec.match_noise > 0) m.to += spec.match_noise * Eigen::Vector2d(normal(rng), normal(rng));
      if (spec.match_outliers > 0 && unit(rng) < spec.match_outliers) {
        const double angle = kTwoPi * unit(rng);
        m.to += spec.outlier_magnitude * (1.0 + 0.5 * unit(rng)) * Eigen::Vector2d(std::cos(angle), std::sin(angle));
      }
      m.to = Eigen::Vector2d(std::clamp(m.to.x(), 0.0, max_x), std::clamp(m.to.y(), 0.0, max_y));
    }
  }
}

void write_dataset(const fs::path& dir, const SynthData& data, const SceneSpec& spec) {
  save_sequence(data.sequence, dir);
  save_trajectories(data.ground_truth, dir / "gt.json");
  bool any_invalid = false;
  for (const auto& f : data.flows) any_invalid = any_invalid || f.valid_count() != f.valid.size();
  save_flows(dir, data.flows, any_invalid);
  save_matches(dir, data.matches);
  std::ofstream out(dir / "scene.json");
  if (!out) throw IoError("cannot write " + (dir / "scene.json").string());
  out << to_json(spec).dump(2) << '\n';
}

}  // namespace surgmotion
