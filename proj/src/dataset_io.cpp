#include "surgmotion/dataset_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace surgmotion {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// Maps numbered files `<digits>.png` in `dir` to their index. Throws on gaps.
std::vector<fs::path> numbered_pngs(const fs::path& dir) {
  std::map<int, fs::path> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    const std::string stem = entry.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](unsigned char c) { return std::isdigit(c); }))
      continue;
    found.emplace(std::stoi(stem), entry.path());
  }
  std::vector<fs::path> paths;
  int expected = 0;
  for (const auto& [index, path] : found) {
    if (index != expected) {
      throw ValidationError("non-contiguous frame numbering in '" + dir.string() + "': expected " +
                            frame_file_name(expected) + ", found " + path.filename().string());
    }
    paths.push_back(path);
    ++expected;
  }
  return paths;
}

void check_position(const TrackPoint& p, int f, const Eigen::Vector2d& pos, int width, int height) {
  if (!pos.allFinite()) {
    throw ValidationError("point " + std::to_string(p.id) + " frame " + std::to_string(f) + ": non-finite position");
  }
  if (p.visibility[f] == Visibility::visible &&
      (pos.x() < 0 || pos.x() >= width || pos.y() < 0 || pos.y() >= height)) {
    std::ostringstream os;
    os << "point " << p.id << " frame " << f << ": visible position (" << pos.x() << ", " << pos.y()
       << ") outside " << width << "x" << height;
    throw ValidationError(os.str());
  }
}

}  // namespace

std::string_view to_string(Category c) { return c == Category::tool ? "tool" : "tissue"; }

std::string_view to_string(Visibility v) {
  switch (v) {
    case Visibility::visible:
      return "visible";
    case Visibility::occluded:
      return "occluded";
    case Visibility::out_of_view:
      return "out_of_view";
  }
  return "visible";
}

Visibility parse_visibility(std::string_view text) {
  const std::string s = lower(text);
  if (s == "visible") return Visibility::visible;
  if (s == "occluded") return Visibility::occluded;
  if (s == "out_of_view" || s == "out-of-view" || s == "out of view") return Visibility::out_of_view;
  throw ValidationError("unknown visibility flag '" + std::string(text) + "'");
}

Category parse_category(std::string_view text) {
  const std::string s = lower(text);
  if (s == "tool") return Category::tool;
  if (s == "tissue") return Category::tissue;
  throw ValidationError("unknown category '" + std::string(text) + "'");
}

std::string frame_file_name(int index, std::string_view extension) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  return std::string(buf) + std::string(extension);
}

void VideoSequence::validate() const {
  if (frames.size() < 2) {
    throw ValidationError("video '" + name + "' has " + std::to_string(frames.size()) + " frame(s); at least 2 required");
  }
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].width != width || frames[f].height != height) {
      throw ValidationError("frame " + std::to_string(f) + " is " + std::to_string(frames[f].width) + "x" +
                            std::to_string(frames[f].height) + ", expected " + std::to_string(width) + "x" +
                            std::to_string(height));
    }
  }
  if (!masks.empty()) {
    if (masks.size() != frames.size()) {
      throw ValidationError("mask count " + std::to_string(masks.size()) + " does not match frame count " +
                            std::to_string(frames.size()));
    }
    for (std::size_t f = 0; f < masks.size(); ++f) {
      if (masks[f].width != width || masks[f].height != height) {
        throw ValidationError("mask " + std::to_string(f) + " dimension mismatch: " + std::to_string(masks[f].width) +
                              "x" + std::to_string(masks[f].height) + " vs frame " + std::to_string(width) + "x" +
                              std::to_string(height));
      }
    }
  }
}

void TrajectorySet::validate() const {
  if (width <= 0 || height <= 0) throw ValidationError("trajectory set has non-positive dimensions");
  if (num_frames < 0) throw ValidationError("negative num_frames");
  std::set<int> ids;
  for (const auto& p : points) {
    if (!ids.insert(p.id).second) throw ValidationError("duplicate point id " + std::to_string(p.id));
    if (static_cast<int>(p.positions.size()) != num_frames || static_cast<int>(p.visibility.size()) != num_frames) {
      throw ValidationError("point " + std::to_string(p.id) + ": frame-count mismatch (" +
                            std::to_string(p.positions.size()) + " positions, " + std::to_string(p.visibility.size()) +
                            " flags, num_frames " + std::to_string(num_frames) + ")");
    }
    for (int f = 0; f < num_frames; ++f) {
      const auto& pos = p.positions[f];
      if (p.visibility[f] == Visibility::visible && !pos) {
        throw ValidationError("point " + std::to_string(p.id) + " is visible at frame " + std::to_string(f) +
                              " but has no position");
      }
      if (p.visibility[f] == Visibility::out_of_view && pos) {
        throw ValidationError("point " + std::to_string(p.id) + " is out_of_view at frame " + std::to_string(f) +
                              " but stores a position");
      }
      if (pos) check_position(p, f, *pos, width, height);
    }
  }
}

const TrackPoint* TrajectorySet::find(int id) const {
  for (const auto& p : points)
    if (p.id == id) return &p;
  return nullptr;
}

QuerySpec queries_from(const TrajectorySet& t) {
  QuerySpec out;
  for (const auto& p : t.points) {
    for (int f = 0; f < t.num_frames; ++f) {
      if (p.visibility[f] == Visibility::visible) {
        out.push_back({p.id, f, *p.positions[f]});
        break;
      }
    }
  }
  return out;
}

void validate_queries(const QuerySpec& q, int width, int height, int num_frames) {
  for (const auto& query : q) {
    if (query.frame < 0 || query.frame >= num_frames) {
      throw ValidationError("query for point " + std::to_string(query.point_id) + " has frame " +
                            std::to_string(query.frame) + " outside [0, " + std::to_string(num_frames - 1) + "]");
    }
    const auto& p = query.position;
    if (!p.allFinite() || p.x() < 0 || p.x() >= width || p.y() < 0 || p.y() >= height) {
      std::ostringstream os;
      os << "query for point " << query.point_id << " at (" << p.x() << ", " << p.y() << ") is outside the "
         << width << "x" << height << " frame";
      throw ValidationError(os.str());
    }
  }
}

QuerySpec load_queries(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read query file '" + file.string() + "'");
  try {
    const json doc = json::parse(in);
    QuerySpec out;
    for (const auto& q : doc.at("queries")) {
      out.push_back({q.at("point_id").get<int>(), q.at("frame").get<int>(),
                     Eigen::Vector2d(q.at("x").get<double>(), q.at("y").get<double>())});
    }
    return out;
  } catch (const json::exception& e) {
    throw ValidationError("malformed query file '" + file.string() + "': " + e.what());
  }
}

void save_queries(const QuerySpec& q, const fs::path& file) {
  json doc;
  doc["queries"] = json::array();
  for (const auto& query : q) {
    doc["queries"].push_back(
        {{"point_id", query.point_id}, {"frame", query.frame}, {"x", query.position.x()}, {"y", query.position.y()}});
  }
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw IoError("cannot write query file '" + file.string() + "'");
  out << doc.dump(1) << '\n';
}

VideoSequence load_sequence(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("sequence directory '" + dir.string() + "' does not exist");
  const fs::path frames_dir = dir / "frames";
  if (!fs::is_directory(frames_dir)) throw IoError("missing frames directory '" + frames_dir.string() + "'");

  VideoSequence seq;
  seq.name = fs::absolute(dir).lexically_normal().filename().string();
  if (seq.name.empty()) seq.name = fs::absolute(dir).lexically_normal().parent_path().filename().string();
  for (const auto& path : numbered_pngs(frames_dir)) seq.frames.push_back(read_png_rgb(path));
  if (seq.frames.empty()) throw ValidationError("no frames found in '" + frames_dir.string() + "'");
  seq.width = seq.frames.front().width;
  seq.height = seq.frames.front().height;

  const fs::path masks_dir = dir / "masks";
  if (fs::is_directory(masks_dir)) {
    for (const auto& path : numbered_pngs(masks_dir)) seq.masks.push_back(read_png_gray(path));
  }
  seq.validate();
  return seq;
}

void save_sequence(const VideoSequence& seq, const fs::path& dir) {
  seq.validate();
  fs::create_directories(dir / "frames");
  for (int f = 0; f < seq.num_frames(); ++f) write_png(dir / "frames" / frame_file_name(f), seq.frames[f]);
  if (seq.has_masks()) {
    fs::create_directories(dir / "masks");
    for (int f = 0; f < seq.num_frames(); ++f) write_png(dir / "masks" / frame_file_name(f), seq.masks[f]);
  }
}

TrajectorySet trajectories_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed trajectory JSON: ") + e.what());
  }
  TrajectorySet t;
  try {
    t.video = doc.at("video").get<std::string>();
    t.width = doc.at("width").get<int>();
    t.height = doc.at("height").get<int>();
    t.num_frames = doc.at("num_frames").get<int>();
    for (const auto& record : doc.at("points")) {
      TrackPoint p;
      p.id = record.at("id").get<int>();
      p.category = parse_category(record.at("category").get<std::string>());
      if (record.contains("instrument_id") && !record.at("instrument_id").is_null())
        p.instrument_id = record.at("instrument_id").get<int>();
      for (const auto& pos : record.at("positions")) {
        if (pos.is_null()) {
          p.positions.emplace_back(std::nullopt);
        } else {
          if (!pos.is_array() || pos.size() != 2)
            throw ValidationError("point " + std::to_string(p.id) + ": position must be [x, y] or null");
          p.positions.emplace_back(Eigen::Vector2d(pos[0].get<double>(), pos[1].get<double>()));
        }
      }
      for (const auto& flag : record.at("visibility")) p.visibility.push_back(parse_visibility(flag.get<std::string>()));
      t.points.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed trajectory record: ") + e.what());
  }
  t.validate();
  return t;
}

TrajectorySet load_trajectories(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open trajectory file '" + file.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return trajectories_from_json(buffer.str());
}

std::string trajectories_to_json(const TrajectorySet& t) {
  t.validate();
  json doc;
  doc["video"] = t.video;
  doc["width"] = t.width;
  doc["height"] = t.height;
  doc["num_frames"] = t.num_frames;
  doc["points"] = json::array();
  for (const auto& p : t.points) {
    json record;
    record["id"] = p.id;
    record["category"] = std::string(to_string(p.category));
    record["instrument_id"] = p.instrument_id ? json(*p.instrument_id) : json(nullptr);
    record["positions"] = json::array();
    for (const auto& pos : p.positions)
      record["positions"].push_back(pos ? json::array({pos->x(), pos->y()}) : json(nullptr));
    record["visibility"] = json::array();
    for (auto v : p.visibility) record["visibility"].push_back(std::string(to_string(v)));
    doc["points"].push_back(std::move(record));
  }
  return doc.dump(1);
}

void save_trajectories(const TrajectorySet& t, const fs::path& file) {
  const std::string text = trajectories_to_json(t);
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw IoError("cannot write trajectory file '" + file.string() + "'");
  out << text << '\n';
  if (!out) throw IoError("write failed for '" + file.string() + "'");
}

TrajectorySet resize_for_eval(const TrajectorySet& t, int target_width, int target_height) {
  if (target_width <= 0 || target_height <= 0) throw ValidationError("resize target must have positive dimensions");
  if (t.width <= 0 || t.height <= 0) throw ValidationError("source trajectory set has zero dimensions");
  const double sx = static_cast<double>(target_width) / t.width;
  const double sy = static_cast<double>(target_height) / t.height;
  TrajectorySet out = t;
  out.width = target_width;
  out.height = target_height;
  for (auto& p : out.points) {
    for (auto& pos : p.positions) {
      if (pos) *pos = Eigen::Vector2d(pos->x() * sx, pos->y() * sy);
    }
  }
  return out;
}

}  // namespace surgmotion
