#include "surgmotion/supervision.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <unordered_set>

namespace surgmotion {

namespace fs = std::filesystem;

namespace {

constexpr float kFloMagic = 202021.25f;

bool inside(const Eigen::Vector2d& p, int width, int height) {
  return p.x() >= 0 && p.y() >= 0 && p.x() < width && p.y() < height;
}

void check_same_shape(const FlowField& a, const FlowField& b) {
  if (a.width() != b.width() || a.height() != b.height()) throw ValidationError("flow fields differ in size");
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t read_u32(std::istream& in, const fs::path& file) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw ValidationError("truncated flow file '" + file.string() + "'");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

// Pair files named <src>_<dst><suffix> in dir, sorted by (src, dst).
std::vector<std::pair<FramePair, fs::path>> pair_files(const fs::path& dir, const std::string& suffix) {
  std::vector<std::pair<FramePair, fs::path>> out;
  if (!fs::is_directory(dir)) return out;
  static const std::regex name(R"((\d+)_(\d+))");
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string file = entry.path().filename().string();
    if (file.size() <= suffix.size() || file.compare(file.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
    std::smatch m;
    const std::string stem = file.substr(0, file.size() - suffix.size());
    if (!std::regex_match(stem, m, name)) continue;
    out.push_back({{std::stoi(m[1]), std::stoi(m[2])}, entry.path()});
  }
  std::sort(out.begin(), out.end());
  return out;
}

// k distinct indices from [0, n), Floyd's algorithm; order of selection kept.
std::vector<std::size_t> distinct_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> picked;
  std::unordered_set<std::size_t> seen;
  for (std::size_t j = n - k; j < n; ++j) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
    const std::size_t choice = seen.count(t) ? j : t;
    seen.insert(choice);
    picked.push_back(choice);
  }
  return picked;
}

}  // namespace

FlowField::FlowField(int src_frame, int dst_frame, int width, int height)
    : src(src_frame),
      dst(dst_frame),
      dx(Plane::Zero(height, width)),
      dy(Plane::Zero(height, width)),
      valid(BoolPlane::Ones(height, width)) {}

Eigen::Index FlowField::valid_count() const { return (valid != 0).count(); }

void FlowField::validate() const {
  if (src == dst) throw ValidationError("flow field maps frame " + std::to_string(src) + " onto itself");
  if (dy.rows() != dx.rows() || dy.cols() != dx.cols() || valid.rows() != dx.rows() || valid.cols() != dx.cols())
    throw ValidationError("flow planes have inconsistent shapes");
}

void MatchSet::validate(int width, int height) const {
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const auto& m = matches[i];
    if (!inside(m.from, width, height) || !inside(m.to, width, height)) {
      throw ValidationError("match " + std::to_string(i) + " of pair " + pair_file_stem(src, dst) +
                            " lies outside the frame");
    }
    if (!(m.confidence >= 0.0 && m.confidence <= 1.0)) {
      throw ValidationError("match " + std::to_string(i) + " of pair " + pair_file_stem(src, dst) +
                            " has confidence outside [0, 1]");
    }
  }
}

SupervisionStore::SupervisionStore(int width, int height, int num_frames, std::map<FramePair, PairSupervision> pairs)
    : width_(width), height_(height), num_frames_(num_frames), pairs_(std::move(pairs)) {
  for (const auto& [key, entry] : pairs_) {
    flow_count_ += entry.flow.size();
    match_count_ += entry.match.size();
    if (!entry.flow.empty() || !entry.match.empty()) pair_list_.push_back(key);
  }
}

void SupervisionConfig::validate() const {
  if (!(cycle_tau >= 0)) throw ValidationError("cycle_tau must be >= 0");
  if (!(rgb_tau >= 0)) throw ValidationError("rgb_tau must be >= 0");
  if (!(min_confidence >= 0 && min_confidence <= 1)) throw ValidationError("min_confidence must be in [0, 1]");
  if (flow_stride < 1) throw ValidationError("flow_stride must be >= 1");
  for (int o : flow_offsets)
    if (o < 1) throw ValidationError("flow offsets must be >= 1");
}

void BatchQuotas::validate() const {
  if (frame_pairs < 1) throw ValidationError("batch needs at least one frame pair");
  if (flow_points < 0 || match_points < 0) throw ValidationError("point quotas must be >= 0");
}

std::size_t TrainingBatch::count(Provenance p) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [p](const BatchItem& i) { return i.provenance == p; }));
}

bool TrainingBatch::operator==(const TrainingBatch& other) const {
  if (frame_pairs != other.frame_pairs || items.size() != other.items.size()) return false;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& a = items[i];
    const auto& b = other.items[i];
    if (a.src != b.src || a.dst != b.dst || a.from != b.from || a.to != b.to || a.provenance != b.provenance)
      return false;
  }
  return true;
}

FlowField cycle_filter(const FlowField& fwd, const FlowField& bwd, double tau) {
  if (fwd.src != bwd.dst || fwd.dst != bwd.src) {
    throw ValidationError("cycle_filter: flows " + pair_file_stem(fwd.src, fwd.dst) + " and " +
                          pair_file_stem(bwd.src, bwd.dst) + " are not a forward/backward pair");
  }
  check_same_shape(fwd, bwd);
  FlowField out = fwd;
  const int w = fwd.width();
  const int h = fwd.height();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!fwd.valid(y, x)) continue;
      const Eigen::Vector2d f(fwd.dx(y, x), fwd.dy(y, x));
      const Eigen::Vector2d q = Eigen::Vector2d(x + 0.5, y + 0.5) + f;
      bool keep = inside(q, w, h);
      if (keep) {
        const int qx = std::clamp(static_cast<int>(q.x()), 0, w - 1);
        const int qy = std::clamp(static_cast<int>(q.y()), 0, h - 1);
        keep = bwd.valid(qy, qx) != 0;
      }
      if (keep) {
        const Eigen::Vector2d b(sample_bilinear<double>(bwd.dx, q.x(), q.y()).value,
                                sample_bilinear<double>(bwd.dy, q.x(), q.y()).value);
        keep = (f + b).norm() <= tau;
      }
      out.valid(y, x) = keep ? 1 : 0;
    }
  }
  return out;
}

FlowField appearance_filter(const VideoSequence& seq, const FlowField& flow, double tau_rgb) {
  if (flow.src < 0 || flow.dst < 0 || flow.src >= seq.num_frames() || flow.dst >= seq.num_frames())
    throw ValidationError("appearance_filter: flow " + pair_file_stem(flow.src, flow.dst) + " references missing frames");
  if (flow.width() != seq.width || flow.height() != seq.height)
    throw ValidationError("appearance_filter: flow size does not match the video");
  const RgbImage& a = seq.frames[flow.src];
  const RgbImage& b = seq.frames[flow.dst];
  FlowField out = flow;
  for (int y = 0; y < seq.height; ++y) {
    for (int x = 0; x < seq.width; ++x) {
      if (!flow.valid(y, x)) continue;
      const Eigen::Vector2d q(x + 0.5 + flow.dx(y, x), y + 0.5 + flow.dy(y, x));
      bool keep = inside(q, seq.width, seq.height);
      if (keep) {
        const Eigen::Vector3d target = sample_rgb(b, q.x(), q.y());
        const Eigen::Vector3d source(a.at(x, y, 0) / 255.0, a.at(x, y, 1) / 255.0, a.at(x, y, 2) / 255.0);
        keep = (target - source).cwiseAbs().maxCoeff() <= tau_rgb;
      }
      out.valid(y, x) = keep ? 1 : 0;
    }
  }
  return out;
}

std::vector<FlowField> filter_flows(const VideoSequence& seq, const std::vector<FlowField>& flows,
                                    const SupervisionConfig& config) {
  std::map<FramePair, const FlowField*> by_pair;
  for (const auto& f : flows) by_pair[{f.src, f.dst}] = &f;
  std::vector<FlowField> out;
  out.reserve(flows.size());
  for (const auto& f : flows) {
    FlowField filtered = f;
    if (config.cycle_filter) {
      const auto reverse = by_pair.find({f.dst, f.src});
      if (reverse != by_pair.end()) {
        filtered = cycle_filter(f, *reverse->second, config.cycle_tau);
      } else {
        spdlog::warn("flow {} has no reverse flow; cycle filter skipped", pair_file_stem(f.src, f.dst));
      }
    }
    if (config.appearance_filter) filtered = appearance_filter(seq, filtered, config.rgb_tau);
    out.push_back(std::move(filtered));
  }
  return out;
}

SupervisionStore build_store(const VideoSequence& seq, const std::vector<FlowField>& flows,
                             const std::vector<MatchSet>& matches, const SupervisionConfig& config) {
  config.validate();
  const std::set<int> offsets(config.flow_offsets.begin(), config.flow_offsets.end());
  std::map<FramePair, PairSupervision> pairs;
  for (const auto& f : flows) {
    f.validate();
    if (f.src < 0 || f.dst < 0 || f.src >= seq.num_frames() || f.dst >= seq.num_frames())
      throw ValidationError("flow " + pair_file_stem(f.src, f.dst) + " references missing frames");
    if (f.width() != seq.width || f.height() != seq.height)
      throw ValidationError("flow " + pair_file_stem(f.src, f.dst) + " size does not match the video");
    if (!offsets.count(std::abs(f.dst - f.src))) continue;
    auto& entry = pairs[{f.src, f.dst}].flow;
    for (int y = 0; y < f.height(); y += config.flow_stride) {
      for (int x = 0; x < f.width(); x += config.flow_stride) {
        if (!f.valid(y, x)) continue;
        const Eigen::Vector2f from(x + 0.5f, y + 0.5f);
        const Eigen::Vector2f to = from + Eigen::Vector2f(f.dx(y, x), f.dy(y, x));
        if (!inside(to.cast<double>(), seq.width, seq.height)) continue;
        entry.push_back({from, to, 1.0f});
      }
    }
  }
  for (const auto& m : matches) {
    if (m.src == m.dst || m.src < 0 || m.dst < 0 || m.src >= seq.num_frames() || m.dst >= seq.num_frames())
      throw ValidationError("match set " + pair_file_stem(m.src, m.dst) + " references invalid frames");
    m.validate(seq.width, seq.height);
    auto& entry = pairs[{m.src, m.dst}].match;
    for (const auto& match : m.matches) {
      if (match.confidence < config.min_confidence) continue;
      entry.push_back({match.from.cast<float>(), match.to.cast<float>(), static_cast<float>(match.confidence)});
    }
  }
  SupervisionStore store(seq.width, seq.height, seq.num_frames(), std::move(pairs));
  if (store.empty()) throw ValidationError("supervision store is empty: no flow or match correspondences survived");
  return store;
}

TrainingBatch sample_batch(const SupervisionStore& store, std::uint64_t seed, const BatchQuotas& quotas) {
  quotas.validate();
  if (store.empty()) throw ValidationError("cannot sample from an empty supervision store");
  if (quotas.flow_points > 0 && store.flow_count() == 0)
    throw ValidationError("flow pool is empty but the batch asks for " + std::to_string(quotas.flow_points) +
                          " flow points");
  if (quotas.match_points > 0 && store.match_count() == 0)
    throw ValidationError("match pool is empty but the batch asks for " + std::to_string(quotas.match_points) +
                          " match points");

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::mt19937_64 rng(seq);
  // The frame-pair budget is split between the two provenances in proportion
  // to their point quotas; each provenance draws from its own pairs.
  std::vector<FramePair> flow_pairs;
  std::vector<FramePair> match_pairs;
  for (const auto& key : store.pair_list()) {
    const auto& e = store.pairs().at(key);
    if (!e.flow.empty()) flow_pairs.push_back(key);
    if (!e.match.empty()) match_pairs.push_back(key);
  }
  const int total_points = quotas.flow_points + quotas.match_points;
  std::size_t want_flow = 0;
  std::size_t want_match = 0;
  if (quotas.match_points == 0) {
    want_flow = static_cast<std::size_t>(quotas.frame_pairs);
  } else if (quotas.flow_points == 0) {
    want_match = static_cast<std::size_t>(quotas.frame_pairs);
  } else {
    const long share = std::lround(static_cast<double>(quotas.frame_pairs) * quotas.flow_points / total_points);
    want_flow = static_cast<std::size_t>(std::clamp<long>(share, 1, std::max(1, quotas.frame_pairs - 1)));
    want_match = static_cast<std::size_t>(std::max<long>(1, quotas.frame_pairs - static_cast<long>(want_flow)));
  }

  std::vector<FramePair> flow_chosen;
  for (std::size_t i : distinct_indices(flow_pairs.size(), std::min(want_flow, flow_pairs.size()), rng))
    flow_chosen.push_back(flow_pairs[i]);
  std::vector<FramePair> remaining;
  for (const auto& key : match_pairs)
    if (std::find(flow_chosen.begin(), flow_chosen.end(), key) == flow_chosen.end()) remaining.push_back(key);
  if (remaining.empty()) remaining = match_pairs;  // every match pair already carries flow
  std::vector<FramePair> match_chosen;
  for (std::size_t i : distinct_indices(remaining.size(), std::min(want_match, remaining.size()), rng))
    match_chosen.push_back(remaining[i]);

  std::vector<FramePair> chosen = flow_chosen;
  for (const auto& key : match_chosen)
    if (std::find(chosen.begin(), chosen.end(), key) == chosen.end()) chosen.push_back(key);

  TrainingBatch batch;
  batch.frame_pairs = chosen;
  for (Provenance p : {Provenance::flow, Provenance::match}) {
    const int quota = p == Provenance::flow ? quotas.flow_points : quotas.match_points;
    if (quota == 0) continue;
    std::vector<std::pair<FramePair, const std::vector<Correspondence>*>> pools;
    std::size_t total = 0;
    for (const auto& key : p == Provenance::flow ? flow_chosen : match_chosen) {
      const auto& e = store.pairs().at(key);
      const auto* pool = p == Provenance::flow ? &e.flow : &e.match;
      if (pool->empty()) continue;
      pools.push_back({key, pool});
      total += pool->size();
    }
    std::vector<std::size_t> picks;
    if (total >= static_cast<std::size_t>(quota)) {
      picks = distinct_indices(total, static_cast<std::size_t>(quota), rng);
    } else {
      std::uniform_int_distribution<std::size_t> any(0, total - 1);
      for (int i = 0; i < quota; ++i) picks.push_back(any(rng));
    }
    for (std::size_t index : picks) {
      for (const auto& [key, pool] : pools) {
        if (index < pool->size()) {
          const auto& c = (*pool)[index];
          batch.items.push_back({key.first, key.second, c.from.cast<double>(), c.to.cast<double>(), p});
          break;
        }
        index -= pool->size();
      }
    }
  }
  return batch;
}

std::string pair_file_stem(int src, int dst) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d_%05d", src, dst);
  return buf;
}

FlowField read_flo(const fs::path& file, int src, int dst) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open flow file '" + file.string() + "'");
  const float magic = std::bit_cast<float>(read_u32(in, file));
  if (magic != kFloMagic) throw ValidationError("bad magic in flow file '" + file.string() + "'");
  const auto width = static_cast<std::int32_t>(read_u32(in, file));
  const auto height = static_cast<std::int32_t>(read_u32(in, file));
  if (width <= 0 || height <= 0 || width > (1 << 16) || height > (1 << 16))
    throw ValidationError("implausible flow dimensions in '" + file.string() + "'");
  FlowField flow(src, dst, width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      flow.dx(y, x) = std::bit_cast<float>(read_u32(in, file));
      flow.dy(y, x) = std::bit_cast<float>(read_u32(in, file));
      if (!std::isfinite(flow.dx(y, x)) || !std::isfinite(flow.dy(y, x))) flow.valid(y, x) = 0;
    }
  }
  return flow;
}

void write_flo(const fs::path& file, const FlowField& flow) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write flow file '" + file.string() + "'");
  write_u32(out, std::bit_cast<std::uint32_t>(kFloMagic));
  write_u32(out, static_cast<std::uint32_t>(flow.width()));
  write_u32(out, static_cast<std::uint32_t>(flow.height()));
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      write_u32(out, std::bit_cast<std::uint32_t>(flow.dx(y, x)));
      write_u32(out, std::bit_cast<std::uint32_t>(flow.dy(y, x)));
    }
  }
  if (!out) throw IoError("write failed for '" + file.string() + "'");
}

MatchSet read_matches(const fs::path& file, int src, int dst) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open match file '" + file.string() + "'");
  MatchSet set{src, dst, {}};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    Match m;
    if (!(fields >> m.from.x() >> m.from.y() >> m.to.x() >> m.to.y() >> m.confidence)) {
      throw ValidationError("malformed match at " + file.string() + ":" + std::to_string(number));
    }
    set.matches.push_back(m);
  }
  return set;
}

void write_matches(const fs::path& file, const MatchSet& matches) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write match file '" + file.string() + "'");
  out.precision(9);
  for (const auto& m : matches.matches)
    out << m.from.x() << ' ' << m.from.y() << ' ' << m.to.x() << ' ' << m.to.y() << ' ' << m.confidence << '\n';
}

std::vector<FlowField> load_flows(const fs::path& dir) {
  std::vector<FlowField> flows;
  for (const auto& [key, path] : pair_files(dir / "flow", ".flo")) {
    FlowField flow = read_flo(path, key.first, key.second);
    const fs::path valid = dir / "flow" / (pair_file_stem(key.first, key.second) + ".valid.png");
    if (fs::exists(valid)) {
      const LabelImage mask = read_png_gray(valid);
      if (mask.width != flow.width() || mask.height != flow.height())
        throw ValidationError("validity mask '" + valid.string() + "' does not match its flow");
      for (int y = 0; y < flow.height(); ++y)
        for (int x = 0; x < flow.width(); ++x)
          if (mask.at(x, y) == 0) flow.valid(y, x) = 0;
    }
    flows.push_back(std::move(flow));
  }
  return flows;
}

std::vector<MatchSet> load_matches(const fs::path& dir) {
  std::vector<MatchSet> out;
  for (const auto& [key, path] : pair_files(dir / "matches", ".txt")) out.push_back(read_matches(path, key.first, key.second));
  return out;
}

void save_flows(const fs::path& dir, const std::vector<FlowField>& flows, bool write_valid) {
  fs::create_directories(dir / "flow");
  for (const auto& f : flows) {
    write_flo(dir / "flow" / (pair_file_stem(f.src, f.dst) + ".flo"), f);
    if (write_valid) {
      LabelImage mask(f.width(), f.height());
      for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) mask.at(x, y) = f.valid(y, x) ? 255 : 0;
      write_png(dir / "flow" / (pair_file_stem(f.src, f.dst) + ".valid.png"), mask);
    }
  }
}

void save_matches(const fs::path& dir, const std::vector<MatchSet>& matches) {
  fs::create_directories(dir / "matches");
  for (const auto& m : matches) write_matches(dir / "matches" / (pair_file_stem(m.src, m.dst) + ".txt"), m);
}

}  // namespace surgmotion
