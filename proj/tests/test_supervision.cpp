#include "helpers.hpp"

#include <doctest.h>

#include "surgmotion/supervision.hpp"

#include <fstream>
#include <map>
#include <random>
#include <set>

using namespace surgmotion;
namespace fs = std::filesystem;

namespace {

FlowField constant_flow(int src, int dst, int w, int h, float dx, float dy) {
  FlowField f(src, dst, w, h);
  f.dx.setConstant(dx);
  f.dy.setConstant(dy);
  return f;
}

VideoSequence textured_video(int frames, int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  VideoSequence seq;
  seq.name = "v";
  seq.width = w;
  seq.height = h;
  for (int f = 0; f < frames; ++f) {
    RgbImage img(w, h);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng() % 256);
    seq.frames.push_back(img);
  }
  return seq;
}

VideoSequence gray_video(int frames, int w, int h) {
  VideoSequence seq;
  seq.name = "gray";
  seq.width = w;
  seq.height = h;
  for (int f = 0; f < frames; ++f) {
    RgbImage img(w, h);
    std::fill(img.data.begin(), img.data.end(), 128);
    seq.frames.push_back(img);
  }
  return seq;
}

}  // namespace

TEST_CASE("cycle filter keeps exact cancellations and drops inconsistent pixels") {
  const FlowField fwd = constant_flow(0, 1, 16, 8, 5, 0);
  FlowField bwd = constant_flow(1, 0, 16, 8, -5, 0);
  const FlowField kept = cycle_filter(fwd, bwd, 1.0);
  CHECK(kept.valid(3, 2) == 1);  // (2.5,3.5) + (5,0) lands inside

  bwd.dx.setConstant(-1);
  const FlowField dropped = cycle_filter(fwd, bwd, 1.0);
  CHECK(dropped.valid(3, 2) == 0);  // |5 - 1| = 4 > 1
  CHECK(cycle_filter(fwd, bwd, 4.0).valid(3, 2) == 1);

  const FlowField z0 = constant_flow(0, 1, 9, 9, 0, 0);
  const FlowField z1 = constant_flow(1, 0, 9, 9, 0, 0);
  CHECK(cycle_filter(z0, z1, 0.0).valid_count() == 81);
  CHECK_THROWS_AS(cycle_filter(z0, constant_flow(2, 0, 9, 9, 0, 0), 1.0), ValidationError);
}

TEST_CASE("cycle filter is monotone in tau (property)") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0, 2);
  FlowField fwd(0, 1, 20, 14), bwd(1, 0, 20, 14);
  for (Eigen::Index i = 0; i < fwd.dx.size(); ++i) {
    fwd.dx.data()[i] = n(rng);
    fwd.dy.data()[i] = n(rng);
    bwd.dx.data()[i] = n(rng);
    bwd.dy.data()[i] = n(rng);
  }
  const double taus[] = {0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 100.0};
  for (int i = 0; i + 1 < 7; ++i) {
    const FlowField a = cycle_filter(fwd, bwd, taus[i]);
    const FlowField b = cycle_filter(fwd, bwd, taus[i + 1]);
    CHECK(((a.valid != 0) && (b.valid == 0)).count() == 0);
  }
}

TEST_CASE("appearance filter") {
  const VideoSequence seq = gray_video(2, 8, 8);
  SUBCASE("identical frames and zero flow keep everything") {
    CHECK(appearance_filter(seq, constant_flow(0, 1, 8, 8, 0, 0), 0.0).valid_count() == 64);
  }
  SUBCASE("a channel differing by 0.5 is dropped at tau 0.1 and kept at tau 1") {
    VideoSequence s = seq;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) s.frames[1].at(x, y, 1) = static_cast<std::uint8_t>(128 + 127);
    const FlowField f = constant_flow(0, 1, 8, 8, 0, 0);
    CHECK(appearance_filter(s, f, 0.1).valid_count() == 0);
    CHECK(appearance_filter(s, f, 1.0).valid_count() == 64);
  }
}

TEST_CASE("store enumerates both directions of every configured offset") {
  const VideoSequence seq = gray_video(3, 6, 5);
  std::vector<FlowField> flows;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) flows.push_back(constant_flow(i, j, 6, 5, 0, 0));
  SupervisionConfig cfg;
  cfg.flow_offsets = {1, 2};
  const SupervisionStore store = build_store(seq, flows, {}, cfg);
  const std::set<FramePair> expected{{0, 1}, {1, 0}, {1, 2}, {2, 1}, {0, 2}, {2, 0}};
  CHECK(std::set<FramePair>(store.pair_list().begin(), store.pair_list().end()) == expected);
  CHECK(store.flow_count() == 6 * 30);

  cfg.flow_offsets = {2};
  CHECK(build_store(seq, flows, {}, cfg).pair_list().size() == 2);
}

TEST_CASE("matches below the confidence threshold are excluded") {
  const VideoSequence seq = gray_video(2, 10, 10);
  MatchSet m{0, 1, {{{1, 1}, {2, 2}, 0.2}, {{3, 3}, {4, 4}, 0.9}}};
  SupervisionConfig cfg;
  cfg.min_confidence = 0.5;
  const SupervisionStore store = build_store(seq, {}, {m}, cfg);
  REQUIRE(store.match_count() == 1);
  CHECK(store.pairs().at({0, 1}).match[0].from == Eigen::Vector2f(3, 3));
}

TEST_CASE("a pixel dropped by the cycle filter survives through a match") {
  const VideoSequence seq = gray_video(2, 8, 8);
  const FlowField fwd = constant_flow(0, 1, 8, 8, 4, 0);
  const FlowField bwd = constant_flow(1, 0, 8, 8, 0, 0);  // inconsistent everywhere
  SupervisionConfig cfg;
  cfg.flow_offsets = {1};
  const auto filtered = filter_flows(seq, {fwd, bwd}, cfg);
  MatchSet m{0, 1, {{{3.5, 3.5}, {7.5, 3.5}, 1.0}}};
  const SupervisionStore store = build_store(seq, filtered, {m}, cfg);
  const auto& e = store.pairs().at({0, 1});
  CHECK(std::none_of(e.flow.begin(), e.flow.end(),
                     [](const Correspondence& c) { return c.from == Eigen::Vector2f(3.5f, 3.5f); }));
  REQUIRE(e.match.size() == 1);
  CHECK(e.match[0].to == Eigen::Vector2f(7.5f, 3.5f));
}

TEST_CASE("store never fabricates correspondences (property)") {
  std::mt19937_64 rng(8);
  const VideoSequence seq = textured_video(4, 12, 9, 2);
  std::normal_distribution<float> n(0, 1.5);
  std::vector<FlowField> flows;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      if (i == j) continue;
      FlowField f(i, j, 12, 9);
      for (Eigen::Index k = 0; k < f.dx.size(); ++k) {
        f.dx.data()[k] = n(rng);
        f.dy.data()[k] = n(rng);
        f.valid.data()[k] = rng() % 5 != 0;
      }
      flows.push_back(f);
    }
  SupervisionConfig cfg;
  cfg.flow_offsets = {1, 2, 3};
  const auto filtered = filter_flows(seq, flows, cfg);
  const SupervisionStore store = build_store(seq, filtered, {}, cfg);
  std::map<FramePair, const FlowField*> by_pair;
  for (const auto& f : filtered) by_pair[{f.src, f.dst}] = &f;
  for (const auto& [key, e] : store.pairs()) {
    const FlowField& f = *by_pair.at(key);
    for (const auto& c : e.flow) {
      const int x = static_cast<int>(c.from.x()), y = static_cast<int>(c.from.y());
      CHECK(f.valid(y, x) == 1);
      CHECK(c.to.x() == doctest::Approx(c.from.x() + f.dx(y, x)));
      CHECK(c.to.y() == doctest::Approx(c.from.y() + f.dy(y, x)));
    }
  }
}

TEST_CASE("empty supervision is an error") {
  const VideoSequence seq = gray_video(2, 4, 4);
  FlowField f = constant_flow(0, 1, 4, 4, 0, 0);
  f.valid.setZero();
  CHECK_THROWS_AS(build_store(seq, {f}, {}, SupervisionConfig{}), ValidationError);
}

namespace {

SupervisionStore uniform_store(int frames) {
  const VideoSequence seq = gray_video(frames, 8, 8);
  std::vector<FlowField> flows;
  std::vector<MatchSet> matches;
  for (int i = 0; i < frames; ++i)
    for (int j = 0; j < frames; ++j) {
      if (i == j) continue;
      flows.push_back(constant_flow(i, j, 8, 8, 0, 0));
      MatchSet m{i, j, {}};
      for (int k = 0; k < 16; ++k) m.matches.push_back({{k * 0.4 + 0.5, 1.5}, {k * 0.4 + 0.5, 2.5}, 1.0});
      matches.push_back(m);
    }
  SupervisionConfig cfg;
  cfg.flow_offsets.clear();
  for (int o = 1; o < frames; ++o) cfg.flow_offsets.push_back(o);
  return build_store(seq, flows, matches, cfg);
}

}  // namespace

TEST_CASE("batch composition follows the quotas") {
  const SupervisionStore store = uniform_store(5);
  const TrainingBatch b = sample_batch(store, 17, BatchQuotas{8, 192, 64});
  CHECK(b.items.size() == 256);
  CHECK(b.count(Provenance::flow) == 192);
  CHECK(b.count(Provenance::match) == 64);
  CHECK(b.frame_pairs.size() == 8);
  CHECK(std::set<FramePair>(b.frame_pairs.begin(), b.frame_pairs.end()).size() == 8);
  for (const auto& item : b.items) {
    CHECK(std::find(b.frame_pairs.begin(), b.frame_pairs.end(), FramePair{item.src, item.dst}) != b.frame_pairs.end());
  }
  CHECK(sample_batch(store, 17, BatchQuotas{8, 192, 64}) == b);
  CHECK_FALSE(sample_batch(store, 18, BatchQuotas{8, 192, 64}) == b);
}

TEST_CASE("a quota against an empty pool names the pool") {
  const VideoSequence seq = gray_video(2, 4, 4);
  const SupervisionStore store = build_store(seq, {constant_flow(0, 1, 4, 4, 0, 0)}, {}, SupervisionConfig{});
  CHECK_THROWS_WITH_AS(sample_batch(store, 1, BatchQuotas{1, 0, 5}), doctest::Contains("match pool"), ValidationError);
  CHECK(sample_batch(store, 1, BatchQuotas{1, 5, 0}).items.size() == 5);
}

TEST_CASE("frame pairs are selected uniformly (seeded chi-square sanity)") {
  const SupervisionStore store = uniform_store(6);  // 30 ordered pairs
  std::map<FramePair, int> hits;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const TrainingBatch b = sample_batch(store, 1000 + static_cast<std::uint64_t>(i), BatchQuotas{8, 24, 8});
    for (const auto& p : b.frame_pairs) ++hits[p];
  }
  REQUIRE(hits.size() == 30);
  const double expected = draws * 8.0 / 30.0;
  double chi2 = 0;
  for (const auto& [pair, count] : hits) {
    CHECK(std::abs(count - expected) / expected < 0.05);
    chi2 += (count - expected) * (count - expected) / expected;
  }
  CHECK(chi2 < 60.0);  // 29 dof, p ~ 5e-4
}

TEST_CASE("flo and match files round trip") {
  const auto dir = testing::scratch("supervision_files");
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0, 3);
  FlowField f(3, 7, 11, 6);
  for (Eigen::Index i = 0; i < f.dx.size(); ++i) {
    f.dx.data()[i] = n(rng);
    f.dy.data()[i] = n(rng);
    f.valid.data()[i] = rng() % 3 != 0;
  }
  save_flows(dir, {f}, true);
  CHECK(fs::exists(dir / "flow" / "00003_00007.flo"));
  const auto back = load_flows(dir);
  REQUIRE(back.size() == 1);
  CHECK(back[0].src == 3);
  CHECK(back[0].dst == 7);
  CHECK((back[0].dx == f.dx).all());
  CHECK((back[0].dy == f.dy).all());
  CHECK((back[0].valid == f.valid).all());

  {
    std::ifstream in(dir / "flow" / "00003_00007.flo", std::ios::binary);
    float magic = 0;
    std::int32_t w = 0, h = 0;
    in.read(reinterpret_cast<char*>(&magic), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    CHECK(magic == 202021.25f);
    CHECK(w == 11);
    CHECK(h == 6);
    CHECK(fs::file_size(dir / "flow" / "00003_00007.flo") == 12u + 11u * 6u * 8u);
  }
  {
    std::ofstream bad(dir / "bad.flo", std::ios::binary);
    bad << "garbage!";
  }
  CHECK_THROWS_AS(read_flo(dir / "bad.flo", 0, 1), ValidationError);

  MatchSet m{2, 5, {{{1.25, 2.5}, {3.75, 4.0}, 0.8}, {{0.5, 0.5}, {9.5, 5.5}, 1.0}}};
  save_matches(dir, {m});
  const auto mb = load_matches(dir);
  REQUIRE(mb.size() == 1);
  CHECK(mb[0].src == 2);
  CHECK(mb[0].dst == 5);
  REQUIRE(mb[0].matches.size() == 2);
  CHECK(mb[0].matches[0].from == m.matches[0].from);
  CHECK(mb[0].matches[1].to == m.matches[1].to);
  CHECK(mb[0].matches[0].confidence == doctest::Approx(0.8));
}
