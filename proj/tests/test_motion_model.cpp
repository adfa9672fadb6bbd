#include "helpers.hpp"

#include <doctest.h>

#include "surgmotion/motion_model.hpp"

#include <cstring>
#include <fstream>
#include <random>

using namespace surgmotion;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(int frames = 3) {
  ModelConfig c;
  c.num_frames = frames;
  c.coupling_layers = 3;
  c.conditioner_hidden = 8;
  c.latent_dim = 4;
  c.canonical_hidden = 8;
  c.encoding_octaves = 2;
  c.seed = 5;
  return c;
}

/// Perturbs every parameter, including the zero-initialized output layers.
template <typename Scalar>
void randomize(MotionModel<Scalar>& m, double std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for (Eigen::Index i = 0; i < m.params().size(); ++i) m.params().values()[i] += static_cast<Scalar>(n(rng));
}

template <typename Scalar>
Matrix<Scalar> random_points(Eigen::Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Matrix<Scalar> x(3, n);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<Scalar>(u(rng));
  return x;
}

}  // namespace

TEST_CASE("zero-initialized conditioners give identity maps") {
  ModelConfig c;
  c.num_frames = 4;
  const MotionModel<double> m(c);
  const Matrix<double> x = random_points<double>(200, 1);
  for (int f = 0; f < 4; ++f) {
    CHECK(m.map_to_canonical(x, f) == x);
    CHECK(m.map_from_canonical(x, f) == x);
  }
  const Vec3<double> p(0.3, -0.2, 0.7);
  CHECK(m.map_between(p, 0, 3) == p);
}

TEST_CASE("bijections invert within 1e-5 for random parameters (property)") {
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    ModelConfig c;
    c.num_frames = 3;
    c.seed = trial;
    MotionModel<double> md(c);
    randomize(md, 0.3, 100 + trial);
    MotionModel<float> mf(c);
    randomize(mf, 0.05, 200 + trial);
    const Matrix<double> x = random_points<double>(1000, trial);
    for (int f = 0; f < 3; ++f) {
      const Matrix<double> back = md.map_from_canonical(md.map_to_canonical(x, f), f);
      CHECK((back - x).cwiseAbs().maxCoeff() < 1e-5);
      const Matrix<float> xf = x.cast<float>();
      const Matrix<float> backf = mf.map_from_canonical(mf.map_to_canonical(xf, f), f);
      CHECK((backf - xf).cwiseAbs().maxCoeff() < 1e-5f);
      const Matrix<double> fwd = md.map_to_canonical(x, f);
      const Matrix<double> again = md.map_to_canonical(md.map_from_canonical(fwd, f), f);
      CHECK((again - fwd).cwiseAbs().maxCoeff() < 1e-5);
    }
    const Vec3<double> p = x.col(7);
    CHECK((md.map_between(p, 1, 1) - p).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("tape maps agree with the host maps") {
  MotionModel<double> m(tiny_config());
  randomize(m, 0.2, 3);
  const Matrix<double> x = random_points<double>(6, 2);
  const std::vector<int> frames{0, 1, 2, 2, 1, 0};
  ad::Tape<double> tape;
  typename MotionModel<double>::Graph g(tape, static_cast<const MotionModel<double>&>(m));
  const auto psi = g.latents_for(frames);
  const auto u = g.to_canonical(tape.constant(x), psi);
  const auto back = g.from_canonical(u, psi);
  for (int i = 0; i < 6; ++i) {
    const Vec3<double> expected = m.map_to_canonical(Vec3<double>(x.col(i)), frames[static_cast<std::size_t>(i)]);
    CHECK((u.value().col(i) - expected).norm() < 1e-12);
  }
  CHECK((back.value() - x).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("density is nonnegative and color lies in the unit cube (property)") {
  ModelConfig c;
  c.num_frames = 2;
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    MotionModel<double> m(c);
    randomize(m, 1.0, trial);
    const Matrix<double> u = random_points<double>(250, 50 + trial) * 3.0;
    for (Eigen::Index i = 0; i < u.cols(); ++i) {
      const auto [sigma, color] = m.query_canonical(Vec3<double>(u.col(i)));
      CHECK(sigma >= 0);
      CHECK(color.minCoeff() >= 0);
      CHECK(color.maxCoeff() <= 1);
    }
  }
}

TEST_CASE("initial density yields the configured full-ray opacity") {
  ModelConfig c;
  c.initial_opacity = 0.9;
  const MotionModel<double> m(c);
  const auto [sigma, color] = m.query_canonical(Vec3<double>(0.1, 0.2, 0.3));
  CHECK(1.0 - std::exp(-2.0 * sigma) == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("density gradient matches central finite differences for every parameter") {
  MotionModel<double> m(tiny_config());
  randomize(m, 0.3, 11);
  const Matrix<double> x = random_points<double>(4, 9);
  const std::vector<int> frames{0, 1, 2, 1};
  auto loss = [&](MotionModel<double>& model, bool backward) {
    ad::Tape<double> tape;
    typename MotionModel<double>::Graph g(tape, model);
    const auto u = g.to_canonical(tape.constant(x), g.latents_for(frames));
    const auto [sigma, color] = g.query(u);
    const auto l = ad::add(ad::sum(sigma), ad::sum(ad::square(color)));
    if (backward) tape.backward(l);
    return l.value()(0, 0);
  };
  m.params().zero_grads();
  loss(m, true);
  const Vector<double> grad = m.params().grads();
  const double h = 1e-6;
  int checked = 0;
  for (Eigen::Index i = 0; i < m.params().size(); ++i) {
    const double keep = m.params().values()[i];
    m.params().values()[i] = keep + h;
    const double up = loss(m, false);
    m.params().values()[i] = keep - h;
    const double down = loss(m, false);
    m.params().values()[i] = keep;
    const double fd = (up - down) / (2 * h);
    CAPTURE(i);
    CHECK(testing::rel_error(grad[i], fd, 1e-4) < 1e-4);
    ++checked;
  }
  CHECK(checked == m.params().size());
}

TEST_CASE("same seed gives identical parameters, different seeds differ") {
  ModelConfig c;
  c.num_frames = 5;
  c.seed = 3;
  const MotionModel<float> a(c), b(c);
  CHECK(a.params().values() == b.params().values());
  c.seed = 4;
  const MotionModel<float> d(c);
  CHECK(a.params().values() != d.params().values());
}

TEST_CASE("temporal latent init keeps neighboring frames close") {
  ModelConfig c;
  c.num_frames = 30;
  const MotionModel<double> m(c);
  const auto psi = m.params().value(m.latent_block());
  double neighbor = 0, far = 0;
  for (int f = 0; f + 1 < 30; ++f) neighbor += (psi.col(f + 1) - psi.col(f)).norm();
  for (int f = 0; f + 15 < 30; ++f) far += (psi.col(f + 15) - psi.col(f)).norm();
  CHECK(neighbor / 29 < 0.5 * far / 15);
  c.latent_init = LatentInit::gaussian;
  const MotionModel<double> g(c);
  CHECK(g.params().value(g.latent_block()) != psi);
}

TEST_CASE("checkpoint round trip is bit-identical and the header follows the documented layout") {
  const auto dir = testing::scratch("motion_model_ckpt");
  ModelConfig c = tiny_config(4);
  MotionModel<float> m(c);
  randomize(m, 0.1, 2);
  save_checkpoint(m, dir / "m.smck");
  const MotionModel<float> back = load_checkpoint<float>(dir / "m.smck");
  CHECK(back.params().values() == m.params().values());
  CHECK(back.config().num_frames == 4);
  CHECK(back.config().coupling_layers == c.coupling_layers);
  const Matrix<float> x = random_points<float>(50, 1);
  CHECK(back.map_to_canonical(x, 2) == m.map_to_canonical(x, 2));

  std::ifstream in(dir / "m.smck", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 60 + 4 * static_cast<std::size_t>(m.params().size()));
  CHECK(std::memcmp(bytes.data(), "SMCK", 4) == 0);
  auto u32 = [&](std::size_t at) {
    return bytes[at] | bytes[at + 1] << 8 | bytes[at + 2] << 16 | static_cast<std::uint32_t>(bytes[at + 3]) << 24;
  };
  CHECK(u32(4) == kCheckpointVersion);
  CHECK(u32(8) == 4);
  CHECK(u32(12) == 4);   // num_frames
  CHECK(u32(16) == 3);   // coupling_layers
  CHECK(u32(20) == 8);   // conditioner_hidden
  CHECK(u32(24) == 2);   // conditioner_depth
  CHECK(u32(28) == 4);   // latent_dim
  CHECK(u32(32) == 8);   // canonical_hidden
  CHECK(u32(36) == 2);   // canonical_depth
  CHECK(u32(40) == 2);   // encoding_octaves
  double mls = 0;
  std::memcpy(&mls, bytes.data() + 44, 8);
  CHECK(mls == c.max_log_scale);
  std::uint64_t count = 0;
  std::memcpy(&count, bytes.data() + 52, 8);
  CHECK(count == static_cast<std::uint64_t>(m.params().size()));
  float first = 0;
  std::memcpy(&first, bytes.data() + 60, 4);
  CHECK(first == m.params().values()[0]);

  MotionModel<double> md = m.cast<double>();
  save_checkpoint(md, dir / "d.smck");
  CHECK(fs::file_size(dir / "d.smck") == 60 + 8 * static_cast<std::size_t>(md.params().size()));
  CHECK(load_checkpoint<double>(dir / "d.smck").params().values() == md.params().values());
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto dir = testing::scratch("motion_model_bad_ckpt");
  MotionModel<float> m(tiny_config());
  save_checkpoint(m, dir / "good.smck");
  std::ifstream in(dir / "good.smck", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
    return dir / name;
  };
  CHECK_THROWS_AS(load_checkpoint<float>(write("magic.smck", "XMCK" + bytes.substr(4))), ValidationError);
  CHECK_THROWS_AS(load_checkpoint<float>(write("short.smck", bytes.substr(0, bytes.size() - 3))), ValidationError);
  CHECK_THROWS_AS(load_checkpoint<float>(write("tail.smck", bytes + "x")), ValidationError);
  std::string version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(load_checkpoint<float>(write("version.smck", version)), ValidationError);
  std::string nan = bytes;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 60, &q, 4);
  CHECK_THROWS_AS(load_checkpoint<float>(write("nan.smck", nan)), ValidationError);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.smck"), IoError);
}
