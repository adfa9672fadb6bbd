#include "surgmotion/motion_model.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

namespace surgmotion {

namespace {

template <typename Scalar>
void xavier_fill(Eigen::Map<Matrix<Scalar>> w, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(dist(rng));
}

MlpBlocks add_mlp(auto& store, const std::string& prefix, int in, int hidden, int depth, int out) {
  MlpBlocks blocks;
  int fan_in = in;
  for (int l = 0; l <= depth; ++l) {
    const int fan_out = l == depth ? out : hidden;
    blocks.weights.push_back(store.add(prefix + ".w" + std::to_string(l), fan_out, fan_in));
    blocks.biases.push_back(store.add(prefix + ".b" + std::to_string(l), fan_out, 1));
    fan_in = fan_out;
  }
  return blocks;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
void put_f64(std::ostream& out, double f) { put_u64(out, std::bit_cast<std::uint64_t>(f)); }

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw ValidationError("truncated checkpoint while reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in, const std::string& what) {
  const std::uint64_t lo = get_u32(in, what);
  const std::uint64_t hi = get_u32(in, what);
  return lo | (hi << 32);
}

float get_f32(std::istream& in, const std::string& what) { return std::bit_cast<float>(get_u32(in, what)); }
double get_f64(std::istream& in, const std::string& what) { return std::bit_cast<double>(get_u64(in, what)); }

}  // namespace

void ModelConfig::validate() const {
  if (num_frames < 1) throw ValidationError("model needs at least one frame");
  if (coupling_layers < 1) throw ValidationError("coupling_layers must be >= 1");
  if (conditioner_hidden < 1 || canonical_hidden < 1) throw ValidationError("hidden widths must be >= 1");
  if (conditioner_depth < 0 || canonical_depth < 0) throw ValidationError("depths must be >= 0");
  if (latent_dim < 0) throw ValidationError("latent_dim must be >= 0");
  if (encoding_octaves < 0 || encoding_octaves > 16) throw ValidationError("encoding_octaves must be in [0, 16]");
  if (!(max_log_scale > 0)) throw ValidationError("max_log_scale must be positive");
  if (!(initial_opacity > 0 && initial_opacity < 1)) throw ValidationError("initial_opacity must be in (0, 1)");
}

std::pair<int, int> kept_coordinates(int layer) {
  switch (layer % 3) {
    case 0:
      return {1, 2};
    case 1:
      return {0, 2};
    default:
      return {0, 1};
  }
}

template <typename Scalar>
MotionModel<Scalar>::MotionModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  for (int l = 0; l < config_.coupling_layers; ++l) {
    couplings_.push_back(add_mlp(params_, "coupling" + std::to_string(l), 2 + config_.latent_dim,
                                 config_.conditioner_hidden, config_.conditioner_depth, 2));
  }
  latents_ = params_.add("latents", config_.latent_dim, config_.num_frames);
  const int encoded = 3 * (1 + 2 * config_.encoding_octaves);
  canonical_ = add_mlp(params_, "canonical", encoded, config_.canonical_hidden, config_.canonical_depth, 4);
  initialize();
}

template <typename Scalar>
void MotionModel<Scalar>::initialize() {
  std::mt19937_64 rng(config_.seed);
  for (const auto& net : couplings_) {
    for (std::size_t l = 0; l + 1 < net.weights.size(); ++l) xavier_fill<Scalar>(params_.value(net.weights[l]), rng);
    // Output layer stays zero: identity map at initialization.
  }
  auto psi = params_.value(latents_);
  if (config_.latent_init == LatentInit::gaussian) {
    std::normal_distribution<double> normal(0.0, config_.latent_init_std);
    for (Eigen::Index j = 0; j < psi.cols(); ++j)
      for (Eigen::Index i = 0; i < psi.rows(); ++i) psi(i, j) = static_cast<Scalar>(normal(rng));
  } else {
    // Random-phase sinusoids of normalized time, so neighboring frames start
    // with neighboring codes. Unit variance per dimension times latent_init_std.
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const double span = std::max(1, config_.num_frames - 1);
    for (Eigen::Index i = 0; i < psi.rows(); ++i) {
      const double cycles = 0.5 + 0.25 * static_cast<double>(i);
      const double offset = phase(rng);
      for (Eigen::Index j = 0; j < psi.cols(); ++j) {
        const double t = static_cast<double>(j) / span;
        psi(i, j) = static_cast<Scalar>(config_.latent_init_std * std::sqrt(2.0) *
                                        std::sin(2.0 * std::numbers::pi * cycles * t + offset));
      }
    }
  }
  for (int w : canonical_.weights) xavier_fill<Scalar>(params_.value(w), rng);
  // Uniform density so that a ray through the whole [-1, 1] depth range
  // accumulates initial_opacity: 1 - exp(-2 sigma) = opacity.
  const double sigma = -std::log(1.0 - config_.initial_opacity) / 2.0;
  const double pre = std::log(std::expm1(sigma));
  params_.value(canonical_.weights.back()).row(0).setZero();
  params_.value(canonical_.biases.back())(0, 0) = static_cast<Scalar>(pre);
}

template <typename Scalar>
MotionModel<Scalar>::Graph::Graph(ad::Tape<Scalar>& tape, MotionModel& model)
    : tape_(&tape), model_(&model), store_(&model.params_) {
  bind(model, true);
}

template <typename Scalar>
MotionModel<Scalar>::Graph::Graph(ad::Tape<Scalar>& tape, const MotionModel& model) : tape_(&tape), model_(&model) {
  bind(model, false);
}

template <typename Scalar>
void MotionModel<Scalar>::Graph::bind(const MotionModel& model, bool track) {
  auto leaf = [&](int block) {
    return track ? tape_->parameter(*store_, block) : tape_->constant(Matrix<Scalar>(model.params_.value(block)));
  };
  auto bind_net = [&](const MlpBlocks& blocks) {
    Layer layer;
    for (int w : blocks.weights) layer.weights.push_back(leaf(w));
    for (int b : blocks.biases) layer.biases.push_back(leaf(b));
    return layer;
  };
  for (const auto& blocks : model.couplings_) couplings_.push_back(bind_net(blocks));
  canonical_ = bind_net(model.canonical_);
  latents_ = leaf(model.latents_);
}

template <typename Scalar>
ad::Var<Scalar> MotionModel<Scalar>::Graph::latents_for(const std::vector<int>& frame_of_col) {
  for (int f : frame_of_col) {
    if (f < 0 || f >= model_->num_frames())
      throw ValidationError("frame index " + std::to_string(f) + " outside model range");
  }
  return ad::gather_cols(latents_, frame_of_col);
}

template <typename Scalar>
ad::Var<Scalar> MotionModel<Scalar>::Graph::mlp(const Layer& net, ad::Var<Scalar> input) const {
  ad::Var<Scalar> h = input;
  const std::size_t depth = net.weights.size();
  for (std::size_t l = 0; l < depth; ++l) {
    h = ad::add_bias(ad::matmul(net.weights[l], h), net.biases[l]);
    if (l + 1 < depth) h = ad::tanh(h);
  }
  return h;
}

template <typename Scalar>
std::pair<ad::Var<Scalar>, ad::Var<Scalar>> MotionModel<Scalar>::Graph::conditioner(int layer, ad::Var<Scalar> points,
                                                                                     ad::Var<Scalar> psi) {
  const auto [a, b] = kept_coordinates(layer);
  std::vector<ad::Var<Scalar>> parts{ad::rows(points, a, 1), ad::rows(points, b, 1)};
  if (psi.rows() > 0) parts.push_back(psi);
  const ad::Var<Scalar> out = mlp(couplings_[layer], ad::vcat(std::move(parts)));
  const Scalar bound = static_cast<Scalar>(model_->config_.max_log_scale);
  const ad::Var<Scalar> log_scale = ad::scale(ad::tanh(ad::scale(ad::rows(out, 0, 1), Scalar(1) / bound)), bound);
  return {log_scale, ad::rows(out, 1, 1)};
}

namespace {

template <typename Scalar>
ad::Var<Scalar> replace_row(ad::Var<Scalar> points, int row, ad::Var<Scalar> value) {
  std::vector<ad::Var<Scalar>> parts;
  for (int r = 0; r < 3; ++r) parts.push_back(r == row ? value : ad::rows(points, r, 1));
  return ad::vcat(std::move(parts));
}

}  // namespace

template <typename Scalar>
ad::Var<Scalar> MotionModel<Scalar>::Graph::to_canonical(ad::Var<Scalar> x, ad::Var<Scalar> psi) {
  ad::Var<Scalar> y = x;
  for (int l = 0; l < static_cast<int>(couplings_.size()); ++l) {
    const auto [log_scale, shift] = conditioner(l, y, psi);
    const int c = transformed_coordinate(l);
    const auto moved = ad::add(ad::cmul(ad::rows(y, c, 1), ad::exp(log_scale)), shift);
    y = replace_row(y, c, moved);
  }
  return y;
}

template <typename Scalar>
ad::Var<Scalar> MotionModel<Scalar>::Graph::from_canonical(ad::Var<Scalar> u, ad::Var<Scalar> psi) {
  ad::Var<Scalar> x = u;
  for (int l = static_cast<int>(couplings_.size()) - 1; l >= 0; --l) {
    const auto [log_scale, shift] = conditioner(l, x, psi);
    const int c = transformed_coordinate(l);
    const auto restored = ad::cmul(ad::sub(ad::rows(x, c, 1), shift), ad::exp(ad::scale(log_scale, Scalar(-1))));
    x = replace_row(x, c, restored);
  }
  return x;
}

template <typename Scalar>
std::pair<ad::Var<Scalar>, ad::Var<Scalar>> MotionModel<Scalar>::Graph::query(ad::Var<Scalar> u) {
  const auto encoded = ad::positional_encoding(u, model_->config_.encoding_octaves);
  const auto out = mlp(canonical_, encoded);
  return {ad::softplus(ad::rows(out, 0, 1)), ad::sigmoid(ad::rows(out, 1, 3))};
}

namespace {

template <typename Scalar>
void require_finite(const Matrix<Scalar>& m, const char* what) {
  if (!m.allFinite()) throw ValidationError(std::string("non-finite input to ") + what);
}

}  // namespace

template <typename Scalar>
Matrix<Scalar> MotionModel<Scalar>::map_to_canonical(const Matrix<Scalar>& x, int frame) const {
  require_finite(x, "map_to_canonical");
  ad::Tape<Scalar> tape;
  Graph g(tape, *this);
  const auto psi = g.latents_for(std::vector<int>(static_cast<std::size_t>(x.cols()), frame));
  return g.to_canonical(tape.constant(x), psi).value();
}

template <typename Scalar>
Matrix<Scalar> MotionModel<Scalar>::map_from_canonical(const Matrix<Scalar>& u, int frame) const {
  require_finite(u, "map_from_canonical");
  ad::Tape<Scalar> tape;
  Graph g(tape, *this);
  const auto psi = g.latents_for(std::vector<int>(static_cast<std::size_t>(u.cols()), frame));
  return g.from_canonical(tape.constant(u), psi).value();
}

template <typename Scalar>
Vec3<Scalar> MotionModel<Scalar>::map_to_canonical(const Vec3<Scalar>& x, int frame) const {
  return map_to_canonical(Matrix<Scalar>(x), frame).col(0);
}

template <typename Scalar>
Vec3<Scalar> MotionModel<Scalar>::map_from_canonical(const Vec3<Scalar>& u, int frame) const {
  return map_from_canonical(Matrix<Scalar>(u), frame).col(0);
}

template <typename Scalar>
Vec3<Scalar> MotionModel<Scalar>::map_between(const Vec3<Scalar>& x, int src, int dst) const {
  return map_from_canonical(map_to_canonical(x, src), dst);
}

template <typename Scalar>
std::pair<Scalar, Vec3<Scalar>> MotionModel<Scalar>::query_canonical(const Vec3<Scalar>& u) const {
  require_finite(Matrix<Scalar>(u), "query_canonical");
  ad::Tape<Scalar> tape;
  Graph g(tape, *this);
  const auto [sigma, color] = g.query(tape.constant(Matrix<Scalar>(u)));
  return {sigma.value()(0, 0), color.value().col(0)};
}

template <typename Scalar>
void save_checkpoint(const MotionModel<Scalar>& model, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + file.string() + "'");
  const ModelConfig& c = model.config();
  out.write("SMCK", 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(sizeof(Scalar)));
  for (int v : {c.num_frames, c.coupling_layers, c.conditioner_hidden, c.conditioner_depth, c.latent_dim,
                c.canonical_hidden, c.canonical_depth, c.encoding_octaves})
    put_u32(out, static_cast<std::uint32_t>(v));
  put_f64(out, c.max_log_scale);
  const auto& values = model.params().values();
  put_u64(out, static_cast<std::uint64_t>(values.size()));
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if constexpr (sizeof(Scalar) == 4) {
      put_f32(out, values[i]);
    } else {
      put_f64(out, values[i]);
    }
  }
  if (!out) throw IoError("write failed for checkpoint '" + file.string() + "'");
}

template <typename Scalar>
MotionModel<Scalar> load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + file.string() + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SMCK", 4) != 0) throw ValidationError("'" + file.string() + "' is not a checkpoint");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kCheckpointVersion)
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t width = get_u32(in, "scalar width");
  if (width != 4 && width != 8) throw ValidationError("checkpoint scalar width must be 4 or 8, got " + std::to_string(width));
  ModelConfig c;
  c.num_frames = static_cast<int>(get_u32(in, "num_frames"));
  c.coupling_layers = static_cast<int>(get_u32(in, "coupling_layers"));
  c.conditioner_hidden = static_cast<int>(get_u32(in, "conditioner_hidden"));
  c.conditioner_depth = static_cast<int>(get_u32(in, "conditioner_depth"));
  c.latent_dim = static_cast<int>(get_u32(in, "latent_dim"));
  c.canonical_hidden = static_cast<int>(get_u32(in, "canonical_hidden"));
  c.canonical_depth = static_cast<int>(get_u32(in, "canonical_depth"));
  c.encoding_octaves = static_cast<int>(get_u32(in, "encoding_octaves"));
  c.max_log_scale = get_f64(in, "max_log_scale");
  MotionModel<Scalar> model(c);
  const std::uint64_t count = get_u64(in, "parameter count");
  if (count != static_cast<std::uint64_t>(model.params().size())) {
    throw ValidationError("checkpoint holds " + std::to_string(count) + " parameters, architecture needs " +
                          std::to_string(model.params().size()));
  }
  auto& values = model.params().values();
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    values[i] = width == 4 ? static_cast<Scalar>(get_f32(in, "parameters"))
                           : static_cast<Scalar>(get_f64(in, "parameters"));
  }
  if (!values.allFinite()) throw ValidationError("checkpoint contains non-finite parameters");
  in.peek();
  if (!in.eof()) throw ValidationError("trailing bytes after checkpoint parameters");
  return model;
}

template class MotionModel<float>;
template class MotionModel<double>;
template void save_checkpoint(const MotionModel<float>&, const std::filesystem::path&);
template void save_checkpoint(const MotionModel<double>&, const std::filesystem::path&);
template MotionModel<float> load_checkpoint(const std::filesystem::path&);
template MotionModel<double> load_checkpoint(const std::filesystem::path&);

}  // namespace surgmotion
