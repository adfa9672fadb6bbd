#include "surgmotion/trainer.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

namespace surgmotion {

namespace {

std::uint64_t batch_seed(std::uint64_t seed, long iteration) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(iteration >> 32), 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

std::mt19937_64 iteration_rng(std::uint64_t seed, long iteration) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(iteration >> 32), 0xca57u};
  return std::mt19937_64(seq);
}

std::string block_of(Eigen::Index index, const std::vector<ParamBlock>& blocks) {
  for (const auto& b : blocks)
    if (index >= b.offset && index < b.offset + b.size()) return b.name;
  return "#" + std::to_string(index);
}

void check_report(const LossReport& r, long iteration) {
  const std::pair<const char*, double> terms[] = {
      {"flow", r.flow}, {"rgb", r.rgb}, {"mask", r.mask}, {"arap", r.arap}, {"long-term", r.long_term}, {"total", r.total}};
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value))
      throw NumericalError(fmt::format("non-finite {} loss ({}) at iteration {}", name, value, iteration));
  }
}

std::ofstream open_log(const std::filesystem::path& file, const std::string& header) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw IoError("cannot write '" + file.string() + "'");
  out << header << '\n';
  return out;
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::f32 ? "float32" : "float64"; }

Precision parse_precision(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "float32" || t == "f32" || t == "float" || t == "single") return Precision::f32;
  if (t == "float64" || t == "f64" || t == "double") return Precision::f64;
  throw ValidationError("unknown precision '" + text + "' (expected float32 or float64)");
}

void AdamSettings::validate() const {
  if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ValidationError("Adam betas must be in [0, 1)");
  if (!(eps > 0)) throw ValidationError("Adam eps must be positive");
}

void TrainConfig::validate() const {
  if (iterations <= 0) throw ValidationError("iterations must be > 0, got " + std::to_string(iterations));
  adam.validate();
  quotas.validate();
  weights.validate();
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
  if (samples < 1 || eval_samples < 1) throw ValidationError("samples per ray must be >= 1");
  if (!(visibility_threshold >= 0 && visibility_threshold <= 1))
    throw ValidationError("visibility_threshold must be in [0, 1]");
  if (!(soft_mask.softness > 0) || !(soft_mask.band > 0)) throw ValidationError("soft mask softness and band must be positive");
  model.validate();
  supervision.validate();
}

template <typename Scalar>
void adam_step(Vector<Scalar>& params, const Vector<Scalar>& grads, AdamState<Scalar>& state,
               const AdamSettings& settings, const std::vector<ParamBlock>& blocks) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ValidationError(fmt::format("adam_step: {} parameters, {} gradients, {} moments", params.size(), grads.size(),
                                      state.m.size()));
  }
  for (Eigen::Index i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i]))
      throw NumericalError(fmt::format("non-finite gradient {} in parameter block {}", grads[i], block_of(i, blocks)));
  }
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(settings.beta1);
  const Scalar b2 = static_cast<Scalar>(settings.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(settings.beta1, static_cast<double>(state.step)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(settings.beta2, static_cast<double>(state.step)));
  const Scalar lr = static_cast<Scalar>(settings.learning_rate);
  const Scalar eps = static_cast<Scalar>(settings.eps);
  state.m = b1 * state.m + (Scalar(1) - b1) * grads;
  state.v = b2 * state.v + (Scalar(1) - b2) * grads.cwiseProduct(grads);
  params.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + eps);
}

std::string loss_csv_header() { return "iteration,flow,rgb,mask,arap,long,total"; }
std::string weights_csv_header() { return "iteration,flow,rgb,mask,arap,long"; }

std::string loss_csv_row(const LossRecord& r) {
  const auto& p = r.report;
  return fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}", r.iteration, p.flow, p.rgb, p.mask, p.arap,
                     p.long_term, p.total);
}

std::string weights_csv_row(const LossRecord& r) {
  const auto& w = r.report.weights;
  return fmt::format("{},{},{},{},{},{}", r.iteration, w.flow, w.rgb, w.mask, w.arap, w.long_term);
}

RenderSettings eval_settings(const TrainConfig& config, int width, int height) {
  RenderSettings s;
  s.width = width;
  s.height = height;
  s.samples = config.eval_samples;
  s.mode = SampleMode::eval;
  s.visibility_threshold = config.visibility_threshold;
  return s;
}

template <typename Scalar>
TrainState<Scalar> train(MotionModel<Scalar>& model, const VideoSequence& seq, const SupervisionStore& store,
                         const TrainConfig& config, const TrainOutputs& outputs, const ProgressCallback& progress) {
  config.validate();
  seq.validate();
  if (store.empty()) throw ValidationError("supervision store is empty");
  if (model.config().num_frames != static_cast<int>(seq.frames.size())) {
    throw ValidationError(fmt::format("model has {} frames, sequence has {}", model.config().num_frames,
                                      seq.frames.size()));
  }
  if (store.width() != seq.width || store.height() != seq.height)
    throw ValidationError("supervision and sequence resolutions differ");

  const LossContext ctx(seq, config.soft_mask);
  if (!ctx.has_masks() && (config.weights.use_mask || config.weights.use_arap))
    spdlog::warn("no instrument masks: mask and ARAP losses contribute nothing");

  RenderSettings settings = eval_settings(config, seq.width, seq.height);
  settings.mode = SampleMode::train;
  settings.samples = config.samples;

  std::ofstream loss_log;
  std::ofstream weight_log;
  if (!outputs.loss_csv.empty()) loss_log = open_log(outputs.loss_csv, loss_csv_header());
  if (!outputs.weights_csv.empty()) weight_log = open_log(outputs.weights_csv, weights_csv_header());

  TrainState<Scalar> state;
  state.adam = AdamState<Scalar>(model.params().size());
  state.history.reserve(static_cast<std::size_t>(config.iterations));
  auto& params = model.params();

  for (long it = 0; it < config.iterations; ++it) {
    const TrainingBatch batch = sample_batch(store, batch_seed(config.seed, it), config.quotas);
    std::mt19937_64 rng = iteration_rng(config.seed, it);

    ad::Tape<Scalar> tape;
    typename MotionModel<Scalar>::Graph graph(tape, model);
    const Objective<Scalar> objective =
        total_loss<Scalar>(graph, batch, ctx, config.weights, it, settings, batch_seed(config.seed ^ 0xa5a5u, it), &rng);
    check_report(objective.report, it);

    params.zero_grads();
    tape.backward(objective.total);
    adam_step(params.values(), params.grads(), state.adam, config.adam, params.blocks());

    LossRecord record{it, objective.report};
    if (loss_log.is_open()) loss_log << loss_csv_row(record) << '\n';
    if (weight_log.is_open()) weight_log << weights_csv_row(record) << '\n';
    state.history.push_back(record);
    state.iteration = it + 1;
    if (progress) progress(record);

    if (!outputs.checkpoint_dir.empty() && config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 &&
        it + 1 < config.iterations) {
      save_checkpoint(model, outputs.checkpoint_dir / fmt::format("iter_{:07d}.smck", it + 1));
    }
  }
  if (!outputs.checkpoint_dir.empty()) save_checkpoint(model, outputs.checkpoint_dir / "final.smck");
  if (loss_log.is_open() && !loss_log.flush()) throw IoError("failed writing " + outputs.loss_csv.string());
  if (weight_log.is_open() && !weight_log.flush()) throw IoError("failed writing " + outputs.weights_csv.string());
  return state;
}

template <typename Scalar>
TrajectorySet export_trajectories(const MotionModel<Scalar>& model, const QuerySpec& queries,
                                  const TrajectorySet& layout, const RenderSettings& settings) {
  const int frames = model.config().num_frames;
  if (layout.num_frames != frames)
    throw ValidationError(fmt::format("trajectory layout has {} frames, model has {}", layout.num_frames, frames));
  validate_queries(queries, settings.width, settings.height, frames);

  TrajectorySet out;
  out.video = layout.video;
  out.width = settings.width;
  out.height = settings.height;
  out.num_frames = frames;
  for (const auto& p : layout.points) {
    TrackPoint t;
    t.id = p.id;
    t.category = p.category;
    t.instrument_id = p.instrument_id;
    t.positions.assign(static_cast<std::size_t>(frames), std::nullopt);
    t.visibility.assign(static_cast<std::size_t>(frames), Visibility::occluded);
    out.points.push_back(std::move(t));
  }
  for (const auto& q : queries) {
    auto it = std::find_if(out.points.begin(), out.points.end(), [&](const TrackPoint& t) { return t.id == q.point_id; });
    if (it == out.points.end()) throw ValidationError(fmt::format("query names unknown point id {}", q.point_id));
    std::vector<RayQuery> rays;
    for (int f = 0; f < frames; ++f) rays.push_back({q.frame, f, q.position});
    const auto predictions = predict_batch(model, rays, settings);
    for (int f = 0; f < frames; ++f) {
      const auto& p = predictions[static_cast<std::size_t>(f)];
      if (p.degenerate) continue;  // occluded, no position
      const Eigen::Vector2d xy = p.pixel.template cast<double>();
      if (!(xy.x() >= 0 && xy.y() >= 0 && xy.x() < settings.width && xy.y() < settings.height)) {
        it->visibility[f] = Visibility::out_of_view;
        continue;
      }
      it->positions[f] = xy;
      it->visibility[f] = p.visible ? Visibility::visible : Visibility::occluded;
    }
  }
  out.validate();
  return out;
}

#define SURGMOTION_INSTANTIATE(S)                                                                               \
  template void adam_step(Vector<S>&, const Vector<S>&, AdamState<S>&, const AdamSettings&,                    \
                          const std::vector<ParamBlock>&);                                                      \
  template TrainState<S> train(MotionModel<S>&, const VideoSequence&, const SupervisionStore&, const TrainConfig&, \
                               const TrainOutputs&, const ProgressCallback&);                                   \
  template TrajectorySet export_trajectories(const MotionModel<S>&, const QuerySpec&, const TrajectorySet&,     \
                                             const RenderSettings&);

SURGMOTION_INSTANTIATE(float)
SURGMOTION_INSTANTIATE(double)

#undef SURGMOTION_INSTANTIATE

}  // namespace surgmotion
