#include "surgmotion/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <malloc.h>

#include <fstream>

namespace surgmotion {

namespace fs = std::filesystem;

VideoData load_video(const fs::path& dir) {
  VideoData data;
  data.sequence = load_sequence(dir);
  if (fs::is_directory(dir / "flow")) data.flows = load_flows(dir);
  if (fs::is_directory(dir / "matches")) data.matches = load_matches(dir);
  if (fs::exists(dir / "gt.json")) data.ground_truth = load_trajectories(dir / "gt.json");
  spdlog::info("loaded '{}': {} frames {}x{}, {} flows, {} match sets{}", dir.string(), data.sequence.num_frames(),
               data.sequence.width, data.sequence.height, data.flows.size(), data.matches.size(),
               data.sequence.has_masks() ? ", masks" : "");
  return data;
}

SupervisionStore prepare_supervision(const VideoData& data, const SupervisionConfig& config, bool prefiltered) {
  const std::vector<FlowField> flows = prefiltered ? data.flows : filter_flows(data.sequence, data.flows, config);
  SupervisionStore store = build_store(data.sequence, flows, data.matches, config);
  spdlog::info("supervision: {} flow and {} match correspondences over {} frame pairs", store.flow_count(),
               store.match_count(), store.pair_list().size());
  return store;
}

namespace {

template <typename Scalar>
TrainRun train_as(const VideoData& data, const SupervisionStore& store, const fs::path& out_dir,
                  const TrainConfig& config) {
  ModelConfig mc = config.model;
  mc.num_frames = data.sequence.num_frames();
  MotionModel<Scalar> model(mc);
  TrainOutputs outputs{out_dir / "losses.csv", out_dir / "weights.csv", out_dir / "checkpoints"};
  const long every = std::max(1L, config.iterations / 20);
  TrainRun run;
  train(model, data.sequence, store, config, outputs, [&](const LossRecord& r) {
    run.last = r;
    if (r.iteration % every == 0 || r.iteration + 1 == config.iterations)
      spdlog::info("iter {:>7}  {}", r.iteration, loss_csv_row(r));
  });
  run.checkpoint = out_dir / "checkpoints" / "final.smck";
  if (data.ground_truth) {
    const RenderSettings settings = eval_settings(config, data.sequence.width, data.sequence.height);
    const TrajectorySet pred =
        export_trajectories(model, queries_from(*data.ground_truth), *data.ground_truth, settings);
    run.prediction = out_dir / "pred.json";
    save_trajectories(pred, *run.prediction);
  }
  return run;
}

}  // namespace

TrainRun train_video(const fs::path& data_dir, const fs::path& out_dir, const TrainConfig& config,
                     const std::optional<fs::path>& flow_dir) {
  config.validate();
  VideoData data = load_video(data_dir);
  if (flow_dir) {
    data.flows = load_flows(*flow_dir);
    spdlog::info("using {} prefiltered flows from '{}'", data.flows.size(), flow_dir->string());
  }
  const SupervisionStore store = prepare_supervision(data, config.supervision, flow_dir.has_value());
  fs::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "config.toml");
    if (!cfg) throw IoError("cannot write " + (out_dir / "config.toml").string());
    cfg << "# resolved configuration for " << data_dir.string() << "\n" << train_config_to_toml(config);
  }
  TrainRun run = config.precision == Precision::f64 ? train_as<double>(data, store, out_dir, config)
                                                    : train_as<float>(data, store, out_dir, config);
  return run;
}

TrajectorySet track_video(const fs::path& checkpoint, Precision precision, const QuerySpec& queries,
                          const TrajectorySet& layout, const RenderSettings& settings) {
  if (precision == Precision::f64)
    return export_trajectories(load_checkpoint<double>(checkpoint), queries, layout, settings);
  return export_trajectories(load_checkpoint<float>(checkpoint), queries, layout, settings);
}

Precision checkpoint_precision(const fs::path& checkpoint) {
  std::ifstream in(checkpoint, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + checkpoint.string() + "'");
  unsigned char header[12] = {};
  if (!in.read(reinterpret_cast<char*>(header), sizeof header) || std::string(header, header + 4) != "SMCK")
    throw ValidationError("'" + checkpoint.string() + "' is not a checkpoint");
  const std::uint32_t width = header[8] | header[9] << 8 | header[10] << 16 | static_cast<std::uint32_t>(header[11]) << 24;
  if (width == 4) return Precision::f32;
  if (width == 8) return Precision::f64;
  throw ValidationError("checkpoint '" + checkpoint.string() + "' has unsupported scalar width " + std::to_string(width));
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace surgmotion
