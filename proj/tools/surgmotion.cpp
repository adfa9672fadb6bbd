#include "surgmotion/config.hpp"
#include "surgmotion/evaluator.hpp"
#include "surgmotion/pipeline.hpp"
#include "surgmotion/synthgen.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace surgmotion;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kFailure = 2;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("surgmotion");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("SURGMOTION_LOG")) {
    const auto parsed = spdlog::level::from_str(level);
    if (parsed == spdlog::level::off && std::string_view(level) != "off")
      throw ValidationError(fmt::format("SURGMOTION_LOG: unknown level '{}'", level));
    spdlog::set_level(parsed);
  }
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out || !(out << text)) throw IoError("cannot write '" + file.string() + "'");
}

/// Refuses outputs that would land inside a source directory.
void guard_output(const fs::path& out, const fs::path& source) {
  const auto a = fs::weakly_canonical(out);
  const auto b = fs::weakly_canonical(source);
  if (a == b) throw ValidationError(fmt::format("output '{}' would overwrite the input directory", out.string()));
}

template <typename T>
void set_if(const std::optional<T>& value, T& target) {
  if (value) target = *value;
}

// ---------------------------------------------------------------- synth

struct SynthOptions {
  std::string spec = "default";
  fs::path out;
  std::optional<std::uint64_t> seed;
  CorruptionSpec corruption;
};

void add_synth(CLI::App& app, SynthOptions& o) {
  auto* c = app.add_subcommand("synth", "Generate a synthetic video with exact ground truth");
  c->add_option("--spec", o.spec, "Preset name (default, static, occluded) or scene JSON file")->capture_default_str();
  c->add_option("--out", o.out, "Output dataset directory")->required();
  c->add_option("--seed", o.seed, "Scene and corruption seed (overrides the scene's seed)");
  c->add_option("--flow-noise", o.corruption.flow_noise, "Gaussian flow noise sigma, px")->capture_default_str();
  c->add_option("--flow-outliers", o.corruption.flow_outliers, "Fraction of flow pixels replaced by outliers")
      ->capture_default_str();
  c->add_option("--outlier-magnitude", o.corruption.outlier_magnitude, "Outlier offset length m, drawn in [m, 1.5m] px")
      ->capture_default_str();
  c->add_option("--corrupt-min-offset", o.corruption.min_offset, "Only corrupt flows spanning at least this many frames")
      ->capture_default_str();
  c->add_flag("--forward-only", o.corruption.forward_only, "Only corrupt forward flows");
  c->add_option("--match-noise", o.corruption.match_noise, "Gaussian match noise sigma, px")->capture_default_str();
  c->add_option("--match-outliers", o.corruption.match_outliers, "Fraction of matches replaced by outliers")
      ->capture_default_str();
}

int run_synth(const SynthOptions& o) {
  SceneSpec spec;
  if (fs::is_regular_file(o.spec)) {
    std::ifstream in(o.spec);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("scene '{}': {}", o.spec, e.what()));
    }
    spec = scene_from_json(j);
  } else {
    spec = preset_scene(o.spec);
  }
  if (o.seed) spec.seed = *o.seed;
  CorruptionSpec corruption = o.corruption;
  corruption.seed = spec.seed + 1;
  spec.validate();
  corruption.validate();

  nlohmann::json resolved{{"scene", to_json(spec)},
                          {"corruption",
                           {{"flow_noise", corruption.flow_noise},
                            {"flow_outliers", corruption.flow_outliers},
                            {"outlier_magnitude", corruption.outlier_magnitude},
                            {"min_offset", corruption.min_offset},
                            {"forward_only", corruption.forward_only},
                            {"match_noise", corruption.match_noise},
                            {"match_outliers", corruption.match_outliers},
                            {"seed", corruption.seed}}}};
  std::cout << resolved.dump(2) << '\n';

  SynthData data = generate(spec);
  corrupt_supervision(data.flows, data.matches, corruption);
  write_dataset(o.out, data, spec);
  write_text(o.out / "synth_options.json", resolved.dump(2) + "\n");
  spdlog::info("wrote '{}': {} frames, {} tracks, {} flows, {} match sets", o.out.string(), data.sequence.num_frames(),
               data.ground_truth.points.size(), data.flows.size(), data.matches.size());
  return kOk;
}

// ---------------------------------------------------------------- filter

struct FilterOptions {
  fs::path data;
  fs::path out;
  std::optional<fs::path> config;
  std::optional<double> cycle_tau;
  std::optional<double> rgb_tau;
  bool no_cycle = false;
  bool no_appearance = false;
};

void add_filter(CLI::App& app, FilterOptions& o) {
  auto* c = app.add_subcommand("filter", "Filter a dataset's optical flows (cycle and appearance checks)");
  c->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  c->add_option("--out", o.out, "Output directory; filtered flows go to <out>/flow")->required();
  c->add_option("--config", o.config, "TOML config ([supervision] keys are used)")->check(CLI::ExistingFile);
  c->add_option("--cycle-tau", o.cycle_tau, "Cycle consistency threshold, px");
  c->add_option("--rgb-tau", o.rgb_tau, "Appearance threshold on mean RGB difference in [0,1]");
  c->add_flag("--no-cycle", o.no_cycle, "Disable the cycle consistency check");
  c->add_flag("--no-appearance", o.no_appearance, "Disable the appearance check");
}

int run_filter(const FilterOptions& o) {
  guard_output(o.out, o.data);
  TrainConfig config = o.config ? load_train_config(*o.config) : TrainConfig{};
  SupervisionConfig& s = config.supervision;
  set_if(o.cycle_tau, s.cycle_tau);
  set_if(o.rgb_tau, s.rgb_tau);
  if (o.no_cycle) s.cycle_filter = false;
  if (o.no_appearance) s.appearance_filter = false;
  s.validate();
  std::cout << fmt::format("data = \"{}\"\nout = \"{}\"\n[supervision]\ncycle_filter = {}\ncycle_tau = {}\n"
                           "appearance_filter = {}\nrgb_tau = {}\n",
                           o.data.string(), o.out.string(), s.cycle_filter, s.cycle_tau, s.appearance_filter,
                           s.rgb_tau);

  const VideoData data = load_video(o.data);
  if (data.flows.empty()) throw ValidationError(fmt::format("'{}' has no flow/ directory", o.data.string()));
  const std::vector<FlowField> filtered = filter_flows(data.sequence, data.flows, s);
  Eigen::Index before = 0, after = 0;
  for (const auto& f : data.flows) before += f.valid_count();
  for (const auto& f : filtered) after += f.valid_count();
  save_flows(o.out, filtered, true);
  spdlog::info("kept {} of {} flow vectors ({:.1f}%) in {} fields", after, before,
               before ? 100.0 * static_cast<double>(after) / static_cast<double>(before) : 0.0, filtered.size());
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  std::vector<fs::path> data;
  fs::path out = "runs";
  std::optional<fs::path> config;
  std::optional<fs::path> flow_dir;
  std::optional<long> iterations;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<long> boundary;
  std::optional<std::string> precision;
  std::optional<long> checkpoint_every;
  std::optional<int> samples;
  std::optional<int> eval_samples;
  bool no_flow = false, no_rgb = false, no_mask = false, no_arap = false, no_long = false;
  int jobs = 1;
};

void add_train(CLI::App& app, TrainOptions& o) {
  auto* c = app.add_subcommand("train", "Optimize the motion model on one or more videos");
  c->add_option("--data", o.data, "Dataset directory (repeatable)")->required()->check(CLI::ExistingDirectory);
  c->add_option("--out", o.out, "Output directory; with several videos, one subdirectory per video")
      ->capture_default_str();
  c->add_option("--config", o.config, "TOML config file; flags override it")->check(CLI::ExistingFile);
  c->add_option("--flow-dir", o.flow_dir, "Directory whose flow/ holds prefiltered flows (skips filtering)")
      ->check(CLI::ExistingDirectory);
  c->add_option("--iters", o.iterations, "Optimization steps");
  c->add_option("--lr", o.lr, "Adam learning rate");
  c->add_option("--seed", o.seed, "Seed for initialization and batch sampling");
  c->add_option("--boundary", o.boundary, "Iteration at which the mask and ARAP terms switch on");
  c->add_option("--precision", o.precision, "float32 or float64");
  c->add_option("--checkpoint-every", o.checkpoint_every, "Save an intermediate checkpoint every N steps (0: off)");
  c->add_option("--samples", o.samples, "Samples per ray while training");
  c->add_option("--eval-samples", o.eval_samples, "Samples per ray when exporting trajectories");
  c->add_flag("--no-flow", o.no_flow, "Disable the flow term");
  c->add_flag("--no-rgb", o.no_rgb, "Disable the photometric term");
  c->add_flag("--no-mask", o.no_mask, "Disable the instrument mask term");
  c->add_flag("--no-arap", o.no_arap, "Disable the rigidity term");
  c->add_flag("--no-long-term", o.no_long, "Disable the long-term match term");
  c->add_option("--jobs", o.jobs, "Videos trained in parallel worker processes")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

TrainConfig resolve_train_config(const TrainOptions& o) {
  TrainConfig c = o.config ? load_train_config(*o.config) : TrainConfig{};
  set_if(o.iterations, c.iterations);
  set_if(o.lr, c.adam.learning_rate);
  set_if(o.seed, c.seed);
  set_if(o.boundary, c.weights.schedule_boundary);
  if (o.precision) c.precision = parse_precision(*o.precision);
  set_if(o.checkpoint_every, c.checkpoint_every);
  set_if(o.samples, c.samples);
  set_if(o.eval_samples, c.eval_samples);
  if (o.seed) c.model.seed = *o.seed;
  if (o.no_flow) c.weights.use_flow = false;
  if (o.no_rgb) c.weights.use_rgb = false;
  if (o.no_mask) c.weights.use_mask = false;
  if (o.no_arap) c.weights.use_arap = false;
  if (o.no_long) c.weights.use_long_term = false;
  c.validate();
  return c;
}

int train_one(const fs::path& data, const fs::path& out, const TrainConfig& config,
              const std::optional<fs::path>& flow_dir) {
  const TrainRun run = train_video(data, out, config, flow_dir);
  spdlog::info("'{}': final loss {:.6g}, checkpoint '{}'", data.string(), run.last.report.total,
               run.checkpoint.string());
  if (run.prediction) {
    const MetricsReport report = build_report(load_trajectories(data / "gt.json"),
                                              load_trajectories(*run.prediction), "surgmotion");
    write_text(out / "report.json", to_json(report).dump(2) + "\n");
    std::cout << report_table({report});
  }
  return kOk;
}

int exit_code_for(const std::exception_ptr& error);

int run_train(const TrainOptions& o) {
  const TrainConfig config = resolve_train_config(o);
  std::cout << train_config_to_toml(config);
  std::vector<fs::path> outs;
  for (const auto& d : o.data) {
    outs.push_back(o.data.size() == 1 ? o.out : o.out / fs::path(d).filename());
    if (outs.back().filename().empty()) outs.back() = o.out / fs::path(d).parent_path().filename();
    guard_output(outs.back(), d);
  }
  if (o.jobs <= 1 || o.data.size() == 1) {
    for (std::size_t i = 0; i < o.data.size(); ++i) train_one(o.data[i], outs[i], config, o.flow_dir);
    return kOk;
  }

  // Worker processes, at most `jobs` alive at once.
  std::cout.flush();
  int worst = kOk;
  std::size_t next = 0;
  int running = 0;
  auto reap = [&] {
    int status = 0;
    if (::wait(&status) < 0) throw std::runtime_error("wait() failed");
    --running;
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kFailure;
    worst = std::max(worst, code);
  };
  while (next < o.data.size() || running > 0) {
    if (next < o.data.size() && running < o.jobs) {
      const pid_t pid = ::fork();
      if (pid < 0) throw std::runtime_error("fork() failed");
      if (pid == 0) {
        int code = kOk;
        try {
          code = train_one(o.data[next], outs[next], config, o.flow_dir);
        } catch (...) {
          code = exit_code_for(std::current_exception());
        }
        std::cout.flush();
        std::_Exit(code);
      }
      ++next;
      ++running;
    } else {
      reap();
    }
  }
  return worst;
}

// ---------------------------------------------------------------- track

struct TrackOptions {
  fs::path checkpoint;
  std::optional<fs::path> data;
  std::optional<fs::path> gt;
  std::optional<fs::path> queries;
  fs::path out;
  std::optional<std::string> precision;
  int samples = 32;
  double visibility_threshold = 0.5;
};

void add_track(CLI::App& app, TrackOptions& o) {
  auto* c = app.add_subcommand("track", "Export trajectories for query points from a trained checkpoint");
  c->add_option("--checkpoint", o.checkpoint, "Checkpoint file (.smck)")->required()->check(CLI::ExistingFile);
  c->add_option("--data", o.data, "Dataset directory (frame size, and gt.json as default layout)")
      ->check(CLI::ExistingDirectory);
  c->add_option("--gt", o.gt, "Trajectory JSON giving point ids, categories and frame size")->check(CLI::ExistingFile);
  c->add_option("--queries", o.queries, "Query JSON; default: first visible frame of each --gt point")
      ->check(CLI::ExistingFile);
  c->add_option("--out", o.out, "Output trajectory JSON")->required();
  c->add_option("--precision", o.precision, "float32 or float64 (default: from the checkpoint)");
  c->add_option("--samples", o.samples, "Samples per ray")->check(CLI::PositiveNumber)->capture_default_str();
  c->add_option("--visibility-threshold", o.visibility_threshold, "Opacity above which a point is visible")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
}

int run_track(const TrackOptions& o) {
  std::optional<fs::path> gt = o.gt;
  if (!gt && o.data && fs::exists(*o.data / "gt.json")) gt = *o.data / "gt.json";
  if (!gt && !o.data) throw ValidationError("track needs --gt or --data");
  if (!gt && !o.queries) throw ValidationError("track needs --queries when no ground truth is available");

  TrajectorySet layout;
  if (gt) {
    layout = load_trajectories(*gt);
  } else {
    const VideoSequence seq = load_sequence(*o.data);
    layout.video = seq.name;
    layout.width = seq.width;
    layout.height = seq.height;
    layout.num_frames = seq.num_frames();
  }
  const QuerySpec queries = o.queries ? load_queries(*o.queries) : queries_from(layout);
  if (!gt) {
    for (const auto& q : queries) {
      TrackPoint p;
      p.id = q.point_id;
      p.positions.assign(static_cast<std::size_t>(layout.num_frames), std::nullopt);
      p.visibility.assign(static_cast<std::size_t>(layout.num_frames), Visibility::occluded);
      layout.points.push_back(std::move(p));
    }
  }
  const Precision precision = o.precision ? parse_precision(*o.precision) : checkpoint_precision(o.checkpoint);

  RenderSettings settings;
  settings.width = layout.width;
  settings.height = layout.height;
  settings.samples = o.samples;
  settings.mode = SampleMode::eval;
  settings.visibility_threshold = o.visibility_threshold;
  std::cout << fmt::format(
      "checkpoint = \"{}\"\nlayout = \"{}\"\nqueries = {}\nout = \"{}\"\nprecision = \"{}\"\nsamples = {}\n"
      "visibility_threshold = {}\n",
      o.checkpoint.string(), gt ? gt->string() : o.data->string(), queries.size(), o.out.string(),
      to_string(precision), o.samples, o.visibility_threshold);

  const TrajectorySet pred = track_video(o.checkpoint, precision, queries, layout, settings);
  save_trajectories(pred, o.out);
  spdlog::info("wrote {} trajectories to '{}'", pred.points.size(), o.out.string());
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
  fs::path gt;
  fs::path pred;
  std::optional<fs::path> out;
  std::string method = "surgmotion";
  bool no_resize = false;
};

void add_eval(CLI::App& app, EvalOptions& o) {
  auto* c = app.add_subcommand("eval", "Score predicted trajectories against ground truth");
  c->add_option("--gt", o.gt, "Ground-truth trajectory JSON")->required()->check(CLI::ExistingFile);
  c->add_option("--pred", o.pred, "Predicted trajectory JSON")->required()->check(CLI::ExistingFile);
  c->add_option("--out", o.out, "Write the MetricsReport JSON here");
  c->add_option("--method", o.method, "Method name recorded in the report")->capture_default_str();
  c->add_flag("--no-resize", o.no_resize, "Score at native resolution instead of 256x256");
}

int run_eval(const EvalOptions& o) {
  std::cout << fmt::format("gt = \"{}\"\npred = \"{}\"\nmethod = \"{}\"\nresize = {}\n", o.gt.string(),
                           o.pred.string(), o.method, !o.no_resize);
  const MetricsReport report =
      build_report(load_trajectories(o.gt), load_trajectories(o.pred), o.method, !o.no_resize);
  if (o.out) write_text(*o.out, to_json(report).dump(2) + "\n");
  std::cout << report_table({report});
  return kOk;
}

// ---------------------------------------------------------------- report

struct ReportOptions {
  std::vector<fs::path> reports;
  std::string baseline = "tools-baseline";
  std::optional<fs::path> out;
};

void add_report(CLI::App& app, ReportOptions& o) {
  auto* c = app.add_subcommand("report", "Aggregate per-video reports into a benchmark table");
  c->add_option("--reports", o.reports, "MetricsReport JSON files")->required()->check(CLI::ExistingFile);
  c->add_option("--baseline", o.baseline, "Method whose tool accuracy defines the challenging subset")
      ->capture_default_str();
  c->add_option("--out", o.out, "Output prefix: writes <out>.txt, <out>.csv and <out>.json");
}

int run_report(const ReportOptions& o) {
  std::cout << fmt::format("reports = {}\nbaseline = \"{}\"\n", o.reports.size(), o.baseline);
  std::vector<MetricsReport> reports;
  for (const auto& file : o.reports) {
    std::ifstream in(file);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("'{}': {}", file.string(), e.what()));
    }
    reports.push_back(report_from_json(j));
  }
  const BenchmarkTable table = build_benchmark(reports, o.baseline);
  std::cout << table.to_text();
  if (o.out) {
    write_text(o.out->string() + ".txt", table.to_text());
    write_text(o.out->string() + ".csv", table.to_csv());
    write_text(o.out->string() + ".json", table.to_json().dump(2) + "\n");
  }
  return kOk;
}

int exit_code_for(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return kInvalid;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("malformed JSON: {}", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  } catch (...) {
    spdlog::error("unknown failure");
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  try {
    setup_logging();
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kInvalid;
  }

  CLI::App app{"Surgical video point tracking by test-time motion optimization"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "surgmotion 1.0.0");
  SynthOptions synth;
  FilterOptions filter;
  TrainOptions train;
  TrackOptions track;
  EvalOptions eval;
  ReportOptions report;
  add_synth(app, synth);
  add_filter(app, filter);
  add_train(app, train);
  add_track(app, track);
  add_eval(app, eval);
  add_report(app, report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "synth") return run_synth(synth);
    if (name == "filter") return run_filter(filter);
    if (name == "train") return run_train(train);
    if (name == "track") return run_track(track);
    if (name == "eval") return run_eval(eval);
    return run_report(report);
  } catch (...) {
    return exit_code_for(std::current_exception());
  }
}
