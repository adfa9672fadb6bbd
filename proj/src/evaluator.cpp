#include "surgmotion/evaluator.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace surgmotion {

namespace {

struct Tally {
  std::array<long, 5> within{};
  std::array<long, 5> tp{};
  std::array<long, 5> fp{};
  std::array<long, 5> fn{};
  long visible = 0;
  long scored = 0;
  long agree = 0;
  long points = 0;
};

std::optional<int> query_frame(const TrackPoint& p) {
  for (std::size_t f = 0; f < p.visibility.size(); ++f)
    if (p.visibility[f] == Visibility::visible) return static_cast<int>(f);
  return std::nullopt;
}

std::optional<double> ratio(long num, long den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::optional<double> mean_of(const std::array<std::optional<double>, 5>& values) {
  double sum = 0;
  for (const auto& v : values) {
    if (!v) return std::nullopt;
    sum += *v;
  }
  return sum / static_cast<double>(values.size());
}

Tally tally(const TrajectorySet& gt, const TrajectorySet& pred, std::optional<Category> category) {
  check_structure(gt, pred);
  Tally t;
  for (const auto& g : gt.points) {
    if (category && g.category != *category) continue;
    const TrackPoint& p = *pred.find(g.id);
    ++t.points;
    const std::optional<int> query = query_frame(g);
    for (int f = 0; f < gt.num_frames; ++f) {
      if (query && f == *query) continue;
      const bool gt_visible = g.visibility[f] == Visibility::visible;
      const bool pred_visible = p.visibility[f] == Visibility::visible;
      ++t.scored;
      if (gt_visible == pred_visible) ++t.agree;
      if (!gt_visible && !pred_visible) continue;
      double err = std::numeric_limits<double>::infinity();
      if (gt_visible && p.positions[f]) err = (*p.positions[f] - *g.positions[f]).norm();
      if (gt_visible) ++t.visible;
      for (std::size_t k = 0; k < kThresholds.size(); ++k) {
        const bool within = err < kThresholds[k];
        if (gt_visible && within) ++t.within[k];
        if (gt_visible && pred_visible && within) {
          ++t.tp[k];
          continue;
        }
        if (gt_visible) ++t.fn[k];
        if (pred_visible) ++t.fp[k];
      }
    }
  }
  return t;
}

CategoryMetrics metrics_of(const Tally& t) {
  CategoryMetrics m;
  m.points = t.points;
  m.visible_cells = t.visible;
  m.scored_cells = t.scored;
  m.tp = t.tp;
  m.fp = t.fp;
  m.fn = t.fn;
  for (std::size_t k = 0; k < kThresholds.size(); ++k) {
    m.delta_fraction[k] = ratio(t.within[k], t.visible);
    m.jaccard[k] = ratio(t.tp[k], t.tp[k] + t.fp[k] + t.fn[k]);
  }
  m.delta_avg = mean_of(m.delta_fraction);
  m.aj = mean_of(m.jaccard);
  m.oa = ratio(t.agree, t.scored);
  return m;
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

CategoryMetrics metrics_from_json(const nlohmann::json& j) {
  CategoryMetrics m;
  m.aj = opt_from(j.at("aj"));
  m.delta_avg = opt_from(j.at("delta_avg"));
  m.oa = opt_from(j.at("oa"));
  for (std::size_t k = 0; k < kThresholds.size(); ++k) {
    m.delta_fraction[k] = opt_from(j.at("delta_fraction").at(k));
    m.jaccard[k] = opt_from(j.at("jaccard").at(k));
    m.tp[k] = j.at("tp").at(k).get<long>();
    m.fp[k] = j.at("fp").at(k).get<long>();
    m.fn[k] = j.at("fn").at(k).get<long>();
  }
  m.points = j.at("points").get<long>();
  m.visible_cells = j.at("visible_cells").get<long>();
  m.scored_cells = j.at("scored_cells").get<long>();
  return m;
}

std::optional<double> average(const std::vector<std::optional<double>>& values) {
  double sum = 0;
  int n = 0;
  for (const auto& v : values) {
    if (!v) continue;
    sum += *v;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace

void check_structure(const TrajectorySet& gt, const TrajectorySet& pred) {
  gt.validate();
  pred.validate();
  if (gt.num_frames != pred.num_frames)
    throw ValidationError(fmt::format("frame count mismatch: ground truth has {}, prediction has {}", gt.num_frames,
                                      pred.num_frames));
  if (gt.width != pred.width || gt.height != pred.height)
    throw ValidationError(fmt::format("resolution mismatch: ground truth {}x{}, prediction {}x{}", gt.width, gt.height,
                                      pred.width, pred.height));
  for (const auto& g : gt.points) {
    if (pred.find(g.id) == nullptr) throw ValidationError(fmt::format("point id {} missing from prediction", g.id));
  }
  if (pred.points.size() != gt.points.size()) {
    for (const auto& p : pred.points)
      if (gt.find(p.id) == nullptr) throw ValidationError(fmt::format("prediction has unknown point id {}", p.id));
  }
}

DeltaResult delta_avg(const TrajectorySet& gt, const TrajectorySet& pred) {
  const CategoryMetrics m = metrics_of(tally(gt, pred, std::nullopt));
  return {m.delta_fraction, m.delta_avg};
}

std::optional<double> average_jaccard(const TrajectorySet& gt, const TrajectorySet& pred) {
  return metrics_of(tally(gt, pred, std::nullopt)).aj;
}

std::optional<double> occlusion_accuracy(const TrajectorySet& gt, const TrajectorySet& pred) {
  return metrics_of(tally(gt, pred, std::nullopt)).oa;
}

CategoryMetrics compute_metrics(const TrajectorySet& gt, const TrajectorySet& pred, std::optional<Category> category) {
  return metrics_of(tally(gt, pred, category));
}

MetricsReport build_report(const TrajectorySet& gt, const TrajectorySet& pred, const std::string& method, bool resize) {
  check_structure(gt, pred);
  const TrajectorySet g = resize ? resize_for_eval(gt, kEvalSize, kEvalSize) : gt;
  const TrajectorySet p = resize ? resize_for_eval(pred, kEvalSize, kEvalSize) : pred;
  MetricsReport r;
  r.video = gt.video;
  r.method = method;
  r.tools = compute_metrics(g, p, Category::tool);
  r.tissue = compute_metrics(g, p, Category::tissue);
  r.overall = compute_metrics(g, p, std::nullopt);
  return r;
}

nlohmann::json to_json(const CategoryMetrics& m) {
  nlohmann::json j;
  j["aj"] = opt(m.aj);
  j["delta_avg"] = opt(m.delta_avg);
  j["oa"] = opt(m.oa);
  j["thresholds"] = kThresholds;
  j["delta_fraction"] = nlohmann::json::array();
  j["jaccard"] = nlohmann::json::array();
  for (std::size_t k = 0; k < kThresholds.size(); ++k) {
    j["delta_fraction"].push_back(opt(m.delta_fraction[k]));
    j["jaccard"].push_back(opt(m.jaccard[k]));
  }
  j["tp"] = m.tp;
  j["fp"] = m.fp;
  j["fn"] = m.fn;
  j["points"] = m.points;
  j["visible_cells"] = m.visible_cells;
  j["scored_cells"] = m.scored_cells;
  return j;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"video", r.video},
          {"method", r.method},
          {"tools", to_json(r.tools)},
          {"tissue", to_json(r.tissue)},
          {"overall", to_json(r.overall)}};
}

MetricsReport report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.video = j.at("video").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.tools = metrics_from_json(j.at("tools"));
    r.tissue = metrics_from_json(j.at("tissue"));
    r.overall = metrics_from_json(j.at("overall"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed metrics report: ") + e.what());
  }
}

std::string format_percent(const std::optional<double>& ratio) {
  return ratio ? fmt::format("{:.1f}", 100.0 * *ratio) : "N/A";
}

std::string report_csv(const std::vector<MetricsReport>& reports) {
  std::string out = "video,method,category,aj,delta_avg,oa,d1,d2,d4,d8,d16\n";
  auto num = [](const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string("NA"); };
  for (const auto& r : reports) {
    const std::pair<const char*, const CategoryMetrics*> rows[] = {
        {"tools", &r.tools}, {"tissue", &r.tissue}, {"overall", &r.overall}};
    for (const auto& [name, m] : rows) {
      out += fmt::format("{},{},{},{},{},{}", r.video, r.method, name, num(m->aj), num(m->delta_avg), num(m->oa));
      for (const auto& d : m->delta_fraction) out += "," + num(d);
      out += '\n';
    }
  }
  return out;
}

namespace {

std::string render_table(const std::vector<std::array<std::string, 7>>& body) {
  const std::array<std::string, 7> header{"Method", "AJ", "<d-avg", "OA", "AJ", "<d-avg", "OA"};
  std::array<std::size_t, 7> width{};
  for (std::size_t c = 0; c < 7; ++c) {
    width[c] = header[c].size();
    for (const auto& row : body) width[c] = std::max(width[c], row[c].size());
  }
  const std::size_t tools_w = width[1] + width[2] + width[3] + 6;
  const std::size_t tissue_w = width[4] + width[5] + width[6] + 6;
  std::string out = fmt::format("{:<{}} | {:^{}} | {:^{}}\n", "", width[0], "Tools", tools_w, "Tissue", tissue_w);
  auto line = [&](const std::array<std::string, 7>& row) {
    std::string s = fmt::format("{:<{}}", row[0], width[0]);
    for (std::size_t c = 1; c < 7; ++c) s += fmt::format("{}{:>{}}", c == 1 || c == 4 ? " | " : "   ", row[c], width[c]);
    return s + '\n';
  };
  out += line(header);
  out += std::string(width[0] + tools_w + tissue_w + 6, '-') + '\n';
  for (const auto& row : body) out += line(row);
  return out;
}

}  // namespace

std::string report_table(const std::vector<MetricsReport>& reports) {
  std::vector<std::array<std::string, 7>> body;
  for (const auto& r : reports) {
    const std::string name = reports.size() > 1 && !r.video.empty() ? r.method + " (" + r.video + ")" : r.method;
    body.push_back({name, format_percent(r.tools.aj), format_percent(r.tools.delta_avg), format_percent(r.tools.oa),
                    format_percent(r.tissue.aj), format_percent(r.tissue.delta_avg), format_percent(r.tissue.oa)});
  }
  return render_table(body);
}

ChallengingSplit challenging_split(const std::vector<MetricsReport>& baseline_reports) {
  ChallengingSplit split;
  for (const auto& r : baseline_reports) {
    if (!r.tools.delta_avg)
      throw ValidationError("video '" + r.video + "' has no baseline tools delta_avg (no visible tool cells)");
    (*r.tools.delta_avg < 0.75 ? split.challenging : split.regular).push_back(r.video);
  }
  return split;
}

BenchmarkTable build_benchmark(const std::vector<MetricsReport>& reports, const std::string& baseline_method) {
  BenchmarkTable table;
  std::vector<MetricsReport> baseline;
  std::vector<std::string> methods;
  for (const auto& r : reports) {
    if (r.method == baseline_method) baseline.push_back(r);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  }
  if (baseline.empty() && !reports.empty())
    throw ValidationError("no reports for baseline method '" + baseline_method + "'");
  table.split = challenging_split(baseline);
  const std::set<std::string> hard(table.split.challenging.begin(), table.split.challenging.end());

  for (const std::string subset : {"all", "challenging"}) {
    for (const auto& method : methods) {
      BenchmarkRow row;
      row.method = method;
      row.subset = subset;
      std::vector<std::optional<double>> v[6];
      for (const auto& r : reports) {
        if (r.method != method || (subset == "challenging" && hard.count(r.video) == 0)) continue;
        ++row.videos;
        v[0].push_back(r.tools.aj);
        v[1].push_back(r.tools.delta_avg);
        v[2].push_back(r.tools.oa);
        v[3].push_back(r.tissue.aj);
        v[4].push_back(r.tissue.delta_avg);
        v[5].push_back(r.tissue.oa);
      }
      if (row.videos == 0) continue;
      row.tools_aj = average(v[0]);
      row.tools_delta = average(v[1]);
      row.tools_oa = average(v[2]);
      row.tissue_aj = average(v[3]);
      row.tissue_delta = average(v[4]);
      row.tissue_oa = average(v[5]);
      table.rows.push_back(row);
    }
  }
  return table;
}

std::string BenchmarkTable::to_text() const {
  std::string out;
  for (const std::string subset : {"all", "challenging"}) {
    std::vector<std::array<std::string, 7>> body;
    for (const auto& r : rows) {
      if (r.subset != subset) continue;
      body.push_back({r.method, format_percent(r.tools_aj), format_percent(r.tools_delta), format_percent(r.tools_oa),
                      format_percent(r.tissue_aj), format_percent(r.tissue_delta), format_percent(r.tissue_oa)});
    }
    const std::size_t count = subset == "all" ? split.challenging.size() + split.regular.size() : split.challenging.size();
    out += fmt::format("{} videos ({})\n", subset == "all" ? "All" : "Challenging", count);
    out += body.empty() ? std::string("(none)\n") : render_table(body);
    out += '\n';
  }
  return out;
}

std::string BenchmarkTable::to_csv() const {
  std::string out = "subset,method,videos,tools_aj,tools_delta_avg,tools_oa,tissue_aj,tissue_delta_avg,tissue_oa\n";
  auto num = [](const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string("NA"); };
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", r.subset, r.method, r.videos, num(r.tools_aj),
                       num(r.tools_delta), num(r.tools_oa), num(r.tissue_aj), num(r.tissue_delta), num(r.tissue_oa));
  }
  return out;
}

nlohmann::json BenchmarkTable::to_json() const {
  nlohmann::json j;
  j["challenging"] = split.challenging;
  j["regular"] = split.regular;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"method", r.method},
                         {"subset", r.subset},
                         {"videos", r.videos},
                         {"tools", {{"aj", opt(r.tools_aj)}, {"delta_avg", opt(r.tools_delta)}, {"oa", opt(r.tools_oa)}}},
                         {"tissue",
                          {{"aj", opt(r.tissue_aj)}, {"delta_avg", opt(r.tissue_delta)}, {"oa", opt(r.tissue_oa)}}}});
  }
  return j;
}

}  // namespace surgmotion
