#include "surgmotion/losses.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace surgmotion {

namespace {

template <typename Scalar>
std::vector<RayQuery> queries_of(const TrainingBatch& batch) {
  std::vector<RayQuery> out;
  out.reserve(batch.items.size());
  for (const auto& item : batch.items) out.push_back({item.src, item.dst, item.from});
  return out;
}

std::vector<int> items_with(const TrainingBatch& batch, Provenance p) {
  std::vector<int> out;
  for (std::size_t i = 0; i < batch.items.size(); ++i)
    if (batch.items[i].provenance == p) out.push_back(static_cast<int>(i));
  return out;
}

template <typename Scalar>
std::optional<ad::Var<Scalar>> l1_to_targets(const RenderOutputs<Scalar>& r, const TrainingBatch& batch, Provenance p) {
  const std::vector<int> idx = items_with(batch, p);
  if (idx.empty()) return std::nullopt;
  Matrix<Scalar> target(2, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) target.col(static_cast<Eigen::Index>(i)) = batch.items[idx[i]].to.cast<Scalar>();
  auto& tape = *r.pixel.tape;
  const auto predicted = ad::gather_cols(r.pixel, idx);
  const auto err = ad::abs(ad::sub(tape.constant(std::move(target)), predicted));
  return ad::scale(ad::sum(err), Scalar(1) / static_cast<Scalar>(idx.size()));
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t value) {
  // splitmix64 step
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (value + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename Scalar>
Scalar soft_value(Scalar sdf, const SoftMask& soft) {
  const Scalar band = static_cast<Scalar>(soft.band);
  const Scalar c = std::clamp(sdf / static_cast<Scalar>(soft.softness), -band, band);
  const Scalar lo = ad::detail::sigmoid(-band);
  const Scalar hi = ad::detail::sigmoid(band);
  return (ad::detail::sigmoid(c) - lo) / (hi - lo);
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {flow, rgb, mask, arap, long_term}) {
    if (!(w >= 0)) throw ValidationError("loss weights must be non-negative");
  }
  if (schedule_boundary < 0) throw ValidationError("schedule boundary must be >= 0");
}

EffectiveWeights weights_at(const LossWeights& w, long iteration) {
  w.validate();
  const bool late = iteration >= w.schedule_boundary;
  EffectiveWeights e;
  e.flow = w.use_flow ? w.flow : 0.0;
  e.rgb = w.use_rgb ? w.rgb : 0.0;
  e.mask = (w.use_mask && late) ? w.mask : 0.0;
  e.arap = (w.use_arap && late) ? w.arap : 0.0;
  e.long_term = w.use_long_term ? w.long_term : 0.0;
  return e;
}

double SoftMask::operator()(double sdf) const { return soft_value(sdf, *this); }

template <typename Scalar>
ad::Var<Scalar> SoftMask::apply(ad::Var<Scalar> sdf) const {
  auto& tape = *sdf.tape;
  const SoftMask soft = *this;
  Matrix<Scalar> out = sdf.value().unaryExpr([soft](Scalar v) { return soft_value(v, soft); });
  return tape.push(std::move(out), [sdf, soft](ad::Tape<Scalar>& t, int self) {
    const Scalar band = static_cast<Scalar>(soft.band);
    const Scalar s = static_cast<Scalar>(soft.softness);
    const Scalar range = ad::detail::sigmoid(band) - ad::detail::sigmoid(-band);
    Matrix<Scalar> d = sdf.value().unaryExpr([&](Scalar v) {
      const Scalar c = v / s;
      if (!(c > -band && c < band)) return Scalar(0);
      const Scalar g = ad::detail::sigmoid(c);
      return g * (Scalar(1) - g) / (s * range);
    });
    t.accumulate(sdf.id, t.upstream(self).cwiseProduct(d));
  });
}

LossContext::LossContext(const VideoSequence& seq, SoftMask soft)
    : width_(seq.width), height_(seq.height), seq_(&seq), soft_(soft) {
  if (seq.has_masks()) {
    for (const auto& m : seq.masks) sdf_.push_back(signed_distance(m));
  }
}

int LossContext::instance_at(int frame, const Eigen::Vector2d& p) const {
  if (!seq_->has_masks()) return 0;
  const int x = std::clamp(static_cast<int>(std::floor(p.x())), 0, width_ - 1);
  const int y = std::clamp(static_cast<int>(std::floor(p.y())), 0, height_ - 1);
  return seq_->masks[frame].at(x, y);
}

double LossContext::soft_mask_at(int frame, const Eigen::Vector2d& p) const {
  if (sdf_.empty()) return 0.0;
  return soft_(sample_bilinear<double>(sdf_[frame], p.x(), p.y()).value);
}

Eigen::Vector3d LossContext::color_at(int frame, const Eigen::Vector2d& p) const {
  return sample_rgb(seq_->frames[frame], p.x(), p.y());
}

RigidGroups rigid_grouping(const std::vector<Eigen::Vector3d>& points, int clusters, std::uint64_t seed,
                           int max_iterations) {
  if (clusters < 1) throw ValidationError("rigid grouping needs at least one cluster");
  if (points.size() < static_cast<std::size_t>(clusters)) {
    throw ValidationError("rigid grouping: " + std::to_string(points.size()) + " points for " +
                          std::to_string(clusters) + " clusters");
  }
  std::mt19937_64 rng(seed);
  const std::size_t n = points.size();

  // k-means++ seeding
  std::vector<Eigen::Vector3d> centers;
  centers.push_back(points[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  std::vector<double> d2(n);
  while (static_cast<int>(centers.size()) < clusters) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, (points[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= d2[pick];
        if (r < 0 && d2[pick] > 0) break;
      }
      while (d2[pick] == 0 && pick > 0) --pick;
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    centers.push_back(points[pick]);
  }

  RigidGroups groups;
  groups.assignment.assign(n, -1);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (points[i] - centers[0]).squaredNorm();
      for (int c = 1; c < clusters; ++c) {
        const double d = (points[i] - centers[c]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (groups.assignment[i] != best) {
        groups.assignment[i] = best;
        changed = true;
      }
    }
    std::vector<Eigen::Vector3d> sums(static_cast<std::size_t>(clusters), Eigen::Vector3d::Zero());
    std::vector<int> counts(static_cast<std::size_t>(clusters), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[groups.assignment[i]] += points[i];
      ++counts[groups.assignment[i]];
    }
    for (int c = 0; c < clusters; ++c) {
      if (counts[c] > 0) {
        centers[c] = sums[c] / counts[c];
        continue;
      }
      // Empty cluster: move it to the point farthest from its own center.
      std::size_t far = 0;
      double far_d = -1;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = (points[i] - centers[groups.assignment[i]]).squaredNorm();
        if (d > far_d && counts[groups.assignment[i]] > 1) {
          far_d = d;
          far = i;
        }
      }
      --counts[groups.assignment[far]];
      groups.assignment[far] = c;
      counts[c] = 1;
      centers[c] = points[far];
      changed = true;
    }
    if (!changed) break;
  }
  groups.centroids = centers;
  for (std::size_t i = 0; i < n; ++i) groups.inertia += (points[i] - centers[groups.assignment[i]]).squaredNorm();
  return groups;
}

template <typename Scalar>
std::optional<ad::Var<Scalar>> flow_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch) {
  return l1_to_targets(r, batch, Provenance::flow);
}

template <typename Scalar>
std::optional<ad::Var<Scalar>> long_term_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch) {
  // ((matched - p_i) - (predicted - p_i)) reduces to (matched - predicted).
  return l1_to_targets(r, batch, Provenance::match);
}

template <typename Scalar>
std::optional<ad::Var<Scalar>> rgb_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch,
                                        const LossContext& ctx) {
  if (batch.items.empty()) return std::nullopt;
  const auto n = static_cast<Eigen::Index>(batch.items.size());
  Matrix<Scalar> target(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& item = batch.items[static_cast<std::size_t>(i)];
    target.col(i) = ctx.color_at(item.src, item.from).cast<Scalar>();
  }
  auto& tape = *r.color.tape;
  const auto err = ad::square(ad::sub(r.color, tape.constant(std::move(target))));
  return ad::scale(ad::sum(err), Scalar(1) / static_cast<Scalar>(3 * n));
}

template <typename Scalar>
std::optional<ad::Var<Scalar>> mask_term(const RenderOutputs<Scalar>& r, const TrainingBatch& batch,
                                         const LossContext& ctx) {
  if (!ctx.has_masks()) return std::nullopt;
  std::vector<int> idx;
  std::vector<int> src_frames;
  std::vector<int> dst_frames;
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    const auto& item = batch.items[i];
    if (ctx.instance_at(item.src, item.from) > 0) {
      idx.push_back(static_cast<int>(i));
      src_frames.push_back(item.src);
      dst_frames.push_back(item.dst);
    }
  }
  if (idx.empty()) return std::nullopt;
  auto& tape = *r.pixel.tape;
  Matrix<Scalar> from(2, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) from.col(static_cast<Eigen::Index>(i)) = batch.items[idx[i]].from.cast<Scalar>();
  std::vector<const Plane*> planes;
  for (const auto& p : ctx.sdf()) planes.push_back(&p);
  const auto soft_src = ctx.soft_mask().apply(ad::sample_planes(tape.constant(std::move(from)), planes, src_frames));
  const auto soft_dst = ctx.soft_mask().apply(ad::sample_planes(ad::gather_cols(r.pixel, idx), planes, dst_frames));
  return ad::mean(ad::square(ad::sub(soft_src, soft_dst)));
}

template <typename Scalar>
std::optional<ad::Var<Scalar>> arap_term(ad::Var<Scalar> mapped, const Matrix<Scalar>& lifted,
                                         const std::vector<int>& cluster_of) {
  std::vector<int> cols;
  std::map<int, std::vector<int>> members;  // cluster -> positions within cols
  for (std::size_t i = 0; i < cluster_of.size(); ++i) {
    if (cluster_of[i] < 0) continue;
    members[cluster_of[i]].push_back(static_cast<int>(cols.size()));
    cols.push_back(static_cast<int>(i));
  }
  std::vector<int> first;
  std::vector<int> second;
  for (const auto& [cluster, m] : members) {
    for (std::size_t a = 0; a < m.size(); ++a)
      for (std::size_t b = a + 1; b < m.size(); ++b) {
        first.push_back(m[a]);
        second.push_back(m[b]);
      }
  }
  if (first.empty()) return std::nullopt;
  auto& tape = *mapped.tape;
  Matrix<Scalar> base(3, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) base.col(static_cast<Eigen::Index>(i)) = lifted.col(cols[i]);
  const auto distance = ad::col_norm(ad::sub(ad::gather_cols(mapped, cols), tape.constant(std::move(base))));
  const auto gap = ad::abs(ad::sub(ad::gather_cols(distance, first), ad::gather_cols(distance, second)));
  return ad::scale(ad::sum(gap), Scalar(1) / static_cast<Scalar>(first.size()));
}

template <typename Scalar>
std::vector<int> group_tool_points(const RenderOutputs<Scalar>& r, const TrainingBatch& batch, const LossContext& ctx,
                                   std::uint64_t seed) {
  std::vector<int> cluster_of(batch.items.size(), -1);
  if (!ctx.has_masks()) return cluster_of;
  std::map<FramePair, std::vector<int>> by_pair;
  std::map<FramePair, std::set<int>> labels;
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    const auto& item = batch.items[i];
    const int label = ctx.instance_at(item.src, item.from);
    if (label == 0) continue;
    by_pair[{item.src, item.dst}].push_back(static_cast<int>(i));
    labels[{item.src, item.dst}].insert(label);
  }
  const auto& mapped = r.mapped_mid.value();
  int next_id = 0;
  for (const auto& [pair, members] : by_pair) {
    if (members.size() < 2) continue;
    std::vector<Eigen::Vector3d> displacement;
    for (int i : members) displacement.push_back((mapped.col(i) - r.lifted_mid.col(i)).template cast<double>());
    const int k = std::clamp(static_cast<int>(labels[pair].size()), 1, static_cast<int>(members.size()));
    const std::uint64_t pair_seed = mix(mix(seed, static_cast<std::uint64_t>(pair.first)), static_cast<std::uint64_t>(pair.second));
    const RigidGroups groups = rigid_grouping(displacement, k, pair_seed);
    for (std::size_t m = 0; m < members.size(); ++m) cluster_of[members[m]] = next_id + groups.assignment[m];
    next_id += k;
  }
  return cluster_of;
}

template <typename Scalar>
Objective<Scalar> total_loss(typename MotionModel<Scalar>::Graph& graph, const TrainingBatch& batch,
                             const LossContext& ctx, const LossWeights& weights, long iteration,
                             const RenderSettings& settings, std::uint64_t seed, std::mt19937_64* rng) {
  const EffectiveWeights eff = weights_at(weights, iteration);
  auto& tape = graph.tape();
  Objective<Scalar> obj;
  obj.report.weights = eff;
  obj.total = tape.constant(Matrix<Scalar>::Zero(1, 1));
  if (batch.items.empty()) return obj;

  const auto r = render_batch<Scalar>(graph, queries_of<Scalar>(batch), settings, rng);
  auto add_term = [&](bool enabled, double weight, auto&& make, double& slot) {
    if (!enabled) return;
    const std::optional<ad::Var<Scalar>> term = make();
    if (!term) return;
    slot = static_cast<double>(term->value()(0, 0));
    if (weight > 0) obj.total = ad::add(obj.total, ad::scale(*term, static_cast<Scalar>(weight)));
  };
  add_term(weights.use_flow, eff.flow, [&] { return flow_term(r, batch); }, obj.report.flow);
  add_term(weights.use_rgb, eff.rgb, [&] { return rgb_term(r, batch, ctx); }, obj.report.rgb);
  add_term(weights.use_mask, eff.mask, [&] { return mask_term(r, batch, ctx); }, obj.report.mask);
  add_term(weights.use_arap, eff.arap, [&] {
    return arap_term(r.mapped_mid, r.lifted_mid, group_tool_points(r, batch, ctx, seed));
  }, obj.report.arap);
  add_term(weights.use_long_term, eff.long_term, [&] { return long_term_term(r, batch); }, obj.report.long_term);
  obj.report.total = static_cast<double>(obj.total.value()(0, 0));
  return obj;
}

namespace {

template <typename Scalar, typename Term>
double evaluate(const TrainingBatch& batch, const MotionModel<Scalar>& model, const RenderSettings& settings,
                const char* name, Term&& term) {
  ad::Tape<Scalar> tape;
  typename MotionModel<Scalar>::Graph graph(tape, model);
  RenderSettings eval = settings;
  eval.mode = SampleMode::eval;
  const auto r = render_batch<Scalar>(graph, queries_of<Scalar>(batch), eval);
  const auto value = term(r);
  if (!value) {
    spdlog::warn("{} loss: empty pool, returning 0", name);
    return 0.0;
  }
  return static_cast<double>(value->value()(0, 0));
}

}  // namespace

template <typename Scalar>
double flow_loss(const TrainingBatch& batch, const MotionModel<Scalar>& model, const RenderSettings& settings) {
  return evaluate(batch, model, settings, "flow", [&](const auto& r) { return flow_term(r, batch); });
}

template <typename Scalar>
double rgb_loss(const TrainingBatch& batch, const LossContext& ctx, const MotionModel<Scalar>& model,
                const RenderSettings& settings) {
  return evaluate(batch, model, settings, "rgb", [&](const auto& r) { return rgb_term(r, batch, ctx); });
}

template <typename Scalar>
double mask_loss(const TrainingBatch& batch, const LossContext& ctx, const MotionModel<Scalar>& model,
                 const RenderSettings& settings) {
  if (!ctx.has_masks()) {
    spdlog::warn("mask loss disabled: the sequence has no instrument masks");
    return 0.0;
  }
  return evaluate(batch, model, settings, "mask", [&](const auto& r) { return mask_term(r, batch, ctx); });
}

template <typename Scalar>
double long_term_loss(const TrainingBatch& batch, const MotionModel<Scalar>& model, const RenderSettings& settings) {
  return evaluate(batch, model, settings, "long-term", [&](const auto& r) { return long_term_term(r, batch); });
}

double arap_loss(const RigidGroups& groups, const std::vector<Eigen::Vector3d>& from,
                 const std::vector<Eigen::Vector3d>& to) {
  if (from.size() != to.size() || from.size() != groups.assignment.size())
    throw ValidationError("arap_loss: point lists and grouping differ in length");
  ad::Tape<double> tape;
  Matrix<double> lifted(3, static_cast<Eigen::Index>(from.size()));
  Matrix<double> mapped(3, static_cast<Eigen::Index>(to.size()));
  for (std::size_t i = 0; i < from.size(); ++i) {
    lifted.col(static_cast<Eigen::Index>(i)) = from[i];
    mapped.col(static_cast<Eigen::Index>(i)) = to[i];
  }
  const auto term = arap_term<double>(tape.constant(std::move(mapped)), lifted, groups.assignment);
  return term ? term->value()(0, 0) : 0.0;
}

double l1_position_loss(const Eigen::Matrix2Xd& predicted, const Eigen::Matrix2Xd& target) {
  if (predicted.cols() != target.cols()) throw ValidationError("l1_position_loss: size mismatch");
  if (predicted.cols() == 0) return 0.0;
  return (predicted - target).cwiseAbs().sum() / static_cast<double>(predicted.cols());
}

#define SURGMOTION_INSTANTIATE(S)                                                                                   \
  template ad::Var<S> SoftMask::apply(ad::Var<S>) const;                                                           \
  template std::optional<ad::Var<S>> flow_term(const RenderOutputs<S>&, const TrainingBatch&);                     \
  template std::optional<ad::Var<S>> rgb_term(const RenderOutputs<S>&, const TrainingBatch&, const LossContext&);  \
  template std::optional<ad::Var<S>> mask_term(const RenderOutputs<S>&, const TrainingBatch&, const LossContext&); \
  template std::optional<ad::Var<S>> long_term_term(const RenderOutputs<S>&, const TrainingBatch&);                \
  template std::optional<ad::Var<S>> arap_term(ad::Var<S>, const Matrix<S>&, const std::vector<int>&);            \
  template std::vector<int> group_tool_points(const RenderOutputs<S>&, const TrainingBatch&, const LossContext&,   \
                                              std::uint64_t);                                                       \
  template Objective<S> total_loss<S>(MotionModel<S>::Graph&, const TrainingBatch&, const LossContext&,            \
                                      const LossWeights&, long, const RenderSettings&, std::uint64_t,               \
                                      std::mt19937_64*);                                                            \
  template double flow_loss(const TrainingBatch&, const MotionModel<S>&, const RenderSettings&);                   \
  template double rgb_loss(const TrainingBatch&, const LossContext&, const MotionModel<S>&, const RenderSettings&); \
  template double mask_loss(const TrainingBatch&, const LossContext&, const MotionModel<S>&, const RenderSettings&); \
  template double long_term_loss(const TrainingBatch&, const MotionModel<S>&, const RenderSettings&);

SURGMOTION_INSTANTIATE(float)
SURGMOTION_INSTANTIATE(double)

#undef SURGMOTION_INSTANTIATE

}  // namespace surgmotion
