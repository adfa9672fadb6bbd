#include "surgmotion/renderer.hpp"

#include <algorithm>
#include <cmath>

namespace surgmotion {

namespace {

void check_samples(const RenderSettings& settings) {
  if (settings.samples < 1) throw ValidationError("ray needs at least one sample (K = 0)");
  if (settings.width <= 0 || settings.height <= 0) throw ValidationError("render settings need frame dimensions");
}

template <typename Scalar>
std::vector<Scalar> sample_depths(int k, SampleMode mode, std::mt19937_64* rng) {
  const double stratum = 2.0 / k;
  std::vector<Scalar> depths(static_cast<std::size_t>(k));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int s = 0; s < k; ++s) {
    const double offset = (mode == SampleMode::train && rng != nullptr) ? unit(*rng) : 0.5;
    depths[s] = static_cast<Scalar>(-1.0 + (s + offset) * stratum);
  }
  return depths;
}

template <typename Scalar>
Scalar depth_gap(const std::vector<Scalar>& depths, std::size_t k, Scalar stratum) {
  return k + 1 < depths.size() ? depths[k + 1] - depths[k] : stratum;
}

}  // namespace

template <typename Scalar>
RaySamples<Scalar> lift(const Vec2<Scalar>& pixel, int frame, const RenderSettings& settings, std::mt19937_64* rng) {
  check_samples(settings);
  if (!pixel.allFinite() || pixel.x() < 0 || pixel.y() < 0 || pixel.x() > settings.width ||
      pixel.y() > settings.height) {
    throw ValidationError("lift: pixel outside the frame");
  }
  RaySamples<Scalar> out;
  out.pixel = pixel;
  out.frame = frame;
  out.stratum = Scalar(2) / Scalar(settings.samples);
  out.depths = sample_depths<Scalar>(settings.samples, settings.mode, rng);
  const Vec2<Scalar> n = pixel_to_normalized(pixel, settings.width, settings.height);
  for (Scalar z : out.depths) out.points.emplace_back(n.x(), n.y(), z);
  return out;
}

template <typename Scalar>
std::vector<Vec3<Scalar>> map_chain(const RaySamples<Scalar>& samples, int dst_frame, const MotionModel<Scalar>& model) {
  Matrix<Scalar> x(3, samples.size());
  for (int k = 0; k < samples.size(); ++k) x.col(k) = samples.points[k];
  const Matrix<Scalar> mapped = model.map_from_canonical(model.map_to_canonical(x, samples.frame), dst_frame);
  std::vector<Vec3<Scalar>> out;
  for (int k = 0; k < samples.size(); ++k) out.emplace_back(mapped.col(k));
  return out;
}

template <typename Scalar>
CompositeResult<Scalar> composite_values(const RaySamples<Scalar>& samples, const std::vector<Vec3<Scalar>>& mapped,
                                         const std::vector<Scalar>& sigma, const std::vector<Vec3<Scalar>>& colors,
                                         const RenderSettings& settings) {
  const std::size_t k = samples.points.size();
  if (mapped.size() != k || sigma.size() != k || colors.size() != k) {
    throw ValidationError("composite: expected " + std::to_string(k) + " mapped samples, got " +
                          std::to_string(mapped.size()));
  }
  CompositeResult<Scalar> out;
  out.point.setZero();
  out.color.setZero();
  Scalar transmittance = Scalar(1);
  for (std::size_t s = 0; s < k; ++s) {
    const Scalar alpha = Scalar(1) - std::exp(-sigma[s] * depth_gap(samples.depths, s, samples.stratum));
    const Scalar weight = transmittance * alpha;
    out.point += weight * mapped[s];
    out.color += weight * colors[s];
    out.acc += weight;
    transmittance *= Scalar(1) - alpha;
  }
  out.degenerate = !(out.acc > Scalar(kMinOpacity));
  if (out.degenerate) {
    out.pixel = Vec2<Scalar>::Constant(std::numeric_limits<Scalar>::quiet_NaN());
  } else {
    const Vec2<Scalar> planar(out.point.x() / out.acc, out.point.y() / out.acc);
    out.pixel = normalized_to_pixel(planar, settings.width, settings.height);
  }
  return out;
}

template <typename Scalar>
CompositeResult<Scalar> composite(const RaySamples<Scalar>& samples, const std::vector<Vec3<Scalar>>& mapped,
                                  const MotionModel<Scalar>& model, const RenderSettings& settings) {
  if (static_cast<int>(mapped.size()) != samples.size()) {
    throw ValidationError("composite: expected " + std::to_string(samples.size()) + " mapped samples, got " +
                          std::to_string(mapped.size()));
  }
  Matrix<Scalar> x(3, samples.size());
  for (int k = 0; k < samples.size(); ++k) x.col(k) = samples.points[k];
  const Matrix<Scalar> u = model.map_to_canonical(x, samples.frame);
  std::vector<Scalar> sigma;
  std::vector<Vec3<Scalar>> colors;
  for (int k = 0; k < samples.size(); ++k) {
    const auto [s, c] = model.query_canonical(Vec3<Scalar>(u.col(k)));
    sigma.push_back(s);
    colors.push_back(c);
  }
  return composite_values(samples, mapped, sigma, colors, settings);
}

template <typename Scalar>
Prediction<Scalar> predict(const Vec2<Scalar>& pixel, int src_frame, int dst_frame, const MotionModel<Scalar>& model,
                           const RenderSettings& settings) {
  RayQuery q{src_frame, dst_frame, pixel.template cast<double>()};
  return predict_batch(model, {q}, settings).front();
}

template <typename Scalar>
RenderOutputs<Scalar> render_batch(typename MotionModel<Scalar>::Graph& graph, const std::vector<RayQuery>& queries,
                                   const RenderSettings& settings, std::mt19937_64* rng) {
  check_samples(settings);
  auto& tape = graph.tape();
  const int k = settings.samples;
  const Eigen::Index n = static_cast<Eigen::Index>(queries.size());
  const Eigen::Index m = n * k;
  const int mid = k / 2;
  const Scalar half_w = Scalar(settings.width) / Scalar(2);
  const Scalar half_h = Scalar(settings.height) / Scalar(2);

  Matrix<Scalar> x(3, m);
  Matrix<Scalar> delta(1, m);
  Matrix<Scalar> lifted_mid(3, n);
  std::vector<int> src(static_cast<std::size_t>(m));
  std::vector<int> dst(static_cast<std::size_t>(m));
  std::vector<int> mid_cols(static_cast<std::size_t>(n));
  const Scalar stratum = Scalar(2) / Scalar(k);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& q = queries[static_cast<std::size_t>(r)];
    const Vec2<Scalar> nrm = pixel_to_normalized(Vec2<Scalar>(q.pixel.template cast<Scalar>()), settings.width,
                                                 settings.height);
    const auto depths = sample_depths<Scalar>(k, settings.mode, rng);
    for (int s = 0; s < k; ++s) {
      const Eigen::Index c = r * k + s;
      x.col(c) << nrm.x(), nrm.y(), depths[s];
      delta(0, c) = depth_gap(depths, static_cast<std::size_t>(s), stratum);
      src[c] = q.src;
      dst[c] = q.dst;
    }
    mid_cols[r] = static_cast<int>(r * k + mid);
    lifted_mid.col(r) << (nrm.x() + Scalar(1)) * half_w, (nrm.y() + Scalar(1)) * half_h,
        (depths[mid] + Scalar(1)) * half_w;
  }

  const auto psi_src = graph.latents_for(src);
  const auto psi_dst = graph.latents_for(dst);
  const auto u = graph.to_canonical(tape.constant(std::move(x)), psi_src);
  const auto [sigma, color] = graph.query(u);
  const auto mapped = graph.from_canonical(u, psi_dst);

  const auto weights = ad::compositing_weights(sigma, std::move(delta), k);
  const auto acc = ad::segment_sum(weights, k);
  const auto point = ad::segment_sum(ad::mul_rowvec(mapped, weights), k);
  const auto rgb = ad::segment_sum(ad::mul_rowvec(color, weights), k);
  const auto safe_acc = ad::clamp(acc, Scalar(kMinOpacity), Scalar(2));
  const auto planar = ad::div_rowvec(ad::rows(point, 0, 2), safe_acc);

  auto to_pixels = [&](ad::Var<Scalar> v, int row, Scalar half) {
    return ad::scale(ad::shift(ad::rows(v, row, 1), Scalar(1)), half);
  };
  RenderOutputs<Scalar> out;
  out.pixel = ad::vcat<Scalar>({to_pixels(planar, 0, half_w), to_pixels(planar, 1, half_h)});
  out.color = rgb;
  out.acc = acc;
  const auto mid_points = ad::gather_cols(mapped, mid_cols);
  out.mapped_mid =
      ad::vcat<Scalar>({to_pixels(mid_points, 0, half_w), to_pixels(mid_points, 1, half_h), to_pixels(mid_points, 2, half_w)});
  out.lifted_mid = std::move(lifted_mid);
  return out;
}

template <typename Scalar>
std::vector<Prediction<Scalar>> predict_batch(const MotionModel<Scalar>& model, const std::vector<RayQuery>& queries,
                                              const RenderSettings& settings) {
  std::vector<Prediction<Scalar>> out;
  if (queries.empty()) return out;
  for (const auto& q : queries) {
    if (!q.pixel.allFinite() || q.pixel.x() < 0 || q.pixel.y() < 0 || q.pixel.x() > settings.width ||
        q.pixel.y() > settings.height) {
      throw ValidationError("query pixel outside the frame");
    }
  }
  ad::Tape<Scalar> tape;
  typename MotionModel<Scalar>::Graph graph(tape, model);
  RenderSettings eval = settings;
  eval.mode = SampleMode::eval;
  const auto r = render_batch<Scalar>(graph, queries, eval);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(queries.size()); ++i) {
    Prediction<Scalar> p;
    p.acc = r.acc.value()(0, i);
    p.color = r.color.value().col(i);
    p.degenerate = !(p.acc > Scalar(kMinOpacity));
    p.pixel = p.degenerate ? Vec2<Scalar>::Constant(std::numeric_limits<Scalar>::quiet_NaN())
                           : Vec2<Scalar>(r.pixel.value().col(i));
    p.visible = !p.degenerate && p.acc >= static_cast<Scalar>(settings.visibility_threshold);
    out.push_back(p);
  }
  return out;
}

#define SURGMOTION_INSTANTIATE(S)                                                                                 \
  template RaySamples<S> lift(const Vec2<S>&, int, const RenderSettings&, std::mt19937_64*);                     \
  template std::vector<Vec3<S>> map_chain(const RaySamples<S>&, int, const MotionModel<S>&);                    \
  template CompositeResult<S> composite(const RaySamples<S>&, const std::vector<Vec3<S>>&, const MotionModel<S>&, \
                                        const RenderSettings&);                                                   \
  template CompositeResult<S> composite_values(const RaySamples<S>&, const std::vector<Vec3<S>>&,                \
                                               const std::vector<S>&, const std::vector<Vec3<S>>&,               \
                                               const RenderSettings&);                                            \
  template Prediction<S> predict(const Vec2<S>&, int, int, const MotionModel<S>&, const RenderSettings&);        \
  template RenderOutputs<S> render_batch<S>(MotionModel<S>::Graph&, const std::vector<RayQuery>&,                 \
                                            const RenderSettings&, std::mt19937_64*);                             \
  template std::vector<Prediction<S>> predict_batch(const MotionModel<S>&, const std::vector<RayQuery>&,          \
                                                    const RenderSettings&);

SURGMOTION_INSTANTIATE(float)
SURGMOTION_INSTANTIATE(double)

#undef SURGMOTION_INSTANTIATE

}  // namespace surgmotion
