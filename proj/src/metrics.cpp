#include "ceusnav/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/distributions/fisher_f.hpp>

#include "ceusnav/error.hpp"

namespace ceusnav {

DisplacementTrace displacement_trace(std::span<const TimedPose> poses, const RigidTransform& ref,
                                     const Vec3& center_voxel_offset) {
  if (poses.empty()) throw Error(ErrorCode::insufficient_data, "no poses for displacement trace");
  ref.validate();
  const Vec3 ref_point = ref.apply(center_voxel_offset);
  DisplacementTrace trace;
  trace.times.reserve(poses.size());
  trace.displacement.reserve(poses.size());
  for (const auto& p : poses) {
    p.pose.validate();
    trace.times.push_back(p.t);
    trace.displacement.push_back((p.pose.apply(center_voxel_offset) - ref_point).norm());
  }
  return trace;
}

HistogramFeatures histogram_features(std::span<const double> samples) {
  const std::size_t n = samples.size();
  if (n < 2) throw Error(ErrorCode::insufficient_data, "histogram features need at least 2 samples");

  HistogramFeatures f;
  double sum = 0.0;
  for (double v : samples) sum += v;
  f.mean = sum / static_cast<double>(n);

  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  f.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);

  double m2 = 0.0, m3 = 0.0;
  for (double v : samples) {
    const double d = v - f.mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  const double nd = static_cast<double>(n);
  f.sd = std::sqrt(m2 / (nd - 1.0));
  m2 /= nd;
  m3 /= nd;
  // Relative floor so a constant trace with roundoff in the mean is still degenerate.
  if (n < 3 || m2 <= 1e-24 * std::max(1.0, f.mean * f.mean)) {
    f.degenerate = true;
    if (n >= 3) f.sd = 0.0;
    f.skewness = 0.0;
    return f;
  }
  const double g1 = m3 / std::pow(m2, 1.5);
  f.skewness = g1 * std::sqrt(nd * (nd - 1.0)) / (nd - 2.0);
  return f;
}

std::vector<std::size_t> displacement_histogram(std::span<const double> samples, double bin_width,
                                                std::size_t n_bins) {
  if (!(bin_width > 0.0) || n_bins == 0) throw Error(ErrorCode::config, "invalid histogram binning");
  std::vector<std::size_t> counts(n_bins, 0);
  for (double v : samples) {
    const double b = std::floor(std::max(v, 0.0) / bin_width);
    const auto idx = b >= static_cast<double>(n_bins) ? n_bins - 1 : static_cast<std::size_t>(b);
    ++counts[idx];
  }
  return counts;
}

RepositioningResult repositioning_result(const DisplacementTrace& trace, double settle_threshold_mm,
                                         double hold_s) {
  RepositioningResult result;
  if (trace.size() == 0) return result;
  const double start = trace.times.front();
  const double end = trace.times.back();
  constexpr double eps = 1e-9;

  // For each candidate start k, the run of samples within threshold must
  // cover [t_k, t_k + hold].
  std::size_t run_end = 0;  // first index > k that breaks the run
  for (std::size_t k = 0; k < trace.size(); ++k) {
    if (trace.displacement[k] > settle_threshold_mm) continue;
    const double t = trace.times[k];
    if (t + hold_s > end + eps) break;
    run_end = std::max(run_end, k);
    while (run_end < trace.size() && trace.times[run_end] <= t + hold_s + eps &&
           trace.displacement[run_end] <= settle_threshold_mm) {
      ++run_end;
    }
    const bool covered = run_end == trace.size() || trace.times[run_end] > t + hold_s + eps;
    if (!covered) continue;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t j = k; j < trace.size() && trace.times[j] <= t + hold_s + eps; ++j) {
      sum += trace.displacement[j];
      ++n;
    }
    result.settled = true;
    result.time_to_recovery = t - start;
    result.error_mm = sum / static_cast<double>(n);
    return result;
  }
  return result;
}

std::string_view to_string(AgreementBand band) {
  switch (band) {
    case AgreementBand::none: return "none";
    case AgreementBand::poor: return "poor";
    case AgreementBand::moderate: return "moderate";
    case AgreementBand::good: return "good";
    case AgreementBand::excellent: return "excellent";
  }
  return "none";
}

AgreementBand classify_agreement(double icc) {
  if (!std::isfinite(icc)) throw Error(ErrorCode::domain, "ICC must be finite");
  if (icc <= 0.20) return AgreementBand::none;
  if (icc <= 0.40) return AgreementBand::poor;
  if (icc <= 0.60) return AgreementBand::moderate;
  if (icc <= 0.80) return AgreementBand::good;
  return AgreementBand::excellent;
}

RepeatabilityResult icc_pairs(std::span<const MeasurementPair> pairs, double confidence) {
  if (pairs.size() < 3) throw Error(ErrorCode::insufficient_data, "ICC needs at least 3 pairs");
  for (const auto& p : pairs) {
    if (!(p.first > 0.0) || !(p.second > 0.0) || !std::isfinite(p.first) || !std::isfinite(p.second)) {
      throw Error(ErrorCode::invalid_input, "ICC measurements must be positive and finite");
    }
  }
  constexpr double k = 2.0;
  const double n = static_cast<double>(pairs.size());

  double grand = 0.0;
  for (const auto& p : pairs) grand += std::log(p.first) + std::log(p.second);
  grand /= n * k;

  double ssb = 0.0, ssw = 0.0;
  for (const auto& p : pairs) {
    const double a = std::log(p.first);
    const double b = std::log(p.second);
    const double m = 0.5 * (a + b);
    ssb += k * (m - grand) * (m - grand);
    ssw += (a - m) * (a - m) + (b - m) * (b - m);
  }
  const double df_b = n - 1.0;
  const double df_w = n * (k - 1.0);

  RepeatabilityResult r;
  r.n_pairs = pairs.size();
  r.ms_between = ssb / df_b;
  r.ms_within = ssw / df_w;

  if (r.ms_within == 0.0) {
    // Perfect within-subject agreement.
    r.icc = 1.0;
    r.ci_low = 1.0;
    r.ci_high = 1.0;
    r.band = classify_agreement(r.icc);
    return r;
  }

  r.icc = (r.ms_between - r.ms_within) / (r.ms_between + (k - 1.0) * r.ms_within);
  const double alpha = 1.0 - confidence;
  const double f0 = r.ms_between / r.ms_within;
  const boost::math::fisher_f_distribution<double> f_bw(df_b, df_w);
  const boost::math::fisher_f_distribution<double> f_wb(df_w, df_b);
  const double fl = f0 / boost::math::quantile(f_bw, 1.0 - alpha / 2.0);
  const double fu = f0 * boost::math::quantile(f_wb, 1.0 - alpha / 2.0);
  r.ci_low = (fl - 1.0) / (fl + k - 1.0);
  r.ci_high = (fu - 1.0) / (fu + k - 1.0);
  r.band = classify_agreement(r.icc);
  return r;
}

}  // namespace ceusnav
