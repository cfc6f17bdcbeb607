#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ceusnav/geometry.hpp"

namespace ceusnav {

struct TimedPose {
  double t = 0.0;
  RigidTransform pose;  // image -> world
};

struct DisplacementTrace {
  std::vector<double> times;         // s
  std::vector<double> displacement;  // mm

  std::size_t size() const { return times.size(); }
};

/// d(t) = ‖T_t·c − T_ref·c‖ for the image-center point c (image coordinates).
DisplacementTrace displacement_trace(std::span<const TimedPose> poses, const RigidTransform& ref,
                                     const Vec3& center_voxel_offset);

struct HistogramFeatures {
  double mean = 0.0;
  double median = 0.0;
  double sd = 0.0;        // n−1 denominator
  double skewness = 0.0;  // adjusted Fisher–Pearson G1
  bool degenerate = false;  // skewness undefined (n < 3 or zero spread), reported as 0
};

HistogramFeatures histogram_features(std::span<const double> samples);
inline HistogramFeatures histogram_features(const DisplacementTrace& trace) {
  return histogram_features(trace.displacement);
}

/// Bin counts over [0, bin_width·n_bins); values at or past the end land in the last bin.
std::vector<std::size_t> displacement_histogram(std::span<const double> samples, double bin_width,
                                                std::size_t n_bins);

struct RepositioningResult {
  double error_mm = 0.0;         // mean displacement over the settle window
  double time_to_recovery = 0.0; // s from trace start
  bool settled = false;
};

/// First time from which displacement stays ≤ threshold for `hold_s` seconds.
RepositioningResult repositioning_result(const DisplacementTrace& trace, double settle_threshold_mm = 2.0,
                                         double hold_s = 2.0);

enum class AgreementBand { none, poor, moderate, good, excellent };
std::string_view to_string(AgreementBand band);

/// 0–0.20 none, ≤0.40 poor, ≤0.60 moderate, ≤0.80 good, above excellent.
AgreementBand classify_agreement(double icc);

struct MeasurementPair {
  std::string subject;  // grouping label (patient / scan session)
  double first = 0.0;
  double second = 0.0;
};

struct RepeatabilityResult {
  double icc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  AgreementBand band = AgreementBand::none;
  std::size_t n_pairs = 0;
  double ms_between = 0.0;
  double ms_within = 0.0;
};

/// One-way random-effects ICC(1,1) on log-transformed pairs with the
/// F-distribution 95% interval.
RepeatabilityResult icc_pairs(std::span<const MeasurementPair> pairs, double confidence = 0.95);

}  // namespace ceusnav
