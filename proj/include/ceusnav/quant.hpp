#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceusnav/volume.hpp"

namespace ceusnav {

/// Inverse of log_compress: I = 10^((v/255·D − D)/20).
double linearize(int code, double dynamic_range_db = 60.0);
/// The 256-entry table of linearize() for one dynamic range.
std::array<double, 256> linearization_table(double dynamic_range_db = 60.0);

/// Volume of interest on a reference grid: an ellipsoid in grid-local mm or
/// an explicit voxel mask.
class Voi {
 public:
  static Voi ellipsoid(const Vec3& center_mm, const Vec3& radii_mm);
  static Voi mask(const GridGeometry& grid, std::vector<std::uint8_t> mask);

  /// Linear voxel indices inside the VOI for `grid`.
  std::vector<std::size_t> voxel_indices(const GridGeometry& grid) const;
  bool is_ellipsoid() const { return !mask_grid_.has_value(); }
  const Vec3& center_mm() const { return center_; }
  const Vec3& radii_mm() const { return radii_; }

 private:
  Vec3 center_ = Vec3::Zero();
  Vec3 radii_ = Vec3::Ones();
  std::optional<GridGeometry> mask_grid_;
  std::vector<std::uint8_t> mask_;
};

nlohmann::json to_json(const Voi& voi);
Voi voi_from_json(const nlohmann::json& j);

struct TimeIntensityCurve {
  std::vector<double> times;          // s, strictly increasing
  std::vector<double> values;         // mean linear intensity
  std::vector<std::size_t> n_voxels;  // contributing voxels per sample

  std::size_t size() const { return times.size(); }
  bool empty() const { return times.empty(); }
  void push_back(double t, double v, std::size_t n);
  /// Samples with begin <= t <= end.
  TimeIntensityCurve slice(double begin, double end) const;
};

/// Per frame, the mean of linearized voxels inside the VOI. Voxels whose mask
/// entry is 0 are excluded; frames with no valid VOI voxels contribute no
/// sample. `masks` is either empty (all valid) or one mask per frame.
TimeIntensityCurve extract_tic(std::span<const VolumeFrame> frames, const Voi& voi,
                               double dynamic_range_db = 60.0,
                               std::span<const ValidityMask> masks = {});

struct SteadyStateOptions {
  double window_s = 20.0;
  double slope_tolerance = 0.005;  // fraction of window-mean level per second
};

struct SteadyStateReport {
  bool reached = false;
  double time_to_steady = 0.0;  // s after the first TIC sample, when reached
  double window_s = 0.0;
  double slope_tolerance = 0.0;
};

/// Earliest t where the least-squares slope over [t − window, t], divided by
/// the window-mean level, is within ±tolerance.
SteadyStateReport detect_steady_state(const TimeIntensityCurve& tic, const SteadyStateOptions& options = {});

struct FitOptions {
  double min_span_s = 60.0;
  std::size_t min_samples = 8;
  double beta_min = 1e-4;  // 1/s
  double beta_max = 10.0;
  std::size_t grid_points = 161;  // log-spaced β probes before refinement
  double relative_tolerance = 1e-8;
  std::optional<double> t0;  // defaults to the first sample time
  bool record_probes = false;
};

struct FitResult {
  double A = 0.0;
  double beta = 0.0;
  double rBV = 0.0;
  double rBF = 0.0;
  double rms_residual = 0.0;
  double r_squared = 0.0;
  double t0 = 0.0;
  bool degenerate = false;  // flat / all-zero data, r² not defined
  bool at_bound = false;    // optimum sits on the β search bound
  std::vector<std::pair<double, double>> probes;  // (β, residual sum of squares)
};

/// I(t) = A(1 − e^(−β(t − t0))) by variable projection: A is the closed-form
/// least-squares scale for each β, and β minimizes the projected residual.
FitResult fit_replenishment(const TimeIntensityCurve& segment, const FitOptions& options = {});

/// Residual sum of squares of the model at (A, β) on the segment.
double replenishment_rss(const TimeIntensityCurve& segment, double t0, double A, double beta);

/// The replenishment segment following a flash: samples in
/// [flash_time, min(flash_time + max_span, next_flash)).
TimeIntensityCurve replenishment_segment(const TimeIntensityCurve& tic, double flash_time,
                                         double max_span_s, std::optional<double> next_flash = {});

nlohmann::json to_json(const FitResult& fit);
nlohmann::json to_json(const SteadyStateReport& report);

}  // namespace ceusnav
