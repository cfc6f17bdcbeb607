#include "ceusnav/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ceusnav/error.hpp"

namespace ceusnav {

double linearize(int code, double dynamic_range_db) {
  if (!(dynamic_range_db > 0.0)) throw Error(ErrorCode::domain, "dynamic range must be positive");
  const double v = std::clamp(code, 0, 255);
  return std::pow(10.0, (v / 255.0 * dynamic_range_db - dynamic_range_db) / 20.0);
}

std::array<double, 256> linearization_table(double dynamic_range_db) {
  std::array<double, 256> lut{};
  for (int v = 0; v < 256; ++v) lut[static_cast<std::size_t>(v)] = linearize(v, dynamic_range_db);
  return lut;
}

// ---------------------------------------------------------------------------

Voi Voi::ellipsoid(const Vec3& center_mm, const Vec3& radii_mm) {
  if (!(radii_mm.array() > 0.0).all() || !center_mm.allFinite()) {
    throw Error(ErrorCode::config, "VOI radii must be positive");
  }
  Voi voi;
  voi.center_ = center_mm;
  voi.radii_ = radii_mm;
  return voi;
}

Voi Voi::mask(const GridGeometry& grid, std::vector<std::uint8_t> mask) {
  if (mask.size() != grid.voxel_count()) throw Error(ErrorCode::config, "VOI mask size does not match grid");
  if (std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; })) {
    throw Error(ErrorCode::empty_voi, "VOI mask is empty");
  }
  Voi voi;
  voi.mask_grid_ = grid;
  voi.mask_ = std::move(mask);
  return voi;
}

std::vector<std::size_t> Voi::voxel_indices(const GridGeometry& grid) const {
  std::vector<std::size_t> out;
  if (mask_grid_) {
    if (!(*mask_grid_ == grid)) throw Error(ErrorCode::empty_voi, "VOI mask defined on a different grid");
    for (std::size_t i = 0; i < mask_.size(); ++i) {
      if (mask_[i] != 0) out.push_back(i);
    }
    return out;
  }
  for (int k = 0; k < grid.dims[2]; ++k) {
    for (int j = 0; j < grid.dims[1]; ++j) {
      for (int i = 0; i < grid.dims[0]; ++i) {
        const Vec3 d = (grid.local_point(i, j, k) - center_).cwiseQuotient(radii_);
        if (d.squaredNorm() <= 1.0) out.push_back(grid.linear_index(i, j, k));
      }
    }
  }
  return out;
}

nlohmann::json to_json(const Voi& voi) {
  if (!voi.is_ellipsoid()) throw Error(ErrorCode::config, "mask VOIs are not serialized");
  const auto& c = voi.center_mm();
  const auto& r = voi.radii_mm();
  return {{"ellipsoid", {{"center_mm", {c.x(), c.y(), c.z()}}, {"radii_mm", {r.x(), r.y(), r.z()}}}}};
}

Voi voi_from_json(const nlohmann::json& j) {
  try {
    const auto& e = j.at("ellipsoid");
    const auto c = e.at("center_mm").get<std::array<double, 3>>();
    const auto r = e.at("radii_mm").get<std::array<double, 3>>();
    return Voi::ellipsoid({c[0], c[1], c[2]}, {r[0], r[1], r[2]});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed VOI: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

void TimeIntensityCurve::push_back(double t, double v, std::size_t n) {
  times.push_back(t);
  values.push_back(v);
  n_voxels.push_back(n);
}

TimeIntensityCurve TimeIntensityCurve::slice(double begin, double end) const {
  TimeIntensityCurve out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (times[i] >= begin && times[i] <= end) out.push_back(times[i], values[i], n_voxels[i]);
  }
  return out;
}

TimeIntensityCurve extract_tic(std::span<const VolumeFrame> frames, const Voi& voi,
                               double dynamic_range_db, std::span<const ValidityMask> masks) {
  if (!masks.empty() && masks.size() != frames.size()) {
    throw Error(ErrorCode::invalid_input, "one validity mask per frame required");
  }
  const auto lut = linearization_table(dynamic_range_db);
  TimeIntensityCurve tic;
  std::optional<GridGeometry> cached_grid;
  std::vector<std::size_t> indices;

  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& frame = frames[f];
    if (!tic.empty() && !(frame.timestamp > tic.times.back())) {
      throw Error(ErrorCode::invalid_input, "frames are not time-ordered");
    }
    if (!cached_grid || !(*cached_grid == frame.grid)) {
      indices = voi.voxel_indices(frame.grid);
      cached_grid = frame.grid;
    }
    const ValidityMask* mask = masks.empty() ? nullptr : &masks[f];
    if (mask && mask->size() != frame.voxels.size()) {
      throw Error(ErrorCode::invalid_input, "validity mask size does not match frame");
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t idx : indices) {
      if (mask && (*mask)[idx] == 0) continue;
      sum += lut[frame.voxels[idx]];
      ++n;
    }
    if (n > 0) tic.push_back(frame.timestamp, sum / static_cast<double>(n), n);
  }
  if (tic.empty()) throw Error(ErrorCode::empty_voi, "VOI has no valid voxels in any frame");
  return tic;
}

// ---------------------------------------------------------------------------

SteadyStateReport detect_steady_state(const TimeIntensityCurve& tic, const SteadyStateOptions& options) {
  if (!(options.window_s > 0.0) || !(options.slope_tolerance > 0.0)) {
    throw Error(ErrorCode::config, "steady-state window and tolerance must be positive");
  }
  SteadyStateReport report;
  report.window_s = options.window_s;
  report.slope_tolerance = options.slope_tolerance;
  if (tic.size() < 3 || tic.times.back() - tic.times.front() < options.window_s) {
    throw Error(ErrorCode::insufficient_data, "TIC shorter than the steady-state window");
  }

  constexpr double eps = 1e-9;
  const double start = tic.times.front();
  std::size_t first = 0;
  for (std::size_t k = 0; k < tic.size(); ++k) {
    const double t = tic.times[k];
    if (t - start < options.window_s - eps) continue;
    while (tic.times[first] < t - options.window_s - eps) ++first;
    const std::size_t n = k - first + 1;
    if (n < 3) throw Error(ErrorCode::insufficient_data, "fewer than 3 samples in a steady-state window");

    double tm = 0.0, ym = 0.0;
    for (std::size_t j = first; j <= k; ++j) {
      tm += tic.times[j];
      ym += tic.values[j];
    }
    tm /= static_cast<double>(n);
    ym /= static_cast<double>(n);
    double stt = 0.0, sty = 0.0;
    for (std::size_t j = first; j <= k; ++j) {
      const double dt = tic.times[j] - tm;
      stt += dt * dt;
      sty += dt * (tic.values[j] - ym);
    }
    const double slope = sty / stt;
    if (std::abs(slope) <= options.slope_tolerance * std::abs(ym)) {
      report.reached = true;
      report.time_to_steady = t - start;
      return report;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

struct Projection {
  double A = 0.0;
  double rss = 0.0;
};

class ReplenishmentProblem {
 public:
  ReplenishmentProblem(const TimeIntensityCurve& seg, double t0) : seg_(seg), t0_(t0) {}

  Projection project(double beta) const {
    double sff = 0.0, syf = 0.0;
    for (std::size_t i = 0; i < seg_.size(); ++i) {
      const double f = -std::expm1(-beta * (seg_.times[i] - t0_));
      sff += f * f;
      syf += seg_.values[i] * f;
    }
    Projection p;
    p.A = sff > 0.0 ? std::max(0.0, syf / sff) : 0.0;
    p.rss = replenishment_rss(seg_, t0_, p.A, beta);
    return p;
  }

 private:
  const TimeIntensityCurve& seg_;
  double t0_;
};

}  // namespace

double replenishment_rss(const TimeIntensityCurve& segment, double t0, double A, double beta) {
  double rss = 0.0;
  for (std::size_t i = 0; i < segment.size(); ++i) {
    const double r = segment.values[i] + A * std::expm1(-beta * (segment.times[i] - t0));
    rss += r * r;
  }
  return rss;
}

FitResult fit_replenishment(const TimeIntensityCurve& segment, const FitOptions& options) {
  if (segment.size() < options.min_samples) {
    throw Error(ErrorCode::insufficient_data, "replenishment segment has " +
                                                  std::to_string(segment.size()) + " samples");
  }
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (!std::isfinite(segment.times[i]) || !std::isfinite(segment.values[i])) {
      throw Error(ErrorCode::invalid_input, "non-finite TIC sample");
    }
    if (i > 0 && !(segment.times[i] > segment.times[i - 1])) {
      throw Error(ErrorCode::invalid_input, "TIC times are not strictly increasing");
    }
  }
  if (segment.times.back() - segment.times.front() < options.min_span_s) {
    throw Error(ErrorCode::insufficient_data, "replenishment segment spans less than the minimum");
  }
  if (!(options.beta_min > 0.0) || !(options.beta_max > options.beta_min) || options.grid_points < 3) {
    throw Error(ErrorCode::config, "invalid beta search bracket");
  }

  FitResult result;
  result.t0 = options.t0.value_or(segment.times.front());
  const ReplenishmentProblem problem(segment, result.t0);

  const double n = static_cast<double>(segment.size());
  double mean = 0.0;
  for (double v : segment.values) mean += v;
  mean /= n;
  double sst = 0.0;
  for (double v : segment.values) sst += (v - mean) * (v - mean);

  const bool all_zero =
      std::all_of(segment.values.begin(), segment.values.end(), [](double v) { return v == 0.0; });
  if (all_zero) {
    result.degenerate = true;
    return result;
  }

  // Probes on u = ln β; the best grid cell brackets the golden-section refinement.
  const double u_lo = std::log(options.beta_min);
  const double u_hi = std::log(options.beta_max);
  std::vector<std::pair<double, double>> probes;  // (u, rss)
  auto eval = [&](double u) {
    const double rss = problem.project(std::exp(u)).rss;
    probes.emplace_back(u, rss);
    return rss;
  };

  const std::size_t m = options.grid_points;
  const double du = (u_hi - u_lo) / static_cast<double>(m - 1);
  std::size_t best = 0;
  double best_rss = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m; ++i) {
    const double rss = eval(u_lo + du * static_cast<double>(i));
    if (rss < best_rss) {
      best_rss = rss;
      best = i;
    }
  }

  double a = u_lo + du * static_cast<double>(best == 0 ? 0 : best - 1);
  double b = u_lo + du * static_cast<double>(std::min(best + 1, m - 1));
  constexpr double inv_phi = 0.6180339887498949;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = eval(c);
  double fd = eval(d);
  while (b - a > options.relative_tolerance) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = eval(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = eval(d);
    }
  }
  eval(0.5 * (a + b));

  const auto argmin = std::min_element(probes.begin(), probes.end(),
                                       [](const auto& l, const auto& r) { return l.second < r.second; });
  const double u_best = argmin->first;
  const Projection p = problem.project(std::exp(u_best));

  result.A = p.A;
  result.beta = std::exp(u_best);
  result.rBV = result.A;
  result.rBF = result.A * result.beta;
  result.rms_residual = std::sqrt(p.rss / n);
  result.at_bound = (u_best - u_lo) < 1e-6 || (u_hi - u_best) < 1e-6;
  if (sst > 0.0) {
    result.r_squared = 1.0 - p.rss / sst;
  } else {
    result.degenerate = true;
  }
  if (result.A == 0.0) {
    result.degenerate = true;
    result.beta = 0.0;
    result.rBF = 0.0;
    result.r_squared = 0.0;
  }
  if (options.record_probes) {
    result.probes.reserve(probes.size());
    for (const auto& [u, rss] : probes) result.probes.emplace_back(std::exp(u), rss);
  }
  return result;
}

TimeIntensityCurve replenishment_segment(const TimeIntensityCurve& tic, double flash_time,
                                         double max_span_s, std::optional<double> next_flash) {
  TimeIntensityCurve out;
  const double end = flash_time + max_span_s;
  for (std::size_t i = 0; i < tic.size(); ++i) {
    const double t = tic.times[i];
    if (t < flash_time || t >= end) continue;
    if (next_flash && t >= *next_flash) continue;
    out.push_back(t, tic.values[i], tic.n_voxels[i]);
  }
  return out;
}

nlohmann::json to_json(const FitResult& fit) {
  return {{"A", fit.A},          {"beta", fit.beta},
          {"rBV", fit.rBV},      {"rBF", fit.rBF},
          {"rms_residual", fit.rms_residual},
          {"r_squared", fit.r_squared},
          {"t0", fit.t0},        {"degenerate", fit.degenerate},
          {"at_bound", fit.at_bound}};
}

nlohmann::json to_json(const SteadyStateReport& report) {
  return {{"reached", report.reached},
          {"time_to_steady_s", report.time_to_steady},
          {"window_s", report.window_s},
          {"slope_tolerance", report.slope_tolerance}};
}

}  // namespace ceusnav
