#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceusnav/geometry.hpp"

namespace ceusnav {

enum class MotionKind { hold_bmode, hold_tracked, hold_blind, reposition, breathing };

std::string_view to_string(MotionKind kind);
MotionKind motion_kind_from_string(std::string_view name);

/// Parameterized operator/patient motion. The kind picks tuned defaults; the
/// simulated perturbation is the sum of
///  - mean-reverting (Ornstein–Uhlenbeck) jitter with stationary SD
///    jitter_sd_mm and rate reversion_rate_per_s,
///  - an unbounded random walk whose RMS excursion after one minute is
///    drift_rate_mm_per_min,
///  - a sinusoid of breathing_amplitude_mm along breathing_axis,
///  - for `reposition`, an initial offset decaying with approach_time_s.
struct MotionModel {
  MotionKind kind = MotionKind::hold_bmode;
  double drift_rate_mm_per_min = 0.0;
  double jitter_sd_mm = 0.0;
  double reversion_rate_per_s = 0.0;
  double breathing_amplitude_mm = 0.0;
  double breathing_period_s = 4.0;
  Vec3 breathing_axis{0.0, 1.0, 0.0};
  double rot_jitter_sd_deg = 0.0;
  double initial_offset_mm = 0.0;
  double approach_time_s = 5.0;
  std::uint64_t seed = 0;

  /// Tuned constants per feedback condition (see README for the values).
  static MotionModel defaults(MotionKind kind, std::uint64_t seed = 0);
  void validate() const;
};

nlohmann::json to_json(const MotionModel& model);
/// Starts from defaults(kind) and overrides any fields present.
MotionModel motion_model_from_json(const nlohmann::json& j);

/// Lazily simulated motion path for one model. Stochastic components are
/// integrated on a fixed internal step and linearly interpolated, so
/// at(t) is a deterministic function of (model, t). Single owner.
class MotionPath {
 public:
  explicit MotionPath(const MotionModel& model, double step_s = 0.05);

  /// Perturbation from the reference pose at time t ≥ 0: a translation in
  /// world mm and a rotation about the probe origin.
  RigidTransform at(double t);
  /// Same with the breathing component scaled by `breathing_gain` in [0,1].
  RigidTransform at(double t, double breathing_gain);

  const MotionModel& model() const { return model_; }

 private:
  struct Node {
    Vec3 jitter = Vec3::Zero();
    Vec3 walk = Vec3::Zero();
    Vec3 rot = Vec3::Zero();  // rotation vector, rad
  };
  void extend_to(std::size_t index);

  MotionModel model_;
  double step_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> gauss_{0.0, 1.0};
  std::vector<Node> nodes_;
  Vec3 offset_dir_ = Vec3::UnitX();
};

/// Convenience: MotionPath(model).at(t).
RigidTransform sample_motion(const MotionModel& model, double t);

/// Applies a perturbation to a reference probe pose: translation in world
/// coordinates, rotation about the probe origin.
RigidTransform apply_perturbation(const RigidTransform& reference, const RigidTransform& perturbation);

struct TrackerNoise {
  double trans_sd_mm = 0.1;
  double rot_sd_deg = 0.05;
  double dropout_prob = 0.0;
  double rate_hz = 60.0;

  void validate() const;
};

nlohmann::json to_json(const TrackerNoise& noise);
TrackerNoise tracker_noise_from_json(const nlohmann::json& j);

/// Noisy optical-tracker reading of `true_pose`; nullopt is a dropout.
std::optional<TrackedSample> measure_tracker(const RigidTransform& true_pose, const TrackerNoise& noise,
                                             double timestamp, std::mt19937_64& rng);

struct SessionSample {
  double t = 0.0;
  RigidTransform truth;                  // true probe pose
  std::optional<TrackedSample> measured; // nullopt on dropout
};

struct SessionOptions {
  double duration_s = 10.0;
  std::vector<double> flash_times;
  RigidTransform reference;              // probe pose at the captured reference
  double breath_hold_after_flash_s = 0.0; // breathing suppressed this long after each flash
};

/// Tracker stream generator at noise.rate_hz. Ground truth is kept next to
/// each measurement. Reproducible per model seed.
class SessionGenerator {
 public:
  SessionGenerator(const MotionModel& model, const TrackerNoise& noise, SessionOptions options);

  std::optional<SessionSample> next();
  /// Ground truth without advancing the tracker stream.
  RigidTransform truth_at(double t);
  const std::vector<double>& flash_times() const { return options_.flash_times; }
  void add_flash(double t);
  std::size_t sample_count() const;

 private:
  double breathing_gain(double t) const;

  MotionPath path_;
  TrackerNoise noise_;
  SessionOptions options_;
  std::mt19937_64 tracker_rng_;
  std::size_t index_ = 0;
  std::size_t count_ = 0;
};

struct SimulatedSession {
  std::vector<SessionSample> samples;
  std::vector<double> flash_times;
};

SimulatedSession generate_session(const MotionModel& model, const TrackerNoise& noise,
                                  const SessionOptions& options);

/// Disruption schedule: `count` flashes starting at t_steady, `spacing_s` apart.
std::vector<double> disruption_schedule(double t_steady, std::size_t count = 2, double spacing_s = 150.0);

/// Stable 64-bit seed mixing (splitmix64) for per-run seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace ceusnav
