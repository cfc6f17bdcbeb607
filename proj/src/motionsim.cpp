#include "ceusnav/motionsim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ceusnav/error.hpp"

namespace ceusnav {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
}

std::string_view to_string(MotionKind kind) {
  switch (kind) {
    case MotionKind::hold_bmode: return "hold_bmode";
    case MotionKind::hold_tracked: return "hold_tracked";
    case MotionKind::hold_blind: return "hold_blind";
    case MotionKind::reposition: return "reposition";
    case MotionKind::breathing: return "breathing";
  }
  return "unknown";
}

MotionKind motion_kind_from_string(std::string_view name) {
  for (auto k : {MotionKind::hold_bmode, MotionKind::hold_tracked, MotionKind::hold_blind,
                 MotionKind::reposition, MotionKind::breathing}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorCode::config, "unknown motion kind '" + std::string(name) + "'");
}

MotionModel MotionModel::defaults(MotionKind kind, std::uint64_t seed) {
  MotionModel m;
  m.kind = kind;
  m.seed = seed;
  switch (kind) {
    case MotionKind::hold_bmode:
      m.jitter_sd_mm = 2.0;
      m.reversion_rate_per_s = 0.08;
      m.rot_jitter_sd_deg = 0.5;
      break;
    case MotionKind::hold_tracked:
      m.jitter_sd_mm = 1.4;
      m.reversion_rate_per_s = 0.25;
      m.rot_jitter_sd_deg = 0.3;
      break;
    case MotionKind::hold_blind:
      m.drift_rate_mm_per_min = 3.5;
      m.jitter_sd_mm = 0.8;
      m.reversion_rate_per_s = 0.5;
      m.rot_jitter_sd_deg = 0.5;
      break;
    case MotionKind::reposition:
      m.initial_offset_mm = 25.0;
      m.approach_time_s = 6.0;
      m.jitter_sd_mm = 1.0;
      m.reversion_rate_per_s = 0.3;
      m.rot_jitter_sd_deg = 0.3;
      break;
    case MotionKind::breathing:
      m.breathing_amplitude_mm = 1.5;
      m.breathing_period_s = 4.0;
      break;
  }
  return m;
}

void MotionModel::validate() const {
  const bool nonneg = drift_rate_mm_per_min >= 0.0 && jitter_sd_mm >= 0.0 && reversion_rate_per_s >= 0.0 &&
                      breathing_amplitude_mm >= 0.0 && rot_jitter_sd_deg >= 0.0 && initial_offset_mm >= 0.0;
  if (!nonneg) throw Error(ErrorCode::config, "motion magnitudes must be non-negative");
  if (breathing_amplitude_mm > 0.0 && !(breathing_period_s > 0.0)) {
    throw Error(ErrorCode::config, "breathing period must be positive");
  }
  if (breathing_amplitude_mm > 0.0 && breathing_axis.norm() == 0.0) {
    throw Error(ErrorCode::config, "breathing axis must be nonzero");
  }
  if ((jitter_sd_mm > 0.0 || rot_jitter_sd_deg > 0.0) && !(reversion_rate_per_s > 0.0)) {
    throw Error(ErrorCode::config, "jitter needs a positive reversion rate");
  }
  if (initial_offset_mm > 0.0 && !(approach_time_s > 0.0)) {
    throw Error(ErrorCode::config, "approach time must be positive");
  }
}

nlohmann::json to_json(const MotionModel& m) {
  return {{"kind", to_string(m.kind)},
          {"drift_rate_mm_per_min", m.drift_rate_mm_per_min},
          {"jitter_sd_mm", m.jitter_sd_mm},
          {"reversion_rate_per_s", m.reversion_rate_per_s},
          {"breathing_amplitude_mm", m.breathing_amplitude_mm},
          {"breathing_period_s", m.breathing_period_s},
          {"breathing_axis", {m.breathing_axis.x(), m.breathing_axis.y(), m.breathing_axis.z()}},
          {"rot_jitter_sd_deg", m.rot_jitter_sd_deg},
          {"initial_offset_mm", m.initial_offset_mm},
          {"approach_time_s", m.approach_time_s},
          {"seed", m.seed}};
}

MotionModel motion_model_from_json(const nlohmann::json& j) {
  try {
    const MotionKind kind = motion_kind_from_string(j.value("kind", std::string("hold_bmode")));
    MotionModel m = MotionModel::defaults(kind, j.value("seed", std::uint64_t{0}));
    m.drift_rate_mm_per_min = j.value("drift_rate_mm_per_min", m.drift_rate_mm_per_min);
    m.jitter_sd_mm = j.value("jitter_sd_mm", m.jitter_sd_mm);
    m.reversion_rate_per_s = j.value("reversion_rate_per_s", m.reversion_rate_per_s);
    m.breathing_amplitude_mm = j.value("breathing_amplitude_mm", m.breathing_amplitude_mm);
    m.breathing_period_s = j.value("breathing_period_s", m.breathing_period_s);
    if (j.contains("breathing_axis")) {
      const auto a = j.at("breathing_axis").get<std::array<double, 3>>();
      m.breathing_axis = Vec3(a[0], a[1], a[2]);
    }
    m.rot_jitter_sd_deg = j.value("rot_jitter_sd_deg", m.rot_jitter_sd_deg);
    m.initial_offset_mm = j.value("initial_offset_mm", m.initial_offset_mm);
    m.approach_time_s = j.value("approach_time_s", m.approach_time_s);
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed motion model: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

MotionPath::MotionPath(const MotionModel& model, double step_s)
    : model_(model), step_(step_s), rng_(model.seed) {
  model_.validate();
  if (!(step_ > 0.0)) throw Error(ErrorCode::config, "motion step must be positive");
  Vec3 dir(gauss_(rng_), gauss_(rng_), gauss_(rng_));
  if (dir.norm() > 0.0) offset_dir_ = dir.normalized();
  nodes_.emplace_back();
}

void MotionPath::extend_to(std::size_t index) {
  const double theta = model_.reversion_rate_per_s;
  const double decay = std::exp(-theta * step_);
  const double innov = std::sqrt(std::max(0.0, 1.0 - decay * decay));
  const double jitter_step = model_.jitter_sd_mm * innov;
  const double rot_step = model_.rot_jitter_sd_deg * kDegToRad * innov;
  const double walk_step = model_.drift_rate_mm_per_min / std::sqrt(3.0) * std::sqrt(step_ / 60.0);

  while (nodes_.size() <= index) {
    Node n = nodes_.back();
    for (int a = 0; a < 3; ++a) {
      n.jitter[a] = n.jitter[a] * decay + jitter_step * gauss_(rng_);
      n.rot[a] = n.rot[a] * decay + rot_step * gauss_(rng_);
      n.walk[a] += walk_step * gauss_(rng_);
    }
    nodes_.push_back(n);
  }
}

RigidTransform MotionPath::at(double t) { return at(t, 1.0); }

RigidTransform MotionPath::at(double t, double breathing_gain) {
  if (!(t >= 0.0)) throw Error(ErrorCode::domain, "motion sampled at negative time");
  const double pos = t / step_;
  const auto i0 = static_cast<std::size_t>(std::floor(pos));
  const double w = pos - static_cast<double>(i0);
  extend_to(i0 + 1);
  const Node& a = nodes_[i0];
  const Node& b = nodes_[i0 + 1];

  Vec3 translation = (1.0 - w) * (a.jitter + a.walk) + w * (b.jitter + b.walk);
  const Vec3 rotvec = (1.0 - w) * a.rot + w * b.rot;

  if (model_.breathing_amplitude_mm > 0.0) {
    translation += breathing_gain * model_.breathing_amplitude_mm *
                   std::sin(2.0 * std::numbers::pi * t / model_.breathing_period_s) *
                   model_.breathing_axis.normalized();
  }
  if (model_.initial_offset_mm > 0.0) {
    translation += model_.initial_offset_mm * std::exp(-t / model_.approach_time_s) * offset_dir_;
  }
  return RigidTransform::from_rotation_vector(rotvec, translation);
}

RigidTransform sample_motion(const MotionModel& model, double t) {
  MotionPath path(model);
  return path.at(t);
}

RigidTransform apply_perturbation(const RigidTransform& reference, const RigidTransform& perturbation) {
  RigidTransform out;
  out.rotation = (reference.rotation * perturbation.rotation).normalized();
  out.translation = reference.translation + perturbation.translation;
  return out;
}

// ---------------------------------------------------------------------------

void TrackerNoise::validate() const {
  if (!(trans_sd_mm >= 0.0) || !(rot_sd_deg >= 0.0)) throw Error(ErrorCode::config, "tracker noise must be >= 0");
  if (!(dropout_prob >= 0.0 && dropout_prob <= 1.0)) throw Error(ErrorCode::config, "dropout_prob outside [0,1]");
  if (!(rate_hz > 0.0)) throw Error(ErrorCode::config, "tracker rate must be positive");
}

nlohmann::json to_json(const TrackerNoise& n) {
  return {{"trans_sd_mm", n.trans_sd_mm},
          {"rot_sd_deg", n.rot_sd_deg},
          {"dropout_prob", n.dropout_prob},
          {"rate_hz", n.rate_hz}};
}

TrackerNoise tracker_noise_from_json(const nlohmann::json& j) {
  TrackerNoise n;
  try {
    n.trans_sd_mm = j.value("trans_sd_mm", n.trans_sd_mm);
    n.rot_sd_deg = j.value("rot_sd_deg", n.rot_sd_deg);
    n.dropout_prob = j.value("dropout_prob", n.dropout_prob);
    n.rate_hz = j.value("rate_hz", n.rate_hz);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed tracker noise: ") + e.what());
  }
  n.validate();
  return n;
}

std::optional<TrackedSample> measure_tracker(const RigidTransform& true_pose, const TrackerNoise& noise,
                                             double timestamp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  // Always consume the same draws so dropouts do not shift later samples.
  const double u = uniform(rng);
  const Vec3 dt(gauss(rng), gauss(rng), gauss(rng));
  const Vec3 dr(gauss(rng), gauss(rng), gauss(rng));
  if (u < noise.dropout_prob) return std::nullopt;

  TrackedSample s;
  s.timestamp = timestamp;
  const Vec3 trans_noise = noise.trans_sd_mm * dt;
  const RigidTransform rot_noise = RigidTransform::from_rotation_vector(noise.rot_sd_deg * kDegToRad * dr);
  s.marker_pose.rotation = (true_pose.rotation * rot_noise.rotation).normalized();
  s.marker_pose.translation = true_pose.translation + trans_noise;
  s.quality = trans_noise.norm() / std::sqrt(3.0);
  return s;
}

// ---------------------------------------------------------------------------

SessionGenerator::SessionGenerator(const MotionModel& model, const TrackerNoise& noise, SessionOptions options)
    : path_(model), noise_(noise), options_(std::move(options)),
      tracker_rng_(mix_seed(model.seed, 0x7472616b6572ULL)) {
  noise_.validate();
  options_.reference.validate();
  if (!(options_.duration_s > 0.0)) throw Error(ErrorCode::config, "session duration must be positive");
  for (double f : options_.flash_times) {
    if (!(f >= 0.0 && f <= options_.duration_s)) {
      throw Error(ErrorCode::config, "flash at " + std::to_string(f) + " s lies outside the session");
    }
  }
  std::sort(options_.flash_times.begin(), options_.flash_times.end());
  count_ = static_cast<std::size_t>(std::llround(options_.duration_s * noise_.rate_hz));
}

std::size_t SessionGenerator::sample_count() const { return count_; }

void SessionGenerator::add_flash(double t) {
  if (!(t >= 0.0 && t <= options_.duration_s)) throw Error(ErrorCode::config, "flash outside the session");
  options_.flash_times.push_back(t);
  std::sort(options_.flash_times.begin(), options_.flash_times.end());
}

double SessionGenerator::breathing_gain(double t) const {
  if (options_.breath_hold_after_flash_s <= 0.0) return 1.0;
  for (double f : options_.flash_times) {
    if (t >= f && t < f + options_.breath_hold_after_flash_s) return 0.0;
  }
  return 1.0;
}

RigidTransform SessionGenerator::truth_at(double t) {
  return apply_perturbation(options_.reference, path_.at(t, breathing_gain(t)));
}

std::optional<SessionSample> SessionGenerator::next() {
  if (index_ >= count_) return std::nullopt;
  SessionSample s;
  s.t = static_cast<double>(index_) / noise_.rate_hz;
  s.truth = truth_at(s.t);
  s.measured = measure_tracker(s.truth, noise_, s.t, tracker_rng_);
  ++index_;
  return s;
}

SimulatedSession generate_session(const MotionModel& model, const TrackerNoise& noise,
                                  const SessionOptions& options) {
  SessionGenerator gen(model, noise, options);
  SimulatedSession session;
  session.samples.reserve(gen.sample_count());
  while (auto s = gen.next()) session.samples.push_back(*s);
  session.flash_times = gen.flash_times();
  return session;
}

std::vector<double> disruption_schedule(double t_steady, std::size_t count, double spacing_s) {
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(t_steady + spacing_s * static_cast<double>(i));
  return out;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace ceusnav
