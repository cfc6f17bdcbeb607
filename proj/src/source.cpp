#include "ceusnav/source.hpp"

#include <algorithm>
#include <cmath>

#include "ceusnav/error.hpp"

namespace ceusnav {

ReplaySource::ReplaySource(const std::filesystem::path& path)
    : reader_(std::make_unique<SessionReader>(path)), header_(reader_->config()) {}

ReplaySource::ReplaySource(SessionLog log) : log_(std::move(log)), header_(log_->config) {}

std::optional<Message> ReplaySource::next() {
  if (reader_) return reader_->next();
  if (index_ >= log_->messages.size()) return std::nullopt;
  return log_->messages[index_++];
}

// ---------------------------------------------------------------------------

namespace {

const EllipsoidPrimitive* find_lesion(const PhantomSpec& spec) {
  const EllipsoidPrimitive* lesion = nullptr;
  for (const auto& p : spec.primitives) {
    if (const auto* e = std::get_if<EllipsoidPrimitive>(&p); e && e->tissue == Tissue::lesion) lesion = e;
  }
  return lesion;
}

nlohmann::json to_json(const RenderSettings& r) {
  return {{"image_grid", to_json(r.image_grid)}, {"noise_sd", r.noise_sd}, {"dynamic_range_db", r.dynamic_range_db}};
}

RenderSettings render_from_json(const nlohmann::json& j, RenderSettings r) {
  if (j.contains("image_grid")) r.image_grid = grid_from_json(j.at("image_grid"));
  r.noise_sd = j.value("noise_sd", r.noise_sd);
  r.dynamic_range_db = j.value("dynamic_range_db", r.dynamic_range_db);
  return r;
}

}  // namespace

RigidTransform SimulationConfig::reference_pose() const {
  if (probe_reference) return *probe_reference;
  const auto* lesion = find_lesion(phantom);
  const Vec3 target = lesion ? lesion->center_mm : Vec3::Zero();
  return RigidTransform::from_translation(target - render.image_grid.center_local());
}

Voi SimulationConfig::lesion_voi(double shrink) const {
  const auto* lesion = find_lesion(phantom);
  if (!lesion) throw Error(ErrorCode::config, "phantom has no lesion");
  const Vec3 center = reference_pose().inverse().apply(lesion->center_mm);
  return Voi::ellipsoid(center, lesion->radii_mm * shrink);
}

void SimulationConfig::validate() const {
  motion.validate();
  tracker.validate();
  calibration.validate();
  render.image_grid.validate();
  if (probe_reference) probe_reference->validate();
  if (!(duration_s > 0.0)) throw Error(ErrorCode::config, "duration must be positive");
  if (!(frame_rate_hz > 0.0)) throw Error(ErrorCode::config, "frame rate must be positive");
  const double ratio = tracker.rate_hz / frame_rate_hz;
  if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1.0) {
    throw Error(ErrorCode::config, "tracker rate must be an integer multiple of the frame rate");
  }
  if (!(render.noise_sd >= 0.0)) throw Error(ErrorCode::config, "noise_sd must be >= 0");
  if (!(flash_spacing_s > 0.0)) throw Error(ErrorCode::config, "flash spacing must be positive");
  if (steady.window_s * frame_rate_hz < 2.0 || !(steady.slope_tolerance > 0.0)) {
    throw Error(ErrorCode::config, "steady-state window must span at least 3 frames");
  }
  for (double f : flash_times) {
    if (!(f >= 0.0 && f <= duration_s)) throw Error(ErrorCode::config, "flash time outside the session");
  }
}

nlohmann::json to_json(const SimulationConfig& c) {
  nlohmann::json j = {{"phantom", to_json(c.phantom)},
                      {"render", to_json(c.render)},
                      {"motion", to_json(c.motion)},
                      {"tracker", to_json(c.tracker)},
                      {"probe_reference", to_json(c.reference_pose())},
                      {"calibration", to_json(c.calibration)},
                      {"duration_s", c.duration_s},
                      {"frame_rate_hz", c.frame_rate_hz},
                      {"flash_times", c.flash_times},
                      {"auto_flash", c.auto_flash},
                      {"flash_count", c.flash_count},
                      {"flash_spacing_s", c.flash_spacing_s},
                      {"steady_window_s", c.steady.window_s},
                      {"steady_slope_tolerance", c.steady.slope_tolerance},
                      {"breath_hold_s", c.breath_hold_s},
                      {"emit_tracker", c.emit_tracker},
                      {"seed", c.seed}};
  return j;
}

SimulationConfig simulation_config_from_json(const nlohmann::json& j) {
  SimulationConfig c;
  try {
    if (j.contains("phantom")) c.phantom = phantom_spec_from_json(j.at("phantom"));
    if (j.contains("render")) c.render = render_from_json(j.at("render"), c.render);
    if (j.contains("motion")) c.motion = motion_model_from_json(j.at("motion"));
    if (j.contains("tracker")) c.tracker = tracker_noise_from_json(j.at("tracker"));
    if (j.contains("probe_reference")) c.probe_reference = pose_from_json(j.at("probe_reference"));
    if (j.contains("calibration")) c.calibration = pose_from_json(j.at("calibration"));
    c.duration_s = j.value("duration_s", c.duration_s);
    c.frame_rate_hz = j.value("frame_rate_hz", c.frame_rate_hz);
    c.flash_times = j.value("flash_times", c.flash_times);
    c.auto_flash = j.value("auto_flash", c.auto_flash);
    c.flash_count = j.value("flash_count", c.flash_count);
    c.flash_spacing_s = j.value("flash_spacing_s", c.flash_spacing_s);
    c.steady.window_s = j.value("steady_window_s", c.steady.window_s);
    c.steady.slope_tolerance = j.value("steady_slope_tolerance", c.steady.slope_tolerance);
    c.breath_hold_s = j.value("breath_hold_s", c.breath_hold_s);
    c.emit_tracker = j.value("emit_tracker", c.emit_tracker);
    c.seed = j.value("seed", c.seed);
    if (j.contains("seed") && !j.contains("motion")) c.motion.seed = c.seed;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed simulation config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

SessionOptions generator_options(const SimulationConfig& c) {
  SessionOptions o;
  o.duration_s = c.duration_s;
  o.flash_times = c.auto_flash ? std::vector<double>{} : c.flash_times;
  o.reference = c.reference_pose() * c.calibration.inverse();
  o.breath_hold_after_flash_s = c.breath_hold_s;
  return o;
}

}  // namespace

LiveSimulationSource::LiveSimulationSource(SimulationConfig config)
    : config_((config.validate(), std::move(config))),
      phantom_(config_.phantom),
      generator_(config_.motion, config_.tracker, generator_options(config_)),
      lut_(linearization_table(config_.render.dynamic_range_db)) {
  header_ = make_session_header(to_json(config_), config_.seed, to_json(config_.phantom));
  samples_per_frame_ = static_cast<std::size_t>(std::llround(config_.tracker.rate_hz / config_.frame_rate_hz));
  if (!config_.auto_flash) {
    flashes_ = config_.flash_times;
    std::sort(flashes_.begin(), flashes_.end());
  }
  monitor_voxels_ = config_.lesion_voi().voxel_indices(config_.render.image_grid);
}

void LiveSimulationSource::add_flash(double t) {
  if (!(t >= 0.0 && t <= config_.duration_s)) return;
  generator_.add_flash(t);
  flashes_.insert(std::upper_bound(flashes_.begin(), flashes_.end(), t), t);
}

void LiveSimulationSource::monitor_frame(const VolumeFrame& frame) {
  if (monitor_voxels_.empty()) return;
  double sum = 0.0;
  for (auto idx : monitor_voxels_) sum += lut_[frame.voxels[idx]];
  monitor_.push_back(frame.timestamp, sum / static_cast<double>(monitor_voxels_.size()), monitor_voxels_.size());

  if (!config_.auto_flash || steady_at_ || config_.flash_count == 0) return;
  const double t = frame.timestamp;
  const double w = config_.steady.window_s;
  if (t - monitor_.times.front() < w) return;
  const auto report = detect_steady_state(monitor_.slice(t - w, t), config_.steady);
  if (!report.reached) return;
  steady_at_ = t;
  const double first = t + 1.0 / config_.frame_rate_hz;
  for (std::size_t i = 0; i < config_.flash_count; ++i) {
    add_flash(first + config_.flash_spacing_s * static_cast<double>(i));
  }
}

Message LiveSimulationSource::frame_message(double t, const SessionSample& sample) {
  const RigidTransform image_truth = sample.truth * config_.calibration;
  VolumeFrame frame = render_frame(phantom_, config_.phantom.kinetics, t, image_truth, flashes_,
                                   mix_seed(config_.seed, 0x6672616d65ULL + frame_index_), config_.render);
  if (sample.measured) {
    frame.pose = sample.measured->marker_pose * config_.calibration;
  } else {
    frame.pose.reset();
  }
  ++frame_index_;
  monitor_frame(frame);
  return make_frame(frame);
}

std::optional<Message> LiveSimulationSource::next() {
  if (!started_) {
    started_ = true;
    pending_.push_back(make_control(0, control_event::infusion_start));
    pending_.push_back(make_control(0, control_event::capture_reference));
  }
  while (pending_.empty()) {
    const auto sample = generator_.next();
    if (!sample) return std::nullopt;
    const double t = sample->t;
    while (announced_ < flashes_.size() && flashes_[announced_] <= t) {
      pending_.push_back(make_control(to_timestamp_us(flashes_[announced_]), control_event::flash));
      ++announced_;
    }
    if (config_.emit_tracker) {
      pending_.push_back(sample->measured ? make_tracker(*sample->measured) : make_dropout(t));
    }
    if (sample_index_ % samples_per_frame_ == 0) pending_.push_back(frame_message(t, *sample));
    ++sample_index_;
  }
  Message m = std::move(pending_.front());
  pending_.pop_front();
  now_ = m.time_s();
  return m;
}

bool LiveSimulationSource::on_control(const Message& msg) {
  const auto* c = std::get_if<ControlPayload>(&msg.payload);
  if (!c) return false;
  if (c->event() == control_event::flash) {
    if (!(now_ <= config_.duration_s)) return false;
    generator_.add_flash(now_);
    const auto pos = std::upper_bound(flashes_.begin(), flashes_.end(), now_);
    // Already past this instant, so the new flash counts as announced.
    if (static_cast<std::size_t>(pos - flashes_.begin()) <= announced_) ++announced_;
    flashes_.insert(pos, now_);
  }
  Message echo = msg;
  echo.timestamp_us = to_timestamp_us(now_);
  pending_.push_back(std::move(echo));
  return true;
}

SessionLog collect(MessageSource& source) {
  SessionLog log;
  log.config = source.header();
  while (auto m = source.next()) log.messages.push_back(std::move(*m));
  return log;
}

}  // namespace ceusnav
