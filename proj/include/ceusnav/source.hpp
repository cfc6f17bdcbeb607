#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceusnav/motionsim.hpp"
#include "ceusnav/phantom.hpp"
#include "ceusnav/quant.hpp"
#include "ceusnav/stream.hpp"

namespace ceusnav {

/// Producer of a time-ordered message stream. Not thread-safe; the server
/// serializes next() and on_control().
class MessageSource {
 public:
  virtual ~MessageSource() = default;
  /// Next message, nullopt once the session is over.
  virtual std::optional<Message> next() = 0;
  /// Upstream control from a client. Returns false if the source ignores it.
  virtual bool on_control(const Message& msg) = 0;
  virtual nlohmann::json header() const = 0;
};

/// Replays a recorded session file message by message.
class ReplaySource final : public MessageSource {
 public:
  explicit ReplaySource(const std::filesystem::path& path);
  explicit ReplaySource(SessionLog log);

  std::optional<Message> next() override;
  bool on_control(const Message&) override { return false; }
  nlohmann::json header() const override { return header_; }

 private:
  std::unique_ptr<SessionReader> reader_;
  std::optional<SessionLog> log_;
  std::size_t index_ = 0;
  nlohmann::json header_;
};

/// A simulated acquisition: phantom, probe motion, tracker and the flash
/// protocol. The tracker reports the marker pose; frames carry the tracked
/// image pose (marker pose composed with the calibration).
struct SimulationConfig {
  PhantomSpec phantom = PhantomSpec::defaults();
  RenderSettings render{{{64, 64, 64}, {1.0, 1.0, 1.0}}, 0.05, 60.0};
  MotionModel motion = MotionModel::defaults(MotionKind::breathing);
  TrackerNoise tracker;
  /// image -> world probe pose at the reference position. Defaults to the
  /// image grid centered on the lesion.
  std::optional<RigidTransform> probe_reference;
  RigidTransform calibration;  // image -> marker
  double duration_s = 480.0;
  double frame_rate_hz = 1.0;
  /// Fixed flash schedule. With auto_flash, flashes are instead placed from
  /// the live steady-state monitor: one frame after detection, then every
  /// flash_spacing_s.
  std::vector<double> flash_times;
  bool auto_flash = true;
  std::size_t flash_count = 2;
  double flash_spacing_s = 150.0;
  SteadyStateOptions steady;
  double breath_hold_s = 0.0;
  bool emit_tracker = true;
  std::uint64_t seed = 1;

  RigidTransform reference_pose() const;
  /// Lesion VOI on the reference image grid, radii scaled by `shrink`.
  Voi lesion_voi(double shrink = 0.85) const;
  void validate() const;
};

nlohmann::json to_json(const SimulationConfig& config);
/// Starts from the defaults and overrides the fields present.
SimulationConfig simulation_config_from_json(const nlohmann::json& j);

class LiveSimulationSource final : public MessageSource {
 public:
  explicit LiveSimulationSource(SimulationConfig config);

  std::optional<Message> next() override;
  /// Every control is echoed into the stream at the current session time; a
  /// flash also takes effect immediately.
  bool on_control(const Message& msg) override;
  nlohmann::json header() const override { return header_; }

  double current_time() const { return now_; }
  const std::vector<double>& flash_times() const { return flashes_; }
  /// Monitor TIC of the lesion VOI on raw frames, as the operator sees it.
  const TimeIntensityCurve& monitor_tic() const { return monitor_; }
  std::optional<double> steady_time() const { return steady_at_; }
  const SimulationConfig& config() const { return config_; }

 private:
  void add_flash(double t);
  void monitor_frame(const VolumeFrame& frame);
  Message frame_message(double t, const SessionSample& sample);

  SimulationConfig config_;
  Phantom phantom_;
  SessionGenerator generator_;
  nlohmann::json header_;
  std::deque<Message> pending_;
  std::vector<double> flashes_;
  std::size_t announced_ = 0;
  std::size_t samples_per_frame_ = 60;
  std::size_t sample_index_ = 0;
  std::size_t frame_index_ = 0;
  double now_ = 0.0;
  bool started_ = false;
  std::vector<std::size_t> monitor_voxels_;
  std::array<double, 256> lut_{};
  TimeIntensityCurve monitor_;
  std::optional<double> steady_at_;
};

/// Drains a source into an in-memory log.
SessionLog collect(MessageSource& source);

}  // namespace ceusnav
