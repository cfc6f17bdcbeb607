#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceusnav/geometry.hpp"
#include "ceusnav/volume.hpp"

namespace ceusnav {

// Wire layout, all little-endian:
//   "SNAV" | version u8 | kind u8 | timestamp_us u64 | payload_len u32 | payload
// frame payload:   pose 7×f64 (qw qx qy qz tx ty tz) | dims 3×u16 | voxel_size 3×f32 | voxels
// tracker payload: pose 7×f64 | quality f32 | dropout u8
// control payload: UTF-8 "key=value" lines joined by '\n'
inline constexpr std::array<std::uint8_t, 4> kMagic{'S', 'N', 'A', 'V'};
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderSize = 18;
inline constexpr std::size_t kPoseSize = 56;
inline constexpr std::size_t kMaxPayload = 256u * 1024u * 1024u;

enum class MessageKind : std::uint8_t { frame = 1, tracker = 2, control = 3 };

struct FramePayload {
  std::optional<RigidTransform> pose;  // encoded as seven zeros when absent
  std::array<std::uint16_t, 3> dims{};
  std::array<float, 3> voxel_size{};
  std::vector<std::uint8_t> voxels;

  bool operator==(const FramePayload&) const = default;
};

struct TrackerPayload {
  RigidTransform pose;
  float quality = 0.0f;
  bool dropout = false;

  bool operator==(const TrackerPayload&) const = default;
};

struct ControlPayload {
  std::vector<std::pair<std::string, std::string>> fields;

  /// Value of the "event" key, empty if absent.
  std::string event() const;
  std::optional<std::string> get(const std::string& key) const;
  bool operator==(const ControlPayload&) const = default;
};

/// Control event names understood by sources and the console.
namespace control_event {
inline constexpr const char* capture_reference = "capture_reference";
inline constexpr const char* flash = "flash";
inline constexpr const char* infusion_start = "infusion_start";
inline constexpr const char* infusion_stop = "infusion_stop";
inline constexpr const char* feedback_mode = "feedback_mode";
}  // namespace control_event

struct Message {
  MessageKind kind = MessageKind::control;
  std::uint64_t timestamp_us = 0;
  std::variant<FramePayload, TrackerPayload, ControlPayload> payload;

  double time_s() const { return static_cast<double>(timestamp_us) * 1e-6; }
  bool operator==(const Message&) const = default;
};

Message make_control(std::uint64_t timestamp_us, const std::string& event,
                     std::vector<std::pair<std::string, std::string>> extra = {});
Message make_tracker(const TrackedSample& sample);
Message make_dropout(double timestamp_s);
Message make_frame(const VolumeFrame& frame);
VolumeFrame to_volume_frame(const Message& msg);
std::uint64_t to_timestamp_us(double seconds);

std::vector<std::uint8_t> encode_message(const Message& msg);
/// Appends the encoding to `out`.
void encode_message(const Message& msg, std::vector<std::uint8_t>& out);
std::size_t encoded_size(const Message& msg);

enum class DecodeStatus { ok, need_more, bad_magic, bad_version, too_large, framing, bad_payload };

/// Non-throwing decoder core. On ok, `consumed` is the message length. On
/// need_more, the input is a valid prefix. Never reads past `bytes`.
DecodeStatus try_decode(std::span<const std::uint8_t> bytes, Message& out, std::size_t& consumed);

/// Decodes exactly one message occupying all of `bytes`. Throws
/// protocol / unsupported-version / framing / size errors.
Message decode_message(std::span<const std::uint8_t> bytes);

/// Incremental decoder for a byte stream. Malformed data is skipped by
/// scanning forward to the next magic.
class StreamDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  std::optional<Message> next();
  std::size_t error_count() const { return errors_; }
  std::optional<DecodeStatus> last_error() const { return last_error_; }
  std::size_t buffered() const { return buffer_.size() - offset_; }

 private:
  void compact();

  std::vector<std::uint8_t> buffer_;
  std::size_t offset_ = 0;
  std::size_t errors_ = 0;
  std::optional<DecodeStatus> last_error_;
};

// ---------------------------------------------------------------------------
// Session files: "SNAVLOG1" | config_len u32 | config JSON | encoded messages

inline constexpr std::array<char, 8> kLogMagic{'S', 'N', 'A', 'V', 'L', 'O', 'G', '1'};

struct SessionLog {
  nlohmann::json config = nlohmann::json::object();
  std::vector<Message> messages;
};

/// Adds protocol version, seed and content digests to a session header.
nlohmann::json make_session_header(nlohmann::json config, std::uint64_t seed,
                                   const nlohmann::json& phantom_spec = nullptr);
/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string json_digest(const nlohmann::json& j);

/// Streams messages to `<path>.partial` and renames to `path` on finish().
/// If the recorder is destroyed unfinished or I/O fails, the .partial file
/// stays behind as the marker of an incomplete recording.
class SessionRecorder {
 public:
  SessionRecorder(std::filesystem::path path, const nlohmann::json& config);
  ~SessionRecorder();
  SessionRecorder(const SessionRecorder&) = delete;
  SessionRecorder& operator=(const SessionRecorder&) = delete;

  void append(const Message& msg);
  void append_encoded(std::span<const std::uint8_t> bytes);
  void finish();
  std::size_t message_count() const { return count_; }
  static std::filesystem::path partial_path(const std::filesystem::path& path);

 private:
  std::filesystem::path path_;
  std::filesystem::path partial_;
  std::ofstream out_;
  std::size_t count_ = 0;
  std::uint64_t last_timestamp_ = 0;
  bool finished_ = false;
  std::vector<std::uint8_t> scratch_;
};

void record_session(const SessionLog& log, const std::filesystem::path& path);

class SessionReader {
 public:
  explicit SessionReader(const std::filesystem::path& path);
  const nlohmann::json& config() const { return config_; }
  /// Next message, nullopt at end of file. Corruption raises framing errors.
  std::optional<Message> next();

 private:
  std::ifstream in_;
  nlohmann::json config_;
  std::vector<std::uint8_t> buffer_;
};

SessionLog read_session(const std::filesystem::path& path);

}  // namespace ceusnav
