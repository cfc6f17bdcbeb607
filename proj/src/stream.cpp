#include "ceusnav/stream.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "ceusnav/error.hpp"

namespace ceusnav {

static_assert(std::endian::native == std::endian::little, "codec assumes a little-endian host");

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get(const std::uint8_t* p) {
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

void put_pose(std::vector<std::uint8_t>& out, const std::optional<RigidTransform>& pose) {
  if (!pose) {
    for (int i = 0; i < 7; ++i) put<double>(out, 0.0);
    return;
  }
  const auto& q = pose->rotation;
  const auto& t = pose->translation;
  for (double v : {q.w(), q.x(), q.y(), q.z(), t.x(), t.y(), t.z()}) put<double>(out, v);
}

std::array<double, 7> get_pose_raw(const std::uint8_t* p) {
  std::array<double, 7> v{};
  for (std::size_t i = 0; i < 7; ++i) v[i] = get<double>(p + 8 * i);
  return v;
}

RigidTransform pose_from_raw(const std::array<double, 7>& v) {
  RigidTransform pose;
  pose.rotation = Eigen::Quaterniond(v[0], v[1], v[2], v[3]);
  pose.translation = Vec3(v[4], v[5], v[6]);
  return pose;
}

bool valid_utf8(std::span<const std::uint8_t> s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const std::uint8_t c = s[i];
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      if ((s[i + k] & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (s[i + k] & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

void check_control(const ControlPayload& c) {
  for (const auto& [key, value] : c.fields) {
    if (key.empty() || key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw Error(ErrorCode::invalid_input, "control field '" + key + "' is not encodable");
    }
  }
}

std::size_t payload_size(const Message& msg) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, FramePayload>) {
          return kPoseSize + 6 + 12 + p.voxels.size();
        } else if constexpr (std::is_same_v<T, TrackerPayload>) {
          return kPoseSize + 4 + 1;
        } else {
          std::size_t n = 0;
          for (const auto& [k, v] : p.fields) n += k.size() + 1 + v.size() + 1;
          return n == 0 ? 0 : n - 1;
        }
      },
      msg.payload);
}

MessageKind kind_of(const Message& msg) {
  switch (msg.payload.index()) {
    case 0: return MessageKind::frame;
    case 1: return MessageKind::tracker;
    default: return MessageKind::control;
  }
}

DecodeStatus decode_payload(MessageKind kind, std::span<const std::uint8_t> p, Message& out) {
  switch (kind) {
    case MessageKind::frame: {
      if (p.size() < kPoseSize + 18) return DecodeStatus::framing;
      FramePayload f;
      const auto raw = get_pose_raw(p.data());
      if (std::any_of(raw.begin(), raw.end(), [](double v) { return v != 0.0; })) {
        f.pose = pose_from_raw(raw);
        if (!f.pose->is_valid()) return DecodeStatus::bad_payload;
      }
      std::size_t n = 1;
      for (std::size_t i = 0; i < 3; ++i) {
        f.dims[i] = get<std::uint16_t>(p.data() + kPoseSize + 2 * i);
        f.voxel_size[i] = get<float>(p.data() + kPoseSize + 6 + 4 * i);
        n *= f.dims[i];
        if (!(std::isfinite(f.voxel_size[i]) && f.voxel_size[i] > 0.0f)) return DecodeStatus::bad_payload;
      }
      if (p.size() != kPoseSize + 18 + n) return DecodeStatus::framing;
      f.voxels.assign(p.begin() + kPoseSize + 18, p.end());
      out.payload = std::move(f);
      return DecodeStatus::ok;
    }
    case MessageKind::tracker: {
      if (p.size() != kPoseSize + 5) return DecodeStatus::framing;
      TrackerPayload t;
      t.pose = pose_from_raw(get_pose_raw(p.data()));
      t.quality = get<float>(p.data() + kPoseSize);
      const std::uint8_t flag = p[kPoseSize + 4];
      if (flag > 1) return DecodeStatus::bad_payload;
      t.dropout = flag == 1;
      if (!t.dropout && !t.pose.is_valid()) return DecodeStatus::bad_payload;
      if (!std::isfinite(t.quality)) return DecodeStatus::bad_payload;
      out.payload = std::move(t);
      return DecodeStatus::ok;
    }
    case MessageKind::control: {
      if (!valid_utf8(p)) return DecodeStatus::bad_payload;
      ControlPayload c;
      std::size_t start = 0;
      while (start < p.size() || (start == p.size() && start > 0 && p[start - 1] == '\n')) {
        std::size_t end = start;
        while (end < p.size() && p[end] != '\n') ++end;
        const std::string line(p.begin() + static_cast<std::ptrdiff_t>(start),
                               p.begin() + static_cast<std::ptrdiff_t>(end));
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0) return DecodeStatus::bad_payload;
        c.fields.emplace_back(line.substr(0, eq), line.substr(eq + 1));
        start = end + 1;
        if (end == p.size()) break;
      }
      out.payload = std::move(c);
      return DecodeStatus::ok;
    }
  }
  return DecodeStatus::bad_payload;
}

}  // namespace

std::string ControlPayload::event() const { return get("event").value_or(""); }

std::optional<std::string> ControlPayload::get(const std::string& key) const {
  for (const auto& [k, v] : fields) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::uint64_t to_timestamp_us(double seconds) {
  if (!(seconds >= 0.0)) throw Error(ErrorCode::invalid_input, "negative timestamp");
  return static_cast<std::uint64_t>(std::llround(seconds * 1e6));
}

Message make_control(std::uint64_t timestamp_us, const std::string& event,
                     std::vector<std::pair<std::string, std::string>> extra) {
  Message m;
  m.kind = MessageKind::control;
  m.timestamp_us = timestamp_us;
  ControlPayload c;
  c.fields.emplace_back("event", event);
  for (auto& f : extra) c.fields.push_back(std::move(f));
  m.payload = std::move(c);
  return m;
}

Message make_tracker(const TrackedSample& sample) {
  Message m;
  m.kind = MessageKind::tracker;
  m.timestamp_us = to_timestamp_us(sample.timestamp);
  m.payload = TrackerPayload{sample.marker_pose, static_cast<float>(sample.quality), false};
  return m;
}

Message make_dropout(double timestamp_s) {
  Message m;
  m.kind = MessageKind::tracker;
  m.timestamp_us = to_timestamp_us(timestamp_s);
  m.payload = TrackerPayload{RigidTransform::identity(), 0.0f, true};
  return m;
}

Message make_frame(const VolumeFrame& frame) {
  if (frame.voxels.size() != frame.grid.voxel_count()) {
    throw Error(ErrorCode::invalid_input, "frame voxel count does not match its grid");
  }
  Message m;
  m.kind = MessageKind::frame;
  m.timestamp_us = to_timestamp_us(frame.timestamp);
  FramePayload f;
  f.pose = frame.pose;
  for (std::size_t i = 0; i < 3; ++i) {
    if (frame.grid.dims[i] <= 0 || frame.grid.dims[i] > 65535) {
      throw Error(ErrorCode::invalid_input, "frame dimension does not fit u16");
    }
    f.dims[i] = static_cast<std::uint16_t>(frame.grid.dims[i]);
    f.voxel_size[i] = static_cast<float>(frame.grid.voxel_size[static_cast<Eigen::Index>(i)]);
  }
  f.voxels = frame.voxels;
  m.payload = std::move(f);
  return m;
}

VolumeFrame to_volume_frame(const Message& msg) {
  const auto* f = std::get_if<FramePayload>(&msg.payload);
  if (!f) throw Error(ErrorCode::invalid_input, "message is not a frame");
  VolumeFrame frame;
  frame.timestamp = msg.time_s();
  frame.pose = f->pose;
  for (std::size_t i = 0; i < 3; ++i) {
    frame.grid.dims[i] = f->dims[i];
    frame.grid.voxel_size[static_cast<Eigen::Index>(i)] = f->voxel_size[i];
  }
  frame.voxels = f->voxels;
  return frame;
}

std::size_t encoded_size(const Message& msg) { return kHeaderSize + payload_size(msg); }

void encode_message(const Message& msg, std::vector<std::uint8_t>& out) {
  if (msg.kind != kind_of(msg)) throw Error(ErrorCode::invalid_input, "message kind does not match payload");
  const std::size_t len = payload_size(msg);
  if (len > kMaxPayload) throw Error(ErrorCode::size, "payload of " + std::to_string(len) + " bytes exceeds 256 MiB");

  out.reserve(out.size() + kHeaderSize + len);
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put<std::uint8_t>(out, kProtocolVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(msg.kind));
  put<std::uint64_t>(out, msg.timestamp_us);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(len));

  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, FramePayload>) {
          if (p.pose) p.pose->validate();
          std::size_t n = 1;
          for (auto d : p.dims) n *= d;
          if (n != p.voxels.size()) throw Error(ErrorCode::invalid_input, "frame dims do not match voxel count");
          put_pose(out, p.pose);
          for (auto d : p.dims) put<std::uint16_t>(out, d);
          for (auto s : p.voxel_size) put<float>(out, s);
          out.insert(out.end(), p.voxels.begin(), p.voxels.end());
        } else if constexpr (std::is_same_v<T, TrackerPayload>) {
          if (!p.dropout) p.pose.validate();
          put_pose(out, p.pose);
          put<float>(out, p.quality);
          put<std::uint8_t>(out, p.dropout ? 1 : 0);
        } else {
          check_control(p);
          bool first = true;
          for (const auto& [k, v] : p.fields) {
            if (!first) out.push_back('\n');
            first = false;
            out.insert(out.end(), k.begin(), k.end());
            out.push_back('=');
            out.insert(out.end(), v.begin(), v.end());
          }
        }
      },
      msg.payload);
}

std::vector<std::uint8_t> encode_message(const Message& msg) {
  std::vector<std::uint8_t> out;
  encode_message(msg, out);
  return out;
}

DecodeStatus try_decode(std::span<const std::uint8_t> bytes, Message& out, std::size_t& consumed) {
  consumed = 0;
  const std::size_t magic_avail = std::min(bytes.size(), kMagic.size());
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(magic_avail), kMagic.begin())) {
    return DecodeStatus::bad_magic;
  }
  if (bytes.size() < kHeaderSize) return DecodeStatus::need_more;
  if (bytes[4] != kProtocolVersion) return DecodeStatus::bad_version;
  const std::uint8_t kind = bytes[5];
  if (kind < 1 || kind > 3) return DecodeStatus::bad_payload;
  const auto len = get<std::uint32_t>(bytes.data() + 14);
  if (len > kMaxPayload) return DecodeStatus::too_large;
  if (bytes.size() - kHeaderSize < len) return DecodeStatus::need_more;

  Message msg;
  msg.kind = static_cast<MessageKind>(kind);
  msg.timestamp_us = get<std::uint64_t>(bytes.data() + 6);
  const DecodeStatus st = decode_payload(msg.kind, bytes.subspan(kHeaderSize, len), msg);
  if (st != DecodeStatus::ok) return st;
  out = std::move(msg);
  consumed = kHeaderSize + len;
  return DecodeStatus::ok;
}

Message decode_message(std::span<const std::uint8_t> bytes) {
  Message msg;
  std::size_t consumed = 0;
  switch (try_decode(bytes, msg, consumed)) {
    case DecodeStatus::ok:
      if (consumed != bytes.size()) throw Error(ErrorCode::framing, "trailing bytes after message");
      return msg;
    case DecodeStatus::need_more: throw Error(ErrorCode::framing, "truncated message");
    case DecodeStatus::bad_magic: throw Error(ErrorCode::protocol, "bad magic");
    case DecodeStatus::bad_version: throw Error(ErrorCode::unsupported_version, "unsupported protocol version");
    case DecodeStatus::too_large: throw Error(ErrorCode::size, "declared payload exceeds 256 MiB");
    case DecodeStatus::framing: throw Error(ErrorCode::framing, "payload length does not match its content");
    case DecodeStatus::bad_payload: throw Error(ErrorCode::protocol, "malformed payload");
  }
  throw Error(ErrorCode::protocol, "undecodable message");
}

// ---------------------------------------------------------------------------

void StreamDecoder::feed(std::span<const std::uint8_t> bytes) {
  compact();
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

void StreamDecoder::compact() {
  if (offset_ > 0 && (offset_ > 65536 || offset_ * 2 > buffer_.size())) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(offset_));
    offset_ = 0;
  }
}

std::optional<Message> StreamDecoder::next() {
  while (offset_ < buffer_.size()) {
    const std::span<const std::uint8_t> view(buffer_.data() + offset_, buffer_.size() - offset_);
    Message msg;
    std::size_t consumed = 0;
    const DecodeStatus st = try_decode(view, msg, consumed);
    if (st == DecodeStatus::ok) {
      offset_ += consumed;
      return msg;
    }
    if (st == DecodeStatus::need_more) return std::nullopt;
    // Resync: skip this byte and scan to the next candidate magic.
    ++errors_;
    last_error_ = st;
    std::size_t i = offset_ + 1;
    while (i < buffer_.size() && buffer_[i] != kMagic[0]) ++i;
    offset_ = i;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

std::string json_digest(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

nlohmann::json make_session_header(nlohmann::json config, std::uint64_t seed, const nlohmann::json& phantom_spec) {
  if (!config.is_object()) config = nlohmann::json::object();
  config["protocol_version"] = kProtocolVersion;
  config["seed"] = seed;
  nlohmann::json content = config;
  content.erase("config_digest");
  content.erase("phantom_digest");
  config["config_digest"] = json_digest(content);
  if (!phantom_spec.is_null()) config["phantom_digest"] = json_digest(phantom_spec);
  return config;
}

std::filesystem::path SessionRecorder::partial_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".partial";
  return p;
}

SessionRecorder::SessionRecorder(std::filesystem::path path, const nlohmann::json& config)
    : path_(std::move(path)), partial_(partial_path(path_)) {
  out_.open(partial_, std::ios::binary | std::ios::trunc);
  if (!out_) throw Error(ErrorCode::io, "cannot open " + partial_.string() + " for writing");
  const std::string body = config.dump();
  std::vector<std::uint8_t> header(kLogMagic.begin(), kLogMagic.end());
  put<std::uint32_t>(header, static_cast<std::uint32_t>(body.size()));
  header.insert(header.end(), body.begin(), body.end());
  append_encoded(header);
}

SessionRecorder::~SessionRecorder() {
  if (!finished_ && out_.is_open()) out_.close();
}

void SessionRecorder::append_encoded(std::span<const std::uint8_t> bytes) {
  if (finished_) throw Error(ErrorCode::io, "recorder already finished");
  out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out_) throw Error(ErrorCode::io, "write to " + partial_.string() + " failed");
}

void SessionRecorder::append(const Message& msg) {
  if (count_ > 0 && msg.timestamp_us < last_timestamp_) {
    throw Error(ErrorCode::invalid_input, "session timestamps must be nondecreasing");
  }
  scratch_.clear();
  encode_message(msg, scratch_);
  append_encoded(scratch_);
  last_timestamp_ = msg.timestamp_us;
  ++count_;
}

void SessionRecorder::finish() {
  if (finished_) return;
  out_.flush();
  if (!out_) throw Error(ErrorCode::io, "flush of " + partial_.string() + " failed");
  out_.close();
  std::error_code ec;
  std::filesystem::rename(partial_, path_, ec);
  if (ec) throw Error(ErrorCode::io, "cannot move recording into place: " + ec.message());
  finished_ = true;
}

void record_session(const SessionLog& log, const std::filesystem::path& path) {
  SessionRecorder recorder(path, log.config);
  for (const auto& m : log.messages) recorder.append(m);
  recorder.finish();
}

SessionReader::SessionReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::array<char, 8> magic{};
  in_.read(magic.data(), magic.size());
  if (!in_ || magic != kLogMagic) throw Error(ErrorCode::protocol, path.string() + " is not a session log");
  std::uint8_t len_raw[4];
  in_.read(reinterpret_cast<char*>(len_raw), 4);
  if (!in_) throw Error(ErrorCode::framing, "truncated session header");
  const auto len = get<std::uint32_t>(len_raw);
  if (len > kMaxPayload) throw Error(ErrorCode::size, "session header too large");
  std::string body(len, '\0');
  in_.read(body.data(), len);
  if (!in_) throw Error(ErrorCode::framing, "truncated session header");
  try {
    config_ = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::protocol, std::string("session header is not JSON: ") + e.what());
  }
}

std::optional<Message> SessionReader::next() {
  buffer_.resize(kHeaderSize);
  in_.read(reinterpret_cast<char*>(buffer_.data()), kHeaderSize);
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got == 0) return std::nullopt;
  if (got < kHeaderSize) throw Error(ErrorCode::framing, "truncated message header in session log");
  const auto len = get<std::uint32_t>(buffer_.data() + 14);
  if (len > kMaxPayload) throw Error(ErrorCode::size, "declared payload exceeds 256 MiB");
  buffer_.resize(kHeaderSize + len);
  in_.read(reinterpret_cast<char*>(buffer_.data() + kHeaderSize), len);
  if (static_cast<std::size_t>(in_.gcount()) != len) throw Error(ErrorCode::framing, "truncated message in session log");
  return decode_message(buffer_);
}

SessionLog read_session(const std::filesystem::path& path) {
  SessionReader reader(path);
  SessionLog log;
  log.config = reader.config();
  while (auto m = reader.next()) log.messages.push_back(std::move(*m));
  return log;
}

}  // namespace ceusnav
