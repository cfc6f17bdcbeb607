#include "oracles.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "ceusnav/motionsim.hpp"
#include "ceusnav/phantom.hpp"
#include "ceusnav/realign.hpp"

namespace oracle {

namespace {

Eigen::Quaterniond random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  return q.normalized();
}

Eigen::Matrix4d to_matrix(const RigidTransform& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = t.rotation.normalized().toRotationMatrix();
  m.topRightCorner<3, 1>() = t.translation;
  return m;
}

RigidTransform from_matrix(const Eigen::Matrix4d& m) {
  RigidTransform t;
  t.rotation = Eigen::Quaterniond(Eigen::Matrix3d(m.topLeftCorner<3, 3>())).normalized();
  t.translation = m.topRightCorner<3, 1>();
  return t;
}

}  // namespace

RigidTransform random_pose(std::mt19937_64& rng, double max_translation_mm) {
  std::uniform_real_distribution<double> u(-max_translation_mm, max_translation_mm);
  RigidTransform t;
  t.rotation = random_rotation(rng);
  t.translation = Vec3(u(rng), u(rng), u(rng));
  return t;
}

std::vector<ceusnav::MotionPair> synth_pairs(const RigidTransform& x, std::size_t n, std::mt19937_64& rng,
                                             double trans_noise_mm, double rot_noise_deg) {
  // Matrix products keep this independent of RigidTransform::operator*.
  std::normal_distribution<double> g;
  const Eigen::Matrix4d mx = to_matrix(x);
  const Eigen::Matrix4d mx_inv = mx.inverse();
  std::vector<ceusnav::MotionPair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    const RigidTransform b = random_pose(rng, 50.0);
    RigidTransform a = from_matrix(mx * to_matrix(b) * mx_inv);
    if (trans_noise_mm > 0.0 || rot_noise_deg > 0.0) {
      const Vec3 axis = Vec3(g(rng), g(rng), g(rng)).normalized();
      const double angle = rot_noise_deg * std::numbers::pi / 180.0 * g(rng);
      a.rotation = (Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis)) * a.rotation).normalized();
      a.translation += trans_noise_mm * Vec3(g(rng), g(rng), g(rng));
    }
    pairs.push_back({a, b, 0.0, 0.0});
  }
  return pairs;
}

double translation_error(const RigidTransform& a, const RigidTransform& b) {
  return (a.translation - b.translation).norm();
}

double rotation_error(const RigidTransform& a, const RigidTransform& b) {
  const Eigen::Matrix3d r = a.rotation.normalized().toRotationMatrix().transpose() *
                            b.rotation.normalized().toRotationMatrix();
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos loses precision near zero; use the antisymmetric part there.
  const Vec3 s(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * s.norm(), c);
}

double g1_skewness(std::span<const double> x) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double m2 = 0.0, m3 = 0.0;
  for (double v : x) {
    m2 += (v - mean) * (v - mean);
    m3 += (v - mean) * (v - mean) * (v - mean);
  }
  m2 /= n;
  m3 /= n;
  return std::sqrt(n * (n - 1.0)) / (n - 2.0) * m3 / std::pow(m2, 1.5);
}

AnovaIcc anova_icc(std::span<const ceusnav::MeasurementPair> pairs) {
  const double n = static_cast<double>(pairs.size());
  double grand = 0.0;
  for (const auto& p : pairs) grand += std::log(p.first) + std::log(p.second);
  grand /= 2.0 * n;
  double ssb = 0.0, ssw = 0.0;
  for (const auto& p : pairs) {
    const double a = std::log(p.first), b = std::log(p.second);
    const double m = 0.5 * (a + b);
    ssb += 2.0 * (m - grand) * (m - grand);
    ssw += (a - m) * (a - m) + (b - m) * (b - m);
  }
  AnovaIcc out;
  out.msb = ssb / (n - 1.0);
  out.msw = ssw / n;
  out.icc = (out.msb - out.msw) / (out.msb + out.msw);
  return out;
}

std::vector<ceusnav::MeasurementPair> random_effects_pairs(double rho, std::size_t subjects, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  const double sb = std::sqrt(rho), sw = std::sqrt(1.0 - rho);
  std::vector<ceusnav::MeasurementPair> pairs;
  for (std::size_t i = 0; i < subjects; ++i) {
    const double u = sb * g(rng);
    pairs.push_back({"S" + std::to_string(i), std::exp(u + sw * g(rng)), std::exp(u + sw * g(rng))});
  }
  return pairs;
}

double steady_crossing_time(double tau, double tol) {
  auto rel_slope = [&](double t) { return std::exp(-t / tau) / tau / (1.0 - std::exp(-t / tau)); };
  double lo = 1e-9, hi = 1e6;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (rel_slope(mid) > tol ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double compress_formula(double intensity, double d) {
  if (intensity <= 0.0) return 0.0;
  const double x = std::clamp((20.0 * std::log10(intensity) + d) / d, 0.0, 1.0);
  return std::floor(255.0 * x + 0.5);
}

double linearize_formula(int code, double d) { return std::pow(10.0, (code / 255.0 * d - d) / 20.0); }

void Bytes::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) data.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Bytes::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) data.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Bytes::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) data.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Bytes::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void Bytes::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

std::vector<std::uint8_t> wire_message(std::uint8_t kind, std::uint64_t ts_us, const std::vector<std::uint8_t>& payload) {
  Bytes b;
  b.text("SNAV");
  b.u8(1);
  b.u8(kind);
  b.u64(ts_us);
  b.u32(static_cast<std::uint32_t>(payload.size()));
  b.data.insert(b.data.end(), payload.begin(), payload.end());
  return b.data;
}

ceusnav::Message random_message(std::mt19937_64& rng) {
  using namespace ceusnav;
  std::uniform_int_distribution<int> kind(1, 3);
  std::uniform_int_distribution<std::uint64_t> ts(0, 1'000'000'000'000ULL);
  std::uniform_int_distribution<int> small(1, 6);
  std::uniform_int_distribution<int> byte(0, 255);
  std::uniform_real_distribution<float> vs(0.1f, 3.0f);
  std::bernoulli_distribution coin;
  Message m;
  m.timestamp_us = ts(rng);
  switch (kind(rng)) {
    case 1: {
      m.kind = MessageKind::frame;
      FramePayload f;
      if (coin(rng)) f.pose = random_pose(rng);
      std::size_t count = 1;
      for (int i = 0; i < 3; ++i) {
        f.dims[i] = static_cast<std::uint16_t>(small(rng));
        f.voxel_size[i] = vs(rng);
        count *= f.dims[i];
      }
      f.voxels.resize(count);
      for (auto& v : f.voxels) v = static_cast<std::uint8_t>(byte(rng));
      m.payload = std::move(f);
      break;
    }
    case 2: {
      m.kind = MessageKind::tracker;
      TrackerPayload t;
      t.dropout = coin(rng);
      t.pose = t.dropout ? RigidTransform::identity() : random_pose(rng);
      t.quality = t.dropout ? 0.0f : vs(rng);
      m.payload = t;
      break;
    }
    default: {
      m.kind = MessageKind::control;
      ControlPayload c;
      const char* events[] = {"flash", "capture_reference", "infusion_start", "feedback_mode"};
      c.fields.emplace_back("event", events[small(rng) % 4]);
      const int extra = small(rng) - 1;
      for (int i = 0; i < extra; ++i) {
        std::string value;
        const int len = small(rng) * 2;
        for (int k = 0; k < len; ++k) value.push_back(static_cast<char>('a' + byte(rng) % 26));
        if (coin(rng)) value += "=\xC3\xA9";  // '=' and a 2-byte UTF-8 code point are legal in values
        c.fields.emplace_back("k" + std::to_string(i), value);
      }
      m.payload = std::move(c);
      break;
    }
  }
  return m;
}

std::vector<std::uint8_t> shift_x(const ceusnav::VolumeFrame& frame, int dx) {
  const auto& d = frame.grid.dims;
  std::vector<std::uint8_t> out(frame.voxels.size(), 0);
  for (int k = 0; k < d[2]; ++k) {
    for (int j = 0; j < d[1]; ++j) {
      for (int i = 0; i < d[0]; ++i) {
        const int si = i + dx;
        if (si < 0 || si >= d[0]) continue;
        out[(static_cast<std::size_t>(k) * d[1] + j) * d[0] + i] =
            frame.voxels[(static_cast<std::size_t>(k) * d[1] + j) * d[0] + si];
      }
    }
  }
  return out;
}

TempDir::TempDir() {
  static std::mt19937_64 rng(std::random_device{}());
  std::ostringstream name;
  name << "ceusnav-test-" << std::hex << rng();
  path_ = std::filesystem::temp_directory_path() / name.str();
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}


namespace {

double relative_rms(const ceusnav::TimeIntensityCurve& a, const ceusnav::TimeIntensityCurve& truth) {
  double ss = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss += (a.values[i] - truth.values[i]) * (a.values[i] - truth.values[i]);
    mean += truth.values[i];
  }
  mean /= static_cast<double>(truth.size());
  return std::sqrt(ss / static_cast<double>(truth.size())) / mean;
}

}  // namespace

BreathingTics breathing_tics(std::uint64_t seed, double amplitude_mm, double duration_s, double frame_interval_s,
                             int grid) {
  using namespace ceusnav;
  const auto spec = PhantomSpec::defaults();
  const Phantom phantom(spec);
  RenderSettings rs{{{grid, grid, grid}, {1, 1, 1}}, 0.05, 60.0};
  const auto ref = RigidTransform::from_translation(phantom.lesion().center_mm - rs.image_grid.center_local());

  MotionModel motion = MotionModel::defaults(MotionKind::breathing, seed);
  motion.breathing_amplitude_mm = amplitude_mm;
  motion.breathing_axis = Vec3(0.3, 1.0, 0.5);
  motion.breathing_period_s = 4.3;  // incommensurate with the frame interval
  motion.jitter_sd_mm = 0.5;
  motion.reversion_rate_per_s = 0.2;
  MotionPath path(motion);

  const std::vector<double> flashes{duration_s / 2.0};
  std::vector<VolumeFrame> still, moving;
  std::uint64_t i = 0;
  for (double t = 0.0; t <= duration_s + 1e-9; t += frame_interval_s, ++i) {
    const std::uint64_t frame_seed = mix_seed(seed, i);
    still.push_back(render_frame(phantom, spec.kinetics, t, ref, flashes, frame_seed, rs));
    const auto pose = apply_perturbation(ref, path.at(t));
    moving.push_back(render_frame(phantom, spec.kinetics, t, pose, flashes, frame_seed, rs));
  }
  const auto voi = Voi::ellipsoid(phantom.lesion().center_mm - ref.translation, 0.7 * phantom.lesion().radii_mm);
  // Reference frame: the first one, re-rendered at the reference pose so the
  // aligned grid coincides with the oracle grid.
  moving.front() = still.front();
  const auto seq = realign_sequence(moving, 0);

  BreathingTics out;
  out.truth = extract_tic(still, voi);
  out.unaligned = extract_tic(moving, voi);
  out.aligned = extract_tic(seq.frames, voi, 60.0, seq.masks);
  out.rms_unaligned = relative_rms(out.unaligned, out.truth);
  out.rms_aligned = relative_rms(out.aligned, out.truth);
  return out;
}

}  // namespace oracle
