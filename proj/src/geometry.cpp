#include "ceusnav/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/SVD>

#include "ceusnav/error.hpp"

namespace ceusnav {

RigidTransform RigidTransform::from_translation(const Vec3& t) {
  RigidTransform out;
  out.translation = t;
  return out;
}

RigidTransform RigidTransform::from_axis_angle(const Vec3& axis, double angle_rad, const Vec3& t) {
  RigidTransform out;
  if (axis.norm() > 0.0) {
    out.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(angle_rad, axis.normalized()));
  }
  out.translation = t;
  return out;
}

RigidTransform RigidTransform::from_rotation_vector(const Vec3& rotvec, const Vec3& t) {
  const double angle = rotvec.norm();
  if (angle == 0.0) return from_translation(t);
  return from_axis_angle(rotvec / angle, angle, t);
}

bool RigidTransform::is_valid() const {
  const double n = rotation.coeffs().norm();
  return std::isfinite(n) && std::abs(n - 1.0) <= kUnitTolerance && translation.allFinite();
}

void RigidTransform::validate() const {
  if (!is_valid()) {
    throw Error(ErrorCode::invalid_transform,
                "quaternion norm " + std::to_string(rotation.coeffs().norm()) + " is not unit");
  }
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation = rotation.conjugate();
  out.translation = -(out.rotation * translation);
  return out;
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  RigidTransform out;
  out.rotation = rotation * rhs.rotation;
  out.translation = rotation * rhs.translation + translation;
  return out;
}

bool RigidTransform::operator==(const RigidTransform& rhs) const {
  return rotation.coeffs() == rhs.rotation.coeffs() && translation == rhs.translation;
}

Vec3 transform_point(const RigidTransform& pose, const Vec3& p) {
  pose.validate();
  return pose.apply(p);
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  a.validate();
  b.validate();
  return a * b;
}

RigidTransform invert(const RigidTransform& pose) {
  pose.validate();
  return pose.inverse();
}

double rotation_angle(const RigidTransform& pose) {
  const double w = std::clamp(std::abs(pose.rotation.w()) / pose.rotation.norm(), 0.0, 1.0);
  // atan2 form stays accurate near zero where acos loses precision.
  const double s = pose.rotation.vec().norm() / pose.rotation.norm();
  return 2.0 * std::atan2(s, w);
}

double rotation_angle_between(const RigidTransform& a, const RigidTransform& b) {
  return rotation_angle(a.inverse() * b);
}

RigidTransform interpolate(const RigidTransform& a, const RigidTransform& b, double alpha) {
  RigidTransform out;
  out.rotation = a.rotation.slerp(alpha, b.rotation).normalized();
  out.translation = (1.0 - alpha) * a.translation + alpha * b.translation;
  return out;
}

nlohmann::json to_json(const RigidTransform& pose) {
  const auto& q = pose.rotation;
  return {{"quaternion", {q.w(), q.x(), q.y(), q.z()}},
          {"translation_mm", {pose.translation.x(), pose.translation.y(), pose.translation.z()}}};
}

RigidTransform pose_from_json(const nlohmann::json& j) {
  try {
    const auto& q = j.at("quaternion");
    const auto& t = j.at("translation_mm");
    RigidTransform out;
    out.rotation = Eigen::Quaterniond(q.at(0).get<double>(), q.at(1).get<double>(),
                                      q.at(2).get<double>(), q.at(3).get<double>());
    out.translation = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
    out.validate();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed pose: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

RejectionResult reject_samples(std::span<const MotionPair> pairs, const RejectionLimits& limits) {
  RejectionResult result;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (!(p.sensor_displacement_mm < limits.max_displacement_mm)) {
      ++result.report.n_displacement;
      result.report.rejected_indices.push_back(i);
    } else if (!(p.quality_mm < limits.max_quality_mm)) {
      ++result.report.n_quality;
      result.report.rejected_indices.push_back(i);
    } else {
      result.accepted.push_back(p);
    }
  }
  return result;
}

namespace {

Eigen::Matrix3d skew(const Vec3& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rotation axis of a motion, or nullopt when the rotation is negligible.
std::optional<Vec3> motion_axis(const RigidTransform& m) {
  const Vec3 v = m.rotation.vec();
  if (rotation_angle(m) < 1e-6) return std::nullopt;
  return v.normalized();
}

void check_motion_diversity(std::span<const MotionPair> pairs, double tolerance_deg) {
  std::vector<Vec3> axes;
  for (const auto& p : pairs) {
    if (auto axis = motion_axis(p.b)) axes.push_back(*axis);
  }
  const double cos_tol = std::cos(tolerance_deg * std::numbers::pi / 180.0);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    for (std::size_t j = i + 1; j < axes.size(); ++j) {
      if (std::abs(axes[i].dot(axes[j])) < cos_tol) return;
    }
  }
  throw Error(ErrorCode::degenerate_motion,
              "all motion rotation axes are parallel within " + std::to_string(tolerance_deg) + " deg");
}

}  // namespace

Calibration hand_eye_calibrate(std::span<const MotionPair> pairs, const HandEyeOptions& options) {
  if (pairs.size() < 2) {
    throw Error(ErrorCode::insufficient_data,
                "hand-eye calibration needs at least 2 motion pairs, got " + std::to_string(pairs.size()));
  }
  for (const auto& p : pairs) {
    p.a.validate();
    p.b.validate();
  }
  check_motion_diversity(pairs, options.parallel_axis_tolerance_deg);

  // qa ⊗ qx = qx ⊗ qb  ⇔  (L(qa) − R(qb)) qx = 0, with (w, x, y, z) ordering.
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Eigen::MatrixXd m(4 * n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    Eigen::Quaterniond qa = p.a.rotation.normalized();
    Eigen::Quaterniond qb = p.b.rotation.normalized();
    // Conjugate motions share the scalar part; align the double-cover sign.
    if (qa.w() * qb.w() < 0.0) qb.coeffs() = -qb.coeffs();
    const double dw = qa.w() - qb.w();
    const Vec3 dv = qa.vec() - qb.vec();
    const Vec3 sv = qa.vec() + qb.vec();
    Eigen::Matrix4d block;
    block(0, 0) = dw;
    block.block<1, 3>(0, 1) = -dv.transpose();
    block.block<3, 1>(1, 0) = dv;
    block.block<3, 3>(1, 1) = dw * Eigen::Matrix3d::Identity() + skew(sv);
    m.block<4, 4>(4 * i, 0) = block;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
  Eigen::Vector4d qx = svd.matrixV().col(3);
  if (qx(0) < 0.0) qx = -qx;

  Calibration cal;
  cal.x.rotation = Eigen::Quaterniond(qx(0), qx(1), qx(2), qx(3)).normalized();
  const Eigen::Matrix3d rx = cal.x.rotation_matrix();

  // (Ra − I) tx = Rx tb − ta
  Eigen::MatrixXd c(3 * n, 3);
  Eigen::VectorXd d(3 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    c.block<3, 3>(3 * i, 0) = p.a.rotation_matrix() - Eigen::Matrix3d::Identity();
    d.segment<3>(3 * i) = rx * p.b.translation - p.a.translation;
  }
  cal.x.translation = c.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(d);
  cal.n_accepted = pairs.size();
  cal.rms_error_mm = self_consistency_error(cal.x, pairs, options.lever_arm_mm);
  return cal;
}

Calibration calibrate(std::span<const MotionPair> pairs, const RejectionLimits& limits,
                      const HandEyeOptions& options) {
  auto rejection = reject_samples(pairs, limits);
  if (rejection.accepted.size() < 2) {
    throw Error(ErrorCode::insufficient_data,
                std::to_string(rejection.accepted.size()) + " pairs left after rejecting " +
                    std::to_string(rejection.report.total()));
  }
  Calibration cal = hand_eye_calibrate(rejection.accepted, options);
  cal.n_rejected = rejection.report.total();
  return cal;
}

double self_consistency_error(const RigidTransform& x, std::span<const MotionPair> pairs,
                              double lever_arm_mm) {
  if (pairs.empty()) throw Error(ErrorCode::insufficient_data, "no pairs to evaluate");
  double sum_sq = 0.0;
  for (const auto& p : pairs) {
    const RigidTransform lhs = p.a * x;
    const RigidTransform rhs = x * p.b;
    const double e = (lhs.translation - rhs.translation).norm() +
                     lever_arm_mm * rotation_angle_between(lhs, rhs);
    sum_sq += e * e;
  }
  return std::sqrt(sum_sq / static_cast<double>(pairs.size()));
}

double self_consistency_error(const Calibration& cal, std::span<const MotionPair> pairs,
                              double lever_arm_mm) {
  cal.x.validate();
  return self_consistency_error(cal.x, pairs, lever_arm_mm);
}

namespace {

struct StationSummary {
  RigidTransform marker_pose;
  double displacement_mm = 0.0;
  double quality_mm = 0.0;
};

StationSummary summarize(const CalibrationStation& s) {
  if (s.marker_samples.empty()) {
    throw Error(ErrorCode::insufficient_data, "calibration station without tracker samples");
  }
  StationSummary out;
  const auto& first = s.marker_samples.front().marker_pose;
  Eigen::Vector4d qsum = Eigen::Vector4d::Zero();
  Vec3 tsum = Vec3::Zero();
  for (const auto& sample : s.marker_samples) {
    Eigen::Vector4d q = sample.marker_pose.rotation.coeffs();
    if (q.dot(first.rotation.coeffs()) < 0.0) q = -q;
    qsum += q;
    tsum += sample.marker_pose.translation;
    out.displacement_mm =
        std::max(out.displacement_mm, (sample.marker_pose.translation - first.translation).norm());
    out.quality_mm = std::max(out.quality_mm, sample.quality);
  }
  out.marker_pose.rotation.coeffs() = qsum.normalized();
  out.marker_pose.translation = tsum / static_cast<double>(s.marker_samples.size());
  return out;
}

}  // namespace

std::vector<MotionPair> motion_pairs_from_stations(std::span<const CalibrationStation> stations) {
  std::vector<StationSummary> summaries;
  summaries.reserve(stations.size());
  for (const auto& s : stations) summaries.push_back(summarize(s));

  std::vector<MotionPair> pairs;
  for (std::size_t i = 0; i + 1 < stations.size(); ++i) {
    const auto& s0 = summaries[i];
    const auto& s1 = summaries[i + 1];
    MotionPair p;
    p.a = s0.marker_pose.inverse() * s1.marker_pose;
    p.b = stations[i].image_pose.inverse() * stations[i + 1].image_pose;
    p.sensor_displacement_mm = std::max(s0.displacement_mm, s1.displacement_mm);
    p.quality_mm = std::max(s0.quality_mm, s1.quality_mm);
    pairs.push_back(p);
  }
  return pairs;
}

nlohmann::json to_json(const Calibration& cal) {
  const auto& q = cal.x.rotation;
  return {{"quaternion", {q.w(), q.x(), q.y(), q.z()}},
          {"translation_mm", {cal.x.translation.x(), cal.x.translation.y(), cal.x.translation.z()}},
          {"rms_error_mm", cal.rms_error_mm},
          {"n_accepted", cal.n_accepted},
          {"n_rejected", cal.n_rejected}};
}

Calibration calibration_from_json(const nlohmann::json& j) {
  Calibration cal;
  cal.x = pose_from_json(j);
  try {
    cal.rms_error_mm = j.at("rms_error_mm").get<double>();
    cal.n_accepted = j.at("n_accepted").get<std::size_t>();
    cal.n_rejected = j.at("n_rejected").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed calibration: ") + e.what());
  }
  if (cal.rms_error_mm < 0.0) throw Error(ErrorCode::config, "negative rms_error_mm");
  return cal;
}

}  // namespace ceusnav
