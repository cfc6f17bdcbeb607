#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

namespace ceusnav {

using Vec3 = Eigen::Vector3d;

/// Rigid pose: unit-quaternion rotation followed by a translation in mm.
/// All frames are right-handed and a transform maps local coordinates into
/// its parent frame, so (A * B) applies B first.
struct RigidTransform {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Vec3 translation = Vec3::Zero();

  static constexpr double kUnitTolerance = 1e-9;

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t);
  /// Rotation of `angle_rad` about `axis` (normalized internally), then `t`.
  static RigidTransform from_axis_angle(const Vec3& axis, double angle_rad,
                                        const Vec3& t = Vec3::Zero());
  /// Rotation vector (axis * angle, radians) plus translation.
  static RigidTransform from_rotation_vector(const Vec3& rotvec, const Vec3& t = Vec3::Zero());

  bool is_valid() const;
  /// Throws Error(invalid_transform) unless the quaternion is unit within tolerance.
  void validate() const;

  RigidTransform inverse() const;
  RigidTransform operator*(const RigidTransform& rhs) const;
  /// R·p + t without validation; use transform_point() at API boundaries.
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Eigen::Matrix3d rotation_matrix() const { return rotation.toRotationMatrix(); }

  bool operator==(const RigidTransform& rhs) const;
};

Vec3 transform_point(const RigidTransform& pose, const Vec3& p);
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& pose);

/// Rotation angle of the transform in radians, in [0, pi].
double rotation_angle(const RigidTransform& pose);
/// Angle of a^-1 * b in radians.
double rotation_angle_between(const RigidTransform& a, const RigidTransform& b);
/// Slerp on rotation, lerp on translation; alpha in [0,1].
RigidTransform interpolate(const RigidTransform& a, const RigidTransform& b, double alpha);

nlohmann::json to_json(const RigidTransform& pose);
RigidTransform pose_from_json(const nlohmann::json& j);

struct TrackedSample {
  double timestamp = 0.0;              // s, strictly increasing within a stream
  RigidTransform marker_pose;          // marker -> tracker world
  double quality = 0.0;                // RMS residual of the sphere fit, mm
};

// ---------------------------------------------------------------------------
// Hand-eye calibration

/// One motion pair for A·X = X·B, with the acquisition diagnostics used for
/// sample rejection.
struct MotionPair {
  RigidTransform a;
  RigidTransform b;
  double sensor_displacement_mm = 0.0;  // marker movement while the pair was acquired
  double quality_mm = 0.0;              // worst marker-fit residual of the pair
};

struct RejectionLimits {
  double max_displacement_mm = 5.0;
  double max_quality_mm = 0.5;
};

struct RejectionReport {
  std::size_t n_displacement = 0;  // rejected for sensor displacement
  std::size_t n_quality = 0;       // rejected for fit quality (and not displacement)
  std::vector<std::size_t> rejected_indices;

  std::size_t total() const { return n_displacement + n_quality; }
};

struct RejectionResult {
  std::vector<MotionPair> accepted;
  RejectionReport report;
};

/// Keeps pairs whose displacement and quality are both strictly below their
/// limits; a zero limit therefore rejects everything.
RejectionResult reject_samples(std::span<const MotionPair> pairs, const RejectionLimits& limits);

struct Calibration {
  RigidTransform x;          // image -> marker
  double rms_error_mm = 0.0;
  std::size_t n_accepted = 0;
  std::size_t n_rejected = 0;
};

struct HandEyeOptions {
  double lever_arm_mm = 50.0;             // rotation residual -> mm
  double parallel_axis_tolerance_deg = 1.0;
};

/// Closed-form solve of A·X = X·B: rotation from the stacked quaternion
/// constraint (smallest right singular vector), then translation by linear
/// least squares. Uses every pair given; see calibrate() for rejection.
Calibration hand_eye_calibrate(std::span<const MotionPair> pairs, const HandEyeOptions& options = {});

/// reject_samples followed by hand_eye_calibrate; n_rejected is filled in.
Calibration calibrate(std::span<const MotionPair> pairs, const RejectionLimits& limits = {},
                      const HandEyeOptions& options = {});

/// RMS over pairs of ‖t(A·X) − t(X·B)‖ + lever_arm·angle((A·X)^-1·(X·B)).
double self_consistency_error(const RigidTransform& x, std::span<const MotionPair> pairs,
                              double lever_arm_mm = 50.0);
double self_consistency_error(const Calibration& cal, std::span<const MotionPair> pairs,
                              double lever_arm_mm = 50.0);

/// A calibration station: the probe held still over a phantom, with the image
/// pose recovered from registration and the tracker samples recorded meanwhile.
struct CalibrationStation {
  RigidTransform image_pose;                 // image -> phantom
  std::vector<TrackedSample> marker_samples; // marker -> tracker world
};

/// Motion pairs between consecutive stations. With X mapping image to marker
/// coordinates, the marker-frame motion is `a` and the image-frame motion is
/// `b`, so that a·X = X·b holds.
std::vector<MotionPair> motion_pairs_from_stations(std::span<const CalibrationStation> stations);

nlohmann::json to_json(const Calibration& cal);
Calibration calibration_from_json(const nlohmann::json& j);

}  // namespace ceusnav
