#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceusnav/geometry.hpp"
#include "ceusnav/volume.hpp"

namespace ceusnav {

enum class Tissue : std::uint8_t { background = 0, parenchyma = 1, lesion = 2, vessel = 3 };
inline constexpr std::size_t kTissueCount = 4;

std::string_view to_string(Tissue t);
Tissue tissue_from_string(std::string_view name);

struct TissueKinetics {
  double steady_level = 0.5;        // C_ss, linear intensity in (0,1]
  double infusion_tau_s = 60.0;
  double replenishment_beta = 0.3;  // 1/s
  double destruction_fraction = 1.0;  // 1 = flash destroys everything in-volume
};

/// Contrast kinetics per tissue. The replenishment plateau after a flash is
/// the pre-flash level, so the fitted rBV of a tissue is that level.
struct Kinetics {
  std::array<TissueKinetics, kTissueCount> tissues;

  const TissueKinetics& operator[](Tissue t) const { return tissues[static_cast<std::size_t>(t)]; }
  TissueKinetics& operator[](Tissue t) { return tissues[static_cast<std::size_t>(t)]; }
  void validate() const;

  /// vessel fastest, lesion slowest to steady state.
  static Kinetics defaults();
};

/// Linear intensity of `tissue` at time t (s since infusion start).
/// Infusion: C_ss(1 − e^(−t/τ)); after the latest flash t_f ≤ t the level L
/// just before the flash recovers as L(1 − d·e^(−β(t − t_f))), d the
/// destruction fraction.
double intensity_at(const Kinetics& kinetics, Tissue tissue, double t,
                    std::span<const double> flash_times);
/// Same, with a raw tissue id; unknown ids raise a domain error.
double intensity_at(const Kinetics& kinetics, int tissue_id, double t,
                    std::span<const double> flash_times);

/// v = round_half_up(255·clamp((20·log10(I) + D)/D, 0, 1)); I ≤ 0 maps to 0.
std::uint8_t log_compress(double intensity, double dynamic_range_db = 60.0);

// ---------------------------------------------------------------------------
// Phantom geometry

struct EllipsoidPrimitive {
  Vec3 center_mm = Vec3::Zero();  // phantom world frame
  Vec3 radii_mm{10.0, 10.0, 10.0};
  Tissue tissue = Tissue::lesion;
};

struct TubePrimitive {
  Vec3 start_mm = Vec3::Zero();
  Vec3 end_mm{0.0, 0.0, 10.0};
  double radius_mm = 3.0;
  Tissue tissue = Tissue::vessel;
};

using Primitive = std::variant<EllipsoidPrimitive, TubePrimitive>;

/// Declarative phantom description. Primitives are painted in order over a
/// background-filled grid, later ones winning.
struct PhantomSpec {
  GridGeometry grid{{96, 96, 96}, {1.0, 1.0, 1.0}};
  RigidTransform world_pose;  // grid -> world
  std::vector<Primitive> primitives;
  Kinetics kinetics = Kinetics::defaults();

  /// Liver-like parenchyma with one lesion and a portal-vein-like tube,
  /// centered on the world origin.
  static PhantomSpec defaults();
};

class Phantom {
 public:
  explicit Phantom(const PhantomSpec& spec);

  const GridGeometry& grid() const { return grid_; }
  const RigidTransform& world_pose() const { return world_pose_; }
  const std::vector<std::uint8_t>& labels() const { return labels_; }
  /// The (last painted) lesion ellipsoid.
  const EllipsoidPrimitive& lesion() const { return lesion_; }
  /// Nearest-neighbor tissue lookup; outside the grid is background.
  Tissue tissue_at_world(const Vec3& p) const;
  std::size_t count(Tissue t) const;

 private:
  GridGeometry grid_;
  RigidTransform world_pose_;
  RigidTransform grid_from_world_;
  std::vector<std::uint8_t> labels_;
  EllipsoidPrimitive lesion_;
};

struct RenderSettings {
  GridGeometry image_grid{{64, 64, 64}, {1.0, 1.0, 1.0}};
  double noise_sd = 0.0;  // multiplicative speckle proxy SD (4096-quantile discretized normal)
  double dynamic_range_db = 60.0;
};

/// Renders the contrast-mode volume seen from `pose` (image -> world) at time t.
/// Frames are deterministic for a given seed and independent of one another.
VolumeFrame render_frame(const Phantom& phantom, const Kinetics& kinetics, double t,
                         const RigidTransform& pose, std::span<const double> flash_times,
                         std::uint64_t seed, const RenderSettings& settings = {});

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Kinetics& kinetics);
Kinetics kinetics_from_json(const nlohmann::json& j);

}  // namespace ceusnav
