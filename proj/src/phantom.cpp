#include "ceusnav/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <boost/math/distributions/normal.hpp>

#include "ceusnav/error.hpp"

namespace ceusnav {

void GridGeometry::validate() const {
  for (int d : dims) {
    if (d <= 0 || d > 65535) throw Error(ErrorCode::config, "grid dimension out of range");
  }
  if (!(voxel_size.array() > 0.0).all() || !voxel_size.allFinite()) {
    throw Error(ErrorCode::config, "voxel size must be positive");
  }
}

nlohmann::json to_json(const GridGeometry& grid) {
  return {{"dims", grid.dims},
          {"voxel_size_mm", {grid.voxel_size.x(), grid.voxel_size.y(), grid.voxel_size.z()}}};
}

GridGeometry grid_from_json(const nlohmann::json& j) {
  GridGeometry g;
  try {
    g.dims = j.at("dims").get<std::array<int, 3>>();
    const auto vs = j.at("voxel_size_mm").get<std::array<double, 3>>();
    g.voxel_size = Vec3(vs[0], vs[1], vs[2]);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed grid: ") + e.what());
  }
  g.validate();
  return g;
}

std::string_view to_string(Tissue t) {
  switch (t) {
    case Tissue::background: return "background";
    case Tissue::parenchyma: return "parenchyma";
    case Tissue::lesion: return "lesion";
    case Tissue::vessel: return "vessel";
  }
  return "unknown";
}

Tissue tissue_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kTissueCount; ++i) {
    if (to_string(static_cast<Tissue>(i)) == name) return static_cast<Tissue>(i);
  }
  throw Error(ErrorCode::domain, "unknown tissue '" + std::string(name) + "'");
}

void Kinetics::validate() const {
  for (std::size_t i = 0; i < kTissueCount; ++i) {
    const auto& k = tissues[i];
    const bool ok = k.steady_level > 0.0 && k.steady_level <= 1.0 && k.infusion_tau_s > 0.0 &&
                    k.replenishment_beta > 0.0 && k.destruction_fraction > 0.0 &&
                    k.destruction_fraction <= 1.0;
    if (!ok) {
      throw Error(ErrorCode::config,
                  "invalid kinetics for " + std::string(to_string(static_cast<Tissue>(i))));
    }
  }
}

Kinetics Kinetics::defaults() {
  Kinetics k;
  // Background sits at the bottom of a 60 dB display range.
  k[Tissue::background] = {0.001, 1.0, 1.0, 1.0};
  k[Tissue::parenchyma] = {0.5, 60.0, 0.3, 1.0};
  k[Tissue::lesion] = {0.35, 80.0, 0.25, 1.0};
  k[Tissue::vessel] = {0.9, 20.0, 1.0, 1.0};
  return k;
}

double intensity_at(const Kinetics& kinetics, Tissue tissue, double t,
                    std::span<const double> flash_times) {
  if (!(t >= 0.0)) throw Error(ErrorCode::domain, "negative time");
  if (static_cast<std::size_t>(tissue) >= kTissueCount) {
    throw Error(ErrorCode::domain, "unknown tissue id");
  }
  const auto& k = kinetics[tissue];
  std::vector<double> flashes(flash_times.begin(), flash_times.end());
  std::sort(flashes.begin(), flashes.end());

  double level = 0.0;       // plateau of the current regime
  double regime_start = 0.0;
  bool infusing = true;     // no flash yet
  auto value = [&](double at) {
    if (infusing) return k.steady_level * (1.0 - std::exp(-at / k.infusion_tau_s));
    return level *
           (1.0 - k.destruction_fraction * std::exp(-k.replenishment_beta * (at - regime_start)));
  };
  for (double f : flashes) {
    if (f > t) break;
    level = value(f);
    regime_start = f;
    infusing = false;
  }
  return value(t);
}

double intensity_at(const Kinetics& kinetics, int tissue_id, double t,
                    std::span<const double> flash_times) {
  if (tissue_id < 0 || tissue_id >= static_cast<int>(kTissueCount)) {
    throw Error(ErrorCode::domain, "unknown tissue id " + std::to_string(tissue_id));
  }
  return intensity_at(kinetics, static_cast<Tissue>(tissue_id), t, flash_times);
}

std::uint8_t log_compress(double intensity, double dynamic_range_db) {
  if (!(dynamic_range_db > 0.0)) throw Error(ErrorCode::domain, "dynamic range must be positive");
  if (!(intensity > 0.0)) return 0;
  const double frac = std::clamp((20.0 * std::log10(intensity) + dynamic_range_db) / dynamic_range_db,
                                 0.0, 1.0);
  // Round half up; the epsilon absorbs last-bit error at exact halves.
  return static_cast<std::uint8_t>(std::floor(255.0 * frac + 0.5 + 1e-9));
}

// ---------------------------------------------------------------------------

PhantomSpec PhantomSpec::defaults() {
  PhantomSpec spec;
  const Vec3 half = 0.5 * Vec3(spec.grid.dims[0] - 1, spec.grid.dims[1] - 1, spec.grid.dims[2] - 1)
                              .cwiseProduct(spec.grid.voxel_size);
  spec.world_pose = RigidTransform::from_translation(-half);
  spec.primitives.push_back(EllipsoidPrimitive{Vec3::Zero(), {44.0, 40.0, 36.0}, Tissue::parenchyma});
  spec.primitives.push_back(TubePrimitive{{-40.0, 18.0, -12.0}, {40.0, 14.0, -8.0}, 3.5, Tissue::vessel});
  spec.primitives.push_back(EllipsoidPrimitive{{2.0, -3.0, 4.0}, {9.0, 8.0, 7.5}, Tissue::lesion});
  return spec;
}

namespace {

bool inside(const EllipsoidPrimitive& e, const Vec3& p) {
  return ((p - e.center_mm).cwiseQuotient(e.radii_mm)).squaredNorm() <= 1.0;
}

bool inside(const TubePrimitive& tube, const Vec3& p) {
  const Vec3 axis = tube.end_mm - tube.start_mm;
  const double len2 = axis.squaredNorm();
  double s = len2 > 0.0 ? (p - tube.start_mm).dot(axis) / len2 : 0.0;
  if (s < 0.0 || s > 1.0) return false;
  return (tube.start_mm + s * axis - p).norm() <= tube.radius_mm;
}

}  // namespace

Phantom::Phantom(const PhantomSpec& spec)
    : grid_(spec.grid), world_pose_(spec.world_pose), grid_from_world_(spec.world_pose.inverse()) {
  grid_.validate();
  world_pose_.validate();
  labels_.assign(grid_.voxel_count(), static_cast<std::uint8_t>(Tissue::background));

  bool have_lesion = false;
  for (const auto& prim : spec.primitives) {
    if (const auto* e = std::get_if<EllipsoidPrimitive>(&prim)) {
      if (!(e->radii_mm.array() > 0.0).all()) throw Error(ErrorCode::config, "ellipsoid radii must be positive");
      if (e->tissue == Tissue::lesion) {
        lesion_ = *e;
        have_lesion = true;
      }
    }
  }
  if (!have_lesion) throw Error(ErrorCode::config, "phantom needs a lesion ellipsoid");
  if (2.0 * lesion_.radii_mm.minCoeff() < 10.0) {
    throw Error(ErrorCode::config, "lesion must be at least 1 cm in diameter");
  }

  for (int k = 0; k < grid_.dims[2]; ++k) {
    for (int j = 0; j < grid_.dims[1]; ++j) {
      for (int i = 0; i < grid_.dims[0]; ++i) {
        const Vec3 p = world_pose_.apply(grid_.local_point(i, j, k));
        auto& label = labels_[grid_.linear_index(i, j, k)];
        for (const auto& prim : spec.primitives) {
          const bool hit = std::visit([&](const auto& shape) { return inside(shape, p); }, prim);
          if (hit) label = static_cast<std::uint8_t>(std::visit([](const auto& s) { return s.tissue; }, prim));
        }
      }
    }
  }
  if (count(Tissue::lesion) == 0) throw Error(ErrorCode::config, "lesion does not intersect the phantom grid");
}

Tissue Phantom::tissue_at_world(const Vec3& p) const {
  const Vec3 idx = grid_.continuous_index(grid_from_world_.apply(p));
  const int i = static_cast<int>(std::lround(idx.x()));
  const int j = static_cast<int>(std::lround(idx.y()));
  const int k = static_cast<int>(std::lround(idx.z()));
  if (!grid_.contains(i, j, k)) return Tissue::background;
  return static_cast<Tissue>(labels_[grid_.linear_index(i, j, k)]);
}

std::size_t Phantom::count(Tissue t) const {
  return static_cast<std::size_t>(
      std::count(labels_.begin(), labels_.end(), static_cast<std::uint8_t>(t)));
}

namespace {

const std::array<double, 4096>& normal_quantiles() {
  static const auto table = [] {
    std::array<double, 4096> z{};
    const boost::math::normal_distribution<double> normal;
    for (std::size_t q = 0; q < z.size(); ++q) {
      z[q] = boost::math::quantile(normal, (static_cast<double>(q) + 0.5) / static_cast<double>(z.size()));
    }
    return z;
  }();
  return table;
}

}  // namespace

VolumeFrame render_frame(const Phantom& phantom, const Kinetics& kinetics, double t,
                         const RigidTransform& pose, std::span<const double> flash_times,
                         std::uint64_t seed, const RenderSettings& settings) {
  pose.validate();
  settings.image_grid.validate();
  if (!(settings.noise_sd >= 0.0)) throw Error(ErrorCode::config, "noise_sd must be >= 0");

  std::array<double, kTissueCount> level{};
  std::array<std::uint8_t, kTissueCount> code{};
  for (std::size_t i = 0; i < kTissueCount; ++i) {
    level[i] = intensity_at(kinetics, static_cast<Tissue>(i), t, flash_times);
    code[i] = log_compress(level[i], settings.dynamic_range_db);
  }

  VolumeFrame frame;
  frame.timestamp = t;
  frame.pose = pose;
  frame.grid = settings.image_grid;
  frame.voxels.resize(frame.grid.voxel_count());

  // image index -> phantom continuous index is affine; step along i incrementally.
  const auto& pgrid = phantom.grid();
  const RigidTransform image_to_grid = phantom.world_pose().inverse() * pose;
  const Eigen::Matrix3d rot = image_to_grid.rotation_matrix();
  const Vec3 inv_vs = pgrid.voxel_size.cwiseInverse();
  const Vec3 step_i = (rot.col(0) * frame.grid.voxel_size.x()).cwiseProduct(inv_vs);
  const auto& labels = phantom.labels();

  // Speckle proxy I·(1 + sd·ξ) with ξ drawn from 4096 equiprobable normal
  // quantiles, so each tissue needs only a 4096-entry code table.
  constexpr std::size_t kLevels = 4096;
  const bool noisy = settings.noise_sd > 0.0;
  std::vector<std::uint8_t> speckle;
  if (noisy) {
    const auto& z = normal_quantiles();
    speckle.resize(kTissueCount * kLevels);
    for (std::size_t ti = 0; ti < kTissueCount; ++ti) {
      for (std::size_t q = 0; q < kLevels; ++q) {
        speckle[ti * kLevels + q] =
            log_compress(level[ti] * (1.0 + settings.noise_sd * z[q]), settings.dynamic_range_db);
      }
    }
  }
  std::mt19937_64 rng(seed);
  std::uint64_t bits = 0;
  int bits_left = 0;

  const auto& dims = frame.grid.dims;
  const auto& pdims = pgrid.dims;
  std::size_t out = 0;
  for (int k = 0; k < dims[2]; ++k) {
    for (int j = 0; j < dims[1]; ++j) {
      Vec3 idx = image_to_grid.apply(frame.grid.local_point(0, j, k)).cwiseProduct(inv_vs);
      for (int i = 0; i < dims[0]; ++i, ++out, idx += step_i) {
        // Nearest voxel; truncation of x + 0.5 is round-half-up once x + 0.5 >= 0.
        const double hx = idx.x() + 0.5, hy = idx.y() + 0.5, hz = idx.z() + 0.5;
        std::size_t tissue = 0;
        if (hx >= 0.0 && hy >= 0.0 && hz >= 0.0 && hx < pdims[0] && hy < pdims[1] && hz < pdims[2]) {
          const auto pi = static_cast<long>(hx);
          const auto pj = static_cast<long>(hy);
          const auto pk = static_cast<long>(hz);
          tissue = labels[pgrid.linear_index(static_cast<int>(pi), static_cast<int>(pj),
                                             static_cast<int>(pk))];
        }
        if (noisy) {
          if (bits_left == 0) {
            bits = rng();
            bits_left = 5;
          }
          frame.voxels[out] = speckle[tissue * kLevels + (bits & (kLevels - 1))];
          bits >>= 12;
          --bits_left;
        } else {
          frame.voxels[out] = code[tissue];
        }
      }
    }
  }
  return frame;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Vec3 vec_from(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace

nlohmann::json to_json(const Kinetics& kinetics) {
  nlohmann::json out = nlohmann::json::object();
  for (std::size_t i = 0; i < kTissueCount; ++i) {
    const auto& k = kinetics.tissues[i];
    out[std::string(to_string(static_cast<Tissue>(i)))] = {
        {"steady_level", k.steady_level},
        {"infusion_tau_s", k.infusion_tau_s},
        {"replenishment_beta", k.replenishment_beta},
        {"destruction_fraction", k.destruction_fraction}};
  }
  return out;
}

Kinetics kinetics_from_json(const nlohmann::json& j) {
  Kinetics k = Kinetics::defaults();
  try {
    for (const auto& [name, body] : j.items()) {
      auto& tk = k[tissue_from_string(name)];
      tk.steady_level = body.value("steady_level", tk.steady_level);
      tk.infusion_tau_s = body.value("infusion_tau_s", tk.infusion_tau_s);
      tk.replenishment_beta = body.value("replenishment_beta", tk.replenishment_beta);
      tk.destruction_fraction = body.value("destruction_fraction", tk.destruction_fraction);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed kinetics: ") + e.what());
  }
  k.validate();
  return k;
}

nlohmann::json to_json(const PhantomSpec& spec) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& prim : spec.primitives) {
    if (const auto* e = std::get_if<EllipsoidPrimitive>(&prim)) {
      prims.push_back({{"type", "ellipsoid"},
                       {"tissue", to_string(e->tissue)},
                       {"center_mm", vec_json(e->center_mm)},
                       {"radii_mm", vec_json(e->radii_mm)}});
    } else {
      const auto& tube = std::get<TubePrimitive>(prim);
      prims.push_back({{"type", "tube"},
                       {"tissue", to_string(tube.tissue)},
                       {"start_mm", vec_json(tube.start_mm)},
                       {"end_mm", vec_json(tube.end_mm)},
                       {"radius_mm", tube.radius_mm}});
    }
  }
  return {{"grid", to_json(spec.grid)},
          {"world_pose", to_json(spec.world_pose)},
          {"primitives", prims},
          {"kinetics", to_json(spec.kinetics)}};
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec spec = PhantomSpec::defaults();
  try {
    if (j.contains("grid")) spec.grid = grid_from_json(j.at("grid"));
    if (j.contains("world_pose")) spec.world_pose = pose_from_json(j.at("world_pose"));
    if (j.contains("kinetics")) spec.kinetics = kinetics_from_json(j.at("kinetics"));
    if (j.contains("primitives")) {
      spec.primitives.clear();
      for (const auto& p : j.at("primitives")) {
        const auto type = p.at("type").get<std::string>();
        const Tissue tissue = tissue_from_string(p.at("tissue").get<std::string>());
        if (type == "ellipsoid") {
          spec.primitives.push_back(
              EllipsoidPrimitive{vec_from(p.at("center_mm")), vec_from(p.at("radii_mm")), tissue});
        } else if (type == "tube") {
          spec.primitives.push_back(TubePrimitive{vec_from(p.at("start_mm")), vec_from(p.at("end_mm")),
                                                  p.at("radius_mm").get<double>(), tissue});
        } else {
          throw Error(ErrorCode::config, "unknown primitive type '" + type + "'");
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed phantom spec: ") + e.what());
  }
  return spec;
}

}  // namespace ceusnav
