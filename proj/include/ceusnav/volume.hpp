#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "ceusnav/geometry.hpp"

namespace ceusnav {

/// Regular voxel grid. Voxel (i,j,k) has its center at (i,j,k)·voxel_size in
/// the grid's local frame; a pose maps that frame into the world.
struct GridGeometry {
  std::array<int, 3> dims{64, 64, 64};
  Vec3 voxel_size{1.0, 1.0, 1.0};  // mm

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }
  std::size_t linear_index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * static_cast<std::size_t>(dims[1]) +
            static_cast<std::size_t>(j)) *
               static_cast<std::size_t>(dims[0]) +
           static_cast<std::size_t>(i);
  }
  Vec3 local_point(int i, int j, int k) const {
    return {i * voxel_size.x(), j * voxel_size.y(), k * voxel_size.z()};
  }
  /// Continuous voxel index of a local point.
  Vec3 continuous_index(const Vec3& local) const { return local.cwiseQuotient(voxel_size); }
  /// Local coordinates of the grid center (the "center voxel").
  Vec3 center_local() const {
    return {0.5 * (dims[0] - 1) * voxel_size.x(), 0.5 * (dims[1] - 1) * voxel_size.y(),
            0.5 * (dims[2] - 1) * voxel_size.z()};
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  void validate() const;

  bool operator==(const GridGeometry&) const = default;
};

/// Per-voxel in-field flags (1 = valid), same layout as the voxels.
using ValidityMask = std::vector<std::uint8_t>;

/// Timestamped 8-bit compressed volume with its tracked image->world pose.
/// The pose is absent when the tracker dropped out at acquisition time.
struct VolumeFrame {
  double timestamp = 0.0;  // s
  std::optional<RigidTransform> pose;
  GridGeometry grid;
  std::vector<std::uint8_t> voxels;

  std::uint8_t at(int i, int j, int k) const { return voxels[grid.linear_index(i, j, k)]; }
  bool operator==(const VolumeFrame&) const = default;
};

nlohmann::json to_json(const GridGeometry& grid);
GridGeometry grid_from_json(const nlohmann::json& j);

}  // namespace ceusnav
