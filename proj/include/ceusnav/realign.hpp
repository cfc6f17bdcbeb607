#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ceusnav/volume.hpp"

namespace ceusnav {

struct RealignedFrame {
  VolumeFrame frame;   // on the reference grid, pose = reference pose
  ValidityMask mask;   // 1 where the source sample fell inside the source grid
};

/// Resamples `src` onto the grid placed at `ref_pose`. Each reference voxel
/// center is carried through world coordinates into the source grid and
/// trilinearly interpolated on the 8-bit codes, then re-quantized (round half
/// up). Out-of-field voxels are 0 with mask 0.
RealignedFrame realign_frame(const VolumeFrame& src, const RigidTransform& ref_pose,
                             const GridGeometry& ref_grid);

/// Validity mask alone, for a source grid at `src_pose` seen from `ref_pose`.
ValidityMask validity_mask(const GridGeometry& src_grid, const RigidTransform& src_pose,
                           const RigidTransform& ref_pose, const GridGeometry& ref_grid);

struct AlignedSequence {
  std::size_t reference_index = 0;
  std::vector<VolumeFrame> frames;
  std::vector<ValidityMask> masks;
  std::vector<bool> aligned;  // false: no pose, frame excluded (mask all zero)
  std::vector<std::optional<RigidTransform>> original_poses;

  std::size_t size() const { return frames.size(); }
};

struct RealignOptions {
  /// Fill tracker-dropout poses by time interpolation (slerp) between the
  /// nearest posed frames instead of excluding those frames.
  bool interpolate_missing_poses = false;
};

AlignedSequence realign_sequence(std::span<const VolumeFrame> frames, std::size_t reference_index,
                                 const RealignOptions& options = {});

}  // namespace ceusnav
