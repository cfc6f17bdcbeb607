#include "ceusnav/realign.hpp"

#include <algorithm>
#include <cmath>

#include "ceusnav/error.hpp"

namespace ceusnav {

namespace {

// Continuous-index slack at the grid border, so a source sample landing
// exactly on the last voxel center (up to roundoff) still counts as in-field.
constexpr double kBorderSlack = 1e-6;

struct IndexMap {
  Vec3 origin;  // source continuous index of reference voxel (0,0,0)
  Vec3 di, dj, dk;
};

IndexMap make_index_map(const GridGeometry& src_grid, const RigidTransform& src_pose,
                        const RigidTransform& ref_pose, const GridGeometry& ref_grid) {
  const RigidTransform ref_to_src = src_pose.inverse() * ref_pose;
  const Eigen::Matrix3d r = ref_to_src.rotation_matrix();
  const Vec3 inv_vs = src_grid.voxel_size.cwiseInverse();
  IndexMap map;
  map.origin = ref_to_src.translation.cwiseProduct(inv_vs);
  map.di = (r.col(0) * ref_grid.voxel_size.x()).cwiseProduct(inv_vs);
  map.dj = (r.col(1) * ref_grid.voxel_size.y()).cwiseProduct(inv_vs);
  map.dk = (r.col(2) * ref_grid.voxel_size.z()).cwiseProduct(inv_vs);
  return map;
}

bool in_field(double s, int n) { return s >= -kBorderSlack && s <= (n - 1) + kBorderSlack; }

}  // namespace

ValidityMask validity_mask(const GridGeometry& src_grid, const RigidTransform& src_pose,
                           const RigidTransform& ref_pose, const GridGeometry& ref_grid) {
  const IndexMap map = make_index_map(src_grid, src_pose, ref_pose, ref_grid);
  ValidityMask mask(ref_grid.voxel_count(), 0);
  const auto& sd = src_grid.dims;
  std::size_t out = 0;
  for (int k = 0; k < ref_grid.dims[2]; ++k) {
    for (int j = 0; j < ref_grid.dims[1]; ++j) {
      Vec3 s = map.origin + j * map.dj + k * map.dk;
      for (int i = 0; i < ref_grid.dims[0]; ++i, ++out, s += map.di) {
        mask[out] = in_field(s.x(), sd[0]) && in_field(s.y(), sd[1]) && in_field(s.z(), sd[2]);
      }
    }
  }
  return mask;
}

RealignedFrame realign_frame(const VolumeFrame& src, const RigidTransform& ref_pose,
                             const GridGeometry& ref_grid) {
  if (!src.pose) throw Error(ErrorCode::invalid_transform, "source frame has no pose");
  src.pose->validate();
  ref_pose.validate();
  ref_grid.validate();

  RealignedFrame out;
  out.frame.timestamp = src.timestamp;
  out.frame.pose = ref_pose;
  out.frame.grid = ref_grid;

  if (*src.pose == ref_pose && src.grid == ref_grid) {
    out.frame.voxels = src.voxels;
    out.mask.assign(ref_grid.voxel_count(), 1);
    return out;
  }

  out.frame.voxels.assign(ref_grid.voxel_count(), 0);
  out.mask.assign(ref_grid.voxel_count(), 0);

  const IndexMap map = make_index_map(src.grid, *src.pose, ref_pose, ref_grid);
  const auto& sd = src.grid.dims;
  const std::size_t stride_j = static_cast<std::size_t>(sd[0]);
  const std::size_t stride_k = stride_j * static_cast<std::size_t>(sd[1]);

  // Base index and weight along one axis; a single-voxel axis degenerates to
  // nearest neighbor.
  auto axis = [](double s, int n, int& i0, double& w) {
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    if (n == 1) {
      i0 = 0;
      w = 0.0;
      return;
    }
    i0 = std::min(static_cast<int>(s), n - 2);  // s >= 0, truncation is floor
    w = s - i0;
  };

  std::size_t out_index = 0;
  for (int k = 0; k < ref_grid.dims[2]; ++k) {
    for (int j = 0; j < ref_grid.dims[1]; ++j) {
      Vec3 s = map.origin + j * map.dj + k * map.dk;
      for (int i = 0; i < ref_grid.dims[0]; ++i, ++out_index, s += map.di) {
        if (!(in_field(s.x(), sd[0]) && in_field(s.y(), sd[1]) && in_field(s.z(), sd[2]))) continue;
        int x0, y0, z0;
        double wx, wy, wz;
        axis(s.x(), sd[0], x0, wx);
        axis(s.y(), sd[1], y0, wy);
        axis(s.z(), sd[2], z0, wz);
        const std::size_t dx = sd[0] > 1 ? 1 : 0;
        const std::size_t dy = sd[1] > 1 ? stride_j : 0;
        const std::size_t dz = sd[2] > 1 ? stride_k : 0;
        const std::size_t base = static_cast<std::size_t>(z0) * stride_k +
                                 static_cast<std::size_t>(y0) * stride_j + static_cast<std::size_t>(x0);
        const auto& v = src.voxels;
        const double c00 = v[base] * (1 - wx) + v[base + dx] * wx;
        const double c10 = v[base + dy] * (1 - wx) + v[base + dy + dx] * wx;
        const double c01 = v[base + dz] * (1 - wx) + v[base + dz + dx] * wx;
        const double c11 = v[base + dz + dy] * (1 - wx) + v[base + dz + dy + dx] * wx;
        const double c0 = c00 * (1 - wy) + c10 * wy;
        const double c1 = c01 * (1 - wy) + c11 * wy;
        const double value = c0 * (1 - wz) + c1 * wz;
        out.frame.voxels[out_index] =
            static_cast<std::uint8_t>(std::min(value + 0.5 + 1e-9, 255.0));  // value >= 0
        out.mask[out_index] = 1;
      }
    }
  }
  return out;
}

AlignedSequence realign_sequence(std::span<const VolumeFrame> frames, std::size_t reference_index,
                                 const RealignOptions& options) {
  if (frames.empty()) throw Error(ErrorCode::invalid_input, "empty frame sequence");
  if (reference_index >= frames.size()) throw Error(ErrorCode::config, "reference index out of range");
  const VolumeFrame& ref = frames[reference_index];
  if (!ref.pose) throw Error(ErrorCode::invalid_transform, "reference frame has no pose");
  ref.pose->validate();

  AlignedSequence seq;
  seq.reference_index = reference_index;
  seq.frames.reserve(frames.size());
  seq.masks.reserve(frames.size());

  auto resolve_pose = [&](std::size_t i) -> std::optional<RigidTransform> {
    if (frames[i].pose || !options.interpolate_missing_poses) return frames[i].pose;
    std::optional<std::size_t> prev, next;
    for (std::size_t p = i; p-- > 0;) {
      if (frames[p].pose) {
        prev = p;
        break;
      }
    }
    for (std::size_t n = i + 1; n < frames.size(); ++n) {
      if (frames[n].pose) {
        next = n;
        break;
      }
    }
    if (prev && next) {
      const double t0 = frames[*prev].timestamp;
      const double t1 = frames[*next].timestamp;
      const double alpha = t1 > t0 ? (frames[i].timestamp - t0) / (t1 - t0) : 0.0;
      return interpolate(*frames[*prev].pose, *frames[*next].pose, alpha);
    }
    if (prev) return frames[*prev].pose;
    if (next) return frames[*next].pose;
    return std::nullopt;
  };

  for (std::size_t i = 0; i < frames.size(); ++i) {
    seq.original_poses.push_back(frames[i].pose);
    if (i == reference_index) {
      seq.frames.push_back(ref);
      seq.masks.emplace_back(ref.grid.voxel_count(), 1);
      seq.aligned.push_back(true);
      continue;
    }
    const auto pose = resolve_pose(i);
    if (!pose) {
      VolumeFrame excluded;
      excluded.timestamp = frames[i].timestamp;
      excluded.pose = ref.pose;
      excluded.grid = ref.grid;
      excluded.voxels.assign(ref.grid.voxel_count(), 0);
      seq.frames.push_back(std::move(excluded));
      seq.masks.emplace_back(ref.grid.voxel_count(), 0);
      seq.aligned.push_back(false);
      continue;
    }
    VolumeFrame src = frames[i];
    src.pose = pose;
    auto realigned = realign_frame(src, *ref.pose, ref.grid);
    seq.frames.push_back(std::move(realigned.frame));
    seq.masks.push_back(std::move(realigned.mask));
    seq.aligned.push_back(true);
  }
  return seq;
}

}  // namespace ceusnav
