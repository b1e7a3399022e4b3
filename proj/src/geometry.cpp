#include "seqfit/geometry.hpp"

#include <cmath>

#include "seqfit/errors.hpp"

namespace seqfit {

double wrap_angle(double theta) {
  double w = std::fmod(theta + M_PI, 2.0 * M_PI);
  if (w <= 0.0) w += 2.0 * M_PI;
  return w - M_PI;
}

void validate_finite(const PointCloud& cloud, const char* what) {
  for (const Vec3& p : cloud.points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw DegenerateInput(std::string(what) + " contains non-finite coordinates");
    }
  }
}

Vec3 apply_pose(const PlanarPose& pose, const Vec3& p) {
  const double c = std::cos(pose.theta), s = std::sin(pose.theta);
  return {c * p.x - s * p.y + pose.tx, s * p.x + c * p.y + pose.ty,
          p.z + pose.z_offset};
}

PointCloud apply_pose(const PlanarPose& pose, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.size());
  const double c = std::cos(pose.theta), s = std::sin(pose.theta);
  for (const Vec3& p : cloud.points) {
    out.points.push_back({c * p.x - s * p.y + pose.tx,
                          s * p.x + c * p.y + pose.ty, p.z + pose.z_offset});
  }
  return out;
}

PlanarPose compose(const PlanarPose& a, const PlanarPose& b) {
  const double c = std::cos(a.theta), s = std::sin(a.theta);
  PlanarPose out;
  out.theta = wrap_angle(a.theta + b.theta);
  out.tx = a.tx + c * b.tx - s * b.ty;
  out.ty = a.ty + s * b.tx + c * b.ty;
  out.z_offset = a.z_offset + b.z_offset;
  return out;
}

PlanarPose inverse(const PlanarPose& p) {
  const double c = std::cos(p.theta), s = std::sin(p.theta);
  PlanarPose out;
  out.theta = wrap_angle(-p.theta);
  out.tx = -(c * p.tx + s * p.ty);
  out.ty = -(-s * p.tx + c * p.ty);
  out.z_offset = -p.z_offset;
  return out;
}

std::pair<PointCloud, Centroid> demean(const PointCloud& cloud) {
  if (cloud.empty()) throw DegenerateInput("demean: empty cloud");
  Vec3 sum;
  for (const Vec3& p : cloud.points) sum += p;
  const double inv = 1.0 / static_cast<double>(cloud.size());
  const Vec3 mean = sum * inv;
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) out.points.push_back(p - mean);
  return {std::move(out), Centroid{mean}};
}

std::pair<PointCloud, PlanarPose> reattach(const PointCloud& cloud,
                                           const PlanarPose& pose,
                                           const Centroid& mean) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) out.points.push_back(p + mean.mean);
  PlanarPose shifted = pose;
  shifted.tx += mean.mean.x;
  shifted.ty += mean.mean.y;
  shifted.z_offset += mean.mean.z;
  return {std::move(out), shifted};
}

PointCloud mirror_about_heading(const PointCloud& cloud, const PlanarPose& pose) {
  if (cloud.empty()) throw DegenerateInput("mirror_about_heading: empty cloud");
  const double c = std::cos(pose.theta), s = std::sin(pose.theta);
  PointCloud out;
  out.points.reserve(cloud.size() * 2);
  out.points = cloud.points;
  for (const Vec3& p : cloud.points) {
    // Into the pose frame, reflect local y, back out. z is untouched: the
    // mirror plane is vertical.
    const double dx = p.x - pose.tx, dy = p.y - pose.ty;
    const double lx = c * dx + s * dy;
    const double ly = -(-s * dx + c * dy);
    out.points.push_back(
        {c * lx - s * ly + pose.tx, s * lx + c * ly + pose.ty, p.z});
  }
  return out;
}

PointCloud accumulate(std::span<const PointCloud> frames,
                      std::span<const PlanarPose> poses) {
  if (frames.size() != poses.size()) {
    throw ShapeMismatch("accumulate: frame/pose count mismatch");
  }
  if (frames.empty()) throw DegenerateInput("accumulate: no frames");
  PointCloud out;
  size_t total = 0;
  for (const PointCloud& f : frames) total += f.size();
  out.points.reserve(total);
  for (size_t i = 0; i < frames.size(); ++i) {
    const PlanarPose inv = inverse(poses[i]);
    for (const Vec3& p : frames[i].points) {
      out.points.push_back(apply_pose(inv, p));
    }
  }
  return out;
}

}  // namespace seqfit
