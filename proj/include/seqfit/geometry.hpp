#ifndef SEQFIT_GEOMETRY_HPP
#define SEQFIT_GEOMETRY_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace seqfit {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
};

struct PointCloud {
  std::vector<Vec3> points;

  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct Centroid {
  Vec3 mean;
};

// Planar rigid transform embedded in 3D: rotation about the vertical axis by
// theta, translation (tx, ty) in the plane, plus a fixed vertical offset.
// Stored in this parameterization rather than as a matrix so the planar
// constraint is structural and repeated composition cannot drift.
struct PlanarPose {
  double theta = 0.0;  // radians, kept in (-pi, pi]
  double tx = 0.0, ty = 0.0;
  double z_offset = 0.0;

  static PlanarPose identity() { return {}; }
};

// Wraps an angle into (-pi, pi].
double wrap_angle(double theta);

// Throws DegenerateInput if any coordinate is NaN/Inf.
void validate_finite(const PointCloud& cloud, const char* what = "point cloud");

Vec3 apply_pose(const PlanarPose& pose, const Vec3& p);
PointCloud apply_pose(const PlanarPose& pose, const PointCloud& cloud);

PlanarPose compose(const PlanarPose& a, const PlanarPose& b);
PlanarPose inverse(const PlanarPose& p);

// Shifts a cloud so its centroid is the origin; returns the shifted cloud and
// the original mean. Point order is preserved.
std::pair<PointCloud, Centroid> demean(const PointCloud& cloud);

// Undoes demeaning: cloud + mean pointwise, and the pose left-composed with
// the pure translation by the mean.
std::pair<PointCloud, PlanarPose> reattach(const PointCloud& cloud,
                                           const PlanarPose& pose,
                                           const Centroid& mean);

// Appends the reflection of the cloud across the vertical plane that contains
// the pose's heading axis (pose-frame x-axis) through the pose translation.
// Output is input followed by the reflected copies; duplicates are kept.
PointCloud mirror_about_heading(const PointCloud& cloud, const PlanarPose& pose);

// Maps frame i into the canonical frame via inverse(poses[i]) and concatenates.
PointCloud accumulate(std::span<const PointCloud> frames,
                      std::span<const PlanarPose> poses);

}  // namespace seqfit

#endif
