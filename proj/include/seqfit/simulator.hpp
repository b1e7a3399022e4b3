#ifndef SEQFIT_SIMULATOR_HPP
#define SEQFIT_SIMULATOR_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqfit/dataset.hpp"
#include "seqfit/geometry.hpp"

namespace seqfit {

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
};

// ASCII OBJ with v/f records; polygon faces are fan-triangulated, texture and
// normal indices are ignored. Triangles with area <= 1e-12 are dropped.
TriMesh load_obj(const std::filesystem::path& path);

// Spinning multi-beam range sensor at the world origin.
struct LidarModel {
  std::vector<double> elevations_deg;  // strictly increasing
  double azimuth_step_deg = 0.4;       // must divide 360
  double max_range = 100.0;            // meters
  double height = 2.0;                 // sensor origin above ground
  double noise_sigma = 0.01;           // meters, along-ray
  // Scanned azimuth window, degrees in [-180, 180].
  double azimuth_min_deg = -180.0;
  double azimuth_max_deg = 180.0;

  // 16 beams, -15 to +15 degrees.
  static LidarModel vlp16();
};

void validate_lidar(const LidarModel& lidar);
nlohmann::json lidar_to_json(const LidarModel& lidar);
LidarModel lidar_from_json(const nlohmann::json& j);

struct RayHit {
  double t = 0.0;
  int tri = -1;
};

// Uniform-grid accelerated first-hit queries against a fixed mesh.
class GridRaycaster {
 public:
  explicit GridRaycaster(const TriMesh& mesh);

  // Nearest intersection with t in (1e-9, max_range], if any.
  std::optional<RayHit> first_hit(const Vec3& origin, const Vec3& dir,
                                  double max_range) const;

 private:
  const TriMesh& mesh_;
  Vec3 lo_, hi_;
  int dims_[3] = {1, 1, 1};
  Vec3 cell_;
  std::unordered_map<uint64_t, std::vector<int>> cells_;
  mutable std::vector<uint32_t> stamp_;
  mutable uint32_t stamp_counter_ = 0;

  uint64_t key(int ix, int iy, int iz) const;
};

// One full revolution of the sensor against the mesh placed at vehicle_pose.
// Each (beam, azimuth index) ray perturbs its hit along the ray by Gaussian
// range noise clamped to 4 sigma; the noise is keyed by (seed, beam, azimuth
// index) alone, so the azimuth window never shifts another ray's noise.
PointCloud raycast_scan(const TriMesh& mesh, const PlanarPose& vehicle_pose,
                        const LidarModel& lidar, uint64_t seed);

// Area-weighted surface sampling followed by visibility filtering against 42
// surrounding viewpoints; a sample survives iff some viewpoint sees it as its
// first hit. Draws up to 10 rounds of n candidates, then throws
// DegenerateInput if fewer than n survived. Returns exactly n points.
PointCloud sample_complete(const TriMesh& mesh, int n, uint64_t seed);

// The 42 vertices of a once-subdivided icosahedron on the unit sphere.
std::vector<Vec3> icosphere42();

enum class TrajectoryKind { kStraight, kArc, kSCurve, kStopGo };

TrajectoryKind trajectory_kind_from_string(const std::string& s);

struct TrajectoryParams {
  double speed = 5.0;     // m/s
  double rate_hz = 10.0;  // frames per second
  double x0 = 10.0, y0 = 0.0;
  double heading0 = 0.0;   // radians
  double radius = 20.0;    // arc/s-curve turn radius; sign picks direction
};

struct Trajectory {
  std::vector<double> times;
  std::vector<PlanarPose> poses;
};

Trajectory make_trajectory(TrajectoryKind kind, const TrajectoryParams& params,
                           int n_frames);

// CSV with header `t,x,y,theta`.
void save_trajectory_csv(const std::filesystem::path& path,
                         const Trajectory& traj);
Trajectory load_trajectory_csv(const std::filesystem::path& path);

// Procedural vehicle mesh: a beveled-hood body prism and a cabin prism, both
// convex profiles in the x-z plane extruded along y. Canonical frame: x
// forward, y left, z up, underbody at z = 0, centered in x and y.
struct BoxcarParams {
  double length = 4.2;
  double width = 1.8;
  double height = 1.5;
  double body_height_frac = 0.55;  // body share of total height
  double hood_bevel = 0.5;         // meters cut off the front top edge
  double cabin_front_frac = 0.35;  // cabin front edge, fraction of length
  double cabin_rear_frac = 0.85;   // cabin rear edge, fraction of length
  double cabin_slope = 0.25;       // roof inset at both cabin ends, meters
};

TriMesh make_boxcar(const BoxcarParams& params);

// A small family of distinct vehicle proportions. index may be any value;
// variants repeat modulo the family size.
TriMesh make_boxcar_variant(int index);

struct BuildConfig {
  std::filesystem::path out_dir;
  std::vector<std::pair<std::string, TriMesh>> meshes;
  std::vector<std::pair<std::string, Trajectory>> trajectories;
  LidarModel lidar;
  int gt_points = 1024;  // complete-cloud sample size per mesh
  uint64_t seed = 0;
};

// Writes one track per (mesh, trajectory) pair plus manifest.json; returns
// the manifest. Partial frames are recorded even when empty.
DatasetManifest build_dataset(const BuildConfig& cfg);

}  // namespace seqfit

#endif
