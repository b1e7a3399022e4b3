#include "seqfit/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "seqfit/errors.hpp"
#include "seqfit/ply.hpp"
#include "seqfit/rng.hpp"

namespace seqfit {

namespace {

constexpr double kPi = 3.14159265358979323846;

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

}  // namespace

TriMesh load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open OBJ: " + path.string());
  TriMesh mesh;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " +
                     what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x >> v.y >> v.z)) fail("malformed vertex");
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        // "3", "3/1", "3/1/2", "3//2" all name vertex 3.
        const size_t slash = tok.find('/');
        if (slash != std::string::npos) tok.resize(slash);
        int i = 0;
        try {
          i = std::stoi(tok);
        } catch (const std::exception&) {
          fail("malformed face index '" + tok + "'");
        }
        if (i < 0) i = static_cast<int>(mesh.vertices.size()) + i + 1;
        if (i < 1 || i > static_cast<int>(mesh.vertices.size())) {
          fail("vertex index out of range");
        }
        idx.push_back(i - 1);
      }
      if (idx.size() < 3) fail("face with fewer than 3 vertices");
      for (size_t k = 1; k + 1 < idx.size(); ++k) {
        mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
      }
    }
    // Other records (vn, vt, o, g, s, usemtl, mtllib) are ignored.
  }
  std::erase_if(mesh.faces, [&mesh](const std::array<int, 3>& f) {
    return triangle_area(mesh.vertices[static_cast<size_t>(f[0])],
                         mesh.vertices[static_cast<size_t>(f[1])],
                         mesh.vertices[static_cast<size_t>(f[2])]) <= 1e-12;
  });
  if (mesh.faces.empty()) {
    throw DegenerateInput("OBJ has no usable faces: " + path.string());
  }
  return mesh;
}

LidarModel LidarModel::vlp16() {
  LidarModel m;
  m.elevations_deg.reserve(16);
  for (int i = 0; i < 16; ++i) m.elevations_deg.push_back(-15.0 + 2.0 * i);
  return m;
}

void validate_lidar(const LidarModel& lidar) {
  if (lidar.elevations_deg.empty()) {
    throw ConfigError("lidar: elevations_deg must be non-empty");
  }
  for (size_t i = 1; i < lidar.elevations_deg.size(); ++i) {
    if (!(lidar.elevations_deg[i] > lidar.elevations_deg[i - 1])) {
      throw ConfigError("lidar: elevations_deg must be strictly increasing");
    }
  }
  if (!(lidar.azimuth_step_deg > 0.0)) {
    throw ConfigError("lidar: azimuth_step_deg must be positive");
  }
  const double ratio = 360.0 / lidar.azimuth_step_deg;
  if (std::abs(ratio - std::round(ratio)) > 1e-9) {
    throw ConfigError("lidar: azimuth_step_deg must divide 360");
  }
  if (!(lidar.max_range > 0.0)) {
    throw ConfigError("lidar: max_range must be positive");
  }
  if (lidar.noise_sigma < 0.0) {
    throw ConfigError("lidar: noise_sigma must be non-negative");
  }
  if (lidar.azimuth_min_deg < -180.0 || lidar.azimuth_max_deg > 180.0 ||
      lidar.azimuth_min_deg > lidar.azimuth_max_deg) {
    throw ConfigError("lidar: azimuth window must satisfy -180 <= min <= max <= 180");
  }
}

nlohmann::json lidar_to_json(const LidarModel& lidar) {
  return nlohmann::json{{"elevations_deg", lidar.elevations_deg},
                        {"azimuth_step_deg", lidar.azimuth_step_deg},
                        {"max_range", lidar.max_range},
                        {"height", lidar.height},
                        {"noise_sigma", lidar.noise_sigma},
                        {"azimuth_min_deg", lidar.azimuth_min_deg},
                        {"azimuth_max_deg", lidar.azimuth_max_deg}};
}

LidarModel lidar_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("lidar config must be an object");
  LidarModel m = LidarModel::vlp16();
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "elevations_deg") {
        m.elevations_deg = value.get<std::vector<double>>();
      } else if (key == "azimuth_step_deg") {
        m.azimuth_step_deg = value.get<double>();
      } else if (key == "max_range") {
        m.max_range = value.get<double>();
      } else if (key == "height") {
        m.height = value.get<double>();
      } else if (key == "noise_sigma") {
        m.noise_sigma = value.get<double>();
      } else if (key == "azimuth_min_deg") {
        m.azimuth_min_deg = value.get<double>();
      } else if (key == "azimuth_max_deg") {
        m.azimuth_max_deg = value.get<double>();
      } else {
        throw ConfigError("unknown key '" + key + "' in lidar config");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("lidar config key '" + key + "' has the wrong type");
    }
  }
  validate_lidar(m);
  return m;
}

namespace {

// Möller-Trumbore with a small edge tolerance so rays crossing shared edges
// of adjacent triangles cannot slip through the crack.
std::optional<double> ray_triangle(const Vec3& o, const Vec3& d, const Vec3& a,
                                   const Vec3& b, const Vec3& c) {
  constexpr double kEdgeTol = 1e-12;
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = o - a;
  const double u = s.dot(p) * inv;
  if (u < -kEdgeTol || u > 1.0 + kEdgeTol) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < -kEdgeTol || u + v > 1.0 + kEdgeTol) return std::nullopt;
  return e2.dot(q) * inv;
}

}  // namespace

uint64_t GridRaycaster::key(int ix, int iy, int iz) const {
  return static_cast<uint64_t>(ix) +
         static_cast<uint64_t>(dims_[0]) *
             (static_cast<uint64_t>(iy) +
              static_cast<uint64_t>(dims_[1]) * static_cast<uint64_t>(iz));
}

GridRaycaster::GridRaycaster(const TriMesh& mesh) : mesh_(mesh) {
  if (mesh.faces.empty()) throw DegenerateInput("raycaster: mesh has no faces");
  lo_ = hi_ = mesh.vertices[static_cast<size_t>(mesh.faces[0][0])];
  for (const auto& f : mesh.faces) {
    for (int vi : f) {
      const Vec3& v = mesh.vertices[static_cast<size_t>(vi)];
      lo_ = {std::min(lo_.x, v.x), std::min(lo_.y, v.y), std::min(lo_.z, v.z)};
      hi_ = {std::max(hi_.x, v.x), std::max(hi_.y, v.y), std::max(hi_.z, v.z)};
    }
  }
  // Pad so boundary geometry falls strictly inside the last cell row.
  const double pad = 1e-9 + 1e-9 * (hi_ - lo_).norm();
  lo_ = lo_ - Vec3{pad, pad, pad};
  hi_ = hi_ + Vec3{pad, pad, pad};
  const int d = std::clamp(
      static_cast<int>(std::ceil(std::cbrt(static_cast<double>(mesh.faces.size())))),
      1, 32);
  dims_[0] = dims_[1] = dims_[2] = d;
  cell_ = {(hi_.x - lo_.x) / d, (hi_.y - lo_.y) / d, (hi_.z - lo_.z) / d};
  auto cell_index = [this](double x, double lo, double cell, int dim) {
    return std::clamp(static_cast<int>((x - lo) / cell), 0, dim - 1);
  };
  for (size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    Vec3 flo = mesh.vertices[static_cast<size_t>(f[0])];
    Vec3 fhi = flo;
    for (int vi : f) {
      const Vec3& v = mesh.vertices[static_cast<size_t>(vi)];
      flo = {std::min(flo.x, v.x), std::min(flo.y, v.y), std::min(flo.z, v.z)};
      fhi = {std::max(fhi.x, v.x), std::max(fhi.y, v.y), std::max(fhi.z, v.z)};
    }
    const int x0 = cell_index(flo.x, lo_.x, cell_.x, dims_[0]);
    const int x1 = cell_index(fhi.x, lo_.x, cell_.x, dims_[0]);
    const int y0 = cell_index(flo.y, lo_.y, cell_.y, dims_[1]);
    const int y1 = cell_index(fhi.y, lo_.y, cell_.y, dims_[1]);
    const int z0 = cell_index(flo.z, lo_.z, cell_.z, dims_[2]);
    const int z1 = cell_index(fhi.z, lo_.z, cell_.z, dims_[2]);
    for (int ix = x0; ix <= x1; ++ix) {
      for (int iy = y0; iy <= y1; ++iy) {
        for (int iz = z0; iz <= z1; ++iz) {
          cells_[key(ix, iy, iz)].push_back(static_cast<int>(fi));
        }
      }
    }
  }
  stamp_.assign(mesh.faces.size(), 0);
}

std::optional<RayHit> GridRaycaster::first_hit(const Vec3& origin,
                                               const Vec3& dir,
                                               double max_range) const {
  // Slab intersection with the padded bounding box.
  double t0 = 0.0, t1 = max_range;
  const double o[3] = {origin.x, origin.y, origin.z};
  const double d[3] = {dir.x, dir.y, dir.z};
  const double lo[3] = {lo_.x, lo_.y, lo_.z};
  const double hi[3] = {hi_.x, hi_.y, hi_.z};
  for (int a = 0; a < 3; ++a) {
    const double inv = 1.0 / d[a];
    double ta = (lo[a] - o[a]) * inv;
    double tb = (hi[a] - o[a]) * inv;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }

  if (++stamp_counter_ == 0) {
    std::fill(stamp_.begin(), stamp_.end(), 0u);
    stamp_counter_ = 1;
  }

  const double cell[3] = {cell_.x, cell_.y, cell_.z};
  int idx[3], step[3];
  double t_max[3], t_delta[3];
  for (int a = 0; a < 3; ++a) {
    const double entry = o[a] + d[a] * t0;
    idx[a] = std::clamp(static_cast<int>((entry - lo[a]) / cell[a]), 0,
                        dims_[a] - 1);
    if (d[a] > 0.0) {
      step[a] = 1;
      t_max[a] = t0 + (lo[a] + (idx[a] + 1) * cell[a] - entry) / d[a];
      t_delta[a] = cell[a] / d[a];
    } else if (d[a] < 0.0) {
      step[a] = -1;
      t_max[a] = t0 + (lo[a] + idx[a] * cell[a] - entry) / d[a];
      t_delta[a] = -cell[a] / d[a];
    } else {
      step[a] = 0;
      t_max[a] = std::numeric_limits<double>::infinity();
      t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }

  RayHit best;
  best.t = std::numeric_limits<double>::infinity();
  for (;;) {
    const auto it = cells_.find(key(idx[0], idx[1], idx[2]));
    if (it != cells_.end()) {
      for (int fi : it->second) {
        if (stamp_[static_cast<size_t>(fi)] == stamp_counter_) continue;
        stamp_[static_cast<size_t>(fi)] = stamp_counter_;
        const auto& f = mesh_.faces[static_cast<size_t>(fi)];
        const auto t = ray_triangle(origin, dir,
                                    mesh_.vertices[static_cast<size_t>(f[0])],
                                    mesh_.vertices[static_cast<size_t>(f[1])],
                                    mesh_.vertices[static_cast<size_t>(f[2])]);
        if (t && *t > 1e-9 && *t <= max_range && *t < best.t) {
          best.t = *t;
          best.tri = fi;
        }
      }
    }
    const double exit_t = std::min({t_max[0], t_max[1], t_max[2]});
    if (best.tri >= 0 && best.t <= exit_t + 1e-12) break;
    if (exit_t > t1) break;
    const int a = (t_max[0] <= t_max[1] && t_max[0] <= t_max[2]) ? 0
                  : (t_max[1] <= t_max[2])                       ? 1
                                                                 : 2;
    idx[a] += step[a];
    if (idx[a] < 0 || idx[a] >= dims_[a]) break;
    t_max[a] += t_delta[a];
  }
  if (best.tri < 0) return std::nullopt;
  return best;
}

PointCloud raycast_scan(const TriMesh& mesh, const PlanarPose& vehicle_pose,
                        const LidarModel& lidar, uint64_t seed) {
  validate_lidar(lidar);
  TriMesh placed;
  placed.vertices.reserve(mesh.vertices.size());
  for (const Vec3& v : mesh.vertices) {
    placed.vertices.push_back(apply_pose(vehicle_pose, v));
  }
  placed.faces = mesh.faces;
  const GridRaycaster rc(placed);

  const Vec3 origin{0.0, 0.0, lidar.height};
  const int n_az =
      static_cast<int>(std::round(360.0 / lidar.azimuth_step_deg));
  PointCloud out;
  for (size_t b = 0; b < lidar.elevations_deg.size(); ++b) {
    const double elev = lidar.elevations_deg[b] * kPi / 180.0;
    const double ce = std::cos(elev), se = std::sin(elev);
    for (int k = 0; k < n_az; ++k) {
      const double az_deg = -180.0 + k * lidar.azimuth_step_deg;
      if (az_deg < lidar.azimuth_min_deg - 1e-9 ||
          az_deg > lidar.azimuth_max_deg + 1e-9) {
        continue;
      }
      const double az = az_deg * kPi / 180.0;
      const Vec3 dir{ce * std::cos(az), ce * std::sin(az), se};
      const auto hit = rc.first_hit(origin, dir, lidar.max_range);
      if (!hit) continue;
      Rng rng(mix_seed(seed, b, static_cast<uint64_t>(k)));
      const double raw = lidar.noise_sigma * rng.normal();
      const double noise =
          std::clamp(raw, -4.0 * lidar.noise_sigma, 4.0 * lidar.noise_sigma);
      out.points.push_back(origin + dir * (hit->t + noise));
    }
  }
  return out;
}

std::vector<Vec3> icosphere42() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {
      {-1, phi, 0}, {1, phi, 0},   {-1, -phi, 0}, {1, -phi, 0},
      {0, -1, phi}, {0, 1, phi},   {0, -1, -phi}, {0, 1, -phi},
      {phi, 0, -1}, {phi, 0, 1},   {-phi, 0, -1}, {-phi, 0, 1},
  };
  for (Vec3& v : verts) v = v * (1.0 / v.norm());
  // Icosahedron edges are exactly the vertex pairs at the minimum pairwise
  // distance; add their normalized midpoints.
  double min_sq = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < 12; ++i) {
    for (size_t j = i + 1; j < 12; ++j) {
      const Vec3 d = verts[i] - verts[j];
      min_sq = std::min(min_sq, d.dot(d));
    }
  }
  std::vector<Vec3> out = verts;
  for (size_t i = 0; i < 12; ++i) {
    for (size_t j = i + 1; j < 12; ++j) {
      const Vec3 d = verts[i] - verts[j];
      if (d.dot(d) <= min_sq + 1e-9) {
        Vec3 mid = (verts[i] + verts[j]) * 0.5;
        out.push_back(mid * (1.0 / mid.norm()));
      }
    }
  }
  if (out.size() != 42) throw InternalError("icosphere42: bad vertex count");
  return out;
}

PointCloud sample_complete(const TriMesh& mesh, int n, uint64_t seed) {
  if (n < 1) throw DegenerateInput("sample_complete: n must be >= 1");
  if (mesh.faces.empty()) {
    throw DegenerateInput("sample_complete: mesh has no faces");
  }
  std::vector<double> cdf;
  cdf.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += triangle_area(mesh.vertices[static_cast<size_t>(f[0])],
                           mesh.vertices[static_cast<size_t>(f[1])],
                           mesh.vertices[static_cast<size_t>(f[2])]);
    cdf.push_back(total);
  }
  if (!(total > 0.0)) {
    throw DegenerateInput("sample_complete: mesh has zero surface area");
  }

  Vec3 lo = mesh.vertices[static_cast<size_t>(mesh.faces[0][0])], hi = lo;
  for (const auto& f : mesh.faces) {
    for (int vi : f) {
      const Vec3& v = mesh.vertices[static_cast<size_t>(vi)];
      lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
      hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
    }
  }
  const Vec3 center = (lo + hi) * 0.5;
  const double radius = (hi - lo).norm();  // 2x the half-diagonal
  std::vector<Vec3> viewpoints = icosphere42();
  for (Vec3& v : viewpoints) v = center + v * radius;

  const GridRaycaster rc(mesh);
  Rng rng(seed);
  PointCloud out;
  out.points.reserve(static_cast<size_t>(n));
  for (int round = 0; round < 10 && out.size() < static_cast<size_t>(n);
       ++round) {
    for (int i = 0; i < n && out.size() < static_cast<size_t>(n); ++i) {
      const double r = rng.uniform() * total;
      const size_t fi = static_cast<size_t>(
          std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
      const auto& f = mesh.faces[std::min(fi, mesh.faces.size() - 1)];
      const Vec3& a = mesh.vertices[static_cast<size_t>(f[0])];
      const Vec3& b = mesh.vertices[static_cast<size_t>(f[1])];
      const Vec3& c = mesh.vertices[static_cast<size_t>(f[2])];
      const double su = std::sqrt(rng.uniform());
      const double v = rng.uniform();
      const Vec3 p = a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v);
      bool visible = false;
      for (const Vec3& vp : viewpoints) {
        const Vec3 delta = p - vp;
        const double dist = delta.norm();
        const auto hit = rc.first_hit(vp, delta * (1.0 / dist), dist + 1.0);
        if (hit && std::abs(hit->t - dist) <= 1e-6) {
          visible = true;
          break;
        }
      }
      if (visible) out.points.push_back(p);
    }
  }
  if (out.size() < static_cast<size_t>(n)) {
    throw DegenerateInput(
        "sample_complete: not enough visible surface points after 10 rounds");
  }
  return out;
}

TrajectoryKind trajectory_kind_from_string(const std::string& s) {
  if (s == "straight") return TrajectoryKind::kStraight;
  if (s == "arc") return TrajectoryKind::kArc;
  if (s == "s_curve") return TrajectoryKind::kSCurve;
  if (s == "stop_go") return TrajectoryKind::kStopGo;
  throw ConfigError("unknown trajectory kind '" + s + "'");
}

namespace {

PlanarPose arc_pose(double x0, double y0, double heading0, double radius,
                    double arc_len) {
  const double phi = arc_len / radius;
  const double cx = x0 - radius * std::sin(heading0);
  const double cy = y0 + radius * std::cos(heading0);
  PlanarPose p;
  p.theta = wrap_angle(heading0 + phi);
  p.tx = cx + radius * std::sin(heading0 + phi);
  p.ty = cy - radius * std::cos(heading0 + phi);
  return p;
}

}  // namespace

Trajectory make_trajectory(TrajectoryKind kind, const TrajectoryParams& params,
                           int n_frames) {
  if (n_frames < 1) throw ConfigError("trajectory: n_frames must be >= 1");
  if (!(params.speed > 0.0)) throw ConfigError("trajectory: speed must be positive");
  if (!(params.rate_hz > 0.0)) {
    throw ConfigError("trajectory: rate_hz must be positive");
  }
  const bool needs_radius =
      kind == TrajectoryKind::kArc || kind == TrajectoryKind::kSCurve;
  if (needs_radius && std::abs(params.radius) < 1e-6) {
    throw ConfigError("trajectory: radius must be non-zero");
  }
  const double dt = 1.0 / params.rate_hz;
  Trajectory traj;
  traj.times.reserve(static_cast<size_t>(n_frames));
  traj.poses.reserve(static_cast<size_t>(n_frames));
  for (int k = 0; k < n_frames; ++k) {
    const double t = k * dt;
    PlanarPose p;
    switch (kind) {
      case TrajectoryKind::kStraight: {
        p.theta = wrap_angle(params.heading0);
        p.tx = params.x0 + params.speed * t * std::cos(params.heading0);
        p.ty = params.y0 + params.speed * t * std::sin(params.heading0);
        break;
      }
      case TrajectoryKind::kArc: {
        p = arc_pose(params.x0, params.y0, params.heading0, params.radius,
                     params.speed * t);
        break;
      }
      case TrajectoryKind::kSCurve: {
        // First half turns one way, second half mirrors the curvature from
        // the midpoint pose.
        const double t_mid = (n_frames / 2) * dt;
        if (t <= t_mid) {
          p = arc_pose(params.x0, params.y0, params.heading0, params.radius,
                       params.speed * t);
        } else {
          const PlanarPose mid = arc_pose(params.x0, params.y0,
                                          params.heading0, params.radius,
                                          params.speed * t_mid);
          p = arc_pose(mid.tx, mid.ty, mid.theta, -params.radius,
                       params.speed * (t - t_mid));
        }
        break;
      }
      case TrajectoryKind::kStopGo: {
        // Straight run with the middle third of the frames spent stopped.
        const double t_a = (n_frames / 3) * dt;
        const double t_b = (2 * n_frames / 3) * dt;
        double moving = t;
        if (t > t_a) moving = t_a + std::max(0.0, t - t_b);
        p.theta = wrap_angle(params.heading0);
        p.tx = params.x0 + params.speed * moving * std::cos(params.heading0);
        p.ty = params.y0 + params.speed * moving * std::sin(params.heading0);
        break;
      }
    }
    traj.times.push_back(t);
    traj.poses.push_back(p);
  }
  return traj;
}

void save_trajectory_csv(const std::filesystem::path& path,
                         const Trajectory& traj) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "t,x,y,theta\n";
  char buf[200];
  for (size_t i = 0; i < traj.poses.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", traj.times[i],
                  traj.poses[i].tx, traj.poses[i].ty, traj.poses[i].theta);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Trajectory load_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,x,y,theta") {
    throw ParseError("trajectory csv: bad header in " + path.string());
  }
  Trajectory traj;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    double t = 0, x = 0, y = 0, theta = 0;
    if (std::sscanf(line.c_str(), "%lg,%lg,%lg,%lg", &t, &x, &y, &theta) != 4) {
      throw ParseError("trajectory csv: bad row '" + line + "'");
    }
    if (!traj.times.empty() && t <= traj.times.back()) {
      throw ParseError("trajectory csv: timestamps must be strictly increasing");
    }
    traj.times.push_back(t);
    PlanarPose p;
    p.theta = wrap_angle(theta);
    p.tx = x;
    p.ty = y;
    traj.poses.push_back(p);
  }
  return traj;
}

namespace {

// Extrudes a convex x-z profile along y and appends it to the mesh with
// outward winding (fixed against the prism centroid, exact for convex cells).
void extrude_profile(TriMesh& mesh, const std::vector<std::pair<double, double>>& xz,
                     double y0, double y1) {
  const int base = static_cast<int>(mesh.vertices.size());
  const int m = static_cast<int>(xz.size());
  for (const auto& [x, z] : xz) mesh.vertices.push_back({x, y0, z});
  for (const auto& [x, z] : xz) mesh.vertices.push_back({x, y1, z});
  const int first_face = static_cast<int>(mesh.faces.size());
  for (int i = 1; i + 1 < m; ++i) {  // caps, fan around vertex 0
    mesh.faces.push_back({base, base + i, base + i + 1});
    mesh.faces.push_back({base + m, base + m + i, base + m + i + 1});
  }
  for (int i = 0; i < m; ++i) {  // side walls
    const int j = (i + 1) % m;
    mesh.faces.push_back({base + i, base + j, base + m + j});
    mesh.faces.push_back({base + i, base + m + j, base + m + i});
  }
  Vec3 centroid;
  for (int i = base; i < base + 2 * m; ++i) {
    centroid += mesh.vertices[static_cast<size_t>(i)];
  }
  centroid = centroid * (1.0 / (2.0 * m));
  for (size_t fi = static_cast<size_t>(first_face); fi < mesh.faces.size();
       ++fi) {
    auto& f = mesh.faces[fi];
    const Vec3& a = mesh.vertices[static_cast<size_t>(f[0])];
    const Vec3& b = mesh.vertices[static_cast<size_t>(f[1])];
    const Vec3& c = mesh.vertices[static_cast<size_t>(f[2])];
    const Vec3 n = (b - a).cross(c - a);
    const Vec3 fc = (a + b + c) * (1.0 / 3.0);
    if (n.dot(fc - centroid) < 0.0) std::swap(f[1], f[2]);
  }
}

}  // namespace

TriMesh make_boxcar(const BoxcarParams& p) {
  if (!(p.length > 0) || !(p.width > 0) || !(p.height > 0)) {
    throw ConfigError("boxcar: dimensions must be positive");
  }
  if (!(p.body_height_frac > 0) || !(p.body_height_frac < 1)) {
    throw ConfigError("boxcar: body_height_frac must be in (0, 1)");
  }
  if (!(p.cabin_front_frac >= 0) || !(p.cabin_rear_frac <= 1) ||
      !(p.cabin_front_frac < p.cabin_rear_frac)) {
    throw ConfigError("boxcar: cabin fractions must satisfy 0 <= front < rear <= 1");
  }
  const double l2 = p.length / 2.0, w2 = p.width / 2.0;
  const double body_h = p.height * p.body_height_frac;
  const double bevel =
      std::min({p.hood_bevel, 0.4 * body_h, 0.4 * p.length});
  // Front of the car is +x; the hood bevel cuts the front top edge.
  const std::vector<std::pair<double, double>> body = {
      {-l2, 0.0},
      {l2, 0.0},
      {l2, body_h - bevel},
      {l2 - bevel, body_h},
      {-l2, body_h},
  };
  // Cabin fractions are measured back from the front bumper.
  const double cab_front = l2 - p.cabin_front_frac * p.length;
  const double cab_rear = l2 - p.cabin_rear_frac * p.length;
  const double slope =
      std::min(p.cabin_slope, 0.4 * (cab_front - cab_rear));
  const std::vector<std::pair<double, double>> cabin = {
      {cab_rear, body_h},
      {cab_front, body_h},
      {cab_front - slope, p.height},
      {cab_rear + slope, p.height},
  };
  TriMesh mesh;
  extrude_profile(mesh, body, -w2, w2);
  const double cab_w2 = w2 * 0.92;  // cabin slightly narrower than the body
  extrude_profile(mesh, cabin, -cab_w2, cab_w2);
  return mesh;
}

TriMesh make_boxcar_variant(int index) {
  static const BoxcarParams kVariants[8] = {
      // length width height body_frac bevel cab_front cab_rear slope
      {4.2, 1.8, 1.45, 0.55, 0.50, 0.30, 0.80, 0.30},  // sedan
      {4.6, 1.9, 1.80, 0.50, 0.40, 0.28, 0.85, 0.25},  // suv
      {4.8, 1.9, 2.00, 0.45, 0.25, 0.20, 0.95, 0.15},  // van
      {5.2, 1.9, 1.80, 0.60, 0.45, 0.15, 0.55, 0.25},  // pickup cab forward
      {3.6, 1.6, 1.50, 0.50, 0.35, 0.30, 0.85, 0.30},  // compact
      {5.0, 1.9, 1.40, 0.58, 0.60, 0.32, 0.78, 0.35},  // long sedan
      {4.4, 2.0, 2.20, 0.42, 0.20, 0.22, 0.92, 0.12},  // tall van
      {4.0, 1.8, 1.25, 0.62, 0.55, 0.35, 0.72, 0.28},  // low coupe
  };
  int i = index % 8;
  if (i < 0) i += 8;
  return make_boxcar(kVariants[i]);
}

DatasetManifest build_dataset(const BuildConfig& cfg) {
  if (cfg.meshes.empty()) throw ConfigError("build_dataset: no meshes");
  if (cfg.trajectories.empty()) {
    throw ConfigError("build_dataset: no trajectories");
  }
  if (cfg.gt_points < 1) {
    throw ConfigError("build_dataset: gt_points must be >= 1");
  }
  validate_lidar(cfg.lidar);

  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir / "meshes", ec);
  if (ec) {
    throw IoError("cannot create " + (cfg.out_dir / "meshes").string() + ": " +
                  ec.message());
  }

  DatasetManifest manifest;
  manifest.lidar = lidar_to_json(cfg.lidar);
  manifest.seed = cfg.seed;

  std::vector<std::string> complete_paths;
  for (size_t mi = 0; mi < cfg.meshes.size(); ++mi) {
    const auto& [mesh_id, mesh] = cfg.meshes[mi];
    const PointCloud complete =
        sample_complete(mesh, cfg.gt_points, mix_seed(cfg.seed, 0xC0, mi));
    const std::string rel = "meshes/" + mesh_id + "_complete.ply";
    write_ply(cfg.out_dir / rel, complete);
    complete_paths.push_back(rel);
  }

  for (size_t mi = 0; mi < cfg.meshes.size(); ++mi) {
    const auto& [mesh_id, mesh] = cfg.meshes[mi];
    for (size_t tj = 0; tj < cfg.trajectories.size(); ++tj) {
      const auto& [traj_id, traj] = cfg.trajectories[tj];
      TrackRecord track;
      track.id = mesh_id + "_" + traj_id;
      track.mesh = mesh_id;
      track.complete_ply = complete_paths[mi];
      const std::string track_dir = "tracks/" + track.id;
      std::filesystem::create_directories(cfg.out_dir / track_dir, ec);
      if (ec) {
        throw IoError("cannot create " + (cfg.out_dir / track_dir).string() +
                      ": " + ec.message());
      }
      for (size_t t = 0; t < traj.poses.size(); ++t) {
        const PointCloud scan = raycast_scan(
            mesh, traj.poses[t], cfg.lidar, mix_seed(cfg.seed, mi, tj, t));
        char name[64];
        std::snprintf(name, sizeof(name), "frame_%06zu.ply", t);
        const std::string rel = track_dir + "/" + name;
        write_ply(cfg.out_dir / rel, scan);
        FrameRecord frame;
        frame.t = traj.times[t];
        frame.partial_ply = rel;
        frame.pose = traj.poses[t];
        track.frames.push_back(std::move(frame));
      }
      manifest.tracks.push_back(std::move(track));
    }
  }
  save_manifest(cfg.out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace seqfit
