#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqfit/simulator.hpp"
#include "seqfit/errors.hpp"
#include "seqfit/rng.hpp"
#include "test_util.hpp"

using namespace seqfit;
namespace fs = std::filesystem;

namespace {

TriMesh unit_cube(double size = 1.0, Vec3 center = {0, 0, 0}) {
  const double h = size / 2.0;
  TriMesh m;
  for (int i = 0; i < 8; ++i) {
    m.vertices.push_back({center.x + (i & 1 ? h : -h),
                          center.y + (i & 2 ? h : -h),
                          center.z + (i & 4 ? h : -h)});
  }
  const int quads[6][4] = {{0, 1, 3, 2}, {4, 6, 7, 5}, {0, 4, 5, 1},
                           {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 5, 7, 3}};
  for (const auto& q : quads) {
    m.faces.push_back({q[0], q[1], q[2]});
    m.faces.push_back({q[0], q[2], q[3]});
  }
  return m;
}

// Large wall occupying the plane x = d.
TriMesh wall_at_x(double d) {
  TriMesh m;
  m.vertices = {{d, -30, -5}, {d, 30, -5}, {d, 30, 10}, {d, -30, 10}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

// Mirror of the production intersection test, used as a brute-force oracle.
std::optional<double> mt_intersect(const Vec3& o, const Vec3& d, const Vec3& a,
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

std::optional<RayHit> brute_first_hit(const TriMesh& mesh, const Vec3& o,
                                      const Vec3& d, double max_range) {
  std::optional<RayHit> best;
  for (size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    const auto t = mt_intersect(o, d, mesh.vertices[static_cast<size_t>(f[0])],
                                mesh.vertices[static_cast<size_t>(f[1])],
                                mesh.vertices[static_cast<size_t>(f[2])]);
    if (!t || *t <= 1e-9 || *t > max_range) continue;
    if (!best || *t < best->t) best = RayHit{*t, static_cast<int>(i)};
  }
  return best;
}

}  // namespace

TEST_CASE("load_obj parses vertices, fans quads, and resolves negative indices") {
  const fs::path dir = test::temp_dir("obj");
  {
    std::ofstream out(dir / "toy.obj");
    out << "# toy mesh\n"
        << "v 0 0 0\n"
        << "v 1 0 0\n"
        << "v 1 1 0\n"
        << "v 0 1 0\n"
        << "v 0 0 1\n"
        << "f 1 2 3 4\n"
        << "f 1/2/3 2//1 5/4\n"
        << "f -3 -2 -1\n";
  }
  const TriMesh m = load_obj(dir / "toy.obj");
  REQUIRE(m.vertices.size() == 5);
  REQUIRE(m.faces.size() == 4);  // quad fans into two triangles
  CHECK(m.faces[0] == std::array<int, 3>{0, 1, 2});
  CHECK(m.faces[1] == std::array<int, 3>{0, 2, 3});
  CHECK(m.faces[2] == std::array<int, 3>{0, 1, 4});
  CHECK(m.faces[3] == std::array<int, 3>{2, 3, 4});
  CHECK(m.vertices[4].z == 1.0);
  fs::remove_all(dir);
}

TEST_CASE("load_obj drops degenerate triangles and reports malformed input") {
  const fs::path dir = test::temp_dir("obj_bad");
  auto write = [&](const char* name, const char* body) {
    std::ofstream out(dir / name);
    out << body;
    return dir / name;
  };

  // Collinear face vanishes, the valid one stays.
  const TriMesh m = load_obj(write("degen.obj",
                                   "v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\n"
                                   "f 1 2 3\nf 1 2 4\n"));
  CHECK(m.faces.size() == 1);

  CHECK_THROWS_AS(load_obj(write("all_degen.obj",
                                 "v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")),
                  DegenerateInput);
  CHECK_THROWS_AS(load_obj(write("range.obj", "v 0 0 0\nf 1 2 9\n")),
                  ParseError);
  CHECK_THROWS_AS(load_obj(write("short_face.obj", "v 0 0 0\nv 1 0 0\nf 1 2\n")),
                  ParseError);
  CHECK_THROWS_AS(load_obj(write("short_vertex.obj", "v 1 2\n")), ParseError);
  CHECK_THROWS_AS(load_obj(write("alpha.obj", "v a b c\n")), ParseError);
  CHECK_THROWS_AS(load_obj(dir / "missing.obj"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("first_hit against an axis-aligned wall matches the analytic distance") {
  const TriMesh wall = wall_at_x(10.0);
  const GridRaycaster rc(wall);

  const auto straight = rc.first_hit({0, 0, 0}, {1, 0, 0}, 100.0);
  REQUIRE(straight.has_value());
  CHECK(std::abs(straight->t - 10.0) <= 1e-9);

  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  const auto diagonal = rc.first_hit({0, 0, 0}, {inv_sqrt2, inv_sqrt2, 0}, 100.0);
  REQUIRE(diagonal.has_value());
  CHECK(std::abs(diagonal->t - 10.0 * std::sqrt(2.0)) <= 1e-9);

  CHECK_FALSE(rc.first_hit({0, 0, 0}, {-1, 0, 0}, 100.0).has_value());
  CHECK_FALSE(rc.first_hit({0, 0, 0}, {1, 0, 0}, 5.0).has_value());  // range cap
}

TEST_CASE("first_hit against a cube matches the slab-method entry point") {
  const TriMesh cube = unit_cube(1.0);
  const GridRaycaster rc(cube);
  Rng rng(31);
  for (int it = 0; it < 200; ++it) {
    Vec3 o{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    o = o * (3.0 / std::max(o.norm(), 1e-9));  // on a sphere clear of the cube
    const Vec3 target{rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45),
                      rng.uniform(-0.45, 0.45)};
    Vec3 d = target - o;
    d = d * (1.0 / d.norm());

    if (it % 4 == 3) {
      // Pointing away from an interior target from 3 units out: certain miss.
      CHECK_FALSE(rc.first_hit(o, d * -1.0, 100.0).has_value());
      continue;
    }

    // Slab method on [-0.5, 0.5]^3 gives the analytic entry distance.
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    const double odir[3] = {o.x, o.y, o.z};
    const double ddir[3] = {d.x, d.y, d.z};
    for (int ax = 0; ax < 3; ++ax) {
      double ta = (-0.5 - odir[ax]) / ddir[ax];
      double tb = (0.5 - odir[ax]) / ddir[ax];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    REQUIRE(t0 <= t1);  // the target sits inside the box
    const auto hit = rc.first_hit(o, d, 100.0);
    REQUIRE(hit.has_value());
    CHECK(std::abs(hit->t - t0) <= 1e-9);
  }
}

TEST_CASE("grid traversal agrees with brute force on a random triangle soup") {
  Rng rng(47);
  TriMesh soup;
  for (int i = 0; i < 30; ++i) {
    const int base = static_cast<int>(soup.vertices.size());
    const Vec3 a{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    soup.vertices.push_back(a);
    soup.vertices.push_back(a + Vec3{rng.uniform(-0.6, 0.6),
                                     rng.uniform(-0.6, 0.6),
                                     rng.uniform(-0.6, 0.6)});
    soup.vertices.push_back(a + Vec3{rng.uniform(-0.6, 0.6),
                                     rng.uniform(-0.6, 0.6),
                                     rng.uniform(-0.6, 0.6)});
    soup.faces.push_back({base, base + 1, base + 2});
  }
  const GridRaycaster rc(soup);
  int hits = 0;
  for (int it = 0; it < 200; ++it) {
    Vec3 o{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    if (o.norm() < 2.0) o = o * (2.5 / std::max(o.norm(), 1e-9));
    Vec3 d{rng.uniform(-1, 1) - o.x, rng.uniform(-1, 1) - o.y,
           rng.uniform(-1, 1) - o.z};
    d = d * (1.0 / d.norm());

    const auto fast = rc.first_hit(o, d, 50.0);
    const auto brute = brute_first_hit(soup, o, d, 50.0);
    REQUIRE(fast.has_value() == brute.has_value());
    if (fast) {
      CHECK(fast->t == brute->t);
      CHECK(fast->tri == brute->tri);
      ++hits;
    }
  }
  CHECK(hits > 50);
}

TEST_CASE("raycast_scan is deterministic and keyed by the seed") {
  const TriMesh wall = wall_at_x(10.0);
  LidarModel lidar;
  lidar.elevations_deg = {-5, 0, 5};
  lidar.azimuth_step_deg = 1.0;
  lidar.azimuth_min_deg = -20;
  lidar.azimuth_max_deg = 20;

  const PointCloud a = raycast_scan(wall, PlanarPose::identity(), lidar, 7);
  const PointCloud b = raycast_scan(wall, PlanarPose::identity(), lidar, 7);
  const PointCloud c = raycast_scan(wall, PlanarPose::identity(), lidar, 8);
  REQUIRE(a.size() == b.size());
  REQUIRE(a.size() == 3 * 41);  // every ray in the window hits the wall
  bool all_equal = true, any_diff = false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a.points[i].x != b.points[i].x || a.points[i].y != b.points[i].y ||
        a.points[i].z != b.points[i].z)
      all_equal = false;
    if (a.points[i].x != c.points[i].x) any_diff = true;
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("narrowing the azimuth window does not shift per-ray noise") {
  const TriMesh wall = wall_at_x(10.0);
  LidarModel full;
  full.elevations_deg = {-5, 0, 5};
  full.azimuth_step_deg = 1.0;
  LidarModel narrow = full;
  narrow.azimuth_min_deg = -10;
  narrow.azimuth_max_deg = 10;

  const PointCloud pf = raycast_scan(wall, PlanarPose::identity(), full, 99);
  const PointCloud pn = raycast_scan(wall, PlanarPose::identity(), narrow, 99);
  CHECK(pn.size() == 3 * 21);

  std::set<std::array<double, 3>> in_full;
  for (const Vec3& p : pf.points) in_full.insert({p.x, p.y, p.z});
  for (const Vec3& p : pn.points) {
    CHECK(in_full.count({p.x, p.y, p.z}) == 1);
  }
}

TEST_CASE("range noise is clamped to four sigma around the true surface") {
  const TriMesh wall = wall_at_x(10.0);
  LidarModel lidar;
  lidar.elevations_deg = {-2, 0, 2};
  lidar.azimuth_step_deg = 0.5;
  lidar.azimuth_min_deg = -30;
  lidar.azimuth_max_deg = 30;

  SUBCASE("zero sigma lands exactly on the surface") {
    lidar.noise_sigma = 0.0;
    const PointCloud pts = raycast_scan(wall, PlanarPose::identity(), lidar, 1);
    REQUIRE_FALSE(pts.empty());
    for (const Vec3& p : pts.points) CHECK(std::abs(p.x - 10.0) <= 1e-9);
  }
  SUBCASE("large sigma spreads but never exceeds the clamp") {
    lidar.noise_sigma = 0.5;
    const PointCloud pts = raycast_scan(wall, PlanarPose::identity(), lidar, 1);
    REQUIRE(pts.size() > 300);
    double worst = 0.0;
    for (const Vec3& p : pts.points) {
      // Along-ray noise displaces x by at most the full noise magnitude.
      CHECK(std::abs(p.x - 10.0) <= 4.0 * 0.5 + 1e-9);
      worst = std::max(worst, std::abs(p.x - 10.0));
    }
    CHECK(worst > 1.5 * 0.5);  // the noise is actually applied
  }
}

TEST_CASE("raycast_scan respects the vehicle pose and range limit") {
  const TriMesh cube = unit_cube(1.0, {0, 0, 0.5});
  LidarModel lidar = LidarModel::vlp16();
  lidar.azimuth_min_deg = -30;
  lidar.azimuth_max_deg = 30;

  PlanarPose pose;
  pose.tx = 8.0;
  const PointCloud pts = raycast_scan(cube, pose, lidar, 3);
  REQUIRE(pts.size() > 10);
  for (const Vec3& p : pts.points) {
    CHECK(p.x > 7.0);
    CHECK(p.x < 9.0);
    CHECK(std::abs(p.y) < 1.0);
  }

  lidar.max_range = 5.0;  // vehicle is beyond reach
  CHECK(raycast_scan(cube, pose, lidar, 3).empty());
}

TEST_CASE("icosphere42 is a symmetric unit-sphere point set") {
  const std::vector<Vec3> pts = icosphere42();
  REQUIRE(pts.size() == 42);
  for (const Vec3& p : pts) CHECK(std::abs(p.norm() - 1.0) <= 1e-12);
  for (size_t i = 0; i < pts.size(); ++i) {
    // Antipodal closure: the set contains every point's mirror.
    double best = 1e9;
    for (size_t j = 0; j < pts.size(); ++j)
      best = std::min(best, (pts[i] + pts[j]).norm());
    CHECK(best <= 1e-9);
    for (size_t j = i + 1; j < pts.size(); ++j)
      CHECK((pts[i] - pts[j]).norm() > 0.3);  // no duplicates
  }
}

TEST_CASE("sample_complete covers the surface and is deterministic") {
  const TriMesh cube = unit_cube(1.0);
  const PointCloud a = sample_complete(cube, 200, 5);
  const PointCloud b = sample_complete(cube, 200, 5);
  REQUIRE(a.size() == 200);
  for (size_t i = 0; i < a.size(); ++i) {
    const Vec3& p = a.points[i];
    const double face_dist = std::max(
        {std::abs(p.x), std::abs(p.y), std::abs(p.z)});
    CHECK(std::abs(face_dist - 0.5) <= 1e-9);  // on the cube surface
    CHECK(p.x == b.points[i].x);
    CHECK(p.y == b.points[i].y);
    CHECK(p.z == b.points[i].z);
  }

  // All six faces receive samples.
  int count_posx = 0, count_negx = 0, count_posz = 0;
  for (const Vec3& p : a.points) {
    count_posx += (std::abs(p.x - 0.5) <= 1e-9);
    count_negx += (std::abs(p.x + 0.5) <= 1e-9);
    count_posz += (std::abs(p.z - 0.5) <= 1e-9);
  }
  CHECK(count_posx > 5);
  CHECK(count_negx > 5);
  CHECK(count_posz > 5);

  CHECK_THROWS_AS(sample_complete(cube, 0, 1), DegenerateInput);
  CHECK_THROWS_AS(sample_complete(TriMesh{}, 10, 1), DegenerateInput);
}

TEST_CASE("sample_complete rejects surfaces hidden from every viewpoint") {
  // A small cube sealed inside a large one: its surface is invisible, so no
  // sample may land on it.
  TriMesh combined = unit_cube(1.0);
  const TriMesh inner = unit_cube(0.4);
  const int base = static_cast<int>(combined.vertices.size());
  combined.vertices.insert(combined.vertices.end(), inner.vertices.begin(),
                           inner.vertices.end());
  for (const auto& f : inner.faces)
    combined.faces.push_back({f[0] + base, f[1] + base, f[2] + base});

  const PointCloud pts = sample_complete(combined, 300, 9);
  REQUIRE(pts.size() == 300);
  for (const Vec3& p : pts.points) {
    const double face_dist =
        std::max({std::abs(p.x), std::abs(p.y), std::abs(p.z)});
    CHECK(face_dist > 0.45);  // never on the inner cube (its radius is 0.2)
  }
}

TEST_CASE("straight trajectory advances at constant velocity and heading") {
  TrajectoryParams p;
  p.speed = 5.0;
  p.rate_hz = 10.0;
  p.x0 = 3.0;
  p.y0 = -1.0;
  p.heading0 = 0.5;
  const Trajectory tr = make_trajectory(TrajectoryKind::kStraight, p, 11);
  REQUIRE(tr.poses.size() == 11);
  REQUIRE(tr.times.size() == 11);
  for (size_t k = 0; k < tr.poses.size(); ++k) {
    const double t = static_cast<double>(k) / 10.0;
    CHECK(tr.times[k] == doctest::Approx(t).epsilon(1e-15));
    CHECK(tr.poses[k].tx ==
          doctest::Approx(3.0 + 5.0 * t * std::cos(0.5)).epsilon(1e-12));
    CHECK(tr.poses[k].ty ==
          doctest::Approx(-1.0 + 5.0 * t * std::sin(0.5)).epsilon(1e-12));
    CHECK(tr.poses[k].theta == doctest::Approx(0.5).epsilon(1e-15));
  }
}

TEST_CASE("arc trajectory stays on its circle with matching heading rate") {
  TrajectoryParams p;
  p.speed = 5.0;
  p.rate_hz = 10.0;
  p.x0 = 10.0;
  p.y0 = 2.0;
  p.heading0 = 0.3;
  p.radius = 20.0;
  const Trajectory tr = make_trajectory(TrajectoryKind::kArc, p, 30);
  const double cx = 10.0 - 20.0 * std::sin(0.3);
  const double cy = 2.0 + 20.0 * std::cos(0.3);
  for (size_t k = 0; k < tr.poses.size(); ++k) {
    const double r = std::hypot(tr.poses[k].tx - cx, tr.poses[k].ty - cy);
    CHECK(std::abs(r - 20.0) <= 1e-9);
    const double want_theta = 0.3 + 5.0 * tr.times[k] / 20.0;
    CHECK(tr.poses[k].theta == doctest::Approx(want_theta).epsilon(1e-12));
  }

  // Negative radius turns the other way.
  p.radius = -20.0;
  const Trajectory tr2 = make_trajectory(TrajectoryKind::kArc, p, 10);
  CHECK(tr2.poses.back().theta < 0.3);
}

TEST_CASE("s-curve keeps speed across the inflection and flips curvature") {
  TrajectoryParams p;
  p.speed = 5.0;
  p.rate_hz = 10.0;
  p.heading0 = 0.0;
  p.radius = 20.0;
  const Trajectory tr = make_trajectory(TrajectoryKind::kSCurve, p, 40);
  REQUIRE(tr.poses.size() == 40);

  // Every consecutive pair is separated by the same arc chord.
  const double chord = 2.0 * 20.0 * std::sin(5.0 * 0.1 / (2.0 * 20.0));
  for (size_t k = 0; k + 1 < tr.poses.size(); ++k) {
    const double d = std::hypot(tr.poses[k + 1].tx - tr.poses[k].tx,
                                tr.poses[k + 1].ty - tr.poses[k].ty);
    CHECK(d == doctest::Approx(chord).epsilon(1e-9));
  }
  // Heading rises on the first arc, falls on the mirrored one.
  CHECK(tr.poses[10].theta > tr.poses[0].theta);
  CHECK(tr.poses[39].theta < tr.poses[25].theta);
}

TEST_CASE("stop-and-go freezes the middle third of the run") {
  TrajectoryParams p;
  p.speed = 6.0;
  p.rate_hz = 10.0;
  p.x0 = 0.0;
  p.heading0 = 0.0;
  const Trajectory tr = make_trajectory(TrajectoryKind::kStopGo, p, 30);
  REQUIRE(tr.poses.size() == 30);
  // t_a = 1s at 6 m/s puts the stop at x = 6.
  CHECK(tr.poses[10].tx == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(tr.poses[15].tx == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(tr.poses[19].tx == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(tr.poses[20].tx == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(tr.poses[25].tx > 6.0 + 1.0);
  CHECK(tr.poses[29].tx ==
        doctest::Approx(6.0 * (2.9 - 1.0)).epsilon(1e-12));  // 1s stationary
  // Timestamps keep ticking through the stop.
  for (size_t k = 0; k + 1 < tr.times.size(); ++k)
    CHECK(tr.times[k + 1] > tr.times[k]);
}

TEST_CASE("trajectory construction validates its parameters") {
  TrajectoryParams p;
  CHECK_THROWS_AS(make_trajectory(TrajectoryKind::kStraight, p, 0), ConfigError);
  p.rate_hz = 0.0;
  CHECK_THROWS_AS(make_trajectory(TrajectoryKind::kStraight, p, 5), ConfigError);
  p.rate_hz = 10.0;
  p.speed = -1.0;
  CHECK_THROWS_AS(make_trajectory(TrajectoryKind::kStraight, p, 5), ConfigError);
  p.speed = 5.0;
  p.radius = 0.0;
  CHECK_THROWS_AS(make_trajectory(TrajectoryKind::kArc, p, 5), ConfigError);

  CHECK(trajectory_kind_from_string("straight") == TrajectoryKind::kStraight);
  CHECK(trajectory_kind_from_string("arc") == TrajectoryKind::kArc);
  CHECK(trajectory_kind_from_string("s_curve") == TrajectoryKind::kSCurve);
  CHECK(trajectory_kind_from_string("stop_go") == TrajectoryKind::kStopGo);
  CHECK_THROWS_AS(trajectory_kind_from_string("zigzag"), ConfigError);
}

TEST_CASE("trajectory csv round-trips exactly") {
  TrajectoryParams p;
  p.heading0 = 0.7;
  const Trajectory tr = make_trajectory(TrajectoryKind::kArc, p, 12);
  const fs::path dir = test::temp_dir("traj");
  save_trajectory_csv(dir / "t.csv", tr);
  const Trajectory rt = load_trajectory_csv(dir / "t.csv");
  REQUIRE(rt.poses.size() == tr.poses.size());
  for (size_t k = 0; k < tr.poses.size(); ++k) {
    CHECK(rt.times[k] == tr.times[k]);
    CHECK(rt.poses[k].tx == tr.poses[k].tx);
    CHECK(rt.poses[k].ty == tr.poses[k].ty);
    CHECK(rt.poses[k].theta == tr.poses[k].theta);
  }

  {
    std::ofstream bad(dir / "bad_header.csv");
    bad << "time,x,y\n0,1,2\n";
  }
  CHECK_THROWS_AS(load_trajectory_csv(dir / "bad_header.csv"), ParseError);
  {
    std::ofstream bad(dir / "bad_order.csv");
    bad << "t,x,y,theta\n0,1,2,0\n0,2,3,0\n";
  }
  CHECK_THROWS_AS(load_trajectory_csv(dir / "bad_order.csv"), ParseError);
  CHECK_THROWS_AS(load_trajectory_csv(dir / "missing.csv"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("boxcar mesh fills its declared bounding box") {
  const BoxcarParams p;  // 4.2 x 1.8 x 1.5 sedan-ish defaults
  const TriMesh m = make_boxcar(p);
  REQUIRE_FALSE(m.faces.empty());
  Vec3 lo = m.vertices[0], hi = m.vertices[0];
  for (const Vec3& v : m.vertices) {
    lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
    hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
  }
  CHECK(lo.x == doctest::Approx(-2.1).epsilon(1e-12));
  CHECK(hi.x == doctest::Approx(2.1).epsilon(1e-12));
  CHECK(lo.y == doctest::Approx(-0.9).epsilon(1e-12));
  CHECK(hi.y == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(lo.z == 0.0);
  CHECK(hi.z == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("boxcar profile has a low hood, a high cabin, and a front bevel") {
  const TriMesh m = make_boxcar(BoxcarParams{});
  const GridRaycaster rc(m);
  auto top_z = [&](double x, double y) {
    const auto hit = rc.first_hit({x, y, 5.0}, {0, 0, -1}, 100.0);
    REQUIRE(hit.has_value());
    return 5.0 - hit->t;
  };
  // body_h = 1.5 * 0.55 = 0.825; bevel = min(0.5, 0.4 * 0.825) = 0.33.
  CHECK(top_z(1.0, 0.0) == doctest::Approx(0.825).epsilon(1e-9));   // hood
  CHECK(top_z(0.0, 0.0) == doctest::Approx(1.5).epsilon(1e-9));     // roof
  CHECK(top_z(2.0, 0.0) == doctest::Approx(0.595).epsilon(1e-9));   // bevel
  // The cabin is narrower than the body: off-center the roof drops away.
  CHECK(top_z(0.0, 0.85) == doctest::Approx(0.825).epsilon(1e-9));

  CHECK_THROWS_AS(make_boxcar({.length = -1}), ConfigError);
  CHECK_THROWS_AS(make_boxcar({.body_height_frac = 1.0}), ConfigError);
  CHECK_THROWS_AS(
      make_boxcar({.cabin_front_frac = 0.8, .cabin_rear_frac = 0.3}),
      ConfigError);
}

TEST_CASE("boxcar variants repeat modulo the family size") {
  const TriMesh a = make_boxcar_variant(0);
  const TriMesh b = make_boxcar_variant(8);
  REQUIRE(a.vertices.size() == b.vertices.size());
  for (size_t i = 0; i < a.vertices.size(); ++i) {
    CHECK(a.vertices[i].x == b.vertices[i].x);
    CHECK(a.vertices[i].z == b.vertices[i].z);
  }
  // Adjacent variants differ in their proportions.
  const TriMesh c = make_boxcar_variant(1);
  double hi_a = 0, hi_c = 0;
  for (const Vec3& v : a.vertices) hi_a = std::max(hi_a, v.z);
  for (const Vec3& v : c.vertices) hi_c = std::max(hi_c, v.z);
  CHECK(hi_a != hi_c);
}

TEST_CASE("lidar json io applies over defaults and rejects unknown keys") {
  LidarModel lidar = LidarModel::vlp16();
  REQUIRE(lidar.elevations_deg.size() == 16);
  CHECK(lidar.elevations_deg.front() == -15.0);
  CHECK(lidar.elevations_deg.back() == 15.0);

  lidar.noise_sigma = 0.03;
  lidar.azimuth_min_deg = -90;
  lidar.azimuth_max_deg = 90;
  const LidarModel rt = lidar_from_json(lidar_to_json(lidar));
  CHECK(rt.elevations_deg == lidar.elevations_deg);
  CHECK(rt.noise_sigma == lidar.noise_sigma);
  CHECK(rt.azimuth_min_deg == lidar.azimuth_min_deg);
  CHECK(rt.max_range == lidar.max_range);

  const LidarModel partial = lidar_from_json({{"noise_sigma", 0.0}});
  CHECK(partial.noise_sigma == 0.0);
  CHECK(partial.elevations_deg.size() == 16);  // defaults fill the rest

  CHECK_THROWS_WITH_AS(lidar_from_json({{"noise_sgima", 0.0}}),
                       doctest::Contains("noise_sgima"), ConfigError);
  CHECK_THROWS_AS(lidar_from_json({{"max_range", "far"}}), ConfigError);
  CHECK_THROWS_AS(lidar_from_json({{"azimuth_step_deg", 0.7}}),
                  ConfigError);  // does not divide 360
  CHECK_THROWS_AS(lidar_from_json({{"elevations_deg", {5.0, -5.0}}}),
                  ConfigError);  // not increasing
  CHECK_THROWS_AS(
      lidar_from_json({{"azimuth_min_deg", 10.0}, {"azimuth_max_deg", -10.0}}),
      ConfigError);
}

TEST_CASE("build_dataset writes a loadable, reproducible track set") {
  const fs::path dir = test::temp_dir("dataset");
  BuildConfig cfg;
  cfg.out_dir = dir / "a";
  cfg.meshes.emplace_back("cube", unit_cube(1.0, {0, 0, 0.5}));
  TrajectoryParams tp;
  tp.x0 = 8.0;
  tp.speed = 2.0;
  cfg.trajectories.emplace_back(
      "straight", make_trajectory(TrajectoryKind::kStraight, tp, 3));
  cfg.lidar = LidarModel::vlp16();
  cfg.lidar.azimuth_min_deg = -30;
  cfg.lidar.azimuth_max_deg = 30;
  cfg.gt_points = 64;
  cfg.seed = 5;

  const DatasetManifest manifest = build_dataset(cfg);
  REQUIRE(manifest.tracks.size() == 1);
  CHECK(manifest.tracks[0].frames.size() == 3);

  const std::vector<Track> tracks = load_tracks(cfg.out_dir / "manifest.json");
  REQUIRE(tracks.size() == 1);
  const Track& tr = tracks[0];
  CHECK(tr.mesh == "cube");
  CHECK(tr.complete.size() == 64);
  REQUIRE(tr.frames.size() == 3);
  REQUIRE(tr.poses.size() == 3);
  CHECK(tr.poses[1].tx == doctest::Approx(8.2).epsilon(1e-12));
  for (const PointCloud& f : tr.frames) CHECK(f.size() >= 5);

  // Bit-identical rebuild under the same seed.
  cfg.out_dir = dir / "b";
  build_dataset(cfg);
  const std::vector<Track> again = load_tracks(cfg.out_dir / "manifest.json");
  REQUIRE(again[0].frames.size() == tr.frames.size());
  for (size_t t = 0; t < tr.frames.size(); ++t) {
    REQUIRE(again[0].frames[t].size() == tr.frames[t].size());
    for (size_t i = 0; i < tr.frames[t].size(); ++i) {
      CHECK(again[0].frames[t].points[i].x == tr.frames[t].points[i].x);
      CHECK(again[0].frames[t].points[i].z == tr.frames[t].points[i].z);
    }
  }
  fs::remove_all(dir);
}
