#include "seqfit/amodal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "seqfit/errors.hpp"
#include "seqfit/metrics.hpp"

namespace seqfit {

void validate_camera(const CameraModel& cam) {
  if (!(cam.fx > 0.0) || !(cam.fy > 0.0)) {
    throw ConfigError("camera: fx and fy must be positive");
  }
  if (cam.w < 1 || cam.h < 1) {
    throw ConfigError("camera: image size must be at least 1x1");
  }
  if (!(cam.cx >= 0.0) || !(cam.cx < cam.w) || !(cam.cy >= 0.0) ||
      !(cam.cy < cam.h)) {
    throw ConfigError("camera: principal point must lie inside the image");
  }
  const auto& e = cam.extrinsic;
  if (std::abs(e[12]) > 1e-9 || std::abs(e[13]) > 1e-9 ||
      std::abs(e[14]) > 1e-9 || std::abs(e[15] - 1.0) > 1e-9) {
    throw ConfigError("camera: extrinsic last row must be 0 0 0 1");
  }
  // Rotation block must be orthonormal and right-handed; the inverse used by
  // projection is its transpose.
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += e[4 * k + i] * e[4 * k + j];
      const double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(dot - want) > 1e-6) {
        throw ConfigError("camera: extrinsic rotation must be orthonormal");
      }
    }
  }
  const double det =
      e[0] * (e[5] * e[10] - e[6] * e[9]) - e[1] * (e[4] * e[10] - e[6] * e[8]) +
      e[2] * (e[4] * e[9] - e[5] * e[8]);
  if (std::abs(det - 1.0) > 1e-6) {
    throw ConfigError("camera: extrinsic rotation must be right-handed");
  }
}

nlohmann::json camera_to_json(const CameraModel& cam) {
  return nlohmann::json{{"fx", cam.fx},       {"fy", cam.fy},
                        {"cx", cam.cx},       {"cy", cam.cy},
                        {"w", cam.w},         {"h", cam.h},
                        {"extrinsic", cam.extrinsic}};
}

CameraModel camera_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("camera config must be an object");
  CameraModel cam;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "fx") {
        cam.fx = value.get<double>();
      } else if (key == "fy") {
        cam.fy = value.get<double>();
      } else if (key == "cx") {
        cam.cx = value.get<double>();
      } else if (key == "cy") {
        cam.cy = value.get<double>();
      } else if (key == "w") {
        cam.w = value.get<int>();
      } else if (key == "h") {
        cam.h = value.get<int>();
      } else if (key == "extrinsic") {
        const auto v = value.get<std::vector<double>>();
        if (v.size() != 16) {
          throw ConfigError("camera: extrinsic must have 16 numbers");
        }
        std::copy(v.begin(), v.end(), cam.extrinsic.begin());
      } else {
        throw ConfigError("unknown key '" + key + "' in camera config");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("camera config key '" + key + "' has the wrong type");
    }
  }
  validate_camera(cam);
  return cam;
}

std::vector<ProjectedPoint> project(const PointCloud& cloud,
                                    const CameraModel& cam) {
  const auto& e = cam.extrinsic;
  std::vector<ProjectedPoint> out;
  out.reserve(cloud.size());
  for (const Vec3& p : cloud.points) {
    // Camera-frame coordinates via the transposed rotation block.
    const double dx = p.x - e[3], dy = p.y - e[7], dz = p.z - e[11];
    const double px = e[0] * dx + e[4] * dy + e[8] * dz;
    const double py = e[1] * dx + e[5] * dy + e[9] * dz;
    const double pz = e[2] * dx + e[6] * dy + e[10] * dz;
    ProjectedPoint pp;
    pp.depth = pz;
    pp.in_front = pz > 1e-12;
    if (pp.in_front) {
      pp.u = cam.cx + cam.fx * px / pz;
      pp.v = cam.cy + cam.fy * py / pz;
      pp.in_image = pp.u >= 0.0 && pp.u < cam.w && pp.v >= 0.0 && pp.v < cam.h;
    }
    out.push_back(pp);
  }
  return out;
}

namespace {

struct DelaunayTri {
  int a, b, c;  // CCW
  long double ccx = 0, ccy = 0, rr = 0;
  bool alive = true;
};

void compute_circumcircle(const std::vector<std::array<double, 2>>& pts,
                          DelaunayTri& t) {
  const long double ax = pts[static_cast<size_t>(t.a)][0];
  const long double ay = pts[static_cast<size_t>(t.a)][1];
  const long double bx = pts[static_cast<size_t>(t.b)][0] - ax;
  const long double by = pts[static_cast<size_t>(t.b)][1] - ay;
  const long double cx = pts[static_cast<size_t>(t.c)][0] - ax;
  const long double cy = pts[static_cast<size_t>(t.c)][1] - ay;
  const long double d = 2.0L * (bx * cy - by * cx);
  if (fabsl(d) < 1e-300L) {
    t.ccx = ax;
    t.ccy = ay;
    t.rr = std::numeric_limits<long double>::infinity();
    return;
  }
  const long double b2 = bx * bx + by * by;
  const long double c2 = cx * cx + cy * cy;
  const long double ux = (cy * b2 - by * c2) / d;
  const long double uy = (bx * c2 - cx * b2) / d;
  t.ccx = ax + ux;
  t.ccy = ay + uy;
  t.rr = ux * ux + uy * uy;
}

bool in_circumcircle(const std::vector<std::array<double, 2>>& pts,
                     const DelaunayTri& t, int pi) {
  const long double dx = pts[static_cast<size_t>(pi)][0] - t.ccx;
  const long double dy = pts[static_cast<size_t>(pi)][1] - t.ccy;
  return dx * dx + dy * dy <= t.rr * (1.0L + 1e-14L);
}

void make_ccw(const std::vector<std::array<double, 2>>& pts, DelaunayTri& t) {
  const auto& a = pts[static_cast<size_t>(t.a)];
  const auto& b = pts[static_cast<size_t>(t.b)];
  const auto& c = pts[static_cast<size_t>(t.c)];
  const long double area2 =
      (static_cast<long double>(b[0]) - a[0]) * (static_cast<long double>(c[1]) - a[1]) -
      (static_cast<long double>(b[1]) - a[1]) * (static_cast<long double>(c[0]) - a[0]);
  if (area2 < 0) std::swap(t.b, t.c);
}

uint64_t undirected_edge_key(int a, int b) {
  const uint64_t lo = static_cast<uint64_t>(std::min(a, b));
  const uint64_t hi = static_cast<uint64_t>(std::max(a, b));
  return (hi << 32) | lo;
}

}  // namespace

std::vector<Polygon> alpha_shape_2d(
    const std::vector<std::array<double, 2>>& points, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("alpha_shape_2d: alpha must be positive");

  // Dedupe on a 1e-7 px grid, keeping first occurrences verbatim.
  std::vector<std::array<double, 2>> pts;
  {
    std::unordered_map<uint64_t, char> seen;
    seen.reserve(points.size() * 2);
    for (const auto& p : points) {
      if (!std::isfinite(p[0]) || !std::isfinite(p[1])) {
        throw DegenerateInput("alpha_shape_2d: non-finite point");
      }
      const uint64_t kx =
          static_cast<uint64_t>(static_cast<int64_t>(std::llround(p[0] * 1e7)));
      const uint64_t ky =
          static_cast<uint64_t>(static_cast<int64_t>(std::llround(p[1] * 1e7)));
      uint64_t k = kx * 0x9E3779B97F4A7C15ull ^ ky;
      if (seen.emplace(k, 1).second) pts.push_back(p);
    }
  }
  const int n = static_cast<int>(pts.size());
  if (n < 3) throw DegenerateInput("alpha_shape_2d: fewer than 3 distinct points");

  double min_x = pts[0][0], max_x = pts[0][0];
  double min_y = pts[0][1], max_y = pts[0][1];
  for (const auto& p : pts) {
    min_x = std::min(min_x, p[0]);
    max_x = std::max(max_x, p[0]);
    min_y = std::min(min_y, p[1]);
    max_y = std::max(max_y, p[1]);
  }
  const double span = std::max({max_x - min_x, max_y - min_y, 1.0});
  {
    // Collinearity: max triangle area against the two farthest-apart anchors.
    int far_i = 0;
    double far_d = -1.0;
    for (int i = 1; i < n; ++i) {
      const double dx = pts[static_cast<size_t>(i)][0] - pts[0][0];
      const double dy = pts[static_cast<size_t>(i)][1] - pts[0][1];
      const double d = dx * dx + dy * dy;
      if (d > far_d) {
        far_d = d;
        far_i = i;
      }
    }
    const double ex = pts[static_cast<size_t>(far_i)][0] - pts[0][0];
    const double ey = pts[static_cast<size_t>(far_i)][1] - pts[0][1];
    double max_cross = 0.0;
    for (int i = 0; i < n; ++i) {
      const double dx = pts[static_cast<size_t>(i)][0] - pts[0][0];
      const double dy = pts[static_cast<size_t>(i)][1] - pts[0][1];
      max_cross = std::max(max_cross, std::abs(ex * dy - ey * dx));
    }
    if (max_cross <= 1e-12 * span * span) {
      throw DegenerateInput("alpha_shape_2d: points are collinear");
    }
  }

  // Bowyer-Watson starting from a super-triangle far outside the data.
  const double cx0 = (min_x + max_x) / 2.0, cy0 = (min_y + max_y) / 2.0;
  pts.push_back({cx0 - 32.0 * span, cy0 - 16.0 * span});
  pts.push_back({cx0 + 32.0 * span, cy0 - 16.0 * span});
  pts.push_back({cx0, cy0 + 32.0 * span});

  std::vector<DelaunayTri> tris;
  {
    DelaunayTri super{n, n + 1, n + 2};
    make_ccw(pts, super);
    compute_circumcircle(pts, super);
    tris.push_back(super);
  }
  std::vector<int> bad;
  std::map<std::pair<int, int>, int> cavity;  // directed edge -> count of reverse
  for (int pi = 0; pi < n; ++pi) {
    bad.clear();
    for (size_t ti = 0; ti < tris.size(); ++ti) {
      if (tris[ti].alive && in_circumcircle(pts, tris[ti], pi)) {
        bad.push_back(static_cast<int>(ti));
      }
    }
    // Cavity boundary: edges of bad triangles not shared with another bad one.
    std::map<uint64_t, int> edge_count;
    for (int ti : bad) {
      const auto& t = tris[static_cast<size_t>(ti)];
      edge_count[undirected_edge_key(t.a, t.b)]++;
      edge_count[undirected_edge_key(t.b, t.c)]++;
      edge_count[undirected_edge_key(t.c, t.a)]++;
    }
    cavity.clear();
    for (int ti : bad) {
      auto& t = tris[static_cast<size_t>(ti)];
      t.alive = false;
      const std::pair<int, int> edges[3] = {{t.a, t.b}, {t.b, t.c}, {t.c, t.a}};
      for (const auto& [u, v] : edges) {
        if (edge_count[undirected_edge_key(u, v)] == 1) cavity[{u, v}] = 1;
      }
    }
    for (const auto& [edge, unused] : cavity) {
      DelaunayTri t{edge.first, edge.second, pi};
      make_ccw(pts, t);
      compute_circumcircle(pts, t);
      tris.push_back(t);
    }
  }

  // Keep real triangles within the alpha radius.
  std::vector<DelaunayTri> kept;
  for (const auto& t : tris) {
    if (!t.alive || t.a >= n || t.b >= n || t.c >= n) continue;
    if (sqrtl(t.rr) <= static_cast<long double>(alpha) + 1e-9L) kept.push_back(t);
  }
  if (kept.empty()) return {};

  // Boundary edges appear in exactly one kept triangle; CCW triangles give
  // them a consistent direction, so loops close by following successors.
  std::map<uint64_t, int> edge_count;
  for (const auto& t : kept) {
    edge_count[undirected_edge_key(t.a, t.b)]++;
    edge_count[undirected_edge_key(t.b, t.c)]++;
    edge_count[undirected_edge_key(t.c, t.a)]++;
  }
  std::map<int, std::vector<std::pair<int, bool>>> outgoing;  // from -> (to, used)
  size_t n_boundary = 0;
  for (const auto& t : kept) {
    const std::pair<int, int> edges[3] = {{t.a, t.b}, {t.b, t.c}, {t.c, t.a}};
    for (const auto& [u, v] : edges) {
      if (edge_count[undirected_edge_key(u, v)] == 1) {
        outgoing[u].push_back({v, false});
        ++n_boundary;
      }
    }
  }
  std::vector<Polygon> loops;
  size_t consumed = 0;
  while (consumed < n_boundary) {
    int start = -1, next = -1;
    for (auto& [from, targets] : outgoing) {
      for (auto& [to, used] : targets) {
        if (!used) {
          start = from;
          next = to;
          used = true;
          break;
        }
      }
      if (start >= 0) break;
    }
    if (start < 0) break;
    ++consumed;
    Polygon loop;
    loop.pts.push_back(pts[static_cast<size_t>(start)]);
    int cur = next;
    while (cur != start) {
      loop.pts.push_back(pts[static_cast<size_t>(cur)]);
      auto it = outgoing.find(cur);
      if (it == outgoing.end()) {
        throw InternalError("alpha_shape_2d: open boundary chain");
      }
      bool advanced = false;
      for (auto& [to, used] : it->second) {
        if (!used) {
          used = true;
          ++consumed;
          cur = to;
          advanced = true;
          break;
        }
      }
      if (!advanced) throw InternalError("alpha_shape_2d: open boundary chain");
    }
    if (loop.pts.size() >= 3) loops.push_back(std::move(loop));
  }
  return loops;
}

MaskImage rasterize(const std::vector<Polygon>& polygons, int w, int h) {
  if (w < 1 || h < 1) throw ConfigError("rasterize: image size must be positive");
  MaskImage mask = MaskImage::zeros(w, h);
  auto mark = [&](long x, long y) {
    if (x >= 0 && x < w && y >= 0 && y < h) {
      mask.set(static_cast<int>(x), static_cast<int>(y));
    }
  };

  // Lattice points coincident with polygon vertices are boundary pixels.
  for (const Polygon& poly : polygons) {
    for (const auto& p : poly.pts) {
      const double ru = std::round(p[0]), rv = std::round(p[1]);
      if (std::abs(p[0] - ru) < 1e-9 && std::abs(p[1] - rv) < 1e-9) {
        mark(std::lround(ru), std::lround(rv));
      }
    }
  }

  std::vector<double> crossings;
  for (int y = 0; y < h; ++y) {
    crossings.clear();
    for (const Polygon& poly : polygons) {
      const size_t m = poly.pts.size();
      if (m < 2) continue;
      for (size_t i = 0; i < m; ++i) {
        const auto& p = poly.pts[i];
        const auto& q = poly.pts[(i + 1) % m];
        if (p[1] == q[1]) {
          // Horizontal edge: inclusive boundary pixels, no parity crossing.
          if (std::abs(p[1] - y) < 1e-9) {
            const double u0 = std::min(p[0], q[0]), u1 = std::max(p[0], q[0]);
            for (long x = std::lround(std::ceil(u0 - 1e-9));
                 x <= std::lround(std::floor(u1 + 1e-9)); ++x) {
              mark(x, y);
            }
          }
          continue;
        }
        const double lo = std::min(p[1], q[1]), hi = std::max(p[1], q[1]);
        if (y < lo || y >= hi) continue;  // half-open rule at vertices
        const double x = p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1]);
        crossings.push_back(x);
        const double rx = std::round(x);
        if (std::abs(x - rx) < 1e-9) mark(std::lround(rx), y);
      }
    }
    std::sort(crossings.begin(), crossings.end());
    for (size_t i = 0; i + 1 < crossings.size(); i += 2) {
      const long x0 = std::lround(std::ceil(crossings[i] - 1e-9));
      const long x1 = std::lround(std::floor(crossings[i + 1] + 1e-9));
      for (long x = std::max(0L, x0); x <= std::min<long>(w - 1, x1); ++x) {
        mask.set(static_cast<int>(x), y);
      }
    }
  }
  return mask;
}

void fill_mask_holes(MaskImage& mask) {
  if (mask.w < 1 || mask.h < 1) return;
  std::vector<uint8_t> outside(mask.data.size(), 0);
  std::deque<std::pair<int, int>> queue;
  auto push = [&](int x, int y) {
    const size_t i = static_cast<size_t>(y) * mask.w + x;
    if (!outside[i] && mask.data[i] == 0) {
      outside[i] = 1;
      queue.push_back({x, y});
    }
  };
  for (int x = 0; x < mask.w; ++x) {
    push(x, 0);
    push(x, mask.h - 1);
  }
  for (int y = 0; y < mask.h; ++y) {
    push(0, y);
    push(mask.w - 1, y);
  }
  while (!queue.empty()) {
    const auto [x, y] = queue.front();
    queue.pop_front();
    if (x > 0) push(x - 1, y);
    if (x + 1 < mask.w) push(x + 1, y);
    if (y > 0) push(x, y - 1);
    if (y + 1 < mask.h) push(x, y + 1);
  }
  for (size_t i = 0; i < mask.data.size(); ++i) {
    if (mask.data[i] == 0 && !outside[i]) mask.data[i] = 255;
  }
}

OcclusionResult occlusion_order(const std::vector<MaskImage>& amodal) {
  OcclusionResult res;
  if (amodal.empty()) return res;
  const int w = amodal[0].w, h = amodal[0].h;
  for (const MaskImage& m : amodal) {
    if (m.w != w || m.h != h) {
      throw ShapeMismatch("occlusion_order: mask dimensions differ");
    }
  }
  res.order.resize(amodal.size());
  for (size_t i = 0; i < amodal.size(); ++i) res.order[i] = static_cast<int>(i);
  std::stable_sort(res.order.begin(), res.order.end(), [&](int a, int b) {
    return amodal[static_cast<size_t>(a)].median_depth <
           amodal[static_cast<size_t>(b)].median_depth;
  });
  res.winner.assign(static_cast<size_t>(w) * h, -1);
  for (int idx : res.order) {
    const MaskImage& m = amodal[static_cast<size_t>(idx)];
    for (size_t i = 0; i < m.data.size(); ++i) {
      if (m.data[i] != 0 && res.winner[i] < 0) res.winner[i] = idx;
    }
  }
  res.inmodal.reserve(amodal.size());
  for (size_t mi = 0; mi < amodal.size(); ++mi) {
    MaskImage vis = MaskImage::zeros(w, h);
    vis.instance_id = amodal[mi].instance_id;
    vis.median_depth = amodal[mi].median_depth;
    for (size_t i = 0; i < vis.data.size(); ++i) {
      if (res.winner[i] == static_cast<int>(mi)) vis.data[i] = 255;
    }
    res.inmodal.push_back(std::move(vis));
  }
  return res;
}

MaskImage make_amodal_mask(const PointCloud& world_cloud,
                           const CameraModel& cam, double alpha_px,
                           bool fill_holes, int instance_id) {
  const auto projected = project(world_cloud, cam);
  std::vector<std::array<double, 2>> px;
  std::vector<double> depths;
  for (const ProjectedPoint& p : projected) {
    if (!p.in_front) continue;
    px.push_back({p.u, p.v});
    depths.push_back(p.depth);
  }
  if (px.size() < 3) {
    throw DegenerateInput("make_amodal_mask: fewer than 3 points in front of camera");
  }
  const auto polygons = alpha_shape_2d(px, alpha_px);
  MaskImage mask = rasterize(polygons, cam.w, cam.h);
  if (fill_holes) fill_mask_holes(mask);
  mask.instance_id = instance_id;
  std::nth_element(depths.begin(), depths.begin() + depths.size() / 2,
                   depths.end());
  mask.median_depth = depths[depths.size() / 2];
  return mask;
}

LabelMode label_mode_from_string(const std::string& s) {
  if (s == "gt_accumulation") return LabelMode::kGtAccumulation;
  if (s == "sequential_completion_gt") return LabelMode::kSequentialCompletionGt;
  if (s == "sequential_completion_external") {
    return LabelMode::kSequentialCompletionExternal;
  }
  throw ConfigError("unknown label mode '" + s + "'");
}

std::string label_mode_to_string(LabelMode mode) {
  switch (mode) {
    case LabelMode::kGtAccumulation:
      return "gt_accumulation";
    case LabelMode::kSequentialCompletionGt:
      return "sequential_completion_gt";
    case LabelMode::kSequentialCompletionExternal:
      return "sequential_completion_external";
  }
  throw InternalError("label_mode_to_string: bad mode");
}

std::vector<FrameLabels> label_tracks(
    const std::vector<Track>& tracks, const CameraModel& cam,
    const LabelRequest& req, const ModelWeights* weights,
    const std::vector<std::vector<PointCloud>>* external_clouds) {
  validate_camera(cam);
  if (!(req.alpha_px > 0.0)) throw ConfigError("label: alpha must be positive");
  if (tracks.empty()) return {};

  const size_t n_frames = tracks[0].frames.size();
  for (const Track& t : tracks) {
    if (t.frames.size() != n_frames) {
      throw ShapeMismatch("label: tracks disagree on frame count");
    }
  }
  const bool sequential = req.mode != LabelMode::kGtAccumulation;
  if (sequential && weights == nullptr) {
    throw ConfigError("label: sequential completion modes need model weights");
  }
  if (req.mode == LabelMode::kSequentialCompletionExternal) {
    if (external_clouds == nullptr) {
      throw ConfigError("label: external mode needs per-track instance clouds");
    }
    if (external_clouds->size() != tracks.size()) {
      throw ShapeMismatch("label: external cloud track count mismatch");
    }
    for (const auto& per_frame : *external_clouds) {
      if (per_frame.size() != n_frames) {
        throw ShapeMismatch("label: external cloud frame count mismatch");
      }
    }
  } else if (external_clouds != nullptr) {
    throw ConfigError("label: external clouds only apply to the external mode");
  }

  // Per-track, per-frame world clouds to project.
  std::vector<std::vector<PointCloud>> world(tracks.size());
  for (size_t ti = 0; ti < tracks.size(); ++ti) {
    const Track& track = tracks[ti];
    switch (req.mode) {
      case LabelMode::kGtAccumulation: {
        if (track.poses.size() != n_frames) {
          throw MissingGroundTruth("label: gt_accumulation needs a pose per frame");
        }
        const PointCloud canonical = accumulate(track.frames, track.poses);
        const PointCloud mirrored =
            mirror_about_heading(canonical, PlanarPose::identity());
        world[ti].reserve(n_frames);
        for (size_t f = 0; f < n_frames; ++f) {
          world[ti].push_back(apply_pose(track.poses[f], mirrored));
        }
        break;
      }
      case LabelMode::kSequentialCompletionGt:
      case LabelMode::kSequentialCompletionExternal: {
        const std::vector<PointCloud>& input =
            req.mode == LabelMode::kSequentialCompletionGt
                ? track.frames
                : (*external_clouds)[ti];
        const auto estimates = estimate_sequence(*weights, input);
        world[ti].reserve(n_frames);
        for (auto& est : estimates) world[ti].push_back(est.shape);
        break;
      }
    }
  }

  std::vector<FrameLabels> out(n_frames);
  for (size_t f = 0; f < n_frames; ++f) {
    std::vector<MaskImage> amodal;
    amodal.reserve(tracks.size());
    for (size_t ti = 0; ti < tracks.size(); ++ti) {
      try {
        amodal.push_back(make_amodal_mask(world[ti][f], cam, req.alpha_px,
                                          req.fill_holes,
                                          static_cast<int>(ti)));
      } catch (const DegenerateInput&) {
        MaskImage empty = MaskImage::zeros(cam.w, cam.h);
        empty.instance_id = static_cast<int>(ti);
        amodal.push_back(std::move(empty));
      }
    }
    OcclusionResult occ = occlusion_order(amodal);
    for (size_t ti = 0; ti < tracks.size(); ++ti) {
      InstanceLabel label;
      label.instance = static_cast<int>(ti);
      label.amodal = std::move(amodal[ti]);
      label.inmodal = std::move(occ.inmodal[ti]);
      out[f].instances.push_back(std::move(label));
    }
  }
  return out;
}

void write_labels(const std::filesystem::path& dir,
                  const std::vector<FrameLabels>& frames,
                  const CameraModel& cam, LabelMode mode) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json jframes = nlohmann::json::array();
  for (size_t f = 0; f < frames.size(); ++f) {
    nlohmann::json jinst = nlohmann::json::array();
    for (const InstanceLabel& label : frames[f].instances) {
      char amodal_name[64], inmodal_name[64];
      std::snprintf(amodal_name, sizeof(amodal_name), "%06zu_%03d_amodal.pgm",
                    f, label.instance);
      std::snprintf(inmodal_name, sizeof(inmodal_name), "%06zu_%03d_inmodal.pgm",
                    f, label.instance);
      write_pgm(dir / amodal_name, label.amodal);
      write_pgm(dir / inmodal_name, label.inmodal);
      jinst.push_back({{"instance", label.instance},
                       {"amodal", amodal_name},
                       {"inmodal", inmodal_name},
                       {"median_depth", label.amodal.median_depth}});
    }
    jframes.push_back(
        {{"frame", static_cast<int64_t>(f)}, {"instances", jinst}});
  }
  const nlohmann::json manifest = {{"mode", label_mode_to_string(mode)},
                                   {"camera", camera_to_json(cam)},
                                   {"frames", jframes}};
  std::ofstream out(dir / "labels.json", std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + (dir / "labels.json").string());
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + (dir / "labels.json").string());
}

std::vector<FrameLabels> read_labels(const std::filesystem::path& dir) {
  std::ifstream in(dir / "labels.json");
  if (!in) throw IoError("cannot open: " + (dir / "labels.json").string());
  std::vector<FrameLabels> out;
  try {
    const nlohmann::json manifest = nlohmann::json::parse(in);
    for (const auto& jframe : manifest.at("frames")) {
      FrameLabels frame;
      for (const auto& jinst : jframe.at("instances")) {
        InstanceLabel label;
        label.instance = jinst.at("instance").get<int>();
        label.amodal = read_pgm(dir / jinst.at("amodal").get<std::string>());
        label.inmodal = read_pgm(dir / jinst.at("inmodal").get<std::string>());
        label.amodal.instance_id = label.instance;
        label.inmodal.instance_id = label.instance;
        label.amodal.median_depth = jinst.at("median_depth").get<double>();
        label.inmodal.median_depth = label.amodal.median_depth;
        frame.instances.push_back(std::move(label));
      }
      out.push_back(std::move(frame));
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError("bad labels.json in " + dir.string() + ": " + e.what());
  }
  return out;
}

LabelScore score_labels(const std::vector<FrameLabels>& pred,
                        const std::vector<FrameLabels>& ref) {
  if (pred.size() != ref.size()) {
    throw ShapeMismatch("score_labels: frame counts differ");
  }
  double iou_sum = 0.0;
  size_t n_matched = 0, n_ref = 0, n_missed = 0;
  for (size_t f = 0; f < pred.size(); ++f) {
    std::vector<MaskImage> p, r;
    for (const InstanceLabel& label : pred[f].instances) p.push_back(label.amodal);
    // Reference instances with no pixels are invisible in this frame and
    // cannot be missed.
    for (const InstanceLabel& label : ref[f].instances) {
      if (label.amodal.count() > 0) r.push_back(label.amodal);
    }
    n_ref += r.size();
    const auto matches = greedy_match(p, r);
    std::vector<char> ref_hit(r.size(), 0);
    for (const MaskMatch& m : matches) {
      iou_sum += m.iou;
      ++n_matched;
      if (m.iou >= 0.5) ref_hit[static_cast<size_t>(m.ref)] = 1;
    }
    for (char hit : ref_hit) n_missed += (hit == 0);
  }
  LabelScore score;
  score.mean_iou = n_matched > 0 ? iou_sum / static_cast<double>(n_matched) : 0.0;
  score.percent_miss =
      n_ref > 0 ? 100.0 * static_cast<double>(n_missed) / static_cast<double>(n_ref)
                : 0.0;
  return score;
}

}  // namespace seqfit
