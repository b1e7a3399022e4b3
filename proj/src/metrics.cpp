#include "seqfit/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "seqfit/errors.hpp"
#include "seqfit/rng.hpp"

namespace seqfit {

namespace {

double dist(const Vec3& a, const Vec3& b) { return (a - b).norm(); }

double brute_nn_sum(const PointCloud& from, const PointCloud& to) {
  double total = 0.0;
  for (const Vec3& p : from.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& q : to.points) {
      const double d = dist(p, q);
      if (d < best) best = d;
    }
    total += best;
  }
  return total;
}

// Uniform grid hash for nearest-neighbor queries on large clouds. The ring
// search stops once the certified lower bound for unvisited cells exceeds the
// best distance found, so results equal the brute force values.
class GridIndex {
 public:
  explicit GridIndex(const PointCloud& cloud) : pts_(cloud.points) {
    lo_ = pts_[0];
    Vec3 hi = pts_[0];
    for (const Vec3& p : pts_) {
      lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y), std::min(lo_.z, p.z)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    const Vec3 span = hi - lo_;
    const double vol = std::max({span.x, 1e-9} ) * std::max({span.y, 1e-9}) *
                       std::max({span.z, 1e-9});
    cell_ = std::max(1e-9, std::cbrt(vol / static_cast<double>(pts_.size())));
    for (size_t i = 0; i < pts_.size(); ++i) {
      cells_[key(coord(pts_[i]))].push_back(static_cast<int>(i));
    }
  }

  double nearest(const Vec3& q) const {
    const std::array<int64_t, 3> c = coord(q);
    double best = std::numeric_limits<double>::infinity();
    for (int64_t r = 0;; ++r) {
      scan_ring(q, c, r, best);
      if (best <= static_cast<double>(r) * cell_) break;
    }
    return best;
  }

 private:
  std::array<int64_t, 3> coord(const Vec3& p) const {
    return {static_cast<int64_t>(std::floor((p.x - lo_.x) / cell_)),
            static_cast<int64_t>(std::floor((p.y - lo_.y) / cell_)),
            static_cast<int64_t>(std::floor((p.z - lo_.z) / cell_))};
  }
  static uint64_t key(const std::array<int64_t, 3>& c) {
    uint64_t h = 1469598103934665603ull;
    for (int64_t v : c) {
      h ^= static_cast<uint64_t>(v);
      h *= 1099511628211ull;
    }
    return h;
  }
  void scan_cell(const Vec3& q, const std::array<int64_t, 3>& c,
                 double& best) const {
    const auto it = cells_.find(key(c));
    if (it == cells_.end()) return;
    for (int i : it->second) {
      const double d = dist(q, pts_[i]);
      if (d < best) best = d;
    }
  }
  void scan_ring(const Vec3& q, const std::array<int64_t, 3>& c, int64_t r,
                 double& best) const {
    if (r == 0) {
      scan_cell(q, c, best);
      return;
    }
    for (int64_t dx = -r; dx <= r; ++dx) {
      for (int64_t dy = -r; dy <= r; ++dy) {
        for (int64_t dz = -r; dz <= r; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
          scan_cell(q, {c[0] + dx, c[1] + dy, c[2] + dz}, best);
        }
      }
    }
  }

  const std::vector<Vec3>& pts_;
  Vec3 lo_;
  double cell_ = 1.0;
  std::unordered_map<uint64_t, std::vector<int>> cells_;
};

double grid_nn_sum(const PointCloud& from, const PointCloud& to) {
  GridIndex index(to);
  double total = 0.0;
  for (const Vec3& p : from.points) total += index.nearest(p);
  return total;
}

double nn_mean(const PointCloud& from, const PointCloud& to) {
  const double sum = (to.size() <= 4096) ? brute_nn_sum(from, to)
                                         : grid_nn_sum(from, to);
  return sum / static_cast<double>(from.size());
}

}  // namespace

double chamfer(const PointCloud& x, const PointCloud& x_gt) {
  if (x.empty() || x_gt.empty()) throw DegenerateInput("chamfer: empty cloud");
  return nn_mean(x, x_gt) + nn_mean(x_gt, x);
}

namespace detail {

std::vector<int> assign_exact(const std::vector<double>& cost, int n) {
  // Shortest augmenting path with potentials, O(n^3). 1-based scratch arrays.
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur =
            cost[static_cast<size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j) {
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

std::vector<int> assign_auction(const std::vector<double>& cost, int n,
                                double eps_final) {
  // Bertsekas forward auction on values = -cost, epsilon scaling by 1/5.
  double cmax = 0.0;
  for (double c : cost) cmax = std::max(cmax, std::abs(c));
  std::vector<double> price(n, 0.0);
  std::vector<int> row_of(n, -1), col_of(n, -1);
  double eps = std::max(eps_final, cmax / 2.0);
  for (;;) {
    std::fill(row_of.begin(), row_of.end(), -1);
    std::fill(col_of.begin(), col_of.end(), -1);
    std::vector<int> queue(n);
    for (int i = 0; i < n; ++i) queue[i] = i;
    size_t qh = 0;
    while (qh < queue.size()) {
      const int i = queue[qh++];
      double best = -std::numeric_limits<double>::infinity();
      double second = best;
      int jbest = 0;
      for (int j = 0; j < n; ++j) {
        const double val = -cost[static_cast<size_t>(i) * n + j] - price[j];
        if (val > best) {
          second = best;
          best = val;
          jbest = j;
        } else if (val > second) {
          second = val;
        }
      }
      const double bid = (second == -std::numeric_limits<double>::infinity())
                             ? eps
                             : (best - second) + eps;
      price[jbest] += bid;
      const int prev = row_of[jbest];
      if (prev >= 0) {
        col_of[prev] = -1;
        queue.push_back(prev);
      }
      row_of[jbest] = i;
      col_of[i] = jbest;
    }
    if (eps <= eps_final) break;
    eps = std::max(eps_final, eps / 5.0);
  }
  return col_of;
}

}  // namespace detail

double emd(const PointCloud& x, const PointCloud& y) {
  if (x.empty() || y.empty()) throw DegenerateInput("emd: empty cloud");
  if (x.size() != y.size()) {
    throw ShapeMismatch("emd: cloud sizes differ (" + std::to_string(x.size()) +
                        " vs " + std::to_string(y.size()) + ")");
  }
  const int n = static_cast<int>(x.size());
  std::vector<double> cost(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      cost[static_cast<size_t>(i) * n + j] = dist(x.points[i], y.points[j]);
    }
  }
  const std::vector<int> match = (n <= 512)
                                     ? detail::assign_exact(cost, n)
                                     : detail::assign_auction(cost, n, 1e-3);
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += cost[static_cast<size_t>(i) * n + match[i]];
  return total / static_cast<double>(n);
}

double pose_loss(const PlanarPose& t, const PlanarPose& t_gt,
                 const PointCloud& x_gt) {
  if (x_gt.empty()) throw DegenerateInput("pose_loss: empty ground-truth cloud");
  const PlanarPose ti = inverse(t), gi = inverse(t_gt);
  double total = 0.0;
  for (const Vec3& p : x_gt.points) {
    const Vec3 d = apply_pose(ti, p) - apply_pose(gi, p);
    total += d.dot(d);
  }
  return total / static_cast<double>(x_gt.size());
}

double translation_error(const PlanarPose& t, const PlanarPose& t_gt) {
  return std::hypot(t.tx - t_gt.tx, t.ty - t_gt.ty);
}

double rotation_error_deg(const PlanarPose& t, const PlanarPose& t_gt) {
  return std::abs(wrap_angle(t.theta - t_gt.theta)) * 180.0 / M_PI;
}

double folded_rotation_error_deg(const PlanarPose& t, const PlanarPose& t_gt) {
  const double e = rotation_error_deg(t, t_gt);
  return std::min(e, 180.0 - e);
}

double mask_iou(const MaskImage& a, const MaskImage& b) {
  if (a.w != b.w || a.h != b.h) throw ShapeMismatch("mask_iou: image dimensions differ");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
    inter += (pa && pb);
    uni += (pa || pb);
  }
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<MaskMatch> greedy_match(std::span<const MaskImage> pred,
                                    std::span<const MaskImage> ref) {
  std::vector<MaskMatch> candidates;
  for (size_t i = 0; i < pred.size(); ++i) {
    for (size_t j = 0; j < ref.size(); ++j) {
      const double iou = mask_iou(pred[i], ref[j]);
      if (iou > 0.0) {
        candidates.push_back({static_cast<int>(i), static_cast<int>(j), iou});
      }
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const MaskMatch& a, const MaskMatch& b) { return a.iou > b.iou; });
  std::vector<char> pred_used(pred.size(), 0), ref_used(ref.size(), 0);
  std::vector<MaskMatch> out;
  for (const MaskMatch& c : candidates) {
    if (pred_used[c.pred] || ref_used[c.ref]) continue;
    pred_used[c.pred] = 1;
    ref_used[c.ref] = 1;
    out.push_back(c);
  }
  return out;
}

double percent_miss(std::span<const MaskImage> pred,
                    std::span<const MaskImage> ref) {
  if (ref.empty()) return 0.0;
  const std::vector<MaskMatch> matches = greedy_match(pred, ref);
  size_t hit = 0;
  for (const MaskMatch& m : matches) hit += (m.iou >= 0.5);
  return 100.0 * static_cast<double>(ref.size() - hit) /
         static_cast<double>(ref.size());
}

PointCloud resample(const PointCloud& cloud, size_t n, uint64_t seed) {
  if (cloud.empty()) throw DegenerateInput("resample: empty cloud");
  if (n == 0) throw DegenerateInput("resample: zero target size");
  Rng rng(seed);
  PointCloud out;
  out.points.reserve(n);
  if (cloud.size() >= n) {
    // Partial Fisher-Yates over an index vector: first n entries.
    std::vector<uint32_t> idx(cloud.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<uint32_t>(i);
    for (size_t i = 0; i < n; ++i) {
      const size_t j = i + static_cast<size_t>(rng.below(idx.size() - i));
      std::swap(idx[i], idx[j]);
      out.points.push_back(cloud.points[idx[i]]);
    }
  } else {
    for (size_t i = 0; i < n; ++i) {
      out.points.push_back(cloud.points[rng.below(cloud.size())]);
    }
  }
  return out;
}

void write_metric_csv(const std::filesystem::path& path,
                      std::span<const MetricReport> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "frame,cd,emd,trans_err,rot_err\n";
  char buf[256];
  for (const MetricReport& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", r.frame,
                  r.cd, r.emd, r.trans_err, r.rot_err);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MetricReport> read_metric_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "frame,cd,emd,trans_err,rot_err") {
    throw ParseError("metric csv: bad header in " + path.string());
  }
  std::vector<MetricReport> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricReport r;
    if (std::sscanf(line.c_str(), "%d,%lg,%lg,%lg,%lg", &r.frame, &r.cd, &r.emd,
                    &r.trans_err, &r.rot_err) != 5) {
      throw ParseError("metric csv: bad row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace seqfit
