#ifndef SEQFIT_METRICS_HPP
#define SEQFIT_METRICS_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "seqfit/geometry.hpp"
#include "seqfit/mask_image.hpp"

namespace seqfit {

struct MetricReport {
  int frame = 1;  // detection count, 1-based
  double cd = 0.0;
  double emd = 0.0;
  double trans_err = 0.0;
  double rot_err = 0.0;  // degrees, [0, 180]
};

// Symmetric Chamfer distance: mean nearest-neighbor distance from x to x_gt
// plus the mean from x_gt to x (unsquared Euclidean norms).
// Brute force up to 4096 points per side, grid-hash accelerated above.
double chamfer(const PointCloud& x, const PointCloud& x_gt);

// Mean distance under the optimal one-to-one matching of two equal-size
// clouds. Exact (Hungarian) for n <= 512; epsilon-scaling auction above,
// total-cost duality gap <= 1e-3 * n (mean error <= 1e-3 m).
double emd(const PointCloud& x, const PointCloud& y);

// (1/|x_gt|) sum ||T^-1 p - T_gt^-1 p||^2 over p in x_gt.
double pose_loss(const PlanarPose& t, const PlanarPose& t_gt,
                 const PointCloud& x_gt);

double translation_error(const PlanarPose& t, const PlanarPose& t_gt);
// |wrap(theta - theta_gt)| in degrees, in [0, 180].
double rotation_error_deg(const PlanarPose& t, const PlanarPose& t_gt);
// min(err, 180 - err): heading-symmetry-folded variant, reported alongside.
double folded_rotation_error_deg(const PlanarPose& t, const PlanarPose& t_gt);

double mask_iou(const MaskImage& a, const MaskImage& b);

struct MaskMatch {
  int pred = -1, ref = -1;
  double iou = 0.0;
};

// Greedy one-to-one matching by descending IoU; pairs with zero IoU are not
// matched.
std::vector<MaskMatch> greedy_match(std::span<const MaskImage> pred,
                                    std::span<const MaskImage> ref);

// Percentage of reference instances with no matched prediction of IoU >= 0.5.
double percent_miss(std::span<const MaskImage> pred,
                    std::span<const MaskImage> ref);

// Uniform resampling to exactly n points (without replacement when the cloud
// is larger, with replacement when smaller). Used to satisfy emd's equal-size
// precondition.
PointCloud resample(const PointCloud& cloud, size_t n, uint64_t seed);

// CSV with header `frame,cd,emd,trans_err,rot_err`.
void write_metric_csv(const std::filesystem::path& path,
                      std::span<const MetricReport> rows);
std::vector<MetricReport> read_metric_csv(const std::filesystem::path& path);

namespace detail {
// Exact linear assignment (Jonker-Volgenant style shortest augmenting path).
// cost is n*n row-major; returns column assigned to each row.
std::vector<int> assign_exact(const std::vector<double>& cost, int n);
// Forward auction with epsilon scaling; total cost within n*eps_final of
// optimal.
std::vector<int> assign_auction(const std::vector<double>& cost, int n,
                                double eps_final);
}  // namespace detail

}  // namespace seqfit

#endif
