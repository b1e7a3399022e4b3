#ifndef SEQFIT_AMODAL_HPP
#define SEQFIT_AMODAL_HPP

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqfit/dataset.hpp"
#include "seqfit/geometry.hpp"
#include "seqfit/mask_image.hpp"
#include "seqfit/model.hpp"

namespace seqfit {

// Pinhole camera. The extrinsic maps camera coordinates to world coordinates
// (row-major 4x4); the camera looks along its +z axis, +x right, +y down.
struct CameraModel {
  double fx = 500.0, fy = 500.0;
  double cx = 320.0, cy = 240.0;
  int w = 640, h = 480;
  std::array<double, 16> extrinsic = {1, 0, 0, 0,  //
                                      0, 1, 0, 0,  //
                                      0, 0, 1, 0,  //
                                      0, 0, 0, 1};
};

void validate_camera(const CameraModel& cam);
nlohmann::json camera_to_json(const CameraModel& cam);
CameraModel camera_from_json(const nlohmann::json& j);

struct ProjectedPoint {
  double u = 0.0, v = 0.0;
  double depth = 0.0;   // camera-frame z
  bool in_front = false;
  bool in_image = false;
};

// Projects every point; nothing is dropped, callers filter on the flags.
std::vector<ProjectedPoint> project(const PointCloud& cloud,
                                    const CameraModel& cam);

// Closed loop in pixel coordinates (implicitly closed, last connects to first).
struct Polygon {
  std::vector<std::array<double, 2>> pts;
};

// Alpha shape of a 2D point set: Delaunay triangles with circumradius <= alpha
// (alpha in pixels), returned as the boundary loops of their union. Holes come
// out as separate loops; rasterization applies the even-odd rule.
// Throws DegenerateInput for fewer than 3 distinct points or collinear input.
std::vector<Polygon> alpha_shape_2d(
    const std::vector<std::array<double, 2>>& points, double alpha);

// Even-odd scanline fill over the integer lattice; lattice points on a polygon
// edge count as covered (a 10x10 px square fills 11x11 = 121 pixels).
MaskImage rasterize(const std::vector<Polygon>& polygons, int w, int h);

// Flood-fills background from the image border; enclosed background becomes
// foreground.
void fill_mask_holes(MaskImage& mask);

struct OcclusionResult {
  std::vector<int> order;          // mask indices, nearest (smallest depth) first
  std::vector<int> winner;         // per-pixel nearest covering mask, -1 if none
  std::vector<MaskImage> inmodal;  // parallel to the input masks
};

// Depth-orders overlapping amodal masks and derives visible-region masks.
OcclusionResult occlusion_order(const std::vector<MaskImage>& amodal);

// Projects one world-frame instance cloud and builds its amodal mask; the
// mask's median_depth is the median camera-frame depth of the points in front
// of the camera. Throws DegenerateInput when too few usable points remain.
MaskImage make_amodal_mask(const PointCloud& world_cloud,
                           const CameraModel& cam, double alpha_px,
                           bool fill_holes, int instance_id);

enum class LabelMode {
  kGtAccumulation,             // accumulate + mirror scans with ground-truth poses
  kSequentialCompletionGt,     // run the model on the dataset's partial scans
  kSequentialCompletionExternal,  // run the model on externally supplied clouds
};

LabelMode label_mode_from_string(const std::string& s);
std::string label_mode_to_string(LabelMode mode);

struct LabelRequest {
  LabelMode mode = LabelMode::kGtAccumulation;
  double alpha_px = 15.0;
  bool fill_holes = false;
};

struct InstanceLabel {
  int instance = 0;
  MaskImage amodal;
  MaskImage inmodal;
};

struct FrameLabels {
  std::vector<InstanceLabel> instances;
};

// Labels every frame of a multi-instance scene; tracks act as instances and
// must agree on frame count. The sequential-completion modes need weights;
// the external mode needs per-track per-frame replacement clouds.
// Instances whose frame yields no usable mask get an empty mask, not an error.
std::vector<FrameLabels> label_tracks(
    const std::vector<Track>& tracks, const CameraModel& cam,
    const LabelRequest& req, const ModelWeights* weights = nullptr,
    const std::vector<std::vector<PointCloud>>* external_clouds = nullptr);

// Writes {frame:06}_{instance:03}_{amodal|inmodal}.pgm files plus labels.json
// describing frames, instances, file names, and median depths.
void write_labels(const std::filesystem::path& dir,
                  const std::vector<FrameLabels>& frames,
                  const CameraModel& cam, LabelMode mode);

std::vector<FrameLabels> read_labels(const std::filesystem::path& dir);

struct LabelScore {
  double mean_iou = 0.0;      // over greedily matched instance pairs
  double percent_miss = 0.0;  // reference instances without an IoU >= 0.5 match
};

// Frame counts must agree (ShapeMismatch otherwise); matching runs per frame
// on the amodal masks.
LabelScore score_labels(const std::vector<FrameLabels>& pred,
                        const std::vector<FrameLabels>& ref);

}  // namespace seqfit

#endif
