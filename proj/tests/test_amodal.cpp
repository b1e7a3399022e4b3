#include "doctest.h"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqfit/amodal.hpp"
#include "seqfit/errors.hpp"
#include "seqfit/rng.hpp"
#include "test_util.hpp"

using namespace seqfit;
namespace fs = std::filesystem;

namespace {

// Camera at (0, 0, 1.5) looking along world +x; +x_cam = -y_world,
// +y_cam = -z_world (image y grows downward).
CameraModel side_camera() {
  CameraModel cam;
  cam.extrinsic = {0, 0, 1, 0,  //
                   -1, 0, 0, 0,  //
                   0, -1, 0, 1.5,  //
                   0, 0, 0, 1};
  return cam;
}

// Row-major camera-to-world extrinsic from Rz(a) * Rx(b) and a translation.
std::array<double, 16> rigid_extrinsic(double a, double b, Vec3 t) {
  const double ca = std::cos(a), sa = std::sin(a);
  const double cb = std::cos(b), sb = std::sin(b);
  // Rz(a) * Rx(b), rows.
  return {ca, -sa * cb, sa * sb, t.x,  //
          sa, ca * cb, -ca * sb, t.y,  //
          0.0, sb, cb, t.z,            //
          0.0, 0.0, 0.0, 1.0};
}

Vec3 apply_extrinsic(const std::array<double, 16>& e, const Vec3& q) {
  return {e[0] * q.x + e[1] * q.y + e[2] * q.z + e[3],
          e[4] * q.x + e[5] * q.y + e[6] * q.z + e[7],
          e[8] * q.x + e[9] * q.y + e[10] * q.z + e[11]};
}

std::vector<std::array<double, 2>> square10() {
  return {{5, 5}, {15, 5}, {15, 15}, {5, 15}};
}

Track toy_instance(const std::string& id, uint64_t seed, size_t n_frames,
                   double y_offset) {
  Rng rng(seed);
  Track tr;
  tr.id = id;
  tr.mesh = "toy";
  for (int i = 0; i < 60; ++i) {
    tr.complete.points.push_back(
        {rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(0, 1)});
  }
  for (size_t t = 0; t < n_frames; ++t) {
    PlanarPose pose;
    pose.tx = 8.0 + 0.3 * static_cast<double>(t);
    pose.ty = y_offset;
    pose.theta = 0.1 * static_cast<double>(t);
    tr.times.push_back(0.1 * static_cast<double>(t));
    tr.poses.push_back(pose);
    tr.frames.push_back(apply_pose(pose, tr.complete));
  }
  return tr;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_in = 12;
  cfg.n_out = 16;
  cfg.enc1_hidden = 8;
  cfg.enc1_out = 10;
  cfg.enc2_hidden = 12;
  cfg.feat_dim = 16;
  cfg.hidden_dim = 14;
  cfg.shape_hidden1 = 16;
  cfg.shape_hidden2 = 20;
  cfg.pose_hidden1 = 12;
  cfg.pose_hidden2 = 8;
  return cfg;
}

}  // namespace

TEST_CASE("validate_camera accepts the default and rejects broken intrinsics") {
  CHECK_NOTHROW(validate_camera(CameraModel{}));
  CHECK_NOTHROW(validate_camera(side_camera()));

  CameraModel cam;
  cam.fx = 0.0;
  CHECK_THROWS_AS(validate_camera(cam), ConfigError);
  cam = CameraModel{};
  cam.cx = 700.0;  // outside the image
  CHECK_THROWS_AS(validate_camera(cam), ConfigError);
  cam = CameraModel{};
  cam.w = 0;
  CHECK_THROWS_AS(validate_camera(cam), ConfigError);

  // Scaled rotation block.
  cam = CameraModel{};
  cam.extrinsic = {2, 0, 0, 0, 0, 2, 0, 0, 0, 0, 2, 0, 0, 0, 0, 1};
  CHECK_THROWS_AS(validate_camera(cam), ConfigError);
  // Reflection (determinant -1).
  cam.extrinsic = {-1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  CHECK_THROWS_AS(validate_camera(cam), ConfigError);
  // Last row must stay (0 0 0 1).
  cam.extrinsic = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0.5, 1};
  CHECK_THROWS_AS(validate_camera(cam), ConfigError);
}

TEST_CASE("camera json round-trips and rejects unknown keys") {
  CameraModel cam = side_camera();
  cam.fx = 420.0;
  cam.w = 800;
  cam.cx = 400.0;
  const CameraModel rt = camera_from_json(camera_to_json(cam));
  CHECK(rt.fx == cam.fx);
  CHECK(rt.fy == cam.fy);
  CHECK(rt.cx == cam.cx);
  CHECK(rt.w == cam.w);
  CHECK(rt.extrinsic == cam.extrinsic);

  const CameraModel defaults = camera_from_json(nlohmann::json::object());
  CHECK(defaults.fx == 500.0);
  CHECK(defaults.w == 640);

  CHECK_THROWS_WITH_AS(camera_from_json({{"focal", 500.0}}),
                       doctest::Contains("focal"), ConfigError);
  CHECK_THROWS_AS(camera_from_json({{"fx", "fast"}}), ConfigError);
  CHECK_THROWS_AS(camera_from_json({{"extrinsic", {1.0, 0.0}}}), ConfigError);
}

TEST_CASE("project follows the pinhole equations under the identity extrinsic") {
  const CameraModel cam;  // identity pose, looks along +z
  PointCloud cloud;
  cloud.points = {{0, 0, 5}, {1, 2, 4}, {0, 0, -3}, {50, 0, 2}};
  const auto pix = project(cloud, cam);
  REQUIRE(pix.size() == 4);

  CHECK(pix[0].u == doctest::Approx(320.0).epsilon(1e-14));
  CHECK(pix[0].v == doctest::Approx(240.0).epsilon(1e-14));
  CHECK(pix[0].depth == 5.0);
  CHECK(pix[0].in_front);
  CHECK(pix[0].in_image);

  CHECK(pix[1].u == doctest::Approx(320.0 + 500.0 * 1.0 / 4.0).epsilon(1e-14));
  CHECK(pix[1].v == doctest::Approx(240.0 + 500.0 * 2.0 / 4.0).epsilon(1e-14));

  CHECK_FALSE(pix[2].in_front);
  CHECK(pix[3].in_front);
  CHECK_FALSE(pix[3].in_image);  // u = 320 + 500*25, far off screen
}

TEST_CASE("projection is invariant under a rigid camera relocation") {
  Rng rng(61);
  for (int it = 0; it < 40; ++it) {
    const double a = rng.uniform(-3, 3), b = rng.uniform(-1.5, 1.5);
    const Vec3 t{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    CameraModel moved;
    moved.extrinsic = rigid_extrinsic(a, b, t);
    validate_camera(moved);

    const Vec3 q{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(1, 10)};
    PointCloud world, local;
    world.points = {apply_extrinsic(moved.extrinsic, q)};
    local.points = {q};

    const auto via_world = project(world, moved)[0];
    const auto via_local = project(local, CameraModel{})[0];
    CHECK(std::abs(via_world.u - via_local.u) <= 1e-9);
    CHECK(std::abs(via_world.v - via_local.v) <= 1e-9);
    CHECK(std::abs(via_world.depth - via_local.depth) <= 1e-9);
    CHECK(via_world.in_front == via_local.in_front);
  }
}

TEST_CASE("alpha shape of square corners is the square") {
  const auto polys = alpha_shape_2d(square10(), 100.0);
  REQUIRE(polys.size() == 1);
  CHECK(polys[0].pts.size() == 4);
  const MaskImage mask = rasterize(polys, 25, 25);
  CHECK(mask.count() == 121);  // inclusive 10x10 square
}

TEST_CASE("alpha below the circumradius erases all triangles") {
  const auto polys = alpha_shape_2d(square10(), 3.0);
  CHECK(polys.empty());
  const MaskImage mask = rasterize(polys, 25, 25);
  CHECK(mask.count() == 0);
}

TEST_CASE("alpha shape separates distant clusters into distinct loops") {
  std::vector<std::array<double, 2>> pts;
  for (int i = 0; i < 8; ++i) {
    const double ang = 2.0 * M_PI * i / 8.0;
    const double r = 5.0 + 0.05 * (i % 3);  // break exact cocircularity
    pts.push_back({20 + r * std::cos(ang), 20 + r * std::sin(ang)});
    pts.push_back({120 + r * std::cos(ang), 20 + r * std::sin(ang)});
  }
  const auto polys = alpha_shape_2d(pts, 20.0);
  CHECK(polys.size() == 2);
}

TEST_CASE("alpha shape keeps the hole of an annulus") {
  std::vector<std::array<double, 2>> pts;
  for (int i = 0; i < 24; ++i) {
    const double ang = 2.0 * M_PI * i / 24.0;
    const double ro = 30.0 + 0.05 * (i % 3);
    const double ri = 15.0 + 0.05 * ((i + 1) % 3);
    pts.push_back({60 + ro * std::cos(ang), 60 + ro * std::sin(ang)});
    pts.push_back({60 + ri * std::cos(ang), 60 + ri * std::sin(ang)});
  }
  const auto polys = alpha_shape_2d(pts, 10.0);
  CHECK(polys.size() == 2);  // outer boundary plus hole loop

  MaskImage mask = rasterize(polys, 120, 120);
  CHECK_FALSE(mask.at(60, 60));  // center stays open
  CHECK(mask.at(60 + 22, 60));   // ring body is filled
  CHECK_FALSE(mask.at(60 + 50, 60));

  // Hole filling closes it.
  fill_mask_holes(mask);
  CHECK(mask.at(60, 60));
  CHECK_FALSE(mask.at(60 + 50, 60));  // outside stays background
}

TEST_CASE("alpha shape rejects degenerate point sets") {
  CHECK_THROWS_AS(alpha_shape_2d({{0, 0}, {1, 1}}, 10.0), DegenerateInput);
  CHECK_THROWS_AS(alpha_shape_2d({{0, 0}, {5, 5}, {9, 9}, {2, 2}}, 10.0),
                  DegenerateInput);
  // Duplicates collapse below three distinct points.
  CHECK_THROWS_AS(alpha_shape_2d({{1, 1}, {1, 1}, {1, 1}, {4, 4}}, 10.0),
                  DegenerateInput);
}

TEST_CASE("rasterize honors fractional offsets and clips to the image") {
  std::vector<Polygon> polys(1);
  polys[0].pts = {{5.5, 5.5}, {15.5, 5.5}, {15.5, 15.5}, {5.5, 15.5}};
  const MaskImage half = rasterize(polys, 25, 25);
  // No lattice point lies on a half-integer edge: strict interior only.
  CHECK(half.count() == 100);

  polys[0].pts = {{-10, -10}, {12, -10}, {12, 12}, {-10, 12}};
  const MaskImage clipped = rasterize(polys, 8, 8);
  CHECK(clipped.count() == 64);  // whole image covered, nothing out of range

  const MaskImage empty = rasterize({}, 8, 8);
  CHECK(empty.w == 8);
  CHECK(empty.count() == 0);
}

TEST_CASE("fill_mask_holes fills enclosed background only") {
  MaskImage m = MaskImage::zeros(12, 12);
  for (int i = 2; i <= 8; ++i) {
    m.set(i, 2);
    m.set(i, 8);
    m.set(2, i);
    m.set(8, i);
  }
  const size_t ring = m.count();
  fill_mask_holes(m);
  CHECK(m.count() == ring + 5 * 5);  // interior 3..7 squared
  CHECK(m.at(5, 5));
  CHECK_FALSE(m.at(10, 10));
}

TEST_CASE("occlusion_order ranks by median depth and carves inmodal masks") {
  MaskImage near = MaskImage::zeros(10, 10);
  MaskImage far = MaskImage::zeros(10, 10);
  for (int v = 0; v < 6; ++v)
    for (int u = 0; u < 6; ++u) near.set(u, v);
  for (int v = 3; v < 9; ++v)
    for (int u = 3; u < 9; ++u) far.set(u, v);
  near.median_depth = 2.0;
  far.median_depth = 5.0;
  near.instance_id = 7;
  far.instance_id = 8;

  const OcclusionResult res = occlusion_order({far, near});  // given far-first
  REQUIRE(res.order.size() == 2);
  CHECK(res.order[0] == 1);  // the near mask wins the depth sort
  CHECK(res.order[1] == 0);

  // Overlap pixels belong to the near instance.
  CHECK(res.winner[4 * 10 + 4] == 1);
  CHECK(res.winner[8 * 10 + 8] == 0);
  CHECK(res.winner[9 * 10 + 9] == -1);

  REQUIRE(res.inmodal.size() == 2);
  // Near mask is fully visible; far mask loses the 3x3 overlap corner.
  CHECK(res.inmodal[1].count() == near.count());
  CHECK(res.inmodal[0].count() == far.count() - 9);
  // Inmodal is always contained in amodal.
  for (size_t i = 0; i < res.inmodal[0].data.size(); ++i) {
    if (res.inmodal[0].data[i]) CHECK(far.data[i]);
  }

  MaskImage wrong = MaskImage::zeros(5, 5);
  CHECK_THROWS_AS(occlusion_order({near, wrong}), ShapeMismatch);
}

TEST_CASE("make_amodal_mask projects a patch and records its median depth") {
  const CameraModel cam;
  PointCloud patch;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      patch.points.push_back({0.5 * i, 0.5 * j, 5.0});
  const MaskImage mask = make_amodal_mask(patch, cam, 60.0, false, 3);
  CHECK(mask.w == cam.w);
  CHECK(mask.h == cam.h);
  CHECK(mask.count() > 1000);  // 100x100 px footprint
  CHECK(mask.median_depth == 5.0);
  CHECK(mask.instance_id == 3);
  CHECK(mask.at(320, 240));

  PointCloud behind;
  behind.points = {{0, 0, -5}, {1, 0, -5}, {0, 1, -5}, {1, 1, -5}};
  CHECK_THROWS_AS(make_amodal_mask(behind, cam, 60.0, false, 0),
                  DegenerateInput);
}

TEST_CASE("label_tracks in ground-truth mode produces consistent instance masks") {
  const std::vector<Track> tracks = {toy_instance("a", 71, 4, 0.0),
                                     toy_instance("b", 72, 4, 2.5)};
  const CameraModel cam = side_camera();
  LabelRequest req;
  req.mode = LabelMode::kGtAccumulation;

  const auto frames = label_tracks(tracks, cam, req);
  REQUIRE(frames.size() == 4);
  for (const FrameLabels& fl : frames) {
    REQUIRE(fl.instances.size() == 2);
    for (const InstanceLabel& inst : fl.instances) {
      CHECK(inst.amodal.count() > 50);
      CHECK(inst.inmodal.count() > 0);
      // Visible region never exceeds the full silhouette.
      for (size_t i = 0; i < inst.amodal.data.size(); ++i) {
        if (inst.inmodal.data[i]) CHECK(inst.amodal.data[i]);
      }
    }
    CHECK(fl.instances[0].instance != fl.instances[1].instance);
  }
}

TEST_CASE("label_tracks validates mode prerequisites") {
  const std::vector<Track> tracks = {toy_instance("a", 73, 3, 0.0)};
  const CameraModel cam = side_camera();

  LabelRequest req;
  req.mode = LabelMode::kSequentialCompletionGt;
  CHECK_THROWS_AS(label_tracks(tracks, cam, req), ConfigError);  // no weights

  req.mode = LabelMode::kSequentialCompletionExternal;
  const ModelWeights w = ModelWeights::init(tiny_config(), 2);
  CHECK_THROWS_AS(label_tracks(tracks, cam, req, &w), ConfigError);  // no clouds

  std::vector<std::vector<PointCloud>> wrong_shape(1);
  wrong_shape[0] = {tracks[0].frames[0]};  // 1 frame instead of 3
  CHECK_THROWS_AS(label_tracks(tracks, cam, req, &w, &wrong_shape),
                  ShapeMismatch);

  req.mode = LabelMode::kGtAccumulation;
  std::vector<std::vector<PointCloud>> spurious(1);
  spurious[0] = tracks[0].frames;
  CHECK_THROWS_AS(label_tracks(tracks, cam, req, nullptr, &spurious),
                  ConfigError);

  std::vector<Track> no_poses = tracks;
  no_poses[0].poses.clear();
  CHECK_THROWS_AS(label_tracks(no_poses, cam, req), MissingGroundTruth);

  std::vector<Track> uneven = {toy_instance("a", 74, 3, 0.0),
                               toy_instance("b", 75, 4, 2.0)};
  CHECK_THROWS_AS(label_tracks(uneven, cam, req), ShapeMismatch);
}

TEST_CASE("label_tracks runs the completion model when given weights") {
  const std::vector<Track> tracks = {toy_instance("a", 76, 3, 0.0)};
  const CameraModel cam = side_camera();
  const ModelWeights w = ModelWeights::init(tiny_config(), 5);

  LabelRequest req;
  req.mode = LabelMode::kSequentialCompletionGt;
  const auto gt_frames = label_tracks(tracks, cam, req, &w);
  REQUIRE(gt_frames.size() == 3);
  REQUIRE(gt_frames[0].instances.size() == 1);

  // External clouds replacing the dataset scans feed the same pipeline.
  req.mode = LabelMode::kSequentialCompletionExternal;
  std::vector<std::vector<PointCloud>> clouds = {tracks[0].frames};
  const auto ext_frames = label_tracks(tracks, cam, req, &w, &clouds);
  REQUIRE(ext_frames.size() == 3);
  // Identical inputs give identical masks.
  for (size_t t = 0; t < 3; ++t) {
    CHECK(ext_frames[t].instances[0].amodal.data ==
          gt_frames[t].instances[0].amodal.data);
  }
}

TEST_CASE("instances that cannot be labeled get empty masks, not errors") {
  Track behind = toy_instance("a", 77, 3, 0.0);
  for (auto& frame : behind.frames)
    for (Vec3& p : frame.points) p.x = -p.x - 20.0;  // far behind the camera
  for (auto& pose : behind.poses) pose.tx = -pose.tx - 20.0;

  const auto frames = label_tracks({behind}, side_camera(), LabelRequest{});
  REQUIRE(frames.size() == 3);
  for (const FrameLabels& fl : frames) {
    REQUIRE(fl.instances.size() == 1);
    CHECK(fl.instances[0].amodal.count() == 0);
    CHECK(fl.instances[0].inmodal.count() == 0);
  }
}

TEST_CASE("pgm masks round-trip") {
  const fs::path dir = test::temp_dir("pgm");
  MaskImage m = MaskImage::zeros(17, 9);
  Rng rng(81);
  for (int v = 0; v < 9; ++v)
    for (int u = 0; u < 17; ++u)
      if (rng.uniform() < 0.4) m.set(u, v);
  write_pgm(dir / "m.pgm", m);
  const MaskImage rt = read_pgm(dir / "m.pgm");
  CHECK(rt.w == 17);
  CHECK(rt.h == 9);
  CHECK(rt.data == m.data);
  CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("write_labels and read_labels round-trip the full label set") {
  const std::vector<Track> tracks = {toy_instance("a", 78, 2, 0.0),
                                     toy_instance("b", 79, 2, 2.5)};
  const CameraModel cam = side_camera();
  const auto frames = label_tracks(tracks, cam, LabelRequest{});

  const fs::path dir = test::temp_dir("labels");
  write_labels(dir, frames, cam, LabelMode::kGtAccumulation);
  CHECK(fs::exists(dir / "labels.json"));
  CHECK(fs::exists(dir / "000000_000_amodal.pgm"));
  CHECK(fs::exists(dir / "000000_000_inmodal.pgm"));
  CHECK(fs::exists(dir / "000001_001_amodal.pgm"));

  std::ifstream in(dir / "labels.json");
  const nlohmann::json j = nlohmann::json::parse(in);
  CHECK(j.at("mode").get<std::string>() == "gt_accumulation");
  CHECK(j.at("frames").size() == 2);

  const auto rt = read_labels(dir);
  REQUIRE(rt.size() == frames.size());
  for (size_t t = 0; t < rt.size(); ++t) {
    REQUIRE(rt[t].instances.size() == frames[t].instances.size());
    for (size_t i = 0; i < rt[t].instances.size(); ++i) {
      CHECK(rt[t].instances[i].amodal.data == frames[t].instances[i].amodal.data);
      CHECK(rt[t].instances[i].inmodal.data ==
            frames[t].instances[i].inmodal.data);
      CHECK(rt[t].instances[i].instance == frames[t].instances[i].instance);
    }
  }
  CHECK_THROWS_AS(read_labels(test::temp_dir("labels_empty")), IoError);
  fs::remove_all(dir);
}

TEST_CASE("score_labels measures overlap quality and misses") {
  auto rect_mask = [](int u0, int u1) {
    MaskImage m = MaskImage::zeros(30, 20);
    for (int v = 0; v < 10; ++v)
      for (int u = u0; u < u1; ++u) m.set(u, v);
    return m;
  };
  FrameLabels ref_frame;
  ref_frame.instances.push_back({0, rect_mask(0, 10), rect_mask(0, 10)});
  ref_frame.instances.push_back({1, rect_mask(15, 25), rect_mask(15, 25)});

  SUBCASE("identical labels score perfectly") {
    const LabelScore s = score_labels({ref_frame}, {ref_frame});
    CHECK(s.mean_iou == doctest::Approx(1.0));
    CHECK(s.percent_miss == 0.0);
  }
  SUBCASE("one exact and one weak match") {
    FrameLabels pred;
    pred.instances.push_back({0, rect_mask(0, 10), rect_mask(0, 10)});
    // Shifted by 5 of 10 columns: IoU = 5/15.
    pred.instances.push_back({1, rect_mask(20, 30), rect_mask(20, 30)});
    const LabelScore s = score_labels({pred}, {ref_frame});
    CHECK(s.mean_iou == doctest::Approx((1.0 + 5.0 / 15.0) / 2.0).epsilon(1e-12));
    CHECK(s.percent_miss == doctest::Approx(50.0));
  }
  SUBCASE("empty predictions miss everything") {
    FrameLabels pred;
    const LabelScore s = score_labels({pred}, {ref_frame});
    CHECK(s.percent_miss == doctest::Approx(100.0));
  }
  SUBCASE("frame count mismatch is an error") {
    CHECK_THROWS_AS(score_labels({ref_frame, ref_frame}, {ref_frame}),
                    ShapeMismatch);
  }
}

TEST_CASE("label mode strings round-trip") {
  for (const char* name :
       {"gt_accumulation", "sequential_completion_gt",
        "sequential_completion_external"}) {
    CHECK(label_mode_to_string(label_mode_from_string(name)) == name);
  }
  CHECK_THROWS_AS(label_mode_from_string("manual"), ConfigError);
}
