#ifndef SEQFIT_DATASET_HPP
#define SEQFIT_DATASET_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqfit/geometry.hpp"

namespace seqfit {

// On-disk dataset layout: a manifest.json next to per-track PLY/JSON files.
// All paths inside the manifest are relative to the manifest's directory.

struct FrameRecord {
  double t = 0.0;  // seconds
  std::string partial_ply;
  PlanarPose pose;  // canonical mesh frame -> sensed placement
};

struct TrackRecord {
  std::string id;
  std::string mesh;
  std::string complete_ply;
  std::vector<FrameRecord> frames;
};

struct DatasetManifest {
  std::vector<TrackRecord> tracks;
  nlohmann::json lidar;  // sensor description, owned by the simulator
  uint64_t seed = 0;
};

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
// Accepts either the manifest file or the dataset directory containing
// manifest.json; load_tracks resolves frame files relative to the manifest.
DatasetManifest load_manifest(const std::filesystem::path& path);

// A track with every referenced cloud loaded into memory.
struct Track {
  std::string id;
  std::string mesh;
  PointCloud complete;  // ground-truth shape in the canonical mesh frame
  std::vector<double> times;
  std::vector<PointCloud> frames;  // world-frame partial scans
  std::vector<PlanarPose> poses;   // world-frame ground-truth poses
};

std::vector<Track> load_tracks(const std::filesystem::path& manifest_path);

}  // namespace seqfit

#endif
