#include "seqfit/dataset.hpp"

#include <fstream>

#include "seqfit/errors.hpp"
#include "seqfit/ply.hpp"

namespace seqfit {

namespace {

// A dataset may be addressed by its directory or by the manifest file itself.
std::filesystem::path manifest_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (std::filesystem::is_directory(path, ec)) return path / "manifest.json";
  return path;
}

}  // namespace

void save_manifest(const std::filesystem::path& path,
                   const DatasetManifest& m) {
  nlohmann::json tracks = nlohmann::json::array();
  for (const TrackRecord& track : m.tracks) {
    nlohmann::json frames = nlohmann::json::array();
    for (const FrameRecord& f : track.frames) {
      frames.push_back({{"t", f.t},
                        {"partial_ply", f.partial_ply},
                        {"pose", pose_to_json(f.pose)}});
    }
    tracks.push_back({{"id", track.id},
                      {"mesh", track.mesh},
                      {"complete_ply", track.complete_ply},
                      {"frames", std::move(frames)}});
  }
  const nlohmann::json j = {
      {"tracks", std::move(tracks)}, {"lidar", m.lidar}, {"seed", m.seed}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  const std::filesystem::path file = manifest_file(path);
  std::ifstream in(file);
  if (!in) throw IoError("cannot open: " + file.string());
  DatasetManifest m;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    m.lidar = j.at("lidar");
    m.seed = j.at("seed").get<uint64_t>();
    for (const nlohmann::json& tj : j.at("tracks")) {
      TrackRecord track;
      track.id = tj.at("id").get<std::string>();
      track.mesh = tj.at("mesh").get<std::string>();
      track.complete_ply = tj.at("complete_ply").get<std::string>();
      for (const nlohmann::json& fj : tj.at("frames")) {
        FrameRecord f;
        f.t = fj.at("t").get<double>();
        f.partial_ply = fj.at("partial_ply").get<std::string>();
        f.pose = pose_from_json(fj.at("pose"));
        track.frames.push_back(std::move(f));
      }
      m.tracks.push_back(std::move(track));
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError("bad manifest " + file.string() + ": " + e.what());
  }
  return m;
}

std::vector<Track> load_tracks(const std::filesystem::path& manifest_path) {
  const std::filesystem::path file = manifest_file(manifest_path);
  const DatasetManifest m = load_manifest(file);
  const std::filesystem::path root = file.parent_path();
  std::vector<Track> tracks;
  tracks.reserve(m.tracks.size());
  for (const TrackRecord& rec : m.tracks) {
    Track track;
    track.id = rec.id;
    track.mesh = rec.mesh;
    track.complete = read_ply(root / rec.complete_ply);
    track.times.reserve(rec.frames.size());
    track.frames.reserve(rec.frames.size());
    track.poses.reserve(rec.frames.size());
    for (const FrameRecord& f : rec.frames) {
      track.times.push_back(f.t);
      track.frames.push_back(read_ply(root / f.partial_ply));
      track.poses.push_back(f.pose);
    }
    tracks.push_back(std::move(track));
  }
  return tracks;
}

}  // namespace seqfit
