#ifndef SEQFIT_PLY_HPP
#define SEQFIT_PLY_HPP

#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <string>

#include "seqfit/geometry.hpp"

namespace seqfit {

// Binary little-endian PLY, a single `vertex` element with float x, y, z.
// The on-disk precision is f32; coordinates are converted on read/write.
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);

// {"theta": f64, "t": [f64, f64], "z": f64}
nlohmann::json pose_to_json(const PlanarPose& pose);
PlanarPose pose_from_json(const nlohmann::json& j);

}  // namespace seqfit

#endif
