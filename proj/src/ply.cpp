#include "seqfit/ply.hpp"

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <vector>

#include "seqfit/errors.hpp"

namespace seqfit {

namespace {

void put_f32le(std::string& buf, float v) {
  static_assert(sizeof(float) == 4);
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);  // little-endian host assumed (x86/arm)
}

float get_f32le(const char* p) {
  float v;
  std::memcpy(&v, p, 4);
  return v;
}

}  // namespace

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  validate_finite(cloud);
  std::string buf;
  buf.reserve(128 + cloud.size() * 12);
  buf += "ply\nformat binary_little_endian 1.0\nelement vertex " +
         std::to_string(cloud.size()) +
         "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (const Vec3& p : cloud.points) {
    put_f32le(buf, static_cast<float>(p.x));
    put_f32le(buf, static_cast<float>(p.y));
    put_f32le(buf, static_cast<float>(p.z));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) {
      throw ParseError("ply: truncated header in " + path.string());
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  if (next_line() != "ply") throw ParseError("ply: bad magic in " + path.string());
  if (next_line() != "format binary_little_endian 1.0") {
    throw ParseError("ply: unsupported format in " + path.string());
  }
  size_t count = 0;
  bool have_vertex = false;
  std::vector<std::string> props;
  for (;;) {
    const std::string l = next_line();
    if (l == "end_header") break;
    if (l.rfind("comment", 0) == 0) continue;
    std::istringstream ss(l);
    std::string tok;
    ss >> tok;
    if (tok == "element") {
      std::string name;
      ss >> name >> count;
      if (name != "vertex" || have_vertex) {
        throw ParseError("ply: only a single vertex element is supported: " +
                         path.string());
      }
      have_vertex = true;
    } else if (tok == "property") {
      std::string type, name;
      ss >> type >> name;
      if (type != "float") throw ParseError("ply: non-float property in " + path.string());
      props.push_back(name);
    } else {
      throw ParseError("ply: unexpected header line '" + l + "' in " + path.string());
    }
  }
  if (!have_vertex || props != std::vector<std::string>{"x", "y", "z"}) {
    throw ParseError("ply: expected vertex element with float x,y,z in " +
                     path.string());
  }
  std::string payload(count * 12, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<size_t>(in.gcount()) != payload.size()) {
    throw ParseError("ply: truncated payload in " + path.string());
  }
  PointCloud cloud;
  cloud.points.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    const char* p = payload.data() + i * 12;
    cloud.points.push_back({static_cast<double>(get_f32le(p)),
                            static_cast<double>(get_f32le(p + 4)),
                            static_cast<double>(get_f32le(p + 8))});
  }
  validate_finite(cloud, path.string().c_str());
  return cloud;
}

nlohmann::json pose_to_json(const PlanarPose& pose) {
  return nlohmann::json{
      {"theta", pose.theta}, {"t", {pose.tx, pose.ty}}, {"z", pose.z_offset}};
}

PlanarPose pose_from_json(const nlohmann::json& j) {
  try {
    PlanarPose p;
    p.theta = j.at("theta").get<double>();
    const auto& t = j.at("t");
    if (!t.is_array() || t.size() != 2) throw ParseError("pose: t must be [tx, ty]");
    p.tx = t[0].get<double>();
    p.ty = t[1].get<double>();
    p.z_offset = j.at("z").get<double>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("pose json: ") + e.what());
  }
}

}  // namespace seqfit
