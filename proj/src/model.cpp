#include "seqfit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "seqfit/errors.hpp"
#include "seqfit/metrics.hpp"
#include "seqfit/rng.hpp"

namespace seqfit {

namespace {

const std::array<const char*, kNumParams> kParamNames = {
    "enc1_w1",  "enc1_b1",  "enc1_w2",  "enc1_b2",  "enc2_w1",  "enc2_b1",
    "enc2_w2",  "enc2_b2",  "gru_wz",   "gru_uz",   "gru_bz",   "gru_wr",
    "gru_ur",   "gru_br",   "gru_wn",   "gru_un",   "gru_bn",   "shape_w1",
    "shape_b1", "shape_w2", "shape_b2", "shape_w3", "shape_b3", "pose_w1",
    "pose_b1",  "pose_w2",  "pose_b2",  "pose_w3",  "pose_b3",  "s_cd",
    "s_p"};

std::pair<int, int> param_shape(const ModelConfig& c, int idx) {
  switch (idx) {
    case 0: return {3, c.enc1_hidden};
    case 1: return {1, c.enc1_hidden};
    case 2: return {c.enc1_hidden, c.enc1_out};
    case 3: return {1, c.enc1_out};
    case 4: return {2 * c.enc1_out, c.enc2_hidden};
    case 5: return {1, c.enc2_hidden};
    case 6: return {c.enc2_hidden, c.feat_dim};
    case 7: return {1, c.feat_dim};
    case 8: return {c.feat_dim, c.hidden_dim};
    case 9: return {c.hidden_dim, c.hidden_dim};
    case 10: return {1, c.hidden_dim};
    case 11: return {c.feat_dim, c.hidden_dim};
    case 12: return {c.hidden_dim, c.hidden_dim};
    case 13: return {1, c.hidden_dim};
    case 14: return {c.feat_dim, c.hidden_dim};
    case 15: return {c.hidden_dim, c.hidden_dim};
    case 16: return {1, c.hidden_dim};
    case 17: return {c.hidden_dim, c.shape_hidden1};
    case 18: return {1, c.shape_hidden1};
    case 19: return {c.shape_hidden1, c.shape_hidden2};
    case 20: return {1, c.shape_hidden2};
    case 21: return {c.shape_hidden2, 3 * c.n_out};
    case 22: return {1, 3 * c.n_out};
    case 23: return {c.hidden_dim, c.pose_hidden1};
    case 24: return {1, c.pose_hidden1};
    case 25: return {c.pose_hidden1, c.pose_hidden2};
    case 26: return {1, c.pose_hidden2};
    case 27: return {c.pose_hidden2, 4};
    case 28: return {1, 4};
    case 29: return {1, 1};
    case 30: return {1, 1};
    default: throw InternalError("param_shape: bad index");
  }
}

bool is_weight_matrix(std::string_view name) {
  return name.find("_w") != std::string_view::npos ||
         name.find("_u") != std::string_view::npos;
}

}  // namespace

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig cfg;
  const std::array<std::pair<const char*, int*>, 11> fields = {{
      {"n_in", &cfg.n_in},
      {"n_out", &cfg.n_out},
      {"enc1_hidden", &cfg.enc1_hidden},
      {"enc1_out", &cfg.enc1_out},
      {"enc2_hidden", &cfg.enc2_hidden},
      {"feat_dim", &cfg.feat_dim},
      {"hidden_dim", &cfg.hidden_dim},
      {"shape_hidden1", &cfg.shape_hidden1},
      {"shape_hidden2", &cfg.shape_hidden2},
      {"pose_hidden1", &cfg.pose_hidden1},
      {"pose_hidden2", &cfg.pose_hidden2},
  }};
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const auto& [name, dst] : fields) {
      if (key == name) {
        if (!value.is_number_integer()) {
          throw ConfigError("model config key '" + key + "' must be an integer");
        }
        *dst = value.get<int>();
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown key '" + key + "' in model config");
  }
  for (const auto& [name, dst] : fields) {
    if (*dst <= 0) {
      throw ConfigError(std::string("model config key '") + name +
                        "' must be positive");
    }
  }
  return cfg;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"n_in", cfg.n_in},
                        {"n_out", cfg.n_out},
                        {"enc1_hidden", cfg.enc1_hidden},
                        {"enc1_out", cfg.enc1_out},
                        {"enc2_hidden", cfg.enc2_hidden},
                        {"feat_dim", cfg.feat_dim},
                        {"hidden_dim", cfg.hidden_dim},
                        {"shape_hidden1", cfg.shape_hidden1},
                        {"shape_hidden2", cfg.shape_hidden2},
                        {"pose_hidden1", cfg.pose_hidden1},
                        {"pose_hidden2", cfg.pose_hidden2}};
}

const std::array<const char*, kNumParams>& ModelWeights::names() {
  return kParamNames;
}

int ModelWeights::index_of(std::string_view name) {
  for (int i = 0; i < kNumParams; ++i) {
    if (name == kParamNames[static_cast<size_t>(i)]) return i;
  }
  throw InternalError("unknown parameter name '" + std::string(name) + "'");
}

ModelWeights ModelWeights::init(const ModelConfig& cfg, uint64_t seed) {
  ModelWeights w;
  w.cfg = cfg;
  w.params.reserve(kNumParams);
  Rng rng(seed);
  for (int i = 0; i < kNumParams; ++i) {
    const auto [rows, cols] = param_shape(cfg, i);
    ad::Tensor t(rows, cols);
    if (is_weight_matrix(kParamNames[static_cast<size_t>(i)])) {
      const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
      for (double& x : t.v) x = rng.uniform(-a, a);
    }
    w.params.push_back(std::move(t));
  }
  return w;
}

const ad::Tensor& ModelWeights::at(std::string_view name) const {
  return params[static_cast<size_t>(index_of(name))];
}

ad::Tensor& ModelWeights::at(std::string_view name) {
  return params[static_cast<size_t>(index_of(name))];
}

size_t ModelWeights::total_scalars() const {
  size_t n = 0;
  for (const ad::Tensor& t : params) n += t.size();
  return n;
}

GraphWeights weights_on_tape(ad::Tape& tape, const ModelWeights& w) {
  GraphWeights gw;
  gw.ids.reserve(w.params.size());
  for (const ad::Tensor& t : w.params) gw.ids.push_back(tape.input(t));
  return gw;
}

ad::ValueId encode_graph(ad::Tape& tape, const GraphWeights& w,
                         ad::ValueId points) {
  const int n = tape.val(points).rows;
  const ad::ValueId h1 = tape.relu(tape.add_rowvec(
      tape.matmul(points, w.at("enc1_w1")), w.at("enc1_b1")));
  const ad::ValueId p1 =
      tape.add_rowvec(tape.matmul(h1, w.at("enc1_w2")), w.at("enc1_b2"));
  const ad::ValueId g1 = tape.max_over_rows(p1);
  const ad::ValueId cat = tape.concat_cols(p1, tape.broadcast_rows(g1, n));
  const ad::ValueId h2 = tape.relu(
      tape.add_rowvec(tape.matmul(cat, w.at("enc2_w1")), w.at("enc2_b1")));
  const ad::ValueId p2 =
      tape.add_rowvec(tape.matmul(h2, w.at("enc2_w2")), w.at("enc2_b2"));
  return tape.max_over_rows(p2);
}

ad::ValueId gru_graph(ad::Tape& tape, const GraphWeights& w, ad::ValueId f,
                      ad::ValueId h_prev) {
  const ad::ValueId z = tape.sigmoid(
      tape.add(tape.add(tape.matmul(f, w.at("gru_wz")),
                        tape.matmul(h_prev, w.at("gru_uz"))),
               w.at("gru_bz")));
  const ad::ValueId r = tape.sigmoid(
      tape.add(tape.add(tape.matmul(f, w.at("gru_wr")),
                        tape.matmul(h_prev, w.at("gru_ur"))),
               w.at("gru_br")));
  const ad::ValueId n = tape.tanh_op(
      tape.add(tape.add(tape.matmul(f, w.at("gru_wn")),
                        tape.mul(r, tape.matmul(h_prev, w.at("gru_un")))),
               w.at("gru_bn")));
  return tape.add(tape.mul(tape.one_minus(z), n), tape.mul(z, h_prev));
}

DecodeGraph decode_graph(ad::Tape& tape, const ModelConfig& cfg,
                         const GraphWeights& w, ad::ValueId h) {
  const ad::ValueId s1 = tape.relu(
      tape.add_rowvec(tape.matmul(h, w.at("shape_w1")), w.at("shape_b1")));
  const ad::ValueId s2 = tape.relu(
      tape.add_rowvec(tape.matmul(s1, w.at("shape_w2")), w.at("shape_b2")));
  const ad::ValueId s3 =
      tape.add_rowvec(tape.matmul(s2, w.at("shape_w3")), w.at("shape_b3"));
  const ad::ValueId shape = tape.reshape(s3, cfg.n_out, 3);
  const ad::ValueId p1 = tape.relu(
      tape.add_rowvec(tape.matmul(h, w.at("pose_w1")), w.at("pose_b1")));
  const ad::ValueId p2 = tape.relu(
      tape.add_rowvec(tape.matmul(p1, w.at("pose_w2")), w.at("pose_b2")));
  const ad::ValueId pose4 =
      tape.add_rowvec(tape.matmul(p2, w.at("pose_w3")), w.at("pose_b3"));
  return {shape, pose4};
}

PlanarPose pose_from_raw(double tx, double ty, double sin_like,
                         double cos_like) {
  const double r = std::hypot(sin_like, cos_like);
  if (r < 1e-8) {
    throw DegenerateRotation("pose heading pair is numerically zero");
  }
  PlanarPose pose;
  pose.theta = std::atan2(sin_like / r, cos_like / r);
  pose.tx = tx;
  pose.ty = ty;
  pose.z_offset = 0.0;
  return pose;
}

PointCloud canonical_form(const PointCloud& cloud) {
  PointCloud out = cloud;
  std::sort(out.points.begin(), out.points.end(),
            [](const Vec3& a, const Vec3& b) {
              if (a.x != b.x) return a.x < b.x;
              if (a.y != b.y) return a.y < b.y;
              return a.z < b.z;
            });
  out.points.erase(std::unique(out.points.begin(), out.points.end(),
                               [](const Vec3& a, const Vec3& b) {
                                 return a.x == b.x && a.y == b.y && a.z == b.z;
                               }),
                   out.points.end());
  return out;
}

PointCloud prepare_encode_input(const PointCloud& cloud, int n, uint64_t seed) {
  if (n <= 0) throw DegenerateInput("prepare_encode_input: non-positive size");
  return resample(canonical_form(cloud), static_cast<size_t>(n), seed);
}

PlanarPose demean_pose(const PlanarPose& world, const Vec3& mean) {
  PlanarPose out;
  out.theta = world.theta;
  out.tx = world.tx - mean.x;
  out.ty = world.ty - mean.y;
  out.z_offset = 0.0;
  return out;
}

namespace {

struct StepOut {
  ad::Tensor h;
  PointCloud shape_local;
  PlanarPose pose_local;
};

StepOut run_step(const ModelWeights& w, const PointCloud& encode_input,
                 const ad::Tensor& h_prev) {
  ad::Tape tape;
  const GraphWeights gw = weights_on_tape(tape, w);
  const ad::ValueId pts = tape.input(ad::from_cloud(encode_input));
  const ad::ValueId f = encode_graph(tape, gw, pts);
  const ad::ValueId h = gru_graph(tape, gw, f, tape.input(h_prev));
  const DecodeGraph dec = decode_graph(tape, w.cfg, gw, h);
  const ad::Tensor& p4 = tape.val(dec.pose4);
  StepOut out;
  out.h = tape.val(h);
  out.shape_local = ad::to_cloud(tape.val(dec.shape));
  out.pose_local = pose_from_raw(p4.at(0, 0), p4.at(0, 1), p4.at(0, 2),
                                 p4.at(0, 3));
  return out;
}

Vec3 cloud_mean(const PointCloud& cloud) {
  Vec3 sum;
  for (const Vec3& p : cloud.points) sum += p;
  return sum * (1.0 / static_cast<double>(cloud.size()));
}

std::vector<FrameEstimate> estimate_impl(const ModelWeights& w,
                                         std::span<const PointCloud> frames,
                                         uint64_t resample_seed,
                                         bool reset_state_each_frame) {
  if (frames.empty()) throw DegenerateInput("estimate: empty track");
  std::vector<FrameEstimate> out;
  out.reserve(frames.size());
  ad::Tensor h(1, w.cfg.hidden_dim);
  bool have_prev = false;
  FrameEstimate prev;
  Vec3 prev_mean;
  for (size_t t = 0; t < frames.size(); ++t) {
    const PointCloud& frame = frames[t];
    validate_finite(frame, "input frame");
    if (frame.size() < 5) {
      if (!have_prev) {
        out.push_back({PointCloud{}, PlanarPose::identity(), h, true});
        continue;
      }
      // Too sparse to encode: carry the previous estimate, translated by the
      // centroid displacement. An empty frame gives no displacement at all.
      Vec3 delta;
      if (!frame.empty()) delta = cloud_mean(canonical_form(frame)) - prev_mean;
      for (Vec3& p : prev.shape.points) p += delta;
      prev.pose.tx += delta.x;
      prev.pose.ty += delta.y;
      prev.pose.z_offset += delta.z;
      prev_mean += delta;
      prev.skipped = true;
      out.push_back(prev);
      continue;
    }
    const auto [demeaned, centroid] = demean(canonical_form(frame));
    const PointCloud sample = resample(
        demeaned, static_cast<size_t>(w.cfg.n_in),
        mix_seed(resample_seed, static_cast<uint64_t>(t)));
    if (reset_state_each_frame) {
      h = ad::Tensor(1, w.cfg.hidden_dim);
    }
    StepOut step = run_step(w, sample, h);
    h = step.h;
    auto [shape, pose] = reattach(step.shape_local, step.pose_local, centroid);
    prev = {std::move(shape), pose, std::move(step.h), false};
    prev_mean = centroid.mean;
    have_prev = true;
    out.push_back(prev);
  }
  return out;
}

}  // namespace

std::vector<FrameEstimate> estimate_sequence(const ModelWeights& w,
                                             std::span<const PointCloud> frames,
                                             uint64_t resample_seed) {
  return estimate_impl(w, frames, resample_seed, false);
}

std::vector<FrameEstimate> estimate_per_frame(const ModelWeights& w,
                                              std::span<const PointCloud> frames,
                                              uint64_t resample_seed) {
  return estimate_impl(w, frames, resample_seed, true);
}

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& in, const char* what) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw CorruptCheckpoint(std::string("truncated reading ") + what);
  return v;
}

uint64_t read_u64(std::istream& in, const char* what) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw CorruptCheckpoint(std::string("truncated reading ") + what);
  return v;
}

constexpr char kMagic[4] = {'S', 'Q', 'F', '1'};
constexpr uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& w,
                     int64_t step, int stage) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kVersion);
  const nlohmann::json meta = {{"model", model_config_to_json(w.cfg)},
                               {"step", step},
                               {"stage", stage}};
  const std::string blob = meta.dump();
  write_u32(out, static_cast<uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (int i = 0; i < kNumParams; ++i) {
    const std::string_view name = kParamNames[static_cast<size_t>(i)];
    const ad::Tensor& t = w.params[static_cast<size_t>(i)];
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, 2);
    write_u64(out, static_cast<uint64_t>(t.rows));
    write_u64(out, static_cast<uint64_t>(t.cols));
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CorruptCheckpoint("bad magic in " + path.string());
  }
  const uint32_t version = read_u32(in, "version");
  if (version != kVersion) {
    throw CorruptCheckpoint("unsupported checkpoint version " +
                            std::to_string(version));
  }
  const uint32_t blob_len = read_u32(in, "header length");
  std::string blob(blob_len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_len));
  if (!in) throw CorruptCheckpoint("truncated reading header");
  Checkpoint ckpt;
  try {
    const nlohmann::json meta = nlohmann::json::parse(blob);
    ckpt.weights.cfg = model_config_from_json(meta.at("model"));
    ckpt.step = meta.at("step").get<int64_t>();
    ckpt.stage = meta.at("stage").get<int>();
  } catch (const CorruptCheckpoint&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptCheckpoint(std::string("bad checkpoint header: ") + e.what());
  }
  ckpt.weights.params.reserve(kNumParams);
  for (int i = 0; i < kNumParams; ++i) {
    const std::string_view want = kParamNames[static_cast<size_t>(i)];
    const uint32_t name_len = read_u32(in, "tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!in) throw CorruptCheckpoint("truncated reading tensor name");
    if (name != want) {
      throw CorruptCheckpoint("tensor order mismatch: expected '" +
                              std::string(want) + "', found '" + name + "'");
    }
    const uint32_t rank = read_u32(in, "tensor rank");
    if (rank != 2) {
      throw CorruptCheckpoint("tensor '" + name + "' has rank " +
                              std::to_string(rank));
    }
    const uint64_t rows = read_u64(in, "tensor rows");
    const uint64_t cols = read_u64(in, "tensor cols");
    const auto [want_rows, want_cols] = param_shape(ckpt.weights.cfg, i);
    if (rows != static_cast<uint64_t>(want_rows) ||
        cols != static_cast<uint64_t>(want_cols)) {
      throw CorruptCheckpoint("tensor '" + name + "' has shape {" +
                              std::to_string(rows) + "," + std::to_string(cols) +
                              "}, config requires {" +
                              std::to_string(want_rows) + "," +
                              std::to_string(want_cols) + "}");
    }
    ad::Tensor t(want_rows, want_cols);
    in.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CorruptCheckpoint("truncated reading tensor '" + name + "'");
    for (double x : t.v) {
      if (!std::isfinite(x)) {
        throw CorruptCheckpoint("tensor '" + name + "' has non-finite values");
      }
    }
    ckpt.weights.params.push_back(std::move(t));
  }
  char extra = 0;
  in.read(&extra, 1);
  if (in.gcount() != 0) {
    throw CorruptCheckpoint("trailing bytes after last tensor");
  }
  return ckpt;
}

}  // namespace seqfit
