#include "seqfit/cli.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "seqfit/amodal.hpp"
#include "seqfit/dataset.hpp"
#include "seqfit/errors.hpp"
#include "seqfit/model.hpp"
#include "seqfit/rng.hpp"
#include "seqfit/simulator.hpp"
#include "seqfit/trainer.hpp"

namespace seqfit {

std::string version_string() { return "seqfit 1.0.0"; }

namespace {

nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ParseError("bad JSON in " + path.string() + ": " + e.what());
  }
}

// Strict view over one JSON object: every key must be consumed, unknown keys
// are reported by name.
class ConfigView {
 public:
  ConfigView(const nlohmann::json& j, std::string ctx)
      : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) {
      throw ConfigError(ctx_ + " config must be a JSON object");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return typed<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) {
      throw ConfigError(ctx_ + " config: missing key '" + key + "'");
    }
    return typed<T>(key);
  }

  void done() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) {
        throw ConfigError("unknown key '" + key + "' in " + ctx_ + " config");
      }
    }
  }

 private:
  template <typename T>
  T typed(const std::string& key) {
    used_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const std::exception&) {
      throw ConfigError(ctx_ + " config: key '" + key + "' has the wrong type");
    }
  }

  const nlohmann::json& j_;
  std::string ctx_;
  std::set<std::string> used_;
};

// "epochs": 40 applies to all stages; "epochs": [a, b, c] sets them per stage.
template <typename T>
std::array<T, 3> per_stage(ConfigView& v, const std::string& key,
                           std::array<T, 3> fallback) {
  if (!v.has(key)) return fallback;
  const nlohmann::json& j = v.raw(key);
  try {
    if (j.is_array()) {
      if (j.size() != 3) {
        throw ConfigError("key '" + key + "' must have one value per stage (3)");
      }
      return {j[0].get<T>(), j[1].get<T>(), j[2].get<T>()};
    }
    const T all = j.get<T>();
    return {all, all, all};
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' has the wrong type");
  }
}

std::vector<Track> select_tracks(std::vector<Track> all,
                                 const std::vector<std::string>& ids,
                                 const std::string& what) {
  if (ids.empty()) return all;
  std::vector<Track> out;
  for (const std::string& id : ids) {
    auto it = std::find_if(all.begin(), all.end(),
                           [&](const Track& t) { return t.id == id; });
    if (it == all.end()) {
      throw ConfigError(what + ": no track with id '" + id + "'");
    }
    out.push_back(std::move(*it));
  }
  return out;
}

}  // namespace

void cmd_simulate(const std::filesystem::path& config,
                  const CliOverrides& overrides) {
  const nlohmann::json j = load_json(config);
  ConfigView v(j, "simulate");

  BuildConfig build;
  build.out_dir = overrides.out_dir ? *overrides.out_dir
                                    : v.require<std::string>("out_dir");
  if (overrides.out_dir) v.get<std::string>("out_dir", "");
  build.seed = overrides.seed ? *overrides.seed : v.get<uint64_t>("seed", 0);
  if (overrides.seed) v.get<uint64_t>("seed", 0);
  build.gt_points = v.get<int>("gt_points", 1024);
  const int default_frames = v.get<int>("n_frames", 20);
  build.lidar = v.has("lidar") ? lidar_from_json(v.raw("lidar"))
                               : LidarModel::vlp16();

  if (!v.has("meshes")) throw ConfigError("simulate config: missing key 'meshes'");
  for (const nlohmann::json& jm : v.raw("meshes")) {
    ConfigView m(jm, "mesh");
    const std::string id = m.require<std::string>("id");
    TriMesh mesh;
    if (m.has("obj")) {
      mesh = load_obj(m.require<std::string>("obj"));
    } else if (m.has("variant")) {
      mesh = make_boxcar_variant(m.require<int>("variant"));
    } else {
      throw ConfigError("mesh '" + id + "': missing key 'obj' (or 'variant')");
    }
    m.done();
    build.meshes.emplace_back(id, std::move(mesh));
  }
  if (!v.has("trajectories")) {
    throw ConfigError("simulate config: missing key 'trajectories'");
  }
  for (const nlohmann::json& jt : v.raw("trajectories")) {
    ConfigView t(jt, "trajectory");
    const std::string id = t.require<std::string>("id");
    const TrajectoryKind kind =
        trajectory_kind_from_string(t.require<std::string>("kind"));
    TrajectoryParams params;
    params.speed = t.get<double>("speed", params.speed);
    params.rate_hz = t.get<double>("rate_hz", params.rate_hz);
    params.x0 = t.get<double>("x0", params.x0);
    params.y0 = t.get<double>("y0", params.y0);
    params.heading0 = t.get<double>("heading0", params.heading0);
    params.radius = t.get<double>("radius", params.radius);
    const int n_frames = t.get<int>("n_frames", default_frames);
    t.done();
    build.trajectories.emplace_back(id,
                                    make_trajectory(kind, params, n_frames));
  }
  v.done();

  const DatasetManifest manifest = build_dataset(build);
  size_t n_frames = 0;
  for (const TrackRecord& t : manifest.tracks) n_frames += t.frames.size();
  std::printf("dataset written to %s (%zu tracks, %zu frames)\n",
              build.out_dir.string().c_str(), manifest.tracks.size(), n_frames);
}

void cmd_train(const std::filesystem::path& config,
               const CliOverrides& overrides) {
  const nlohmann::json j = load_json(config);
  ConfigView v(j, "train");

  const std::filesystem::path dataset = v.require<std::string>("dataset");
  const std::filesystem::path out_dir = overrides.out_dir
                                            ? *overrides.out_dir
                                            : v.require<std::string>("out_dir");
  if (overrides.out_dir) v.get<std::string>("out_dir", "");
  const std::string stage_str =
      overrides.stage ? *overrides.stage : v.get<std::string>("stage", "all");
  if (overrides.stage) v.get<std::string>("stage", "all");
  std::vector<int> stages;
  if (stage_str == "all") {
    stages = {1, 2, 3};
  } else if (stage_str == "1" || stage_str == "2" || stage_str == "3") {
    stages = {stage_str[0] - '0'};
  } else {
    throw ConfigError("train config: stage must be 1, 2, 3 or all, got '" +
                      stage_str + "'");
  }

  const uint64_t seed =
      overrides.seed ? *overrides.seed : v.get<uint64_t>("seed", 0);
  if (overrides.seed) v.get<uint64_t>("seed", 0);
  const auto epochs = per_stage<int>(v, "epochs", {40, 25, 40});
  const auto lr = per_stage<double>(v, "learning_rate", {1e-3, 1e-3, 1e-4});
  const double grad_clip_norm = v.get<double>("grad_clip_norm", 5.0);
  const int bptt_max_len = v.get<int>("bptt_max_len", 30);
  const int batch_tracks = v.get<int>("batch_tracks", 1);
  const auto val_ids = v.get<std::vector<std::string>>("val_tracks", {});

  ModelConfig model_cfg;
  const bool has_model = v.has("model");
  if (has_model) model_cfg = model_config_from_json(v.raw("model"));

  const std::string resume_path =
      overrides.resume ? *overrides.resume : v.get<std::string>("resume", "");
  if (overrides.resume) v.get<std::string>("resume", "");
  v.done();

  std::vector<Track> tracks = load_tracks(dataset);
  for (const std::string& id : val_ids) {
    const auto it = std::find_if(tracks.begin(), tracks.end(),
                                 [&](const Track& t) { return t.id == id; });
    if (it == tracks.end()) {
      throw ConfigError("train config: val track '" + id + "' not in dataset");
    }
    tracks.erase(it);
  }

  ModelWeights weights;
  int64_t step = 0;
  if (!resume_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(resume_path);
    if (has_model && !(ckpt.weights.cfg == model_cfg)) {
      throw ConfigError("train config: model config conflicts with resume checkpoint");
    }
    weights = ckpt.weights;
    step = ckpt.step;
  } else {
    weights = ModelWeights::init(model_cfg, seed);
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<TrainLogRow> log;
  for (const int stage : stages) {
    TrainConfig tc;
    tc.stage = stage;
    tc.learning_rate = lr[static_cast<size_t>(stage - 1)];
    tc.epochs = epochs[static_cast<size_t>(stage - 1)];
    tc.seed = seed;
    tc.grad_clip_norm = grad_clip_norm;
    tc.bptt_max_len = bptt_max_len;
    tc.batch_tracks = batch_tracks;
    TrainResult result = train_stage(tracks, tc, std::move(weights), step);
    const int64_t first = step + 1;
    step = result.final_step;
    weights = std::move(result.weights);
    log.insert(log.end(), result.log.begin(), result.log.end());
    const std::filesystem::path ckpt_path =
        out_dir / ("stage" + std::to_string(stage) + ".ckpt");
    save_checkpoint(ckpt_path, weights, step, stage);
    std::printf("stage %d: steps %lld-%lld, final loss %.6g -> %s\n", stage,
                static_cast<long long>(first), static_cast<long long>(step),
                log.empty() ? 0.0 : log.back().loss,
                ckpt_path.string().c_str());
  }
  save_checkpoint(out_dir / "model.ckpt", weights, step, stages.back());
  write_train_log_csv(out_dir / "train_log.csv", log);
  std::printf("final checkpoint: %s\n", (out_dir / "model.ckpt").string().c_str());
}

void cmd_eval(const std::filesystem::path& config,
              const CliOverrides& overrides) {
  const nlohmann::json j = load_json(config);
  ConfigView v(j, "eval");

  const std::filesystem::path dataset = v.require<std::string>("dataset");
  const std::filesystem::path ckpt_path =
      overrides.checkpoint ? *overrides.checkpoint
                           : v.require<std::string>("checkpoint");
  if (overrides.checkpoint) v.get<std::string>("checkpoint", "");
  const std::filesystem::path out_dir = overrides.out_dir
                                            ? *overrides.out_dir
                                            : v.require<std::string>("out_dir");
  if (overrides.out_dir) v.get<std::string>("out_dir", "");
  const auto subset = v.get<std::vector<std::string>>("tracks", {});
  const int emd_points = v.get<int>("emd_points", 128);
  const uint64_t seed =
      overrides.seed ? *overrides.seed : v.get<uint64_t>("seed", 0);
  if (overrides.seed) v.get<uint64_t>("seed", 0);
  v.done();

  const std::vector<Track> tracks =
      select_tracks(load_tracks(dataset), subset, "eval");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);

  const EvalResult seq =
      evaluate(tracks, ckpt.weights, EvalMode::kSequential, emd_points, seed);
  const EvalResult pf =
      evaluate(tracks, ckpt.weights, EvalMode::kPerFrame, emd_points, seed);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_metric_csv(out_dir / "eval_sequential.csv", seq.rows);
  write_metric_csv(out_dir / "eval_per_frame.csv", pf.rows);

  nlohmann::json out = {{"sequential", eval_to_json(seq)},
                        {"per_frame", eval_to_json(pf)},
                        {"emd_points", emd_points},
                        {"seed", seed}};
  {
    std::ofstream os(out_dir / "eval.json", std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + (out_dir / "eval.json").string());
    os << out.dump(2) << '\n';
    if (!os) throw IoError("write failed: " + (out_dir / "eval.json").string());
  }
  write_eval_svg(out_dir / "eval.svg", seq, pf);

  const auto print = [](const char* name, const EvalAggregates& a) {
    std::printf("%s: cd %.6g, emd %.6g, trans %.6g, rot %.6g deg (%lld frames)\n",
                name, a.cd, a.emd, a.trans_err, a.rot_err,
                static_cast<long long>(a.frames));
  };
  print("sequential", seq.overall);
  print("per_frame", pf.overall);
  std::printf("wrote %s\n", (out_dir / "eval.json").string().c_str());
}

void cmd_label(const std::filesystem::path& config,
               const CliOverrides& overrides) {
  const nlohmann::json j = load_json(config);
  ConfigView v(j, "label");

  const std::filesystem::path dataset = v.require<std::string>("dataset");
  const std::filesystem::path out_dir = overrides.out_dir
                                            ? *overrides.out_dir
                                            : v.require<std::string>("out_dir");
  if (overrides.out_dir) v.get<std::string>("out_dir", "");
  const std::string mode_str =
      overrides.mode ? *overrides.mode : v.require<std::string>("mode");
  if (overrides.mode) v.get<std::string>("mode", "");

  LabelRequest req;
  req.mode = label_mode_from_string(mode_str);
  req.alpha_px = v.get<double>("alpha_px", 15.0);
  req.fill_holes = v.get<bool>("fill_holes", false);
  if (!v.has("camera")) throw ConfigError("label config: missing key 'camera'");
  const CameraModel cam = camera_from_json(v.raw("camera"));
  const auto subset = v.get<std::vector<std::string>>("tracks", {});

  const bool sequential = req.mode != LabelMode::kGtAccumulation;
  std::string ckpt_path = overrides.checkpoint ? *overrides.checkpoint
                                               : v.get<std::string>("checkpoint", "");
  if (overrides.checkpoint) v.get<std::string>("checkpoint", "");
  if (sequential && ckpt_path.empty()) {
    throw ConfigError("label config: mode '" + mode_str +
                      "' needs key 'checkpoint'");
  }
  const std::string external_path = v.get<std::string>("external", "");
  if (req.mode == LabelMode::kSequentialCompletionExternal &&
      external_path.empty()) {
    throw ConfigError("label config: external mode needs key 'external'");
  }
  const std::string reference = v.get<std::string>("reference", "");
  v.done();

  const std::vector<Track> tracks =
      select_tracks(load_tracks(dataset), subset, "label");

  Checkpoint ckpt;
  if (sequential) ckpt = load_checkpoint(ckpt_path);

  std::vector<std::vector<PointCloud>> external;
  if (!external_path.empty()) {
    std::vector<Track> ext_tracks = load_tracks(external_path);
    for (const Track& t : tracks) {
      auto it = std::find_if(ext_tracks.begin(), ext_tracks.end(),
                             [&](const Track& e) { return e.id == t.id; });
      if (it == ext_tracks.end()) {
        throw ConfigError("label config: external manifest has no track '" +
                          t.id + "'");
      }
      external.push_back(std::move(it->frames));
    }
  }

  const std::vector<FrameLabels> labels =
      label_tracks(tracks, cam, req, sequential ? &ckpt.weights : nullptr,
                   external.empty() ? nullptr : &external);
  write_labels(out_dir, labels, cam, req.mode);
  std::printf("labeled %zu frames x %zu instances -> %s\n", labels.size(),
              tracks.size(), out_dir.string().c_str());

  if (!reference.empty()) {
    const LabelScore score = score_labels(labels, read_labels(reference));
    nlohmann::json sj = {{"mean_iou", score.mean_iou},
                         {"percent_miss", score.percent_miss}};
    std::ofstream os(out_dir / "score.json", std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + (out_dir / "score.json").string());
    os << sj.dump(2) << '\n';
    std::printf("vs reference: mean IoU %.4f, miss %.2f%%\n", score.mean_iou,
                score.percent_miss);
  }
}

void cmd_report(const std::vector<std::filesystem::path>& eval_jsons,
                const std::filesystem::path& out_path) {
  if (eval_jsons.empty()) throw ConfigError("report: no eval.json inputs given");
  std::string md =
      "# Evaluation report\n\n"
      "| run | mode | frames | cd | emd | trans_err | rot_err | rot_err_folded |\n"
      "|---|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const std::filesystem::path& path : eval_jsons) {
    const nlohmann::json j = load_json(path);
    for (const char* mode : {"sequential", "per_frame"}) {
      if (!j.contains(mode)) {
        throw ParseError(path.string() + ": missing '" + mode + "' block");
      }
      const nlohmann::json& o = j.at(mode).at("overall");
      std::snprintf(buf, sizeof(buf),
                    "| %s | %s | %lld | %.6g | %.6g | %.6g | %.6g | %.6g |\n",
                    path.filename().string().c_str(), mode,
                    static_cast<long long>(o.at("frames").get<int64_t>()),
                    o.at("cd").get<double>(), o.at("emd").get<double>(),
                    o.at("trans_err").get<double>(),
                    o.at("rot_err").get<double>(),
                    o.at("rot_err_folded").get<double>());
      md += buf;
    }
  }
  std::ofstream os(out_path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + out_path.string());
  os << md;
  if (!os) throw IoError("write failed: " + out_path.string());
  std::printf("report written to %s\n", out_path.string().c_str());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Sequential vehicle shape completion and pose estimation"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", version_string());

  struct {
    std::string config;
    CliOverrides ov;
  } sim, train, eval_, label;
  std::vector<std::string> report_inputs;
  std::string report_out;

  CLI::App* sub_sim = app.add_subcommand("simulate", "Generate a synthetic LiDAR dataset");
  sub_sim->add_option("--config", sim.config, "JSON config file")->required();
  sub_sim->add_option("--out", sim.ov.out_dir, "Output directory (overrides config)");
  sub_sim->add_option("--seed", sim.ov.seed, "Seed (overrides config)");

  CLI::App* sub_train = app.add_subcommand("train", "Train the completion model");
  sub_train->add_option("--config", train.config, "JSON config file")->required();
  sub_train->add_option("--stage", train.ov.stage, "1, 2, 3 or all (overrides config)");
  sub_train->add_option("--resume", train.ov.resume, "Checkpoint to continue from");
  sub_train->add_option("--out", train.ov.out_dir, "Output directory (overrides config)");
  sub_train->add_option("--seed", train.ov.seed, "Seed (overrides config)");

  CLI::App* sub_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  sub_eval->add_option("--config", eval_.config, "JSON config file")->required();
  sub_eval->add_option("--checkpoint", eval_.ov.checkpoint, "Checkpoint (overrides config)");
  sub_eval->add_option("--out", eval_.ov.out_dir, "Output directory (overrides config)");
  sub_eval->add_option("--seed", eval_.ov.seed, "Seed (overrides config)");

  CLI::App* sub_label = app.add_subcommand("label", "Produce amodal/inmodal masks");
  sub_label->add_option("--config", label.config, "JSON config file")->required();
  sub_label->add_option("--mode", label.ov.mode, "Label mode (overrides config)");
  sub_label->add_option("--checkpoint", label.ov.checkpoint, "Checkpoint (overrides config)");
  sub_label->add_option("--out", label.ov.out_dir, "Output directory (overrides config)");

  CLI::App* sub_report = app.add_subcommand("report", "Summarize eval.json files");
  sub_report->add_option("inputs", report_inputs, "eval.json files")->required();
  sub_report->add_option("--out", report_out, "Output markdown file")->required();

  CLI::App* sub_version = app.add_subcommand("version", "Print the build identifier");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*sub_sim) {
      cmd_simulate(sim.config, sim.ov);
    } else if (*sub_train) {
      cmd_train(train.config, train.ov);
    } else if (*sub_eval) {
      cmd_eval(eval_.config, eval_.ov);
    } else if (*sub_label) {
      cmd_label(label.config, label.ov);
    } else if (*sub_report) {
      std::vector<std::filesystem::path> paths(report_inputs.begin(),
                                               report_inputs.end());
      cmd_report(paths, report_out);
    } else if (*sub_version) {
      std::printf("%s\n", version_string().c_str());
    } else {
      std::fputs(app.help().c_str(), stdout);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DegenerateInput& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeMismatch& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const MissingGroundTruth& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DegenerateRotation& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const CorruptCheckpoint& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 4;
  }
  return 0;
}

}  // namespace seqfit
