#include "seqfit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

#include "seqfit/errors.hpp"
#include "seqfit/rng.hpp"

namespace seqfit {

std::vector<bool> trainable_mask(int stage) {
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2, or 3");
  std::vector<bool> mask(kNumParams, false);
  const auto& names = ModelWeights::names();
  for (int i = 0; i < kNumParams; ++i) {
    const std::string_view n = names[static_cast<size_t>(i)];
    if (stage == 3) {
      mask[static_cast<size_t>(i)] = true;
    } else if (stage == 1) {
      mask[static_cast<size_t>(i)] = n.starts_with("enc") ||
                                     n.starts_with("gru") ||
                                     n.starts_with("shape");
    } else {
      mask[static_cast<size_t>(i)] = n.starts_with("pose");
    }
  }
  return mask;
}

AdamState AdamState::like(const ModelWeights& w) {
  AdamState st;
  st.m.reserve(w.params.size());
  st.v.reserve(w.params.size());
  for (const ad::Tensor& p : w.params) {
    st.m.emplace_back(p.rows, p.cols);
    st.v.emplace_back(p.rows, p.cols);
  }
  return st;
}

void adam_step(ModelWeights& w, std::vector<ad::Tensor>& grads,
               const std::vector<bool>& mask, AdamState& state, double lr,
               double clip_norm) {
  if (grads.size() != w.params.size() || mask.size() != w.params.size()) {
    throw ShapeMismatch("adam_step: gradient/mask count mismatch");
  }
  double sq = 0.0;
  for (const ad::Tensor& g : grads) {
    for (double x : g.v) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (clip_norm > 0.0 && norm > clip_norm) {
    const double s = clip_norm / norm;
    for (ad::Tensor& g : grads) {
      for (double& x : g.v) x *= s;
    }
  }
  state.t += 1;
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
  for (size_t i = 0; i < w.params.size(); ++i) {
    if (!mask[i]) continue;
    ad::Tensor& p = w.params[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i].v[j];
      double& m = state.m[i].v[j];
      double& v = state.v[i].v[j];
      m = kBeta1 * m + (1.0 - kBeta1) * g;
      v = kBeta2 * v + (1.0 - kBeta2) * g * g;
      p.v[j] -= lr * (m / bc1) / (std::sqrt(v / bc2) + kEps);
    }
  }
}

namespace {

struct TrackContribution {
  double loss = 0.0, l_cd = 0.0, l_p = 0.0;
  bool any = false;
};

// Runs the unrolled sequence for one track, accumulating frame-weighted
// parameter gradients into acc. Windows longer than bptt_max_len are chained
// with the recurrent state detached at the boundary; each window's loss is
// weighted by its share of the track's usable frames, so the track objective
// is the plain mean over frames regardless of the window split.
TrackContribution accumulate_track(const ModelWeights& w, const Track& tr,
                                   const TrainConfig& cfg, int epoch,
                                   size_t track_index,
                                   const std::vector<bool>& mask,
                                   std::vector<ad::Tensor>& acc) {
  TrackContribution out;
  if (tr.poses.size() != tr.frames.size()) {
    throw ShapeMismatch("track '" + tr.id + "': frame/pose count mismatch");
  }
  int usable = 0;
  for (const PointCloud& f : tr.frames) usable += (f.size() >= 5);
  if (usable == 0) return out;

  ad::Tensor h(1, w.cfg.hidden_dim);
  const size_t n_frames = tr.frames.size();
  const size_t window = static_cast<size_t>(cfg.bptt_max_len);
  for (size_t ws = 0; ws < n_frames; ws += window) {
    const size_t we = std::min(n_frames, ws + window);
    ad::Tape tape;
    const GraphWeights gw = weights_on_tape(tape, w);
    ad::ValueId hcur = tape.input(h);
    std::vector<ad::ValueId> cd_terms, p_terms;
    int window_frames = 0;
    for (size_t t = ws; t < we; ++t) {
      if (tr.frames[t].size() < 5) continue;
      const auto [demeaned, centroid] = demean(canonical_form(tr.frames[t]));
      const PointCloud sample =
          resample(demeaned, static_cast<size_t>(w.cfg.n_in),
                   mix_seed(cfg.seed, static_cast<uint64_t>(epoch), track_index,
                            t));
      const ad::ValueId pts = tape.input(ad::from_cloud(sample));
      const ad::ValueId f = encode_graph(tape, gw, pts);
      hcur = gru_graph(tape, gw, f, hcur);
      const DecodeGraph dec = decode_graph(tape, w.cfg, gw, hcur);

      PointCloud gt_local = apply_pose(tr.poses[t], tr.complete);
      for (Vec3& p : gt_local.points) p = p - centroid.mean;
      const ad::Tensor gt_tensor = ad::from_cloud(gt_local);
      if (cfg.stage == 1 || cfg.stage == 3) {
        cd_terms.push_back(
            tape.chamfer_loss(dec.shape, tape.input(gt_tensor)));
      }
      if (cfg.stage == 2 || cfg.stage == 3) {
        p_terms.push_back(tape.pose_alignment_loss(
            dec.pose4, demean_pose(tr.poses[t], centroid.mean), gt_tensor));
      }
      ++window_frames;
    }
    if (window_frames > 0) {
      auto mean_of = [&tape](const std::vector<ad::ValueId>& terms) {
        ad::ValueId s = terms[0];
        for (size_t k = 1; k < terms.size(); ++k) s = tape.add(s, terms[k]);
        return tape.scale(s, 1.0 / static_cast<double>(terms.size()));
      };
      ad::ValueId wloss = 0;
      double wl_cd = 0.0, wl_p = 0.0;
      if (cfg.stage == 1) {
        wloss = mean_of(cd_terms);
        wl_cd = tape.val(wloss).v[0];
      } else if (cfg.stage == 2) {
        wloss = mean_of(p_terms);
        wl_p = tape.val(wloss).v[0];
      } else {
        const ad::ValueId mcd = mean_of(cd_terms);
        const ad::ValueId mp = mean_of(p_terms);
        const ad::ValueId s_cd = gw.at("s_cd");
        const ad::ValueId s_p = gw.at("s_p");
        const ad::ValueId weighted_cd = tape.scale(
            tape.mul(tape.exp_op(tape.scale(s_cd, -1.0)), mcd), 0.5);
        const ad::ValueId weighted_p =
            tape.scale(tape.mul(tape.exp_op(tape.scale(s_p, -1.0)), mp), 0.5);
        const ad::ValueId log_term = tape.scale(tape.add(s_cd, s_p), 0.5);
        wloss = tape.add(tape.add(weighted_cd, weighted_p), log_term);
        wl_cd = tape.val(mcd).v[0];
        wl_p = tape.val(mp).v[0];
      }
      tape.backward(wloss);
      const double wt =
          static_cast<double>(window_frames) / static_cast<double>(usable);
      for (int i = 0; i < kNumParams; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const ad::Tensor& g = tape.grad(gw.ids[static_cast<size_t>(i)]);
        ad::Tensor& a = acc[static_cast<size_t>(i)];
        for (size_t j = 0; j < g.size(); ++j) a.v[j] += wt * g.v[j];
      }
      out.loss += wt * tape.val(wloss).v[0];
      out.l_cd += wt * wl_cd;
      out.l_p += wt * wl_p;
      out.any = true;
    }
    h = tape.val(hcur);
  }
  return out;
}

}  // namespace

TrainResult train_stage(std::span<const Track> tracks, const TrainConfig& cfg,
                        ModelWeights weights, int64_t step0) {
  if (cfg.stage < 1 || cfg.stage > 3) {
    throw ConfigError("stage must be 1, 2, or 3");
  }
  if (!(cfg.learning_rate > 0.0)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (cfg.bptt_max_len < 1) throw ConfigError("bptt_max_len must be >= 1");
  if (cfg.batch_tracks < 1) throw ConfigError("batch_tracks must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (tracks.empty()) throw MissingGroundTruth("no tracks to train on");
  for (const Track& t : tracks) {
    if (t.complete.empty()) {
      throw MissingGroundTruth("track '" + t.id +
                               "' has no complete ground-truth cloud");
    }
  }

  const std::vector<bool> mask = trainable_mask(cfg.stage);
  AdamState adam = AdamState::like(weights);
  TrainResult res;
  res.weights = std::move(weights);
  int64_t step = step0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(tracks.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(mix_seed(cfg.seed, 1, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (size_t b = 0; b < order.size();
         b += static_cast<size_t>(cfg.batch_tracks)) {
      const size_t be =
          std::min(order.size(), b + static_cast<size_t>(cfg.batch_tracks));
      std::vector<ad::Tensor> acc;
      acc.reserve(res.weights.params.size());
      for (const ad::Tensor& p : res.weights.params) {
        acc.emplace_back(p.rows, p.cols);
      }
      double loss = 0.0, l_cd = 0.0, l_p = 0.0;
      int contributed = 0;
      for (size_t bi = b; bi < be; ++bi) {
        const TrackContribution tc = accumulate_track(
            res.weights, tracks[order[bi]], cfg, epoch, order[bi], mask, acc);
        if (tc.any) {
          loss += tc.loss;
          l_cd += tc.l_cd;
          l_p += tc.l_p;
          ++contributed;
        }
      }
      if (contributed == 0) continue;
      const double inv = 1.0 / static_cast<double>(contributed);
      for (ad::Tensor& g : acc) {
        for (double& x : g.v) x *= inv;
      }
      adam_step(res.weights, acc, mask, adam, cfg.learning_rate,
                cfg.grad_clip_norm);
      ++step;
      TrainLogRow row;
      row.step = step;
      row.stage = cfg.stage;
      row.loss = loss * inv;
      row.l_cd = l_cd * inv;
      row.l_p = l_p * inv;
      row.sigma_cd = std::exp(0.5 * res.weights.at("s_cd").v[0]);
      row.sigma_p = std::exp(0.5 * res.weights.at("s_p").v[0]);
      res.log.push_back(row);
    }
  }
  res.final_step = step;
  return res;
}

void write_train_log_csv(const std::filesystem::path& path,
                         std::span<const TrainLogRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "step,stage,loss,l_cd,l_p,sigma_cd,sigma_p\n";
  char buf[320];
  for (const TrainLogRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(r.step), r.stage, r.loss, r.l_cd,
                  r.l_p, r.sigma_cd, r.sigma_p);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

EvalResult evaluate_with(std::span<const Track> tracks, const Predictor& predict,
                         int emd_points, uint64_t seed) {
  if (emd_points < 1) throw ConfigError("emd_points must be >= 1");
  EvalResult res;
  for (size_t ti = 0; ti < tracks.size(); ++ti) {
    const Track& tr = tracks[ti];
    if (tr.complete.empty()) {
      throw MissingGroundTruth("track '" + tr.id +
                               "' has no complete ground-truth cloud");
    }
    if (tr.poses.size() != tr.frames.size()) {
      throw ShapeMismatch("track '" + tr.id + "': frame/pose count mismatch");
    }
    const std::vector<FrameEstimate> ests = predict(tr.frames);
    if (ests.size() != tr.frames.size()) {
      throw InternalError("predictor returned wrong frame count");
    }
    int detections = 0;
    for (size_t t = 0; t < ests.size(); ++t) {
      const FrameEstimate& est = ests[t];
      if (!est.skipped) ++detections;
      if (est.shape.empty()) continue;  // no estimate exists yet
      const PointCloud gt_world = apply_pose(tr.poses[t], tr.complete);
      MetricReport r;
      r.frame = detections;
      r.cd = chamfer(est.shape, gt_world);
      r.emd = emd(resample(est.shape, static_cast<size_t>(emd_points),
                           mix_seed(seed, ti, t, 0)),
                  resample(gt_world, static_cast<size_t>(emd_points),
                           mix_seed(seed, ti, t, 1)));
      r.trans_err = translation_error(est.pose, tr.poses[t]);
      r.rot_err = rotation_error_deg(est.pose, tr.poses[t]);
      res.rows.push_back(r);
    }
  }

  int max_detections = 0;
  for (const MetricReport& r : res.rows) {
    max_detections = std::max(max_detections, r.frame);
  }
  res.by_detections.assign(static_cast<size_t>(max_detections),
                           EvalAggregates{});
  auto fold = [](double deg) { return std::min(deg, 180.0 - deg); };
  auto add_to = [&fold](EvalAggregates& a, const MetricReport& r) {
    a.cd += r.cd;
    a.emd += r.emd;
    a.trans_err += r.trans_err;
    a.rot_err += r.rot_err;
    a.rot_err_folded += fold(r.rot_err);
    a.frames += 1;
  };
  auto finalize = [](EvalAggregates& a) {
    if (a.frames == 0) return;
    const double inv = 1.0 / static_cast<double>(a.frames);
    a.cd *= inv;
    a.emd *= inv;
    a.trans_err *= inv;
    a.rot_err *= inv;
    a.rot_err_folded *= inv;
  };
  for (const MetricReport& r : res.rows) {
    add_to(res.overall, r);
    add_to(res.by_detections[static_cast<size_t>(r.frame - 1)], r);
  }
  finalize(res.overall);
  for (EvalAggregates& a : res.by_detections) finalize(a);
  return res;
}

EvalResult evaluate(std::span<const Track> tracks, const ModelWeights& w,
                    EvalMode mode, int emd_points, uint64_t seed) {
  const Predictor predict = [&w, mode,
                             seed](std::span<const PointCloud> frames) {
    return mode == EvalMode::kSequential
               ? estimate_sequence(w, frames, seed)
               : estimate_per_frame(w, frames, seed);
  };
  return evaluate_with(tracks, predict, emd_points, seed);
}

nlohmann::json eval_to_json(const EvalResult& r) {
  auto agg = [](const EvalAggregates& a) {
    return nlohmann::json{{"cd", a.cd},
                          {"emd", a.emd},
                          {"trans_err", a.trans_err},
                          {"rot_err", a.rot_err},
                          {"rot_err_folded", a.rot_err_folded},
                          {"frames", a.frames}};
  };
  nlohmann::json buckets = nlohmann::json::array();
  for (size_t i = 0; i < r.by_detections.size(); ++i) {
    nlohmann::json b = agg(r.by_detections[i]);
    b["detections"] = static_cast<int>(i + 1);
    buckets.push_back(std::move(b));
  }
  return nlohmann::json{{"overall", agg(r.overall)},
                        {"by_detections", std::move(buckets)}};
}

namespace {

std::string fnum(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

void write_eval_svg(const std::filesystem::path& path,
                    const EvalResult& sequential, const EvalResult& per_frame) {
  struct Panel {
    const char* title;
    double EvalAggregates::*field;
  };
  const Panel panels[4] = {{"chamfer distance [m]", &EvalAggregates::cd},
                           {"earth mover's distance [m]", &EvalAggregates::emd},
                           {"translation error [m]", &EvalAggregates::trans_err},
                           {"rotation error [deg]", &EvalAggregates::rot_err}};
  const int width = 980, height = 760;
  const int panel_w = 380, panel_h = 260;
  const size_t max_detections =
      std::max(sequential.by_detections.size(), per_frame.by_detections.size());

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) +
         "\" viewBox=\"0 0 " + std::to_string(width) + " " +
         std::to_string(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"60\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">"
         "error vs. number of detections</text>\n";
  svg += "<line x1=\"560\" y1=\"22\" x2=\"600\" y2=\"22\" stroke=\"#1f77b4\" "
         "stroke-width=\"2\"/>\n";
  svg += "<text x=\"606\" y=\"27\" font-family=\"sans-serif\" "
         "font-size=\"13\">sequential</text>\n";
  svg += "<line x1=\"700\" y1=\"22\" x2=\"740\" y2=\"22\" stroke=\"#d62728\" "
         "stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n";
  svg += "<text x=\"746\" y=\"27\" font-family=\"sans-serif\" "
         "font-size=\"13\">per_frame</text>\n";

  for (int pi = 0; pi < 4; ++pi) {
    const int col = pi % 2, row = pi / 2;
    const int x0 = 70 + col * 480;
    const int y0 = 60 + row * 340;
    double vmax = 0.0;
    for (const EvalResult* r : {&sequential, &per_frame}) {
      for (const EvalAggregates& a : r->by_detections) {
        if (a.frames > 0) vmax = std::max(vmax, a.*(panels[pi].field));
      }
    }
    if (vmax <= 0.0) vmax = 1.0;
    vmax *= 1.05;
    svg += "<rect x=\"" + std::to_string(x0) + "\" y=\"" + std::to_string(y0) +
           "\" width=\"" + std::to_string(panel_w) + "\" height=\"" +
           std::to_string(panel_h) +
           "\" fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + std::to_string(x0) + "\" y=\"" +
           std::to_string(y0 - 8) +
           "\" font-family=\"sans-serif\" font-size=\"13\">" +
           panels[pi].title + "</text>\n";
    svg += "<text x=\"" + std::to_string(x0 - 6) + "\" y=\"" +
           std::to_string(y0 + 5) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">" + fnum(vmax) + "</text>\n";
    svg += "<text x=\"" + std::to_string(x0 - 6) + "\" y=\"" +
           std::to_string(y0 + panel_h) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">0</text>\n";
    svg += "<text x=\"" + std::to_string(x0) + "\" y=\"" +
           std::to_string(y0 + panel_h + 16) +
           "\" font-family=\"sans-serif\" font-size=\"11\">1</text>\n";
    svg += "<text x=\"" + std::to_string(x0 + panel_w) + "\" y=\"" +
           std::to_string(y0 + panel_h + 16) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">" + std::to_string(max_detections) + "</text>\n";

    for (const EvalResult* r : {&sequential, &per_frame}) {
      std::string pts;
      for (size_t d = 0; d < r->by_detections.size(); ++d) {
        const EvalAggregates& a = r->by_detections[d];
        if (a.frames == 0) continue;
        const double fx =
            max_detections > 1
                ? static_cast<double>(d) /
                      static_cast<double>(max_detections - 1)
                : 0.5;
        const double fy = a.*(panels[pi].field) / vmax;
        pts += fnum(x0 + fx * panel_w) + "," +
               fnum(y0 + panel_h - fy * panel_h) + " ";
      }
      if (pts.empty()) continue;
      const bool seq = (r == &sequential);
      svg += "<polyline fill=\"none\" stroke=\"";
      svg += seq ? "#1f77b4" : "#d62728";
      svg += "\" stroke-width=\"2\"";
      if (!seq) svg += " stroke-dasharray=\"6 4\"";
      svg += " points=\"" + pts + "\"/>\n";
    }
  }
  svg += "</svg>\n";

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << svg;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace seqfit
