#include "seqfit/autodiff.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "seqfit/errors.hpp"

namespace seqfit::ad {

namespace {

using MapM = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MapC = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

MapC cmap(const Tensor& t) { return MapC(t.v.data(), t.rows, t.cols); }
MapM mmap(Tensor& t) { return MapM(t.v.data(), t.rows, t.cols); }

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeMismatch(std::string(op) + ": " + what);
}

}  // namespace

Tensor from_cloud(const PointCloud& cloud) {
  Tensor t(static_cast<int>(cloud.size()), 3);
  for (size_t i = 0; i < cloud.size(); ++i) {
    t.at(static_cast<int>(i), 0) = cloud.points[i].x;
    t.at(static_cast<int>(i), 1) = cloud.points[i].y;
    t.at(static_cast<int>(i), 2) = cloud.points[i].z;
  }
  return t;
}

PointCloud to_cloud(const Tensor& t) {
  if (t.cols != 3) throw ShapeMismatch("to_cloud: tensor is not {n,3}");
  PointCloud cloud;
  cloud.points.resize(static_cast<size_t>(t.rows));
  for (int i = 0; i < t.rows; ++i) {
    cloud.points[static_cast<size_t>(i)] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
  }
  return cloud;
}

ValueId Tape::alloc(int rows, int cols) {
  vals_.emplace_back(rows, cols);
  return static_cast<ValueId>(vals_.size() - 1);
}

void Tape::check_finite(ValueId id, const char* op) const {
  for (double x : vals_[static_cast<size_t>(id)].v) {
    if (!std::isfinite(x)) {
      throw InternalError(std::string("non-finite value produced by op '") +
                          op + "'");
    }
  }
}

ValueId Tape::finish(Rec rec) {
  rec.fwd();
  check_finite(rec.out, rec.op);
  const ValueId out = rec.out;
  recs_.push_back(std::move(rec));
  return out;
}

ValueId Tape::input(Tensor t) {
  if (t.rows <= 0 || t.cols <= 0) throw ShapeMismatch("input: empty tensor");
  vals_.push_back(std::move(t));
  const ValueId id = static_cast<ValueId>(vals_.size() - 1);
  check_finite(id, "input");
  return id;
}

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Tensor &A = val(a), &B = val(b);
  require(A.cols == B.rows, "matmul",
          "inner dimensions differ (" + std::to_string(A.cols) + " vs " +
              std::to_string(B.rows) + ")");
  const ValueId out = alloc(A.rows, B.cols);
  return finish(
      {out, "matmul",
       [this, a, b, out] { mmap(vals_[out]) = cmap(vals_[a]) * cmap(vals_[b]); },
       [this, a, b, out] {
         mmap(grads_[a]) += cmap(grads_[out]) * cmap(vals_[b]).transpose();
         mmap(grads_[b]) += cmap(vals_[a]).transpose() * cmap(grads_[out]);
       }});
}

ValueId Tape::add(ValueId a, ValueId b) {
  const Tensor &A = val(a), &B = val(b);
  require(A.rows == B.rows && A.cols == B.cols, "add", "shapes differ");
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "add",
                 [this, a, b, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = vals_[a].v[i] + vals_[b].v[i];
                 },
                 [this, a, b, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i) {
                     grads_[a].v[i] += grads_[out].v[i];
                     grads_[b].v[i] += grads_[out].v[i];
                   }
                 }});
}

ValueId Tape::sub(ValueId a, ValueId b) {
  const Tensor &A = val(a), &B = val(b);
  require(A.rows == B.rows && A.cols == B.cols, "sub", "shapes differ");
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "sub",
                 [this, a, b, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = vals_[a].v[i] - vals_[b].v[i];
                 },
                 [this, a, b, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i) {
                     grads_[a].v[i] += grads_[out].v[i];
                     grads_[b].v[i] -= grads_[out].v[i];
                   }
                 }});
}

ValueId Tape::mul(ValueId a, ValueId b) {
  const Tensor &A = val(a), &B = val(b);
  require(A.rows == B.rows && A.cols == B.cols, "mul", "shapes differ");
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "mul",
                 [this, a, b, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = vals_[a].v[i] * vals_[b].v[i];
                 },
                 [this, a, b, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i) {
                     grads_[a].v[i] += grads_[out].v[i] * vals_[b].v[i];
                     grads_[b].v[i] += grads_[out].v[i] * vals_[a].v[i];
                   }
                 }});
}

ValueId Tape::scale(ValueId a, double k) {
  const Tensor& A = val(a);
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "scale",
                 [this, a, out, k] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = k * vals_[a].v[i];
                 },
                 [this, a, out, k] {
                   for (size_t i = 0; i < grads_[out].size(); ++i)
                     grads_[a].v[i] += k * grads_[out].v[i];
                 }});
}

ValueId Tape::one_minus(ValueId a) {
  const Tensor& A = val(a);
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "one_minus",
                 [this, a, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = 1.0 - vals_[a].v[i];
                 },
                 [this, a, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i)
                     grads_[a].v[i] -= grads_[out].v[i];
                 }});
}

ValueId Tape::add_rowvec(ValueId mat, ValueId row) {
  const Tensor &A = val(mat), &R = val(row);
  require(R.rows == 1 && R.cols == A.cols, "add_rowvec",
          "row vector must be {1," + std::to_string(A.cols) + "}");
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "add_rowvec",
                 [this, mat, row, out] {
                   const Tensor &A = vals_[mat], &R = vals_[row];
                   Tensor& O = vals_[out];
                   for (int i = 0; i < A.rows; ++i)
                     for (int j = 0; j < A.cols; ++j)
                       O.at(i, j) = A.at(i, j) + R.at(0, j);
                 },
                 [this, mat, row, out] {
                   const Tensor& G = grads_[out];
                   for (int i = 0; i < G.rows; ++i)
                     for (int j = 0; j < G.cols; ++j) {
                       grads_[mat].at(i, j) += G.at(i, j);
                       grads_[row].at(0, j) += G.at(i, j);
                     }
                 }});
}

ValueId Tape::broadcast_rows(ValueId row, int n) {
  const Tensor& R = val(row);
  require(R.rows == 1, "broadcast_rows", "input must be a row vector");
  require(n > 0, "broadcast_rows", "row count must be positive");
  const ValueId out = alloc(n, R.cols);
  return finish({out, "broadcast_rows",
                 [this, row, out] {
                   const Tensor& R = vals_[row];
                   Tensor& O = vals_[out];
                   for (int i = 0; i < O.rows; ++i)
                     for (int j = 0; j < O.cols; ++j) O.at(i, j) = R.at(0, j);
                 },
                 [this, row, out] {
                   const Tensor& G = grads_[out];
                   for (int i = 0; i < G.rows; ++i)
                     for (int j = 0; j < G.cols; ++j)
                       grads_[row].at(0, j) += G.at(i, j);
                 }});
}

ValueId Tape::concat_cols(ValueId a, ValueId b) {
  const Tensor &A = val(a), &B = val(b);
  require(A.rows == B.rows, "concat_cols", "row counts differ");
  const ValueId out = alloc(A.rows, A.cols + B.cols);
  return finish({out, "concat_cols",
                 [this, a, b, out] {
                   const Tensor &A = vals_[a], &B = vals_[b];
                   Tensor& O = vals_[out];
                   for (int i = 0; i < A.rows; ++i) {
                     for (int j = 0; j < A.cols; ++j) O.at(i, j) = A.at(i, j);
                     for (int j = 0; j < B.cols; ++j)
                       O.at(i, A.cols + j) = B.at(i, j);
                   }
                 },
                 [this, a, b, out] {
                   const Tensor& G = grads_[out];
                   Tensor &GA = grads_[a], &GB = grads_[b];
                   for (int i = 0; i < GA.rows; ++i) {
                     for (int j = 0; j < GA.cols; ++j) GA.at(i, j) += G.at(i, j);
                     for (int j = 0; j < GB.cols; ++j)
                       GB.at(i, j) += G.at(i, GA.cols + j);
                   }
                 }});
}

ValueId Tape::relu(ValueId a) {
  const Tensor& A = val(a);
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "relu",
                 [this, a, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = std::max(0.0, vals_[a].v[i]);
                 },
                 [this, a, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i)
                     if (vals_[a].v[i] > 0.0)
                       grads_[a].v[i] += grads_[out].v[i];
                 }});
}

ValueId Tape::sigmoid(ValueId a) {
  const Tensor& A = val(a);
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "sigmoid",
                 [this, a, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = 1.0 / (1.0 + std::exp(-vals_[a].v[i]));
                 },
                 [this, a, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i) {
                     const double s = vals_[out].v[i];
                     grads_[a].v[i] += grads_[out].v[i] * s * (1.0 - s);
                   }
                 }});
}

ValueId Tape::tanh_op(ValueId a) {
  const Tensor& A = val(a);
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "tanh",
                 [this, a, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = std::tanh(vals_[a].v[i]);
                 },
                 [this, a, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i) {
                     const double t = vals_[out].v[i];
                     grads_[a].v[i] += grads_[out].v[i] * (1.0 - t * t);
                   }
                 }});
}

ValueId Tape::exp_op(ValueId a) {
  const Tensor& A = val(a);
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "exp",
                 [this, a, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = std::exp(vals_[a].v[i]);
                 },
                 [this, a, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i)
                     grads_[a].v[i] += grads_[out].v[i] * vals_[out].v[i];
                 }});
}

ValueId Tape::square(ValueId a) {
  const Tensor& A = val(a);
  const ValueId out = alloc(A.rows, A.cols);
  return finish({out, "square",
                 [this, a, out] {
                   for (size_t i = 0; i < vals_[out].size(); ++i)
                     vals_[out].v[i] = vals_[a].v[i] * vals_[a].v[i];
                 },
                 [this, a, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i)
                     grads_[a].v[i] += 2.0 * grads_[out].v[i] * vals_[a].v[i];
                 }});
}

ValueId Tape::reshape(ValueId a, int rows, int cols) {
  const Tensor& A = val(a);
  require(static_cast<size_t>(rows) * cols == A.size(), "reshape",
          "element count differs");
  const ValueId out = alloc(rows, cols);
  return finish({out, "reshape",
                 [this, a, out] { vals_[out].v = vals_[a].v; },
                 [this, a, out] {
                   for (size_t i = 0; i < grads_[out].size(); ++i)
                     grads_[a].v[i] += grads_[out].v[i];
                 }});
}

ValueId Tape::max_over_rows(ValueId a) {
  const Tensor& A = val(a);
  require(A.rows >= 1, "max_over_rows", "need at least one row");
  // Copy the column count out now: alloc() may grow the value store and
  // invalidate A.
  const int n_cols = A.cols;
  const ValueId out = alloc(1, n_cols);
  auto argmax = std::make_shared<std::vector<int>>(n_cols, 0);
  return finish({out, "max_over_rows",
                 [this, a, out, argmax] {
                   const Tensor& A = vals_[a];
                   Tensor& O = vals_[out];
                   for (int j = 0; j < A.cols; ++j) {
                     int best = 0;
                     for (int i = 1; i < A.rows; ++i)
                       if (A.at(i, j) > A.at(best, j)) best = i;
                     (*argmax)[static_cast<size_t>(j)] = best;
                     O.at(0, j) = A.at(best, j);
                   }
                 },
                 [this, a, out, argmax] {
                   const Tensor& G = grads_[out];
                   for (int j = 0; j < G.cols; ++j)
                     grads_[a].at((*argmax)[static_cast<size_t>(j)], j) +=
                         G.at(0, j);
                 }});
}

ValueId Tape::sum_all(ValueId a) {
  const ValueId out = alloc(1, 1);
  return finish({out, "sum_all",
                 [this, a, out] {
                   double s = 0.0;
                   for (double x : vals_[a].v) s += x;
                   vals_[out].v[0] = s;
                 },
                 [this, a, out] {
                   for (double& g : grads_[a].v) g += grads_[out].v[0];
                 }});
}

ValueId Tape::mean_all(ValueId a) {
  const double inv = 1.0 / static_cast<double>(val(a).size());
  const ValueId out = alloc(1, 1);
  return finish({out, "mean_all",
                 [this, a, out, inv] {
                   double s = 0.0;
                   for (double x : vals_[a].v) s += x;
                   vals_[out].v[0] = s * inv;
                 },
                 [this, a, out, inv] {
                   for (double& g : grads_[a].v)
                     g += grads_[out].v[0] * inv;
                 }});
}

ValueId Tape::chamfer_loss(ValueId pred, ValueId target) {
  const Tensor &P = val(pred), &Q = val(target);
  require(P.cols == 3 && Q.cols == 3, "chamfer_loss", "clouds must be {n,3}");
  require(P.rows >= 1 && Q.rows >= 1, "chamfer_loss", "clouds must be non-empty");
  // Copy the row counts out now: alloc() may grow the value store and
  // invalidate P and Q.
  const int n_pred = P.rows, n_target = Q.rows;
  const ValueId out = alloc(1, 1);
  // p2q[i] is the target row nearest to pred row i; likewise q2p.
  auto p2q = std::make_shared<std::vector<int>>(n_pred, 0);
  auto q2p = std::make_shared<std::vector<int>>(n_target, 0);
  auto nearest = [](const Tensor& from, int i, const Tensor& to) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int j = 0; j < to.rows; ++j) {
      const double dx = from.at(i, 0) - to.at(j, 0);
      const double dy = from.at(i, 1) - to.at(j, 1);
      const double dz = from.at(i, 2) - to.at(j, 2);
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    return best;
  };
  auto row_dist = [](const Tensor& a, int i, const Tensor& b, int j) {
    const double dx = a.at(i, 0) - b.at(j, 0);
    const double dy = a.at(i, 1) - b.at(j, 1);
    const double dz = a.at(i, 2) - b.at(j, 2);
    return std::sqrt(dx * dx + dy * dy + dz * dz);
  };
  return finish(
      {out, "chamfer_loss",
       [this, pred, target, out, p2q, q2p, nearest, row_dist] {
         const Tensor &P = vals_[pred], &Q = vals_[target];
         double total = 0.0;
         for (int i = 0; i < P.rows; ++i) {
           (*p2q)[static_cast<size_t>(i)] = nearest(P, i, Q);
           total += row_dist(P, i, Q, (*p2q)[static_cast<size_t>(i)]) / P.rows;
         }
         for (int j = 0; j < Q.rows; ++j) {
           (*q2p)[static_cast<size_t>(j)] = nearest(Q, j, P);
           total += row_dist(Q, j, P, (*q2p)[static_cast<size_t>(j)]) / Q.rows;
         }
         vals_[out].v[0] = total;
       },
       [this, pred, target, out, p2q, q2p, row_dist] {
         const Tensor &P = vals_[pred], &Q = vals_[target];
         Tensor &GP = grads_[pred], &GQ = grads_[target];
         const double g = grads_[out].v[0];
         auto push = [&](int pi, int qj, double w) {
           // d = |p - q|; dd/dp = (p - q)/d, dd/dq is its negation.
           const double d = row_dist(P, pi, Q, qj);
           if (d <= 0.0) return;
           for (int k = 0; k < 3; ++k) {
             const double u = (P.at(pi, k) - Q.at(qj, k)) / d * w * g;
             GP.at(pi, k) += u;
             GQ.at(qj, k) -= u;
           }
         };
         for (int i = 0; i < P.rows; ++i)
           push(i, (*p2q)[static_cast<size_t>(i)], 1.0 / P.rows);
         for (int j = 0; j < Q.rows; ++j)
           push((*q2p)[static_cast<size_t>(j)], j, 1.0 / Q.rows);
       }});
}

ValueId Tape::pose_alignment_loss(ValueId pose4, const PlanarPose& ref_pose,
                                  const Tensor& ref_points) {
  const Tensor& P = val(pose4);
  require(P.rows == 1 && P.cols == 4, "pose_alignment_loss",
          "pose output must be {1,4}");
  require(ref_points.cols == 3 && ref_points.rows >= 1, "pose_alignment_loss",
          "reference points must be non-empty {n,3}");
  // Copy the reference cloud before alloc(): the caller may hand us a
  // reference into this tape's value store, which alloc() can invalidate.
  auto pts = std::make_shared<Tensor>(ref_points);
  const ValueId out = alloc(1, 1);
  // Reference points mapped by the inverse reference pose, fixed for the
  // lifetime of the node.
  auto ref_local = std::make_shared<std::vector<double>>();
  {
    const PlanarPose gi = inverse(ref_pose);
    ref_local->reserve(static_cast<size_t>(pts->rows) * 2);
    for (int i = 0; i < pts->rows; ++i) {
      const Vec3 m =
          apply_pose(gi, {pts->at(i, 0), pts->at(i, 1), pts->at(i, 2)});
      ref_local->push_back(m.x);
      ref_local->push_back(m.y);
    }
  }
  auto heading = [](const Tensor& p) {
    const double s = p.at(0, 2), c = p.at(0, 3);
    if (std::hypot(s, c) < 1e-8) {
      throw DegenerateRotation("pose heading pair is numerically zero");
    }
    return std::atan2(s, c);
  };
  return finish(
      {out, "pose_alignment_loss",
       [this, pose4, out, pts, ref_local, heading] {
         const Tensor& P = vals_[pose4];
         const double th = heading(P);
         const double c = std::cos(th), s = std::sin(th);
         const double tx = P.at(0, 0), ty = P.at(0, 1);
         double total = 0.0;
         for (int i = 0; i < pts->rows; ++i) {
           const double vx = pts->at(i, 0) - tx, vy = pts->at(i, 1) - ty;
           const double ax = c * vx + s * vy, ay = -s * vx + c * vy;
           const double dx = ax - (*ref_local)[static_cast<size_t>(i) * 2];
           const double dy = ay - (*ref_local)[static_cast<size_t>(i) * 2 + 1];
           total += dx * dx + dy * dy;
         }
         vals_[out].v[0] = total / pts->rows;
       },
       [this, pose4, out, pts, ref_local, heading] {
         const Tensor& P = vals_[pose4];
         const double th = heading(P);
         const double c = std::cos(th), s = std::sin(th);
         const double tx = P.at(0, 0), ty = P.at(0, 1);
         const double g = grads_[out].v[0] * 2.0 / pts->rows;
         double gtx = 0.0, gty = 0.0, gth = 0.0;
         for (int i = 0; i < pts->rows; ++i) {
           const double vx = pts->at(i, 0) - tx, vy = pts->at(i, 1) - ty;
           const double ax = c * vx + s * vy, ay = -s * vx + c * vy;
           const double dx = ax - (*ref_local)[static_cast<size_t>(i) * 2];
           const double dy = ay - (*ref_local)[static_cast<size_t>(i) * 2 + 1];
           gtx += dx * (-c) + dy * s;
           gty += dx * (-s) + dy * (-c);
           gth += dx * (-s * vx + c * vy) + dy * (-c * vx - s * vy);
         }
         Tensor& G = grads_[pose4];
         G.at(0, 0) += g * gtx;
         G.at(0, 1) += g * gty;
         // theta = atan2(sin-like, cos-like), invariant to the pair's norm.
         const double sl = P.at(0, 2), cl = P.at(0, 3);
         const double n2 = sl * sl + cl * cl;
         G.at(0, 2) += g * gth * cl / n2;
         G.at(0, 3) += g * gth * -sl / n2;
       }});
}

void Tape::backward(ValueId root) {
  const Tensor& r = val(root);
  if (r.rows != 1 || r.cols != 1) {
    throw ShapeMismatch("backward: root must be a {1,1} scalar");
  }
  grads_.clear();
  grads_.reserve(vals_.size());
  for (const Tensor& v : vals_) grads_.emplace_back(v.rows, v.cols);
  grads_[static_cast<size_t>(root)].v[0] = 1.0;
  for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) it->bwd();
}

void Tape::replay() {
  for (const Rec& r : recs_) {
    r.fwd();
    check_finite(r.out, r.op);
  }
}

double numeric_grad(Tape& tape, ValueId loss, ValueId leaf, int index,
                    double h) {
  Tensor& t = tape.mutable_val(leaf);
  const double orig = t.v[static_cast<size_t>(index)];
  t.v[static_cast<size_t>(index)] = orig + h;
  tape.replay();
  const double up = tape.val(loss).v[0];
  tape.mutable_val(leaf).v[static_cast<size_t>(index)] = orig - h;
  tape.replay();
  const double down = tape.val(loss).v[0];
  tape.mutable_val(leaf).v[static_cast<size_t>(index)] = orig;
  tape.replay();
  return (up - down) / (2.0 * h);
}

}  // namespace seqfit::ad
