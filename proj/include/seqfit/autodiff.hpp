#ifndef SEQFIT_AUTODIFF_HPP
#define SEQFIT_AUTODIFF_HPP

#include <cstddef>
#include <functional>
#include <vector>

#include "seqfit/geometry.hpp"

namespace seqfit::ad {

// Row-major rank-2 tensor. Vectors are represented as {1, k}.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return v.size(); }
};

Tensor from_cloud(const PointCloud& cloud);
PointCloud to_cloud(const Tensor& t);

using ValueId = int;

// Reverse-mode tape. Recording an op computes its value immediately; replay()
// recomputes every recorded op from the current leaf values (used by finite
// difference checks); backward() runs one reverse sweep from a scalar root.
// Every op validates shapes and rejects non-finite outputs.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ValueId input(Tensor t);

  const Tensor& val(ValueId id) const { return vals_[static_cast<size_t>(id)]; }
  Tensor& mutable_val(ValueId id) { return vals_[static_cast<size_t>(id)]; }
  const Tensor& grad(ValueId id) const { return grads_[static_cast<size_t>(id)]; }

  ValueId matmul(ValueId a, ValueId b);
  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId scale(ValueId a, double k);
  ValueId one_minus(ValueId a);
  ValueId add_rowvec(ValueId mat, ValueId row);
  ValueId broadcast_rows(ValueId row, int n);
  ValueId concat_cols(ValueId a, ValueId b);
  ValueId relu(ValueId a);
  ValueId sigmoid(ValueId a);
  ValueId tanh_op(ValueId a);
  ValueId exp_op(ValueId a);
  ValueId square(ValueId a);
  ValueId reshape(ValueId a, int rows, int cols);
  ValueId max_over_rows(ValueId a);
  ValueId sum_all(ValueId a);
  ValueId mean_all(ValueId a);

  // Bidirectional nearest-neighbor distance between {n,3} clouds, each side
  // normalized by its own point count. Matches are fixed at forward time.
  ValueId chamfer_loss(ValueId pred, ValueId target);

  // Mean squared disagreement between the inverse of the predicted pose and
  // the inverse of the reference pose, applied to the reference points.
  // pose4 is {1,4} = (tx, ty, sin-like, cos-like); heading = atan2 of the
  // normalized pair.
  ValueId pose_alignment_loss(ValueId pose4, const PlanarPose& ref_pose,
                              const Tensor& ref_points);

  void backward(ValueId root);
  void replay();
  size_t num_values() const { return vals_.size(); }

 private:
  struct Rec {
    ValueId out;
    const char* op;
    std::function<void()> fwd;
    std::function<void()> bwd;
  };

  ValueId alloc(int rows, int cols);
  void check_finite(ValueId id, const char* op) const;
  ValueId finish(Rec rec);

  std::vector<Tensor> vals_;
  std::vector<Tensor> grads_;
  std::vector<Rec> recs_;
};

// Central difference d(loss)/d(leaf[index]) via tape replay. Restores the
// leaf value (and all downstream values) before returning.
double numeric_grad(Tape& tape, ValueId loss, ValueId leaf, int index,
                    double h = 1e-5);

}  // namespace seqfit::ad

#endif
