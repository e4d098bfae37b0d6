#pragma once

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace haec::ad {

using Mat = Eigen::MatrixXd;

struct Var {
  int id = -1;
};

// Reverse-mode tape over dense matrices. Values are computed eagerly; backward()
// walks the nodes in reverse creation order.
class Tape {
 public:
  Var constant(Mat value);
  Var param(Mat value);  // leaf whose gradient is kept

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  // Zero matrix of the right shape when no gradient reached v.
  Mat grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // v must be 1x1.
  void backward(Var v);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);          // elementwise
  Var add_row(Var a, Var row);    // row (1 x n) broadcast over a's rows
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var gelu(Var a);                // exact (erf) form
  Var sigmoid(Var a);
  Var relu(Var a);
  Var abs(Var a);
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var gather_rows(Var a, std::span<const int> idx);
  Var segment_sum(Var a, std::span<const int> seg, int n_segments);
  Var scale_rows(Var a, Var w);   // w is rows x 1
  Var segment_softmax(Var a, std::span<const int> seg, int n_segments);  // per column
  Var softmax_rows(Var a);
  Var normalize_rows(Var a);
  Var row_dot(Var a, Var b);      // rows x 1
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, int start, int count);
  // w_ij = p_ij m_ij / sum_k p_ik m_ik with a constant 0/1 mask.
  Var masked_renorm(Var p, const Mat& mask);
  Var sum(Var a);
  Var mean(Var a);
  // Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps].
  Var bce_mean(Var p, const Mat& labels, double eps = 1e-12);
  // sum_i w_i * bce_i; the caller normalizes the weights.
  Var bce_weighted(Var p, const Mat& labels, const Mat& weights, double eps = 1e-12);
  // Same loss taken on logits z, with p = sigmoid(z).
  Var bce_logits_weighted(Var z, const Mat& labels, const Mat& weights);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> back;
  };
  Var push(Mat value, std::initializer_list<Var> parents);
  void acc(Var v, const Mat& g);
  Mat& g(Var v) { return nodes_[v.id].grad; }
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  std::vector<Node> nodes_;
};

}  // namespace haec::ad
