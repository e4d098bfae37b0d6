#include "haec/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "haec/error.hpp"

namespace haec::ad {

namespace {
void same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ArgumentError(std::string("shape mismatch in ") + op);
}
}  // namespace

Var Tape::push(Mat value, std::initializer_list<Var> parents) {
  Node n;
  n.value = std::move(value);
  for (auto p : parents) n.needs_grad |= nodes_[p.id].needs_grad;
  nodes_.push_back(std::move(n));
  return Var{int(nodes_.size()) - 1};
}

Var Tape::constant(Mat value) { return push(std::move(value), {}); }

Var Tape::param(Mat value) {
  Var v = push(std::move(value), {});
  nodes_[v.id].needs_grad = true;
  return v;
}

Mat Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::acc(Var v, const Mat& gr) {
  auto& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) n.grad = gr;
  else n.grad += gr;
}

void Tape::backward(Var v) {
  if (value(v).size() != 1) throw ArgumentError("backward needs a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[v.id].grad = Mat::Ones(1, 1);
  for (int i = v.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.back && n.needs_grad && n.grad.size() != 0) n.back();
  }
}

Var Tape::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) throw ArgumentError("shape mismatch in matmul");
  Var out = push(value(a) * value(b), {a, b});
  if (needs(out))
    nodes_[out.id].back = [this, a, b, out] {
      acc(a, g(out) * value(b).transpose());
      acc(b, value(a).transpose() * g(out));
    };
  return out;
}

Var Tape::add(Var a, Var b) {
  same_shape(value(a), value(b), "add");
  Var out = push(value(a) + value(b), {a, b});
  if (needs(out))
    nodes_[out.id].back = [this, a, b, out] {
      acc(a, g(out));
      acc(b, g(out));
    };
  return out;
}

Var Tape::sub(Var a, Var b) {
  same_shape(value(a), value(b), "sub");
  Var out = push(value(a) - value(b), {a, b});
  if (needs(out))
    nodes_[out.id].back = [this, a, b, out] {
      acc(a, g(out));
      acc(b, -g(out));
    };
  return out;
}

Var Tape::mul(Var a, Var b) {
  same_shape(value(a), value(b), "mul");
  Var out = push(value(a).cwiseProduct(value(b)), {a, b});
  if (needs(out))
    nodes_[out.id].back = [this, a, b, out] {
      acc(a, g(out).cwiseProduct(value(b)));
      acc(b, g(out).cwiseProduct(value(a)));
    };
  return out;
}

Var Tape::add_row(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) throw ArgumentError("shape mismatch in add_row");
  Mat v = value(a);
  v.rowwise() += value(row).row(0);
  Var out = push(std::move(v), {a, row});
  if (needs(out))
    nodes_[out.id].back = [this, a, row, out] {
      acc(a, g(out));
      acc(row, g(out).colwise().sum());
    };
  return out;
}

Var Tape::scale(Var a, double s) {
  Var out = push(value(a) * s, {a});
  if (needs(out)) nodes_[out.id].back = [this, a, s, out] { acc(a, g(out) * s); };
  return out;
}

Var Tape::add_scalar(Var a, double s) {
  Var out = push(value(a).array() + s, {a});
  if (needs(out)) nodes_[out.id].back = [this, a, out] { acc(a, g(out)); };
  return out;
}

Var Tape::gelu(Var a) {
  const Mat& x = value(a);
  Var out = push(x.unaryExpr([](double t) { return 0.5 * t * (1.0 + std::erf(t / std::sqrt(2.0))); }), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out] {
      const Mat d = value(a).unaryExpr([](double t) {
        return 0.5 * (1.0 + std::erf(t / std::sqrt(2.0))) + t * std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI);
      });
      acc(a, g(out).cwiseProduct(d));
    };
  return out;
}

Var Tape::sigmoid(Var a) {
  Var out = push(value(a).unaryExpr([](double t) {
    return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  }),
                 {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out] {
      const Mat& s = value(out);
      acc(a, g(out).cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
    };
  return out;
}

Var Tape::relu(Var a) {
  Var out = push(value(a).cwiseMax(0.0), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out] {
      acc(a, g(out).cwiseProduct(value(a).unaryExpr([](double t) { return t > 0 ? 1.0 : 0.0; })));
    };
  return out;
}

Var Tape::abs(Var a) {
  Var out = push(value(a).cwiseAbs(), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out] {
      acc(a, g(out).cwiseProduct(value(a).unaryExpr([](double t) { return double((t > 0) - (t < 0)); })));
    };
  return out;
}

Var Tape::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Mat& v = value(x);
  const Eigen::Index D = v.cols();
  if (value(gamma).rows() != 1 || value(gamma).cols() != D || value(beta).rows() != 1 || value(beta).cols() != D)
    throw ArgumentError("shape mismatch in layer_norm_rows");
  Mat xh(v.rows(), D);
  Eigen::VectorXd inv(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mu = v.row(i).mean();
    const double var = (v.row(i).array() - mu).square().mean();
    inv(i) = 1.0 / std::sqrt(var + eps);
    xh.row(i) = (v.row(i).array() - mu) * inv(i);
  }
  Mat y = xh.array().rowwise() * value(gamma).row(0).array();
  y.rowwise() += value(beta).row(0);
  Var out = push(std::move(y), {x, gamma, beta});
  if (needs(out))
    nodes_[out.id].back = [this, x, gamma, beta, out, xh, inv] {
      const Mat& dy = g(out);
      const Eigen::Index D = xh.cols();
      acc(gamma, dy.cwiseProduct(xh).colwise().sum());
      acc(beta, dy.colwise().sum());
      if (!needs(x)) return;
      const Mat dxh = dy.array().rowwise() * value(gamma).row(0).array();
      Mat dx(xh.rows(), D);
      for (Eigen::Index i = 0; i < xh.rows(); ++i) {
        const double s1 = dxh.row(i).sum();
        const double s2 = dxh.row(i).dot(xh.row(i));
        dx.row(i) = (inv(i) / double(D)) * (double(D) * dxh.row(i).array() - s1 - xh.row(i).array() * s2);
      }
      acc(x, dx);
    };
  return out;
}

Var Tape::gather_rows(Var a, std::span<const int> idx) {
  const Mat& v = value(a);
  Mat y(idx.size(), v.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= v.rows()) throw ArgumentError("gather index out of range");
    y.row(k) = v.row(idx[k]);
  }
  Var out = push(std::move(y), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out, idx = std::vector<int>(idx.begin(), idx.end())] {
      Mat da = Mat::Zero(value(a).rows(), value(a).cols());
      const Mat& dy = g(out);
      for (std::size_t k = 0; k < idx.size(); ++k) da.row(idx[k]) += dy.row(k);
      acc(a, da);
    };
  return out;
}

Var Tape::segment_sum(Var a, std::span<const int> seg, int n_segments) {
  const Mat& v = value(a);
  if (std::size_t(v.rows()) != seg.size()) throw ArgumentError("shape mismatch in segment_sum");
  Mat y = Mat::Zero(n_segments, v.cols());
  for (std::size_t k = 0; k < seg.size(); ++k) y.row(seg[k]) += v.row(k);
  Var out = push(std::move(y), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out, seg = std::vector<int>(seg.begin(), seg.end())] {
      const Mat& dy = g(out);
      Mat da(seg.size(), dy.cols());
      for (std::size_t k = 0; k < seg.size(); ++k) da.row(k) = dy.row(seg[k]);
      acc(a, da);
    };
  return out;
}

Var Tape::scale_rows(Var a, Var w) {
  if (value(w).cols() != 1 || value(w).rows() != value(a).rows()) throw ArgumentError("shape mismatch in scale_rows");
  Mat y = value(a).array().colwise() * value(w).col(0).array();
  Var out = push(std::move(y), {a, w});
  if (needs(out))
    nodes_[out.id].back = [this, a, w, out] {
      const Mat& dy = g(out);
      acc(a, Mat(dy.array().colwise() * value(w).col(0).array()));
      acc(w, dy.cwiseProduct(value(a)).rowwise().sum());
    };
  return out;
}

Var Tape::segment_softmax(Var a, std::span<const int> seg, int n_segments) {
  const Mat& v = value(a);
  if (std::size_t(v.rows()) != seg.size()) throw ArgumentError("shape mismatch in segment_softmax");
  Mat mx = Mat::Constant(n_segments, v.cols(), -INFINITY);
  for (std::size_t k = 0; k < seg.size(); ++k) mx.row(seg[k]) = mx.row(seg[k]).cwiseMax(v.row(k));
  Mat y(v.rows(), v.cols());
  Mat z = Mat::Zero(n_segments, v.cols());
  for (std::size_t k = 0; k < seg.size(); ++k) {
    y.row(k) = (v.row(k) - mx.row(seg[k])).array().exp();
    z.row(seg[k]) += y.row(k);
  }
  for (std::size_t k = 0; k < seg.size(); ++k) y.row(k).array() /= z.row(seg[k]).array();
  Var out = push(std::move(y), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out, n_segments, seg = std::vector<int>(seg.begin(), seg.end())] {
      const Mat& y = value(out);
      const Mat& dy = g(out);
      Mat dot = Mat::Zero(n_segments, y.cols());
      for (std::size_t k = 0; k < seg.size(); ++k) dot.row(seg[k]) += dy.row(k).cwiseProduct(y.row(k));
      Mat da(y.rows(), y.cols());
      for (std::size_t k = 0; k < seg.size(); ++k) da.row(k) = y.row(k).cwiseProduct(dy.row(k) - dot.row(seg[k]));
      acc(a, da);
    };
  return out;
}

Var Tape::softmax_rows(Var a) {
  const Mat& v = value(a);
  Mat y(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    y.row(i) = (v.row(i).array() - v.row(i).maxCoeff()).exp();
    y.row(i) /= y.row(i).sum();
  }
  Var out = push(std::move(y), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out] {
      const Mat& y = value(out);
      const Mat& dy = g(out);
      const Eigen::VectorXd dot = dy.cwiseProduct(y).rowwise().sum();
      acc(a, Mat(y.array() * (dy.colwise() - dot).array()));
    };
  return out;
}

Var Tape::normalize_rows(Var a) {
  const Mat& v = value(a);
  Eigen::VectorXd norm = v.rowwise().norm().cwiseMax(1e-12);
  Mat y = v.array().colwise() / norm.array();
  Var out = push(std::move(y), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out, norm] {
      const Mat& y = value(out);
      const Mat& dy = g(out);
      const Eigen::VectorXd dot = dy.cwiseProduct(y).rowwise().sum();
      Mat da = dy - Mat(y.array().colwise() * dot.array());
      acc(a, Mat(da.array().colwise() / norm.array()));
    };
  return out;
}

Var Tape::row_dot(Var a, Var b) {
  same_shape(value(a), value(b), "row_dot");
  Var out = push(value(a).cwiseProduct(value(b)).rowwise().sum(), {a, b});
  if (needs(out))
    nodes_[out.id].back = [this, a, b, out] {
      const Eigen::VectorXd d = g(out).col(0);
      acc(a, Mat(value(b).array().colwise() * d.array()));
      acc(b, Mat(value(a).array().colwise() * d.array()));
    };
  return out;
}

Var Tape::concat_cols(Var a, Var b) {
  if (value(a).rows() != value(b).rows()) throw ArgumentError("shape mismatch in concat_cols");
  Mat y(value(a).rows(), value(a).cols() + value(b).cols());
  y << value(a), value(b);
  Var out = push(std::move(y), {a, b});
  if (needs(out))
    nodes_[out.id].back = [this, a, b, out] {
      const auto ca = value(a).cols();
      acc(a, g(out).leftCols(ca));
      acc(b, g(out).rightCols(value(b).cols()));
    };
  return out;
}

Var Tape::slice_cols(Var a, int start, int count) {
  if (start < 0 || count < 0 || start + count > value(a).cols()) throw ArgumentError("slice out of range");
  Var out = push(value(a).middleCols(start, count), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out, start, count] {
      Mat da = Mat::Zero(value(a).rows(), value(a).cols());
      da.middleCols(start, count) = g(out);
      acc(a, da);
    };
  return out;
}

Var Tape::masked_renorm(Var p, const Mat& mask) {
  same_shape(value(p), mask, "masked_renorm");
  const Mat pm = value(p).cwiseProduct(mask);
  const Eigen::VectorXd s = pm.rowwise().sum();
  Mat y = pm.array().colwise() / s.array();
  Var out = push(std::move(y), {p});
  if (needs(out))
    nodes_[out.id].back = [this, p, out, mask, s] {
      const Mat& w = value(out);
      const Mat& dw = g(out);
      const Eigen::VectorXd dot = dw.cwiseProduct(w).rowwise().sum();
      Mat dp = (dw.colwise() - dot).cwiseProduct(mask);
      acc(p, Mat(dp.array().colwise() / s.array()));
    };
  return out;
}

Var Tape::sum(Var a) {
  Var out = push(Mat::Constant(1, 1, value(a).sum()), {a});
  if (needs(out))
    nodes_[out.id].back = [this, a, out] {
      acc(a, Mat::Constant(value(a).rows(), value(a).cols(), g(out)(0, 0)));
    };
  return out;
}

Var Tape::mean(Var a) {
  const double n = double(value(a).size());
  if (n == 0) throw ArgumentError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var Tape::bce_mean(Var p, const Mat& labels, double eps) {
  const double n = double(value(p).size());
  if (n == 0) throw ArgumentError("bce of an empty matrix");
  return bce_weighted(p, labels, Mat::Constant(labels.rows(), labels.cols(), 1.0 / n), eps);
}

Var Tape::bce_weighted(Var p, const Mat& labels, const Mat& weights, double eps) {
  same_shape(value(p), labels, "bce_weighted");
  same_shape(labels, weights, "bce_weighted");
  const Mat& v = value(p);
  if (v.size() == 0) throw ArgumentError("bce of an empty matrix");
  double total = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double q = std::clamp(v(i), eps, 1.0 - eps);
    total -= weights(i) * (labels(i) * std::log(q) + (1.0 - labels(i)) * std::log(1.0 - q));
  }
  Var out = push(Mat::Constant(1, 1, total), {p});
  if (needs(out))
    nodes_[out.id].back = [this, p, out, labels, weights, eps] {
      const Mat& v = value(p);
      Mat dp(v.rows(), v.cols());
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        const double q = v(i);
        dp(i) = (q < eps || q > 1.0 - eps) ? 0.0 : weights(i) * (-labels(i) / q + (1.0 - labels(i)) / (1.0 - q));
      }
      acc(p, Mat(dp * g(out)(0, 0)));
    };
  return out;
}

Var Tape::bce_logits_weighted(Var z, const Mat& labels, const Mat& weights) {
  same_shape(value(z), labels, "bce_logits_weighted");
  same_shape(labels, weights, "bce_logits_weighted");
  const Mat& v = value(z);
  if (v.size() == 0) throw ArgumentError("bce of an empty matrix");
  // softplus(z) - y z, written to stay finite for large |z|.
  double total = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    total += weights(i) * (std::max(v(i), 0.0) - labels(i) * v(i) + std::log1p(std::exp(-std::abs(v(i)))));
  Var out = push(Mat::Constant(1, 1, total), {z});
  if (needs(out))
    nodes_[out.id].back = [this, z, out, labels, weights] {
      const Mat& v = value(z);
      Mat dz(v.rows(), v.cols());
      for (Eigen::Index i = 0; i < v.size(); ++i) dz(i) = weights(i) * (1.0 / (1.0 + std::exp(-v(i))) - labels(i));
      acc(z, Mat(dz * g(out)(0, 0)));
    };
  return out;
}

}  // namespace haec::ad
