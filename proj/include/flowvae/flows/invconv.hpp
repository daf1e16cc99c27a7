#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "flowvae/flows/flow_base.hpp"

namespace flowvae {

/// Factors A = P · L · U with partial pivoting; (P·M)[i, :] = M[perm[i], :],
/// L unit-lower-triangular. L and U are packed into one row-major matrix.
template <class T>
struct PluFactors {
  std::vector<int> perm;
  std::vector<T> lu;
};

template <class T>
PluFactors<T> plu_decompose(std::vector<T> a, int c) {
  std::vector<int> rows(c);
  for (int i = 0; i < c; ++i) rows[i] = i;
  for (int k = 0; k < c; ++k) {
    int piv = k;
    for (int i = k + 1; i < c; ++i)
      if (std::abs(a[i * c + k]) > std::abs(a[piv * c + k])) piv = i;
    if (a[piv * c + k] == T(0)) throw NumericError("plu_decompose: singular matrix");
    if (piv != k) {
      for (int j = 0; j < c; ++j) std::swap(a[k * c + j], a[piv * c + j]);
      std::swap(rows[k], rows[piv]);
    }
    for (int i = k + 1; i < c; ++i) {
      const T f = a[i * c + k] / a[k * c + k];
      a[i * c + k] = f;
      for (int j = k + 1; j < c; ++j) a[i * c + j] -= f * a[k * c + j];
    }
  }
  // Row i of the factored matrix is row rows[i] of the original.
  std::vector<int> perm(c);
  for (int i = 0; i < c; ++i) perm[rows[i]] = i;
  return {perm, a};
}

/// Invertible channel mixing y = W x per position, W held in PLU form so
/// log|det W| = Σ log_diag and inversion is two triangular solves.
template <class T>
class InvConv {
 public:
  enum class Init { Identity, RandomOrthogonal };

  InvConv(ParamRegistry<T>& reg, const std::string& prefix, int channels, Init init, Rng& rng)
      : c_(channels) {
    std::vector<int> perm(c_);
    std::vector<T> lower(c_ * c_, T(0)), upper(c_ * c_, T(0)), log_diag(c_, T(0)), sign(c_, T(1));
    for (int i = 0; i < c_; ++i) perm[i] = i;
    if (init == Init::RandomOrthogonal && c_ > 1) {
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic> gauss(c_, c_);
      for (int i = 0; i < c_; ++i)
        for (int j = 0; j < c_; ++j) gauss(i, j) = rng.normal();
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
      Eigen::MatrixXd q = qr.householderQ();
      std::vector<double> a(c_ * c_);
      for (int i = 0; i < c_; ++i)
        for (int j = 0; j < c_; ++j) a[i * c_ + j] = q(i, j);
      PluFactors<double> f = plu_decompose(a, c_);
      perm = f.perm;
      for (int i = 0; i < c_; ++i)
        for (int j = 0; j < c_; ++j) {
          const double v = f.lu[i * c_ + j];
          if (j < i) lower[i * c_ + j] = static_cast<T>(v);
          if (j > i) upper[i * c_ + j] = static_cast<T>(v);
          if (j == i) {
            sign[i] = v < 0 ? T(-1) : T(1);
            log_diag[i] = static_cast<T>(std::log(std::abs(v)));
          }
        }
    }
    lower_ = reg.add(prefix + ".lower", Tensor<T>(Shape{c_, c_}, lower));
    upper_ = reg.add(prefix + ".upper", Tensor<T>(Shape{c_, c_}, upper));
    log_diag_ = reg.add(prefix + ".log_diag", Tensor<T>(Shape{c_}, log_diag));
    std::vector<T> permf(perm.begin(), perm.end());
    perm_ = reg.add(prefix + ".perm", Tensor<T>(Shape{c_}, permf), false);
    sign_ = reg.add(prefix + ".sign", Tensor<T>(Shape{c_}, sign), false);
  }

  int channels() const { return c_; }
  Param<T>& lower() { return *lower_; }
  Param<T>& upper() { return *upper_; }
  Param<T>& log_diag() { return *log_diag_; }

  std::vector<int> perm() const {
    std::vector<int> p(c_);
    for (int i = 0; i < c_; ++i) p[i] = static_cast<int>(std::lround(perm_->value[i]));
    return p;
  }
  std::vector<T> sign() const { return {sign_->value.values().begin(), sign_->value.values().end()}; }

  /// Dense W, multiplied out (for tests and oracles).
  Tensor<T> weight() const {
    Graph<T> g(false);
    return ops::plu_weight(g.constant(lower_->value), g.constant(upper_->value), g.constant(log_diag_->value),
                           perm(), sign())
        .value();
  }

  /// W^{-1} = U^{-1} L^{-1} P^T from the factors.
  Tensor<T> inverse_weight() const {
    using Mat = Eigen::MatrixXd;
    Mat L = Mat::Identity(c_, c_), U = Mat::Zero(c_, c_), Pt = Mat::Zero(c_, c_);
    const std::vector<int> p = perm();
    const std::vector<T> s = sign();  // factors are formed in double, then rounded once
    for (int i = 0; i < c_; ++i) {
      for (int j = 0; j < c_; ++j) {
        if (j < i) L(i, j) = lower_->value[i * c_ + j];
        if (j > i) U(i, j) = upper_->value[i * c_ + j];
      }
      U(i, i) = s[i] * std::exp(static_cast<double>(log_diag_->value[i]));
      Pt(p[i], i) = 1.0;  // (P M)[i] = M[p[i]]  =>  P(i, p[i]) = 1.
    }
    Mat linv = L.template triangularView<Eigen::UnitLower>().solve(Mat::Identity(c_, c_));
    Mat inv = U.template triangularView<Eigen::Upper>().solve(linv * Pt);
    Tensor<T> out(Shape{c_, c_});
    for (int i = 0; i < c_; ++i)
      for (int j = 0; j < c_; ++j) out[i * c_ + j] = static_cast<T>(inv(i, j));
    return out;
  }

  FlowResult<T> apply(Graph<T>& g, Var<T> x, Direction dir) {
    if (x.dim(-1) != c_) throw ConfigError("invconv: channel mismatch " + shape_str(x.shape()));
    const int n = x.dim(0);
    const T positions = static_cast<T>(x.value().row_size() / c_);
    Var<T> ld = ops::scale(ops::expand_rows(ops::sum_all(g.param(*log_diag_)), n), positions);
    if (dir == Direction::Forward) {
      Var<T> w = ops::plu_weight(g.param(*lower_), g.param(*upper_), g.param(*log_diag_), perm(), sign());
      return {ops::channel_matmul(x, w), ld};
    }
    return {ops::channel_matmul(x, g.constant(inverse_weight())), ops::scale(ld, T(-1))};
  }

 private:
  int c_;
  Param<T>* lower_;
  Param<T>* upper_;
  Param<T>* log_diag_;
  Param<T>* perm_;
  Param<T>* sign_;
};

}  // namespace flowvae
