#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flowvae/dataset.hpp"
#include "flowvae/model.hpp"

namespace flowvae {

enum class Representation { Z, Upsilon, Raw };

inline std::string to_string(Representation r) {
  switch (r) {
    case Representation::Z: return "z";
    case Representation::Upsilon: return "upsilon";
    case Representation::Raw: return "raw";
  }
  return "?";
}

inline Representation parse_representation(const std::string& s) {
  if (s == "z") return Representation::Z;
  if (s == "upsilon") return Representation::Upsilon;
  if (s == "raw") return Representation::Raw;
  throw ConfigError("representation must be z, upsilon or raw, got " + s);
}

struct Features {
  Eigen::MatrixXd x;  // one row per image
  std::vector<int> labels;
};

/// Per-image features: the posterior-mean code z, the flow latent υ, or raw
/// pixels / 2^bits. Images enter the model at bin centres (y + ½)/2^bits.
template <class T>
Features extract_features(Model<T>& model, const Dataset& d, Representation which, int batch_size = 256) {
  if (!d.labeled()) throw ConfigError("probe needs a labelled dataset");
  check_dataset(d, model.config());
  const int dim = which == Representation::Z ? model.latent_dim() : model.dims();
  Features f{Eigen::MatrixXd(d.size(), dim), d.labels};
  const double scale = std::ldexp(1.0, d.bits);
  for (int begin = 0; begin < d.size(); begin += batch_size) {
    const int n = std::min(batch_size, d.size() - begin);
    Tensor<T> x(model.image_shape(n));
    for (int i = 0; i < n; ++i) {
      auto px = d.image(begin + i);
      for (std::size_t j = 0; j < px.size(); ++j) x[i * px.size() + j] = static_cast<T>((px[j] + 0.5) / scale);
    }
    if (which == Representation::Raw) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < dim; ++j) f.x(begin + i, j) = d.image(begin + i)[j] / scale;
      continue;
    }
    LatentPair<T> pair = model.decouple(x);
    const Tensor<T>& src = which == Representation::Z ? pair.z : pair.upsilon;
    if (!src.all_finite()) throw NumericError("non-finite features");
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < dim; ++j) f.x(begin + i, j) = src[static_cast<std::size_t>(i) * dim + j];
  }
  return f;
}

struct ProbeOptions {
  double l2 = 1e-3;
  int epochs = 500;
};

/// Multinomial logistic regression on standardized features.
struct LinearProbe {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd inv_sd;
  Eigen::MatrixXd weight;  // [d, K]
  Eigen::RowVectorXd bias;
  std::vector<double> loss_history;  // full-batch objective before each epoch, then final

  Eigen::MatrixXd standardize(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean).array().rowwise() * inv_sd.array();
  }

  std::vector<int> predict(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd logits = (standardize(x) * weight).rowwise() + bias;
    std::vector<int> out(x.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) logits.row(i).maxCoeff(&out[i]);
    return out;
  }
};

namespace detail {

// Mean cross-entropy plus ½·l2·|W|², and its gradient.
inline double probe_objective(const Eigen::MatrixXd& xs, const Eigen::MatrixXd& onehot, const Eigen::MatrixXd& w,
                              const Eigen::RowVectorXd& b, double l2, Eigen::MatrixXd* gw, Eigen::RowVectorXd* gb) {
  const double n = static_cast<double>(xs.rows());
  Eigen::MatrixXd logits = (xs * w).rowwise() + b;
  Eigen::VectorXd row_max = logits.rowwise().maxCoeff();
  Eigen::MatrixXd p = (logits.colwise() - row_max).array().exp();
  Eigen::VectorXd z = p.rowwise().sum();
  double loss = 0;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    loss += row_max(i) + std::log(z(i)) - (logits.row(i).array() * onehot.row(i).array()).sum();
    p.row(i) /= z(i);
  }
  loss = loss / n + 0.5 * l2 * w.squaredNorm();
  if (gw) {
    Eigen::MatrixXd diff = (p - onehot) / n;
    *gw = xs.transpose() * diff + l2 * w;
    *gb = diff.colwise().sum();
  }
  return loss;
}

}  // namespace detail

/// Full-batch gradient descent from zero weights with step 1/L, where
/// L = ½·λmax([Xs 1]ᵀ[Xs 1]/n) + l2 bounds the objective's curvature, so
/// the objective never increases.
inline LinearProbe train_linear_probe(const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                      const ProbeOptions& opt = {}) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size()) || x.rows() == 0) throw ConfigError("probe: bad inputs");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  if (*std::min_element(labels.begin(), labels.end()) < 0) throw ConfigError("probe: negative label");
  if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels.front(); }))
    throw ConfigError("probe needs at least two classes");

  LinearProbe probe;
  const double n = static_cast<double>(x.rows());
  probe.mean = x.colwise().mean();
  Eigen::RowVectorXd var = (x.rowwise() - probe.mean).array().square().colwise().sum() / n;
  probe.inv_sd = var.unaryExpr([](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 0.0; });
  const Eigen::MatrixXd xs = probe.standardize(x);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(x.rows(), k);
  for (Eigen::Index i = 0; i < x.rows(); ++i) onehot(i, labels[i]) = 1;

  Eigen::MatrixXd aug(x.rows(), x.cols() + 1);
  aug << xs, Eigen::VectorXd::Ones(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(aug.transpose() * aug / n, Eigen::EigenvaluesOnly);
  const double step = 1.0 / (0.5 * eig.eigenvalues().maxCoeff() + opt.l2);

  probe.weight = Eigen::MatrixXd::Zero(x.cols(), k);
  probe.bias = Eigen::RowVectorXd::Zero(k);
  Eigen::MatrixXd gw;
  Eigen::RowVectorXd gb;
  for (int e = 0; e < opt.epochs; ++e) {
    probe.loss_history.push_back(detail::probe_objective(xs, onehot, probe.weight, probe.bias, opt.l2, &gw, &gb));
    probe.weight -= step * gw;
    probe.bias -= step * gb;
  }
  probe.loss_history.push_back(detail::probe_objective(xs, onehot, probe.weight, probe.bias, opt.l2, nullptr, nullptr));
  return probe;
}

struct ProbeReport {
  std::string representation;
  double train_accuracy = 0;
  double test_accuracy = 0;
  std::vector<double> per_class_accuracy;  // on the test split
  int n_train = 0;
  int n_test = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(6) << "representation,split,class,accuracy,n\n";
    os << representation << ",train,all," << train_accuracy << ',' << n_train << '\n';
    os << representation << ",test,all," << test_accuracy << ',' << n_test << '\n';
    for (std::size_t c = 0; c < per_class_accuracy.size(); ++c)
      os << representation << ",test," << c << ',' << per_class_accuracy[c] << ",\n";
    return os.str();
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "linear probe on " << representation << '\n'
       << "  train accuracy " << 100 * train_accuracy << "% (n=" << n_train << ")\n"
       << "  test accuracy  " << 100 * test_accuracy << "% (n=" << n_test << ")\n";
    for (std::size_t c = 0; c < per_class_accuracy.size(); ++c)
      os << "  class " << c << "        " << 100 * per_class_accuracy[c] << "%\n";
    return os.str();
  }
};

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  int hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / pred.size();
}

/// Fits on `train` and scores both splits.
inline ProbeReport run_probe(const std::string& name, const Features& train, const Features& test,
                             const ProbeOptions& opt = {}) {
  LinearProbe probe = train_linear_probe(train.x, train.labels, opt);
  ProbeReport r;
  r.representation = name;
  r.n_train = static_cast<int>(train.labels.size());
  r.n_test = static_cast<int>(test.labels.size());
  r.train_accuracy = accuracy(probe.predict(train.x), train.labels);
  const auto pred = probe.predict(test.x);
  r.test_accuracy = accuracy(pred, test.labels);
  const int k = static_cast<int>(probe.weight.cols());
  std::vector<int> hit(k, 0), count(k, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (test.labels[i] >= k) continue;
    ++count[test.labels[i]];
    hit[test.labels[i]] += pred[i] == test.labels[i];
  }
  for (int c = 0; c < k; ++c) r.per_class_accuracy.push_back(count[c] ? static_cast<double>(hit[c]) / count[c] : 0.0);
  return r;
}

}  // namespace flowvae
