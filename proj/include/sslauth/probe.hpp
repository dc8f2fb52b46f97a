#pragma once

// Linear probe: multinomial logistic regression on frozen, standardised features.

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "sslauth/error.hpp"
#include "sslauth/nn/layers.hpp"
#include "sslauth/tensor.hpp"

namespace sslauth {

struct ProbeConfig {
  int iterations = 300;
  double learning_rate = 0.1;
  double l2 = 1e-3;
};

/// Test accuracy of a softmax classifier fit on (train_x, train_y) by full-batch
/// gradient descent.
inline double linear_probe_accuracy(const Tensor& train_x, const std::vector<int>& train_y, const Tensor& test_x,
                                    const std::vector<int>& test_y, int num_classes, const ProbeConfig& cfg = {}) {
  require(train_x.rank() == 2 && test_x.rank() == 2 && train_x.dim(1) == test_x.dim(1), ErrorCode::shape_mismatch,
          "linear probe: feature shapes differ");
  require(train_x.dim(0) == static_cast<int>(train_y.size()) && test_x.dim(0) == static_cast<int>(test_y.size()),
          ErrorCode::shape_mismatch, "linear probe: label count mismatch");
  using Mat = Eigen::MatrixXd;
  const int n = train_x.dim(0), d = train_x.dim(1), m = test_x.dim(0), k = num_classes;
  Mat x = nn::as_matrix(train_x, n, d).cast<double>();
  Mat xt = nn::as_matrix(test_x, m, d).cast<double>();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::RowVectorXd sd = ((x.rowwise() - mean).array().square().colwise().sum() / n).sqrt();
  sd = sd.cwiseMax(1e-6);
  x = (x.rowwise() - mean).array().rowwise() / sd.array();
  xt = (xt.rowwise() - mean).array().rowwise() / sd.array();

  Mat w = Mat::Zero(d, k);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(k);
  Mat onehot = Mat::Zero(n, k);
  for (int i = 0; i < n; ++i) onehot(i, train_y[i]) = 1;
  for (int it = 0; it < cfg.iterations; ++it) {
    Mat logits = (x * w).rowwise() + b;
    for (int i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - mx).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    const Mat g = (logits - onehot) / n;
    w -= cfg.learning_rate * (x.transpose() * g + cfg.l2 * w);
    b -= cfg.learning_rate * g.colwise().sum();
  }
  const Mat scores = (xt * w).rowwise() + b;
  int correct = 0;
  for (int i = 0; i < m; ++i) {
    Eigen::Index arg;
    scores.row(i).maxCoeff(&arg);
    correct += static_cast<int>(arg) == test_y[i];
  }
  return static_cast<double>(correct) / m;
}

}  // namespace sslauth
