#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"

namespace manifold_splines {

/// Truncated K_1 kernel on the unit sphere, one Legendre term per degree:
/// K(s1, s2) = sum_{l=1..K} (2l+1) / (4 pi l^2 (l+1)^2) P_l(s1 . s2).
class SphereKernel {
 public:
  explicit SphereKernel(int truncation = 40) : weights_(truncation) {
    if (truncation < 1 || truncation > 200) throw InvalidInput("truncation must lie in [1, 200]");
    for (int l = 1; l <= truncation; ++l)
      weights_[l - 1] = (2.0 * l + 1.0) / (4.0 * std::numbers::pi * l * l * (l + 1.0) * (l + 1.0));
  }

  int truncation() const { return static_cast<int>(weights_.size()); }
  const std::vector<double>& weights() const { return weights_; }

  /// Kernel as a function of the cosine of the angle between the points.
  double of_cosine(double x) const {
    x = std::clamp(x, -1.0, 1.0);
    double p_prev = 1.0, p = x, sum = weights_[0] * x;
    for (int l = 1; l < truncation(); ++l) {
      const double next = ((2.0 * l + 1.0) * x * p - l * p_prev) / (l + 1.0);
      p_prev = p;
      p = next;
      sum += weights_[l] * p;
    }
    return sum;
  }

  double operator()(const Eigen::Vector3d& s1, const Eigen::Vector3d& s2) const {
    check_unit(s1);
    check_unit(s2);
    return of_cosine(s1.dot(s2));
  }

  static void check_unit(const Eigen::Vector3d& s) {
    if (!(std::abs(s.norm() - 1.0) <= 1e-8)) throw InvalidInput("sphere kernel inputs must be unit vectors");
  }

 private:
  std::vector<double> weights_;
};

inline double kernel_value(const SphereKernel& k, const Eigen::Vector3d& s1, const Eigen::Vector3d& s2) {
  return k(s1, s2);
}

/// Universal kriging with kernel K_1 and constant trend a phi0, phi0 = 1/sqrt(4 pi).
/// Variances and covariances are per unit sigma^2.
class SphereKriging {
 public:
  SphereKriging(SphereKernel kernel, std::vector<Eigen::Vector3d> sites, const Eigen::VectorXd& y, double tau)
      : kernel_(std::move(kernel)), sites_(std::move(sites)) {
    const Eigen::Index n = static_cast<Eigen::Index>(sites_.size());
    if (n == 0 || y.size() != n) throw InvalidInput("need one value per observation site");
    if (!(tau >= 0.0)) throw InvalidInput("tau must be non-negative");
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) k(i, j) = k(j, i) = kernel_(sites_[i], sites_[j]);
    k.diagonal().array() += tau * tau;
    llt_.compute(k);
    bool ok = llt_.info() == Eigen::Success;
    if (ok) {
      const Eigen::VectorXd d = Eigen::MatrixXd(llt_.matrixL()).diagonal();
      ok = d.minCoeff() > 1e-7 * d.maxCoeff();
    }
    if (!ok)
      throw DegenerateError("kernel matrix is singular: with tau = 0 the data must be interpolable by a function");
    const Eigen::VectorXd phi = Eigen::VectorXd::Constant(n, phi0());
    kinv_phi_ = llt_.solve(phi);
    beta_ = phi.dot(kinv_phi_);
    a_ = kinv_phi_.dot(y) / beta_;
    weights_ = llt_.solve(y - a_ * phi);
  }

  static double phi0() { return 1.0 / std::sqrt(4.0 * std::numbers::pi); }

  double trend_coefficient() const { return a_; }

  Eigen::VectorXd cross(const Eigen::Vector3d& s) const {
    Eigen::VectorXd k(static_cast<Eigen::Index>(sites_.size()));
    for (std::size_t i = 0; i < sites_.size(); ++i) k[i] = kernel_(sites_[i], s);
    return k;
  }

  double mean(const Eigen::Vector3d& s) const { return a_ * phi0() + cross(s).dot(weights_); }

  double covariance(const Eigen::Vector3d& s, const Eigen::Vector3d& t) const {
    const Eigen::VectorXd ks = cross(s), kt = cross(t);
    const double bs = phi0() - kinv_phi_.dot(ks), bt = phi0() - kinv_phi_.dot(kt);
    return bs * bt / beta_ + kernel_(s, t) - ks.dot(llt_.solve(kt));
  }

  double variance(const Eigen::Vector3d& s) const { return covariance(s, s); }

 private:
  SphereKernel kernel_;
  std::vector<Eigen::Vector3d> sites_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd kinv_phi_, weights_;
  double beta_ = 0.0, a_ = 0.0;
};

struct SpherePrediction {
  Eigen::VectorXd means, variances;
  double a = 0.0;
};

inline SpherePrediction kriging_predict(const SphereKernel& k, const std::vector<Eigen::Vector3d>& sites,
                                        const Eigen::VectorXd& y, double tau,
                                        const std::vector<Eigen::Vector3d>& targets) {
  const SphereKriging model(k, sites, y, tau);
  SpherePrediction out;
  out.a = model.trend_coefficient();
  out.means.resize(static_cast<Eigen::Index>(targets.size()));
  out.variances.resize(out.means.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    out.means[i] = model.mean(targets[i]);
    out.variances[i] = std::max(model.variance(targets[i]), 0.0);
  }
  return out;
}

inline double conditional_covariance(const SphereKernel& k, const std::vector<Eigen::Vector3d>& sites, double tau,
                                     const Eigen::Vector3d& s, const Eigen::Vector3d& t) {
  return SphereKriging(k, sites, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sites.size())), tau)
      .covariance(s, t);
}

}  // namespace manifold_splines
