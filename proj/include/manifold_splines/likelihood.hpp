#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "error.hpp"
#include "fem.hpp"
#include "mesh.hpp"
#include "nelder_mead.hpp"
#include "parallel.hpp"
#include "solver.hpp"

namespace manifold_splines {

/// K = P Sigma P^T + tau^2 I, built column by column from Sigma applied to the rows of P.
inline Eigen::MatrixXd observation_covariance(const FemOperators& ops, const BoundObservations& bound, double tau,
                                              const KernelDeflatedSolver* pinv = nullptr) {
  if (bound.mesh_size() != ops.size()) throw InvalidInput("observations were bound to a different mesh");
  const Eigen::Index n = bound.size();
  if (n > 1000) throw InvalidInput("dense observation covariance is limited to n <= 1000");
  std::optional<KernelDeflatedSolver> own;
  if (!pinv) pinv = &own.emplace(ops.whitened, ops.kernel_vector());
  const SparseMatrix pt = SparseMatrix(bound.projection.transpose());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd col = pt.col(i);
    k.col(i) = bound.projection * apply_sigma(ops, *pinv, col);
  }
  k = 0.5 * (k + k.transpose()).eval();
  k.diagonal().array() += tau * tau;
  return k;
}

struct ConcentratedLikelihood {
  double value = 0.0;        // -n log sigma* - 0.5 log |K|
  double a_star = 0.0;
  double sigma_star = 0.0;
  double log_det = 0.0;
  bool sigma_floored = false;  // sigma* hit the 1e-12 * scale(y) floor
};

namespace detail {

inline Eigen::LLT<Eigen::MatrixXd> factor_covariance(const Eigen::MatrixXd& k) {
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const Eigen::VectorXd d = Eigen::MatrixXd(llt.matrixL()).diagonal();
    ok = d.minCoeff() > 1e-7 * d.maxCoeff();
  }
  if (!ok)
    throw DegenerateError(
        "observation covariance is numerically singular: with tau = 0 the sites must allow interpolation of any "
        "data (distinct sites, enough mesh resolution)");
  return llt;
}

}  // namespace detail

/// Profiles a and sigma out of the Gaussian log-likelihood given a covariance K.
inline ConcentratedLikelihood concentrated_from_covariance(const Eigen::MatrixXd& k, const Eigen::VectorXd& phi,
                                                           const Eigen::VectorXd& y) {
  const Eigen::Index n = y.size();
  if (k.rows() != n || phi.size() != n) throw InvalidInput("covariance, trend and data sizes differ");
  auto llt = detail::factor_covariance(k);
  const Eigen::VectorXd kphi = llt.solve(phi), ky = llt.solve(y);
  const double beta = phi.dot(kphi);
  if (!(beta > 0.0)) throw DegenerateError("trend direction is not identifiable");
  ConcentratedLikelihood out;
  out.a_star = phi.dot(ky) / beta;
  const Eigen::VectorXd r = y - out.a_star * phi;
  const double s2 = r.dot(llt.solve(r)) / static_cast<double>(n);
  const double scale = std::max(y.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  const double floor = 1e-12 * scale;
  out.sigma_star = std::sqrt(std::max(s2, 0.0));
  if (!(out.sigma_star > floor)) {
    out.sigma_star = floor;
    out.sigma_floored = true;
  }
  out.log_det = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  out.value = -static_cast<double>(n) * std::log(out.sigma_star) - 0.5 * out.log_det;
  return out;
}

inline ConcentratedLikelihood concentrated_loglik(const FemOperators& ops, const BoundObservations& bound,
                                                  const Eigen::VectorXd& y, double tau) {
  if (y.size() != bound.size()) throw InvalidInput("observation vector length differs from the binding");
  const Eigen::MatrixXd k = observation_covariance(ops, bound, tau);
  return concentrated_from_covariance(k, bound.projection * ops.phi0, y);
}

/// Full Gaussian log-likelihood of y ~ N(a phi, sigma^2 K).
inline double log_likelihood(const Eigen::MatrixXd& k, const Eigen::VectorXd& phi, const Eigen::VectorXd& y,
                             double a, double sigma) {
  if (!(sigma > 0.0)) return -std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(y.size());
  auto llt = detail::factor_covariance(k);
  const Eigen::VectorXd r = y - a * phi;
  const double log_det = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * (n * std::log(2.0 * std::numbers::pi) + log_det + 2.0 * n * std::log(sigma) +
                 r.dot(llt.solve(r)) / (sigma * sigma));
}

struct FitOptions {
  bool estimate_tau = false;
  bool lock_isotropic = false;  // keep log_ratio = 0 (angle is then irrelevant)
  double max_abs_log_ratio = 6.0;
  NelderMeadOptions nelder_mead;
};

struct FitEvaluation {
  AnisotropyParams beta;
  double tau = 0.0;
  double objective = 0.0;
  double best_so_far = 0.0;
  int start = 0;
};

struct FitResult {
  AnisotropyParams beta_hat;
  double sigma_hat = 0.0;
  double a_hat = 0.0;
  double tau_hat = 0.0;
  double concentrated_loglik = 0.0;
  double loglik = 0.0;  // full log-likelihood at (a_hat, sigma_hat, beta_hat, tau_hat)
  bool sigma_floored = false;
  std::vector<FitEvaluation> trace;
  std::vector<std::string> start_diagnostics;
};

/// Starting points (angle, log_ratio) of the multistart search.
inline std::vector<Eigen::Vector2d> fit_starts() {
  const double pi = std::numbers::pi;
  return {{0.0, 0.0}, {0.0, 1.0}, {pi / 2, 1.0}, {pi / 4, 1.0}, {-pi / 4, 1.0}};
}

/// Maximizes the concentrated log-likelihood over the anisotropy (and optionally log tau).
inline FitResult fit(const TriangleMesh& mesh, const ObservationSet& obs, const FitOptions& opt = {}) {
  const BoundObservations bound = bind_observations(mesh, obs);
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(obs.values.data(), obs.values.size());
  if (y.size() < 3) throw InvalidInput("fitting needs at least three observations");
  if (opt.estimate_tau && bound.scenario != Scenario::kSmoothing)
    throw InvalidInput("tau can only be estimated with tau > 0 (smoothing)");
  if (!opt.lock_isotropic && !mesh.has_chart()) throw InvalidInput("anisotropic fit requires chart coordinates");

  struct Point {
    AnisotropyParams beta;
    double tau;
  };
  auto decode = [&](const Eigen::VectorXd& x) {
    Point p{{0.0, 0.0}, bound.tau};
    Eigen::Index k = 0;
    if (!opt.lock_isotropic) {
      p.beta = {x[0], x[1]};
      k = 2;
    }
    if (opt.estimate_tau) p.tau = std::exp(x[k]);
    return p;
  };
  auto objective = [&](const Eigen::VectorXd& x) {
    const Point p = decode(x);
    if (!std::isfinite(p.beta.angle) || !(std::abs(p.beta.log_ratio) <= opt.max_abs_log_ratio) ||
        !(p.tau >= 0.0) || !std::isfinite(p.tau))
      return -std::numeric_limits<double>::infinity();
    try {
      const FemOperators ops = assemble(mesh, p.beta);
      return concentrated_loglik(ops, bound, y, p.tau).value;
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  std::vector<Eigen::VectorXd> starts;
  const double log_tau0 = opt.estimate_tau ? std::log(bound.tau) : 0.0;
  if (opt.lock_isotropic) {
    if (opt.estimate_tau) starts.push_back(Eigen::VectorXd::Constant(1, log_tau0));
  } else {
    for (const auto& s : fit_starts()) {
      Eigen::VectorXd x(opt.estimate_tau ? 3 : 2);
      x.head<2>() = s;
      if (opt.estimate_tau) x[2] = log_tau0;
      starts.push_back(x);
    }
  }

  FitResult result;
  Point best_point{{0.0, 0.0}, bound.tau};
  double best_value = -std::numeric_limits<double>::infinity();
  if (starts.empty()) {
    best_value = objective(Eigen::VectorXd());
    result.trace.push_back({best_point.beta, best_point.tau, best_value, best_value, 0});
  } else {
    std::vector<NelderMeadResult> runs(starts.size());
    parallel_for(starts.size(), [&](std::size_t s) { runs[s] = nelder_mead_maximize(objective, starts[s], opt.nelder_mead); });
    double running = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < runs.size(); ++s) {
      for (const auto& e : runs[s].trace) {
        running = std::max(running, e.value);
        const Point p = decode(e.x);
        result.trace.push_back({p.beta, p.tau, e.value, running, static_cast<int>(s)});
      }
      if (!std::isfinite(runs[s].value)) {
        result.start_diagnostics.push_back("start " + std::to_string(s) + ": no feasible evaluation");
        continue;
      }
      result.start_diagnostics.push_back("start " + std::to_string(s) + ": objective " +
                                         std::to_string(runs[s].value) + " after " +
                                         std::to_string(runs[s].evaluations) + " evaluations" +
                                         (runs[s].converged ? "" : " (evaluation cap)"));
      if (runs[s].value > best_value) {
        best_value = runs[s].value;
        best_point = decode(runs[s].x);
      }
    }
  }
  if (!std::isfinite(best_value)) {
    std::string msg = "likelihood fit failed at every start";
    for (const auto& d : result.start_diagnostics) msg += "; " + d;
    throw Error(msg);
  }

  result.beta_hat = best_point.beta.oriented();
  result.tau_hat = best_point.tau;
  const FemOperators ops = assemble(mesh, result.beta_hat);
  const KernelDeflatedSolver pinv(ops.whitened, ops.kernel_vector());
  const Eigen::MatrixXd k = observation_covariance(ops, bound, result.tau_hat, &pinv);
  const Eigen::VectorXd phi = bound.projection * ops.phi0;
  const ConcentratedLikelihood c = concentrated_from_covariance(k, phi, y);
  result.a_hat = c.a_star;
  result.sigma_hat = c.sigma_star;
  result.sigma_floored = c.sigma_floored;
  result.concentrated_loglik = c.value;
  result.loglik = log_likelihood(k, phi, y, c.a_star, c.sigma_star);
  return result;
}

inline nlohmann::ordered_json to_json(const FitResult& r) {
  nlohmann::ordered_json j;
  j["angle"] = r.beta_hat.angle;
  j["log_ratio"] = r.beta_hat.log_ratio;
  j["sigma"] = r.sigma_hat;
  j["a"] = r.a_hat;
  j["tau"] = r.tau_hat;
  j["concentrated_loglik"] = r.concentrated_loglik;
  j["loglik"] = r.loglik;
  j["sigma_floored"] = r.sigma_floored;
  j["starts"] = r.start_diagnostics;
  auto& trace = j["trace"] = nlohmann::ordered_json::array();
  auto number = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(); };
  for (const auto& e : r.trace) {
    nlohmann::ordered_json row;
    row["start"] = e.start;
    row["angle"] = e.beta.angle;
    row["log_ratio"] = e.beta.log_ratio;
    row["tau"] = e.tau;
    row["objective"] = number(e.objective);
    row["best_so_far"] = number(e.best_so_far);
    trace.push_back(std::move(row));
  }
  return j;
}

}  // namespace manifold_splines
