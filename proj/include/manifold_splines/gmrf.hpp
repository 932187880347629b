#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <nlohmann/json.hpp>

#include "error.hpp"
#include "fem.hpp"
#include "io.hpp"
#include "likelihood.hpp"
#include "mesh.hpp"
#include "parallel.hpp"
#include "solver.hpp"

namespace manifold_splines {

struct PosteriorOptions {
  std::optional<double> alpha;  // working alpha; default sigma^2 / (lambda_min_pos * lambda_max)
  KernelDeflatedSolver::Method method = KernelDeflatedSolver::Method::kDirect;
  PowerIterationOptions power;
};

/// Posterior of the intrinsic field given observations y at the bound sites.
///
/// Immutable after construction: it owns the pseudo-inverse used for prior
/// sampling, the factor of the conditioning system at the working alpha, and
/// the correction vectors that remove alpha from the mean.
class PosteriorModel {
 public:
  PosteriorModel(FemOperators ops, BoundObservations bound, Eigen::VectorXd y, double sigma,
                 const PosteriorOptions& options = {})
      : ops_(std::move(ops)), bound_(std::move(bound)), y_(std::move(y)), sigma_(sigma) {
    const Eigen::Index m = ops_.size();
    if (bound_.mesh_size() != m) throw InvalidInput("observations were bound to a different mesh");
    if (y_.size() != bound_.size()) throw InvalidInput("observation vector length differs from the binding");
    if (!(sigma_ > 0.0) || !std::isfinite(sigma_)) throw InvalidInput("sigma must be positive");
    if (bound_.scenario == Scenario::kSmoothing && !(bound_.tau > 0.0))
      throw InvalidInput("smoothing requires tau > 0");
    pinv_ = KernelDeflatedSolver(ops_.whitened, ops_.kernel_vector(), options.method);
    bounds_ = estimate_spectral_bounds(ops_.whitened, ops_.kernel_vector(), options.power, &pinv_);
    alpha_ = options.alpha.value_or(bounds_.default_alpha(sigma_));
    if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) throw InvalidInput("alpha must be positive");
    if (!bounds_.admits(sigma_, alpha_))
      warnings_.push_back("sigma/sqrt(alpha) = " + std::to_string(sigma_ / std::sqrt(alpha_)) +
                          " lies outside [" + std::to_string(bounds_.lambda_min_pos) + ", " +
                          std::to_string(bounds_.lambda_max) + "]; conditioning may suffer");
    build_system();
    const Eigen::VectorXd u = ops_.mass_phi0();
    m_phi_ = posterior_mean_alpha(bound_.projection * ops_.phi0);
    c_phi_ = u.dot(m_phi_);
    if (std::abs(c_phi_) <= 1e-12 || std::abs(1.0 - c_phi_) <= 1e-12)
      throw DegenerateError("mean correction singular");
    h_phi_ = (m_phi_ - ops_.phi0 * c_phi_) / (1.0 - c_phi_);
    mean_ = posterior_mean(y_);
  }

  const FemOperators& ops() const { return ops_; }
  const BoundObservations& bound() const { return bound_; }
  const Eigen::VectorXd& y() const { return y_; }
  Scenario scenario() const { return bound_.scenario; }
  double sigma() const { return sigma_; }
  double tau() const { return bound_.tau; }
  double alpha() const { return alpha_; }
  const SpectralBounds& spectral_bounds() const { return bounds_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const KernelDeflatedSolver& pseudo_inverse() const { return pinv_; }

  /// m_post(y) for the model's own observations.
  const Eigen::VectorXd& mean() const { return mean_; }

  /// Coefficient of phi0 in the posterior mean, (M phi0)^T m_post(y).
  double trend_coefficient() const { return ops_.mass_phi0().dot(mean_); }

  /// Posterior mean at finite alpha for observation vector rhs.
  Eigen::VectorXd posterior_mean_alpha(const Eigen::VectorXd& rhs) const {
    if (rhs.size() != bound_.size()) throw InvalidInput("right-hand side length differs from the observations");
    const Eigen::Index m = ops_.size();
    if (bound_.scenario == Scenario::kSmoothing)
      return system_->solve(Eigen::VectorXd(bound_.projection.transpose() * rhs));

    Eigen::VectorXd out = Eigen::VectorXd::Zero(m);
    for (Eigen::Index k = 0; k < rhs.size(); ++k) out[bound_.nodes[k]] = rhs[k];
    if (free_.empty()) return out;
    // [Q~]_{FF} w = -[Q~]_{FI} y, both sides multiplied by sigma^2.
    const Eigen::VectorXd qy = ops_.precision * out;
    const Eigen::VectorXd u = ops_.mass_phi0();
    double uy = 0.0;
    for (Eigen::Index k = 0; k < rhs.size(); ++k) uy += u[bound_.nodes[k]] * rhs[k];
    Eigen::VectorXd b(static_cast<Eigen::Index>(free_.size()));
    for (std::size_t i = 0; i < free_.size(); ++i) b[i] = -qy[free_[i]] - kappa() * u[free_[i]] * uy;
    const Eigen::VectorXd w = system_->solve(b);
    for (std::size_t i = 0; i < free_.size(); ++i) out[free_[i]] = w[i];
    return out;
  }

  /// Exact alpha -> infinity limit m_post(rhs).
  Eigen::VectorXd posterior_mean(const Eigen::VectorXd& rhs) const {
    Eigen::VectorXd ma = posterior_mean_alpha(rhs);
    const double cy = ops_.mass_phi0().dot(ma);
    Eigen::VectorXd out = ma + ((ops_.phi0 - h_phi_) / c_phi_ - ops_.phi0 + h_phi_) * cy;
    pin_observed(out, rhs);
    return out;
  }

  /// z_a = a phi0 + z - phi0 (M phi0)^T z with z ~ N(0, sigma^2 Sigma + alpha phi0 phi0^T).
  Eigen::VectorXd simulate_prior(double a, const Eigen::VectorXd& eps) const {
    Eigen::VectorXd z = sample_precision(ops_, pinv_, sigma_, alpha_, eps);
    z -= ops_.phi0 * ops_.mass_phi0().dot(z);
    z += a * ops_.phi0;
    return z;
  }

  /// One universal-kriging draw from prior noise eps_m (length m) and observation noise eps_n (length n).
  Eigen::VectorXd conditional_draw(const Eigen::VectorXd& eps_m, const Eigen::VectorXd& eps_n) const {
    const Eigen::VectorXd z0 = simulate_prior(0.0, eps_m);
    Eigen::VectorXd data = bound_.projection * z0;
    if (bound_.scenario == Scenario::kSmoothing) data += sigma_ * bound_.tau * eps_n;
    Eigen::VectorXd z = mean_ + posterior_mean(data) - z0;
    pin_observed(z, y_);
    return z;
  }

  /// One simple-kriging draw (trend coefficient held at its estimate).
  Eigen::VectorXd simple_kriging_draw(const Eigen::VectorXd& eps_m, const Eigen::VectorXd& eps_n) const {
    const Eigen::VectorXd u = ops_.mass_phi0();
    const double cy = u.dot(posterior_mean_alpha(y_));
    Eigen::VectorXd z = simulate_prior(0.0, eps_m) + ops_.phi0 * (cy / c_phi_);
    Eigen::VectorXd data = y_ - bound_.projection * z;
    if (bound_.scenario == Scenario::kSmoothing) data -= sigma_ * bound_.tau * eps_n;
    const Eigen::VectorXd ma = posterior_mean_alpha(data);
    z += ma + (h_phi_ - ops_.phi0) * u.dot(ma);
    pin_observed(z, y_);
    return z;
  }

 private:
  double kappa() const { return sigma_ * sigma_ / alpha_; }

  // Interpolation holds exactly in exact arithmetic; write the observed values back.
  void pin_observed(Eigen::VectorXd& v, const Eigen::VectorXd& values) const {
    if (bound_.scenario != Scenario::kInterpolation) return;
    for (Eigen::Index k = 0; k < values.size(); ++k) v[bound_.nodes[k]] = values[k];
  }

  void build_system() {
    const Eigen::Index m = ops_.size();
    const Eigen::VectorXd u = ops_.mass_phi0();
    if (bound_.scenario == Scenario::kSmoothing) {
      const double t2 = bound_.tau * bound_.tau;
      SparseMatrix p = bound_.projection;
      SparseMatrix base = t2 * ops_.precision + SparseMatrix(p.transpose() * p);
      system_.emplace(SpdFactor(base), u, kappa() * t2);
      return;
    }
    std::vector<int> pos(m, -1);
    std::vector<char> observed(m, 0);
    for (int v : bound_.nodes) observed[v] = 1;
    for (Eigen::Index i = 0; i < m; ++i)
      if (!observed[i]) {
        pos[i] = static_cast<int>(free_.size());
        free_.push_back(static_cast<int>(i));
      }
    if (free_.empty()) return;
    std::vector<Eigen::Triplet<double>> trip;
    for (int c = 0; c < ops_.precision.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(ops_.precision, c); it; ++it)
        if (pos[it.row()] >= 0 && pos[it.col()] >= 0) trip.emplace_back(pos[it.row()], pos[it.col()], it.value());
    const Eigen::Index nf = static_cast<Eigen::Index>(free_.size());
    SparseMatrix qff(nf, nf);
    qff.setFromTriplets(trip.begin(), trip.end());
    Eigen::VectorXd uf(nf);
    for (Eigen::Index i = 0; i < nf; ++i) uf[i] = u[free_[i]];
    try {
      system_.emplace(SpdFactor(qff), uf, kappa());
    } catch (const FactorizationError& e) {
      throw FactorizationError("precision restricted to unobserved nodes is singular",
                               e.pivot() >= 0 ? free_[e.pivot()] : -1);
    }
  }

  FemOperators ops_;
  BoundObservations bound_;
  Eigen::VectorXd y_;
  double sigma_;
  double alpha_ = 1.0;
  KernelDeflatedSolver pinv_;
  SpectralBounds bounds_;
  std::vector<std::string> warnings_;
  std::vector<int> free_;
  std::optional<RankOneSystem> system_;
  Eigen::VectorXd m_phi_, h_phi_, mean_;
  double c_phi_ = 0.0;
};

enum class SimulationKind { kUniversalKriging, kSimpleKriging };

inline std::string to_string(SimulationKind k) { return k == SimulationKind::kSimpleKriging ? "sk" : "uk"; }

struct SimulationBatch {
  Eigen::MatrixXd samples;  // n_sims x m
  std::uint64_t seed = 0;
  double alpha = 0.0;
  double sigma = 0.0;
  double tau = 0.0;
  Scenario scenario = Scenario::kInterpolation;
  SimulationKind kind = SimulationKind::kUniversalKriging;

  Eigen::Index size() const { return samples.rows(); }
};

/// Independent stream for simulation `index` of a run seeded with `seed`.
inline std::mt19937_64 simulation_stream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline Eigen::VectorXd standard_normal(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> g;
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

inline SimulationBatch simulate(const PosteriorModel& model, int n_sims, std::uint64_t seed, SimulationKind kind) {
  if (n_sims < 1) throw InvalidInput("n_sims must be at least 1");
  const Eigen::Index m = model.ops().size(), n = model.bound().size();
  SimulationBatch batch;
  batch.samples.resize(n_sims, m);
  batch.seed = seed;
  batch.alpha = model.alpha();
  batch.sigma = model.sigma();
  batch.tau = model.tau();
  batch.scenario = model.scenario();
  batch.kind = kind;
  parallel_for(static_cast<std::size_t>(n_sims), [&](std::size_t k) {
    auto rng = simulation_stream(seed, k);
    const Eigen::VectorXd eps_m = standard_normal(rng, m);
    const Eigen::VectorXd eps_n = standard_normal(rng, n);
    batch.samples.row(static_cast<Eigen::Index>(k)) =
        (kind == SimulationKind::kSimpleKriging ? model.simple_kriging_draw(eps_m, eps_n)
                                                : model.conditional_draw(eps_m, eps_n))
            .transpose();
  });
  if (!batch.samples.allFinite()) throw Error("simulation produced non-finite values");
  return batch;
}

inline SimulationBatch simulate_posterior(const PosteriorModel& model, int n_sims, std::uint64_t seed) {
  return simulate(model, n_sims, seed, SimulationKind::kUniversalKriging);
}

inline SimulationBatch simulate_simple_kriging(const PosteriorModel& model, int n_sims, std::uint64_t seed) {
  return simulate(model, n_sims, seed, SimulationKind::kSimpleKriging);
}

/// Per-node sample mean, kept inside the sample range so constant columns come out exact.
inline Eigen::VectorXd sample_mean(const SimulationBatch& batch) {
  const Eigen::VectorXd raw = batch.samples.colwise().mean().transpose();
  return raw.cwiseMax(batch.samples.colwise().minCoeff().transpose())
      .cwiseMin(batch.samples.colwise().maxCoeff().transpose());
}

/// Unbiased per-node sample variance.
inline Eigen::VectorXd posterior_variance(const SimulationBatch& batch) {
  if (batch.size() < 2) throw InvalidInput("variance needs at least two simulations");
  const Eigen::RowVectorXd mean = sample_mean(batch).transpose();
  return ((batch.samples.rowwise() - mean).array().square().colwise().sum() / double(batch.size() - 1))
      .transpose();
}

/// Type-7 (linear interpolation) sample quantile of each column.
inline Eigen::VectorXd sample_quantile(const SimulationBatch& batch, double p) {
  const Eigen::Index n = batch.size(), m = batch.samples.cols();
  Eigen::VectorXd out(m);
  std::vector<double> col(n);
  const double h = (n - 1) * p;
  const auto lo = static_cast<Eigen::Index>(std::floor(h));
  const Eigen::Index hi = std::min(lo + 1, n - 1);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) col[i] = batch.samples(i, j);
    std::sort(col.begin(), col.end());
    out[j] = col[lo] + (h - lo) * (col[hi] - col[lo]);
  }
  return out;
}

/// Exact per-node posterior variance sigma^2 [Sigma - G K^{-1} G^T (+ b b^T / beta for uk)]_ii,
/// G = Sigma P^T, b = phi0 - G K^{-1} P phi0. Costs one pseudo-inverse solve per node.
inline Eigen::VectorXd kriging_variance(const PosteriorModel& model,
                                        SimulationKind kind = SimulationKind::kUniversalKriging) {
  const FemOperators& ops = model.ops();
  const BoundObservations& bound = model.bound();
  const KernelDeflatedSolver& pinv = model.pseudo_inverse();
  const Eigen::Index m = ops.size(), n = bound.size();
  if (m > 50000) throw InvalidInput("exact variance is limited to m <= 50000 nodes; use simulations");
  const Eigen::MatrixXd k = observation_covariance(ops, bound, bound.tau, &pinv);
  const auto llt = detail::factor_covariance(k);
  const SparseMatrix pt = SparseMatrix(bound.projection.transpose());
  Eigen::MatrixXd g(m, n);
  for (Eigen::Index j = 0; j < n; ++j) g.col(j) = apply_sigma(ops, pinv, Eigen::VectorXd(pt.col(j)));
  const Eigen::VectorXd phi = bound.projection * ops.phi0;
  const Eigen::VectorXd kphi = llt.solve(phi);
  const double beta = phi.dot(kphi);
  const Eigen::VectorXd b = ops.phi0 - g * kphi;
  const Eigen::MatrixXd kg = llt.solve(g.transpose());
  const Eigen::VectorXd inv_sqrt_mass = ops.mass.cwiseSqrt().cwiseInverse();
  Eigen::VectorXd var(m);
  parallel_for(static_cast<std::size_t>(m), [&](std::size_t idx) {
    const auto i = static_cast<Eigen::Index>(idx);
    const double sii = pinv.apply(Eigen::VectorXd::Unit(m, i) * inv_sqrt_mass[i]).squaredNorm();
    double v = sii - g.row(i).dot(kg.col(i));
    if (kind == SimulationKind::kUniversalKriging) v += b[i] * b[i] / beta;
    var[i] = model.sigma() * model.sigma() * std::max(v, 0.0);
  });
  if (bound.scenario == Scenario::kInterpolation)
    for (int node : bound.nodes) var[node] = 0.0;
  return var;
}

/// simulations.csv (node_index, mean, variance, sample_0..) plus a JSON sidecar.
inline void write_batch(const SimulationBatch& batch, const std::filesystem::path& csv,
                        const std::filesystem::path& sidecar) {
  const Eigen::VectorXd mean = sample_mean(batch);
  const Eigen::VectorXd var =
      batch.size() > 1 ? posterior_variance(batch) : Eigen::VectorXd::Zero(batch.samples.cols());
  io::write_atomically(csv, [&](std::ostream& out) {
    out << "node_index,mean,variance";
    for (Eigen::Index k = 0; k < batch.size(); ++k) out << ",sample_" << k;
    out << '\n';
    for (Eigen::Index j = 0; j < batch.samples.cols(); ++j) {
      out << j << ',' << io::format_double(mean[j]) << ',' << io::format_double(var[j]);
      for (Eigen::Index k = 0; k < batch.size(); ++k) out << ',' << io::format_double(batch.samples(k, j));
      out << '\n';
    }
  });
  nlohmann::ordered_json j;
  j["seed"] = batch.seed;
  j["alpha"] = batch.alpha;
  j["scenario"] = static_cast<int>(batch.scenario);
  j["sigma"] = batch.sigma;
  j["tau"] = batch.tau;
  j["kind"] = to_string(batch.kind);
  j["n_sims"] = batch.size();
  io::write_atomically(sidecar, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
}

/// summary.csv: node, mean, variance, q2.5, q97.5.
inline void write_summary(const SimulationBatch& batch, const std::filesystem::path& path) {
  const Eigen::VectorXd mean = sample_mean(batch);
  const Eigen::VectorXd var =
      batch.size() > 1 ? posterior_variance(batch) : Eigen::VectorXd::Zero(batch.samples.cols());
  const Eigen::VectorXd lo = sample_quantile(batch, 0.025), hi = sample_quantile(batch, 0.975);
  io::write_atomically(path, [&](std::ostream& out) {
    out << "node,mean,variance,q2.5,q97.5\n";
    for (Eigen::Index j = 0; j < mean.size(); ++j)
      out << j << ',' << io::format_double(mean[j]) << ',' << io::format_double(var[j]) << ','
          << io::format_double(lo[j]) << ',' << io::format_double(hi[j]) << '\n';
  });
}

}  // namespace manifold_splines
