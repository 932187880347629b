#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>

#include <Eigen/Dense>
#include <Eigen/OrderingMethods>
#include <Eigen/Sparse>

#include "error.hpp"
#include "fem.hpp"

namespace manifold_splines {

/// Sparse LDL^T factor of a symmetric positive definite matrix (AMD ordering).
/// Immutable and cheap to copy; solves are safe from several threads.
class SpdFactor {
 public:
  using Backend = Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>;

  SpdFactor() = default;

  explicit SpdFactor(const SparseMatrix& a) {
    if (a.rows() != a.cols()) throw InvalidInput("factor_spd needs a square matrix");
    const double scale = a.norm();
    if (!std::isfinite(scale)) throw InvalidInput("matrix has non-finite entries");
    if (SparseMatrix(a - SparseMatrix(a.transpose())).norm() > 1e-10 * scale)
      throw InvalidInput("factor_spd needs a symmetric matrix");
    auto f = std::make_shared<Backend>();
    f->compute(a);
    const Eigen::VectorXd d = f->vectorD();
    const double dmax = d.size() ? d.cwiseAbs().maxCoeff() : 0.0;
    for (Eigen::Index k = 0; k < d.size(); ++k)
      if (!(d[k] > 1e-14 * dmax) || f->info() != Eigen::Success)
        throw FactorizationError("matrix is not positive definite", f->permutationPinv().indices()[k]);
    factor_ = std::move(f);
  }

  Eigen::Index size() const { return factor_ ? factor_->rows() : 0; }

  template <typename Rhs>
  Eigen::MatrixXd solve(const Eigen::MatrixBase<Rhs>& b) const {
    if (!factor_) throw Error("empty factor");
    if (b.rows() != size()) throw InvalidInput("right-hand side has the wrong length");
    return factor_->solve(Eigen::MatrixXd(b));
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    if (!factor_) throw Error("empty factor");
    if (b.size() != size()) throw InvalidInput("right-hand side has the wrong length");
    return factor_->solve(b);
  }

  /// Fill-reducing permutation (original index -> factor row).
  const Eigen::VectorXi& ordering() const { return factor_->permutationP().indices(); }

  double log_determinant() const { return factor_->vectorD().array().log().sum(); }

 private:
  std::shared_ptr<const Backend> factor_;
};

inline SpdFactor factor_spd(const SparseMatrix& a) { return SpdFactor(a); }

/// A + beta u u^T, solved by Sherman-Morrison on a factor of A.
class RankOneSystem {
 public:
  RankOneSystem(SpdFactor base, Eigen::VectorXd u, double beta)
      : base_(std::move(base)), u_(std::move(u)), beta_(beta) {
    if (u_.size() != base_.size()) throw InvalidInput("rank-one vector has the wrong length");
    if (!(beta_ >= 0.0) || !std::isfinite(beta_)) throw InvalidInput("rank-one weight must be non-negative");
    ainv_u_ = base_.solve(u_);
    denom_ = 1.0 + beta_ * u_.dot(ainv_u_);
    if (!(std::abs(denom_) > 1e-12)) throw DegenerateError("ill-posed rank-one update");
  }

  Eigen::Index size() const { return base_.size(); }
  const SpdFactor& base() const { return base_; }
  const Eigen::VectorXd& u() const { return u_; }
  double beta() const { return beta_; }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x = base_.solve(b);
    if (beta_ != 0.0) x -= (beta_ * u_.dot(x) / denom_) * ainv_u_;
    return x;
  }

 private:
  SpdFactor base_;
  Eigen::VectorXd u_;
  double beta_;
  Eigen::VectorXd ainv_u_;
  double denom_ = 1.0;
};

inline Eigen::VectorXd solve_rank_one(const RankOneSystem& sys, const Eigen::VectorXd& b) { return sys.solve(b); }

/// Pseudo-inverse of a PSD matrix S whose kernel is spanned by the unit vector w.
///
/// The direct backend grounds the node where |w| is largest: S with that row
/// and column removed is positive definite on a connected mesh, the grounded
/// solution of the projected system solves it exactly, and a final projection
/// removes the kernel component. The iterative backend runs Jacobi-preconditioned
/// conjugate gradients on S + w w^T.
class KernelDeflatedSolver {
 public:
  enum class Method { kDirect, kConjugateGradient };

  KernelDeflatedSolver() = default;

  KernelDeflatedSolver(const SparseMatrix& s, Eigen::VectorXd w, Method method = Method::kDirect)
      : s_(s), w_(std::move(w)), method_(method) {
    const Eigen::Index m = s.rows();
    if (s.cols() != m || w_.size() != m) throw InvalidInput("kernel vector and matrix sizes differ");
    if (std::abs(w_.norm() - 1.0) > 1e-8) throw InvalidInput("kernel vector must have unit norm");
    if (method_ == Method::kConjugateGradient) {
      jacobi_ = (s.diagonal() + w_.cwiseAbs2()).cwiseInverse();
      return;
    }
    w_.cwiseAbs().maxCoeff(&ground_);
    if (m == 1) return;
    std::vector<Eigen::Triplet<double>> trip;
    for (int c = 0; c < s.outerSize(); ++c)
      for (SparseMatrix::InnerIterator it(s, c); it; ++it) {
        if (it.row() == ground_ || it.col() == ground_) continue;
        trip.emplace_back(reduce(it.row()), reduce(it.col()), it.value());
      }
    SparseMatrix reduced(m - 1, m - 1);
    reduced.setFromTriplets(trip.begin(), trip.end());
    try {
      factor_ = SpdFactor(reduced);
    } catch (const FactorizationError& e) {
      const auto p = e.pivot();
      throw FactorizationError("grounded operator is singular (disconnected mesh?)", p >= ground_ ? p + 1 : p);
    }
  }

  Eigen::Index size() const { return w_.size(); }
  const Eigen::VectorXd& kernel() const { return w_; }

  /// S^+ b.
  Eigen::VectorXd apply(const Eigen::VectorXd& b) const {
    if (b.size() != size()) throw InvalidInput("right-hand side has the wrong length");
    Eigen::VectorXd rhs = b - w_ * w_.dot(b);
    Eigen::VectorXd x = method_ == Method::kDirect ? grounded_solve(rhs) : cg_solve(rhs);
    x -= w_ * w_.dot(x);
    return x;
  }

 private:
  Eigen::Index reduce(Eigen::Index i) const { return i > ground_ ? i - 1 : i; }

  Eigen::VectorXd grounded_solve(const Eigen::VectorXd& rhs) const {
    const Eigen::Index m = size();
    Eigen::VectorXd x = Eigen::VectorXd::Zero(m);
    if (m == 1) return x;
    Eigen::VectorXd r(m - 1);
    for (Eigen::Index i = 0; i < m; ++i)
      if (i != ground_) r[reduce(i)] = rhs[i];
    Eigen::VectorXd xr = factor_.solve(r);
    for (Eigen::Index i = 0; i < m; ++i)
      if (i != ground_) x[i] = xr[reduce(i)];
    return x;
  }

  Eigen::VectorXd cg_solve(const Eigen::VectorXd& rhs) const {
    const Eigen::Index m = size();
    const double bnorm = rhs.norm();
    Eigen::VectorXd x = Eigen::VectorXd::Zero(m);
    if (bnorm == 0.0) return x;
    auto op = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return s_ * v + w_ * w_.dot(v); };
    Eigen::VectorXd r = rhs;
    Eigen::VectorXd z = jacobi_.cwiseProduct(r);
    Eigen::VectorXd p = z;
    double rz = r.dot(z);
    const long cap = static_cast<long>(std::ceil(20.0 * std::sqrt(static_cast<double>(m))));
    for (long it = 0; it < cap; ++it) {
      Eigen::VectorXd ap = op(p);
      const double step = rz / p.dot(ap);
      x += step * p;
      r -= step * ap;
      if (r.norm() <= 1e-10 * bnorm) return x;
      z = jacobi_.cwiseProduct(r);
      const double rz_next = r.dot(z);
      p = z + (rz_next / rz) * p;
      rz = rz_next;
    }
    throw ConvergenceError("conjugate gradients hit the iteration cap", r.norm() / bnorm);
  }

  SparseMatrix s_;
  Eigen::VectorXd w_;
  Method method_ = Method::kDirect;
  Eigen::Index ground_ = 0;
  SpdFactor factor_;
  Eigen::VectorXd jacobi_;
};

/// Sigma b = M^{-1/2} (S^+)^2 M^{-1/2} b.
inline Eigen::VectorXd apply_sigma(const FemOperators& ops, const KernelDeflatedSolver& pinv,
                                   const Eigen::VectorXd& b) {
  const Eigen::VectorXd inv_sqrt = ops.mass.cwiseSqrt().cwiseInverse();
  return inv_sqrt.cwiseProduct(pinv.apply(pinv.apply(inv_sqrt.cwiseProduct(b))));
}

/// Draw with covariance exactly sigma^2 Sigma + alpha phi0 phi0^T, the inverse of
/// sigma^{-2} Q + alpha^{-1} (M phi0)(M phi0)^T:
///   z = sigma M^{-1/2} S^+ eps_perp + sqrt(alpha) phi0 (w^T eps).
inline Eigen::VectorXd sample_precision(const FemOperators& ops, const KernelDeflatedSolver& pinv, double sigma,
                                        double alpha, const Eigen::VectorXd& eps) {
  if (eps.size() != ops.size()) throw InvalidInput("noise vector has the wrong length");
  if (!(sigma > 0.0) || !(alpha > 0.0)) throw InvalidInput("sigma and alpha must be positive");
  const Eigen::VectorXd& w = pinv.kernel();
  Eigen::VectorXd z = sigma * ops.mass.cwiseSqrt().cwiseInverse().cwiseProduct(pinv.apply(eps));
  z += std::sqrt(alpha) * w.dot(eps) * ops.phi0;
  return z;
}

/// Dense sigma^{-2} Q + alpha^{-1} u u^T with u = M phi0.
inline Eigen::MatrixXd dense_shifted_precision(const FemOperators& ops, double sigma, double alpha) {
  if (ops.size() > kDenseLimit) throw InvalidInput("dense precision is limited to m <= 4000");
  const Eigen::VectorXd u = ops.mass_phi0();
  return Eigen::MatrixXd(ops.precision) / (sigma * sigma) + u * u.transpose() / alpha;
}

/// Reference sampler: Cholesky L L^T of the dense shifted precision, then L^T z = eps.
inline Eigen::VectorXd sample_precision_dense(const FemOperators& ops, double sigma, double alpha,
                                              const Eigen::VectorXd& eps) {
  if (eps.size() != ops.size()) throw InvalidInput("noise vector has the wrong length");
  Eigen::LLT<Eigen::MatrixXd> llt(dense_shifted_precision(ops, sigma, alpha));
  if (llt.info() != Eigen::Success) throw FactorizationError("dense shifted precision is not positive definite", -1);
  return llt.matrixU().solve(eps);
}

struct SpectralBounds {
  double lambda_min_pos = 0.0;
  double lambda_max = 0.0;
  int iterations = 0;

  /// Working alpha at the geometric centre of the admissible band.
  double default_alpha(double sigma) const { return sigma * sigma / (lambda_min_pos * lambda_max); }
  /// sigma / sqrt(alpha) inside [lambda_min_pos, lambda_max].
  bool admits(double sigma, double alpha) const {
    const double r = sigma / std::sqrt(alpha);
    return r >= lambda_min_pos * (1 - 1e-12) && r <= lambda_max * (1 + 1e-12);
  }
};

struct PowerIterationOptions {
  double tolerance = 1e-6;  // relative change of the Rayleigh quotient per step
  /// Relative residual bound: some eigenvalue then lies within this fraction of the estimate.
  double residual_tolerance = 1e-3;
  int max_iterations = 20000;
  /// Use inverse iteration through the pseudo-inverse for the smallest
  /// positive eigenvalue; otherwise power iteration on lambda_max I - S.
  bool inverse_for_min = true;
};

namespace detail {

// `shift` > 0 means the wanted eigenvalue is shift - rho, and tolerances are taken relative to it.
template <typename Op>
double power_iteration(Op&& apply, const Eigen::VectorXd& kernel, Eigen::Index m, const PowerIterationOptions& opt,
                       int& iterations, const char* label, double shift = 0.0) {
  Eigen::VectorXd v(m);
  for (Eigen::Index i = 0; i < m; ++i) v[i] = 1.0 + 0.5 * std::sin(1.7 * static_cast<double>(i) + 0.3);
  v -= kernel * kernel.dot(v);
  if (v.norm() == 0.0) throw DegenerateError("power iteration start vector lies in the kernel");
  v.normalize();
  double rho = 0.0;
  double residual = 0.0;
  for (int it = 1; it <= opt.max_iterations; ++it) {
    Eigen::VectorXd av = apply(v);
    av -= kernel * kernel.dot(av);
    const double next = v.dot(av);
    residual = (av - next * v).norm();
    const double nrm = av.norm();
    if (nrm == 0.0) throw DegenerateError(std::string(label) + ": operator vanishes on the start vector");
    v = av / nrm;
    iterations += 1;
    // A stalled quotient alone is not convergence when the spectral gap is tiny.
    const double scale = std::abs(shift > 0.0 ? shift - next : next);
    if (it > 1 && std::abs(next - rho) <= opt.tolerance * scale && residual <= opt.residual_tolerance * scale)
      return next;
    rho = next;
  }
  throw ConvergenceError(std::string(label) + " did not converge", residual);
}

}  // namespace detail

/// Largest and smallest nonzero eigenvalue of S (kernel spanned by unit w).
inline SpectralBounds estimate_spectral_bounds(const SparseMatrix& s, const Eigen::VectorXd& w,
                                               const PowerIterationOptions& opt = {},
                                               const KernelDeflatedSolver* pinv = nullptr) {
  const Eigen::Index m = s.rows();
  if (m < 2) throw InvalidInput("spectral bounds need at least two nodes");
  SpectralBounds out;
  out.lambda_max = detail::power_iteration([&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return s * v; }, w, m,
                                           opt, out.iterations, "power iteration for lambda_max");
  if (opt.inverse_for_min) {
    std::optional<KernelDeflatedSolver> own;
    if (!pinv) pinv = &own.emplace(s, w);
    const double mu = detail::power_iteration([&](const Eigen::VectorXd& v) { return pinv->apply(v); }, w, m, opt,
                                              out.iterations, "inverse iteration for lambda_min");
    out.lambda_min_pos = 1.0 / mu;
  } else {
    const double shift = out.lambda_max;
    const double mu = detail::power_iteration(
        [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return shift * v - s * v; }, w, m, opt, out.iterations,
        "shifted power iteration for lambda_min", shift);
    out.lambda_min_pos = shift - mu;
  }
  if (!(out.lambda_min_pos > 0.0)) throw DegenerateError("smallest nonzero eigenvalue is not positive");
  return out;
}

}  // namespace manifold_splines
