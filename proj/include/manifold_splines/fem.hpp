#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <unsupported/Eigen/SparseExtra>

#include "error.hpp"
#include "mesh.hpp"
#include "parallel.hpp"

namespace manifold_splines {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Constant metric deformation G = R D^2 R^T expressed in the chart frame.
/// D = diag(exp(log_ratio / 2), exp(-log_ratio / 2)) so det D = 1; element
/// vertices are mapped by D^{-1} R^T before assembly.
struct AnisotropyParams {
  double angle = 0.0;      // radians
  double log_ratio = 0.0;  // log of the ratio of the two scaling factors

  bool is_isotropic() const { return log_ratio == 0.0; }

  /// Same metric with angle in (-pi/2, pi/2]; R(angle + pi) = -R(angle).
  AnisotropyParams canonical() const {
    const double pi = std::numbers::pi;
    double a = std::fmod(angle, pi);
    if (a <= -pi / 2) a += pi;
    if (a > pi / 2) a -= pi;
    return {a, log_ratio};
  }

  /// Canonical form with log_ratio >= 0, using (angle, r) ~ (angle + pi/2, -r).
  AnisotropyParams oriented() const {
    if (log_ratio >= 0.0) return canonical();
    return AnisotropyParams{angle + std::numbers::pi / 2, -log_ratio}.canonical();
  }

  Eigen::Matrix2d transform() const {
    const double c = std::cos(angle), s = std::sin(angle);
    Eigen::Matrix2d rt;
    rt << c, s, -s, c;  // R^T
    Eigen::Matrix2d dinv = Eigen::Vector2d(std::exp(-log_ratio / 2), std::exp(log_ratio / 2)).asDiagonal();
    return dinv * rt;
  }
};

/// Finite-element operators of a mesh (optionally under a deformed metric).
///
/// mass is the lumped mass diagonal M; F the P1 stiffness; S = M^{-1/2} F M^{-1/2};
/// Q = F M^{-1} F; phi0 the constant vector with phi0^T M phi0 = 1.
struct FemOperators {
  Eigen::VectorXd mass;
  SparseMatrix stiffness;
  SparseMatrix whitened;
  SparseMatrix precision;
  Eigen::VectorXd phi0;

  Eigen::Index size() const { return mass.size(); }
  Eigen::VectorXd sqrt_mass() const { return mass.cwiseSqrt(); }
  /// M phi0, the direction annihilated by Sigma.
  Eigen::VectorXd mass_phi0() const { return mass.cwiseProduct(phi0); }
  /// Unit kernel vector of S: M^{1/2} phi0.
  Eigen::VectorXd kernel_vector() const { return mass.cwiseSqrt().cwiseProduct(phi0); }
  double total_area() const { return mass.sum(); }
};

/// phi0 = 1_m / ||M^{1/2} 1_m||.
inline Eigen::VectorXd compute_phi0(const Eigen::VectorXd& mass) {
  return Eigen::VectorXd::Constant(mass.size(), 1.0 / std::sqrt(mass.sum()));
}

inline Eigen::VectorXd compute_phi0(const FemOperators& ops) { return compute_phi0(ops.mass); }

namespace detail {

struct ElementMatrices {
  double area = 0.0;
  Eigen::Matrix3d stiffness = Eigen::Matrix3d::Zero();
};

// P1 element on a flat triangle given by three points of any dimension.
template <typename Vec>
ElementMatrices p1_element(const Vec& q0, const Vec& q1, const Vec& q2) {
  const Vec e[3] = {q2 - q1, q0 - q2, q1 - q0};  // edge opposite vertex i
  const double dd = e[2].squaredNorm() * e[1].squaredNorm() - std::pow(e[2].dot(e[1]), 2);
  ElementMatrices out;
  out.area = 0.5 * std::sqrt(std::max(dd, 0.0));
  if (out.area > 0.0)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out.stiffness(i, j) = e[i].dot(e[j]) / (4.0 * out.area);
  return out;
}

// Triangle vertices in an orthonormal tangent frame whose first axis follows
// the first chart coordinate direction, second axis oriented along the second.
inline std::array<Eigen::Vector2d, 3> chart_frame_coordinates(const TriangleMesh& mesh, std::size_t t) {
  const Chart& chart = mesh.chart();
  const auto& tri = mesh.triangle(t);
  Eigen::Vector2d c[3];
  for (int k = 0; k < 3; ++k) c[k] = chart.coords[tri[k]];
  // A vertex on a chart singularity takes the periodic coordinate of the mean
  // of its regular neighbours in this triangle.
  for (int k = 0; k < 3; ++k) {
    if (!chart.is_singular(tri[k])) continue;
    for (int d = 0; d < 2; ++d) {
      if (chart.period[d] <= 0.0) continue;
      const int a = (k + 1) % 3, b = (k + 2) % 3;
      c[k][d] = c[a][d] + 0.5 * chart.delta(c[a][d], c[b][d], d);
    }
  }
  Eigen::Matrix2d dc;
  for (int k = 1; k < 3; ++k)
    for (int d = 0; d < 2; ++d) dc(d, k - 1) = chart.delta(c[0][d], c[k][d], d);
  const Eigen::Vector3d p0 = mesh.vertex(tri[0]);
  Eigen::Matrix<double, 3, 2> dp;
  dp.col(0) = mesh.vertex(tri[1]) - p0;
  dp.col(1) = mesh.vertex(tri[2]) - p0;
  if (std::abs(dc.determinant()) <= 1e-14 * dc.cwiseAbs().maxCoeff() * dc.cwiseAbs().maxCoeff())
    throw AssemblyError("chart is singular on triangle", t);
  const Eigen::Matrix<double, 3, 2> jac = dp * dc.inverse();  // d(position)/d(chart)
  Eigen::Vector3d t1 = jac.col(0);
  const Eigen::Vector3d normal = dp.col(0).cross(dp.col(1)).normalized();
  t1 -= normal * normal.dot(t1);
  if (!(t1.norm() > 0.0)) throw AssemblyError("chart direction is normal to triangle", t);
  t1.normalize();
  Eigen::Vector3d t2 = normal.cross(t1);
  if (t2.dot(jac.col(1)) < 0.0) t2 = -t2;
  std::array<Eigen::Vector2d, 3> q;
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector3d r = mesh.vertex(tri[k]) - p0;
    q[k] = Eigen::Vector2d(t1.dot(r), t2.dot(r));
  }
  return q;
}

}  // namespace detail

/// Assembles lumped mass, stiffness, S, Q and phi0.
///
/// With anisotropy, each triangle is expressed in its chart-aligned tangent
/// frame, deformed by `AnisotropyParams::transform()`, and integrated as a
/// flat triangle. Element work runs in parallel; accumulation is sequential
/// in triangle order so results do not depend on the thread count.
inline FemOperators assemble(const TriangleMesh& mesh, const std::optional<AnisotropyParams>& aniso = std::nullopt) {
  const std::size_t nt = mesh.num_triangles();
  const Eigen::Index m = static_cast<Eigen::Index>(mesh.num_vertices());
  const bool deform = aniso && !aniso->is_isotropic();
  if (deform && !mesh.has_chart()) throw InvalidInput("anisotropic assembly requires chart coordinates");
  if (aniso && !std::isfinite(aniso->log_ratio)) throw InvalidInput("anisotropy log_ratio must be finite");
  const Eigen::Matrix2d transform = deform ? aniso->transform() : Eigen::Matrix2d::Identity();

  std::vector<detail::ElementMatrices> elements(nt);
  parallel_for(nt, [&](std::size_t t) {
    const auto& tri = mesh.triangle(t);
    if (deform) {
      auto q = detail::chart_frame_coordinates(mesh, t);
      elements[t] = detail::p1_element<Eigen::Vector2d>(transform * q[0], transform * q[1], transform * q[2]);
    } else {
      elements[t] = detail::p1_element<Eigen::Vector3d>(mesh.vertex(tri[0]), mesh.vertex(tri[1]),
                                                        mesh.vertex(tri[2]));
    }
  });

  double mean_area = 0.0;
  for (const auto& e : elements) mean_area += e.area;
  mean_area /= static_cast<double>(nt);
  for (std::size_t t = 0; t < nt; ++t)
    if (!(elements[t].area > 1e-14 * mean_area)) throw AssemblyError("degenerate deformed triangle", t);

  FemOperators ops;
  ops.mass = Eigen::VectorXd::Zero(m);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(9 * nt);
  for (std::size_t t = 0; t < nt; ++t) {
    const auto& tri = mesh.triangle(t);
    const auto& e = elements[t];
    for (int i = 0; i < 3; ++i) {
      ops.mass[tri[i]] += e.area / 3.0;
      for (int j = 0; j < 3; ++j) trip.emplace_back(tri[i], tri[j], e.stiffness(i, j));
    }
  }
  ops.stiffness.resize(m, m);
  ops.stiffness.setFromTriplets(trip.begin(), trip.end());
  ops.stiffness.makeCompressed();

  const Eigen::VectorXd inv_sqrt = ops.mass.cwiseSqrt().cwiseInverse();
  ops.whitened = inv_sqrt.asDiagonal() * ops.stiffness * inv_sqrt.asDiagonal();
  ops.whitened.makeCompressed();
  const Eigen::VectorXd inv_mass = ops.mass.cwiseInverse();
  ops.precision = ops.stiffness * inv_mass.asDiagonal() * ops.stiffness;
  ops.precision.makeCompressed();
  ops.phi0 = compute_phi0(ops.mass);
  return ops;
}

/// Maximum mesh size accepted by the dense reference routines.
inline constexpr Eigen::Index kDenseLimit = 4000;

/// Dense Sigma = M^{-1/2} f(S) M^{-1/2}, f(l) = l^{-2} above the zero
/// threshold 1e-9 * lambda_max(S) and 0 below. Exactly one eigenvalue may fall
/// below the threshold.
inline Eigen::MatrixXd dense_sigma_oracle(const FemOperators& ops) {
  const Eigen::Index m = ops.size();
  if (m > kDenseLimit) throw InvalidInput("dense Sigma is limited to m <= 4000");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(ops.whitened));
  if (eig.info() != Eigen::Success) throw Error("eigendecomposition of S failed");
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  const double threshold = 1e-9 * lambda.cwiseAbs().maxCoeff();
  Eigen::VectorXd f(m);
  int zeros = 0;
  for (Eigen::Index k = 0; k < m; ++k) {
    if (lambda[k] <= threshold) {
      f[k] = 0.0;
      ++zeros;
    } else {
      f[k] = 1.0 / (lambda[k] * lambda[k]);
    }
  }
  if (zeros != 1)
    throw Error(zeros > 1 ? "mesh yields multiple near-zero modes" : "S has no near-zero mode");
  const Eigen::MatrixXd& v = eig.eigenvectors();
  const Eigen::VectorXd inv_sqrt = ops.mass.cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd w = inv_sqrt.asDiagonal() * v;
  Eigen::MatrixXd sigma = w * f.asDiagonal() * w.transpose();
  return 0.5 * (sigma + sigma.transpose());
}

/// Dense Sigma from the precision core: M^{-1/2} pinv(M^{-1/2} Q M^{-1/2}) M^{-1/2},
/// with the pseudo-inverse taken as (S^2 + w w^T)^{-1} - w w^T, w = M^{1/2} phi0.
/// Independent of the eigendecomposition route above.
inline Eigen::MatrixXd dense_sigma_from_precision(const FemOperators& ops) {
  const Eigen::Index m = ops.size();
  if (m > kDenseLimit) throw InvalidInput("dense Sigma is limited to m <= 4000");
  const Eigen::VectorXd inv_sqrt = ops.mass.cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd s2 = inv_sqrt.asDiagonal() * Eigen::MatrixXd(ops.precision) * inv_sqrt.asDiagonal();
  const Eigen::VectorXd w = ops.kernel_vector();
  Eigen::MatrixXd shifted = s2 + w * w.transpose();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(shifted);
  Eigen::MatrixXd pinv = ldlt.solve(Eigen::MatrixXd::Identity(m, m)) - w * w.transpose();
  Eigen::MatrixXd sigma = inv_sqrt.asDiagonal() * pinv * inv_sqrt.asDiagonal();
  return 0.5 * (sigma + sigma.transpose());
}

/// Writes M (as a sparse diagonal), F, S and Q in Matrix Market coordinate format.
inline void export_matrix_market(const FemOperators& ops, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  SparseMatrix mass(ops.size(), ops.size());
  std::vector<Eigen::Triplet<double>> trip;
  for (Eigen::Index i = 0; i < ops.size(); ++i) trip.emplace_back(i, i, ops.mass[i]);
  mass.setFromTriplets(trip.begin(), trip.end());
  const std::pair<const SparseMatrix*, const char*> items[] = {
      {&mass, "M.mtx"}, {&ops.stiffness, "F.mtx"}, {&ops.whitened, "S.mtx"}, {&ops.precision, "Q.mtx"}};
  for (const auto& [mat, name] : items)
    if (!Eigen::saveMarket(*mat, (dir / name).string()))
      throw Error("cannot write " + (dir / name).string());
}

}  // namespace manifold_splines
