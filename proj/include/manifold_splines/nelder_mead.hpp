#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Core>

namespace manifold_splines {

struct NelderMeadOptions {
  double step = 0.5;          // initial simplex edge along each axis
  double tolerance = 1e-6;    // stop when max - min objective over the simplex falls below this
  int max_evaluations = 200;
};

struct NelderMeadEvaluation {
  Eigen::VectorXd x;
  double value;
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double value = -std::numeric_limits<double>::infinity();
  int evaluations = 0;
  bool converged = false;
  std::vector<NelderMeadEvaluation> trace;
};

/// Maximizes f from x0. Infeasible points should return -inf; they are never
/// accepted over a finite vertex.
inline NelderMeadResult nelder_mead_maximize(const std::function<double(const Eigen::VectorXd&)>& f,
                                             const Eigen::VectorXd& x0, const NelderMeadOptions& opt = {}) {
  const Eigen::Index d = x0.size();
  NelderMeadResult res;
  auto eval = [&](const Eigen::VectorXd& x) {
    double v = f(x);
    if (std::isnan(v)) v = -std::numeric_limits<double>::infinity();
    res.trace.push_back({x, v});
    ++res.evaluations;
    if (v > res.value || res.x.size() == 0) {
      res.value = v;
      res.x = x;
    }
    return v;
  };

  std::vector<Eigen::VectorXd> pts(d + 1, x0);
  std::vector<double> val(d + 1);
  for (Eigen::Index i = 0; i < d; ++i) pts[i + 1][i] += opt.step;
  for (Eigen::Index i = 0; i <= d; ++i) val[i] = eval(pts[i]);

  std::vector<Eigen::Index> order(d + 1);
  while (res.evaluations < opt.max_evaluations) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return val[a] > val[b]; });
    const double best = val[order.front()], worst = val[order.back()];
    if (std::isfinite(worst) && best - worst < opt.tolerance) {
      res.converged = true;
      break;
    }
    const Eigen::Index w = order.back(), sw = order[d - 1];
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (Eigen::Index i = 0; i < d; ++i) centroid += pts[order[i]];
    centroid /= static_cast<double>(d);

    const Eigen::VectorXd xr = centroid + (centroid - pts[w]);
    const double fr = eval(xr);
    if (fr > best) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[w]);
      const double fe = res.evaluations < opt.max_evaluations ? eval(xe) : -std::numeric_limits<double>::infinity();
      if (fe > fr) {
        pts[w] = xe;
        val[w] = fe;
      } else {
        pts[w] = xr;
        val[w] = fr;
      }
      continue;
    }
    if (fr > val[sw]) {
      pts[w] = xr;
      val[w] = fr;
      continue;
    }
    const bool outside = fr > val[w];
    const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                       : Eigen::VectorXd(centroid + 0.5 * (pts[w] - centroid));
    if (res.evaluations >= opt.max_evaluations) break;
    const double fc = eval(xc);
    if (fc > (outside ? fr : val[w])) {
      pts[w] = xc;
      val[w] = fc;
      continue;
    }
    const Eigen::Index b = order.front();
    for (Eigen::Index i = 0; i <= d && res.evaluations < opt.max_evaluations; ++i) {
      if (i == b) continue;
      pts[i] = pts[b] + 0.5 * (pts[i] - pts[b]);
      val[i] = eval(pts[i]);
    }
  }
  return res;
}

}  // namespace manifold_splines
