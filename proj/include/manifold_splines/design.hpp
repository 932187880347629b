#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "mesh.hpp"

namespace manifold_splines {

struct MaximinOptions {
  int restarts = 10;
  int sweeps_per_point = 100;  // swap proposals per restart = sweeps_per_point * n
};

namespace detail {

// Squared distance in the unit square; axes flagged periodic wrap with period 1.
inline double unit_sq_distance(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                               const std::array<bool, 2>& periodic) {
  double s = 0.0;
  for (int d = 0; d < 2; ++d) {
    double diff = std::abs(a[d] - b[d]);
    if (periodic[d]) diff = std::min(diff, 1.0 - diff);
    s += diff * diff;
  }
  return s;
}

}  // namespace detail

/// Maximin Latin hypercube of n points in [0,1]^2: random restarts, each
/// improved by greedy coordinate swaps between two points that keep the
/// Latin property. Ties on the minimum distance are broken by the number of
/// pairs achieving it.
inline std::vector<Eigen::Vector2d> maximin_lhs(int n, std::uint64_t seed, std::array<bool, 2> periodic = {},
                                                const MaximinOptions& opts = {}) {
  if (n < 1) throw InvalidInput("design size must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto score = [&](const std::vector<Eigen::Vector2d>& p) {
    double best = std::numeric_limits<double>::infinity();
    int count = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = i + 1; j < p.size(); ++j) {
        double d = detail::unit_sq_distance(p[i], p[j], periodic);
        if (d < best - 1e-15) {
          best = d;
          count = 1;
        } else if (std::abs(d - best) <= 1e-15) {
          ++count;
        }
      }
    return std::pair<double, int>(best, count);
  };
  auto better = [](std::pair<double, int> a, std::pair<double, int> b) {
    return a.first > b.first + 1e-15 || (std::abs(a.first - b.first) <= 1e-15 && a.second < b.second);
  };

  std::vector<Eigen::Vector2d> best_design;
  std::pair<double, int> best_score{-1.0, 0};
  for (int r = 0; r < opts.restarts; ++r) {
    std::vector<Eigen::Vector2d> pts(n);
    for (int d = 0; d < 2; ++d) {
      std::vector<int> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      for (int i = 0; i < n; ++i) pts[i][d] = (perm[i] + unif(rng)) / n;
    }
    auto current = score(pts);
    if (n > 1) {
      std::uniform_int_distribution<int> pick(0, n - 1);
      const long proposals = static_cast<long>(opts.sweeps_per_point) * n;
      for (long it = 0; it < proposals; ++it) {
        const int i = pick(rng), j = pick(rng), d = static_cast<int>(rng() & 1u);
        if (i == j) continue;
        std::swap(pts[i][d], pts[j][d]);
        auto cand = score(pts);
        if (better(cand, current) || (cand == current))
          current = cand;
        else
          std::swap(pts[i][d], pts[j][d]);
      }
    }
    if (better(current, best_score)) {
      best_score = current;
      best_design = pts;
    }
  }
  return best_design;
}

/// Chart-space maximin design snapped to distinct mesh nodes.
///
/// The LHS is drawn in the bounding rectangle of the chart (a periodic axis
/// spans one full period). Each point, in LHS order, takes the closest unused
/// candidate node in wrapped chart distance; exact ties go to the node with the
/// lexicographically smaller chart coordinate so the result does not depend
/// on vertex numbering. `candidates` restricts the eligible nodes (all nodes
/// when empty).
inline std::vector<int> maximin_node_design(const TriangleMesh& mesh, int n, std::uint64_t seed,
                                            const std::vector<int>& candidates = {},
                                            const MaximinOptions& opts = {}) {
  if (n < 1) throw InvalidInput("design size must be at least 1");
  const Chart& chart = mesh.chart();
  std::vector<int> pool = candidates;
  if (pool.empty()) {
    pool.resize(mesh.num_vertices());
    std::iota(pool.begin(), pool.end(), 0);
  }
  if (static_cast<std::size_t>(n) > pool.size())
    throw InvalidInput("design size " + std::to_string(n) + " exceeds the " + std::to_string(pool.size()) +
                       " available nodes");

  std::array<double, 2> lo{}, span{};
  std::array<bool, 2> periodic{};
  for (int d = 0; d < 2; ++d) {
    periodic[d] = chart.period[d] > 0.0;
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (int v : pool) {
      mn = std::min(mn, chart.coords[v][d]);
      mx = std::max(mx, chart.coords[v][d]);
    }
    lo[d] = periodic[d] ? 0.0 : mn;
    span[d] = periodic[d] ? chart.period[d] : mx - mn;
  }

  auto unit = maximin_lhs(n, seed, periodic, opts);
  std::vector<char> taken(mesh.num_vertices(), 0);
  std::vector<int> out;
  out.reserve(n);
  for (const auto& u : unit) {
    const Eigen::Vector2d target(lo[0] + u[0] * span[0], lo[1] + u[1] * span[1]);
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int v : pool) {
      if (taken[v]) continue;
      const auto& c = chart.coords[v];
      const double d = chart.distance(target, c);
      if (d < best_d || (d == best_d && best >= 0 &&
                         std::lexicographical_compare(c.data(), c.data() + 2, chart.coords[best].data(),
                                                      chart.coords[best].data() + 2))) {
        best = v;
        best_d = d;
      }
    }
    taken[best] = 1;
    out.push_back(best);
  }
  return out;
}

}  // namespace manifold_splines
