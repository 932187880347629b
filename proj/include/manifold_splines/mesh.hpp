#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "error.hpp"
#include "io.hpp"

namespace manifold_splines {

using Triangle = std::array<int, 3>;

/// Per-vertex 2-D coordinates of a parametrization of the surface.
///
/// An axis with a non-zero period wraps (longitude, cylinder angle). Vertices
/// flagged `singular` sit on a coordinate singularity (sphere poles); their
/// coordinate along the periodic axis carries no information.
struct Chart {
  std::vector<Eigen::Vector2d> coords;
  std::array<double, 2> period{0.0, 0.0};
  std::vector<char> singular;

  bool is_singular(std::size_t v) const { return !singular.empty() && singular[v] != 0; }

  /// Shortest difference b - a along `axis`, honouring periodicity.
  double delta(double a, double b, int axis) const {
    double d = b - a;
    const double p = period[axis];
    if (p > 0.0) d -= p * std::round(d / p);
    return d;
  }

  double distance(const Eigen::Vector2d& a, const Eigen::Vector2d& b) const {
    return std::hypot(delta(a[0], b[0], 0), delta(a[1], b[1], 1));
  }
};

/// Immutable triangulated surface. The constructor enforces the structural
/// invariants: indices in range, distinct vertices per triangle, positive
/// area, no vertex unused, every edge shared by at most two triangles, and
/// edge-connectivity of the triangle set.
class TriangleMesh {
 public:
  TriangleMesh(std::vector<Eigen::Vector3d> vertices, std::vector<Triangle> triangles,
               std::optional<Chart> chart = std::nullopt)
      : vertices_(std::move(vertices)), triangles_(std::move(triangles)), chart_(std::move(chart)) {
    validate();
  }

  std::size_t num_vertices() const { return vertices_.size(); }
  std::size_t num_triangles() const { return triangles_.size(); }
  const std::vector<Eigen::Vector3d>& vertices() const { return vertices_; }
  const std::vector<Triangle>& triangles() const { return triangles_; }
  const Eigen::Vector3d& vertex(std::size_t i) const { return vertices_[i]; }
  const Triangle& triangle(std::size_t t) const { return triangles_[t]; }
  bool has_chart() const { return chart_.has_value(); }
  const Chart& chart() const {
    if (!chart_) throw InvalidInput("mesh has no chart coordinates");
    return *chart_;
  }

  double triangle_area(std::size_t t) const {
    const auto& tri = triangles_[t];
    return 0.5 * (vertices_[tri[1]] - vertices_[tri[0]])
                     .cross(vertices_[tri[2]] - vertices_[tri[0]])
                     .norm();
  }

  double total_area() const {
    double a = 0.0;
    for (std::size_t t = 0; t < triangles_.size(); ++t) a += triangle_area(t);
    return a;
  }

  double bounding_box_diagonal() const {
    Eigen::Vector3d lo = vertices_.front(), hi = vertices_.front();
    for (const auto& v : vertices_) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    return (hi - lo).norm();
  }

  /// Edges (as ordered vertex pairs) used by exactly one triangle.
  std::vector<std::pair<int, int>> boundary_edges() const {
    std::vector<std::pair<int, int>> out;
    for (const auto& [edge, count] : edge_counts())
      if (count == 1) out.push_back(edge);
    return out;
  }

  bool is_closed() const { return boundary_edges().empty(); }

  /// Number of connected components of the boundary edge graph.
  std::size_t count_boundary_loops() const {
    auto edges = boundary_edges();
    std::vector<int> parent(vertices_.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    std::vector<char> on_boundary(vertices_.size(), 0);
    for (auto [a, b] : edges) {
      on_boundary[a] = on_boundary[b] = 1;
      parent[find(a)] = find(b);
    }
    std::size_t loops = 0;
    for (std::size_t v = 0; v < vertices_.size(); ++v)
      if (on_boundary[v] && find(static_cast<int>(v)) == static_cast<int>(v)) ++loops;
    return loops;
  }

  /// Copy with every vertex scaled by `factor` (chart unchanged).
  TriangleMesh scaled(double factor) const {
    auto v = vertices_;
    for (auto& p : v) p *= factor;
    return TriangleMesh(std::move(v), triangles_, chart_);
  }

 private:
  std::map<std::pair<int, int>, int> edge_counts() const {
    std::map<std::pair<int, int>, int> counts;
    for (const auto& tri : triangles_)
      for (int k = 0; k < 3; ++k) {
        int a = tri[k], b = tri[(k + 1) % 3];
        ++counts[{std::min(a, b), std::max(a, b)}];
      }
    return counts;
  }

  void validate() const {
    using Kind = MeshError::Kind;
    const int m = static_cast<int>(vertices_.size());
    if (m == 0 || triangles_.empty()) throw MeshError(Kind::kEmpty, "mesh has no vertices or triangles");
    if (chart_ && chart_->coords.size() != vertices_.size())
      throw InvalidInput("chart size does not match vertex count");

    std::vector<char> used(vertices_.size(), 0);
    for (std::size_t t = 0; t < triangles_.size(); ++t) {
      const auto& tri = triangles_[t];
      for (int idx : tri)
        if (idx < 0 || idx >= m)
          throw MeshError(Kind::kIndexOutOfRange, "triangle " + std::to_string(t) +
                                                      " references vertex " + std::to_string(idx) +
                                                      " outside [0, " + std::to_string(m) + ")");
      if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2])
        throw MeshError(Kind::kDegenerateTriangle,
                        "degenerate triangle " + std::to_string(t) + " repeats a vertex");
      for (int idx : tri) used[idx] = 1;
    }
    const double diag = bounding_box_diagonal();
    for (std::size_t t = 0; t < triangles_.size(); ++t)
      if (!(triangle_area(t) > 1e-14 * diag * diag))
        throw MeshError(Kind::kZeroArea, "zero-area triangle " + std::to_string(t));
    for (std::size_t v = 0; v < used.size(); ++v)
      if (!used[v]) throw MeshError(Kind::kIsolatedVertex, "vertex " + std::to_string(v) + " is unused");

    // Triangles are joined when they share an edge.
    std::vector<int> parent(triangles_.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    std::map<std::pair<int, int>, std::vector<int>> owners;
    for (std::size_t t = 0; t < triangles_.size(); ++t)
      for (int k = 0; k < 3; ++k) {
        int a = triangles_[t][k], b = triangles_[t][(k + 1) % 3];
        owners[{std::min(a, b), std::max(a, b)}].push_back(static_cast<int>(t));
      }
    for (const auto& [edge, tris] : owners) {
      if (tris.size() > 2)
        throw MeshError(Kind::kNonManifoldEdge, "edge (" + std::to_string(edge.first) + ", " +
                                                    std::to_string(edge.second) + ") is shared by " +
                                                    std::to_string(tris.size()) + " triangles");
      if (tris.size() == 2) parent[find(tris[0])] = find(tris[1]);
    }
    const int root = find(0);
    for (std::size_t t = 1; t < triangles_.size(); ++t)
      if (find(static_cast<int>(t)) != root)
        throw MeshError(Kind::kDisconnected, "mesh is disconnected (triangle " + std::to_string(t) +
                                                 " not reachable from triangle 0)");
  }

  std::vector<Eigen::Vector3d> vertices_;
  std::vector<Triangle> triangles_;
  std::optional<Chart> chart_;
};

namespace detail {

// Number of steps of size `step` in `range`, or nullopt when it does not divide.
inline std::optional<int> divide_range(double range, double step) {
  if (!(step > 0.0)) return std::nullopt;
  double q = range / step;
  double r = std::round(q);
  if (r < 1.0 || std::abs(q - r) > 1e-9 * std::max(1.0, q)) return std::nullopt;
  return static_cast<int>(r);
}

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace detail

/// Latitude-longitude sphere. Vertex 0 is the north pole, the last vertex the
/// south pole; ring k (colatitude k*lat_step) holds 360/lon_step vertices.
/// Chart = (colatitude, longitude) in radians, longitude periodic.
inline TriangleMesh generate_sphere_mesh(double lat_step, double lon_step, double radius = 1.0) {
  if (!(lat_step > 0.0 && lat_step <= 90.0))
    throw InvalidInput("sphere lat_step must lie in (0, 90]");
  if (!(lon_step > 0.0 && lon_step <= 180.0))
    throw InvalidInput("sphere lon_step must lie in (0, 180]");
  if (!(radius > 0.0)) throw InvalidInput("sphere radius must be positive");
  auto nlat = detail::divide_range(180.0, lat_step);
  auto nlon = detail::divide_range(360.0, lon_step);
  if (!nlat) throw InvalidInput("lat_step does not divide 180 degrees");
  if (!nlon) throw InvalidInput("lon_step does not divide 360 degrees");
  if (*nlon < 3) throw InvalidInput("lon_step must give at least 3 longitudes");
  const int rings = *nlat - 1;
  const int per_ring = *nlon;

  std::vector<Eigen::Vector3d> v;
  Chart chart;
  chart.period = {0.0, 2.0 * std::numbers::pi};
  v.reserve(2 + rings * per_ring);
  v.emplace_back(0.0, 0.0, radius);
  chart.coords.emplace_back(0.0, 0.0);
  for (int k = 1; k <= rings; ++k) {
    const double theta = detail::deg2rad(k * lat_step);
    for (int j = 0; j < per_ring; ++j) {
      const double phi = detail::deg2rad(j * lon_step);
      v.emplace_back(radius * std::sin(theta) * std::cos(phi), radius * std::sin(theta) * std::sin(phi),
                     radius * std::cos(theta));
      chart.coords.emplace_back(theta, phi);
    }
  }
  v.emplace_back(0.0, 0.0, -radius);
  chart.coords.emplace_back(std::numbers::pi, 0.0);
  chart.singular.assign(v.size(), 0);
  chart.singular.front() = chart.singular.back() = 1;

  const int south = static_cast<int>(v.size()) - 1;
  auto ring = [&](int k, int j) { return 1 + (k - 1) * per_ring + (j % per_ring); };
  std::vector<Triangle> t;
  t.reserve(2 * per_ring * rings);
  for (int j = 0; j < per_ring; ++j) t.push_back({0, ring(1, j), ring(1, j + 1)});
  for (int k = 1; k < rings; ++k)
    for (int j = 0; j < per_ring; ++j) {
      const int a = ring(k, j), b = ring(k, j + 1), c = ring(k + 1, j + 1), d = ring(k + 1, j);
      t.push_back({a, d, c});
      t.push_back({a, c, b});
    }
  for (int j = 0; j < per_ring; ++j) t.push_back({ring(rings, j), south, ring(rings, j + 1)});
  return TriangleMesh(std::move(v), std::move(t), std::move(chart));
}

/// Open cylinder x^2 + y^2 = radius^2, 0 <= z <= height, no caps.
/// Vertex j + k * (360/theta_step) sits at angle j*theta_step, height k*z_step.
/// Chart = (angle in radians, z), angle periodic.
inline TriangleMesh generate_cylinder_mesh(double theta_step, double z_step, double radius = 1.0,
                                           double height = 20.0) {
  if (!(radius > 0.0) || !(height > 0.0)) throw InvalidInput("cylinder radius and height must be positive");
  auto ntheta = detail::divide_range(360.0, theta_step);
  auto nz = detail::divide_range(height, z_step);
  if (!ntheta) throw InvalidInput("theta_step does not divide 360 degrees");
  if (!nz) throw InvalidInput("z_step does not divide the cylinder height");
  if (*ntheta < 3) throw InvalidInput("theta_step must give at least 3 angles");
  const int per_ring = *ntheta;
  const int rings = *nz + 1;

  std::vector<Eigen::Vector3d> v;
  Chart chart;
  chart.period = {2.0 * std::numbers::pi, 0.0};
  for (int k = 0; k < rings; ++k) {
    const double z = k * z_step;
    for (int j = 0; j < per_ring; ++j) {
      const double th = detail::deg2rad(j * theta_step);
      v.emplace_back(radius * std::cos(th), radius * std::sin(th), z);
      chart.coords.emplace_back(th, z);
    }
  }
  auto idx = [&](int k, int j) { return k * per_ring + (j % per_ring); };
  std::vector<Triangle> t;
  for (int k = 0; k + 1 < rings; ++k)
    for (int j = 0; j < per_ring; ++j) {
      const int a = idx(k + 1, j), b = idx(k + 1, j + 1), c = idx(k, j + 1), d = idx(k, j);
      t.push_back({a, d, c});
      t.push_back({a, c, b});
    }
  return TriangleMesh(std::move(v), std::move(t), std::move(chart));
}

/// Reads an OFF file ("OFF", counts line, vertex lines, face lines). Faces must
/// be triangles. '#' starts a comment.
inline TriangleMesh load_mesh(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string raw;
  std::size_t lineno = 0;
  auto next_line = [&](std::string& out) {
    while (std::getline(in, raw)) {
      ++lineno;
      auto hash = raw.find('#');
      if (hash != std::string::npos) raw.erase(hash);
      auto t = io::trim(raw);
      if (!t.empty()) {
        out = std::string(t);
        return true;
      }
    }
    return false;
  };
  std::string line;
  if (!next_line(line) || line.rfind("OFF", 0) != 0) throw ParseError("malformed OFF header", lineno);
  std::string rest(io::trim(std::string_view(line).substr(3)));
  if (rest.empty() && !next_line(rest)) throw ParseError("missing OFF counts line", lineno);
  long nv = -1, nf = -1, ne = 0;
  {
    std::istringstream ss(rest);
    if (!(ss >> nv >> nf) || nv <= 0 || nf <= 0) throw ParseError("malformed OFF counts line", lineno);
    ss >> ne;
  }
  std::vector<Eigen::Vector3d> vertices;
  vertices.reserve(nv);
  for (long i = 0; i < nv; ++i) {
    if (!next_line(line)) throw ParseError("unexpected end of file in vertex list", lineno);
    std::istringstream ss(line);
    double x, y, z;
    if (!(ss >> x >> y >> z)) throw ParseError("malformed vertex line", lineno);
    vertices.emplace_back(x, y, z);
  }
  std::vector<Triangle> tris;
  tris.reserve(nf);
  for (long i = 0; i < nf; ++i) {
    if (!next_line(line)) throw ParseError("unexpected end of file in face list", lineno);
    std::istringstream ss(line);
    long k;
    Triangle t;
    if (!(ss >> k)) throw ParseError("malformed face line", lineno);
    if (k != 3) throw ParseError("only triangular faces are supported", lineno);
    if (!(ss >> t[0] >> t[1] >> t[2])) throw ParseError("malformed face line", lineno);
    tris.push_back(t);
  }
  return TriangleMesh(std::move(vertices), std::move(tris));
}

inline void write_mesh(const TriangleMesh& mesh, const std::filesystem::path& path) {
  io::write_atomically(path, [&](std::ostream& out) {
    out << "OFF\n" << mesh.num_vertices() << ' ' << mesh.num_triangles() << " 0\n";
    for (const auto& v : mesh.vertices())
      out << io::format_double(v.x()) << ' ' << io::format_double(v.y()) << ' ' << io::format_double(v.z())
          << '\n';
    for (const auto& t : mesh.triangles()) out << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
  });
}

// ---------------------------------------------------------------------------
// Observations

struct NodeIndex {
  int value;
  friend bool operator==(NodeIndex, NodeIndex) = default;
};

/// Observation site: a mesh node, or a point on the triangulated surface.
using Location = std::variant<NodeIndex, Eigen::Vector3d>;

/// Raw observations y at sites S with noise scale tau.
/// tau == 0 selects interpolation at nodes; tau > 0 smoothing at arbitrary points.
struct ObservationSet {
  std::vector<Location> locations;
  std::vector<double> values;
  double tau = 0.0;

  std::size_t size() const { return values.size(); }

  static ObservationSet at_nodes(const std::vector<int>& nodes, const std::vector<double>& values,
                                 double tau = 0.0) {
    ObservationSet o;
    for (int n : nodes) o.locations.emplace_back(NodeIndex{n});
    o.values = values;
    o.tau = tau;
    return o;
  }
};

enum class Scenario { kInterpolation = 1, kSmoothing = 2 };

/// Observations attached to a mesh: the n x m projection P_n (rows of
/// barycentric weights) and, for interpolation, the node index set I.
struct BoundObservations {
  Scenario scenario = Scenario::kInterpolation;
  Eigen::SparseMatrix<double, Eigen::RowMajor> projection;
  std::vector<int> nodes;  // I, observation order; interpolation only
  double tau = 0.0;

  Eigen::Index size() const { return projection.rows(); }
  Eigen::Index mesh_size() const { return projection.cols(); }
};

/// Barycentric coordinates of the point of triangle (a, b, c) closest to p.
inline Eigen::Vector3d closest_point_barycentric(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                                 const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  const Eigen::Vector3d ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return {1, 0, 0};
  const Eigen::Vector3d bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return {0, 1, 0};
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    const double v = d1 / (d1 - d3);
    return {1 - v, v, 0};
  }
  const Eigen::Vector3d cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return {0, 0, 1};
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    const double w = d2 / (d2 - d6);
    return {1 - w, 0, w};
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return {0, 1 - w, w};
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return {1 - v - w, v, w};
}

/// Attaches observations to the mesh.
///
/// Interpolation (tau == 0): every location must be a distinct node; P_n has
/// unit rows. Smoothing (tau > 0): points are located on the closest triangle
/// and must lie within `tolerance` of it (default 1e-6 * bounding-box
/// diagonal); each row holds the three barycentric weights.
inline BoundObservations bind_observations(const TriangleMesh& mesh, const ObservationSet& obs,
                                           std::optional<double> tolerance = std::nullopt) {
  const std::size_t n = obs.size();
  const int m = static_cast<int>(mesh.num_vertices());
  if (n == 0) throw InvalidInput("observation set is empty");
  if (obs.locations.size() != n) throw InvalidInput("locations and values differ in length");
  if (!(obs.tau >= 0.0) || !std::isfinite(obs.tau)) throw InvalidInput("tau must be finite and non-negative");
  for (double y : obs.values)
    if (!std::isfinite(y)) throw InvalidInput("observation values must be finite");

  BoundObservations bound;
  bound.tau = obs.tau;
  bound.scenario = obs.tau > 0.0 ? Scenario::kSmoothing : Scenario::kInterpolation;
  bound.projection.resize(static_cast<Eigen::Index>(n), m);
  std::vector<Eigen::Triplet<double>> trip;

  if (bound.scenario == Scenario::kInterpolation) {
    std::vector<char> seen(m, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* node = std::get_if<NodeIndex>(&obs.locations[i]);
      if (!node) throw InvalidInput("tau = 0 requires observations located at mesh nodes");
      if (node->value < 0 || node->value >= m)
        throw BindingError("observation node " + std::to_string(node->value) + " out of range");
      if (seen[node->value]) throw InvalidInput("duplicate observation node " + std::to_string(node->value));
      seen[node->value] = 1;
      bound.nodes.push_back(node->value);
      trip.emplace_back(static_cast<int>(i), node->value, 1.0);
    }
  } else {
    const double tol = tolerance.value_or(1e-6 * mesh.bounding_box_diagonal());
    for (std::size_t i = 0; i < n; ++i) {
      if (const auto* node = std::get_if<NodeIndex>(&obs.locations[i])) {
        if (node->value < 0 || node->value >= m)
          throw BindingError("observation node " + std::to_string(node->value) + " out of range");
        trip.emplace_back(static_cast<int>(i), node->value, 1.0);
        continue;
      }
      const auto& p = std::get<Eigen::Vector3d>(obs.locations[i]);
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_t = 0;
      Eigen::Vector3d best_w;
      for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const auto& tri = mesh.triangle(t);
        const auto& a = mesh.vertex(tri[0]);
        const auto& b = mesh.vertex(tri[1]);
        const auto& c = mesh.vertex(tri[2]);
        Eigen::Vector3d w = closest_point_barycentric(p, a, b, c);
        double d = (w[0] * a + w[1] * b + w[2] * c - p).norm();
        if (d < best) {
          best = d;
          best_t = t;
          best_w = w;
        }
      }
      if (!(best <= tol))
        throw BindingError("observation " + std::to_string(i) + " lies " + std::to_string(best) +
                           " from the surface (tolerance " + std::to_string(tol) + ")");
      best_w = best_w.cwiseMax(0.0).cwiseMin(1.0);
      best_w /= best_w.sum();
      const auto& tri = mesh.triangle(best_t);
      for (int k = 0; k < 3; ++k)
        if (best_w[k] != 0.0) trip.emplace_back(static_cast<int>(i), tri[k], best_w[k]);
    }
  }
  bound.projection.setFromTriplets(trip.begin(), trip.end());
  bound.projection.makeCompressed();
  return bound;
}

/// Reads observations from CSV: header `node_index,value` or `x,y,z,value`.
inline ObservationSet load_observations_csv(const std::filesystem::path& path, double tau) {
  auto table = io::read_csv(path);
  ObservationSet obs;
  obs.tau = tau;
  const int c_node = table.column("node_index"), c_val = table.column("value");
  const int cx = table.column("x"), cy = table.column("y"), cz = table.column("z");
  if (c_val < 0) throw ParseError(path.string() + ": missing column 'value'");
  const bool by_node = c_node >= 0;
  if (!by_node && (cx < 0 || cy < 0 || cz < 0))
    throw ParseError(path.string() + ": expected columns node_index,value or x,y,z,value");
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    double v;
    if (!io::parse_double(row[c_val], v)) throw ParseError("bad value", table.lines[r]);
    if (by_node) {
      long idx;
      if (!io::parse_long(row[c_node], idx)) throw ParseError("bad node_index", table.lines[r]);
      obs.locations.emplace_back(NodeIndex{static_cast<int>(idx)});
    } else {
      Eigen::Vector3d p;
      if (!io::parse_double(row[cx], p.x()) || !io::parse_double(row[cy], p.y()) ||
          !io::parse_double(row[cz], p.z()))
        throw ParseError("bad coordinate", table.lines[r]);
      obs.locations.emplace_back(p);
    }
    obs.values.push_back(v);
  }
  if (obs.values.empty()) throw ParseError(path.string() + ": no observations");
  return obs;
}

inline void write_observations_csv(const ObservationSet& obs, const std::filesystem::path& path) {
  const bool by_node = std::all_of(obs.locations.begin(), obs.locations.end(),
                                   [](const Location& l) { return std::holds_alternative<NodeIndex>(l); });
  if (!by_node && std::any_of(obs.locations.begin(), obs.locations.end(),
                              [](const Location& l) { return std::holds_alternative<NodeIndex>(l); }))
    throw InvalidInput("cannot write mixed node/point observations to one CSV");
  io::write_atomically(path, [&](std::ostream& out) {
    out << (by_node ? "node_index,value\n" : "x,y,z,value\n");
    for (std::size_t i = 0; i < obs.size(); ++i) {
      if (by_node) {
        out << std::get<NodeIndex>(obs.locations[i]).value;
      } else {
        const auto& p = std::get<Eigen::Vector3d>(obs.locations[i]);
        out << io::format_double(p.x()) << ',' << io::format_double(p.y()) << ',' << io::format_double(p.z());
      }
      out << ',' << io::format_double(obs.values[i]) << '\n';
    }
  });
}

}  // namespace manifold_splines
