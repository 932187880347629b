#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "io.hpp"

namespace manifold_splines {

/// Three-dimensional Franke function on [0,1]^3 with per-axis scalings (ax, ay, az).
inline double franke3d(double x, double y, double z, double ax = 0.4, double ay = 0.4, double az = 1.0) {
  auto sq = [](double v) { return v * v; };
  const double X = 9 * x, Y = 9 * y, Z = 9 * z;
  return 0.75 * std::exp(-(sq(ax * (X - 2)) + sq(ay * (Y - 2)) + sq(az * (Z - 2))) / 4) +
         0.75 * std::exp(-(sq(ax * (X + 1)) / 49 + sq(ay * (Y + 1)) / 10 + sq(az * (Z + 1)) / 10)) +
         0.5 * std::exp(-(sq(ax * (X - 7)) + sq(ay * (Y - 3)) + sq(az * (Z - 5))) / 4) -
         0.2 * std::exp(-(sq(ax * (X - 4)) + sq(ay * (Y - 7)) + sq(az * (Z - 5))));
}

/// Franke test field on the unit cylinder of height 20, at angle theta and height z.
inline double franke_cylinder(double theta, double z) {
  if (!(z >= 0.0 && z <= 20.0)) throw InvalidInput("cylinder height must lie in [0, 20]");
  return franke3d((std::cos(theta) + 1) / 2, (std::sin(theta) + 1) / 2, z / 20);
}

/// Values on a lat/lon grid; NaN marks a masked (missing) cell.
struct GriddedField {
  std::vector<double> lat, lon;  // strictly increasing axes
  Eigen::MatrixXd values;        // lat.size() x lon.size()
  std::string units;

  bool masked(Eigen::Index i, Eigen::Index j) const { return std::isnan(values(i, j)); }
  Eigen::Index valid_count() const { return (values.array() == values.array()).count(); }

  double mean() const {
    double s = 0.0;
    Eigen::Index n = 0;
    for (Eigen::Index i = 0; i < values.rows(); ++i)
      for (Eigen::Index j = 0; j < values.cols(); ++j)
        if (!masked(i, j)) {
          s += values(i, j);
          ++n;
        }
    if (n == 0) throw InvalidInput("field has no valid cells");
    return s / static_cast<double>(n);
  }
};

/// Reads `lat,lon,value`; an empty value cell is masked, grid points absent
/// from the file are masked too.
inline GriddedField load_gridded_csv(const std::filesystem::path& path) {
  const auto table = io::read_csv(path);
  const int c_lat = table.column("lat"), c_lon = table.column("lon"), c_val = table.column("value");
  if (c_lat < 0 || c_lon < 0 || c_val < 0) throw ParseError(path.string() + ": header must contain lat,lon,value", 1);
  std::map<std::pair<double, double>, double> cells;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    double la, lo, v = std::numeric_limits<double>::quiet_NaN();
    if (!io::parse_double(row[c_lat], la) || !io::parse_double(row[c_lon], lo))
      throw ParseError("malformed coordinate", table.lines[r]);
    if (!io::trim(row[c_val]).empty() && !io::parse_double(row[c_val], v))
      throw ParseError("malformed value", table.lines[r]);
    if (!cells.emplace(std::make_pair(la, lo), v).second)
      throw ParseError("duplicate grid cell (" + row[c_lat] + ", " + row[c_lon] + ")", table.lines[r]);
  }
  GriddedField f;
  for (const auto& [key, v] : cells) {
    f.lat.push_back(key.first);
    f.lon.push_back(key.second);
  }
  for (auto* axis : {&f.lat, &f.lon}) {
    std::sort(axis->begin(), axis->end());
    axis->erase(std::unique(axis->begin(), axis->end()), axis->end());
  }
  f.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(f.lat.size()), static_cast<Eigen::Index>(f.lon.size()),
                                       std::numeric_limits<double>::quiet_NaN());
  for (const auto& [key, v] : cells) {
    const auto i = std::lower_bound(f.lat.begin(), f.lat.end(), key.first) - f.lat.begin();
    const auto j = std::lower_bound(f.lon.begin(), f.lon.end(), key.second) - f.lon.begin();
    f.values(i, j) = v;
  }
  return f;
}

inline void write_gridded_csv(const GriddedField& f, const std::filesystem::path& path) {
  if (f.values.rows() != static_cast<Eigen::Index>(f.lat.size()) ||
      f.values.cols() != static_cast<Eigen::Index>(f.lon.size()))
    throw InvalidInput("grid values do not match the axes");
  io::write_atomically(path, [&](std::ostream& out) {
    out << "lat,lon,value\n";
    for (std::size_t i = 0; i < f.lat.size(); ++i)
      for (std::size_t j = 0; j < f.lon.size(); ++j) {
        out << io::format_double(f.lat[i]) << ',' << io::format_double(f.lon[j]) << ',';
        if (!f.masked(i, j)) out << io::format_double(f.values(i, j));
        out << '\n';
      }
  });
}

enum class ScoreConvention { kPaper, kGaussian };

/// Per-site predictive score. kPaper: -((yhat - y) / s2)^2 - log s2.
/// kGaussian: -(yhat - y)^2 / s2 - log s2.
inline double predictive_score(double y_hat, double sigma2_hat, double y_true,
                               ScoreConvention convention = ScoreConvention::kPaper) {
  if (!(sigma2_hat > 0.0)) throw InvalidInput("predictive variance must be positive");
  const double e = y_hat - y_true;
  const double fit = convention == ScoreConvention::kPaper ? std::pow(e / sigma2_hat, 2) : e * e / sigma2_hat;
  return -fit - std::log(sigma2_hat);
}

}  // namespace manifold_splines
