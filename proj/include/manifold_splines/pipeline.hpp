#pragma once

// End-to-end commands behind the CLI. A run is described by one JSON document:
//
// {
//   "mesh": {"generator": "sphere", "lat_step": 15, "lon_step": 15, "radius": 1}
//         | {"generator": "cylinder", "theta_step": 5, "z_step": 0.5, "radius": 1, "height": 20}
//         | {"file": "mesh.off", "chart": "chart.csv", "period": [6.283185307179586, 0]},
//   "observations": {"file": "obs.csv"}
//                 | {"synthetic": {"n": 10, "seed": 1, "field": "franke", "noise": 0}},
//   "model": {"tau": 0, "estimate_tau": false, "sigma": 1, "alpha": 1e-3, "solver": "direct",
//             "anisotropy": "none" | "fit" | "fit-isotropic" | {"angle": 0.3, "log_ratio": 1}},
//   "simulation": {"n_sims": 100, "seed": 1, "kind": "uk"},
//   "score": {"truth": "truth.csv" | "field", "convention": "paper"},
//   "sphere": {"truncation": 40},
//   "output": "out"
// }
//
// Only "mesh" and "observations" are required. Relative paths are resolved
// against the directory of the config file.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "data.hpp"
#include "design.hpp"
#include "error.hpp"
#include "fem.hpp"
#include "gmrf.hpp"
#include "io.hpp"
#include "likelihood.hpp"
#include "mesh.hpp"
#include "solver.hpp"
#include "sphere_ref.hpp"

namespace manifold_splines::pipeline {

using json = nlohmann::ordered_json;

struct MeshSpec {
  std::string generator;  // "sphere", "cylinder" or empty for a file
  double lat_step = 0.0, lon_step = 0.0;
  double theta_step = 0.0, z_step = 0.0;
  double radius = 1.0, height = 20.0;
  std::filesystem::path file, chart;
  std::array<double, 2> period{0.0, 0.0};
};

struct ObservationSpec {
  std::filesystem::path file;
  bool synthetic = false;
  int n = 0;
  std::uint64_t seed = 0;
  std::string field = "franke";
  double noise = 0.0;
};

enum class AnisotropyMode { kNone, kFixed, kFit, kFitIsotropic };

struct ModelSpec {
  double tau = 0.0;
  bool estimate_tau = false;
  std::optional<double> sigma;
  std::optional<double> alpha;
  KernelDeflatedSolver::Method solver = KernelDeflatedSolver::Method::kDirect;
  AnisotropyMode anisotropy = AnisotropyMode::kNone;
  AnisotropyParams fixed;
};

struct SimulationSpec {
  int n_sims = 100;
  std::uint64_t seed = 0;
  SimulationKind kind = SimulationKind::kUniversalKriging;
};

struct ScoreSpec {
  std::filesystem::path truth;  // empty: evaluate the synthetic field
  ScoreConvention convention = ScoreConvention::kPaper;
};

struct RunConfig {
  MeshSpec mesh;
  ObservationSpec observations;
  ModelSpec model;
  SimulationSpec simulation;
  ScoreSpec score;
  int truncation = 40;
  std::filesystem::path output = "out";
};

/// Command-line values that take precedence over the config.
struct Overrides {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<int> n_sims;
  std::optional<SimulationKind> kind;
  std::optional<ScoreConvention> convention;
  std::optional<std::filesystem::path> truth;
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError("unknown key '" + where + "." + key + "'");
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) throw ConfigError(where + " must be a number");
  return j.get<double>();
}

inline std::int64_t integer(const json& j, const std::string& where) {
  if (!j.is_number_integer() && !j.is_number_unsigned()) throw ConfigError(where + " must be an integer");
  return j.get<std::int64_t>();
}

inline std::string string(const json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError(where + " must be a string");
  return j.get<std::string>();
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace detail

inline SimulationKind parse_kind(const std::string& s) {
  if (s == "uk") return SimulationKind::kUniversalKriging;
  if (s == "sk") return SimulationKind::kSimpleKriging;
  throw ConfigError("kind must be 'uk' or 'sk', got '" + s + "'");
}

inline ScoreConvention parse_convention(const std::string& s) {
  if (s == "paper") return ScoreConvention::kPaper;
  if (s == "gaussian") return ScoreConvention::kGaussian;
  throw ConfigError("score convention must be 'paper' or 'gaussian', got '" + s + "'");
}

inline RunConfig parse_config(const json& j, const std::filesystem::path& base_dir = {}) {
  using namespace detail;
  check_keys(j, "config", {"mesh", "observations", "model", "simulation", "score", "sphere", "output"});
  RunConfig c;

  if (!j.contains("mesh")) throw ConfigError("missing 'mesh' block");
  const json& m = j["mesh"];
  check_keys(m, "mesh",
             {"generator", "lat_step", "lon_step", "theta_step", "z_step", "radius", "height", "file", "chart", "period"});
  const bool has_gen = m.contains("generator"), has_file = m.contains("file");
  if (has_gen == has_file) throw ConfigError("mesh needs exactly one of 'generator' or 'file'");
  if (has_gen) {
    c.mesh.generator = string(m["generator"], "mesh.generator");
    if (m.contains("radius")) c.mesh.radius = number(m["radius"], "mesh.radius");
    if (c.mesh.generator == "sphere") {
      if (!m.contains("lat_step") || !m.contains("lon_step")) throw ConfigError("sphere mesh needs lat_step and lon_step");
      c.mesh.lat_step = number(m["lat_step"], "mesh.lat_step");
      c.mesh.lon_step = number(m["lon_step"], "mesh.lon_step");
    } else if (c.mesh.generator == "cylinder") {
      if (!m.contains("theta_step") || !m.contains("z_step")) throw ConfigError("cylinder mesh needs theta_step and z_step");
      c.mesh.theta_step = number(m["theta_step"], "mesh.theta_step");
      c.mesh.z_step = number(m["z_step"], "mesh.z_step");
      if (m.contains("height")) c.mesh.height = number(m["height"], "mesh.height");
    } else {
      throw ConfigError("mesh.generator must be 'sphere' or 'cylinder'");
    }
  } else {
    c.mesh.file = resolve(base_dir, string(m["file"], "mesh.file"));
    if (m.contains("chart")) c.mesh.chart = resolve(base_dir, string(m["chart"], "mesh.chart"));
    if (m.contains("period")) {
      if (!m["period"].is_array() || m["period"].size() != 2) throw ConfigError("mesh.period must be [p1, p2]");
      c.mesh.period = {number(m["period"][0], "mesh.period[0]"), number(m["period"][1], "mesh.period[1]")};
    }
  }

  if (!j.contains("observations")) throw ConfigError("missing 'observations' block");
  const json& o = j["observations"];
  check_keys(o, "observations", {"file", "synthetic"});
  if (o.contains("file") == o.contains("synthetic"))
    throw ConfigError("observations need exactly one of 'file' or 'synthetic'");
  if (o.contains("file")) {
    c.observations.file = resolve(base_dir, string(o["file"], "observations.file"));
  } else {
    const json& s = o["synthetic"];
    check_keys(s, "observations.synthetic", {"n", "seed", "field", "noise"});
    c.observations.synthetic = true;
    if (!s.contains("n")) throw ConfigError("observations.synthetic needs 'n'");
    c.observations.n = static_cast<int>(integer(s["n"], "observations.synthetic.n"));
    if (c.observations.n < 1) throw ConfigError("observations.synthetic.n must be at least 1");
    if (s.contains("seed")) c.observations.seed = static_cast<std::uint64_t>(integer(s["seed"], "observations.synthetic.seed"));
    if (s.contains("field")) c.observations.field = string(s["field"], "observations.synthetic.field");
    if (c.observations.field != "franke" && c.observations.field != "smooth")
      throw ConfigError("observations.synthetic.field must be 'franke' or 'smooth'");
    if (s.contains("noise")) c.observations.noise = number(s["noise"], "observations.synthetic.noise");
    if (!(c.observations.noise >= 0.0)) throw ConfigError("observations.synthetic.noise must be non-negative");
  }

  if (j.contains("model")) {
    const json& md = j["model"];
    check_keys(md, "model", {"tau", "estimate_tau", "sigma", "alpha", "solver", "anisotropy"});
    if (md.contains("tau")) c.model.tau = number(md["tau"], "model.tau");
    if (!(c.model.tau >= 0.0)) throw ConfigError("model.tau must be non-negative");
    if (md.contains("estimate_tau")) {
      if (!md["estimate_tau"].is_boolean()) throw ConfigError("model.estimate_tau must be a boolean");
      c.model.estimate_tau = md["estimate_tau"].get<bool>();
    }
    if (c.model.estimate_tau && c.model.tau == 0.0)
      throw ConfigError("model.estimate_tau needs a positive starting tau (smoothing)");
    if (md.contains("sigma")) {
      c.model.sigma = number(md["sigma"], "model.sigma");
      if (!(*c.model.sigma > 0.0)) throw ConfigError("model.sigma must be positive");
    }
    if (md.contains("alpha")) {
      c.model.alpha = number(md["alpha"], "model.alpha");
      if (!(*c.model.alpha > 0.0)) throw ConfigError("model.alpha must be positive");
    }
    if (md.contains("solver")) {
      const auto s = string(md["solver"], "model.solver");
      if (s == "direct") c.model.solver = KernelDeflatedSolver::Method::kDirect;
      else if (s == "cg") c.model.solver = KernelDeflatedSolver::Method::kConjugateGradient;
      else throw ConfigError("model.solver must be 'direct' or 'cg'");
    }
    if (md.contains("anisotropy")) {
      const json& a = md["anisotropy"];
      if (a.is_string()) {
        const auto s = a.get<std::string>();
        if (s == "none") c.model.anisotropy = AnisotropyMode::kNone;
        else if (s == "fit") c.model.anisotropy = AnisotropyMode::kFit;
        else if (s == "fit-isotropic") c.model.anisotropy = AnisotropyMode::kFitIsotropic;
        else throw ConfigError("model.anisotropy must be 'none', 'fit', 'fit-isotropic' or {angle, log_ratio}");
      } else {
        check_keys(a, "model.anisotropy", {"angle", "log_ratio"});
        c.model.anisotropy = AnisotropyMode::kFixed;
        if (a.contains("angle")) c.model.fixed.angle = number(a["angle"], "model.anisotropy.angle");
        if (a.contains("log_ratio")) c.model.fixed.log_ratio = number(a["log_ratio"], "model.anisotropy.log_ratio");
      }
    }
    if (c.model.estimate_tau && c.model.anisotropy == AnisotropyMode::kFixed)
      throw ConfigError("model.estimate_tau cannot be combined with a fixed anisotropy");
  }

  if (j.contains("simulation")) {
    const json& s = j["simulation"];
    check_keys(s, "simulation", {"n_sims", "seed", "kind"});
    if (s.contains("n_sims")) c.simulation.n_sims = static_cast<int>(integer(s["n_sims"], "simulation.n_sims"));
    if (s.contains("seed")) c.simulation.seed = static_cast<std::uint64_t>(integer(s["seed"], "simulation.seed"));
    if (s.contains("kind")) c.simulation.kind = parse_kind(string(s["kind"], "simulation.kind"));
  }
  if (j.contains("score")) {
    const json& s = j["score"];
    check_keys(s, "score", {"truth", "convention"});
    if (s.contains("truth")) {
      const auto t = string(s["truth"], "score.truth");
      if (t != "field") c.score.truth = resolve(base_dir, t);
    }
    if (s.contains("convention")) c.score.convention = parse_convention(string(s["convention"], "score.convention"));
  }
  if (j.contains("sphere")) {
    const json& s = j["sphere"];
    check_keys(s, "sphere", {"truncation"});
    if (s.contains("truncation")) c.truncation = static_cast<int>(integer(s["truncation"], "sphere.truncation"));
  }
  if (j.contains("output")) c.output = resolve(base_dir, string(j["output"], "output"));
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path());
}

inline void apply(RunConfig& c, const Overrides& o) {
  if (o.out) c.output = *o.out;
  if (o.seed) c.simulation.seed = *o.seed;
  if (o.alpha) {
    if (!(*o.alpha > 0.0)) throw ConfigError("--alpha must be positive");
    c.model.alpha = *o.alpha;
  }
  if (o.n_sims) c.simulation.n_sims = *o.n_sims;
  if (o.kind) c.simulation.kind = *o.kind;
  if (o.convention) c.score.convention = *o.convention;
  if (o.truth) c.score.truth = *o.truth;
}

/// Chart file: node_index,c1,c2[,singular].
inline Chart load_chart_csv(const std::filesystem::path& path, std::size_t m, std::array<double, 2> period) {
  const auto table = io::read_csv(path);
  const int ci = table.column("node_index"), c1 = table.column("c1"), c2 = table.column("c2"),
            cs = table.column("singular");
  if (ci < 0 || c1 < 0 || c2 < 0) throw ParseError(path.string() + ": expected columns node_index,c1,c2", 1);
  Chart chart;
  chart.period = period;
  chart.coords.assign(m, Eigen::Vector2d::Zero());
  chart.singular.assign(m, 0);
  std::vector<char> seen(m, 0);
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    long idx;
    double a, b;
    if (!io::parse_long(row[ci], idx) || idx < 0 || static_cast<std::size_t>(idx) >= m || seen[idx])
      throw ParseError("bad or repeated node_index", table.lines[r]);
    if (!io::parse_double(row[c1], a) || !io::parse_double(row[c2], b)) throw ParseError("bad chart coordinate", table.lines[r]);
    seen[idx] = 1;
    chart.coords[idx] = {a, b};
    if (cs >= 0) {
      long s;
      if (!io::parse_long(row[cs], s)) throw ParseError("bad singular flag", table.lines[r]);
      chart.singular[idx] = s != 0;
    }
  }
  if (std::count(seen.begin(), seen.end(), 0) > 0) throw ParseError(path.string() + ": chart does not cover every node");
  return chart;
}

inline void write_chart_csv(const Chart& chart, const std::filesystem::path& path) {
  io::write_atomically(path, [&](std::ostream& out) {
    out << "node_index,c1,c2,singular\n";
    for (std::size_t i = 0; i < chart.coords.size(); ++i)
      out << i << ',' << io::format_double(chart.coords[i][0]) << ',' << io::format_double(chart.coords[i][1]) << ','
          << (chart.is_singular(i) ? 1 : 0) << '\n';
  });
}

inline TriangleMesh build_mesh(const MeshSpec& s) {
  if (s.generator == "sphere") return generate_sphere_mesh(s.lat_step, s.lon_step, s.radius);
  if (s.generator == "cylinder") return generate_cylinder_mesh(s.theta_step, s.z_step, s.radius, s.height);
  TriangleMesh mesh = load_mesh(s.file);
  if (s.chart.empty()) return mesh;
  return TriangleMesh(mesh.vertices(), mesh.triangles(), load_chart_csv(s.chart, mesh.num_vertices(), s.period));
}

/// Built-in test fields evaluated at a surface point. "franke" on a cylinder
/// generator is the cylinder Franke field; elsewhere the unit cube is reached by
/// (p + 1) / 2.
inline double synthetic_field(const RunConfig& c, const Eigen::Vector3d& p) {
  if (c.observations.field == "smooth") return std::sin(2 * p.x()) + std::cos(3 * p.y()) * p.z();
  if (c.mesh.generator == "cylinder")
    return franke_cylinder(std::atan2(p.y(), p.x()), std::clamp(p.z(), 0.0, 20.0));
  return franke3d((p.x() + 1) / 2, (p.y() + 1) / 2, (p.z() + 1) / 2);
}

/// With tau = 0, point observations are moved to their nearest node, which
/// must lie within 1e-6 of the bounding-box diagonal.
inline ObservationSet snap_to_nodes(const TriangleMesh& mesh, const ObservationSet& obs) {
  ObservationSet out;
  out.tau = obs.tau;
  out.values = obs.values;
  const double tol = 1e-6 * mesh.bounding_box_diagonal();
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (std::holds_alternative<NodeIndex>(obs.locations[i])) {
      out.locations.push_back(obs.locations[i]);
      continue;
    }
    const auto& p = std::get<Eigen::Vector3d>(obs.locations[i]);
    int best = -1;
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < mesh.num_vertices(); ++v) {
      const double dv = (mesh.vertex(v) - p).norm();
      if (dv < d) {
        d = dv;
        best = static_cast<int>(v);
      }
    }
    if (!(d <= tol))
      throw BindingError("observation " + std::to_string(i) + " is " + std::to_string(d) +
                         " from the nearest node; tau = 0 needs observations at nodes");
    out.locations.emplace_back(NodeIndex{best});
  }
  return out;
}

inline ObservationSet build_observations(const RunConfig& c, const TriangleMesh& mesh) {
  if (!c.observations.synthetic) {
    auto obs = load_observations_csv(c.observations.file, c.model.tau);
    return c.model.tau == 0.0 ? snap_to_nodes(mesh, obs) : obs;
  }
  if (!mesh.has_chart()) throw ConfigError("synthetic observations need a mesh with chart coordinates");
  const auto nodes = maximin_node_design(mesh, c.observations.n, c.observations.seed);
  std::mt19937_64 rng = simulation_stream(c.observations.seed, std::uint64_t{1} << 40);
  std::normal_distribution<double> g;
  ObservationSet obs;
  obs.tau = c.model.tau;
  for (int v : nodes) {
    if (c.model.tau == 0.0) obs.locations.emplace_back(NodeIndex{v});
    else obs.locations.emplace_back(mesh.vertex(v));
    obs.values.push_back(synthetic_field(c, mesh.vertex(v)) + c.observations.noise * g(rng));
  }
  return obs;
}

/// Everything needed to build a posterior: mesh, data, and resolved parameters.
struct Prepared {
  TriangleMesh mesh;
  ObservationSet obs;
  AnisotropyParams beta;
  bool anisotropic = false;
  double tau = 0.0;
  std::optional<FitResult> fit;
};

inline Prepared prepare(const RunConfig& c, bool run_fit = true) {
  TriangleMesh mesh = build_mesh(c.mesh);
  ObservationSet obs = build_observations(c, mesh);
  Prepared p{std::move(mesh), std::move(obs), {}, false, c.model.tau, std::nullopt};
  const auto mode = c.model.anisotropy;
  if (mode == AnisotropyMode::kFixed) {
    if (!p.mesh.has_chart()) throw ConfigError("a fixed anisotropy needs a mesh with chart coordinates");
    p.beta = c.model.fixed.oriented();
    p.anisotropic = true;
  }
  const bool fitting = mode == AnisotropyMode::kFit || mode == AnisotropyMode::kFitIsotropic || c.model.estimate_tau;
  if (fitting && run_fit) {
    FitOptions opt;
    opt.estimate_tau = c.model.estimate_tau;
    opt.lock_isotropic = mode != AnisotropyMode::kFit;
    p.fit = manifold_splines::fit(p.mesh, p.obs, opt);
    if (mode == AnisotropyMode::kFit) {
      p.beta = p.fit->beta_hat;
      p.anisotropic = true;
    }
    p.tau = p.fit->tau_hat;
    p.obs.tau = p.tau;
  }
  return p;
}

inline Eigen::VectorXd observation_values(const ObservationSet& obs) {
  return Eigen::Map<const Eigen::VectorXd>(obs.values.data(), static_cast<Eigen::Index>(obs.values.size()));
}

struct Posterior {
  Prepared prepared;
  std::optional<PosteriorModel> model;
  std::string sigma_source, alpha_source;
};

inline Posterior build_posterior(const RunConfig& c) {
  Posterior out{prepare(c), std::nullopt, "", ""};
  const Prepared& p = out.prepared;
  FemOperators ops = p.anisotropic ? assemble(p.mesh, p.beta) : assemble(p.mesh);
  BoundObservations bound = bind_observations(p.mesh, p.obs);
  const Eigen::VectorXd y = observation_values(p.obs);
  double sigma;
  if (c.model.sigma) {
    sigma = *c.model.sigma;
    out.sigma_source = "config";
  } else if (p.fit) {
    sigma = p.fit->sigma_hat;
    out.sigma_source = "fit";
  } else {
    sigma = concentrated_loglik(ops, bound, y, p.tau).sigma_star;
    out.sigma_source = "closed-form";
  }
  PosteriorOptions opt;
  opt.alpha = c.model.alpha;
  opt.method = c.model.solver;
  out.alpha_source = c.model.alpha ? "given" : "default";
  out.model.emplace(std::move(ops), std::move(bound), y, sigma, opt);
  return out;
}

inline json model_json(const Posterior& post) {
  const PosteriorModel& m = *post.model;
  json j;
  j["scenario"] = static_cast<int>(m.scenario());
  j["m"] = m.ops().size();
  j["n"] = m.bound().size();
  j["sigma"] = m.sigma();
  j["sigma_source"] = post.sigma_source;
  j["tau"] = m.tau();
  j["beta"] = {{"angle", post.prepared.beta.angle}, {"log_ratio", post.prepared.beta.log_ratio}};
  j["anisotropic"] = post.prepared.anisotropic;
  j["alpha"] = m.alpha();
  j["alpha_source"] = post.alpha_source;
  j["spectral_bounds"] = {{"lambda_min_pos", m.spectral_bounds().lambda_min_pos},
                          {"lambda_max", m.spectral_bounds().lambda_max},
                          {"iterations", m.spectral_bounds().iterations}};
  j["a"] = m.trend_coefficient();
  j["warnings"] = m.warnings();
  return j;
}

/// Re-reads a written CSV and checks its shape.
inline void verify_csv(const std::filesystem::path& path, std::size_t rows, std::size_t cols) {
  const auto t = io::read_csv(path);
  if (t.rows.size() != rows || t.header.size() != cols)
    throw Error("output validation failed for " + path.string() + ": expected " + std::to_string(rows) + " rows of " +
                std::to_string(cols) + " columns");
  for (const auto& r : t.rows)
    if (r.size() != cols) throw Error("output validation failed for " + path.string() + ": ragged row");
}

inline void write_json(const json& j, const std::filesystem::path& path) {
  io::write_atomically(path, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
  std::ifstream in(path);
  [[maybe_unused]] const json reread = json::parse(in);
}

/// Progress and chosen parameters go to `log`.
struct Context {
  std::ostream* log = &std::cerr;
};

inline void log_model(const Context& ctx, const PosteriorModel& m, const std::string& alpha_source) {
  *ctx.log << "alpha = " << io::format_double(m.alpha()) << " (" << alpha_source << "), sigma = "
           << io::format_double(m.sigma()) << ", tau = " << io::format_double(m.tau()) << '\n';
  for (const auto& w : m.warnings()) *ctx.log << "warning: " << w << '\n';
}

// ---------------------------------------------------------------- commands

/// mesh.off, chart.csv (when the mesh has one) and mesh.json.
inline void cmd_mesh_gen(const RunConfig& c, const Context& ctx = {}) {
  const TriangleMesh mesh = build_mesh(c.mesh);
  write_mesh(mesh, c.output / "mesh.off");
  (void)load_mesh(c.output / "mesh.off");
  json j;
  j["vertices"] = mesh.num_vertices();
  j["triangles"] = mesh.num_triangles();
  j["area"] = mesh.total_area();
  j["boundary_loops"] = mesh.count_boundary_loops();
  if (mesh.has_chart()) {
    write_chart_csv(mesh.chart(), c.output / "chart.csv");
    verify_csv(c.output / "chart.csv", mesh.num_vertices(), 4);
    j["period"] = {mesh.chart().period[0], mesh.chart().period[1]};
  }
  write_json(j, c.output / "mesh.json");
  *ctx.log << "mesh: " << mesh.num_vertices() << " vertices, " << mesh.num_triangles() << " triangles\n";
}

inline void write_observations(const ObservationSet& obs, const std::filesystem::path& path) {
  write_observations_csv(obs, path);
  (void)load_observations_csv(path, obs.tau);
}

/// prediction.csv (node_index,x,y,z,mean), model.json, observations.csv.
inline void cmd_predict(const RunConfig& c, const Context& ctx = {}) {
  const Posterior post = build_posterior(c);
  const PosteriorModel& m = *post.model;
  log_model(ctx, m, post.alpha_source);
  const auto& mesh = post.prepared.mesh;
  const Eigen::VectorXd& mean = m.mean();
  io::write_atomically(c.output / "prediction.csv", [&](std::ostream& out) {
    out << "node_index,x,y,z,mean\n";
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
      const auto& v = mesh.vertex(static_cast<std::size_t>(i));
      out << i << ',' << io::format_double(v.x()) << ',' << io::format_double(v.y()) << ','
          << io::format_double(v.z()) << ',' << io::format_double(mean[i]) << '\n';
    }
  });
  verify_csv(c.output / "prediction.csv", static_cast<std::size_t>(mean.size()), 5);
  write_observations(post.prepared.obs, c.output / "observations.csv");
  json j = model_json(post);
  if (post.prepared.fit) j["fit"] = to_json(*post.prepared.fit);
  write_json(j, c.output / "model.json");
}

/// simulations.csv + simulations.json, summary.csv, model.json.
inline void cmd_simulate(const RunConfig& c, const Context& ctx = {}) {
  if (c.simulation.n_sims < 1) throw ConfigError("n_sims must be at least 1");
  const Posterior post = build_posterior(c);
  const PosteriorModel& m = *post.model;
  log_model(ctx, m, post.alpha_source);
  const SimulationBatch batch = simulate(m, c.simulation.n_sims, c.simulation.seed, c.simulation.kind);
  write_batch(batch, c.output / "simulations.csv", c.output / "simulations.json");
  verify_csv(c.output / "simulations.csv", static_cast<std::size_t>(m.ops().size()),
             3 + static_cast<std::size_t>(c.simulation.n_sims));
  write_summary(batch, c.output / "summary.csv");
  verify_csv(c.output / "summary.csv", static_cast<std::size_t>(m.ops().size()), 5);
  write_observations(post.prepared.obs, c.output / "observations.csv");
  write_json(model_json(post), c.output / "model.json");
}

/// fit.json and trace.csv.
inline void cmd_fit(const RunConfig& c, const Context& ctx = {}) {
  if (c.model.anisotropy != AnisotropyMode::kFit && c.model.anisotropy != AnisotropyMode::kFitIsotropic &&
      !c.model.estimate_tau)
    throw ConfigError("fit requested but model.anisotropy is not 'fit' or 'fit-isotropic'");
  const Prepared p = prepare(c);
  const FitResult& r = *p.fit;
  *ctx.log << "fit: angle = " << io::format_double(r.beta_hat.angle)
           << ", log_ratio = " << io::format_double(r.beta_hat.log_ratio)
           << ", loglik = " << io::format_double(r.loglik) << '\n';
  write_json(to_json(r), c.output / "fit.json");
  io::write_atomically(c.output / "trace.csv", [&](std::ostream& out) {
    out << "evaluation,start,angle,log_ratio,tau,objective,best_so_far\n";
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
      const auto& e = r.trace[i];
      out << i << ',' << e.start << ',' << io::format_double(e.beta.angle) << ','
          << io::format_double(e.beta.log_ratio) << ',' << io::format_double(e.tau) << ','
          << io::format_double(e.objective) << ',' << io::format_double(e.best_so_far) << '\n';
    }
  });
  verify_csv(c.output / "trace.csv", r.trace.size(), 7);
}

struct ScoreSummary {
  double rmse = 0.0;
  double mean_score = 0.0;
  std::size_t scored = 0;
  std::vector<int> missing;
};

/// scores.csv (node_index,truth,mean,variance,score) over nodes with positive
/// predictive variance, and score.json with RMSE and mean score.
inline ScoreSummary cmd_score(const RunConfig& c, const Context& ctx = {}) {
  const Posterior post = build_posterior(c);
  const PosteriorModel& m = *post.model;
  log_model(ctx, m, post.alpha_source);
  const auto& mesh = post.prepared.mesh;
  const Eigen::Index nodes = m.ops().size();
  std::vector<std::optional<double>> truth(static_cast<std::size_t>(nodes));
  if (c.score.truth.empty()) {
    if (!c.observations.synthetic) throw ConfigError("score needs a truth CSV unless observations are synthetic");
    for (Eigen::Index i = 0; i < nodes; ++i) truth[i] = synthetic_field(c, mesh.vertex(i));
  } else {
    const auto table = io::read_csv(c.score.truth);
    const int ci = table.column("node_index"), cv = table.column("value");
    if (ci < 0 || cv < 0) throw ParseError(c.score.truth.string() + ": expected columns node_index,value", 1);
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      long idx;
      double v;
      if (!io::parse_long(table.rows[r][ci], idx) || !io::parse_double(table.rows[r][cv], v))
        throw ParseError("bad truth row", table.lines[r]);
      if (idx < 0 || idx >= nodes) throw ParseError("truth node_index out of range", table.lines[r]);
      truth[idx] = v;
    }
  }
  const Eigen::VectorXd var = kriging_variance(m);
  const Eigen::VectorXd& mean = m.mean();
  ScoreSummary s;
  double sq = 0.0, total = 0.0;
  std::vector<Eigen::Index> rows;
  std::vector<double> scores;
  for (Eigen::Index i = 0; i < nodes; ++i) {
    if (!(var[i] > 0.0)) continue;  // observed nodes in interpolation
    if (!truth[i]) {
      s.missing.push_back(static_cast<int>(i));
      continue;
    }
    const double sc = predictive_score(mean[i], var[i], *truth[i], c.score.convention);
    sq += (mean[i] - *truth[i]) * (mean[i] - *truth[i]);
    total += sc;
    rows.push_back(i);
    scores.push_back(sc);
  }
  if (!s.missing.empty())
    *ctx.log << "warning: " << s.missing.size() << " validation nodes have no truth value and are excluded\n";
  if (rows.empty()) throw InvalidInput("no validation node has a truth value");
  s.scored = rows.size();
  s.rmse = std::sqrt(sq / static_cast<double>(rows.size()));
  s.mean_score = total / static_cast<double>(rows.size());
  io::write_atomically(c.output / "scores.csv", [&](std::ostream& out) {
    out << "node_index,truth,mean,variance,score\n";
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto i = rows[k];
      out << i << ',' << io::format_double(*truth[i]) << ',' << io::format_double(mean[i]) << ','
          << io::format_double(var[i]) << ',' << io::format_double(scores[k]) << '\n';
    }
  });
  verify_csv(c.output / "scores.csv", rows.size(), 5);
  json j;
  j["rmse"] = s.rmse;
  j["mean_score"] = s.mean_score;
  j["scored_nodes"] = s.scored;
  j["missing_nodes"] = s.missing;
  j["convention"] = c.score.convention == ScoreConvention::kPaper ? "paper" : "gaussian";
  j["model"] = model_json(post);
  write_json(j, c.output / "score.json");
  *ctx.log << "rmse = " << io::format_double(s.rmse) << ", mean score = " << io::format_double(s.mean_score) << '\n';
  return s;
}

struct SphereComparison {
  Eigen::VectorXd fe_mean, harmonic_mean, harmonic_mean_doubled;
  double relative_l2 = 0.0;          // mass-weighted, against the harmonic mean
  double truncation_change = 0.0;    // same norm, K versus 2K
};

/// Finite element posterior mean against the truncated-harmonic kriging mean at every node.
inline SphereComparison compare_with_harmonic(const PosteriorModel& model, const TriangleMesh& mesh,
                                              const ObservationSet& obs, int truncation) {
  std::vector<Eigen::Vector3d> sites;
  for (const auto& l : obs.locations) {
    const Eigen::Vector3d p = std::holds_alternative<NodeIndex>(l) ? mesh.vertex(std::get<NodeIndex>(l).value)
                                                                   : std::get<Eigen::Vector3d>(l);
    sites.push_back(p.normalized());
  }
  std::vector<Eigen::Vector3d> targets;
  for (const auto& v : mesh.vertices()) targets.push_back(v.normalized());
  const Eigen::VectorXd y = observation_values(obs);
  SphereComparison out;
  out.fe_mean = model.mean();
  out.harmonic_mean = kriging_predict(SphereKernel(truncation), sites, y, obs.tau, targets).means;
  out.harmonic_mean_doubled =
      kriging_predict(SphereKernel(std::min(2 * truncation, 200)), sites, y, obs.tau, targets).means;
  const Eigen::VectorXd& w = model.ops().mass;
  auto norm = [&](const Eigen::VectorXd& v) { return std::sqrt(w.dot(v.cwiseAbs2())); };
  out.relative_l2 = norm(out.fe_mean - out.harmonic_mean) / norm(out.harmonic_mean);
  out.truncation_change = norm(out.harmonic_mean_doubled - out.harmonic_mean) / norm(out.harmonic_mean);
  return out;
}

/// comparison.csv (node,fe_mean,harmonic_mean,abs_diff,harmonic_mean_2k) and sphere_validation.json.
inline SphereComparison cmd_validate_sphere(const RunConfig& c, const Context& ctx = {}) {
  if (c.mesh.generator != "sphere" || c.mesh.radius != 1.0)
    throw ConfigError("validate-sphere needs the unit sphere generator");
  const Posterior post = build_posterior(c);
  const PosteriorModel& m = *post.model;
  if (post.prepared.anisotropic) throw ConfigError("validate-sphere compares isotropic models only");
  log_model(ctx, m, post.alpha_source);
  const auto cmp = compare_with_harmonic(m, post.prepared.mesh, post.prepared.obs, c.truncation);
  const Eigen::Index nodes = cmp.fe_mean.size();
  io::write_atomically(c.output / "comparison.csv", [&](std::ostream& out) {
    out << "node,fe_mean,harmonic_mean,abs_diff,harmonic_mean_2k\n";
    for (Eigen::Index i = 0; i < nodes; ++i)
      out << i << ',' << io::format_double(cmp.fe_mean[i]) << ',' << io::format_double(cmp.harmonic_mean[i]) << ','
          << io::format_double(std::abs(cmp.fe_mean[i] - cmp.harmonic_mean[i])) << ','
          << io::format_double(cmp.harmonic_mean_doubled[i]) << '\n';
  });
  verify_csv(c.output / "comparison.csv", static_cast<std::size_t>(nodes), 5);
  json j;
  j["relative_l2"] = cmp.relative_l2;
  j["truncation"] = c.truncation;
  j["truncation_doubled_change"] = cmp.truncation_change;
  j["model"] = model_json(post);
  write_json(j, c.output / "sphere_validation.json");
  write_observations(post.prepared.obs, c.output / "observations.csv");
  *ctx.log << "relative L2 difference = " << io::format_double(cmp.relative_l2) << '\n';
  return cmp;
}

}  // namespace manifold_splines::pipeline
