#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace manifold_splines {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied argument violates a documented precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A text file could not be parsed. `line()` is 1-based, 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A mesh failed a structural check.
class MeshError : public Error {
 public:
  enum class Kind {
    kIndexOutOfRange,
    kDegenerateTriangle,
    kZeroArea,
    kNonManifoldEdge,
    kDisconnected,
    kIsolatedVertex,
    kEmpty,
  };

  MeshError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// An observation could not be attached to the mesh.
class BindingError : public Error {
 public:
  using Error::Error;
};

/// Element assembly failed on a specific triangle.
class AssemblyError : public Error {
 public:
  AssemblyError(const std::string& what, std::size_t triangle)
      : Error(what + " (triangle " + std::to_string(triangle) + ")"), triangle_(triangle) {}
  std::size_t triangle() const noexcept { return triangle_; }

 private:
  std::size_t triangle_;
};

/// Sparse or dense factorization hit a non-positive pivot.
/// `pivot()` is the row of the input matrix (original ordering).
class FactorizationError : public Error {
 public:
  FactorizationError(const std::string& what, std::ptrdiff_t pivot)
      : Error(what + " (pivot " + std::to_string(pivot) + ")"), pivot_(pivot) {}
  std::ptrdiff_t pivot() const noexcept { return pivot_; }

 private:
  std::ptrdiff_t pivot_;
};

/// An iterative method hit its iteration cap.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// A closed-form expression has a vanishing denominator.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// The run configuration is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace manifold_splines
