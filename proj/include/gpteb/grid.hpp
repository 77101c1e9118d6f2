#ifndef GPTEB_GRID_HPP_
#define GPTEB_GRID_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpteb/common.hpp"

namespace gpteb {

// Rectangular N-dimensional grid. Periodic axes cover [lo, hi) with the two
// ends identified (used for angles); non-periodic axes include both ends.
struct GridSpec {
  struct Axis {
    std::string name;
    double lo = 0.0;
    double hi = 1.0;
    int n = 2;
    bool periodic = false;
  };

  std::vector<Axis> axes;

  int dim() const { return static_cast<int>(axes.size()); }

  double spacing(int axis) const {
    const Axis& a = axes[axis];
    return a.periodic ? (a.hi - a.lo) / a.n : (a.hi - a.lo) / (a.n - 1);
  }

  double coord(int axis, int idx) const {
    return axes[axis].lo + spacing(axis) * idx;
  }

  std::size_t num_points() const {
    std::size_t n = 1;
    for (const Axis& a : axes) n *= static_cast<std::size_t>(a.n);
    return n;
  }

  // Row-major strides: axis 0 is slowest, the last axis is contiguous.
  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(axes.size());
    std::size_t acc = 1;
    for (int i = dim() - 1; i >= 0; --i) {
      s[i] = acc;
      acc *= static_cast<std::size_t>(axes[i].n);
    }
    return s;
  }

  std::size_t flat_index(std::span<const int> idx) const {
    std::size_t f = 0;
    for (int i = 0; i < dim(); ++i) {
      f = f * static_cast<std::size_t>(axes[i].n) +
          static_cast<std::size_t>(idx[i]);
    }
    return f;
  }

  void unflatten(std::size_t flat, std::span<int> idx) const {
    for (int i = dim() - 1; i >= 0; --i) {
      idx[i] = static_cast<int>(flat % static_cast<std::size_t>(axes[i].n));
      flat /= static_cast<std::size_t>(axes[i].n);
    }
  }

  void node_coords(std::span<const int> idx, std::span<double> out) const {
    for (int i = 0; i < dim(); ++i) out[i] = coord(i, idx[i]);
  }

  void validate() const {
    if (axes.empty()) throw UsageError("grid: no axes");
    for (const Axis& a : axes) {
      if (!(a.hi > a.lo))
        throw UsageError("grid axis '" + a.name + "': upper bound must exceed lower bound");
      if (a.n < 2)
        throw UsageError("grid axis '" + a.name + "': needs at least 2 points");
    }
  }

  bool same_shape(const GridSpec& o) const {
    if (axes.size() != o.axes.size()) return false;
    for (std::size_t i = 0; i < axes.size(); ++i) {
      if (axes[i].lo != o.axes[i].lo || axes[i].hi != o.axes[i].hi ||
          axes[i].n != o.axes[i].n || axes[i].periodic != o.axes[i].periodic)
        return false;
    }
    return true;
  }
};

// Scalar samples on a grid, flat row-major storage. Immutable by convention
// once handed out; concurrent reads are safe.
struct ScalarField {
  GridSpec spec;
  std::vector<double> values;

  ScalarField() = default;
  explicit ScalarField(GridSpec s, double fill = 0.0)
      : spec(std::move(s)), values(spec.num_points(), fill) {
    spec.validate();
  }

  double& at(std::span<const int> idx) { return values[spec.flat_index(idx)]; }
  double at(std::span<const int> idx) const {
    return values[spec.flat_index(idx)];
  }

  template <typename Fn>
  void fill_with(const Fn& fn) {
    std::vector<int> idx(spec.dim(), 0);
    std::vector<double> x(spec.dim(), 0.0);
    for (std::size_t f = 0; f < values.size(); ++f) {
      spec.unflatten(f, idx);
      spec.node_coords(idx, x);
      values[f] = fn(std::span<const double>(x));
    }
  }
};

namespace detail {

// Locate the cell and fractional offset along one axis. Periodic axes wrap
// the query first; non-periodic axes reject out-of-bounds points outright
// so planner/controller bugs surface instead of being clamped away.
inline void locate(const GridSpec::Axis& a, double h, double x, int* i0,
                   int* i1, double* frac) {
  if (a.periodic) {
    const double span = a.hi - a.lo;
    double t = std::fmod(x - a.lo, span);
    if (t < 0) t += span;
    double cell = t / h;
    int i = static_cast<int>(cell);
    if (i >= a.n) i = a.n - 1;
    *i0 = i;
    *i1 = (i + 1) % a.n;
    *frac = cell - i;
  } else {
    if (x < a.lo || x > a.hi)
      throw DomainError("interpolate: coordinate " + std::to_string(x) +
                        " outside [" + std::to_string(a.lo) + ", " +
                        std::to_string(a.hi) + "] on axis '" + a.name + "'");
    double cell = (x - a.lo) / h;
    int i = static_cast<int>(cell);
    if (i >= a.n - 1) i = a.n - 2;  // x == hi lands in the last cell
    *i0 = i;
    *i1 = i + 1;
    *frac = cell - i;
  }
}

}  // namespace detail

// Multilinear interpolation. Exact at grid nodes and on fields linear along
// each axis.
inline double interpolate(const ScalarField& field,
                          std::span<const double> point) {
  const GridSpec& g = field.spec;
  const int d = g.dim();
  if (static_cast<int>(point.size()) != d)
    throw UsageError("interpolate: point dimension mismatch");

  int i0[8], i1[8];
  double frac[8];
  if (d > 8) throw UsageError("interpolate: more than 8 axes unsupported");
  for (int i = 0; i < d; ++i)
    detail::locate(g.axes[i], g.spacing(i), point[i], &i0[i], &i1[i], &frac[i]);

  const std::vector<std::size_t> st = g.strides();
  double acc = 0.0;
  const unsigned corners = 1u << d;
  for (unsigned c = 0; c < corners; ++c) {
    double w = 1.0;
    std::size_t f = 0;
    for (int i = 0; i < d; ++i) {
      if (c & (1u << i)) {
        w *= frac[i];
        f += st[i] * static_cast<std::size_t>(i1[i]);
      } else {
        w *= 1.0 - frac[i];
        f += st[i] * static_cast<std::size_t>(i0[i]);
      }
    }
    if (w != 0.0) acc += w * field.values[f];
  }
  return acc;
}

struct UpwindPair {
  double left;   // backward difference
  double right;  // forward difference
};

// One-sided differences along an axis. Periodic axes wrap; at non-periodic
// boundaries the available one-sided derivative is duplicated to both slots
// (equivalent to a linearly extrapolated ghost node).
inline UpwindPair upwind_derivatives(const ScalarField& field,
                                     std::span<const int> index, int axis) {
  const GridSpec& g = field.spec;
  if (axis < 0 || axis >= g.dim())
    throw UsageError("upwind_derivatives: invalid axis");
  for (int i = 0; i < g.dim(); ++i) {
    if (index[i] < 0 || index[i] >= g.axes[i].n)
      throw UsageError("upwind_derivatives: index out of range");
  }

  const double h = g.spacing(axis);
  const std::vector<std::size_t> st = g.strides();
  const std::size_t f = g.flat_index(index);
  const int i = index[axis];
  const int n = g.axes[axis].n;
  const double v = field.values[f];

  double left, right;
  if (g.axes[axis].periodic) {
    const std::size_t fm =
        f - st[axis] * static_cast<std::size_t>(i) +
        st[axis] * static_cast<std::size_t>((i + n - 1) % n);
    const std::size_t fp = f - st[axis] * static_cast<std::size_t>(i) +
                           st[axis] * static_cast<std::size_t>((i + 1) % n);
    left = (v - field.values[fm]) / h;
    right = (field.values[fp] - v) / h;
  } else if (i == 0) {
    right = (field.values[f + st[axis]] - v) / h;
    left = right;
  } else if (i == n - 1) {
    left = (v - field.values[f - st[axis]]) / h;
    right = left;
  } else {
    left = (v - field.values[f - st[axis]]) / h;
    right = (field.values[f + st[axis]] - v) / h;
  }
  return {left, right};
}

// Minimum over all projected-out axes: the grid realization of an
// existential quantifier over those axes.
inline ScalarField project_min(const ScalarField& field,
                               std::span<const int> keep_axes) {
  const GridSpec& g = field.spec;
  const int d = g.dim();
  if (keep_axes.empty())
    throw UsageError("project_min: keep_axes must be nonempty");
  if (static_cast<int>(keep_axes.size()) >= d)
    throw UsageError("project_min: keep_axes must be a strict subset of axes");
  std::vector<bool> keep(d, false);
  for (int a : keep_axes) {
    if (a < 0 || a >= d) throw UsageError("project_min: axis out of range");
    if (keep[a]) throw UsageError("project_min: duplicate axis");
    keep[a] = true;
  }

  GridSpec out_spec;
  std::vector<int> kept_order;
  for (int a = 0; a < d; ++a) {
    if (keep[a]) {
      out_spec.axes.push_back(g.axes[a]);
      kept_order.push_back(a);
    }
  }
  ScalarField out(out_spec, std::numeric_limits<double>::infinity());

  std::vector<int> idx(d, 0);
  std::vector<int> kidx(kept_order.size(), 0);
  for (std::size_t f = 0; f < field.values.size(); ++f) {
    g.unflatten(f, idx);
    for (std::size_t k = 0; k < kept_order.size(); ++k)
      kidx[k] = idx[kept_order[k]];
    double& slot = out.values[out_spec.flat_index(kidx)];
    if (field.values[f] < slot) slot = field.values[f];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: one UTF-8 JSON header line, then the value array as raw
// little-endian 64-bit floats in row-major order. Round-trips bit-exactly.

inline void write_field(const ScalarField& field, std::ostream& os) {
  nlohmann::json hdr;
  hdr["count"] = field.values.size();
  nlohmann::json axes = nlohmann::json::array();
  for (const auto& a : field.spec.axes) {
    axes.push_back({{"name", a.name},
                    {"lo", a.lo},
                    {"hi", a.hi},
                    {"n", a.n},
                    {"periodic", a.periodic}});
  }
  hdr["axes"] = axes;
  os << hdr.dump() << "\n";
  for (double v : field.values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i)
      b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
  }
}

inline void write_field(const ScalarField& field, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for write: " + path);
  write_field(field, os);
}

inline ScalarField read_field(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("field read: missing header");
  const nlohmann::json hdr = nlohmann::json::parse(line);
  GridSpec spec;
  for (const auto& a : hdr.at("axes")) {
    spec.axes.push_back({a.at("name").get<std::string>(),
                         a.at("lo").get<double>(), a.at("hi").get<double>(),
                         a.at("n").get<int>(), a.at("periodic").get<bool>()});
  }
  spec.validate();
  const std::size_t count = hdr.at("count").get<std::size_t>();
  if (count != spec.num_points())
    throw Error("field read: count does not match axes");
  ScalarField field(spec);
  for (std::size_t k = 0; k < count; ++k) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw Error("field read: truncated value array");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    field.values[k] = std::bit_cast<double>(bits);
  }
  return field;
}

inline ScalarField read_field(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for read: " + path);
  return read_field(is);
}

}  // namespace gpteb

#endif  // GPTEB_GRID_HPP_
