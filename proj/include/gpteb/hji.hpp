#ifndef GPTEB_HJI_HPP_
#define GPTEB_HJI_HPP_

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpteb/common.hpp"
#include "gpteb/dynamics.hpp"
#include "gpteb/grid.hpp"

namespace gpteb {

// Game stage cost: distance of the position error from the origin.
inline double stage_cost(std::span<const double> r) {
  return std::hypot(r[0], r[1]);
}

// ---------------------------------------------------------------------------
// Game Hamiltonian. The dynamics are affine in the tracking input, the
// planner input, and each disturbance channel separately, so the inner max
// is closed-form at box/interval ends and the outer min decomposes per
// tracking-input component.

namespace detail {

// min over the tracking-input box plus the closed-form adversary terms.
inline double hamiltonian_value(std::span<const double> grad,
                                const AffineTerms& t) {
  double h = 0.0;
  for (int i = 0; i < t.dim; ++i) h += grad[i] * t.drift[i];
  for (int k = 0; k < t.n_us; ++k) {
    double c = 0.0;
    for (int i = 0; i < t.dim; ++i) c += grad[i] * t.us_col[k][i];
    h += std::min(c * t.us_box[k].lo, c * t.us_box[k].hi);
  }
  for (int k = 0; k < t.n_up; ++k) {
    double c = 0.0;
    for (int i = 0; i < t.dim; ++i) c += grad[i] * t.up_col[k][i];
    h += std::max(c * t.up_box[k].lo, c * t.up_box[k].hi);
  }
  for (int ch = 0; ch < t.n_ch; ++ch) {
    double c = 0.0;
    for (int i = 0; i < t.dim; ++i) c += grad[i] * t.ch_col[ch][i];
    h += std::abs(c);
  }
  return h;
}

// Per-axis bound on |g_i| over all admissible inputs and disturbances, used
// as the local dissipation coefficient.
inline void speed_bounds(const AffineTerms& t, std::span<double> alpha) {
  for (int i = 0; i < t.dim; ++i) {
    double lo = t.drift[i], hi = t.drift[i];
    for (int k = 0; k < t.n_us; ++k) {
      const double a = t.us_col[k][i] * t.us_box[k].lo;
      const double b = t.us_col[k][i] * t.us_box[k].hi;
      lo += std::min(a, b);
      hi += std::max(a, b);
    }
    for (int k = 0; k < t.n_up; ++k) {
      const double a = t.up_col[k][i] * t.up_box[k].lo;
      const double b = t.up_col[k][i] * t.up_box[k].hi;
      lo += std::min(a, b);
      hi += std::max(a, b);
    }
    for (int ch = 0; ch < t.n_ch; ++ch) {
      lo -= std::abs(t.ch_col[ch][i]);
      hi += std::abs(t.ch_col[ch][i]);
    }
    alpha[i] = std::max(std::abs(lo), std::abs(hi));
  }
}

}  // namespace detail

struct HamiltonianResult {
  double value = 0.0;
  TrackInput argmin;
};

// Evaluate min over u_s of max over (u_p, e): the adversary optimum is
// closed-form; the minimizer is searched over a lattice of the input box
// plus its vertices, with deterministic tie-breaking by smallest max-norm
// and then lexicographic order.
inline HamiltonianResult hamiltonian(std::span<const double> grad,
                                     const AffineTerms& t,
                                     int lattice_per_axis = 5) {
  double base = 0.0;
  for (int i = 0; i < t.dim; ++i) base += grad[i] * t.drift[i];
  for (int k = 0; k < t.n_up; ++k) {
    double c = 0.0;
    for (int i = 0; i < t.dim; ++i) c += grad[i] * t.up_col[k][i];
    base += std::max(c * t.up_box[k].lo, c * t.up_box[k].hi);
  }
  for (int ch = 0; ch < t.n_ch; ++ch) {
    double c = 0.0;
    for (int i = 0; i < t.dim; ++i) c += grad[i] * t.ch_col[ch][i];
    base += std::abs(c);
  }

  if (t.n_us == 0) return {base, TrackInput{0, 0}};

  double cu[2] = {0, 0};
  for (int k = 0; k < t.n_us; ++k)
    for (int i = 0; i < t.dim; ++i) cu[k] += grad[i] * t.us_col[k][i];

  // candidate values per component: lattice plus the interval ends
  auto candidates = [&](int k) {
    std::vector<double> c;
    const Interval& box = t.us_box[k];
    const int n = std::max(2, lattice_per_axis);
    for (int j = 0; j < n; ++j)
      c.push_back(box.lo + (box.hi - box.lo) * j / (n - 1));
    c.push_back(box.lo);
    c.push_back(box.hi);
    return c;
  };

  const auto c0 = candidates(0);
  const auto c1 = t.n_us > 1 ? candidates(1) : std::vector<double>{0.0};

  double best = std::numeric_limits<double>::infinity();
  double best_norm = std::numeric_limits<double>::infinity();
  TrackInput best_u{0, 0};
  const double tol = 1e-12 * (1.0 + std::abs(base));
  for (double u0 : c0) {
    for (double u1 : c1) {
      const double v = cu[0] * u0 + (t.n_us > 1 ? cu[1] * u1 : 0.0);
      const double norm = std::max(std::abs(u0), std::abs(u1));
      bool better = false;
      if (v < best - tol) {
        better = true;
      } else if (v < best + tol) {
        if (norm < best_norm - 1e-12)
          better = true;
        else if (norm < best_norm + 1e-12 &&
                 (u0 < best_u.u0 - 1e-12 ||
                  (std::abs(u0 - best_u.u0) <= 1e-12 && u1 < best_u.u1 - 1e-12)))
          better = true;
      }
      if (better) {
        best = v;
        best_norm = norm;
        best_u = {u0, u1};
      }
    }
  }
  return {base + best, best_u};
}

inline HamiltonianResult hamiltonian(std::span<const double> r,
                                     std::span<const double> grad,
                                     const RelativeSystem& sys,
                                     int lattice_per_axis = 5) {
  for (double g : grad)
    if (!std::isfinite(g)) throw UsageError("hamiltonian: non-finite gradient");
  return hamiltonian(grad, sys.affine_terms(r), lattice_per_axis);
}

// Adversary optimum for a given gradient: the planner-input vertex and the
// unit-box disturbance signs attaining the inner max.
struct WorstInputs {
  PlanInput up;
  std::array<double, AffineTerms::kMaxCh> w = {};
};

inline WorstInputs worst_inputs(std::span<const double> grad,
                                const AffineTerms& t) {
  WorstInputs out;
  double cup[2] = {0, 0};
  for (int k = 0; k < t.n_up; ++k)
    for (int i = 0; i < t.dim; ++i) cup[k] += grad[i] * t.up_col[k][i];
  out.up.ux = (cup[0] * t.up_box[0].lo > cup[0] * t.up_box[0].hi)
                  ? t.up_box[0].lo
                  : t.up_box[0].hi;
  out.up.uy = (cup[1] * t.up_box[1].lo > cup[1] * t.up_box[1].hi)
                  ? t.up_box[1].lo
                  : t.up_box[1].hi;
  for (int ch = 0; ch < t.n_ch; ++ch) {
    double c = 0.0;
    for (int i = 0; i < t.dim; ++i) c += grad[i] * t.ch_col[ch][i];
    out.w[ch] = c >= 0.0 ? 1.0 : -1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Node-wise affine terms, tabulated. The relative vector field never reads
// the position-error axes, so for the vessel systems the table is indexed
// by the remaining axes only and the hot loop does no model evaluation at
// all (GPs are sampled exactly once per dependent node).

struct TermsTable {
  std::vector<AffineTerms> entries;
  std::vector<std::size_t> axis_stride;  // 0 where the terms do not depend

  const AffineTerms& at(std::span<const int> idx) const {
    std::size_t f = 0;
    for (std::size_t a = 0; a < axis_stride.size(); ++a)
      f += axis_stride[a] * static_cast<std::size_t>(idx[a]);
    return entries[f];
  }
};

template <typename TermsFn>
TermsTable build_terms_table(const GridSpec& spec,
                             std::span<const int> dependent_axes,
                             const TermsFn& fn) {
  TermsTable table;
  table.axis_stride.assign(spec.dim(), 0);
  std::size_t count = 1;
  for (int a_i = static_cast<int>(dependent_axes.size()) - 1; a_i >= 0; --a_i) {
    const int a = dependent_axes[a_i];
    table.axis_stride[a] = count;
    count *= static_cast<std::size_t>(spec.axes[a].n);
  }
  table.entries.resize(count);

  std::vector<int> idx(spec.dim(), 0);
  std::vector<double> x(spec.dim(), 0.0);
  std::vector<std::size_t> sub(dependent_axes.size(), 0);
  for (std::size_t f = 0; f < count; ++f) {
    std::size_t rem = f;
    for (std::size_t k = 0; k < dependent_axes.size(); ++k) {
      std::size_t stride = table.axis_stride[dependent_axes[k]];
      sub[k] = rem / stride;
      rem %= stride;
    }
    std::fill(idx.begin(), idx.end(), 0);
    for (std::size_t k = 0; k < dependent_axes.size(); ++k)
      idx[dependent_axes[k]] = static_cast<int>(sub[k]);
    spec.node_coords(idx, x);
    table.entries[f] = fn(std::span<const int>(idx), std::span<const double>(x));
  }
  return table;
}

inline TermsTable build_terms_table(const GridSpec& spec,
                                    const RelativeSystem& sys) {
  if (spec.dim() != sys.rel_dim())
    throw UsageError("solve: grid dimension does not match the relative system");
  std::vector<int> dep;
  for (int a = 2; a < spec.dim(); ++a) dep.push_back(a);
  return build_terms_table(spec, dep,
                           [&](std::span<const int>, std::span<const double> x) {
                             return sys.affine_terms(x);
                           });
}

// ---------------------------------------------------------------------------
// Variational-inequality solver.

struct SolverOptions {
  double tolerance = 1e-4;  // max node update per sweep, value units
  int max_iters = 3000;
  double cfl = 0.5;
  int us_lattice = 5;
  unsigned threads = 0;  // 0: hardware concurrency
  // Keep iterates pointwise non-decreasing even where one-sided boundary
  // stencils would let a node dip; exact for this game, whose finite-horizon
  // value is non-decreasing in the horizon.
  bool clamp_nondecreasing = true;
  bool record_history = true;

  nlohmann::json to_json() const {
    return {{"tolerance", tolerance},   {"max_iters", max_iters},
            {"cfl", cfl},               {"us_lattice", us_lattice},
            {"clamp_nondecreasing", clamp_nondecreasing}};
  }
};

// Converged game value on a grid, with the solve diagnostics needed to
// judge it.
struct ValueFunction {
  ScalarField field;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;
  double pseudo_time_step = 0.0;
  SolverOptions settings;
  std::vector<double> residual_history;
  // observed scheme diagnostics, exact zeros expected
  double max_freeze_violation = 0.0;     // max(l - V) over nodes
  double max_monotone_violation = 0.0;   // max decrease across iterations
};

// March the value function in pseudo-time from V = l with a Lax-Friedrichs
// Hamiltonian on upwinded one-sided differences, freezing against the stage
// cost each step, until the largest node update drops below tolerance.
inline ValueFunction solve_vi(const GridSpec& spec, const TermsTable& table,
                              const ScalarField& stage,
                              const SolverOptions& opt = {}) {
  spec.validate();
  const int d = spec.dim();
  if (d > AffineTerms::kMaxDim) throw UsageError("solve: too many axes");
  const std::size_t n_total = spec.num_points();
  if (stage.values.size() != n_total)
    throw UsageError("solve: stage cost grid mismatch");

  std::vector<double> h(d), inv_h(d);
  for (int a = 0; a < d; ++a) {
    h[a] = spec.spacing(a);
    inv_h[a] = 1.0 / h[a];
  }
  const std::vector<std::size_t> strides = spec.strides();

  // CFL bound from the largest per-node sum of characteristic speeds.
  const unsigned hw = opt.threads ? opt.threads
                                  : std::max(1u, std::thread::hardware_concurrency());
  const std::size_t chunk = (n_total + hw - 1) / hw;
  std::vector<double> chunk_speed(hw, 0.0);
  parallel_for(
      n_total,
      [&](std::size_t b, std::size_t e) {
        std::vector<int> idx(d);
        double alpha[AffineTerms::kMaxDim];
        double local = 0.0;
        spec.unflatten(b, idx);
        for (std::size_t f = b; f < e; ++f) {
          const AffineTerms& t = table.at(idx);
          detail::speed_bounds(t, std::span<double>(alpha, d));
          double s = 0.0;
          for (int a = 0; a < d; ++a) s += alpha[a] * inv_h[a];
          local = std::max(local, s);
          for (int a = d - 1; a >= 0; --a) {  // odometer increment
            if (++idx[a] < spec.axes[a].n) break;
            idx[a] = 0;
          }
        }
        chunk_speed[std::min<std::size_t>(b / chunk, hw - 1)] = local;
      },
      hw);
  double max_speed = 0.0;
  for (double s : chunk_speed) max_speed = std::max(max_speed, s);
  // Stationary game (zero dynamics): the value stays at the stage cost and
  // any pseudo step converges immediately.
  const double dt = max_speed > 0.0 ? opt.cfl / max_speed : 1.0;

  ValueFunction out;
  out.settings = opt;
  out.pseudo_time_step = dt;
  out.field = stage;  // V(., 0) = l
  std::vector<double> next(n_total);

  const unsigned n_chunks = hw;
  std::vector<double> chunk_res(n_chunks, 0.0), chunk_dec(n_chunks, 0.0);

  int grow_streak = 0;
  double prev_res = std::numeric_limits<double>::infinity();
  double max_decrease = 0.0;

  for (int it = 0; it < opt.max_iters; ++it) {
    const std::vector<double>& v = out.field.values;
    parallel_for(
        n_total,
        [&](std::size_t b, std::size_t e) {
          std::vector<int> idx(d);
          spec.unflatten(b, idx);
          double pm[AffineTerms::kMaxDim], pp[AffineTerms::kMaxDim];
          double pbar[AffineTerms::kMaxDim], alpha[AffineTerms::kMaxDim];
          double res = 0.0, dec = 0.0;
          for (std::size_t f = b; f < e; ++f) {
            const double vc = v[f];
            for (int a = 0; a < d; ++a) {
              const int i = idx[a];
              const int n = spec.axes[a].n;
              const std::size_t st = strides[a];
              if (spec.axes[a].periodic) {
                const std::size_t base = f - st * static_cast<std::size_t>(i);
                const double vm = v[base + st * static_cast<std::size_t>(
                                               (i + n - 1) % n)];
                const double vp =
                    v[base + st * static_cast<std::size_t>((i + 1) % n)];
                pm[a] = (vc - vm) * inv_h[a];
                pp[a] = (vp - vc) * inv_h[a];
              } else if (i == 0) {
                const double g = (v[f + st] - vc) * inv_h[a];
                pm[a] = g;
                pp[a] = g;
              } else if (i == n - 1) {
                const double g = (vc - v[f - st]) * inv_h[a];
                pm[a] = g;
                pp[a] = g;
              } else {
                pm[a] = (vc - v[f - st]) * inv_h[a];
                pp[a] = (v[f + st] - vc) * inv_h[a];
              }
              pbar[a] = 0.5 * (pm[a] + pp[a]);
            }
            const AffineTerms& t = table.at(idx);
            const double ham =
                detail::hamiltonian_value(std::span<const double>(pbar, d), t);
            detail::speed_bounds(t, std::span<double>(alpha, d));
            double diss = 0.0;
            for (int a = 0; a < d; ++a) diss += alpha[a] * (pp[a] - pm[a]);
            double cand = vc + dt * (ham + 0.5 * diss);
            if (cand < stage.values[f]) cand = stage.values[f];
            if (opt.clamp_nondecreasing && cand < vc) cand = vc;
            next[f] = cand;
            const double delta = cand - vc;
            res = std::max(res, std::abs(delta));
            dec = std::max(dec, -delta);
            for (int a = d - 1; a >= 0; --a) {
              if (++idx[a] < spec.axes[a].n) break;
              idx[a] = 0;
            }
          }
          const std::size_t slot = std::min<std::size_t>(b / chunk, n_chunks - 1);
          chunk_res[slot] = res;
          chunk_dec[slot] = dec;
        },
        hw);

    double res = 0.0;
    for (unsigned c = 0; c < n_chunks; ++c) {
      res = std::max(res, chunk_res[c]);
      max_decrease = std::max(max_decrease, chunk_dec[c]);
      chunk_res[c] = 0.0;
      chunk_dec[c] = 0.0;
    }
    out.field.values.swap(next);
    out.iterations = it + 1;
    out.residual = res;
    if (opt.record_history) out.residual_history.push_back(res);

    if (res < opt.tolerance) {
      out.converged = true;
      break;
    }
    if (res > prev_res) {
      if (++grow_streak >= 50)
        throw NumericalError(
            "solve: residual grew for 50 consecutive sweeps; "
            "dissipation bound " + std::to_string(max_speed) +
            " with pseudo step " + std::to_string(dt) +
            " is not damping the scheme");
    } else {
      grow_streak = 0;
    }
    prev_res = res;
  }

  out.max_monotone_violation = max_decrease;
  double freeze_viol = 0.0;
  for (std::size_t f = 0; f < n_total; ++f)
    freeze_viol = std::max(freeze_viol, stage.values[f] - out.field.values[f]);
  out.max_freeze_violation = freeze_viol;
  return out;
}

// Convenience wrapper for a relative system: tabulates the affine terms and
// the stage cost over the grid first.
inline ValueFunction solve_vi(const RelativeSystem& sys, const GridSpec& spec,
                              const SolverOptions& opt = {}) {
  sys.validate();
  const TermsTable table = build_terms_table(spec, sys);
  ScalarField stage(spec);
  stage.fill_with([](std::span<const double> x) { return stage_cost(x); });
  return solve_vi(spec, table, stage, opt);
}

// ---------------------------------------------------------------------------
// TEB level and extraction.

// max over the environment's y-nodes of the minimum value over every other
// axis: the smallest level at which the bound exists for all y of interest.
inline double compute_vbar(const ValueFunction& v, int y_axis,
                           Interval y_range) {
  const GridSpec& g = v.field.spec;
  if (y_axis < 0 || y_axis >= g.dim())
    throw UsageError("compute_vbar: y axis out of range");
  if (!(y_range.hi >= y_range.lo))
    throw UsageError("compute_vbar: empty y range");
  int keep[1] = {y_axis};
  const ScalarField mins = project_min(v.field, keep);
  double vbar = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (int i = 0; i < g.axes[y_axis].n; ++i) {
    const double y = g.coord(y_axis, i);
    if (y < y_range.lo - 1e-12 || y > y_range.hi + 1e-12) continue;
    int ii[1] = {i};
    vbar = std::max(vbar, mins.at(ii));
    any = true;
  }
  if (!any)
    throw UsageError("compute_vbar: no grid nodes inside the y range");
  if (!std::isfinite(vbar))
    throw NumericalError("compute_vbar: level is not finite");
  return vbar;
}

// Tracking error bound: the sublevel set of the value function at the
// level, cached as its position-plane projection per y-node.
struct Teb {
  double level = 0.0;
  int y_axis = 0;
  // min of V over all non-position, non-y axes: axes (x_r, y_r, y)
  ScalarField projection;

  const GridSpec& proj_spec() const { return projection.spec; }

  int y_nodes() const { return projection.spec.axes[2].n; }

  double proj_value(int ix, int iy, int iyy) const {
    int idx[3] = {ix, iy, iyy};
    return projection.at(idx);
  }

  bool member(int ix, int iy, int iyy) const {
    return proj_value(ix, iy, iyy) <= level;
  }

  // Bracket an absolute y between projection nodes; both ends are used for
  // conservative membership queries.
  std::pair<int, int> y_bracket(double y) const {
    const auto& ay = projection.spec.axes[2];
    const double h = projection.spec.spacing(2);
    if (y < ay.lo - 1e-12 || y > ay.hi + 1e-12)
      throw DomainError("teb: y " + std::to_string(y) +
                        " outside the projection table");
    const double c = clamp((y - ay.lo) / h, 0.0, static_cast<double>(ay.n - 1));
    const int j0 = static_cast<int>(c);
    const int j1 = std::min(j0 + 1, ay.n - 1);
    return {j0, j1};
  }
};

// Project the value function to (x_r, y_r, y) by minimizing over the other
// axes, keep the y-nodes inside the environment range, and threshold at the
// level. Every kept y-slice must contain at least one member node,
// otherwise the bound does not exist at that y.
inline Teb extract_teb(const ValueFunction& v, double level, int y_axis,
                       Interval y_range) {
  if (!std::isfinite(level)) throw UsageError("extract_teb: level not finite");
  const GridSpec& g = v.field.spec;
  if (y_axis <= 1 || y_axis >= g.dim())
    throw UsageError("extract_teb: y axis out of range");
  std::vector<int> keep{0, 1, y_axis};
  const ScalarField full = project_min(v.field, keep);

  // contiguous node range inside the environment's y interval
  const auto& ya = full.spec.axes[2];
  int j_lo = -1, j_hi = -1;
  for (int j = 0; j < ya.n; ++j) {
    const double y = full.spec.coord(2, j);
    if (y < y_range.lo - 1e-12 || y > y_range.hi + 1e-12) continue;
    if (j_lo < 0) j_lo = j;
    j_hi = j;
  }
  if (j_lo < 0)
    throw UsageError("extract_teb: no grid nodes inside the y range");
  if (j_hi - j_lo + 1 < 2)
    throw UsageError("extract_teb: fewer than two y nodes inside the range");

  Teb teb;
  teb.level = level;
  teb.y_axis = y_axis;
  GridSpec pspec;
  pspec.axes = {full.spec.axes[0], full.spec.axes[1],
                {ya.name, full.spec.coord(2, j_lo), full.spec.coord(2, j_hi),
                 j_hi - j_lo + 1, false}};
  teb.projection = ScalarField(pspec);
  for (int ix = 0; ix < pspec.axes[0].n; ++ix)
    for (int iy = 0; iy < pspec.axes[1].n; ++iy)
      for (int j = j_lo; j <= j_hi; ++j) {
        int src[3] = {ix, iy, j};
        int dst[3] = {ix, iy, j - j_lo};
        teb.projection.at(dst) = full.at(src);
      }

  for (int j = 0; j < teb.y_nodes(); ++j) {
    bool nonempty = false;
    for (int ix = 0; ix < pspec.axes[0].n && !nonempty; ++ix)
      for (int iy = 0; iy < pspec.axes[1].n && !nonempty; ++iy)
        nonempty = teb.member(ix, iy, j);
    if (!nonempty)
      throw InfeasibleError(
          "extract_teb: empty projection at y = " +
          std::to_string(pspec.coord(2, j)) +
          "; the tracking error bound does not exist there");
  }
  return teb;
}

// Area of the position-plane projection at a given absolute y (grid cells
// counted at node resolution).
inline double projection_area(const Teb& teb, double y) {
  const auto [j0, j1] = teb.y_bracket(y);
  const auto& spec = teb.projection.spec;
  const double cell = spec.spacing(0) * spec.spacing(1);
  std::size_t count = 0;
  for (int ix = 0; ix < spec.axes[0].n; ++ix)
    for (int iy = 0; iy < spec.axes[1].n; ++iy)
      if (teb.member(ix, iy, j0) || teb.member(ix, iy, j1)) ++count;
  return cell * static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Safe controller: gradient of the interpolated value by central
// differences, then the Hamiltonian minimizer at that gradient.

inline std::vector<double> value_gradient(const ScalarField& field,
                                          std::span<const double> r) {
  const GridSpec& g = field.spec;
  const int d = g.dim();
  std::vector<double> grad(d, 0.0);
  std::vector<double> a(r.begin(), r.end()), b(r.begin(), r.end());
  for (int i = 0; i < d; ++i) {
    const double h = g.spacing(i);
    double lo = r[i] - h, hi = r[i] + h;
    if (!g.axes[i].periodic) {
      lo = std::max(lo, g.axes[i].lo);
      hi = std::min(hi, g.axes[i].hi);
    }
    a[i] = lo;
    b[i] = hi;
    grad[i] = (interpolate(field, b) - interpolate(field, a)) / (hi - lo);
    a[i] = r[i];
    b[i] = r[i];
  }
  return grad;
}

inline TrackInput safe_control(const ValueFunction& v,
                               std::span<const double> r,
                               const RelativeSystem& sys,
                               int lattice_per_axis = 5) {
  const GridSpec& g = v.field.spec;
  for (int i = 0; i < g.dim(); ++i) {
    if (g.axes[i].periodic) continue;
    if (r[i] < g.axes[i].lo || r[i] > g.axes[i].hi)
      throw DomainError("safe_control: relative state outside the value grid on axis '" +
                        g.axes[i].name + "'");
  }
  const std::vector<double> grad = value_gradient(v.field, r);
  return hamiltonian(grad, sys.affine_terms(r), lattice_per_axis).argmin;
}

// Default interior margin for switching decisions: one grid cell of value
// change at the field's observed steepness.
inline double default_interior_margin(const ValueFunction& v) {
  const GridSpec& g = v.field.spec;
  const int d = g.dim();
  double m = 0.0;
  std::vector<int> idx(d, 0);
  for (std::size_t f = 0; f < v.field.values.size(); ++f) {
    g.unflatten(f, idx);
    for (int a = 0; a < d; ++a) {
      if (idx[a] + 1 >= g.axes[a].n) continue;
      const double dv = std::abs(v.field.values[f + g.strides()[a]] -
                                 v.field.values[f]);
      m = std::max(m, dv);
    }
  }
  return 0.5 * m;
}

// ---------------------------------------------------------------------------
// Persistence: grid field plus JSON sidecar, residual history as CSV.

inline void save_value(const ValueFunction& v, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_field(v.field, (dir / "value.field").string());
  nlohmann::json j{{"converged", v.converged},
                   {"iterations", v.iterations},
                   {"residual", v.residual},
                   {"pseudo_time_step", v.pseudo_time_step},
                   {"max_freeze_violation", v.max_freeze_violation},
                   {"max_monotone_violation", v.max_monotone_violation},
                   {"settings", v.settings.to_json()}};
  std::ofstream(dir / "value.json") << j.dump(2) << "\n";
  std::ofstream csv(dir / "residual_history.csv");
  csv << "iteration,residual\n";
  for (std::size_t i = 0; i < v.residual_history.size(); ++i)
    csv << i + 1 << "," << fmt_double(v.residual_history[i]) << "\n";
}

inline ValueFunction load_value(const std::filesystem::path& dir) {
  ValueFunction v;
  v.field = read_field((dir / "value.field").string());
  std::ifstream in(dir / "value.json");
  if (!in) throw Error("missing value.json in " + dir.string());
  nlohmann::json j;
  in >> j;
  v.converged = j.at("converged").get<bool>();
  v.iterations = j.at("iterations").get<int>();
  v.residual = j.at("residual").get<double>();
  v.pseudo_time_step = j.value("pseudo_time_step", 0.0);
  v.max_freeze_violation = j.value("max_freeze_violation", 0.0);
  v.max_monotone_violation = j.value("max_monotone_violation", 0.0);
  return v;
}

inline void save_teb(const Teb& teb, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_field(teb.projection, (dir / "teb_projection.field").string());
  nlohmann::json j{{"level", teb.level}, {"y_axis", teb.y_axis}};
  std::ofstream(dir / "teb.json") << j.dump(2) << "\n";
}

inline Teb load_teb(const std::filesystem::path& dir) {
  Teb teb;
  teb.projection = read_field((dir / "teb_projection.field").string());
  std::ifstream in(dir / "teb.json");
  if (!in) throw Error("missing teb.json in " + dir.string());
  nlohmann::json j;
  in >> j;
  teb.level = j.at("level").get<double>();
  teb.y_axis = j.at("y_axis").get<int>();
  return teb;
}

}  // namespace gpteb

#endif  // GPTEB_HJI_HPP_
