#ifndef GPTEB_DYNAMICS_HPP_
#define GPTEB_DYNAMICS_HPP_

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "gpteb/common.hpp"
#include "gpteb/gp.hpp"

namespace gpteb {

// Vessel constants for the 5D surge/yaw model. Defaults are the identified
// Heron values.
struct HeronParams {
  double mass_kg = 36.0;
  double inertia_kgm2 = 8.35;
  double length_m = 0.7366;
  double f_max_n = 45.0;
  double lin_damp_v = 0.0;        // X_v
  double lin_damp_omega = 0.0;    // N_omega
  double quad_damp_v = 16.9;      // X_|v|v
  double quad_damp_omega = 13.0;  // N_|omega|omega

  void validate() const {
    if (!(mass_kg > 0 && inertia_kgm2 > 0 && length_m > 0 && f_max_n > 0))
      throw UsageError("heron params: mass, inertia, length, f_max must be positive");
    if (lin_damp_v < 0 || lin_damp_omega < 0 || quad_damp_v < 0 ||
        quad_damp_omega < 0)
      throw UsageError("heron params: damping must be nonnegative");
  }
};

// Tracking state (x, y, psi, v, omega). psi is kept in (-pi, pi].
struct TrackState {
  double x = 0, y = 0, psi = 0, v = 0, omega = 0;

  void normalize() { psi = wrap_angle(psi); }
  std::array<double, 5> as_array() const { return {x, y, psi, v, omega}; }
};

// Two tracking commands: thrusters (n1, n2) for the vessel model, or
// (v, omega) when the tracker is a kinematic unicycle.
struct TrackInput {
  double u0 = 0, u1 = 0;
};

struct PlanState {
  double x = 0, y = 0;
};

struct PlanInput {
  double ux = 0, uy = 0;
};

struct Interval {
  double lo = 0, hi = 0;

  bool contains(double x, double tol = 1e-9) const {
    return x >= lo - tol && x <= hi + tol;
  }
  double width() const { return hi - lo; }
};

// Full vessel dynamics: surge thrust/damping and yaw torque/damping on top
// of planar kinematics.
inline TrackState nominal_heron(const TrackState& s, const TrackInput& u,
                                const HeronParams& p) {
  TrackState d;
  d.x = s.v * std::cos(s.psi);
  d.y = s.v * std::sin(s.psi);
  d.psi = s.omega;
  d.v = ((u.u0 + u.u1) * p.f_max_n -
         (p.lin_damp_v + p.quad_damp_v * std::abs(s.v)) * s.v) /
        p.mass_kg;
  d.omega = ((u.u0 - u.u1) * 0.5 * p.length_m * p.f_max_n -
             (p.lin_damp_omega + p.quad_damp_omega * std::abs(s.omega)) *
                 s.omega) /
            p.inertia_kgm2;
  return d;
}

// Kinematic unicycle: state (x, y, psi), inputs (v, omega).
inline std::array<double, 3> unicycle_deriv(double psi, const TrackInput& u) {
  return {u.u0 * std::cos(psi), u.u0 * std::sin(psi), u.u1};
}

// 2D single-integrator planning model.
inline PlanState planning_model(const PlanState&, const PlanInput& u) {
  return {u.ux, u.uy};
}

// ---------------------------------------------------------------------------
// Relative system: tracker minus planner, plus the tracker states feeding
// the uncertainty model.

enum class RelMode { kUnicycle4d, kHeron6d };

// Affine decomposition of the relative vector field at a point:
//   rdot = drift + sum_k us_col[k]*us_k + sum_k up_col[k]*up_k
//          + sum_j ch_col[j]*w_j,   w_j in [-1, 1].
// Disturbance channels are pre-scaled by their half-band so the adversary
// components are unit-box; a channel feeding several rows shares one w_j.
struct AffineTerms {
  static constexpr int kMaxDim = 6;
  static constexpr int kMaxCh = 6;

  int dim = 0;
  int n_us = 0;
  int n_up = 0;
  int n_ch = 0;
  double drift[kMaxDim] = {};
  double us_col[2][kMaxDim] = {};
  Interval us_box[2] = {};
  double up_col[2][kMaxDim] = {};
  Interval up_box[2] = {};
  double ch_col[kMaxCh][kMaxDim] = {};
};

class RelativeSystem {
 public:
  RelMode mode = RelMode::kUnicycle4d;
  HeronParams heron;
  std::array<Interval, 2> us_box = {Interval{0.0, 1.0}, Interval{-1.0, 1.0}};
  std::array<Interval, 2> up_box = {Interval{-0.25, 0.25},
                                    Interval{-0.25, 0.25}};
  UncertaintyModel uncertainty;
  // Constant disturbance intervals bias +/- band on derivative rows without
  // a GP: white-noise bands on unmodeled rows, or the worst-case observation
  // box when the whole uncertainty is treated conservatively. Indexed by
  // derivative row; empty means none.
  std::vector<double> const_bias;
  std::vector<double> const_band;

  int rel_dim() const { return mode == RelMode::kUnicycle4d ? 4 : 6; }
  int deriv_rows() const { return mode == RelMode::kUnicycle4d ? 3 : 5; }

  // Derivative rows appearing in the relative system, and the extra target
  // of the appended absolute-y row (which duplicates the ydot channel).
  static constexpr int kYdotRow = 1;

  int appended_rel_axis() const { return rel_dim() - 1; }

  // Selection/augmentation map Q_s (rel_dim x 5, row-major): picks the
  // tracked states and appends the uncertainty-input states.
  std::vector<double> qs_matrix() const {
    if (mode == RelMode::kUnicycle4d) {
      return {1, 0, 0, 0, 0,   // x
              0, 1, 0, 0, 0,   // y
              0, 0, 1, 0, 0,   // psi
              0, 1, 0, 0, 0};  // appended y
    }
    return {1, 0, 0, 0, 0,  //
            0, 1, 0, 0, 0,  //
            0, 0, 1, 0, 0,  //
            0, 0, 0, 1, 0,  //
            0, 0, 0, 0, 1,  //
            0, 1, 0, 0, 0};
  }

  // Matching map Q_p (rel_dim x 2, row-major): aligns planner states with
  // the position-error rows.
  std::vector<double> qp_matrix() const {
    std::vector<double> q(rel_dim() * 2, 0.0);
    q[0] = 1.0;      // x row
    q[2 + 1] = 1.0;  // y row
    return q;
  }

  // r = Q_s s - Q_p p
  std::vector<double> relative_state(const TrackState& s,
                                     const PlanState& p) const {
    const auto qs = qs_matrix();
    const auto qp = qp_matrix();
    const auto sv = s.as_array();
    const double pv[2] = {p.x, p.y};
    std::vector<double> r(rel_dim(), 0.0);
    for (int i = 0; i < rel_dim(); ++i) {
      double acc = 0.0;
      for (int j = 0; j < 5; ++j) acc += qs[i * 5 + j] * sv[j];
      for (int j = 0; j < 2; ++j) acc -= qp[i * 2 + j] * pv[j];
      r[i] = acc;
    }
    return r;
  }

  // Map a state axis (index into (x,y,psi,v,omega)) to the relative-state
  // axis carrying it. Absolute x is not carried.
  int state_axis_to_rel(int state_axis) const {
    if (mode == RelMode::kUnicycle4d) {
      switch (state_axis) {
        case 1: return 3;  // y is the appended state
        case 2: return 2;  // psi
      }
    } else {
      switch (state_axis) {
        case 1: return 5;
        case 2: return 2;
        case 3: return 3;
        case 4: return 4;
      }
    }
    throw UsageError("relative system: state axis " +
                     std::to_string(state_axis) +
                     " is not carried by the relative states");
  }

  void validate() const {
    heron.validate();
    for (int a : uncertainty.active_axes) state_axis_to_rel(a);
    for (const auto& [row, gp] : uncertainty.components) {
      (void)gp;
      if (row < 0 || row >= deriv_rows())
        throw UsageError("relative system: modeled row out of range");
    }
    if (const_bias.size() != const_band.size())
      throw UsageError("relative system: const_bias/const_band size mismatch");
    if (!const_band.empty() &&
        static_cast<int>(const_band.size()) != deriv_rows())
      throw UsageError(
          "relative system: constant channels need one entry per derivative row");
    for (int row = 0; row < static_cast<int>(const_band.size()); ++row) {
      if (const_band[row] < 0)
        throw UsageError("relative system: constant bands must be >= 0");
      if (uncertainty.models_row(row) &&
          (const_band[row] != 0.0 || const_bias[row] != 0.0))
        throw UsageError(
            "relative system: row " + std::to_string(row) +
            " has both a GP and a constant channel");
    }
    if (uncertainty.e_bound < 0)
      throw UsageError("relative system: e bound must be >= 0");
  }

  bool has_const_channel(int row) const {
    return row < static_cast<int>(const_band.size()) &&
           !uncertainty.models_row(row) &&
           (const_band[row] != 0.0 || const_bias[row] != 0.0);
  }

  // GP query assembled from relative coordinates.
  std::vector<double> gp_query(std::span<const double> r) const {
    std::vector<double> q(uncertainty.active_axes.size());
    for (std::size_t i = 0; i < q.size(); ++i)
      q[i] = r[state_axis_to_rel(uncertainty.active_axes[i])];
    return q;
  }

  // Rows of the relative system each derivative channel feeds.
  std::vector<int> channel_rows(int deriv_row) const {
    if (deriv_row == kYdotRow) return {1, appended_rel_axis()};
    return {deriv_row};
  }

  // Nominal relative flow (no disturbance terms).
  void nominal_rows(std::span<const double> r, const TrackInput& us,
                    const PlanInput& up, std::span<double> out) const {
    if (mode == RelMode::kUnicycle4d) {
      const double psi = r[2];
      const double v = us.u0, omega = us.u1;
      out[0] = v * std::cos(psi) - up.ux;
      out[1] = v * std::sin(psi) - up.uy;
      out[2] = omega;
      out[3] = v * std::sin(psi);
    } else {
      const double psi = r[2], v = r[3], omega = r[4];
      out[0] = v * std::cos(psi) - up.ux;
      out[1] = v * std::sin(psi) - up.uy;
      out[2] = omega;
      out[3] = ((us.u0 + us.u1) * heron.f_max_n -
                (heron.lin_damp_v + heron.quad_damp_v * std::abs(v)) * v) /
               heron.mass_kg;
      out[4] = ((us.u0 - us.u1) * 0.5 * heron.length_m * heron.f_max_n -
                (heron.lin_damp_omega +
                 heron.quad_damp_omega * std::abs(omega)) *
                    omega) /
               heron.inertia_kgm2;
      out[5] = v * std::sin(psi);
    }
  }

  // Full relative dynamics. e is the GP tuning vector (one slot per
  // derivative row, natural units); aux_w, when given, drives the constant
  // bands on unmodeled rows and lives in the unit box.
  std::vector<double> dynamics(std::span<const double> r, const TrackInput& us,
                               const PlanInput& up, std::span<const double> e,
                               std::span<const double> aux_w = {}) const {
    if (static_cast<int>(r.size()) != rel_dim())
      throw UsageError("relative dynamics: state dimension mismatch");
    if (!us_box[0].contains(us.u0) || !us_box[1].contains(us.u1))
      throw UsageError("relative dynamics: tracking input outside its box");
    if (!up_box[0].contains(up.ux) || !up_box[1].contains(up.uy))
      throw UsageError("relative dynamics: planner input outside its box");

    std::vector<double> out(rel_dim(), 0.0);
    nominal_rows(r, us, up, out);

    if (!uncertainty.components.empty()) {
      const std::vector<double> q = gp_query(r);
      for (const auto& [row, gp] : uncertainty.components) {
        if (row >= static_cast<int>(e.size()))
          throw UsageError("relative dynamics: e vector too short");
        if (std::abs(e[row]) > uncertainty.e_bound + 1e-12)
          throw UsageError("relative dynamics: e outside the tuning box");
        const auto post = gp.posterior(q);
        const double d = post.mean + e[row] * post.std;
        for (int rr : channel_rows(row)) out[rr] += d;
      }
    }
    for (int row = 0; row < deriv_rows(); ++row) {
      if (!has_const_channel(row)) continue;
      double d = const_bias[row];
      if (!aux_w.empty()) {
        if (row >= static_cast<int>(aux_w.size()))
          throw UsageError("relative dynamics: aux disturbance vector too short");
        if (std::abs(aux_w[row]) > 1.0 + 1e-12)
          throw UsageError("relative dynamics: aux disturbance outside unit box");
        d += const_band[row] * aux_w[row];
      }
      for (int rr : channel_rows(row)) out[rr] += d;
    }
    return out;
  }

  // Affine decomposition at a point, for the game Hamiltonian. GP channels
  // enter the drift through their means and a unit-box channel column
  // scaled by e_bound * sigma; aux rows contribute unit-box columns scaled
  // by their constant band.
  AffineTerms affine_terms(std::span<const double> r) const {
    AffineTerms t;
    t.dim = rel_dim();
    t.n_us = 2;
    t.n_up = 2;
    t.us_box[0] = us_box[0];
    t.us_box[1] = us_box[1];
    t.up_box[0] = up_box[0];
    t.up_box[1] = up_box[1];

    const double psi = r[2];
    const double c = std::cos(psi), s = std::sin(psi);
    if (mode == RelMode::kUnicycle4d) {
      t.us_col[0][0] = c;
      t.us_col[0][1] = s;
      t.us_col[0][3] = s;
      t.us_col[1][2] = 1.0;
    } else {
      const double v = r[3], omega = r[4];
      t.drift[0] = v * c;
      t.drift[1] = v * s;
      t.drift[2] = omega;
      t.drift[3] = -(heron.lin_damp_v + heron.quad_damp_v * std::abs(v)) * v /
                   heron.mass_kg;
      t.drift[4] = -(heron.lin_damp_omega +
                     heron.quad_damp_omega * std::abs(omega)) *
                   omega / heron.inertia_kgm2;
      t.drift[5] = v * s;
      const double fm = heron.f_max_n / heron.mass_kg;
      const double tm = 0.5 * heron.length_m * heron.f_max_n / heron.inertia_kgm2;
      t.us_col[0][3] = fm;
      t.us_col[0][4] = tm;
      t.us_col[1][3] = fm;
      t.us_col[1][4] = -tm;
    }
    t.up_col[0][0] = -1.0;
    t.up_col[1][1] = -1.0;

    if (!uncertainty.components.empty()) {
      const std::vector<double> q = gp_query(r);
      for (const auto& [row, gp] : uncertainty.components) {
        const auto post = gp.posterior(q);
        for (int rr : channel_rows(row)) {
          t.drift[rr] += post.mean;
          t.ch_col[t.n_ch][rr] = uncertainty.e_bound * post.std;
        }
        ++t.n_ch;
      }
    }
    for (int row = 0; row < deriv_rows(); ++row) {
      if (!has_const_channel(row)) continue;
      for (int rr : channel_rows(row)) {
        t.drift[rr] += const_bias[row];
        t.ch_col[t.n_ch][rr] = const_band[row];
      }
      ++t.n_ch;
    }
    return t;
  }
};

// ---------------------------------------------------------------------------
// Truth simulator: unicycle kinematics plus the handcrafted state-dependent
// surge disturbance and bounded white noise on ydot and psidot.

inline double surge_disturbance(double y, double psi) {
  return 0.5 * (y * y - 1.0) * (1.0 + std::abs(std::sin(psi)));
}

struct TruthConfig {
  bool disturbance_on = true;
  double noise_amplitude = 0.02;
};

// Per-step noise draws, held constant across one integration step.
struct TruthNoise {
  double ydot = 0.0;
  double psidot = 0.0;
};

inline TruthNoise draw_truth_noise(const TruthConfig& cfg, Rng& rng) {
  if (cfg.noise_amplitude <= 0.0) return {};
  return {rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude),
          rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude)};
}

inline std::array<double, 3> truth_deriv(double y, double psi,
                                         const TrackInput& u,
                                         const TruthConfig& cfg,
                                         const TruthNoise& noise) {
  auto d = unicycle_deriv(psi, u);
  if (cfg.disturbance_on) d[0] += surge_disturbance(y, psi);
  d[1] += noise.ydot;
  d[2] += noise.psidot;
  return d;
}

// ---------------------------------------------------------------------------
// Fixed-step integrators. RK4 drives the simulation; the planning model is
// advanced with explicit Euler to match its discretized form exactly.

template <typename Fn>
std::vector<double> rk4_step(const Fn& f, const std::vector<double>& s,
                             double dt) {
  if (!(dt > 0)) throw UsageError("integrate: dt must be positive");
  const std::vector<double> k1 = f(s);
  const std::size_t n = s.size();
  std::vector<double> tmp(n);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = s[i] + 0.5 * dt * k1[i];
  const std::vector<double> k2 = f(tmp);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = s[i] + 0.5 * dt * k2[i];
  const std::vector<double> k3 = f(tmp);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = s[i] + dt * k3[i];
  const std::vector<double> k4 = f(tmp);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = s[i] + dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    if (!std::isfinite(out[i]))
      throw NumericalError("integrate: non-finite state");
  }
  return out;
}

template <typename Fn>
std::vector<double> euler_step(const Fn& f, const std::vector<double>& s,
                               double dt) {
  if (!(dt > 0)) throw UsageError("integrate: dt must be positive");
  const std::vector<double> k = f(s);
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = s[i] + dt * k[i];
    if (!std::isfinite(out[i]))
      throw NumericalError("integrate: non-finite state");
  }
  return out;
}

inline void wrap_angles(std::vector<double>& s, std::span<const int> angle_idx) {
  for (int i : angle_idx) s[i] = wrap_angle(s[i]);
}

}  // namespace gpteb

#endif  // GPTEB_DYNAMICS_HPP_
