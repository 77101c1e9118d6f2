#ifndef GPTEB_GP_HPP_
#define GPTEB_GP_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gpteb/common.hpp"

namespace gpteb {

// One measured residual: a state point and the observed derivative-space
// residual of one component at that point.
struct Observation {
  std::vector<double> state;
  double target = 0.0;
};

// Squared-exponential kernel with per-axis length scales and a constant
// prior mean.
struct KernelParams {
  double signal_variance = 1.0;        // sigma_f^2
  std::vector<double> length_scales;   // one per input axis
  double noise_std = 0.1;              // sigma_n
  double mean = 0.0;                   // constant prior mean

  void validate() const {
    if (!(signal_variance > 0.0))
      throw UsageError("kernel: signal variance must be positive");
    if (length_scales.empty())
      throw UsageError("kernel: needs at least one length scale");
    for (double l : length_scales)
      if (!(l > 0.0)) throw UsageError("kernel: length scales must be positive");
    if (noise_std < 0.0) throw UsageError("kernel: noise std must be >= 0");
  }
};

inline double kernel(std::span<const double> a, std::span<const double> b,
                     const KernelParams& p) {
  if (a.size() != b.size() || a.size() != p.length_scales.size())
    throw UsageError("kernel: dimension mismatch");
  double q = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (a[i] - b[i]) / p.length_scales[i];
    q += d * d;
  }
  return p.signal_variance * std::exp(-0.5 * q);
}

// Half-width of the uncertainty tuning box for a two-sided Gaussian mass p:
// sqrt(2) * erfinv(p), obtained by monotone bisection of erf.
inline double chance_halfwidth(double p) {
  if (!(p >= 0.0 && p < 1.0))
    throw UsageError("chance_halfwidth: p must lie in [0, 1)");
  if (p == 0.0) return 0.0;
  double lo = 0.0, hi = 6.0;
  while (std::erf(hi) < p) hi *= 2.0;  // p extremely close to 1
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (std::erf(mid) < p)
      lo = mid;
    else
      hi = mid;
    if (hi - lo < 1e-15) break;
  }
  return std::sqrt(2.0) * 0.5 * (lo + hi);
}

// Gaussian-process regressor for one residual component. Holds the training
// set, hyperparameters, and the cached Cholesky factorization of
// K(S,S) + sigma_n^2 I. Immutable after construction; reads are thread-safe.
class GpModel {
 public:
  GpModel() = default;

  GpModel(Eigen::MatrixXd inputs, Eigen::VectorXd targets, KernelParams params)
      : inputs_(std::move(inputs)),
        targets_(std::move(targets)),
        params_(std::move(params)) {
    params_.validate();
    if (inputs_.rows() != targets_.size())
      throw UsageError("gp: inputs/targets size mismatch");
    if (inputs_.cols() != static_cast<Eigen::Index>(params_.length_scales.size()))
      throw UsageError("gp: input dimension does not match length scales");
    factorize();
  }

  static GpModel from_observations(const std::vector<Observation>& obs,
                                   const KernelParams& params) {
    if (obs.empty()) throw UsageError("gp: no observations");
    const Eigen::Index n = static_cast<Eigen::Index>(obs.size());
    const Eigen::Index d = static_cast<Eigen::Index>(obs.front().state.size());
    Eigen::MatrixXd X(n, d);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (static_cast<Eigen::Index>(obs[i].state.size()) != d)
        throw UsageError("gp: inconsistent observation dimensions");
      for (Eigen::Index j = 0; j < d; ++j) X(i, j) = obs[i].state[j];
      y(i) = obs[i].target;
    }
    return GpModel(std::move(X), std::move(y), params);
  }

  Eigen::Index size() const { return inputs_.rows(); }
  Eigen::Index input_dim() const {
    return static_cast<Eigen::Index>(params_.length_scales.size());
  }
  const KernelParams& params() const { return params_; }
  const Eigen::MatrixXd& inputs() const { return inputs_; }
  const Eigen::VectorXd& targets() const { return targets_; }
  double jitter_used() const { return jitter_; }
  bool fit_warning() const { return fit_warning_; }
  void set_fit_warning(bool w) { fit_warning_ = w; }

  struct Posterior {
    double mean;
    double std;
  };

  // Posterior mean and standard deviation at a query point. The variance is
  // clamped at zero before the square root.
  Posterior posterior(std::span<const double> query) const {
    if (static_cast<Eigen::Index>(query.size()) != input_dim())
      throw UsageError("gp posterior: query dimension mismatch");
    if (size() == 0)
      return {params_.mean, std::sqrt(params_.signal_variance)};
    Eigen::VectorXd ks(size());
    for (Eigen::Index i = 0; i < size(); ++i) {
      double q = 0.0;
      for (Eigen::Index j = 0; j < input_dim(); ++j) {
        const double d = (query[j] - inputs_(i, j)) / params_.length_scales[j];
        q += d * d;
      }
      ks(i) = params_.signal_variance * std::exp(-0.5 * q);
    }
    const double mean = params_.mean + ks.dot(alpha_);
    const Eigen::VectorXd v =
        chol_.matrixL().solve(ks);  // L v = k*, so v'v = k*' (K+s^2I)^-1 k*
    double var = params_.signal_variance - v.squaredNorm();
    if (var < 0.0) var = 0.0;
    return {mean, std::sqrt(var)};
  }

  double log_marginal_likelihood() const {
    if (size() == 0) throw UsageError("gp: likelihood of empty model");
    const Eigen::VectorXd yc = targets_.array() - params_.mean;
    double log_det_half = 0.0;
    const auto& L = chol_.matrixLLT();
    for (Eigen::Index i = 0; i < size(); ++i) log_det_half += std::log(L(i, i));
    return -0.5 * yc.dot(alpha_) - log_det_half -
           0.5 * static_cast<double>(size()) * std::log(2.0 * kPi);
  }

 private:
  void factorize() {
    if (size() == 0) return;
    const Eigen::Index n = size();
    Eigen::MatrixXd K(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        double q = 0.0;
        for (Eigen::Index k = 0; k < input_dim(); ++k) {
          const double d =
              (inputs_(i, k) - inputs_(j, k)) / params_.length_scales[k];
          q += d * d;
        }
        const double v = params_.signal_variance * std::exp(-0.5 * q);
        K(i, j) = v;
        K(j, i) = v;
      }
    }
    const double noise_var = params_.noise_std * params_.noise_std;
    // Jitter ladder: retry with escalating diagonal inflation if the
    // factorization reports a non-PD matrix.
    double jitter = 0.0;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Eigen::MatrixXd Kj = K;
      Kj.diagonal().array() += noise_var + jitter;
      chol_.compute(Kj);
      if (chol_.info() == Eigen::Success) {
        jitter_ = jitter;
        const Eigen::VectorXd yc = targets_.array() - params_.mean;
        alpha_ = chol_.solve(yc);
        return;
      }
      jitter = (jitter == 0.0) ? 1e-6 * params_.signal_variance : jitter * 10.0;
    }
    throw NumericalError(
        "gp: covariance not positive definite even with jitter " +
        std::to_string(jitter));
  }

  Eigen::MatrixXd inputs_;
  Eigen::VectorXd targets_;
  KernelParams params_;
  Eigen::LLT<Eigen::MatrixXd> chol_;
  Eigen::VectorXd alpha_;
  double jitter_ = 0.0;
  bool fit_warning_ = false;
};

inline double log_marginal_likelihood(const GpModel& m) {
  return m.log_marginal_likelihood();
}

namespace detail {

// Nelder-Mead on an n-dimensional objective. Deterministic; no restarts.
inline std::vector<double> nelder_mead(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x0, double step, int max_evals, double* best_out) {
  const std::size_t n = x0.size();
  struct Vertex {
    std::vector<double> x;
    double v;
  };
  std::vector<Vertex> simplex;
  simplex.push_back({x0, f(x0)});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x = x0;
    x[i] += step;
    simplex.push_back({x, f(x)});
  }
  int evals = static_cast<int>(n) + 1;
  auto order = [&] {
    std::sort(simplex.begin(), simplex.end(),
              [](const Vertex& a, const Vertex& b) { return a.v < b.v; });
  };
  order();
  while (evals < max_evals) {
    if (std::abs(simplex.back().v - simplex.front().v) < 1e-10) break;
    std::vector<double> centroid(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k + 1 < simplex.size(); ++k)
        centroid[i] += simplex[k].x[i];
      centroid[i] /= static_cast<double>(n);
    }
    auto along = [&](double t) {
      std::vector<double> x(n);
      for (std::size_t i = 0; i < n; ++i)
        x[i] = centroid[i] + t * (simplex.back().x[i] - centroid[i]);
      return x;
    };
    const auto xr = along(-1.0);
    const double vr = f(xr);
    ++evals;
    if (vr < simplex.front().v) {
      const auto xe = along(-2.0);
      const double ve = f(xe);
      ++evals;
      simplex.back() = (ve < vr) ? Vertex{xe, ve} : Vertex{xr, vr};
    } else if (vr < simplex[simplex.size() - 2].v) {
      simplex.back() = {xr, vr};
    } else {
      const auto xc = along(0.5);
      const double vc = f(xc);
      ++evals;
      if (vc < simplex.back().v) {
        simplex.back() = {xc, vc};
      } else {
        for (std::size_t k = 1; k < simplex.size(); ++k) {
          for (std::size_t i = 0; i < n; ++i)
            simplex[k].x[i] =
                simplex.front().x[i] +
                0.5 * (simplex[k].x[i] - simplex.front().x[i]);
          simplex[k].v = f(simplex[k].x);
          ++evals;
        }
      }
    }
    order();
  }
  *best_out = simplex.front().v;
  return simplex.front().x;
}

}  // namespace detail

// Hyperparameter fit: multi-start Nelder-Mead over log-hyperparameters (the
// constant mean rides along in raw units). The returned model's marginal
// likelihood is never below the init's; if every start fails to factorize,
// the init-parameter model is returned with a warning flag.
inline GpModel fit(const std::vector<Observation>& obs,
                   const KernelParams& init) {
  if (obs.empty()) throw UsageError("fit: no observations");
  init.validate();
  const std::size_t dim = init.length_scales.size();

  auto unpack = [dim](const std::vector<double>& t) {
    KernelParams p;
    p.signal_variance = std::exp(clamp(t[0], -30.0, 30.0));
    p.length_scales.resize(dim);
    for (std::size_t i = 0; i < dim; ++i)
      p.length_scales[i] = std::exp(clamp(t[1 + i], -12.0, 12.0));
    p.noise_std = std::exp(clamp(t[1 + dim], -12.0, 6.0));
    p.mean = t[2 + dim];
    return p;
  };
  auto objective = [&](const std::vector<double>& t) {
    try {
      return -GpModel::from_observations(obs, unpack(t))
                  .log_marginal_likelihood();
    } catch (const NumericalError&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  std::vector<double> t0(dim + 3);
  t0[0] = std::log(init.signal_variance);
  for (std::size_t i = 0; i < dim; ++i) t0[1 + i] = std::log(init.length_scales[i]);
  t0[1 + dim] = std::log(std::max(init.noise_std, 1e-8));
  t0[2 + dim] = init.mean;

  // Data-scaled alternative starts around the init.
  double tmean = 0.0, tvar = 0.0;
  for (const auto& o : obs) tmean += o.target;
  tmean /= static_cast<double>(obs.size());
  for (const auto& o : obs) tvar += (o.target - tmean) * (o.target - tmean);
  tvar = std::max(tvar / static_cast<double>(obs.size()), 1e-12);

  std::vector<std::vector<double>> starts{t0};
  for (double lscale : {-1.0, 1.0}) {
    auto t = t0;
    t[0] = std::log(tvar);
    for (std::size_t i = 0; i < dim; ++i) t[1 + i] += lscale;
    t[1 + dim] = std::log(std::sqrt(tvar) * 0.1);
    t[2 + dim] = tmean;
    starts.push_back(t);
  }
  {
    auto t = t0;
    t[0] = std::log(tvar * 4.0);
    t[1 + dim] = std::log(std::sqrt(tvar) * 0.01 + 1e-9);
    t[2 + dim] = tmean;
    starts.push_back(t);
  }

  double best = objective(t0);
  std::vector<double> best_t = t0;
  bool any_finite = std::isfinite(best);
  for (const auto& s : starts) {
    double v;
    auto t = detail::nelder_mead(objective, s, 0.4,
                                 400 * static_cast<int>(dim + 3), &v);
    if (std::isfinite(v) && v < best) {
      best = v;
      best_t = t;
      any_finite = true;
    }
  }

  if (!any_finite) {
    GpModel m = GpModel::from_observations(obs, init);
    m.set_fit_warning(true);
    return m;
  }
  return GpModel::from_observations(obs, unpack(best_t));
}

// The learned state-dependent uncertainty: one independent GP per modeled
// derivative component, a shared tuning box for e, and the list of state
// axes the GPs read.
struct UncertaintyModel {
  std::vector<int> active_axes;       // state components feeding the GPs
  std::map<int, GpModel> components;  // derivative row -> regressor
  double confidence_p = 0.0;          // 0 when the box was set directly
  double e_bound = 0.0;               // half-width of the e box

  static double bound_from_p(double p) { return chance_halfwidth(p); }

  bool models_row(int row) const { return components.count(row) > 0; }

  std::vector<double> slice(std::span<const double> state) const {
    std::vector<double> q(active_axes.size());
    for (std::size_t i = 0; i < active_axes.size(); ++i)
      q[i] = state[active_axes[i]];
    return q;
  }

  // Mean + e*std per modeled component of the derivative residual, zero on
  // unmodeled components. e is indexed by derivative row and must lie in
  // the tuning box.
  std::vector<double> evaluate(std::span<const double> state,
                               std::span<const double> e, int rows) const {
    for (const auto& [row, gp] : components) {
      (void)gp;
      if (row >= static_cast<int>(e.size()))
        throw UsageError("uncertainty: e vector shorter than modeled rows");
    }
    for (double ej : e)
      if (std::abs(ej) > e_bound + 1e-12)
        throw UsageError("uncertainty: e outside the tuning box");
    std::vector<double> out(rows, 0.0);
    if (components.empty()) return out;
    const std::vector<double> q = slice(state);
    for (const auto& [row, gp] : components) {
      const auto post = gp.posterior(q);
      out[row] = post.mean + e[row] * post.std;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// JSON persistence. Models re-factorize deterministically on load.

inline void to_json(nlohmann::json& j, const KernelParams& p) {
  j = {{"signal_variance", p.signal_variance},
       {"length_scales", p.length_scales},
       {"noise_std", p.noise_std},
       {"mean", p.mean}};
}

inline void from_json(const nlohmann::json& j, KernelParams& p) {
  j.at("signal_variance").get_to(p.signal_variance);
  j.at("length_scales").get_to(p.length_scales);
  j.at("noise_std").get_to(p.noise_std);
  j.at("mean").get_to(p.mean);
}

inline nlohmann::json gp_to_json(const GpModel& m) {
  nlohmann::json j;
  j["params"] = m.params();
  std::vector<std::vector<double>> X(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    X[i].resize(m.input_dim());
    for (Eigen::Index k = 0; k < m.input_dim(); ++k) X[i][k] = m.inputs()(i, k);
  }
  std::vector<double> y(m.targets().data(), m.targets().data() + m.size());
  j["inputs"] = X;
  j["targets"] = y;
  j["fit_warning"] = m.fit_warning();
  return j;
}

inline GpModel gp_from_json(const nlohmann::json& j) {
  const KernelParams params = j.at("params").get<KernelParams>();
  const auto X = j.at("inputs").get<std::vector<std::vector<double>>>();
  const auto y = j.at("targets").get<std::vector<double>>();
  Eigen::MatrixXd Xi(X.size(), params.length_scales.size());
  Eigen::VectorXd yi(y.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    for (std::size_t k = 0; k < X[i].size(); ++k) Xi(i, k) = X[i][k];
    yi(i) = y[i];
  }
  GpModel m(std::move(Xi), std::move(yi), params);
  m.set_fit_warning(j.value("fit_warning", false));
  return m;
}

inline nlohmann::json uncertainty_to_json(const UncertaintyModel& u) {
  nlohmann::json j;
  j["active_axes"] = u.active_axes;
  j["confidence_p"] = u.confidence_p;
  j["e_bound"] = u.e_bound;
  nlohmann::json comps = nlohmann::json::object();
  for (const auto& [row, gp] : u.components)
    comps[std::to_string(row)] = gp_to_json(gp);
  j["components"] = comps;
  return j;
}

inline UncertaintyModel uncertainty_from_json(const nlohmann::json& j) {
  UncertaintyModel u;
  j.at("active_axes").get_to(u.active_axes);
  j.at("confidence_p").get_to(u.confidence_p);
  j.at("e_bound").get_to(u.e_bound);
  for (const auto& [key, val] : j.at("components").items())
    u.components.emplace(std::stoi(key), gp_from_json(val));
  return u;
}

}  // namespace gpteb

#endif  // GPTEB_GP_HPP_
