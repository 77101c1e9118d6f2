#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "gpteb/gp.hpp"

using namespace gpteb;

namespace {

// Independent dense oracle for the posterior: builds the full covariance
// with its own kernel arithmetic and solves with hand-rolled Gaussian
// elimination. No factorization, no shared code with the implementation.
struct DenseOracle {
  std::vector<std::vector<double>> X;
  std::vector<double> y;
  KernelParams p;

  double kfn(const std::vector<double>& a, const std::vector<double>& b) const {
    double q = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = (a[i] - b[i]) / p.length_scales[i];
      q += d * d;
    }
    return p.signal_variance * std::exp(-0.5 * q);
  }

  // Solve A x = b by Gaussian elimination with partial pivoting.
  static std::vector<double> solve(std::vector<std::vector<double>> A,
                                   std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t piv = c;
      for (std::size_t r = c + 1; r < n; ++r)
        if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
      std::swap(A[c], A[piv]);
      std::swap(b[c], b[piv]);
      for (std::size_t r = c + 1; r < n; ++r) {
        const double f = A[r][c] / A[c][c];
        for (std::size_t k = c; k < n; ++k) A[r][k] -= f * A[c][k];
        b[r] -= f * b[c];
      }
    }
    std::vector<double> x(n);
    for (std::size_t i = n; i-- > 0;) {
      double s = b[i];
      for (std::size_t k = i + 1; k < n; ++k) s -= A[i][k] * x[k];
      x[i] = s / A[i][i];
    }
    return x;
  }

  std::pair<double, double> posterior(const std::vector<double>& q) const {
    const std::size_t n = y.size();
    std::vector<std::vector<double>> K(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        K[i][j] = kfn(X[i], X[j]);
        if (i == j) K[i][j] += p.noise_std * p.noise_std;
      }
    std::vector<double> ks(n), yc(n);
    for (std::size_t i = 0; i < n; ++i) {
      ks[i] = kfn(X[i], q);
      yc[i] = y[i] - p.mean;
    }
    const auto a = solve(K, yc);
    const auto w = solve(K, ks);
    double mean = p.mean, quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mean += ks[i] * a[i];
      quad += ks[i] * w[i];
    }
    double var = kfn(q, q) - quad;
    if (var < 0) var = 0;
    return {mean, std::sqrt(var)};
  }

  double lml() const {
    const std::size_t n = y.size();
    std::vector<std::vector<double>> K(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        K[i][j] = kfn(X[i], X[j]);
        if (i == j) K[i][j] += p.noise_std * p.noise_std;
      }
    // determinant via the same elimination
    auto A = K;
    double logdet = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t piv = c;
      for (std::size_t r = c + 1; r < n; ++r)
        if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
      if (piv != c) std::swap(A[c], A[piv]);  // PD matrix: permutation sign
      logdet += std::log(std::abs(A[c][c]));  // cancels in abs
      for (std::size_t r = c + 1; r < n; ++r) {
        const double f = A[r][c] / A[c][c];
        for (std::size_t k = c; k < n; ++k) A[r][k] -= f * A[c][k];
      }
    }
    std::vector<double> yc(n);
    for (std::size_t i = 0; i < n; ++i) yc[i] = y[i] - p.mean;
    const auto a = solve(K, yc);
    double quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) quad += yc[i] * a[i];
    return -0.5 * quad - 0.5 * logdet - 0.5 * n * std::log(2 * kPi);
  }
};

GpModel model_from(const DenseOracle& o) {
  std::vector<Observation> obs;
  for (std::size_t i = 0; i < o.y.size(); ++i) obs.push_back({o.X[i], o.y[i]});
  return GpModel::from_observations(obs, o.p);
}

}  // namespace

TEST_CASE("kernel values") {
  KernelParams p{1.0, {1.0}, 0.0, 0.0};
  double a[1] = {0.0}, b[1] = {1.0};
  CHECK(kernel(a, a, p) == Catch::Approx(1.0));
  CHECK(kernel(a, b, p) == Catch::Approx(std::exp(-0.5)));
  double far[1] = {40.0};
  CHECK(kernel(a, far, p) < 1e-300);

  KernelParams p2{2.5, {0.5, 2.0}, 0.0, 0.0};
  double u[2] = {0.1, -0.3}, v[2] = {0.4, 0.9};
  CHECK(kernel(u, v, p2) == Catch::Approx(kernel(v, u, p2)));
  CHECK(kernel(u, u, p2) == Catch::Approx(2.5));

  CHECK_THROWS_AS(kernel(a, u, p), UsageError);
}

TEST_CASE("log marginal likelihood, scalar case") {
  // one observation of 0 with total variance sigma_f^2 + sigma_n^2 = 1
  DenseOracle o{{{0.0}}, {0.0}, KernelParams{0.5, {1.0}, std::sqrt(0.5), 0.0}};
  GpModel m = model_from(o);
  CHECK(m.log_marginal_likelihood() ==
        Catch::Approx(-0.5 * std::log(2 * kPi)).epsilon(1e-10));
}

TEST_CASE("log marginal likelihood matches dense oracle, N=2") {
  DenseOracle o{{{0.0}, {0.7}},
                {0.3, -0.4},
                KernelParams{1.3, {0.8}, 0.2, 0.1}};
  GpModel m = model_from(o);
  CHECK(m.log_marginal_likelihood() == Catch::Approx(o.lml()).margin(1e-10));
}

TEST_CASE("target scaling with matched signal variance keeps the argmax length scale") {
  std::mt19937_64 eng(42);
  auto u01 = [&] { return (eng() >> 11) * 0x1.0p-53; };
  DenseOracle base;
  base.p = KernelParams{1.0, {0.5}, 0.05, 0.0};
  for (int i = 0; i < 12; ++i) {
    const double x = u01() * 4 - 2;
    base.X.push_back({x});
    base.y.push_back(std::sin(1.7 * x) + 0.02 * (u01() - 0.5));
  }
  const double c = 3.7;  // scale targets by c, signal variance by c^2
  auto argmax_scale = [&](double tscale) {
    double best = -1e300;
    double best_l = 0;
    for (double l = 0.1; l < 2.5; l += 0.05) {
      DenseOracle o = base;
      o.p.length_scales = {l};
      o.p.signal_variance *= tscale * tscale;
      o.p.noise_std *= tscale;
      for (auto& yv : o.y) yv *= tscale;
      GpModel m = model_from(o);
      const double v = m.log_marginal_likelihood();
      if (v > best) {
        best = v;
        best_l = l;
      }
    }
    return best_l;
  };
  CHECK(argmax_scale(1.0) == Catch::Approx(argmax_scale(c)));
}

TEST_CASE("posterior of the empty model equals the prior") {
  GpModel m(Eigen::MatrixXd(0, 1), Eigen::VectorXd(0),
            KernelParams{2.25, {1.0}, 0.1, 0.7});
  double q[1] = {0.3};
  auto post = m.posterior(q);
  CHECK(post.mean == Catch::Approx(0.7));
  CHECK(post.std == Catch::Approx(1.5));
}

TEST_CASE("noiseless model interpolates its training points") {
  DenseOracle o{{{-0.5}, {0.2}, {1.1}},
                {0.4, -0.2, 0.9},
                KernelParams{1.0, {0.6}, 0.0, 0.0}};
  GpModel m = model_from(o);
  for (std::size_t i = 0; i < o.y.size(); ++i) {
    auto post = m.posterior(o.X[i]);
    CHECK(post.mean == Catch::Approx(o.y[i]).margin(1e-8));
    CHECK(post.std < 1e-4);
  }
}

TEST_CASE("posterior matches dense oracle, N=3") {
  DenseOracle o{{{0.1, -0.2}, {0.9, 0.4}, {-0.6, 0.8}},
                {0.5, -0.1, 0.3},
                KernelParams{0.8, {0.7, 1.2}, 0.15, -0.2}};
  GpModel m = model_from(o);
  for (auto q : {std::vector<double>{0.0, 0.0}, {0.5, 0.5}, {-1.0, 1.0}}) {
    auto [om, os] = o.posterior(q);
    auto post = m.posterior(q);
    CHECK(post.mean == Catch::Approx(om).margin(1e-10));
    CHECK(post.std == Catch::Approx(os).margin(1e-10));
  }
}

TEST_CASE("posterior matches dense oracle on random datasets up to N=50") {
  std::mt19937_64 eng(7);
  auto u01 = [&] { return (eng() >> 11) * 0x1.0p-53; };
  for (int rep = 0; rep < 25; ++rep) {
    const int n = 1 + static_cast<int>(eng() % 50);
    const int d = 1 + static_cast<int>(eng() % 4);
    DenseOracle o;
    o.p.signal_variance = 0.3 + 2.0 * u01();
    o.p.noise_std = 0.05 + 0.3 * u01();
    o.p.mean = u01() - 0.5;
    o.p.length_scales.assign(d, 0.0);
    for (auto& l : o.p.length_scales) l = 0.3 + 1.5 * u01();
    for (int i = 0; i < n; ++i) {
      std::vector<double> x(d);
      for (auto& xi : x) xi = u01() * 4 - 2;
      o.X.push_back(x);
      o.y.push_back(u01() * 2 - 1);
    }
    GpModel m = model_from(o);
    std::vector<double> q(d);
    for (auto& qi : q) qi = u01() * 4 - 2;
    auto [om, os] = o.posterior(q);
    auto post = m.posterior(q);
    REQUIRE(post.mean == Catch::Approx(om).margin(1e-8));
    REQUIRE(post.std == Catch::Approx(os).margin(1e-8));
  }
}

TEST_CASE("adding an observation at the query never increases posterior std") {
  std::mt19937_64 eng(13);
  auto u01 = [&] { return (eng() >> 11) * 0x1.0p-53; };
  for (int rep = 0; rep < 10; ++rep) {
    DenseOracle o;
    o.p = KernelParams{1.0, {0.8}, 0.1, 0.0};
    const int n = 3 + static_cast<int>(eng() % 10);
    for (int i = 0; i < n; ++i) {
      o.X.push_back({u01() * 4 - 2});
      o.y.push_back(u01() * 2 - 1);
    }
    const std::vector<double> q{u01() * 4 - 2};
    GpModel before = model_from(o);
    o.X.push_back(q);
    o.y.push_back(u01() * 2 - 1);
    GpModel after = model_from(o);
    REQUIRE(after.posterior(q).std <= before.posterior(q).std + 1e-12);
  }
}

TEST_CASE("chance halfwidth") {
  CHECK(chance_halfwidth(0.0) == 0.0);
  CHECK(chance_halfwidth(0.6827) == Catch::Approx(1.0).margin(1e-3));
  CHECK(chance_halfwidth(0.9545) == Catch::Approx(2.0).margin(1e-3));
  CHECK(chance_halfwidth(0.9973) == Catch::Approx(3.0).margin(1e-3));
  CHECK_THROWS_AS(chance_halfwidth(1.0), UsageError);
  CHECK_THROWS_AS(chance_halfwidth(-0.1), UsageError);
  // round trip through erf
  for (double p : {0.1, 0.5, 0.9, 0.99}) {
    CHECK(std::erf(chance_halfwidth(p) / std::sqrt(2.0)) ==
          Catch::Approx(p).margin(1e-12));
  }
}

TEST_CASE("fit recovers a smooth function") {
  std::mt19937_64 eng(99);
  auto u01 = [&] { return (eng() >> 11) * 0x1.0p-53; };
  std::vector<Observation> obs;
  for (int i = 0; i < 20; ++i) {
    const double x = -3.0 + 6.0 * i / 19.0;
    obs.push_back({{x}, std::sin(x) + 0.01 * (u01() - 0.5)});
  }
  KernelParams init{1.0, {1.0}, 0.1, 0.0};
  GpModel m = fit(obs, init);
  CHECK_FALSE(m.fit_warning());
  CHECK(m.log_marginal_likelihood() >=
        GpModel::from_observations(obs, init).log_marginal_likelihood() - 1e-9);
  for (double x = -2.8; x <= 2.8; x += 0.2) {
    double q[1] = {x};
    REQUIRE(m.posterior(q).mean == Catch::Approx(std::sin(x)).margin(0.1));
  }
}

TEST_CASE("fit on noiseless prior-mean data drives the noise down") {
  std::vector<Observation> obs;
  for (int i = 0; i < 8; ++i) obs.push_back({{i * 0.4}, 0.25});
  GpModel m = fit(obs, KernelParams{1.0, {1.0}, 0.3, 0.0});
  // constant data: posterior should interpolate it almost exactly
  for (int i = 0; i < 8; ++i) {
    double q[1] = {i * 0.4};
    CHECK(m.posterior(q).mean == Catch::Approx(0.25).margin(1e-3));
  }
  CHECK(m.params().noise_std < 0.05);
  CHECK_THROWS_AS(fit({}, KernelParams{1.0, {1.0}, 0.1, 0.0}), UsageError);
}

TEST_CASE("uncertainty model is affine in e with nonnegative slope") {
  DenseOracle o{{{0.0, 0.0}, {0.5, 0.3}, {-0.4, 0.8}},
                {-0.5, -0.3, -0.1},
                KernelParams{0.5, {0.5, 0.5}, 0.05, 0.0}};
  UncertaintyModel u;
  u.active_axes = {1, 2};  // state = (x, y, psi); GP reads (y, psi)
  u.confidence_p = 0.95;
  u.e_bound = chance_halfwidth(0.95);
  u.components.emplace(0, model_from(o));

  const std::vector<double> s{3.0, 0.2, 0.1};
  std::vector<double> e0{0.0, 0.0, 0.0};
  auto d0 = u.evaluate(s, e0, 3);
  auto post = u.components.at(0).posterior(std::vector<double>{0.2, 0.1});
  CHECK(d0[0] == Catch::Approx(post.mean));
  CHECK(d0[1] == 0.0);
  CHECK(d0[2] == 0.0);

  std::vector<double> ev{u.e_bound, 0.0, 0.0};
  auto dv = u.evaluate(s, ev, 3);
  CHECK(dv[0] == Catch::Approx(post.mean + u.e_bound * post.std));

  // affine: slope between any two e values equals sigma
  std::vector<double> eh{0.5, 0.0, 0.0};
  auto dh = u.evaluate(s, eh, 3);
  const double slope1 = (dh[0] - d0[0]) / 0.5;
  const double slope2 = (dv[0] - dh[0]) / (u.e_bound - 0.5);
  CHECK(slope1 == Catch::Approx(post.std).margin(1e-12));
  CHECK(slope2 == Catch::Approx(post.std).margin(1e-12));
  CHECK(post.std >= 0.0);

  std::vector<double> ebad{u.e_bound + 0.1, 0.0, 0.0};
  CHECK_THROWS_AS(u.evaluate(s, ebad, 3), UsageError);
}

TEST_CASE("gp json round trip preserves the posterior") {
  DenseOracle o{{{0.1}, {0.9}, {-0.6}},
                {0.5, -0.1, 0.3},
                KernelParams{0.8, {0.7}, 0.15, -0.2}};
  GpModel m = model_from(o);
  const nlohmann::json j = gp_to_json(m);
  GpModel r = gp_from_json(j);
  for (double x = -1.0; x <= 1.0; x += 0.1) {
    double q[1] = {x};
    REQUIRE(r.posterior(q).mean == Catch::Approx(m.posterior(q).mean).margin(1e-14));
    REQUIRE(r.posterior(q).std == Catch::Approx(m.posterior(q).std).margin(1e-14));
  }
}
