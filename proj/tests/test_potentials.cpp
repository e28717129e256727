#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "jflow/benchmarks.hpp"
#include "jflow/potential.hpp"

using namespace jflow;

namespace {

// relative gradient error against central differences
double grad_fd_error(const Potential& u, std::span<const double> x) {
  auto g = u.gradient(x);
  auto fd = finite_difference_gradient(
      [&](std::span<const double> p) { return u.energy(p); }, x);
  double num = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    num += (g[i] - fd[i]) * (g[i] - fd[i]);
  return std::sqrt(num) / (1.0 + norm2(g));
}

std::vector<double> random_point(const Potential& u, Rng& rng, double scale) {
  std::vector<double> x(u.dim());
  for (int i = 0; i < u.dim(); ++i)
    x[i] = u.topology().is_circular(i) ? rng.uniform(-kPi, kPi)
                                       : scale * rng.normal();
  return x;
}

}  // namespace

TEST_CASE("benchmark pointwise values") {
  auto tw = make_benchmark("TW");
  CHECK(tw.energy(std::vector<double>{1.0, 1.0}) ==
        doctest::Approx(3.0 * std::sin(3.0)).epsilon(1e-12));

  auto hb = make_benchmark("HB");
  CHECK(hb.energy(std::vector<double>{3.0, 2.0}) ==
        doctest::Approx(0.0).epsilon(1e-12));

  auto an = make_benchmark("AN");
  CHECK(an.energy(std::vector<double>{2.0, 0.0}) ==
        doctest::Approx(10.0).epsilon(1e-12));

  auto dw = make_benchmark("DOUBLEWELL1D");
  CHECK(dw.energy(std::vector<double>{1.0}) == doctest::Approx(0.0));
  // left well is below zero
  CHECK(dw.energy(std::vector<double>{-1.0}) < 0.0);
}

TEST_CASE("gradients match finite differences at 100 seeded points") {
  const char* names[] = {"TW",     "HB",          "AN",          "MW",
                         "PW",     "GMM2D",       "GMM3D",       "ROSENBROCK4D",
                         "RASTRIGIN8D", "SOLVATED16D", "DOUBLEWELL1D", "GAUSSIAN"};
  for (const char* name : names) {
    CAPTURE(name);
    auto u = make_benchmark(name, 11, 3);
    Rng rng(seed_fanout(42, name));
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      auto x = random_point(u, rng, 1.5);
      worst = std::max(worst, grad_fd_error(u, x));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("periodic potentials invariant under 2*pi shifts") {
  for (const char* name : {"PW", "SOLVATED16D"}) {
    auto u = make_benchmark(name);
    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
      auto x = random_point(u, rng, 1.0);
      double u0 = u.energy(x);
      for (int i : u.topology().circular_indices()) {
        auto shifted = x;
        shifted[i] += kTwoPi;
        CHECK(u.energy(shifted) == doctest::Approx(u0).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("solvated conditional minimizer is alpha_k sin(x1) sin(x2)") {
  auto u = make_benchmark("SOLVATED16D");
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x(16);
    x[0] = rng.uniform(-kPi, kPi);
    x[1] = rng.uniform(-kPi, kPi);
    double s = std::sin(x[0]) * std::sin(x[1]);
    for (int k = 0; k < 14; ++k) {
      double alpha = 2.0 + 2.0 * k / 13.0;
      x[k + 2] = alpha * s;  // put the bath at the conditional minimizer
    }
    auto g = u.gradient(x);
    for (int k = 2; k < 16; ++k) CHECK(std::fabs(g[k]) < 1e-12);
    // and moving one bath coordinate raises the energy
    double u0 = u.energy(x);
    x[5] += 0.3;
    CHECK(u.energy(x) > u0);
  }
}

TEST_CASE("rastrigin orthogonal matrix deterministic and orthogonal") {
  auto a = make_benchmark("RASTRIGIN8D", 5);
  auto b = make_benchmark("RASTRIGIN8D", 5);
  auto c = make_benchmark("RASTRIGIN8D", 6);
  Rng rng(1);
  std::vector<double> x(8);
  for (auto& v : x) v = rng.normal();
  CHECK(a.energy(x) == b.energy(x));
  CHECK(a.energy(x) != c.energy(x));
}

TEST_CASE("interpolation endpoints and midpoint") {
  auto u0 = Potential(
      "half_sq", DomainTopology(1),
      [](std::span<const double> x) { return 0.5 * x[0] * x[0]; },
      [](std::span<const double> x, std::span<double> g) { g[0] = x[0]; });
  auto um = Potential(
      "shifted", DomainTopology(1),
      [](std::span<const double> x) {
        return 0.5 * (x[0] - 2.0) * (x[0] - 2.0);
      },
      [](std::span<const double> x, std::span<double> g) { g[0] = x[0] - 2.0; });

  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x{rng.normal()};
    CHECK(interpolate(u0, um, 0.0).energy(x) == u0.energy(x));
    CHECK(interpolate(u0, um, 1.0).energy(x) == um.energy(x));
  }
  std::vector<double> zero{0.0};
  CHECK(interpolate(u0, um, 0.5).energy(zero) == doctest::Approx(1.0));

  auto u2 = make_benchmark("GAUSSIAN", 0, 2);
  CHECK_THROWS_AS((void)interpolate(u0, u2, 0.5), ConfigError);
  CHECK_THROWS_AS((void)make_benchmark("NOPE"), ConfigError);
}

TEST_CASE("finite sum: batch view and mean") {
  auto mk = [](double c) {
    return Potential(
        "q", DomainTopology(1),
        [c](std::span<const double> x) { return c * x[0] * x[0]; },
        [c](std::span<const double> x, std::span<double> g) {
          g[0] = 2.0 * c * x[0];
        });
  };
  auto fs = make_finite_sum({mk(1.0), mk(3.0)});
  std::vector<double> x{1.0};
  std::vector<std::size_t> first{0}, both{0, 1};
  CHECK(fs.batch_energy(x, first) == doctest::Approx(1.0));
  CHECK(fs.full().energy(x) == doctest::Approx(2.0));
  CHECK(fs.batch_energy(x, both) == doctest::Approx(2.0));

  // identical components: any batch equals the full sum
  auto same = make_finite_sum({mk(2.0), mk(2.0), mk(2.0)});
  CHECK(same.batch_energy(x, first) == doctest::Approx(same.full().energy(x)));

  CHECK_THROWS_AS((void)make_finite_sum({}), ConfigError);
}

TEST_CASE("cosine noise expansion has zero mean per draw") {
  auto clean = make_benchmark("GMM2D");
  CosineNoiseSpec noise;
  noise.terms = {{0, 4.0}, {1, 4.0}};
  auto fs = make_finite_sum({clean}, noise);
  CHECK(fs.size() == 4);

  Rng rng(21);
  std::vector<double> x{0.7, -1.3};
  double clean_u = clean.energy(x);
  // empirical mean of the noise over 1e5 single-draw batches
  double acc = 0.0;
  int n = 100000;
  for (int t = 0; t < n; ++t) {
    std::vector<std::size_t> batch{rng.below(4)};
    acc += fs.batch_energy(x, batch) - clean_u;
  }
  double mean = acc / n;
  // per-draw noise is +-4 cos(x1) +- 4 cos(x2); bound 3 sigma of the mean
  double sd = std::sqrt(16.0 * (std::pow(std::cos(x[0]), 2) +
                                std::pow(std::cos(x[1]), 2)) /
                        n);
  CHECK(std::fabs(mean) < 3.0 * sd);
  // exact mean over all components is zero
  std::vector<std::size_t> all{0, 1, 2, 3};
  CHECK(fs.batch_energy(x, all) == doctest::Approx(clean_u).epsilon(1e-12));
}
