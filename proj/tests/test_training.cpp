#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "jflow/benchmarks.hpp"
#include "jflow/training.hpp"

using namespace jflow;

namespace {

Ensemble draw_gaussian(std::size_t n, int d, double mean, double sd,
                       std::uint64_t seed) {
  Ensemble e = Ensemble::uniform(d, n, DomainTopology(d), "gauss", seed);
  Rng rng(seed);
  for (auto& v : e.positions) v = mean + sd * rng.normal();
  return e;
}

std::vector<std::size_t> iota_batch(std::size_t n) {
  std::vector<std::size_t> b(n);
  std::iota(b.begin(), b.end(), 0);
  return b;
}

Potential gaussian_potential(double mean, double sd) {
  double inv = 1.0 / (sd * sd);
  return Potential(
      "gauss", DomainTopology(1),
      [mean, inv](std::span<const double> x) {
        return 0.5 * (x[0] - mean) * (x[0] - mean) * inv;
      },
      [mean, inv](std::span<const double> x, std::span<double> g) {
        g[0] = (x[0] - mean) * inv;
      });
}

}  // namespace

TEST_CASE("losses vanish for the identity flow on matched potentials") {
  auto u = make_benchmark("GAUSSIAN", 0, 2);
  Ensemble mu = draw_gaussian(512, 2, 0.0, 1.0, 9);
  Flow identity(DomainTopology(2));
  std::vector<double> grad;  // zero-parameter flow
  auto batch = iota_batch(512);
  auto rev = reverse_kl_loss(identity, mu, u, u, batch, 1.0, grad);
  CHECK(rev.value == doctest::Approx(0.0));
  CHECK(rev.n_bad == 0);
  auto fwd = forward_kl_loss(identity, mu, u, u, batch, 1.0, grad);
  CHECK(fwd.value == doctest::Approx(0.0));
}

TEST_CASE("loss gradients match finite differences on spline flows") {
  auto u0 = make_benchmark("GAUSSIAN", 0, 2);
  for (const char* target : {"TW", "MW", "GMM2D"}) {
    CAPTURE(target);
    auto u1 = make_benchmark(target);
    Ensemble mu0 = draw_gaussian(64, 2, 0.0, 1.0, 5);
    Ensemble mu1 = draw_gaussian(64, 2, 1.0, 1.5, 6);

    FlowArch arch;
    arch.layers = 2;
    arch.hidden = {8};
    arch.bins = 4;
    arch.tail_override = {6.0};
    Flow f = build_flow(DomainTopology(2), arch, {}, 3);
    auto p0 = f.parameters();
    Rng rng(seed_fanout(1, target));
    for (auto& v : p0) v = 0.25 * rng.normal();
    f.set_parameters(p0);

    auto batch = iota_batch(64);
    for (int direction = 0; direction < 2; ++direction) {
      std::vector<double> grad(f.param_count(), 0.0);
      double base;
      if (direction == 0)
        base = reverse_kl_loss(f, mu0, u0, u1, batch, 1.0, grad).value;
      else
        base = forward_kl_loss(f, mu1, u0, u1, batch, 1.0, grad).value;
      (void)base;
      const double h = 1e-5;
      double worst = 0.0;
      for (int i = 0; i < f.param_count(); ++i) {
        auto p = p0;
        p[i] += h;
        f.set_parameters(p);
        std::vector<double> dump;
        double fp = direction == 0
                        ? reverse_kl_loss(f, mu0, u0, u1, batch, 0.0, dump)
                              .value
                        : forward_kl_loss(f, mu1, u0, u1, batch, 0.0, dump)
                              .value;
        p[i] = p0[i] - h;
        f.set_parameters(p);
        double fm = direction == 0
                        ? reverse_kl_loss(f, mu0, u0, u1, batch, 0.0, dump)
                              .value
                        : forward_kl_loss(f, mu1, u0, u1, batch, 0.0, dump)
                              .value;
        double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst,
                         std::fabs(grad[i] - fd) /
                             (1.0 + std::max(std::fabs(grad[i]),
                                             std::fabs(fd))));
      }
      f.set_parameters(p0);
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("jeffreys weighting: endpoints and unit-variance example") {
  // deterministic ensembles with exactly unit per-coordinate variance
  Ensemble mu0 = Ensemble::uniform(2, 4, DomainTopology(2));
  mu0.positions = {1, 1, -1, -1, 1, -1, -1, 1};
  Ensemble mu1 = mu0;
  CHECK(variance_trace(mu0) == doctest::Approx(2.0));

  auto u = make_benchmark("GAUSSIAN", 0, 2);
  Flow identity(DomainTopology(2));
  std::vector<double> grad;
  auto b = iota_batch(4);

  // theta = 0.5 on unit-variance ensembles: lambda0 = lambda1 = 1
  double l0 = 0.5 * variance_trace(mu0);
  double l1 = 0.5 * variance_trace(mu1);
  CHECK(l0 == doctest::Approx(1.0));
  CHECK(l1 == doctest::Approx(1.0));

  auto both = jeffreys_loss(identity, mu0, mu1, u, u, l0, l1, std::nullopt,
                            b, b, grad);
  CHECK(both.combined == doctest::Approx(l0 * both.reverse +
                                         l1 * both.forward));

  // theta = 1: forward term carries zero weight
  auto rev_only = jeffreys_loss(identity, mu0, mu1, u, u, 2.0, 0.0,
                                std::nullopt, b, b, grad);
  CHECK(rev_only.forward == 0.0);
  auto fwd_only = jeffreys_loss(identity, mu0, mu1, u, u, 0.0, 2.0,
                                std::nullopt, b, b, grad);
  CHECK(fwd_only.reverse == 0.0);
}

TEST_CASE("renyi loss: zero at matched distributions, KL limit") {
  auto u = make_benchmark("GAUSSIAN", 0, 1);
  Ensemble mu = draw_gaussian(4096, 1, 0.0, 1.0, 12);
  Flow identity(DomainTopology(1));
  std::vector<double> grad;
  auto batch = iota_batch(4096);

  auto same = renyi_loss(identity, mu, u, u, 1.5, true, batch, 0.0, grad);
  CHECK(same.value == doctest::Approx(0.0));

  // mismatched pair: alpha -> 1 approaches the KL estimate monotonically
  auto u1 = gaussian_potential(0.4, 1.0);
  double kl =
      reverse_kl_loss(identity, mu, u, u1, batch, 0.0, grad).value;
  double r101 = renyi_loss(identity, mu, u, u1, 1.01, true, batch, 0.0, grad)
                    .value;
  double r1001 =
      renyi_loss(identity, mu, u, u1, 1.001, true, batch, 0.0, grad).value;
  CHECK(std::fabs(r1001 - kl) < std::fabs(r101 - kl));
  CHECK(std::fabs(r1001 - kl) < 5e-3);
}

TEST_CASE("renyi gradient matches finite differences") {
  auto u0 = make_benchmark("GAUSSIAN", 0, 2);
  auto u1 = make_benchmark("TW");
  Ensemble mu = draw_gaussian(48, 2, 0.5, 1.0, 19);
  FlowArch arch;
  arch.layers = 1;
  arch.hidden = {6};
  arch.bins = 4;
  arch.tail_override = {5.0};
  Flow f = build_flow(DomainTopology(2), arch, {}, 4);
  auto p0 = f.parameters();
  Rng rng(44);
  for (auto& v : p0) v = 0.2 * rng.normal();
  f.set_parameters(p0);
  auto batch = iota_batch(48);

  std::vector<double> grad(f.param_count(), 0.0);
  renyi_loss(f, mu, u0, u1, 1.5, true, batch, 1.0, grad);
  const double h = 1e-5;
  double worst = 0.0;
  for (int i = 0; i < f.param_count(); ++i) {
    auto p = p0;
    std::vector<double> dump;
    p[i] += h;
    f.set_parameters(p);
    double fp = renyi_loss(f, mu, u0, u1, 1.5, true, batch, 0.0, dump).value;
    p[i] = p0[i] - h;
    f.set_parameters(p);
    double fm = renyi_loss(f, mu, u0, u1, 1.5, true, batch, 0.0, dump).value;
    double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::fabs(grad[i] - fd) /
                                (1.0 + std::max(std::fabs(grad[i]),
                                                std::fabs(fd))));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("affine optimum: learned (scale, shift) reach (sigma, m) for all "
          "theta") {
  double m = 2.0, sigma = 0.5;
  auto u0 = gaussian_potential(0.0, 1.0);
  auto u1 = gaussian_potential(m, sigma);
  Ensemble mu0 = draw_gaussian(20000, 1, 0.0, 1.0, 100);
  Ensemble mu1 = draw_gaussian(20000, 1, m, sigma, 101);

  for (double theta : {0.0, 0.5, 1.0}) {
    CAPTURE(theta);
    JeffreysConfig cfg;
    cfg.theta = theta;
    cfg.arch.kind = "affine";
    cfg.epochs = 120;
    cfg.batch = 1024;
    cfg.lr = 5e-3;
    auto res = train_flow(mu0, mu1, u0, u1, cfg, 77);
    auto p = res.flow.parameters();
    REQUIRE(p.size() == 2);
    CHECK(std::exp(p[0]) == doctest::Approx(sigma).epsilon(0.02));
    CHECK(p[1] == doctest::Approx(m).epsilon(0.02));

    // pushforward moments within 2% of the target
    Rng rng(5);
    double acc = 0.0, acc2 = 0.0;
    int n = 20000;
    std::vector<double> x(1), y(1);
    for (int i = 0; i < n; ++i) {
      x[0] = rng.normal();
      res.flow.forward(x, y);
      acc += y[0];
      acc2 += y[0] * y[0];
    }
    double mean = acc / n;
    double sd = std::sqrt(acc2 / n - mean * mean);
    CHECK(mean == doctest::Approx(m).epsilon(0.02));
    CHECK(sd == doctest::Approx(sigma).epsilon(0.02));
  }
}

TEST_CASE("fixed point: matched base and target stays near the identity") {
  auto u = make_benchmark("GAUSSIAN", 0, 1);
  Ensemble mu0 = draw_gaussian(4000, 1, 0.0, 1.0, 55);
  Ensemble mu1 = draw_gaussian(4000, 1, 0.0, 1.0, 56);
  JeffreysConfig cfg;
  cfg.epochs = 10;
  cfg.batch = 512;
  cfg.arch.layers = 2;
  cfg.arch.bins = 6;
  cfg.arch.hidden = {16};
  auto res = train_flow(mu0, mu1, u, u, cfg, 6);
  Ensemble out = importance_weights(res.flow, mu0, u, u);
  CHECK(ess(out) > 0.99);
}

TEST_CASE("training is deterministic: identical seeds give identical "
          "checkpoints") {
  auto u0 = make_benchmark("GAUSSIAN", 0, 2);
  auto u1 = make_benchmark("TW");
  Ensemble mu0 = draw_gaussian(2048, 2, 0.0, 1.0, 1);
  Ensemble mu1 = draw_gaussian(2048, 2, 1.0, 1.2, 2);
  JeffreysConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 512;
  cfg.arch.layers = 2;
  cfg.arch.hidden = {16};
  cfg.arch.bins = 4;

  auto a = train_flow(mu0, mu1, u0, u1, cfg, 42);
  auto b = train_flow(mu0, mu1, u0, u1, cfg, 42);
  auto pa = a.flow.parameters(), pb = b.flow.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);

  auto dir = std::filesystem::temp_directory_path();
  save_flow(a.flow, (dir / "jf_det_a.ckpt").string());
  save_flow(b.flow, (dir / "jf_det_b.ckpt").string());
  std::ifstream fa(dir / "jf_det_a.ckpt", std::ios::binary);
  std::ifstream fb(dir / "jf_det_b.ckpt", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)),
                 std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)),
                 std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  std::filesystem::remove(dir / "jf_det_a.ckpt");
  std::filesystem::remove(dir / "jf_det_b.ckpt");
}

TEST_CASE("divergent training raises a numerical failure") {
  auto u0 = make_benchmark("GAUSSIAN", 0, 1);
  Potential broken(
      "nan", DomainTopology(1),
      [](std::span<const double>) {
        return std::numeric_limits<double>::quiet_NaN();
      },
      [](std::span<const double>, std::span<double> g) { g[0] = 0.0; });
  Ensemble mu0 = draw_gaussian(256, 1, 0.0, 1.0, 3);
  Ensemble mu1 = draw_gaussian(256, 1, 0.0, 1.0, 4);
  JeffreysConfig cfg;
  cfg.epochs = 5;
  cfg.batch = 128;
  cfg.arch.layers = 2;
  cfg.arch.bins = 4;
  CHECK_THROWS_AS((void)train_flow(mu0, mu1, u0, broken, cfg, 9),
                  NumericalError);
}
