#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <filesystem>

#include "jflow/flow_model.hpp"

using namespace jflow;

namespace {

void randomize_params(Flow& f, Rng& rng, double scale = 0.4) {
  auto p = f.parameters();
  for (auto& v : p) v = scale * rng.normal();
  f.set_parameters(p);
}

std::vector<double> random_input(const DomainTopology& topo, Rng& rng,
                                 double scale = 1.0) {
  std::vector<double> x(topo.dim());
  for (int i = 0; i < topo.dim(); ++i)
    x[i] = topo.is_circular(i) ? rng.uniform(-kPi, kPi) : scale * rng.normal();
  return x;
}

double roundtrip_error(const Flow& f, std::span<const double> x) {
  std::vector<double> y(x.size()), back(x.size());
  double ld_f = f.forward(x, y);
  double ld_i = f.inverse(y, back);
  double err = std::fabs(ld_f + ld_i);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = f.topology().is_circular(static_cast<int>(i))
                   ? wrap_angle(back[i] - x[i])
                   : back[i] - x[i];
    err = std::max(err, std::fabs(d));
  }
  return err;
}

// scalar head L = c . y + c_ld * logdet for gradient checking
double forward_head(Flow& f, std::span<const double> x,
                    std::span<const double> cy, double cld) {
  std::vector<double> y(x.size());
  double ld = f.forward(x, y);
  return dot(cy, y) + cld * ld;
}

double inverse_head(Flow& f, std::span<const double> y,
                    std::span<const double> cx, double cld) {
  std::vector<double> x(y.size());
  double ld = f.inverse(y, x);
  return dot(cx, x) + cld * ld;
}

void check_param_gradients(Flow& f, Rng& rng, bool inverse_pass) {
  auto x = random_input(f.topology(), rng, 0.8);
  std::vector<double> cot(f.dim());
  for (auto& c : cot) c = rng.normal();
  double cld = rng.normal();

  std::vector<double> grad(f.param_count(), 0.0), dx(f.dim(), 0.0);
  if (inverse_pass)
    f.backprop_inverse(x, cot, cld, dx, grad);
  else
    f.backprop_forward(x, cot, cld, dx, grad);

  auto p0 = f.parameters();
  const double h = 1e-5;
  double worst = 0.0;
  for (int i = 0; i < f.param_count(); ++i) {
    auto p = p0;
    p[i] = p0[i] + h;
    f.set_parameters(p);
    double fp = inverse_pass ? inverse_head(f, x, cot, cld)
                             : forward_head(f, x, cot, cld);
    p[i] = p0[i] - h;
    f.set_parameters(p);
    double fm = inverse_pass ? inverse_head(f, x, cot, cld)
                             : forward_head(f, x, cot, cld);
    double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::fabs(grad[i] - fd) /
                                (1.0 + std::max(std::fabs(grad[i]),
                                                std::fabs(fd))));
  }
  f.set_parameters(p0);
  CHECK(worst < 1e-4);

  // input cotangent check
  auto fd_in = finite_difference_gradient(
      [&](std::span<const double> xx) {
        return inverse_pass ? inverse_head(f, xx, cot, cld)
                            : forward_head(f, xx, cot, cld);
      },
      x);
  for (int i = 0; i < f.dim(); ++i)
    CHECK(std::fabs(dx[i] - fd_in[i]) /
              (1.0 + std::max(std::fabs(dx[i]), std::fabs(fd_in[i]))) <
          1e-4);
}

Flow small_rq_flow(std::uint64_t seed) {
  DomainTopology topo(2);
  return rq_spline_coupling(topo, {1, 0}, {8}, 4, 3.0, seed);
}

Flow small_affine_flow(std::uint64_t seed) {
  DomainTopology topo(2);
  return affine_coupling(topo, {0, 1}, {6}, seed);
}

Flow small_circular_flow(std::uint64_t seed) {
  auto topo = DomainTopology::all_circular(2);
  return circular_spline_coupling(topo, {1, 0}, {8}, 4, seed);
}

Flow small_mixed_flow(std::uint64_t seed) {
  DomainTopology topo(3, {0});
  FlowArch arch;
  arch.layers = 2;
  arch.hidden = {8};
  arch.bins = 4;
  arch.tail_override = {3.0};
  arch.permute = false;  // keep the identity-at-init property testable
  return build_flow(topo, arch, {}, seed);
}

Flow small_1d_flow(std::uint64_t seed) {
  DomainTopology topo(1);
  FlowArch arch;
  arch.layers = 2;
  arch.bins = 5;
  arch.tail_override = {3.0};
  return build_flow(topo, arch, {}, seed);
}

}  // namespace

TEST_CASE("identity at init: zero conditioner output gives the exact identity") {
  Rng rng(12);
  for (auto builder : {small_rq_flow, small_affine_flow, small_circular_flow,
                       small_mixed_flow, small_1d_flow}) {
    Flow f = builder(5);
    for (int t = 0; t < 50; ++t) {
      auto x = random_input(f.topology(), rng, 1.2);
      std::vector<double> y(f.dim());
      double ld = f.forward(x, y);
      CHECK(ld == 0.0);
      for (int i = 0; i < f.dim(); ++i) CHECK(y[i] == x[i]);
    }
  }
}

TEST_CASE("affine coupling with constant conditioner: y = 2x + 3") {
  DomainTopology topo(2);
  Flow f = affine_coupling(topo, {0, 1}, {}, 0);  // linear conditioner
  // zero weights, bias (s, t) = (log 2, 3)
  auto p = f.parameters();
  std::fill(p.begin(), p.end(), 0.0);
  p[p.size() - 2] = std::log(2.0);
  p[p.size() - 1] = 3.0;
  f.set_parameters(p);
  std::vector<double> x{0.7, -1.1}, y(2);
  double ld = f.forward(x, y);
  CHECK(y[0] == doctest::Approx(0.7));
  CHECK(y[1] == doctest::Approx(2.0 * -1.1 + 3.0));
  CHECK(ld == doctest::Approx(std::log(2.0)));

  // d(logdet)/ds = 1 for the transformed coordinate
  std::vector<double> grad(f.param_count(), 0.0), dx(2, 0.0), cot{0.0, 0.0};
  f.backprop_forward(x, cot, 1.0, dx, grad);
  CHECK(grad[grad.size() - 2] == doctest::Approx(1.0));
  CHECK(grad[grad.size() - 1] == doctest::Approx(0.0));
}

TEST_CASE("round trips below 1e-8 on 1000 random points") {
  Rng rng(77);
  for (auto builder : {small_rq_flow, small_affine_flow, small_circular_flow,
                       small_mixed_flow, small_1d_flow}) {
    Flow f = builder(31);
    randomize_params(f, rng);
    double worst = 0.0;
    for (int t = 0; t < 200; ++t)
      worst = std::max(worst, roundtrip_error(f, random_input(f.topology(),
                                                              rng, 1.5)));
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("log-Jacobian matches finite-difference Jacobian determinant") {
  Rng rng(5);
  for (auto builder : {small_rq_flow, small_circular_flow, small_mixed_flow}) {
    Flow f = builder(17);
    randomize_params(f, rng);
    for (int t = 0; t < 10; ++t) {
      auto x = random_input(f.topology(), rng, 0.8);
      int d = f.dim();
      Eigen::MatrixXd jac(d, d);
      const double h = 1e-6;
      std::vector<double> yp(d), ym(d);
      for (int j = 0; j < d; ++j) {
        auto xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        f.forward(xp, yp);
        f.forward(xm, ym);
        for (int i = 0; i < d; ++i) {
          double dy = f.topology().is_circular(i) ? wrap_angle(yp[i] - ym[i])
                                                  : yp[i] - ym[i];
          jac(i, j) = dy / (2.0 * h);
        }
      }
      std::vector<double> y(d);
      double ld = f.forward(x, y);
      CHECK(std::fabs(ld - std::log(std::fabs(jac.determinant()))) < 1e-5);
    }
  }
}

TEST_CASE("parameter and input gradients match finite differences") {
  Rng rng(2024);
  for (auto builder : {small_rq_flow, small_affine_flow, small_circular_flow,
                       small_mixed_flow, small_1d_flow}) {
    Flow f = builder(3);
    randomize_params(f, rng);
    check_param_gradients(f, rng, /*inverse_pass=*/false);
    check_param_gradients(f, rng, /*inverse_pass=*/true);
  }
}

TEST_CASE("spline monotonicity over 1000 seeded parameter draws") {
  DomainTopology topo(1);
  FlowArch arch;
  arch.layers = 1;
  arch.bins = 6;
  arch.tail_override = {3.0};
  Flow f = build_flow(topo, arch, {}, 0);
  Rng rng(999);
  for (int draw = 0; draw < 1000; ++draw) {
    randomize_params(f, rng, 0.8);
    double prev = -std::numeric_limits<double>::infinity();
    for (int g = 0; g <= 64; ++g) {
      std::vector<double> x{-3.5 + 7.0 * g / 64.0}, y(1);
      f.forward(x, y);
      CHECK(y[0] > prev);
      prev = y[0];
    }
  }
}

TEST_CASE("circular spline: wrapped range and degree-one circle map") {
  Flow f = small_circular_flow(8);
  Rng rng(4);
  randomize_params(f, rng, 0.7);
  // range contract
  for (int t = 0; t < 200; ++t) {
    auto x = random_input(f.topology(), rng);
    std::vector<double> y(2);
    f.forward(x, y);
    for (double v : y) {
      CHECK(v >= -kPi);
      CHECK(v < kPi);
    }
  }
  // integral of dy/dx over one period = 2*pi (trapezoid on the derivative of
  // the transformed coordinate, passthrough frozen)
  int n = 4096;
  double acc = 0.0;
  std::vector<double> y(2);
  for (int g = 0; g < n; ++g) {
    double a = -kPi + kTwoPi * g / n;
    std::vector<double> xa{0.3, a};
    double ld = 0.0;
    // transformed coordinate is index 0 in this mask; integrate over it
    std::vector<double> xb{a, 0.3};
    ld = f.forward(xb, y);
    acc += std::exp(ld) * (kTwoPi / n);
  }
  CHECK(acc == doctest::Approx(kTwoPi).epsilon(1e-6));
}

TEST_CASE("composition sums log-Jacobians and empty flow is the identity") {
  DomainTopology topo(2);
  Flow empty(topo);
  std::vector<double> x{0.4, -0.2}, y(2);
  CHECK(empty.forward(x, y) == 0.0);
  CHECK(y[0] == x[0]);
  CHECK(y[1] == x[1]);

  Rng rng(66);
  Flow a = small_rq_flow(1);
  Flow b = small_affine_flow(2);
  randomize_params(a, rng);
  randomize_params(b, rng);
  Flow both = compose({a, b});
  for (int t = 0; t < 20; ++t) {
    auto x0 = random_input(topo, rng);
    std::vector<double> mid(2), out(2), out2(2);
    double ld_a = a.forward(x0, mid);
    double ld_b = b.forward(mid, out);
    double ld = both.forward(x0, out2);
    CHECK(ld == doctest::Approx(ld_a + ld_b).epsilon(1e-12));
    CHECK(out[0] == doctest::Approx(out2[0]).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(out2[1]).epsilon(1e-12));
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(88);
  Flow f = small_mixed_flow(9);
  randomize_params(f, rng);
  auto path = std::filesystem::temp_directory_path() / "jf_test_flow.ckpt";
  save_flow(f, path.string());
  Flow g = load_flow(path.string());
  auto pf = f.parameters(), pg = g.parameters();
  REQUIRE(pf.size() == pg.size());
  for (std::size_t i = 0; i < pf.size(); ++i) CHECK(pf[i] == pg[i]);
  // identical behavior
  for (int t = 0; t < 20; ++t) {
    auto x = random_input(f.topology(), rng);
    std::vector<double> y1(f.dim()), y2(f.dim());
    double l1 = f.forward(x, y1);
    double l2 = g.forward(x, y2);
    CHECK(l1 == l2);
    for (int i = 0; i < f.dim(); ++i) CHECK(y1[i] == y2[i]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("subspace lift: identity on trailing block") {
  Rng rng(31);
  Flow inner = small_rq_flow(7);
  randomize_params(inner, rng);
  Flow lifted(DomainTopology(5));
  lifted.add_layer(std::make_unique<SubspaceLayer>(inner, 5));
  auto x = random_input(lifted.topology(), rng);
  std::vector<double> y(5), xin(2), yin(2);
  double ld = lifted.forward(x, y);
  xin = {x[0], x[1]};
  double ld_in = inner.forward(xin, yin);
  CHECK(ld == ld_in);
  CHECK(y[0] == yin[0]);
  CHECK(y[1] == yin[1]);
  for (int i = 2; i < 5; ++i) CHECK(y[i] == x[i]);
}
