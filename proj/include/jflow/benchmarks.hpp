#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "jflow/potential.hpp"

namespace jflow {

namespace detail {

// -log sum_k w_k exp(-q_k/2) with q_k = (x-mu_k)^T Sigma_k^{-1} (x-mu_k).
// Components are unnormalized Gaussians, matching the benchmark definitions.
struct GaussianMixture {
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> precisions;
  std::vector<double> log_weights;

  double energy(std::span<const double> x) const {
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), x.size());
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(means.size());
    for (std::size_t k = 0; k < means.size(); ++k) {
      Eigen::VectorXd d = xv - means[k];
      terms[k] = log_weights[k] - 0.5 * d.dot(precisions[k] * d);
      m = std::max(m, terms[k]);
    }
    double s = 0.0;
    for (double t : terms) s += std::exp(t - m);
    return -(m + std::log(s));
  }

  void gradient(std::span<const double> x, std::span<double> g) const {
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), x.size());
    std::vector<double> terms(means.size());
    std::vector<Eigen::VectorXd> pd(means.size());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < means.size(); ++k) {
      Eigen::VectorXd d = xv - means[k];
      pd[k] = precisions[k] * d;
      terms[k] = log_weights[k] - 0.5 * d.dot(pd[k]);
      m = std::max(m, terms[k]);
    }
    double z = 0.0;
    for (double t : terms) z += std::exp(t - m);
    Eigen::VectorXd gv = Eigen::VectorXd::Zero(xv.size());
    for (std::size_t k = 0; k < means.size(); ++k)
      gv += (std::exp(terms[k] - m) / z) * pd[k];
    for (int i = 0; i < gv.size(); ++i) g[i] = gv[i];
  }

  Potential potential(std::string label, DomainTopology topo) const {
    auto self = std::make_shared<GaussianMixture>(*this);
    return Potential(
        std::move(label), std::move(topo),
        [self](std::span<const double> x) { return self->energy(x); },
        [self](std::span<const double> x, std::span<double> g) {
          self->gradient(x, g);
        });
  }
};

inline Eigen::Matrix2d rotated_cov(double angle_deg, double v1, double v2) {
  double a = angle_deg * kPi / 180.0;
  Eigen::Matrix2d r;
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  Eigen::Matrix2d d = Eigen::Vector2d(v1, v2).asDiagonal();
  return r * d * r.transpose();
}

// sgn(s)|s|^p and its (continuous) derivative p|s|^{p-1}, p > 1
inline double signed_pow(double s, double p) {
  return s >= 0.0 ? std::pow(s, p) : -std::pow(-s, p);
}
inline double signed_pow_deriv(double s, double p) {
  return p * std::pow(std::fabs(s), p - 1.0);
}

// Random orthogonal matrix from a seeded standard-normal matrix via QR,
// with the sign convention fixed by a positive R diagonal.
inline Eigen::MatrixXd seeded_orthogonal(int n, std::uint64_t seed) {
  Rng rng(seed_fanout(seed, "orthogonal-Q"));
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Named benchmark landscapes
// ---------------------------------------------------------------------------

inline Potential make_benchmark(const std::string& name,
                                std::uint64_t seed = 0, int dim = 0) {
  if (name == "TW") {
    return Potential(
        "TW", DomainTopology(2),
        [](std::span<const double> x) {
          return 3.0 * (x[0] - 1.0) * (x[0] - 1.0) +
                 3.0 * (x[1] - 1.0) * (x[1] - 1.0) +
                 3.0 * std::sin(x[0] + 2.0 * x[1]);
        },
        [](std::span<const double> x, std::span<double> g) {
          double c = std::cos(x[0] + 2.0 * x[1]);
          g[0] = 6.0 * (x[0] - 1.0) + 3.0 * c;
          g[1] = 6.0 * (x[1] - 1.0) + 6.0 * c;
        });
  }
  if (name == "HB") {
    return Potential(
        "HB", DomainTopology(2),
        [](std::span<const double> x) {
          double a = x[0] * x[0] + x[1] - 11.0;
          double b = x[0] + x[1] * x[1] - 7.0;
          return 0.2 * (a * a + b * b);
        },
        [](std::span<const double> x, std::span<double> g) {
          double a = x[0] * x[0] + x[1] - 11.0;
          double b = x[0] + x[1] * x[1] - 7.0;
          g[0] = 0.2 * (4.0 * a * x[0] + 2.0 * b);
          g[1] = 0.2 * (2.0 * a + 4.0 * b * x[1]);
        });
  }
  if (name == "AN") {
    // 10 * (r^6 - 8 r^4 + 16 r^2 + 1)^(1/3); the argument is u(u-4)^2 + 1 >= 1
    return Potential(
        "AN", DomainTopology(2),
        [](std::span<const double> x) {
          double u = x[0] * x[0] + x[1] * x[1];
          double gval = ((u - 8.0) * u + 16.0) * u + 1.0;
          return 10.0 * std::cbrt(gval);
        },
        [](std::span<const double> x, std::span<double> g) {
          double u = x[0] * x[0] + x[1] * x[1];
          double gval = ((u - 8.0) * u + 16.0) * u + 1.0;
          double dgdu = (3.0 * u - 16.0) * u + 16.0;
          double cbrtg = std::cbrt(gval);
          double dudr = (10.0 / 3.0) / (cbrtg * cbrtg) * dgdu;
          g[0] = dudr * 2.0 * x[0];
          g[1] = dudr * 2.0 * x[1];
        });
  }
  if (name == "MW") {
    return Potential(
        "MW", DomainTopology(2),
        [](std::span<const double> x) {
          return 0.25 * x[0] * x[0] + 0.25 * x[1] * x[1] +
                 4.0 * std::sin(1.1 * x[0]) * std::sin(x[1]);
        },
        [](std::span<const double> x, std::span<double> g) {
          g[0] = 0.5 * x[0] + 4.4 * std::cos(1.1 * x[0]) * std::sin(x[1]);
          g[1] = 0.5 * x[1] + 4.0 * std::sin(1.1 * x[0]) * std::cos(x[1]);
        });
  }
  if (name == "PW") {
    // 4 sin(2 x1) * sgn(sin(2 x2)) |sin(2 x2)|^1.4 on the torus
    return Potential(
        "PW", DomainTopology(2, {0, 1}),
        [](std::span<const double> x) {
          return 4.0 * std::sin(2.0 * x[0]) *
                 detail::signed_pow(std::sin(2.0 * x[1]), 1.4);
        },
        [](std::span<const double> x, std::span<double> g) {
          double s2 = std::sin(2.0 * x[1]);
          g[0] = 8.0 * std::cos(2.0 * x[0]) * detail::signed_pow(s2, 1.4);
          g[1] = 8.0 * std::sin(2.0 * x[0]) *
                 detail::signed_pow_deriv(s2, 1.4) * std::cos(2.0 * x[1]);
        });
  }
  if (name == "GMM2D") {
    detail::GaussianMixture mix;
    double w[4] = {0.25, 0.30, 0.15, 0.30};
    double mx[4] = {3.0, -3.0, -3.0, 3.0};
    double my[4] = {3.0, 3.0, -3.0, -3.0};
    double ang[4] = {0.0, 45.0, 90.0, 135.0};
    for (int k = 0; k < 4; ++k) {
      mix.means.push_back(Eigen::Vector2d(mx[k], my[k]));
      mix.precisions.push_back(
          detail::rotated_cov(ang[k], 1.0, 0.3).inverse());
      mix.log_weights.push_back(std::log(w[k]));
    }
    return mix.potential("GMM2D", DomainTopology(2));
  }
  if (name == "GMM3D") {
    detail::GaussianMixture mix;
    double axes[3][3] = {{1.0, 0.5, 0.25}, {0.25, 1.0, 0.5}, {0.5, 0.25, 1.0}};
    for (int axis = 0; axis < 3; ++axis) {
      for (int sign = -1; sign <= 1; sign += 2) {
        Eigen::Vector3d mu = Eigen::Vector3d::Zero();
        mu(axis) = 6.0 * sign;
        Eigen::Matrix3d cov =
            Eigen::Vector3d(axes[axis][0], axes[axis][1], axes[axis][2])
                .asDiagonal();
        mix.means.push_back(mu);
        mix.precisions.push_back(cov.inverse());
        mix.log_weights.push_back(std::log(1.0 / 6.0));
      }
    }
    return mix.potential("GMM3D", DomainTopology(3));
  }
  if (name == "ROSENBROCK4D") {
    return Potential(
        "ROSENBROCK4D", DomainTopology(4),
        [](std::span<const double> x) {
          double u = 0.0;
          for (int i = 0; i < 3; ++i) {
            double a = x[i + 1] - x[i] * x[i];
            double b = 1.0 - x[i];
            u += 100.0 * a * a + b * b;
          }
          return 6.0 * u;
        },
        [](std::span<const double> x, std::span<double> g) {
          for (int i = 0; i < 4; ++i) g[i] = 0.0;
          for (int i = 0; i < 3; ++i) {
            double a = x[i + 1] - x[i] * x[i];
            g[i] += 6.0 * (-400.0 * a * x[i] - 2.0 * (1.0 - x[i]));
            g[i + 1] += 6.0 * 200.0 * a;
          }
        });
  }
  if (name == "RASTRIGIN8D") {
    // z = x + delta * tanh(xQ) elementwise, U = sum 0.5 z^2 + 12 cos(2 z)
    auto q = std::make_shared<Eigen::MatrixXd>(detail::seeded_orthogonal(8, seed));
    const double delta = 0.75;
    return Potential(
        "RASTRIGIN8D", DomainTopology(8),
        [q, delta](std::span<const double> x) {
          Eigen::Map<const Eigen::RowVectorXd> xv(x.data(), 8);
          Eigen::RowVectorXd xq = xv * (*q);
          double u = 0.0;
          for (int i = 0; i < 8; ++i) {
            double z = xv(i) + delta * std::tanh(xq(i));
            u += 0.5 * z * z + 12.0 * std::cos(2.0 * z);
          }
          return u;
        },
        [q, delta](std::span<const double> x, std::span<double> g) {
          Eigen::Map<const Eigen::RowVectorXd> xv(x.data(), 8);
          Eigen::RowVectorXd xq = xv * (*q);
          Eigen::VectorXd dz(8);
          Eigen::VectorXd sech2(8);
          for (int i = 0; i < 8; ++i) {
            double t = std::tanh(xq(i));
            double z = xv(i) + delta * t;
            dz(i) = z - 24.0 * std::sin(2.0 * z);
            sech2(i) = 1.0 - t * t;
          }
          for (int j = 0; j < 8; ++j) {
            double s = dz(j);
            for (int i = 0; i < 8; ++i)
              s += delta * sech2(i) * (*q)(j, i) * dz(i);
            g[j] = s;
          }
        });
  }
  if (name == "SOLVATED16D") {
    const double barrier = 2.0;   // A
    const double stiff = 30.0;    // kappa
    auto alpha = std::make_shared<std::vector<double>>();
    for (int k = 0; k < 14; ++k)
      alpha->push_back(2.0 + 2.0 * k / 13.0);
    return Potential(
        "SOLVATED16D", DomainTopology(16, {0, 1}),
        [alpha, barrier, stiff](std::span<const double> x) {
          double u = barrier * (std::cos(4.0 * x[0]) + std::cos(4.0 * x[1]));
          double s = std::sin(x[0]) * std::sin(x[1]);
          for (int k = 0; k < 14; ++k) {
            double d = x[k + 2] - (*alpha)[k] * s;
            u += 0.5 * stiff * d * d;
          }
          return u;
        },
        [alpha, barrier, stiff](std::span<const double> x,
                                std::span<double> g) {
          double s0 = std::sin(x[0]), s1 = std::sin(x[1]);
          double c0 = std::cos(x[0]), c1 = std::cos(x[1]);
          double s = s0 * s1;
          g[0] = -4.0 * barrier * std::sin(4.0 * x[0]);
          g[1] = -4.0 * barrier * std::sin(4.0 * x[1]);
          for (int k = 0; k < 14; ++k) {
            double a = (*alpha)[k];
            double d = x[k + 2] - a * s;
            g[k + 2] = stiff * d;
            g[0] -= stiff * d * a * c0 * s1;
            g[1] -= stiff * d * a * s0 * c1;
          }
        });
  }
  if (name == "DOUBLEWELL1D") {
    // 20 (x-1)^2 (x+0.9) (x+1.1)
    return Potential(
        "DOUBLEWELL1D", DomainTopology(1),
        [](std::span<const double> x) {
          double a = x[0] - 1.0;
          return 20.0 * a * a * (x[0] + 0.9) * (x[0] + 1.1);
        },
        [](std::span<const double> x, std::span<double> g) {
          double a = x[0] - 1.0;
          g[0] = 20.0 * (2.0 * a * (x[0] + 0.9) * (x[0] + 1.1) +
                         a * a * (x[0] + 1.1) + a * a * (x[0] + 0.9));
        });
  }
  if (name == "GAUSSIAN") {
    int d = dim > 0 ? dim : 1;
    return Potential(
        "GAUSSIAN" + std::to_string(d), DomainTopology(d),
        [](std::span<const double> x) {
          double u = 0.0;
          for (double v : x) u += 0.5 * v * v;
          return u;
        },
        [](std::span<const double> x, std::span<double> g) {
          for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i];
        });
  }
  if (name == "UNIFORM") {
    int d = dim > 0 ? dim : 1;
    return Potential(
        "UNIFORM" + std::to_string(d), DomainTopology::all_circular(d),
        [](std::span<const double>) { return 0.0; },
        [](std::span<const double> x, std::span<double> g) {
          for (std::size_t i = 0; i < x.size(); ++i) g[i] = 0.0;
        });
  }
  throw ConfigError("unknown benchmark name: " + name);
}

// Base landscape matching an arbitrary topology: standard Gaussian on
// unbounded coordinates, flat on circular ones.
inline Potential natural_base(const DomainTopology& topo) {
  auto circ = std::make_shared<std::vector<std::uint8_t>>();
  for (int i = 0; i < topo.dim(); ++i)
    circ->push_back(topo.is_circular(i) ? 1 : 0);
  return Potential(
      "BASE", topo,
      [circ](std::span<const double> x) {
        double u = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
          if (!(*circ)[i]) u += 0.5 * x[i] * x[i];
        return u;
      },
      [circ](std::span<const double> x, std::span<double> g) {
        for (std::size_t i = 0; i < x.size(); ++i)
          g[i] = (*circ)[i] ? 0.0 : x[i];
      });
}

// Exact sampler paired with a base potential; the distillation entry point.
struct BaseDistribution {
  Potential potential;
  std::function<void(Rng&, std::span<double>)> draw;
};

inline BaseDistribution make_natural_base(const DomainTopology& topo) {
  BaseDistribution base;
  base.potential = natural_base(topo);
  auto circ = std::make_shared<std::vector<std::uint8_t>>();
  for (int i = 0; i < topo.dim(); ++i)
    circ->push_back(topo.is_circular(i) ? 1 : 0);
  base.draw = [circ](Rng& rng, std::span<double> x) {
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = (*circ)[i] ? rng.uniform(-kPi, kPi) : rng.normal();
  };
  return base;
}

// Noise specification for finite-sum construction: each term adds
// amp * cos(x_coord) with a sign drawn uniformly from {-1,+1} per batch index.
struct CosineNoiseSpec {
  std::vector<std::pair<int, double>> terms;  // (coordinate, amplitude)
};

// Expands every component by all sign combinations of the cosine noise terms,
// so the full-sum mean is exactly the clean potential while a mini-batch of
// size 1 sees one independent sign draw per term.
inline FiniteSumPotential make_finite_sum(std::vector<Potential> components,
                                          const CosineNoiseSpec& noise) {
  if (components.empty()) throw ConfigError("finite sum: empty component list");
  if (noise.terms.empty()) return FiniteSumPotential(std::move(components));
  if (noise.terms.size() > 4)
    throw ConfigError("finite sum: too many noise terms");
  int combos = 1 << noise.terms.size();
  std::vector<Potential> expanded;
  for (const auto& comp : components) {
    for (int c = 0; c < combos; ++c) {
      std::vector<std::pair<int, double>> signed_terms;
      for (std::size_t t = 0; t < noise.terms.size(); ++t) {
        double sign = (c >> t) & 1 ? 1.0 : -1.0;
        signed_terms.emplace_back(noise.terms[t].first,
                                  sign * noise.terms[t].second);
      }
      auto terms = std::make_shared<decltype(signed_terms)>(signed_terms);
      expanded.emplace_back(
          comp.label() + "+noise" + std::to_string(c), comp.topology(),
          [comp, terms](std::span<const double> x) {
            double u = comp.energy(x);
            for (auto& [i, a] : *terms) u += a * std::cos(x[i]);
            return u;
          },
          [comp, terms](std::span<const double> x, std::span<double> g) {
            comp.gradient(x, g);
            for (auto& [i, a] : *terms) g[i] -= a * std::sin(x[i]);
          });
    }
  }
  return FiniteSumPotential(std::move(expanded));
}

}  // namespace jflow
