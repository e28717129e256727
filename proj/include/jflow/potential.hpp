#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jflow/common.hpp"
#include "jflow/topology.hpp"

namespace jflow {

// Energy landscape in k_BT units: U and its analytic gradient, plus the
// domain topology. Immutable after construction; cheap to copy and safe to
// evaluate concurrently.
class Potential {
 public:
  using EnergyFn = std::function<double(std::span<const double>)>;
  using GradientFn =
      std::function<void(std::span<const double>, std::span<double>)>;

  Potential() = default;

  Potential(std::string label, DomainTopology topology, EnergyFn energy,
            GradientFn gradient)
      : label_(std::move(label)),
        topology_(std::move(topology)),
        energy_(std::move(energy)),
        gradient_(std::move(gradient)) {}

  int dim() const { return topology_.dim(); }
  const DomainTopology& topology() const { return topology_; }
  const std::string& label() const { return label_; }
  bool valid() const { return static_cast<bool>(energy_); }

  double energy(std::span<const double> x) const { return energy_(x); }

  void gradient(std::span<const double> x, std::span<double> g) const {
    gradient_(x, g);
  }

  std::vector<double> gradient(std::span<const double> x) const {
    std::vector<double> g(dim());
    gradient_(x, g);
    return g;
  }

 private:
  std::string label_;
  DomainTopology topology_;
  EnergyFn energy_;
  GradientFn gradient_;
};

// U_lambda = lambda * UM + (1 - lambda) * U0, affine in lambda at fixed x.
inline Potential interpolate(const Potential& u0, const Potential& um,
                             double lambda) {
  if (u0.dim() != um.dim())
    throw ConfigError("interpolate: dimension mismatch");
  if (!(u0.topology() == um.topology()))
    throw ConfigError("interpolate: topology mismatch");
  if (lambda < 0.0 || lambda > 1.0)
    throw ConfigError("interpolate: lambda outside [0,1]");
  if (lambda == 0.0) return u0;
  if (lambda == 1.0) return um;
  int d = u0.dim();
  std::string label =
      u0.label() + "~" + um.label() + "@" + std::to_string(lambda);
  return Potential(
      label, u0.topology(),
      [u0, um, lambda](std::span<const double> x) {
        return lambda * um.energy(x) + (1.0 - lambda) * u0.energy(x);
      },
      [u0, um, lambda, d](std::span<const double> x, std::span<double> g) {
        um.gradient(x, g);
        std::vector<double> g0(d);
        u0.gradient(x, g0);
        for (int i = 0; i < d; ++i)
          g[i] = lambda * g[i] + (1.0 - lambda) * g0[i];
      });
}

// Finite-sum potential U(x) = (1/L) sum_i V_i(x) with a mini-batch view.
// Batches are passed explicitly; there is no hidden state.
class FiniteSumPotential {
 public:
  explicit FiniteSumPotential(std::vector<Potential> components)
      : components_(std::make_shared<std::vector<Potential>>(
            std::move(components))) {
    if (components_->empty())
      throw ConfigError("finite sum: empty component list");
    const auto& first = components_->front();
    for (const auto& c : *components_) {
      if (c.dim() != first.dim() || !(c.topology() == first.topology()))
        throw ConfigError("finite sum: component dimension/topology mismatch");
    }
  }

  int dim() const { return components_->front().dim(); }
  const DomainTopology& topology() const {
    return components_->front().topology();
  }
  std::size_t size() const { return components_->size(); }

  double batch_energy(std::span<const double> x,
                      std::span<const std::size_t> batch) const {
    double s = 0.0;
    for (auto i : batch) s += (*components_)[i].energy(x);
    return s / static_cast<double>(batch.size());
  }

  void batch_gradient(std::span<const double> x,
                      std::span<const std::size_t> batch,
                      std::span<double> g) const {
    std::fill(g.begin(), g.end(), 0.0);
    std::vector<double> gi(dim());
    for (auto i : batch) {
      (*components_)[i].gradient(x, gi);
      for (int k = 0; k < dim(); ++k) g[k] += gi[k];
    }
    double inv = 1.0 / static_cast<double>(batch.size());
    for (int k = 0; k < dim(); ++k) g[k] *= inv;
  }

  std::vector<std::size_t> draw_batch(std::size_t batch_size, Rng& rng) const {
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = rng.below(size());
    return idx;
  }

  // Full-sum potential as a plain Potential (mean of all components).
  Potential full(const std::string& label = "finite_sum") const {
    auto comps = components_;
    int d = dim();
    return Potential(
        label, topology(),
        [comps](std::span<const double> x) {
          double s = 0.0;
          for (const auto& c : *comps) s += c.energy(x);
          return s / static_cast<double>(comps->size());
        },
        [comps, d](std::span<const double> x, std::span<double> g) {
          std::fill(g.begin(), g.end(), 0.0);
          std::vector<double> gi(d);
          for (const auto& c : *comps) {
            c.gradient(x, gi);
            for (int k = 0; k < d; ++k) g[k] += gi[k];
          }
          double inv = 1.0 / static_cast<double>(comps->size());
          for (int k = 0; k < d; ++k) g[k] *= inv;
        });
  }

  const std::vector<Potential>& components() const { return *components_; }

 private:
  std::shared_ptr<std::vector<Potential>> components_;
};

inline FiniteSumPotential make_finite_sum(std::vector<Potential> components) {
  return FiniteSumPotential(std::move(components));
}

}  // namespace jflow
