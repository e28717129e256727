#pragma once

#include "jflow/ensemble.hpp"
#include "jflow/flow_model.hpp"
#include "jflow/potential.hpp"

namespace jflow {

struct PushStats {
  std::size_t nonfinite = 0;
  double cess = 0.0;  // ESS of this step's weight increments
};

// Pushes every particle through F and adds the importance log-weight
// increment -U_target(y) + U_source(x) + log|det dF(x)|. Nonfinite increments
// zero the particle's weight and are counted; more than 5% of them is a hard
// error.
inline Ensemble importance_weights(const Flow& f, const Ensemble& source,
                                   const Potential& u_source,
                                   const Potential& u_target,
                                   PushStats* stats = nullptr) {
  Ensemble out = source;
  out.topology = f.topology();
  std::size_t n = source.size();
  std::vector<double> delta(n, 0.0);
  std::vector<std::size_t> bad_per_chunk((n + 1023) / 1024, 0);
  parallel_chunks(n, 1024, [&](std::size_t chunk, std::size_t lo,
                               std::size_t hi) {
    std::vector<double> y(source.dim);
    for (std::size_t i = lo; i < hi; ++i) {
      auto x = source.point(i);
      double ld = f.forward(x, y);
      double d = -u_target.energy(y) + u_source.energy(x) + ld;
      std::copy(y.begin(), y.end(), out.point(i).begin());
      if (std::isfinite(d)) {
        delta[i] = d;
      } else {
        delta[i] = -std::numeric_limits<double>::infinity();
        ++bad_per_chunk[chunk];
      }
    }
  });
  std::size_t bad = 0;
  for (auto b : bad_per_chunk) bad += b;
  if (bad * 20 > n)
    throw NumericalError("importance_weights: more than 5% nonfinite weights");
  for (std::size_t i = 0; i < n; ++i) out.log_weights[i] += delta[i];
  if (stats) {
    stats->nonfinite = bad;
    stats->cess = ess_of_log_weights(delta);
  }
  return out;
}

// Conditional ESS of a single flow step: the discrete reduction
// (sum w)^2 / (n sum w^2) over the pushed source points.
inline double cess(const Flow& f, const Ensemble& source,
                   const Potential& u_source, const Potential& u_target) {
  std::size_t n = source.size();
  std::vector<double> delta(n, -std::numeric_limits<double>::infinity());
  parallel_chunks(n, 1024, [&](std::size_t, std::size_t lo, std::size_t hi) {
    std::vector<double> y(source.dim);
    for (std::size_t i = lo; i < hi; ++i) {
      auto x = source.point(i);
      double ld = f.forward(x, y);
      double d = -u_target.energy(y) + u_source.energy(x) + ld;
      if (std::isfinite(d)) delta[i] = d;
    }
  });
  return ess_of_log_weights(delta);
}

}  // namespace jflow
