#pragma once

#include <nlohmann/json.hpp>

#include "jflow/benchmarks.hpp"
#include "jflow/ensemble.hpp"
#include "jflow/potential.hpp"

namespace jflow {

// ---------------------------------------------------------------------------
// Overdamped Langevin and MALA kernels
// ---------------------------------------------------------------------------

// Euler-Maruyama step x' = x - h grad U + sqrt(2h) xi. Returns false (position
// unchanged) on a nonfinite gradient.
inline bool langevin_step(std::span<double> x, const Potential& u, double h,
                          Rng& rng) {
  if (!(h > 0.0)) throw ConfigError("langevin_step: h must be positive");
  thread_local std::vector<double> g, prop;
  g.assign(x.size(), 0.0);
  u.gradient(x, g);
  for (double v : g)
    if (!std::isfinite(v)) return false;
  prop.resize(x.size());
  double s = std::sqrt(2.0 * h);
  for (std::size_t i = 0; i < x.size(); ++i)
    prop[i] = x[i] - h * g[i] + s * rng.normal();
  u.topology().wrap(prop);
  std::copy(prop.begin(), prop.end(), x.begin());
  return true;
}

// MALA: Langevin proposal with the exact Metropolis correction; detailed
// balance w.r.t. exp(-U). Circular coordinates use minimum-image proposal
// displacements.
inline bool mala_step(std::span<double> x, const Potential& u, double h,
                      Rng& rng) {
  if (!(h > 0.0)) throw ConfigError("mala_step: h must be positive");
  thread_local std::vector<double> g, gp, prop;
  g.assign(x.size(), 0.0);
  u.gradient(x, g);
  for (double v : g)
    if (!std::isfinite(v)) return false;
  double u_x = u.energy(x);
  prop.resize(x.size());
  double s = std::sqrt(2.0 * h);
  for (std::size_t i = 0; i < x.size(); ++i)
    prop[i] = x[i] - h * g[i] + s * rng.normal();
  u.topology().wrap(prop);
  double u_p = u.energy(prop);
  gp.assign(x.size(), 0.0);
  u.gradient(prop, gp);
  if (!std::isfinite(u_p)) return false;
  for (double v : gp)
    if (!std::isfinite(v)) return false;

  // log q(a | b) = -|a - b + h grad U(b)|^2 / (4h), up to a constant
  double fwd = 0.0, bwd = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double df = u.topology().displacement(static_cast<int>(i), prop[i],
                                          x[i] - h * g[i]);
    double db = u.topology().displacement(static_cast<int>(i), x[i],
                                          prop[i] - h * gp[i]);
    fwd += df * df;
    bwd += db * db;
  }
  double log_alpha = -u_p + u_x - bwd / (4.0 * h) + fwd / (4.0 * h);
  if (std::log(rng.uniform() + 1e-300) < log_alpha) {
    std::copy(prop.begin(), prop.end(), x.begin());
    return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Parallel tempering over the interpolated ladder
// ---------------------------------------------------------------------------

struct Ladder {
  std::vector<double> lambdas;  // 0 = l_0 < ... < l_M = 1
  double h = 1e-3;              // uniform per-replica step size
  int swap_stride = 10;         // kernel steps between swap sweeps

  int transitions() const { return static_cast<int>(lambdas.size()) - 1; }
  int replicas() const { return static_cast<int>(lambdas.size()); }

  void validate() const {
    if (lambdas.size() < 1) throw ConfigError("ladder: empty");
    if (lambdas.front() != 0.0 || lambdas.back() != 1.0)
      throw ConfigError("ladder: lambda must start at 0 and end at 1");
    for (std::size_t i = 1; i < lambdas.size(); ++i)
      if (!(lambdas[i] > lambdas[i - 1]))
        throw ConfigError("ladder: lambda must be strictly increasing");
    if (!(h > 0.0)) throw ConfigError("ladder: step size must be positive");
    if (swap_stride < 1) throw ConfigError("ladder: swap stride must be >= 1");
  }

  static Ladder uniform(int m) {
    Ladder l;
    for (int k = 0; k <= m; ++k) l.lambdas.push_back(double(k) / m);
    return l;
  }
  static Ladder geometric(int m, double first) {
    // lambda_k = first^{(M-k)/(M-1)} for k >= 1; a geometric ramp into 1
    Ladder l;
    l.lambdas.push_back(0.0);
    for (int k = 1; k <= m; ++k)
      l.lambdas.push_back(std::pow(first, double(m - k) / double(m - 1)));
    return l;
  }
};

struct PairStat {
  std::uint64_t attempts = 0;
  std::uint64_t accepts = 0;
  double rate() const {
    return attempts ? double(accepts) / double(attempts) : 0.0;
  }
};

struct PTState {
  std::vector<std::vector<double>> x;  // replica positions
  std::vector<PairStat> pairs;         // adjacent-pair swap counters
  std::vector<Rng> replica_rng;
  Rng swap_rng;
  std::uint64_t rejected_steps = 0;  // nonfinite-gradient rejections
  int sweep_parity = 0;
};

// One sweep of adjacent-pair swap proposals; even- and odd-indexed pairs
// alternate between sweeps. Accepts with min{1, exp(-dH)} where
// dH = U_{k-1}(x_k) + U_k(x_{k-1}) - U_{k-1}(x_{k-1}) - U_k(x_k).
inline void swap_sweep(PTState& state, const std::vector<Potential>& pots) {
  int m = static_cast<int>(pots.size()) - 1;
  for (int j = state.sweep_parity; j < m; j += 2) {
    auto& xa = state.x[j];
    auto& xb = state.x[j + 1];
    double dh = pots[j].energy(xb) + pots[j + 1].energy(xa) -
                pots[j].energy(xa) - pots[j + 1].energy(xb);
    ++state.pairs[j].attempts;
    if (std::log(state.swap_rng.uniform() + 1e-300) < -dh) {
      xa.swap(xb);
      ++state.pairs[j].accepts;
    }
  }
  state.sweep_parity ^= 1;
}

struct PTReport {
  std::vector<double> lambdas;
  std::vector<PairStat> pairs;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["lambdas"] = lambdas;
    j["pairs"] = nlohmann::json::array();
    for (std::size_t k = 0; k < pairs.size(); ++k)
      j["pairs"].push_back({{"pair", k},
                            {"attempts", pairs[k].attempts},
                            {"accepts", pairs[k].accepts},
                            {"rate", pairs[k].rate()}});
    j["warnings"] = warnings;
    return j;
  }
};

struct PTRun {
  std::vector<Ensemble> ensembles;  // mu_0 .. mu_M
  PTReport report;
};

struct PTOptions {
  std::string kernel = "langevin";  // or "mala"
  // initial positions; defaults to the natural base of the topology
  std::function<void(Rng&, std::span<double>)> init;
};

inline PTRun run_pt(const Potential& u0, const Potential& um,
                    const Ladder& ladder, std::size_t n_samples,
                    std::size_t burn_in, std::size_t thin, std::uint64_t seed,
                    const PTOptions& opts = {}) {
  ladder.validate();
  if (n_samples < 1 || thin < 1)
    throw ConfigError("run_pt: n_samples and thin must be positive");
  bool mala = opts.kernel == "mala";
  if (!mala && opts.kernel != "langevin")
    throw ConfigError("run_pt: unknown kernel " + opts.kernel);

  int m = ladder.transitions();
  std::vector<Potential> pots;
  for (double lam : ladder.lambdas) pots.push_back(interpolate(u0, um, lam));

  PTState state;
  state.x.resize(m + 1);
  state.pairs.resize(std::max(0, m));
  state.swap_rng = Rng(seed_fanout(seed, "pt-swap"));
  auto init = opts.init;
  if (!init) init = make_natural_base(u0.topology()).draw;
  for (int k = 0; k <= m; ++k) {
    state.replica_rng.emplace_back(seed_fanout(seed, "pt-replica", k));
    state.x[k].resize(u0.dim());
    init(state.replica_rng[k], state.x[k]);
    u0.topology().wrap(state.x[k]);
  }

  PTRun run;
  run.ensembles.reserve(m + 1);
  for (int k = 0; k <= m; ++k) {
    Ensemble e = Ensemble::uniform(
        u0.dim(), n_samples, u0.topology(),
        "pt:lambda=" + std::to_string(ladder.lambdas[k]), seed);
    run.ensembles.push_back(std::move(e));
  }

  std::vector<std::uint64_t> rejects(m + 1, 0);
  std::size_t total_steps = burn_in + n_samples * thin;
  std::size_t recorded = 0;
  for (std::size_t step = 0; step < total_steps; ++step) {
    parallel_chunks(m + 1, 1, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t k = lo; k < hi; ++k) {
        bool ok = mala ? mala_step(state.x[k], pots[k], ladder.h,
                                   state.replica_rng[k])
                       : langevin_step(state.x[k], pots[k], ladder.h,
                                       state.replica_rng[k]);
        if (!ok && !mala) ++rejects[k];
      }
    });
    if ((step + 1) % ladder.swap_stride == 0) swap_sweep(state, pots);
    if (step >= burn_in && (step - burn_in) % thin == 0 &&
        recorded < n_samples) {
      for (int k = 0; k <= m; ++k)
        std::copy(state.x[k].begin(), state.x[k].end(),
                  run.ensembles[k].point(recorded).begin());
      ++recorded;
    }
  }

  run.report.lambdas = ladder.lambdas;
  run.report.pairs = state.pairs;
  for (int j = 0; j < m; ++j) {
    double r = state.pairs[j].rate();
    if (r < 0.2 || r > 0.4)
      run.report.warnings.push_back(
          "swap rate " + std::to_string(r) + " for pair " +
          std::to_string(j) + " outside [0.2, 0.4]");
  }
  for (int k = 0; k <= m; ++k)
    if (rejects[k] > 0)
      run.report.warnings.push_back(
          "replica " + std::to_string(k) + " rejected " +
          std::to_string(rejects[k]) + " nonfinite-gradient steps");
  return run;
}

// ---------------------------------------------------------------------------
// Ladder calibration: iterative gap adjustment from short pilot runs until
// all pair rates are within +-10 percentage points of the target.
// ---------------------------------------------------------------------------

struct CalibrationResult {
  Ladder ladder;
  std::vector<double> rates;
  bool converged = false;
  int iterations = 0;
};

inline CalibrationResult calibrate_ladder(const Potential& u0,
                                          const Potential& um, int m,
                                          double target_rate,
                                          std::uint64_t seed,
                                          double h = 1e-2,
                                          std::size_t pilot_samples = 500,
                                          int max_iterations = 12,
                                          const PTOptions& opts = {}) {
  if (m < 1) throw ConfigError("calibrate_ladder: need at least one rung");
  if (!(target_rate > 0.0 && target_rate < 1.0))
    throw ConfigError("calibrate_ladder: target rate must lie in (0,1)");
  std::vector<double> gaps(m, 1.0 / m);
  CalibrationResult best;
  // rank candidate ladders by worst shortfall below the target first (a
  // bottleneck pair breaks ergodicity; excess swapping is merely wasteful),
  // then by the plain max deviation
  double best_deficit = std::numeric_limits<double>::infinity();
  double best_score = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iterations; ++it) {
    Ladder lad;
    lad.h = h;
    lad.lambdas.assign(1, 0.0);
    for (int j = 0; j < m; ++j)
      lad.lambdas.push_back(lad.lambdas.back() + gaps[j]);
    lad.lambdas.back() = 1.0;
    PTRun pilot = run_pt(u0, um, lad, pilot_samples, pilot_samples, 2,
                         seed_fanout(seed, "calibrate", it), opts);
    std::vector<double> rates;
    double score = 0.0, deficit = 0.0;
    for (const auto& p : pilot.report.pairs) {
      rates.push_back(p.rate());
      score = std::max(score, std::fabs(p.rate() - target_rate));
      deficit = std::max(deficit, target_rate - p.rate());
    }
    if (std::make_pair(deficit, score) <
        std::make_pair(best_deficit, best_score)) {
      best_deficit = deficit;
      best_score = score;
      best.ladder = lad;
      best.rates = rates;
      best.iterations = it + 1;
    }
    if (score <= 0.10) {
      best.converged = true;
      break;
    }
    // rates above target are harmless; they only mean the span 0..1 needs no
    // further widening
    bool all_high = true;
    for (double r : rates) all_high &= (r >= target_rate);
    // rate ~ exp(-c * gap) heuristic: gap* = gap * log(target) / log(rate)
    std::vector<double> next = gaps;
    double total = 0.0;
    for (int j = 0; j < m; ++j) {
      double r = std::clamp(rates[j], 1e-3, 1.0 - 1e-6);
      double f = std::log(target_rate) / std::log(r);
      next[j] *= std::clamp(f, 0.2, 5.0);
      total += next[j];
    }
    for (auto& g : next) g /= total;
    double moved = 0.0;
    for (int j = 0; j < m; ++j) moved = std::max(moved, std::fabs(next[j] -
                                                                  gaps[j]));
    if (all_high || moved < 1e-12) {
      // every pair already swaps at or above the target and the update is a
      // no-op under renormalization
      best.converged = all_high;
      break;
    }
    gaps = next;
  }
  return best;
}

}  // namespace jflow
