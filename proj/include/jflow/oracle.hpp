#pragma once

#include <lapacke.h>

#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "jflow/ensemble.hpp"
#include "jflow/potential.hpp"

// Brute-force references: grid quadrature, the discrete Jeffreys minimizer,
// likelihood-ratio bound checks, a 1D thermal eigensolver, and histogram
// metrics. Everything here is deterministic and independent of the sampling
// pipeline it is used to check.

namespace jflow::oracle {

inline constexpr double kDensityFloor = 1e-300;

struct GridSpec {
  std::vector<double> lo, hi;
  std::vector<int> npts;
  std::vector<std::uint8_t> periodic;  // optional, defaults to false

  int dim() const { return static_cast<int>(npts.size()); }
  double step(int k) const { return (hi[k] - lo[k]) / npts[k]; }
  double cell_volume() const {
    double v = 1.0;
    for (int k = 0; k < dim(); ++k) v *= step(k);
    return v;
  }
  std::size_t cells() const {
    std::size_t n = 1;
    for (int v : npts) n *= v;
    return n;
  }
  bool is_periodic(int k) const {
    return !periodic.empty() && periodic[k] != 0;
  }
  // cell-centered coordinate
  void center(std::size_t linear, std::span<double> x) const {
    for (int k = dim() - 1; k >= 0; --k) {
      std::size_t i = linear % npts[k];
      linear /= npts[k];
      x[k] = lo[k] + (static_cast<double>(i) + 0.5) * step(k);
    }
  }
  // linear cell index of a point, or npos when outside the grid
  std::size_t cell_of(std::span<const double> x) const {
    std::size_t idx = 0;
    for (int k = 0; k < dim(); ++k) {
      double v = x[k];
      if (is_periodic(k)) {
        double span = hi[k] - lo[k];
        v -= span * std::floor((v - lo[k]) / span);
        v += lo[k];
      }
      double f = (v - lo[k]) / step(k);
      if (f < 0.0 || f >= static_cast<double>(npts[k]))
        return static_cast<std::size_t>(-1);
      idx = idx * npts[k] + static_cast<std::size_t>(f);
    }
    return idx;
  }

  static GridSpec regular(std::vector<double> lo, std::vector<double> hi,
                          std::vector<int> npts) {
    GridSpec g;
    g.lo = std::move(lo);
    g.hi = std::move(hi);
    g.npts = std::move(npts);
    return g;
  }
  static GridSpec torus2d(int n) {
    GridSpec g = regular({-kPi, -kPi}, {kPi, kPi}, {n, n});
    g.periodic = {1, 1};
    return g;
  }
};

struct DensityTable {
  GridSpec grid;
  std::vector<double> p;  // cell-centered density, sums to 1 * cellvol

  double mass() const {
    double s = std::accumulate(p.begin(), p.end(), 0.0);
    return s * grid.cell_volume();
  }
  void normalize() {
    double m = mass();
    if (!(m > 0.0)) throw NumericalError("density table: zero mass");
    for (auto& v : p) v /= m;
  }
};

// Midpoint-rule density for exp(-U); throws when the grid visibly truncates
// mass on a non-periodic boundary.
inline DensityTable quadrature_density(const Potential& u, GridSpec grid) {
  if (grid.dim() > 3) throw ConfigError("quadrature: dim must be <= 3");
  if (grid.dim() != u.dim())
    throw ConfigError("quadrature: grid/potential dimension mismatch");
  DensityTable t;
  t.grid = std::move(grid);
  t.p.resize(t.grid.cells());
  std::vector<double> x(t.grid.dim());
  double umin = std::numeric_limits<double>::infinity();
  std::vector<double> energy(t.p.size());
  for (std::size_t c = 0; c < t.p.size(); ++c) {
    t.grid.center(c, x);
    energy[c] = u.energy(x);
    umin = std::min(umin, energy[c]);
  }
  for (std::size_t c = 0; c < t.p.size(); ++c)
    t.p[c] = std::exp(-(energy[c] - umin));
  t.normalize();

  // boundary coverage check
  double boundary = 0.0;
  for (std::size_t c = 0; c < t.p.size(); ++c) {
    std::size_t rem = c;
    bool on_edge = false;
    for (int k = t.grid.dim() - 1; k >= 0; --k) {
      std::size_t i = rem % t.grid.npts[k];
      rem /= t.grid.npts[k];
      if (!t.grid.is_periodic(k) &&
          (i == 0 || i + 1 == static_cast<std::size_t>(t.grid.npts[k])))
        on_edge = true;
    }
    if (on_edge) boundary += t.p[c];
  }
  boundary *= t.grid.cell_volume();
  if (boundary > 1e-6)
    throw ConfigError(
        "quadrature: boundary mass " + std::to_string(boundary) +
        " exceeds 1e-6; widen the grid bounds");
  return t;
}

inline std::vector<double> table_mean(const DensityTable& t) {
  std::vector<double> m(t.grid.dim(), 0.0), x(t.grid.dim());
  for (std::size_t c = 0; c < t.p.size(); ++c) {
    t.grid.center(c, x);
    for (int k = 0; k < t.grid.dim(); ++k) m[k] += t.p[c] * x[k];
  }
  for (auto& v : m) v *= t.grid.cell_volume();
  return m;
}

inline double table_moment(const DensityTable& t, int coord, int power) {
  double s = 0.0;
  std::vector<double> x(t.grid.dim());
  for (std::size_t c = 0; c < t.p.size(); ++c) {
    t.grid.center(c, x);
    s += t.p[c] * std::pow(x[coord], power);
  }
  return s * t.grid.cell_volume();
}

inline double mass_where(
    const DensityTable& t,
    const std::function<bool(std::span<const double>)>& pred) {
  double s = 0.0;
  std::vector<double> x(t.grid.dim());
  for (std::size_t c = 0; c < t.p.size(); ++c) {
    t.grid.center(c, x);
    if (pred(x)) s += t.p[c];
  }
  return s * t.grid.cell_volume();
}

inline double kl_tables(const DensityTable& a, const DensityTable& b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.p.size(); ++c) {
    double pa = std::max(a.p[c], kDensityFloor);
    double pb = std::max(b.p[c], kDensityFloor);
    if (a.p[c] > 0.0) s += a.p[c] * (std::log(pa) - std::log(pb));
  }
  return s * a.grid.cell_volume();
}

// Weighted-histogram density of an ensemble on the grid of `truth`, and the
// L2 distance sqrt(sum (phat - p)^2 cellvol). Mass outside the grid counts as
// missing.
inline DensityTable histogram_density(const Ensemble& e, const GridSpec& grid) {
  DensityTable t;
  t.grid = grid;
  t.p.assign(grid.cells(), 0.0);
  auto alpha = e.normalized_weights();
  for (std::size_t i = 0; i < e.size(); ++i) {
    std::size_t c = grid.cell_of(e.point(i));
    if (c != static_cast<std::size_t>(-1)) t.p[c] += alpha[i];
  }
  double inv = 1.0 / grid.cell_volume();
  for (auto& v : t.p) v *= inv;
  return t;
}

inline double l2_bias(const Ensemble& e, const DensityTable& truth) {
  DensityTable hat = histogram_density(e, truth.grid);
  double s = 0.0;
  for (std::size_t c = 0; c < truth.p.size(); ++c) {
    double d = hat.p[c] - truth.p[c];
    s += d * d;
  }
  return std::sqrt(s * truth.grid.cell_volume());
}

inline double ensemble_mass_where(
    const Ensemble& e,
    const std::function<bool(std::span<const double>)>& pred) {
  auto alpha = e.normalized_weights();
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    if (pred(e.point(i))) s += alpha[i];
  return s;
}

// ---------------------------------------------------------------------------
// Discrete minimizer of lambda0 KL(P||pi1) + lambda1 KL(mu1||P): per-point
// stationarity lambda0 log(P/pi1) - lambda1 mu1/P = c, with c fixed by the
// normalization. Both relations are monotone, so nested bisection converges.
// ---------------------------------------------------------------------------

struct Theorem1Result {
  DensityTable minimizer;
  double c_star = 0.0;
  double stationarity_residual = 0.0;
  int iterations = 0;
};

inline Theorem1Result theorem1_minimizer(const DensityTable& mu1,
                                         const DensityTable& pi1,
                                         double lambda0, double lambda1) {
  if (mu1.p.size() != pi1.p.size())
    throw ConfigError("theorem1: grids must match");
  if (!(lambda0 > 0.0) || !(lambda1 > 0.0))
    throw ConfigError("theorem1: lambdas must be positive");
  const double vol = mu1.grid.cell_volume();
  std::size_t n = mu1.p.size();

  auto solve_point = [&](double log_pi, double mu, double c) {
    // root of h(t) = lambda0 (t - log_pi) - lambda1 mu e^{-t} - c, increasing
    double tlo = log_pi + c / lambda0;  // h <= 0 here
    double thi = tlo;
    double width = 1.0;
    while (lambda0 * (thi - log_pi) - lambda1 * mu * std::exp(-thi) - c <
           0.0) {
      thi += width;
      width *= 2.0;
      if (thi > 800.0) break;
    }
    for (int it = 0; it < 200; ++it) {
      double tm = 0.5 * (tlo + thi);
      double h = lambda0 * (tm - log_pi) - lambda1 * mu * std::exp(-tm) - c;
      (h < 0.0 ? tlo : thi) = tm;
      if (thi - tlo < 1e-14 * (1.0 + std::fabs(tm))) break;
    }
    return 0.5 * (tlo + thi);
  };

  std::vector<double> log_pi(n), mu(n);
  for (std::size_t i = 0; i < n; ++i) {
    log_pi[i] = std::log(std::max(pi1.p[i], kDensityFloor));
    mu[i] = std::max(mu1.p[i], 0.0);
  }

  auto mass_for = [&](double c, std::vector<double>& out) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = std::exp(solve_point(log_pi[i], mu[i], c));
      m += out[i];
    }
    return m * vol;
  };

  std::vector<double> p(n);
  double clo = -1.0, chi = 1.0;
  int iters = 0;
  while (mass_for(clo, p) > 1.0 && clo > -1e6) {
    clo *= 2.0;
    ++iters;
  }
  while (mass_for(chi, p) < 1.0 && chi < 1e6) {
    chi *= 2.0;
    ++iters;
  }
  double c = 0.0;
  for (int it = 0; it < 200; ++it) {
    ++iters;
    c = 0.5 * (clo + chi);
    double m = mass_for(c, p);
    (m < 1.0 ? clo : chi) = c;
    if (std::fabs(m - 1.0) < 1e-13) break;
    if (it == 199)
      throw NumericalError("theorem1: normalization did not converge");
  }

  Theorem1Result r;
  r.minimizer.grid = mu1.grid;
  r.minimizer.p = p;
  r.minimizer.normalize();
  r.c_star = c;
  r.iterations = iters;
  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double pi_ = std::max(r.minimizer.p[i], kDensityFloor);
    double h = lambda0 * (std::log(pi_) - log_pi[i]) -
               lambda1 * mu[i] / pi_ - c;
    res = std::max(res, std::fabs(h));
  }
  r.stationarity_residual = res;
  return r;
}

// ---------------------------------------------------------------------------
// Likelihood-ratio instability bound: with KL(P||Q) <= eps and KL(Q||P) <= eps,
// max(P(A_delta), Q(A_delta)) <= 2 eps / (delta (1 - e^-delta)).
// ---------------------------------------------------------------------------

struct BoundCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  double epsilon = 0.0;
  bool holds = false;
};

inline BoundCheck lemma1_bound_check(const DensityTable& p,
                                     const DensityTable& q, double delta) {
  if (p.p.size() != q.p.size())
    throw ConfigError("bound check: grids must match");
  double eps = std::max(kl_tables(p, q), kl_tables(q, p));
  double mass_p = 0.0, mass_q = 0.0;
  for (std::size_t c = 0; c < p.p.size(); ++c) {
    double lp = std::log(std::max(p.p[c], kDensityFloor));
    double lq = std::log(std::max(q.p[c], kDensityFloor));
    if (std::fabs(lp - lq) >= delta) {
      mass_p += p.p[c];
      mass_q += q.p[c];
    }
  }
  double vol = p.grid.cell_volume();
  BoundCheck b;
  b.epsilon = eps;
  b.lhs = std::max(mass_p, mass_q) * vol;
  b.rhs = 2.0 * eps / (delta * (1.0 - std::exp(-delta)));
  b.holds = b.lhs <= b.rhs + 1e-10;
  return b;
}

// ---------------------------------------------------------------------------
// 1D thermal state of H = -1/2 d^2/dx^2 + V via the tridiagonal eigenproblem.
// ---------------------------------------------------------------------------

struct ThermalState {
  DensityTable density;       // thermal marginal
  std::vector<double> energies;
  double mean_x = 0.0;
  double mean_x2 = 0.0;
  bool converged = true;  // false when n_states leaves >1e-10 thermal mass
};

inline ThermalState schrodinger_1d(const Potential& v, double beta,
                                   const GridSpec& grid, int n_states) {
  if (v.dim() != 1 || grid.dim() != 1)
    throw ConfigError("schrodinger_1d: one-dimensional only");
  int n = grid.npts[0];
  double dx = grid.step(0);
  std::vector<double> diag(n), off(n - 1, -0.5 / (dx * dx));
  std::vector<double> x(1);
  for (int i = 0; i < n; ++i) {
    std::size_t c = i;
    grid.center(c, x);
    diag[i] = 1.0 / (dx * dx) + v.energy(x);
  }
  n_states = std::min(n_states, n);
  std::vector<double> w(n), z(static_cast<std::size_t>(n) * n_states);
  std::vector<lapack_int> isuppz(2 * std::max(1, n_states));
  lapack_int m = 0;
  lapack_int info = LAPACKE_dstevr(
      LAPACK_COL_MAJOR, 'V', 'I', n, diag.data(), off.data(), 0.0, 0.0, 1,
      n_states, 0.0, &m, w.data(), z.data(), n, isuppz.data());
  if (info != 0)
    throw NumericalError("schrodinger_1d: eigensolver failed, info " +
                         std::to_string(info));

  ThermalState st;
  st.density.grid = grid;
  st.density.p.assign(n, 0.0);
  st.energies.assign(w.begin(), w.begin() + m);
  double zsum = 0.0;
  for (int k = 0; k < m; ++k) zsum += std::exp(-beta * (w[k] - w[0]));
  if (m > 0 && std::exp(-beta * (w[m - 1] - w[0])) / zsum > 1e-10)
    st.converged = false;
  for (int k = 0; k < m; ++k) {
    double boltz = std::exp(-beta * (w[k] - w[0])) / zsum;
    const double* psi = z.data() + static_cast<std::size_t>(k) * n;
    for (int i = 0; i < n; ++i)
      st.density.p[i] += boltz * psi[i] * psi[i] / dx;  // psi is l2-normalized
  }
  st.density.normalize();
  st.mean_x = table_moment(st.density, 0, 1);
  st.mean_x2 = table_moment(st.density, 0, 2);
  return st;
}

// ---------------------------------------------------------------------------
// Potential of mean force along one coordinate: -log weighted marginal
// histogram, shifted so the minimum is zero. Empty bins are reported as NaN.
// ---------------------------------------------------------------------------

struct PmfProfile {
  std::vector<double> centers;
  std::vector<double> value;  // NaN marks missing bins
};

inline PmfProfile pmf_1d(const Ensemble& e, int coord, int bins, double lo,
                         double hi) {
  if (bins < 8) throw ConfigError("pmf_1d: need at least 8 bins");
  PmfProfile prof;
  prof.centers.resize(bins);
  prof.value.assign(bins, std::numeric_limits<double>::quiet_NaN());
  double width = (hi - lo) / bins;
  for (int b = 0; b < bins; ++b) prof.centers[b] = lo + (b + 0.5) * width;
  std::vector<double> mass(bins, 0.0);
  auto alpha = e.normalized_weights();
  for (std::size_t i = 0; i < e.size(); ++i) {
    double v = e.point(i)[coord];
    if (e.topology.is_circular(coord)) v = wrap_angle(v);
    double f = (v - lo) / width;
    if (f < 0.0 || f >= bins) continue;
    mass[static_cast<int>(f)] += alpha[i];
  }
  double best = std::numeric_limits<double>::infinity();
  for (int b = 0; b < bins; ++b)
    if (mass[b] > 0.0) best = std::min(best, -std::log(mass[b]));
  for (int b = 0; b < bins; ++b)
    if (mass[b] > 0.0) prof.value[b] = -std::log(mass[b]) - best;
  return prof;
}

inline PmfProfile pmf_of_density(const DensityTable& t, int coord, int bins,
                                 double lo, double hi) {
  PmfProfile prof;
  prof.centers.resize(bins);
  prof.value.assign(bins, std::numeric_limits<double>::quiet_NaN());
  double width = (hi - lo) / bins;
  std::vector<double> mass(bins, 0.0);
  std::vector<double> x(t.grid.dim());
  for (std::size_t c = 0; c < t.p.size(); ++c) {
    t.grid.center(c, x);
    double f = (x[coord] - lo) / width;
    if (f < 0.0 || f >= bins) continue;
    mass[static_cast<int>(f)] += t.p[c] * t.grid.cell_volume();
  }
  for (int b = 0; b < bins; ++b) prof.centers[b] = lo + (b + 0.5) * width;
  double best = std::numeric_limits<double>::infinity();
  for (int b = 0; b < bins; ++b)
    if (mass[b] > 0.0) best = std::min(best, -std::log(mass[b]));
  for (int b = 0; b < bins; ++b)
    if (mass[b] > 0.0) prof.value[b] = -std::log(mass[b]) - best;
  return prof;
}

}  // namespace jflow::oracle
