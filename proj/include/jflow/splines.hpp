#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <span>

#include "jflow/common.hpp"

namespace jflow::spline {

inline constexpr int kMaxBins = 32;
inline constexpr double kDerivFloor = 1e-3;
inline constexpr double kMinBinFrac = 1e-3;  // of one uniform bin

// Shift making floor + softplus(0 + C) == 1, so zero raw parameters give
// unit knot derivatives.
inline double deriv_shift() {
  static const double c = std::log(std::expm1(1.0 - kDerivFloor));
  return c;
}

// ---------------------------------------------------------------------------
// Forward-mode dual numbers over the 7 scalar inputs of one spline bin:
// (x, x_k, w_k, y_k, h_k, d0, d1). One evaluation yields the bin output, its
// x-derivative, and all first partials of both - everything forward and
// inverse backprop need.
// ---------------------------------------------------------------------------

template <int N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}
  static Dual seed(double value, int slot) {
    Dual r(value);
    r.d[slot] = 1.0;
    return r;
  }

  Dual operator-() const {
    Dual r(-v);
    for (int i = 0; i < N; ++i) r.d[i] = -d[i];
    return r;
  }
  friend Dual operator+(const Dual& a, const Dual& b) {
    Dual r(a.v + b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a, const Dual& b) {
    Dual r(a.v - b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    double inv2 = 1.0 / (b.v * b.v);
    for (int i = 0; i < N; ++i)
      r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv2;
    return r;
  }
};

// Monotonic rational-quadratic bin map (knots (x_k, y_k)-(x_k+w_k, y_k+h_k),
// endpoint derivatives d0, d1). Returns (y, dy/dx).
template <class T>
inline void rq_bin(const T& x, const T& xk, const T& wk, const T& yk,
                   const T& hk, const T& d0, const T& d1, T& y, T& dydx) {
  T xi = (x - xk) / wk;
  T s = hk / wk;
  T one_minus = T(1.0) - xi;
  T q = xi * one_minus;
  T denom = s + (d0 + d1 - T(2.0) * s) * q;
  y = yk + hk * (s * xi * xi + d0 * q) / denom;
  T num = d1 * xi * xi + T(2.0) * s * q + d0 * one_minus * one_minus;
  dydx = s * s * num / (denom * denom);
}

struct BinPartials {
  double y = 0.0;
  double dydx = 0.0;
  std::array<double, 7> dy{};     // partials of y wrt (x,xk,wk,yk,hk,d0,d1)
  std::array<double, 7> ddydx{};  // partials of dy/dx; ddydx[0] is f''
};

inline BinPartials rq_bin_partials(double x, double xk, double wk, double yk,
                                   double hk, double d0, double d1) {
  using D = Dual<7>;
  D y, dydx;
  rq_bin(D::seed(x, 0), D::seed(xk, 1), D::seed(wk, 2), D::seed(yk, 3),
         D::seed(hk, 4), D::seed(d0, 5), D::seed(d1, 6), y, dydx);
  BinPartials p;
  p.y = y.v;
  p.dydx = dydx.v;
  p.dy = y.d;
  p.ddydx = dydx.d;
  return p;
}

// Analytic bin inverse: solve the quadratic in xi, numerically stable root.
inline double rq_bin_inverse(double y, double xk, double wk, double yk,
                             double hk, double d0, double d1) {
  double s = hk / wk;
  double yr = y - yk;
  double t = d0 + d1 - 2.0 * s;
  double a = hk * (s - d0) + yr * t;
  double b = hk * d0 - yr * t;
  double c = -s * yr;
  double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) disc = 0.0;
  double xi = 2.0 * c / (-b - std::sqrt(disc));
  xi = std::clamp(xi, 0.0, 1.0);
  return xk + xi * wk;
}

// ---------------------------------------------------------------------------
// Knot construction from raw parameters.
//
// widths/heights: softmax with a small floor fraction, scaled to the span;
// derivatives: kDerivFloor + softplus(raw + C). Raw zeros yield a uniform
// grid with unit derivatives (the identity map).
// ---------------------------------------------------------------------------

struct KnotSet {
  int bins = 0;
  double span = 0.0;  // 2B or 2*pi
  double lo = 0.0;    // -B or -pi
  std::array<double, kMaxBins + 1> xk{}, yk{};
  std::array<double, kMaxBins + 1> delta{};  // size bins+1
  std::array<double, kMaxBins> pw{}, ph{};   // softmax probabilities
};

namespace detail {
inline void softmax_to(std::span<const double> raw,
                       std::span<double> prob) {
  double m = raw[0];
  for (double r : raw) m = std::max(m, r);
  double z = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    prob[i] = std::exp(raw[i] - m);
    z += prob[i];
  }
  for (std::size_t i = 0; i < raw.size(); ++i) prob[i] /= z;
}

// dL/draw from dL/dprob for a softmax output
inline void softmax_backward(std::span<const double> prob,
                             std::span<const double> dprob,
                             std::span<double> draw) {
  double inner = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) inner += prob[i] * dprob[i];
  for (std::size_t i = 0; i < prob.size(); ++i)
    draw[i] += prob[i] * (dprob[i] - inner);
}
}  // namespace detail

// raw layout (unbounded): K widths, K heights, K-1 interior derivatives.
// raw layout (circular):  K widths, K heights, K derivatives (index 0 shared
//                          by both endpoints), 1 phase.
inline int rq_param_count(int bins) { return 3 * bins - 1; }
inline int circular_param_count(int bins) { return 3 * bins + 1; }

inline KnotSet build_knots(std::span<const double> raw, int bins, double bound,
                           bool circular) {
  assert(bins >= 2 && bins <= kMaxBins);
  KnotSet ks;
  ks.bins = bins;
  ks.lo = -bound;
  ks.span = 2.0 * bound;
  detail::softmax_to(raw.subspan(0, bins), {ks.pw.data(), (std::size_t)bins});
  detail::softmax_to(raw.subspan(bins, bins),
                     {ks.ph.data(), (std::size_t)bins});
  double minfrac = kMinBinFrac / bins;
  double scale = 1.0 - bins * minfrac;
  ks.xk[0] = ks.lo;
  ks.yk[0] = ks.lo;
  for (int k = 0; k < bins; ++k) {
    double w = ks.span * (minfrac + scale * ks.pw[k]);
    double h = ks.span * (minfrac + scale * ks.ph[k]);
    ks.xk[k + 1] = ks.xk[k] + w;
    ks.yk[k + 1] = ks.yk[k] + h;
  }
  const double shift = deriv_shift();
  if (circular) {
    for (int k = 0; k < bins; ++k)
      ks.delta[k] = kDerivFloor + softplus(raw[2 * bins + k] + shift);
    ks.delta[bins] = ks.delta[0];
  } else {
    ks.delta[0] = 1.0;
    ks.delta[bins] = 1.0;
    for (int k = 1; k < bins; ++k)
      ks.delta[k] = kDerivFloor + softplus(raw[2 * bins + (k - 1)] + shift);
  }
  return ks;
}

// Accumulate dL/draw given partials wrt the bin-level quantities of bin b.
// dxk/dyk apply to the left knot of the bin, dwk/dhk to its extent,
// dd0/dd1 to the endpoint derivatives.
inline void knots_backward(const KnotSet& ks, std::span<const double> raw,
                           int b, double dxk, double dwk, double dyk,
                           double dhk, double dd0, double dd1,
                           std::span<double> draw, bool circular) {
  int bins = ks.bins;
  double minfrac = kMinBinFrac / bins;
  double scale = ks.span * (1.0 - bins * minfrac);
  std::array<double, kMaxBins> dprob{};
  // widths: xk_b = lo + sum_{j<b} w_j, wk = w_b
  for (int j = 0; j < b; ++j) dprob[j] = dxk * scale;
  dprob[b] += dwk * scale;
  detail::softmax_backward({ks.pw.data(), (std::size_t)bins},
                           {dprob.data(), (std::size_t)bins},
                           draw.subspan(0, bins));
  dprob.fill(0.0);
  for (int j = 0; j < b; ++j) dprob[j] = dyk * scale;
  dprob[b] += dhk * scale;
  detail::softmax_backward({ks.ph.data(), (std::size_t)bins},
                           {dprob.data(), (std::size_t)bins},
                           draw.subspan(bins, bins));
  const double shift = deriv_shift();
  auto deriv_raw_grad = [&](int knot_index, double g) {
    if (g == 0.0) return;
    if (circular) {
      int r = knot_index % bins;  // endpoint K aliases raw 0
      draw[2 * bins + r] += g * sigmoid(raw[2 * bins + r] + shift);
    } else {
      if (knot_index == 0 || knot_index == bins) return;  // pinned to 1
      int r = knot_index - 1;
      draw[2 * bins + r] += g * sigmoid(raw[2 * bins + r] + shift);
    }
  };
  deriv_raw_grad(b, dd0);
  deriv_raw_grad(b + 1, dd1);
}

inline int find_bin(const KnotSet& ks, double x) {
  int lo = 0, hi = ks.bins - 1;
  while (lo < hi) {
    int mid = (lo + hi + 1) / 2;
    if (x >= ks.xk[mid])
      lo = mid;
    else
      hi = mid - 1;
  }
  return lo;
}

inline int find_bin_y(const KnotSet& ks, double y) {
  int lo = 0, hi = ks.bins - 1;
  while (lo < hi) {
    int mid = (lo + hi + 1) / 2;
    if (y >= ks.yk[mid])
      lo = mid;
    else
      hi = mid - 1;
  }
  return lo;
}

}  // namespace jflow::spline
