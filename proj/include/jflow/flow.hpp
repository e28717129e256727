#pragma once

#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "jflow/common.hpp"
#include "jflow/splines.hpp"
#include "jflow/topology.hpp"

namespace jflow {

// ---------------------------------------------------------------------------
// Conditioner: fully connected net with tanh hidden layers and a linear
// output layer. The output layer is zero-initialized so every transform
// starts as the identity.
// ---------------------------------------------------------------------------

class Conditioner {
 public:
  Conditioner() = default;
  Conditioner(int in_features, std::vector<int> hidden, int out_features)
      : in_(in_features), out_(out_features), hidden_(std::move(hidden)) {
    sizes_.push_back(in_);
    for (int h : hidden_) sizes_.push_back(h);
    sizes_.push_back(out_);
    int count = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
      count += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
    params_.assign(count, 0.0);
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  const std::vector<int>& hidden() const { return hidden_; }
  int param_count() const { return static_cast<int>(params_.size()); }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  void init_weights(Rng& rng) {
    int off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      int rows = sizes_[l + 1], cols = sizes_[l];
      bool last = (l + 2 == sizes_.size());
      double a = last ? 0.0 : std::sqrt(6.0 / (rows + cols));
      for (int i = 0; i < rows * cols; ++i)
        params_[off + i] = last ? 0.0 : rng.uniform(-a, a);
      off += rows * cols;
      for (int i = 0; i < rows; ++i) params_[off + i] = 0.0;
      off += rows;
    }
  }

  void forward(std::span<const double> input, std::span<double> output) const {
    thread_local std::vector<double> act;
    run_forward(input, act);
    const double* last = act.data() + act.size() - out_;
    std::copy(last, last + out_, output.begin());
  }

  // Accumulates into dparams; adds the input cotangent into dinput.
  void backward(std::span<const double> input, std::span<const double> doutput,
                std::span<double> dinput, std::span<double> dparams) const {
    thread_local std::vector<double> act;
    thread_local std::vector<double> delta, delta_next;
    run_forward(input, act);

    int n_layers = static_cast<int>(sizes_.size()) - 1;
    delta.assign(doutput.begin(), doutput.end());
    // walk backwards over layers
    for (int l = n_layers - 1; l >= 0; --l) {
      int rows = sizes_[l + 1], cols = sizes_[l];
      int w_off = weight_offset(l);
      const double* a_in =
          (l == 0) ? input.data() : act.data() + act_offset(l - 1);
      // activation derivative for non-final layers: act stores tanh outputs
      if (l != n_layers - 1) {
        const double* a_out = act.data() + act_offset(l);
        for (int i = 0; i < rows; ++i) delta[i] *= 1.0 - a_out[i] * a_out[i];
      }
      for (int i = 0; i < rows; ++i) {
        double di = delta[i];
        double* dw = dparams.data() + w_off + i * cols;
        for (int j = 0; j < cols; ++j) dw[j] += di * a_in[j];
        dparams[w_off + rows * cols + i] += di;
      }
      delta_next.assign(cols, 0.0);
      const double* w = params_.data() + w_off;
      for (int i = 0; i < rows; ++i) {
        double di = delta[i];
        const double* wi = w + i * cols;
        for (int j = 0; j < cols; ++j) delta_next[j] += di * wi[j];
      }
      delta.swap(delta_next);
    }
    for (int j = 0; j < in_; ++j) dinput[j] += delta[j];
  }

 private:
  int weight_offset(int layer) const {
    int off = 0;
    for (int l = 0; l < layer; ++l)
      off += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
    return off;
  }
  // offset of layer l's output inside the activation scratch
  int act_offset(int layer) const {
    int off = 0;
    for (int l = 0; l < layer; ++l) off += sizes_[l + 1];
    return off;
  }

  void run_forward(std::span<const double> input,
                   std::vector<double>& act) const {
    int total = 0;
    for (std::size_t l = 1; l < sizes_.size(); ++l) total += sizes_[l];
    act.assign(total, 0.0);
    const double* a_in = input.data();
    int n_layers = static_cast<int>(sizes_.size()) - 1;
    for (int l = 0; l < n_layers; ++l) {
      int rows = sizes_[l + 1], cols = sizes_[l];
      const double* w = params_.data() + weight_offset(l);
      const double* b = w + rows * cols;
      double* a_out = act.data() + act_offset(l);
      bool last = (l == n_layers - 1);
      for (int i = 0; i < rows; ++i) {
        double s = b[i];
        const double* wi = w + i * cols;
        for (int j = 0; j < cols; ++j) s += wi[j] * a_in[j];
        a_out[i] = last ? s : std::tanh(s);
      }
      a_in = a_out;
    }
  }

  int in_ = 0, out_ = 0;
  std::vector<int> hidden_;
  std::vector<int> sizes_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Layer interface
// ---------------------------------------------------------------------------

class FlowLayer {
 public:
  virtual ~FlowLayer() = default;
  virtual std::string kind() const = 0;
  virtual int dim() const = 0;
  virtual int param_count() const { return 0; }
  virtual void get_params(std::span<double>) const {}
  virtual void set_params(std::span<const double>) {}
  virtual void init_params(Rng&) {}
  // returns log|det dF/dx|
  virtual double forward(std::span<const double> x,
                         std::span<double> y) const = 0;
  // returns log|det dF^-1/dy|
  virtual double inverse(std::span<const double> y,
                         std::span<double> x) const = 0;
  virtual void backprop_forward(std::span<const double> x,
                                std::span<const double> dy, double dlogdet,
                                std::span<double> dx,
                                std::span<double> pgrad) const = 0;
  virtual void backprop_inverse(std::span<const double> y,
                                std::span<const double> dxcot,
                                double dlogdet_inv, std::span<double> dycot,
                                std::span<double> pgrad) const = 0;
  virtual nlohmann::json spec() const = 0;
  virtual std::unique_ptr<FlowLayer> clone() const = 0;
};

namespace detail {

inline bool all_zero(std::span<const double> v) {
  for (double x : v)
    if (x != 0.0) return false;
  return true;
}

// Per-coordinate monotone spline transform shared by the coupling and
// elementwise layers. `raw` is the coordinate's parameter block.
struct SplineCoord {
  int bins;
  double bound;    // tail bound B (ignored for circular)
  bool circular;

  int raw_count() const {
    return circular ? spline::circular_param_count(bins)
                    : spline::rq_param_count(bins);
  }

  // forward value and logdet increment
  double fwd(std::span<const double> raw, double x, double& y) const {
    if (all_zero(raw)) {
      y = x;
      return 0.0;
    }
    if (circular) {
      double phase = raw[raw.size() - 1];
      auto ks = spline::build_knots(raw.first(raw.size() - 1), bins, kPi, true);
      double xw = wrap_angle(x);
      int b = spline::find_bin(ks, xw);
      spline::BinPartials p = spline::rq_bin_partials(
          xw, ks.xk[b], ks.xk[b + 1] - ks.xk[b], ks.yk[b],
          ks.yk[b + 1] - ks.yk[b], ks.delta[b], ks.delta[b + 1]);
      y = wrap_angle(p.y + phase);
      return std::log(p.dydx);
    }
    if (x <= -bound || x >= bound) {
      y = x;
      return 0.0;
    }
    auto ks = spline::build_knots(raw, bins, bound, false);
    int b = spline::find_bin(ks, x);
    spline::BinPartials p = spline::rq_bin_partials(
        x, ks.xk[b], ks.xk[b + 1] - ks.xk[b], ks.yk[b],
        ks.yk[b + 1] - ks.yk[b], ks.delta[b], ks.delta[b + 1]);
    y = p.y;
    return std::log(p.dydx);
  }

  double inv(std::span<const double> raw, double y, double& x) const {
    if (all_zero(raw)) {
      x = y;
      return 0.0;
    }
    if (circular) {
      double phase = raw[raw.size() - 1];
      auto ks = spline::build_knots(raw.first(raw.size() - 1), bins, kPi, true);
      double yw = wrap_angle(y - phase);
      int b = spline::find_bin_y(ks, yw);
      double wk = ks.xk[b + 1] - ks.xk[b], hk = ks.yk[b + 1] - ks.yk[b];
      x = spline::rq_bin_inverse(yw, ks.xk[b], wk, ks.yk[b], hk, ks.delta[b],
                                 ks.delta[b + 1]);
      spline::BinPartials p = spline::rq_bin_partials(
          x, ks.xk[b], wk, ks.yk[b], hk, ks.delta[b], ks.delta[b + 1]);
      x = wrap_angle(x);
      return -std::log(p.dydx);
    }
    if (y <= -bound || y >= bound) {
      x = y;
      return 0.0;
    }
    auto ks = spline::build_knots(raw, bins, bound, false);
    int b = spline::find_bin_y(ks, y);
    double wk = ks.xk[b + 1] - ks.xk[b], hk = ks.yk[b + 1] - ks.yk[b];
    x = spline::rq_bin_inverse(y, ks.xk[b], wk, ks.yk[b], hk, ks.delta[b],
                               ks.delta[b + 1]);
    spline::BinPartials p = spline::rq_bin_partials(
        x, ks.xk[b], wk, ks.yk[b], hk, ks.delta[b], ks.delta[b + 1]);
    return -std::log(p.dydx);
  }

  // reverse-mode through the forward map; accumulates into draw, returns dL/dx
  double bwd_fwd(std::span<const double> raw, double x, double gy, double gld,
                 std::span<double> draw) const {
    double xe = x;
    std::span<const double> knot_raw = raw;
    if (circular) {
      knot_raw = raw.first(raw.size() - 1);
      xe = wrap_angle(x);
    } else if (x <= -bound || x >= bound) {
      return gy;
    }
    auto ks = spline::build_knots(knot_raw, bins, circular ? kPi : bound,
                                  circular);
    int b = spline::find_bin(ks, xe);
    double wk = ks.xk[b + 1] - ks.xk[b], hk = ks.yk[b + 1] - ks.yk[b];
    spline::BinPartials p = spline::rq_bin_partials(
        xe, ks.xk[b], wk, ks.yk[b], hk, ks.delta[b], ks.delta[b + 1]);
    double inv_fp = 1.0 / p.dydx;
    double dx = gy * p.dydx + gld * p.ddydx[0] * inv_fp;
    double db[7];
    for (int j = 1; j < 7; ++j)
      db[j] = gy * p.dy[j] + gld * p.ddydx[j] * inv_fp;
    spline::knots_backward(ks, knot_raw, b, db[1], db[2], db[3], db[4], db[5],
                           db[6], draw, circular);
    if (circular) draw[raw.size() - 1] += gy;  // phase
    return dx;
  }

  // reverse-mode through the inverse map; accumulates into draw, returns dL/dy
  double bwd_inv(std::span<const double> raw, double y, double gx, double gld,
                 std::span<double> draw) const {
    double ye = y;
    std::span<const double> knot_raw = raw;
    if (circular) {
      knot_raw = raw.first(raw.size() - 1);
      ye = wrap_angle(y - raw[raw.size() - 1]);
    } else if (y <= -bound || y >= bound) {
      return gx;
    }
    auto ks = spline::build_knots(knot_raw, bins, circular ? kPi : bound,
                                  circular);
    int b = spline::find_bin_y(ks, ye);
    double wk = ks.xk[b + 1] - ks.xk[b], hk = ks.yk[b + 1] - ks.yk[b];
    double x = spline::rq_bin_inverse(ye, ks.xk[b], wk, ks.yk[b], hk,
                                      ks.delta[b], ks.delta[b + 1]);
    spline::BinPartials p = spline::rq_bin_partials(
        x, ks.xk[b], wk, ks.yk[b], hk, ks.delta[b], ks.delta[b + 1]);
    double fp = p.dydx, inv_fp = 1.0 / fp;
    double fpp = p.ddydx[0];
    double dy = gx * inv_fp - gld * fpp * inv_fp * inv_fp;
    double db[7];
    for (int j = 1; j < 7; ++j) {
      db[j] = -gx * p.dy[j] * inv_fp +
              gld * (fpp * p.dy[j] * inv_fp * inv_fp - p.ddydx[j] * inv_fp);
    }
    spline::knots_backward(ks, knot_raw, b, db[1], db[2], db[3], db[4], db[5],
                           db[6], draw, circular);
    if (circular) draw[raw.size() - 1] -= dy;  // phase enters as y - phase
    return dy;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Fixed permutation (topology-preserving)
// ---------------------------------------------------------------------------

class PermuteLayer final : public FlowLayer {
 public:
  explicit PermuteLayer(std::vector<int> perm) : perm_(std::move(perm)) {}

  std::string kind() const override { return "permute"; }
  int dim() const override { return static_cast<int>(perm_.size()); }

  double forward(std::span<const double> x, std::span<double> y) const override {
    for (std::size_t i = 0; i < perm_.size(); ++i) y[i] = x[perm_[i]];
    return 0.0;
  }
  double inverse(std::span<const double> y, std::span<double> x) const override {
    for (std::size_t i = 0; i < perm_.size(); ++i) x[perm_[i]] = y[i];
    return 0.0;
  }
  void backprop_forward(std::span<const double>, std::span<const double> dy,
                        double, std::span<double> dx,
                        std::span<double>) const override {
    for (std::size_t i = 0; i < perm_.size(); ++i) dx[perm_[i]] = dy[i];
  }
  void backprop_inverse(std::span<const double>, std::span<const double> dxcot,
                        double, std::span<double> dycot,
                        std::span<double>) const override {
    for (std::size_t i = 0; i < perm_.size(); ++i) dycot[i] = dxcot[perm_[i]];
  }
  nlohmann::json spec() const override {
    return {{"kind", "permute"}, {"perm", perm_}};
  }
  std::unique_ptr<FlowLayer> clone() const override {
    return std::make_unique<PermuteLayer>(perm_);
  }

 private:
  std::vector<int> perm_;
};

// ---------------------------------------------------------------------------
// Elementwise affine y = x * exp(s) + t on unbounded coordinates
// (circular coordinates pass through untouched).
// ---------------------------------------------------------------------------

class ElementwiseAffineLayer final : public FlowLayer {
 public:
  explicit ElementwiseAffineLayer(DomainTopology topo)
      : topo_(std::move(topo)) {
    for (int i = 0; i < topo_.dim(); ++i)
      if (!topo_.is_circular(i)) active_.push_back(i);
    params_.assign(2 * active_.size(), 0.0);
  }

  std::string kind() const override { return "elem_affine"; }
  int dim() const override { return topo_.dim(); }
  int param_count() const override { return static_cast<int>(params_.size()); }
  void get_params(std::span<double> out) const override {
    std::copy(params_.begin(), params_.end(), out.begin());
  }
  void set_params(std::span<const double> in) override {
    params_.assign(in.begin(), in.end());
  }

  double forward(std::span<const double> x, std::span<double> y) const override {
    std::copy(x.begin(), x.end(), y.begin());
    double ld = 0.0;
    for (std::size_t k = 0; k < active_.size(); ++k) {
      double s = params_[2 * k], t = params_[2 * k + 1];
      y[active_[k]] = x[active_[k]] * std::exp(s) + t;
      ld += s;
    }
    return ld;
  }
  double inverse(std::span<const double> y, std::span<double> x) const override {
    std::copy(y.begin(), y.end(), x.begin());
    double ld = 0.0;
    for (std::size_t k = 0; k < active_.size(); ++k) {
      double s = params_[2 * k], t = params_[2 * k + 1];
      x[active_[k]] = (y[active_[k]] - t) * std::exp(-s);
      ld -= s;
    }
    return ld;
  }
  void backprop_forward(std::span<const double> x, std::span<const double> dy,
                        double dld, std::span<double> dx,
                        std::span<double> pg) const override {
    std::copy(dy.begin(), dy.end(), dx.begin());
    for (std::size_t k = 0; k < active_.size(); ++k) {
      int i = active_[k];
      double es = std::exp(params_[2 * k]);
      dx[i] = dy[i] * es;
      pg[2 * k] += dy[i] * x[i] * es + dld;
      pg[2 * k + 1] += dy[i];
    }
  }
  void backprop_inverse(std::span<const double> y, std::span<const double> dxc,
                        double dld, std::span<double> dyc,
                        std::span<double> pg) const override {
    std::copy(dxc.begin(), dxc.end(), dyc.begin());
    for (std::size_t k = 0; k < active_.size(); ++k) {
      int i = active_[k];
      double s = params_[2 * k], t = params_[2 * k + 1];
      double ems = std::exp(-s);
      double xv = (y[i] - t) * ems;
      dyc[i] = dxc[i] * ems;
      pg[2 * k] += -dxc[i] * xv - dld;
      pg[2 * k + 1] += -dxc[i] * ems;
    }
  }
  nlohmann::json spec() const override { return {{"kind", "elem_affine"}}; }
  std::unique_ptr<FlowLayer> clone() const override {
    auto c = std::make_unique<ElementwiseAffineLayer>(topo_);
    c->params_ = params_;
    return c;
  }

 private:
  DomainTopology topo_;
  std::vector<int> active_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Elementwise spline with directly trainable knots (no conditioner);
// the workhorse for one-dimensional problems.
// ---------------------------------------------------------------------------

class ElementwiseSplineLayer final : public FlowLayer {
 public:
  ElementwiseSplineLayer(DomainTopology topo, int bins,
                         std::vector<double> tails)
      : topo_(std::move(topo)), bins_(bins), tails_(std::move(tails)) {
    if (bins_ < 2 || bins_ > spline::kMaxBins)
      throw ConfigError("spline bins out of range");
    if (static_cast<int>(tails_.size()) != topo_.dim())
      throw ConfigError("elem_spline: tails size mismatch");
    int count = 0;
    for (int i = 0; i < topo_.dim(); ++i) count += coord(i).raw_count();
    params_.assign(count, 0.0);
  }

  std::string kind() const override { return "elem_spline"; }
  int dim() const override { return topo_.dim(); }
  int param_count() const override { return static_cast<int>(params_.size()); }
  void get_params(std::span<double> out) const override {
    std::copy(params_.begin(), params_.end(), out.begin());
  }
  void set_params(std::span<const double> in) override {
    params_.assign(in.begin(), in.end());
  }

  double forward(std::span<const double> x, std::span<double> y) const override {
    double ld = 0.0;
    int off = 0;
    for (int i = 0; i < dim(); ++i) {
      auto sc = coord(i);
      int n = sc.raw_count();
      ld += sc.fwd({params_.data() + off, (std::size_t)n}, x[i], y[i]);
      off += n;
    }
    return ld;
  }
  double inverse(std::span<const double> y, std::span<double> x) const override {
    double ld = 0.0;
    int off = 0;
    for (int i = 0; i < dim(); ++i) {
      auto sc = coord(i);
      int n = sc.raw_count();
      ld += sc.inv({params_.data() + off, (std::size_t)n}, y[i], x[i]);
      off += n;
    }
    return ld;
  }
  void backprop_forward(std::span<const double> x, std::span<const double> dy,
                        double dld, std::span<double> dx,
                        std::span<double> pg) const override {
    int off = 0;
    for (int i = 0; i < dim(); ++i) {
      auto sc = coord(i);
      int n = sc.raw_count();
      dx[i] = sc.bwd_fwd({params_.data() + off, (std::size_t)n}, x[i], dy[i],
                         dld, pg.subspan(off, n));
      off += n;
    }
  }
  void backprop_inverse(std::span<const double> y, std::span<const double> dxc,
                        double dld, std::span<double> dyc,
                        std::span<double> pg) const override {
    int off = 0;
    for (int i = 0; i < dim(); ++i) {
      auto sc = coord(i);
      int n = sc.raw_count();
      dyc[i] = sc.bwd_inv({params_.data() + off, (std::size_t)n}, y[i], dxc[i],
                          dld, pg.subspan(off, n));
      off += n;
    }
  }
  nlohmann::json spec() const override {
    return {{"kind", "elem_spline"}, {"bins", bins_}, {"tails", tails_}};
  }
  std::unique_ptr<FlowLayer> clone() const override {
    auto c = std::make_unique<ElementwiseSplineLayer>(topo_, bins_, tails_);
    c->params_ = params_;
    return c;
  }

 private:
  detail::SplineCoord coord(int i) const {
    return {bins_, tails_[i], topo_.is_circular(i)};
  }
  DomainTopology topo_;
  int bins_;
  std::vector<double> tails_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Coupling layer. Coordinates with mask=1 are transformed; the rest condition
// them through the network. Transformed circular coordinates get circular
// splines, unbounded ones rational-quadratic splines with linear tails (or a
// plain affine map when transform == "affine"). Circular conditioner inputs
// are embedded as (cos, sin).
// ---------------------------------------------------------------------------

class CouplingLayer final : public FlowLayer {
 public:
  CouplingLayer(DomainTopology topo, std::vector<std::uint8_t> mask,
                std::string transform, int bins, std::vector<double> tails,
                std::vector<int> hidden)
      : topo_(std::move(topo)),
        mask_(std::move(mask)),
        transform_(std::move(transform)),
        bins_(bins),
        tails_(std::move(tails)),
        hidden_(std::move(hidden)) {
    if (static_cast<int>(mask_.size()) != topo_.dim())
      throw ConfigError("coupling: mask size mismatch");
    if (static_cast<int>(tails_.size()) != topo_.dim())
      throw ConfigError("coupling: tails size mismatch");
    int in_features = 0;
    for (int i = 0; i < topo_.dim(); ++i) {
      if (mask_[i]) {
        transformed_.push_back(i);
      } else {
        passthrough_.push_back(i);
        in_features += topo_.is_circular(i) ? 2 : 1;
      }
    }
    if (transformed_.empty() || passthrough_.empty())
      throw ConfigError("coupling: mask must split coordinates into two "
                        "nonempty sets");
    if (transform_ == "affine") {
      for (int i : transformed_)
        if (topo_.is_circular(i))
          throw ConfigError("affine coupling cannot act on a circular "
                            "coordinate");
    } else if (transform_ != "spline") {
      throw ConfigError("coupling: unknown transform " + transform_);
    }
    int out = 0;
    for (int i : transformed_) out += block_size(i);
    cond_ = Conditioner(in_features, hidden_, out);
  }

  std::string kind() const override { return "coupling"; }
  int dim() const override { return topo_.dim(); }
  int param_count() const override { return cond_.param_count(); }
  void get_params(std::span<double> out) const override {
    auto p = cond_.params();
    std::copy(p.begin(), p.end(), out.begin());
  }
  void set_params(std::span<const double> in) override {
    auto p = cond_.params();
    std::copy(in.begin(), in.end(), p.begin());
  }
  void init_params(Rng& rng) override { cond_.init_weights(rng); }

  double forward(std::span<const double> x, std::span<double> y) const override {
    thread_local std::vector<double> emb, raw;
    embed(x, emb);
    raw.assign(cond_.out_features(), 0.0);
    cond_.forward(emb, raw);
    for (int i : passthrough_) y[i] = x[i];
    double ld = 0.0;
    int off = 0;
    for (int i : transformed_) {
      int n = block_size(i);
      std::span<const double> block(raw.data() + off, n);
      if (transform_ == "affine") {
        double s = block[0], t = block[1];
        y[i] = x[i] * std::exp(s) + t;
        ld += s;
      } else {
        ld += coord(i).fwd(block, x[i], y[i]);
      }
      off += n;
    }
    return ld;
  }

  double inverse(std::span<const double> y, std::span<double> x) const override {
    thread_local std::vector<double> emb, raw;
    for (int i : passthrough_) x[i] = y[i];
    embed(y, emb);  // passthrough coords identical in x and y
    raw.assign(cond_.out_features(), 0.0);
    cond_.forward(emb, raw);
    double ld = 0.0;
    int off = 0;
    for (int i : transformed_) {
      int n = block_size(i);
      std::span<const double> block(raw.data() + off, n);
      if (transform_ == "affine") {
        double s = block[0], t = block[1];
        x[i] = (y[i] - t) * std::exp(-s);
        ld -= s;
      } else {
        ld += coord(i).inv(block, y[i], x[i]);
      }
      off += n;
    }
    return ld;
  }

  void backprop_forward(std::span<const double> x, std::span<const double> dy,
                        double dld, std::span<double> dx,
                        std::span<double> pg) const override {
    thread_local std::vector<double> emb, raw, draw, demb;
    embed(x, emb);
    raw.assign(cond_.out_features(), 0.0);
    cond_.forward(emb, raw);
    draw.assign(raw.size(), 0.0);
    for (int i : passthrough_) dx[i] = dy[i];
    int off = 0;
    for (int i : transformed_) {
      int n = block_size(i);
      std::span<const double> block(raw.data() + off, n);
      std::span<double> dblock(draw.data() + off, n);
      if (transform_ == "affine") {
        double es = std::exp(block[0]);
        dx[i] = dy[i] * es;
        dblock[0] += dy[i] * x[i] * es + dld;
        dblock[1] += dy[i];
      } else {
        dx[i] = coord(i).bwd_fwd(block, x[i], dy[i], dld, dblock);
      }
      off += n;
    }
    demb.assign(emb.size(), 0.0);
    cond_.backward(emb, draw, demb, pg);
    unembed_grad(x, demb, dx);
  }

  void backprop_inverse(std::span<const double> y, std::span<const double> dxc,
                        double dld, std::span<double> dyc,
                        std::span<double> pg) const override {
    thread_local std::vector<double> emb, raw, draw, demb;
    embed(y, emb);
    raw.assign(cond_.out_features(), 0.0);
    cond_.forward(emb, raw);
    draw.assign(raw.size(), 0.0);
    for (int i : passthrough_) dyc[i] = dxc[i];
    int off = 0;
    for (int i : transformed_) {
      int n = block_size(i);
      std::span<const double> block(raw.data() + off, n);
      std::span<double> dblock(draw.data() + off, n);
      if (transform_ == "affine") {
        double s = block[0], t = block[1];
        double ems = std::exp(-s);
        double xv = (y[i] - t) * ems;
        dyc[i] = dxc[i] * ems;
        dblock[0] += -dxc[i] * xv - dld;
        dblock[1] += -dxc[i] * ems;
      } else {
        dyc[i] = coord(i).bwd_inv(block, y[i], dxc[i], dld, dblock);
      }
      off += n;
    }
    demb.assign(emb.size(), 0.0);
    cond_.backward(emb, draw, demb, pg);
    unembed_grad(y, demb, dyc);
  }

  nlohmann::json spec() const override {
    return {{"kind", "coupling"},
            {"mask", std::vector<int>(mask_.begin(), mask_.end())},
            {"transform", transform_},
            {"bins", bins_},
            {"tails", tails_},
            {"hidden", hidden_}};
  }
  std::unique_ptr<FlowLayer> clone() const override {
    auto c = std::make_unique<CouplingLayer>(
        topo_, mask_, transform_, bins_, tails_, hidden_);
    c->cond_ = cond_;
    return c;
  }

 private:
  int block_size(int coord_index) const {
    if (transform_ == "affine") return 2;
    return topo_.is_circular(coord_index)
               ? spline::circular_param_count(bins_)
               : spline::rq_param_count(bins_);
  }
  detail::SplineCoord coord(int i) const {
    return {bins_, tails_[i], topo_.is_circular(i)};
  }
  void embed(std::span<const double> x, std::vector<double>& emb) const {
    emb.clear();
    for (int i : passthrough_) {
      if (topo_.is_circular(i)) {
        emb.push_back(std::cos(x[i]));
        emb.push_back(std::sin(x[i]));
      } else {
        emb.push_back(x[i]);
      }
    }
  }
  // chain conditioner-input cotangents back onto the passthrough coordinates
  void unembed_grad(std::span<const double> x, std::span<const double> demb,
                    std::span<double> dx) const {
    std::size_t f = 0;
    for (int i : passthrough_) {
      if (topo_.is_circular(i)) {
        dx[i] += -std::sin(x[i]) * demb[f] + std::cos(x[i]) * demb[f + 1];
        f += 2;
      } else {
        dx[i] += demb[f];
        f += 1;
      }
    }
  }

  DomainTopology topo_;
  std::vector<std::uint8_t> mask_;
  std::string transform_;
  int bins_;
  std::vector<double> tails_;
  std::vector<int> hidden_;
  std::vector<int> transformed_, passthrough_;
  Conditioner cond_;
};

}  // namespace jflow
