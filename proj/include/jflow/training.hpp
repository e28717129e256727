#pragma once

#include <fstream>
#include <optional>

#include "jflow/reweight.hpp"

namespace jflow {

// ---------------------------------------------------------------------------
// Configuration for one Jeffreys training step
// ---------------------------------------------------------------------------

struct JeffreysConfig {
  double theta = 0.5;                 // lambda0 = theta Var(mu0), lambda1 = (1-theta) Var(mu1)
  std::optional<double> renyi_alpha;  // absent = KL
  int batch = 1024;
  int epochs = 200;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  bool cosine_decay = true;
  double grad_clip = 1e3;
  double early_stop_cess = 1.0;  // stop once step CESS reaches this; 1 = off
  double nonfinite_abort_frac = 0.01;
  FlowArch arch;

  void validate() const {
    if (theta < 0.0 || theta > 1.0)
      throw ConfigError("theta must lie in [0,1]");
    if (renyi_alpha && (*renyi_alpha <= 0.0 || *renyi_alpha == 1.0))
      throw ConfigError("renyi alpha must be positive and != 1");
    if (batch < 1 || epochs < 1) throw ConfigError("batch/epochs must be >= 1");
  }
};

struct EpochRow {
  int epoch = 0;
  double reverse = 0.0;
  double forward = 0.0;
  double combined = 0.0;
  double grad_norm = 0.0;
};

struct LossReport {
  double lambda0 = 0.0, lambda1 = 0.0;
  double reverse = 0.0;   // estimates up to the omitted normalizer constants
  double forward = 0.0;
  double combined = 0.0;
  std::size_t nonfinite_samples = 0;
  std::size_t skipped_steps = 0;
  bool early_stopped = false;
  std::vector<EpochRow> trace;
};

inline void write_loss_csv(const LossReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "epoch,reverse,forward,combined,grad_norm\n";
  for (const auto& row : r.trace)
    os << row.epoch << ',' << row.reverse << ',' << row.forward << ','
       << row.combined << ',' << row.grad_norm << '\n';
}

// trace of the empirical covariance
inline double variance_trace(const Ensemble& e) {
  std::vector<double> mean(e.dim, 0.0);
  for (std::size_t i = 0; i < e.size(); ++i) {
    auto x = e.point(i);
    for (int k = 0; k < e.dim; ++k) mean[k] += x[k];
  }
  for (auto& m : mean) m /= static_cast<double>(e.size());
  double tr = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    auto x = e.point(i);
    for (int k = 0; k < e.dim; ++k) {
      double d = x[k] - mean[k];
      tr += d * d;
    }
  }
  return tr / static_cast<double>(e.size());
}

// ---------------------------------------------------------------------------
// Monte Carlo loss terms. Values are divergences up to additive normalizer
// constants; gradients are exact for the sample estimate. Nonfinite samples
// are excluded from the mean and counted.
// ---------------------------------------------------------------------------

struct LossValue {
  double value = 0.0;
  std::size_t n_bad = 0;
};

namespace detail {

struct ChunkAccum {
  std::vector<std::vector<double>> grads;
  std::vector<double> values;
  std::vector<std::size_t> bad;

  ChunkAccum(std::size_t chunks, std::size_t params)
      : grads(chunks), values(chunks, 0.0), bad(chunks, 0) {
    for (auto& g : grads) g.assign(params, 0.0);
  }
  // deterministic chunk-order reduction
  void reduce(std::span<double> grad_out, double& value_out,
              std::size_t& bad_out) const {
    for (std::size_t c = 0; c < grads.size(); ++c) {
      for (std::size_t k = 0; k < grad_out.size(); ++k)
        grad_out[k] += grads[c][k];
      value_out += values[c];
      bad_out += bad[c];
    }
  }
};

}  // namespace detail

// E_{x~mu0}[U1(F(x)) - U0(x) - log|det dF(x)|] over the given batch; the
// scaled gradient (scale * d/dparams of the batch mean) is accumulated.
inline LossValue reverse_kl_loss(const Flow& f, const Ensemble& mu0,
                                 const Potential& u0, const Potential& u1,
                                 std::span<const std::size_t> batch,
                                 double scale, std::span<double> grad) {
  std::size_t n = batch.size();
  std::size_t chunk_size = 256;
  std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
  detail::ChunkAccum acc(n_chunks, grad.size());
  double inv_n = 1.0 / static_cast<double>(n);
  parallel_chunks(n, chunk_size, [&](std::size_t c, std::size_t lo,
                                     std::size_t hi) {
    std::vector<double> y(f.dim()), gy(f.dim()), dx(f.dim());
    for (std::size_t b = lo; b < hi; ++b) {
      auto x = mu0.point(batch[b]);
      double ld = f.forward(x, y);
      double e1 = u1.energy(y);
      double term = e1 - u0.energy(x) - ld;
      if (!std::isfinite(term)) {
        ++acc.bad[c];
        continue;
      }
      acc.values[c] += term;
      if (scale != 0.0) {
        u1.gradient(y, gy);
        for (auto& g : gy) g *= scale * inv_n;
        f.backprop_forward(x, gy, -scale * inv_n, dx, acc.grads[c]);
      }
    }
  });
  LossValue out;
  double sum = 0.0;
  acc.reduce(grad, sum, out.n_bad);
  out.value = sum / std::max<std::size_t>(1, n - out.n_bad);
  return out;
}

// E_{y~mu1}[U0(F^-1(y)) - U1(y) - log|det dF^-1(y)|] over the batch.
inline LossValue forward_kl_loss(const Flow& f, const Ensemble& mu1,
                                 const Potential& u0, const Potential& u1,
                                 std::span<const std::size_t> batch,
                                 double scale, std::span<double> grad) {
  std::size_t n = batch.size();
  std::size_t chunk_size = 256;
  std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
  detail::ChunkAccum acc(n_chunks, grad.size());
  double inv_n = 1.0 / static_cast<double>(n);
  parallel_chunks(n, chunk_size, [&](std::size_t c, std::size_t lo,
                                     std::size_t hi) {
    std::vector<double> x(f.dim()), gx(f.dim()), dy(f.dim());
    for (std::size_t b = lo; b < hi; ++b) {
      auto y = mu1.point(batch[b]);
      double ld = f.inverse(y, x);
      double term = u0.energy(x) - u1.energy(y) - ld;
      if (!std::isfinite(term)) {
        ++acc.bad[c];
        continue;
      }
      acc.values[c] += term;
      if (scale != 0.0) {
        u0.gradient(x, gx);
        for (auto& g : gx) g *= scale * inv_n;
        f.backprop_inverse(y, gx, -scale * inv_n, dy, acc.grads[c]);
      }
    }
  });
  LossValue out;
  double sum = 0.0;
  acc.reduce(grad, sum, out.n_bad);
  out.value = sum / std::max<std::size_t>(1, n - out.n_bad);
  return out;
}

// Renyi power-law variant: (1/(alpha-1)) log mean exp((alpha-1) l_i), where
// l_i is the same integrand as the matching KL estimator. Stabilized by a
// max shift; per-sample gradient weights are the normalized powers.
inline LossValue renyi_loss(const Flow& f, const Ensemble& mu,
                            const Potential& u0, const Potential& u1,
                            double alpha, bool reverse_direction,
                            std::span<const std::size_t> batch, double scale,
                            std::span<double> grad) {
  std::size_t n = batch.size();
  std::vector<double> ell(n, std::numeric_limits<double>::quiet_NaN());
  parallel_chunks(n, 256, [&](std::size_t, std::size_t lo, std::size_t hi) {
    std::vector<double> z(f.dim());
    for (std::size_t b = lo; b < hi; ++b) {
      auto p = mu.point(batch[b]);
      if (reverse_direction) {
        double ld = f.forward(p, z);
        ell[b] = u1.energy(z) - u0.energy(p) - ld;
      } else {
        double ld = f.inverse(p, z);
        ell[b] = u0.energy(z) - u1.energy(p) - ld;
      }
    }
  });
  double m = -std::numeric_limits<double>::infinity();
  std::size_t bad = 0;
  for (double l : ell)
    if (std::isfinite(l)) m = std::max(m, (alpha - 1.0) * l);
  double z = 0.0;
  std::vector<double> w(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(ell[i])) {
      ++bad;
      continue;
    }
    w[i] = std::exp((alpha - 1.0) * ell[i] - m);
    z += w[i];
  }
  if (!(z > 0.0)) throw NumericalError("renyi_loss: all samples nonfinite");
  for (auto& wi : w) wi /= z;
  double used = static_cast<double>(n - bad);
  double value = (m + std::log(z / used)) / (alpha - 1.0);

  std::size_t chunk_size = 256;
  std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
  detail::ChunkAccum acc(n_chunks, grad.size());
  parallel_chunks(scale == 0.0 ? 0 : n, chunk_size,
                  [&](std::size_t c, std::size_t lo, std::size_t hi) {
    std::vector<double> z2(f.dim()), gp(f.dim()), dump(f.dim());
    for (std::size_t b = lo; b < hi; ++b) {
      if (w[b] == 0.0) continue;
      auto p = mu.point(batch[b]);
      double ws = w[b] * scale;
      if (reverse_direction) {
        f.forward(p, z2);
        u1.gradient(z2, gp);
        for (auto& g : gp) g *= ws;
        f.backprop_forward(p, gp, -ws, dump, acc.grads[c]);
      } else {
        f.inverse(p, z2);
        u0.gradient(z2, gp);
        for (auto& g : gp) g *= ws;
        f.backprop_inverse(p, gp, -ws, dump, acc.grads[c]);
      }
    }
  });
  LossValue out;
  double unused = 0.0;
  acc.reduce(grad, unused, out.n_bad);
  out.n_bad = bad;
  out.value = value;
  return out;
}

// Combined objective lambda0 * reverse + lambda1 * forward on independent
// batches, with the lambdas supplied by the caller (frozen per step).
struct JeffreysTerms {
  double reverse = 0.0, forward = 0.0, combined = 0.0;
  std::size_t n_bad = 0;
};

inline JeffreysTerms jeffreys_loss(const Flow& f, const Ensemble& mu0,
                                   const Ensemble& mu1, const Potential& u0,
                                   const Potential& u1, double lambda0,
                                   double lambda1,
                                   const std::optional<double>& renyi_alpha,
                                   std::span<const std::size_t> batch0,
                                   std::span<const std::size_t> batch1,
                                   std::span<double> grad) {
  JeffreysTerms t;
  if (lambda0 > 0.0) {
    LossValue r =
        renyi_alpha
            ? renyi_loss(f, mu0, u0, u1, *renyi_alpha, true, batch0, lambda0,
                         grad)
            : reverse_kl_loss(f, mu0, u0, u1, batch0, lambda0, grad);
    t.reverse = r.value;
    t.n_bad += r.n_bad;
  }
  if (lambda1 > 0.0) {
    LossValue fw =
        renyi_alpha
            ? renyi_loss(f, mu1, u0, u1, *renyi_alpha, false, batch1, lambda1,
                         grad)
            : forward_kl_loss(f, mu1, u0, u1, batch1, lambda1, grad);
    t.forward = fw.value;
    t.n_bad += fw.n_bad;
  }
  t.combined = lambda0 * t.reverse + lambda1 * t.forward;
  return t;
}

// ---------------------------------------------------------------------------
// Adam with optional cosine step-size decay
// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(std::size_t n, double lr, double b1, double b2, double eps)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad,
            double lr_scale = 1.0) {
    ++t_;
    double c1 = 1.0 - std::pow(b1_, t_);
    double c2 = 1.0 - std::pow(b2_, t_);
    double lr = lr_ * lr_scale;
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

// ---------------------------------------------------------------------------
// train_flow: the single-step optimization producing (F, loss trace).
// Weighted inputs are systematically resampled to uniform before use; the
// lambda weights are frozen from the resampled ensembles.
// ---------------------------------------------------------------------------

struct TrainResult {
  Flow flow;
  LossReport report;
};

inline bool has_uniform_weights(const Ensemble& e) {
  for (double lw : e.log_weights)
    if (lw != e.log_weights[0]) return false;
  return true;
}

inline TrainResult train_flow(const Ensemble& mu0_in, const Ensemble& mu1_in,
                              const Potential& u0, const Potential& u1,
                              const JeffreysConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (mu0_in.size() == 0 || mu1_in.size() == 0)
    throw ConfigError("train_flow: empty ensemble");
  if (mu0_in.dim != u0.dim() || mu1_in.dim != u1.dim() ||
      u0.dim() != u1.dim())
    throw ConfigError("train_flow: dimension mismatch");

  Rng rng(seed_fanout(seed, "train"));
  Ensemble mu0 = has_uniform_weights(mu0_in)
                     ? mu0_in
                     : resample_systematic(mu0_in, mu0_in.size(), rng);
  Ensemble mu1 = has_uniform_weights(mu1_in)
                     ? mu1_in
                     : resample_systematic(mu1_in, mu1_in.size(), rng);

  LossReport report;
  report.lambda0 = cfg.theta * variance_trace(mu0);
  report.lambda1 = (1.0 - cfg.theta) * variance_trace(mu1);

  // tail bounds wide enough for both ensembles; uniform across unbounded
  // coordinates because permutation layers exchange slots
  int d = u0.dim();
  std::vector<double> tails(d, kPi);
  double widest = 1.0;
  for (const Ensemble* e : {&mu0, &mu1}) {
    for (int k = 0; k < d; ++k) {
      if (u0.topology().is_circular(k)) continue;
      double m = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < e->size(); ++i) m += e->point(i)[k];
      m /= static_cast<double>(e->size());
      for (std::size_t i = 0; i < e->size(); ++i) {
        double dx = e->point(i)[k] - m;
        s2 += dx * dx;
      }
      s2 /= static_cast<double>(e->size());
      widest = std::max(widest, std::fabs(m) +
                                    cfg.arch.tail_scale * std::sqrt(s2));
    }
  }
  for (int k = 0; k < d; ++k)
    if (!u0.topology().is_circular(k)) tails[k] = widest;

  Flow flow = build_flow(u0.topology(), cfg.arch, tails,
                         seed_fanout(seed, "train-arch"));
  auto params = flow.parameters();
  Adam adam(params.size(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

  std::vector<std::size_t> idx0(mu0.size()), idx1(mu1.size());
  std::iota(idx0.begin(), idx0.end(), 0);
  std::iota(idx1.begin(), idx1.end(), 0);

  std::size_t batch = static_cast<std::size_t>(cfg.batch);
  std::size_t steps_per_epoch =
      std::max<std::size_t>(1, std::min(mu0.size(), mu1.size()) / batch);
  std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<double> grad(params.size());

  int nonfinite_epochs = 0;
  std::size_t step_count = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(idx0);
    rng.shuffle(idx1);
    EpochRow row;
    row.epoch = epoch;
    std::size_t used_steps = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::span<const std::size_t> b0(
          idx0.data() + (s * batch) % std::max<std::size_t>(1, mu0.size() -
                                                                   batch + 1),
          std::min(batch, mu0.size()));
      std::span<const std::size_t> b1(
          idx1.data() + (s * batch) % std::max<std::size_t>(1, mu1.size() -
                                                                   batch + 1),
          std::min(batch, mu1.size()));
      std::fill(grad.begin(), grad.end(), 0.0);
      JeffreysTerms t =
          jeffreys_loss(flow, mu0, mu1, u0, u1, report.lambda0,
                        report.lambda1, cfg.renyi_alpha, b0, b1, grad);
      report.nonfinite_samples += t.n_bad;
      if (t.n_bad >
          cfg.nonfinite_abort_frac * static_cast<double>(b0.size() +
                                                         b1.size())) {
        ++report.skipped_steps;
        continue;
      }
      double gn = norm2(grad);
      if (!std::isfinite(gn)) {
        ++report.skipped_steps;
        continue;
      }
      if (gn > cfg.grad_clip)
        for (auto& g : grad) g *= cfg.grad_clip / gn;
      double lr_scale =
          cfg.cosine_decay
              ? 0.5 * (1.0 + std::cos(kPi * static_cast<double>(step_count) /
                                      static_cast<double>(total_steps)))
              : 1.0;
      adam.step(params, grad, lr_scale);
      flow.set_parameters(params);
      ++step_count;
      ++used_steps;
      row.reverse += t.reverse;
      row.forward += t.forward;
      row.combined += t.combined;
      row.grad_norm = gn;
    }
    if (used_steps > 0) {
      row.reverse /= used_steps;
      row.forward /= used_steps;
      row.combined /= used_steps;
      nonfinite_epochs = 0;
    } else {
      row.combined = std::numeric_limits<double>::quiet_NaN();
      ++nonfinite_epochs;
      if (nonfinite_epochs >= 3)
        throw NumericalError(
            "train_flow: loss nonfinite for 3 consecutive epochs (skipped " +
            std::to_string(report.skipped_steps) + " steps)");
    }
    report.trace.push_back(row);

    if (cfg.early_stop_cess < 1.0) {
      std::size_t m = std::min<std::size_t>(2048, mu0.size());
      Ensemble probe = Ensemble::uniform(mu0.dim, m, mu0.topology);
      for (std::size_t i = 0; i < m; ++i) {
        auto src = mu0.point(i * (mu0.size() / m));
        std::copy(src.begin(), src.end(), probe.point(i).begin());
      }
      if (cess(flow, probe, u0, u1) >= cfg.early_stop_cess) {
        report.early_stopped = true;
        break;
      }
    }
  }

  if (!report.trace.empty()) {
    report.reverse = report.trace.back().reverse;
    report.forward = report.trace.back().forward;
    report.combined = report.trace.back().combined;
  }
  return {std::move(flow), std::move(report)};
}

}  // namespace jflow
