#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "jflow/common.hpp"
#include "jflow/topology.hpp"

namespace jflow {

// Weighted particle set: the universal data carrier. Weights are kept in log
// space throughout; normalization happens on demand with a max shift.
struct Ensemble {
  int dim = 0;
  std::vector<double> positions;    // row-major n x dim
  std::vector<double> log_weights;  // unnormalized
  DomainTopology topology;
  std::string source;        // provenance tag
  std::uint64_t seed = 0;    // seed lineage

  std::size_t size() const { return log_weights.size(); }

  std::span<const double> point(std::size_t i) const {
    return {positions.data() + i * dim, static_cast<std::size_t>(dim)};
  }
  std::span<double> point(std::size_t i) {
    return {positions.data() + i * dim, static_cast<std::size_t>(dim)};
  }

  static Ensemble uniform(int dim, std::size_t n, DomainTopology topo,
                          std::string source_tag = "", std::uint64_t seed = 0) {
    Ensemble e;
    e.dim = dim;
    e.positions.assign(n * dim, 0.0);
    e.log_weights.assign(n, 0.0);
    e.topology = std::move(topo);
    e.source = std::move(source_tag);
    e.seed = seed;
    return e;
  }

  // normalized weights alpha_i with sum 1
  std::vector<double> normalized_weights() const {
    std::vector<double> w(size());
    double lse = logsumexp(log_weights);
    if (!std::isfinite(lse))
      throw NumericalError("ensemble: weights do not normalize");
    for (std::size_t i = 0; i < size(); ++i)
      w[i] = std::exp(log_weights[i] - lse);
    return w;
  }
};

// ESS(mu) = (sum alpha)^2 / (N sum alpha^2) in (0, 1], computed in log space.
inline double ess(const Ensemble& e) {
  if (e.size() == 0) throw ConfigError("ess: empty ensemble");
  double l1 = logsumexp(e.log_weights);
  std::vector<double> twice(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) twice[i] = 2.0 * e.log_weights[i];
  double l2 = logsumexp(twice);
  return std::exp(2.0 * l1 - l2 - std::log(static_cast<double>(e.size())));
}

// ESS of a raw log-weight vector (used for per-step CESS).
inline double ess_of_log_weights(std::span<const double> lw) {
  if (lw.empty()) throw ConfigError("ess: empty weight vector");
  double l1 = logsumexp(lw);
  std::vector<double> twice(lw.size());
  for (std::size_t i = 0; i < lw.size(); ++i) twice[i] = 2.0 * lw[i];
  double l2 = logsumexp(twice);
  return std::exp(2.0 * l1 - l2 - std::log(static_cast<double>(lw.size())));
}

// Low-variance systematic resampling; expected copy count of particle i is
// exactly m * alpha_i. Output has uniform weights.
inline Ensemble resample_systematic(const Ensemble& e, std::size_t m,
                                    Rng& rng) {
  if (m == 0) throw ConfigError("resample: m must be positive");
  auto alpha = e.normalized_weights();
  double total = 0.0;
  for (double a : alpha) total += a;
  if (!(total > 0.0)) throw NumericalError("resample: all-zero weights");

  Ensemble out = Ensemble::uniform(e.dim, m, e.topology, e.source, e.seed);
  double u = rng.uniform() / static_cast<double>(m);
  double cum = alpha[0];
  std::size_t i = 0;
  for (std::size_t j = 0; j < m; ++j) {
    double target = u + static_cast<double>(j) / static_cast<double>(m);
    while (cum < target && i + 1 < e.size()) cum += alpha[++i];
    std::memcpy(out.positions.data() + j * e.dim, e.positions.data() + i * e.dim,
                sizeof(double) * e.dim);
  }
  return out;
}

// Self-normalized estimator with delta-method standard error.
struct Estimate {
  double value = 0.0;
  double standard_error = 0.0;
};

inline Estimate weighted_expectation(
    const Ensemble& e,
    const std::function<double(std::span<const double>)>& observable) {
  if (e.size() < 2) throw ConfigError("weighted_expectation: need n >= 2");
  auto alpha = e.normalized_weights();
  double mean = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    mean += alpha[i] * observable(e.point(i));
  double var = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    double d = observable(e.point(i)) - mean;
    var += alpha[i] * alpha[i] * d * d;
  }
  return {mean, std::sqrt(var)};
}

// ---------------------------------------------------------------------------
// Persistence: binary container (magic "JFEN1") and a JSON debug twin.
// Binary layout: magic, u32 dim, u64 n, u32 n_circular, u32 circular indices,
// u32 source length, source bytes, u64 seed, positions, log-weights, all
// little-endian 64-bit floats.
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void read_pod(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace detail

inline void save_ensemble(const Ensemble& e, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("JFEN1", 5);
  detail::write_pod(os, static_cast<std::uint32_t>(e.dim));
  detail::write_pod(os, static_cast<std::uint64_t>(e.size()));
  auto circ = e.topology.circular_indices();
  detail::write_pod(os, static_cast<std::uint32_t>(circ.size()));
  for (int i : circ) detail::write_pod(os, static_cast<std::uint32_t>(i));
  detail::write_pod(os, static_cast<std::uint32_t>(e.source.size()));
  os.write(e.source.data(), e.source.size());
  detail::write_pod(os, e.seed);
  os.write(reinterpret_cast<const char*>(e.positions.data()),
           sizeof(double) * e.positions.size());
  os.write(reinterpret_cast<const char*>(e.log_weights.data()),
           sizeof(double) * e.log_weights.size());
  if (!os) throw IoError("write failed: " + path);
}

inline Ensemble load_ensemble(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "JFEN1", 5) != 0)
    throw IoError("bad ensemble magic in " + path);
  std::uint32_t dim = 0, ncirc = 0, slen = 0;
  std::uint64_t n = 0;
  detail::read_pod(is, dim);
  detail::read_pod(is, n);
  detail::read_pod(is, ncirc);
  std::vector<int> circ(ncirc);
  for (auto& c : circ) {
    std::uint32_t v;
    detail::read_pod(is, v);
    c = static_cast<int>(v);
  }
  detail::read_pod(is, slen);
  std::string source(slen, '\0');
  is.read(source.data(), slen);
  Ensemble e;
  e.dim = static_cast<int>(dim);
  e.topology = DomainTopology(e.dim, circ);
  e.source = source;
  detail::read_pod(is, e.seed);
  e.positions.resize(n * dim);
  e.log_weights.resize(n);
  is.read(reinterpret_cast<char*>(e.positions.data()),
          sizeof(double) * e.positions.size());
  is.read(reinterpret_cast<char*>(e.log_weights.data()),
          sizeof(double) * e.log_weights.size());
  if (!is) throw IoError("truncated ensemble file: " + path);
  return e;
}

inline nlohmann::json ensemble_to_json(const Ensemble& e) {
  nlohmann::json j;
  j["format"] = "JFEN1";
  j["dim"] = e.dim;
  j["n"] = e.size();
  j["circular"] = e.topology.circular_indices();
  j["source"] = e.source;
  j["seed"] = e.seed;
  j["positions"] = e.positions;
  j["log_weights"] = e.log_weights;
  return j;
}

inline Ensemble ensemble_from_json(const nlohmann::json& j) {
  Ensemble e;
  e.dim = j.at("dim").get<int>();
  e.topology =
      DomainTopology(e.dim, j.at("circular").get<std::vector<int>>());
  e.source = j.value("source", "");
  e.seed = j.value("seed", std::uint64_t{0});
  e.positions = j.at("positions").get<std::vector<double>>();
  e.log_weights = j.at("log_weights").get<std::vector<double>>();
  if (e.positions.size() != e.log_weights.size() * e.dim)
    throw IoError("ensemble json: inconsistent sizes");
  return e;
}

}  // namespace jflow
