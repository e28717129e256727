#pragma once

#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>

#include "jflow/flow.hpp"

namespace jflow {

// Composition of invertible layers; forward applies layers in order and sums
// log-Jacobians. Parameters are exposed as one flat vector; gradient tapes
// align with it.
class Flow {
 public:
  Flow() = default;
  explicit Flow(DomainTopology topo) : topo_(std::move(topo)) {}

  Flow(Flow&&) = default;
  Flow& operator=(Flow&&) = default;
  Flow(const Flow& other) : topo_(other.topo_) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Flow& operator=(const Flow& other) {
    if (this != &other) {
      topo_ = other.topo_;
      layers_.clear();
      for (const auto& l : other.layers_) layers_.push_back(l->clone());
    }
    return *this;
  }

  const DomainTopology& topology() const { return topo_; }
  int dim() const { return topo_.dim(); }
  std::size_t layer_count() const { return layers_.size(); }

  void add_layer(std::unique_ptr<FlowLayer> layer) {
    if (layer->dim() != dim())
      throw ConfigError("flow: layer dimension mismatch");
    layers_.push_back(std::move(layer));
  }

  int param_count() const {
    int n = 0;
    for (const auto& l : layers_) n += l->param_count();
    return n;
  }

  std::vector<double> parameters() const {
    std::vector<double> p(param_count());
    int off = 0;
    for (const auto& l : layers_) {
      int n = l->param_count();
      l->get_params({p.data() + off, (std::size_t)n});
      off += n;
    }
    return p;
  }

  void set_parameters(std::span<const double> p) {
    if (static_cast<int>(p.size()) != param_count())
      throw ConfigError("flow: parameter vector size mismatch");
    int off = 0;
    for (auto& l : layers_) {
      int n = l->param_count();
      l->set_params(p.subspan(off, n));
      off += n;
    }
  }

  void init_params(Rng& rng) {
    for (auto& l : layers_) l->init_params(rng);
  }

  // Scratch buffers are locals, not thread_local: a SubspaceLayer re-enters
  // Flow from inside a layer call.
  double forward(std::span<const double> x, std::span<double> y) const {
    std::vector<double> a(x.begin(), x.end()), b(x.size());
    double ld = 0.0;
    for (const auto& l : layers_) {
      ld += l->forward(a, b);
      a.swap(b);
    }
    std::copy(a.begin(), a.end(), y.begin());
    return ld;
  }

  double inverse(std::span<const double> y, std::span<double> x) const {
    std::vector<double> a(y.begin(), y.end()), b(y.size());
    double ld = 0.0;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      ld += (*it)->inverse(a, b);
      a.swap(b);
    }
    std::copy(a.begin(), a.end(), x.begin());
    return ld;
  }

  // Reverse-mode through the forward map. Writes dL/dx and accumulates
  // parameter gradients into `grad` (flat, aligned with parameters()).
  void backprop_forward(std::span<const double> x, std::span<const double> dy,
                        double dlogdet, std::span<double> dx,
                        std::span<double> grad) const {
    std::vector<double> stages, cot, cot_prev;
    std::size_t d = x.size();
    stages.resize((layers_.size() + 1) * d);
    std::copy(x.begin(), x.end(), stages.begin());
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      layers_[k]->forward({stages.data() + k * d, d},
                          {stages.data() + (k + 1) * d, d});
    }
    cot.assign(dy.begin(), dy.end());
    cot_prev.resize(d);
    int off = param_count();
    for (std::size_t k = layers_.size(); k-- > 0;) {
      off -= layers_[k]->param_count();
      std::fill(cot_prev.begin(), cot_prev.end(), 0.0);
      layers_[k]->backprop_forward(
          {stages.data() + k * d, d}, cot, dlogdet, cot_prev,
          grad.subspan(off, layers_[k]->param_count()));
      cot.swap(cot_prev);
    }
    std::copy(cot.begin(), cot.end(), dx.begin());
  }

  // Reverse-mode through the inverse map (cotangents on x = F^-1(y) and on
  // the inverse log-Jacobian).
  void backprop_inverse(std::span<const double> y,
                        std::span<const double> dxcot, double dlogdet_inv,
                        std::span<double> dycot,
                        std::span<double> grad) const {
    std::vector<double> stages, cot, cot_next;
    std::size_t d = y.size();
    std::size_t m = layers_.size();
    stages.resize((m + 1) * d);
    std::copy(y.begin(), y.end(), stages.begin() + m * d);
    for (std::size_t k = m; k-- > 0;) {
      layers_[k]->inverse({stages.data() + (k + 1) * d, d},
                          {stages.data() + k * d, d});
    }
    cot.assign(dxcot.begin(), dxcot.end());
    cot_next.resize(d);
    int off = 0;
    for (std::size_t k = 0; k < m; ++k) {
      std::fill(cot_next.begin(), cot_next.end(), 0.0);
      layers_[k]->backprop_inverse(
          {stages.data() + (k + 1) * d, d}, cot, dlogdet_inv, cot_next,
          grad.subspan(off, layers_[k]->param_count()));
      off += layers_[k]->param_count();
      cot.swap(cot_next);
    }
    std::copy(cot.begin(), cot.end(), dycot.begin());
  }

  nlohmann::json spec() const {
    nlohmann::json j;
    j["dim"] = dim();
    j["circular"] = topo_.circular_indices();
    j["layers"] = nlohmann::json::array();
    for (const auto& l : layers_) j["layers"].push_back(l->spec());
    return j;
  }

  const std::vector<std::unique_ptr<FlowLayer>>& layers() const {
    return layers_;
  }

 private:
  DomainTopology topo_;
  std::vector<std::unique_ptr<FlowLayer>> layers_;
};

// Applies an inner flow to the leading block of coordinates and the identity
// to the rest; used to lift a low-dimensional map into a larger space.
class SubspaceLayer final : public FlowLayer {
 public:
  SubspaceLayer(Flow inner, int full_dim)
      : inner_(std::move(inner)), full_dim_(full_dim) {
    if (inner_.dim() > full_dim_)
      throw ConfigError("subspace: inner flow larger than full space");
  }

  std::string kind() const override { return "subspace"; }
  int dim() const override { return full_dim_; }
  int param_count() const override { return inner_.param_count(); }
  void get_params(std::span<double> out) const override {
    auto p = inner_.parameters();
    std::copy(p.begin(), p.end(), out.begin());
  }
  void set_params(std::span<const double> in) override {
    inner_.set_parameters(in);
  }

  double forward(std::span<const double> x, std::span<double> y) const override {
    int n0 = inner_.dim();
    double ld = inner_.forward(x.first(n0), y.first(n0));
    std::copy(x.begin() + n0, x.end(), y.begin() + n0);
    return ld;
  }
  double inverse(std::span<const double> y, std::span<double> x) const override {
    int n0 = inner_.dim();
    double ld = inner_.inverse(y.first(n0), x.first(n0));
    std::copy(y.begin() + n0, y.end(), x.begin() + n0);
    return ld;
  }
  void backprop_forward(std::span<const double> x, std::span<const double> dy,
                        double dld, std::span<double> dx,
                        std::span<double> pg) const override {
    int n0 = inner_.dim();
    inner_.backprop_forward(x.first(n0), dy.first(n0), dld, dx.first(n0), pg);
    std::copy(dy.begin() + n0, dy.end(), dx.begin() + n0);
  }
  void backprop_inverse(std::span<const double> y, std::span<const double> dxc,
                        double dld, std::span<double> dyc,
                        std::span<double> pg) const override {
    int n0 = inner_.dim();
    inner_.backprop_inverse(y.first(n0), dxc.first(n0), dld, dyc.first(n0),
                            pg);
    std::copy(dxc.begin() + n0, dxc.end(), dyc.begin() + n0);
  }
  nlohmann::json spec() const override {
    return {{"kind", "subspace"},
            {"full_dim", full_dim_},
            {"inner", inner_.spec()}};
  }
  std::unique_ptr<FlowLayer> clone() const override {
    return std::make_unique<SubspaceLayer>(inner_, full_dim_);
  }
  const Flow& inner() const { return inner_; }

 private:
  Flow inner_;
  int full_dim_;
};

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

struct FlowArch {
  int layers = 4;
  std::vector<int> hidden = {64, 64};
  int bins = 8;
  std::string kind = "auto";  // auto | spline | affine
  double tail_scale = 5.0;    // bound = |mean| + tail_scale * std, per coord
  std::vector<double> tail_override;
  bool permute = true;
};

inline std::unique_ptr<FlowLayer> make_permutation(const DomainTopology& topo,
                                                   Rng& rng) {
  // shuffle circular and unbounded indices separately so every position keeps
  // its domain kind
  std::vector<int> circ, flat, perm(topo.dim());
  for (int i = 0; i < topo.dim(); ++i)
    (topo.is_circular(i) ? circ : flat).push_back(i);
  std::vector<int> circ_s = circ, flat_s = flat;
  rng.shuffle(circ_s);
  rng.shuffle(flat_s);
  for (std::size_t k = 0; k < circ.size(); ++k) perm[circ[k]] = circ_s[k];
  for (std::size_t k = 0; k < flat.size(); ++k) perm[flat[k]] = flat_s[k];
  return std::make_unique<PermuteLayer>(perm);
}

inline Flow build_flow(const DomainTopology& topo, const FlowArch& arch,
                       std::span<const double> tails, std::uint64_t seed) {
  Flow flow(topo);
  Rng rng(seed_fanout(seed, "flow-init"));
  int d = topo.dim();
  std::vector<double> tail_vec(tails.begin(), tails.end());
  if (!arch.tail_override.empty()) {
    if (static_cast<int>(arch.tail_override.size()) == 1)
      tail_vec.assign(d, arch.tail_override[0]);
    else
      tail_vec = arch.tail_override;
  }
  if (static_cast<int>(tail_vec.size()) != d)
    throw ConfigError("build_flow: tail bound per coordinate required");

  if (arch.kind == "affine" && d == 1) {
    flow.add_layer(std::make_unique<ElementwiseAffineLayer>(topo));
    return flow;
  }
  if (d == 1) {
    for (int l = 0; l < arch.layers; ++l) {
      if (l % 2 == 0 || topo.is_circular(0))
        flow.add_layer(std::make_unique<ElementwiseSplineLayer>(
            topo, arch.bins, tail_vec));
      else
        flow.add_layer(std::make_unique<ElementwiseAffineLayer>(topo));
    }
    flow.init_params(rng);
    return flow;
  }

  std::string transform = (arch.kind == "affine") ? "affine" : "spline";
  for (int l = 0; l < arch.layers; ++l) {
    std::vector<std::uint8_t> mask(d, 0);
    for (int i = 0; i < d; ++i) mask[i] = (i % 2 == l % 2) ? 1 : 0;
    flow.add_layer(std::make_unique<CouplingLayer>(
        topo, mask, transform, arch.bins, tail_vec, arch.hidden));
    if (arch.permute && l + 1 < arch.layers)
      flow.add_layer(make_permutation(topo, rng));
  }
  flow.init_params(rng);
  return flow;
}

// Spec operations: thin wrappers over the layer constructors.
inline Flow affine_coupling(const DomainTopology& topo,
                            std::vector<std::uint8_t> mask,
                            std::vector<int> hidden, std::uint64_t seed) {
  Flow flow(topo);
  std::vector<double> tails(topo.dim(), 1.0);
  flow.add_layer(std::make_unique<CouplingLayer>(topo, std::move(mask),
                                                 "affine", 2, tails, hidden));
  Rng rng(seed_fanout(seed, "flow-init"));
  flow.init_params(rng);
  return flow;
}

inline Flow rq_spline_coupling(const DomainTopology& topo,
                               std::vector<std::uint8_t> mask,
                               std::vector<int> hidden, int bins,
                               double tail_bound, std::uint64_t seed) {
  if (bins < 2) throw ConfigError("rq_spline_coupling: bins must be >= 2");
  if (!(tail_bound > 0.0))
    throw ConfigError("rq_spline_coupling: tail bound must be positive");
  Flow flow(topo);
  std::vector<double> tails(topo.dim(), tail_bound);
  flow.add_layer(std::make_unique<CouplingLayer>(topo, std::move(mask),
                                                 "spline", bins, tails, hidden));
  Rng rng(seed_fanout(seed, "flow-init"));
  flow.init_params(rng);
  return flow;
}

inline Flow circular_spline_coupling(const DomainTopology& topo,
                                     std::vector<std::uint8_t> mask,
                                     std::vector<int> hidden, int bins,
                                     std::uint64_t seed) {
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] && !topo.is_circular(static_cast<int>(i)))
      throw ConfigError(
          "circular_spline_coupling: transformed coordinate is not circular");
  Flow flow(topo);
  std::vector<double> tails(topo.dim(), kPi);
  flow.add_layer(std::make_unique<CouplingLayer>(topo, std::move(mask),
                                                 "spline", bins, tails, hidden));
  Rng rng(seed_fanout(seed, "flow-init"));
  flow.init_params(rng);
  return flow;
}

inline Flow compose(std::vector<Flow> parts) {
  if (parts.empty()) throw ConfigError("compose: empty list");
  Flow out(parts.front().topology());
  for (auto& p : parts) {
    if (!(p.topology() == out.topology()))
      throw ConfigError("compose: topology mismatch");
    for (const auto& l : p.layers()) out.add_layer(l->clone());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "JFCK1", u32 version, u32 spec length, spec JSON bytes,
// u64 parameter count, raw little-endian doubles. Round-trips are bit-exact.
// ---------------------------------------------------------------------------

inline std::unique_ptr<FlowLayer> layer_from_spec(const nlohmann::json& j,
                                                  const DomainTopology& topo);

inline Flow flow_from_spec(const nlohmann::json& j) {
  int d = j.at("dim").get<int>();
  DomainTopology topo(d, j.at("circular").get<std::vector<int>>());
  Flow flow(topo);
  for (const auto& lj : j.at("layers"))
    flow.add_layer(layer_from_spec(lj, topo));
  return flow;
}

inline std::unique_ptr<FlowLayer> layer_from_spec(const nlohmann::json& j,
                                                  const DomainTopology& topo) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "permute")
    return std::make_unique<PermuteLayer>(j.at("perm").get<std::vector<int>>());
  if (kind == "elem_affine")
    return std::make_unique<ElementwiseAffineLayer>(topo);
  if (kind == "elem_spline")
    return std::make_unique<ElementwiseSplineLayer>(
        topo, j.at("bins").get<int>(), j.at("tails").get<std::vector<double>>());
  if (kind == "coupling") {
    auto mask_int = j.at("mask").get<std::vector<int>>();
    std::vector<std::uint8_t> mask(mask_int.begin(), mask_int.end());
    return std::make_unique<CouplingLayer>(
        topo, mask, j.at("transform").get<std::string>(),
        j.at("bins").get<int>(), j.at("tails").get<std::vector<double>>(),
        j.at("hidden").get<std::vector<int>>());
  }
  if (kind == "subspace")
    return std::make_unique<SubspaceLayer>(flow_from_spec(j.at("inner")),
                                           j.at("full_dim").get<int>());
  throw IoError("unknown layer kind in checkpoint: " + kind);
}

inline void save_flow(const Flow& flow, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  std::string spec = flow.spec().dump();
  os.write("JFCK1", 5);
  std::uint32_t version = 1, len = static_cast<std::uint32_t>(spec.size());
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&len), 4);
  os.write(spec.data(), spec.size());
  auto params = flow.parameters();
  std::uint64_t n = params.size();
  os.write(reinterpret_cast<const char*>(&n), 8);
  os.write(reinterpret_cast<const char*>(params.data()), 8 * params.size());
  if (!os) throw IoError("write failed: " + path);
}

inline Flow load_flow(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "JFCK1", 5) != 0)
    throw IoError("bad checkpoint magic in " + path);
  std::uint32_t version = 0, len = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&len), 4);
  if (version != 1) throw IoError("unsupported checkpoint version");
  std::string spec(len, '\0');
  is.read(spec.data(), len);
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), 8);
  std::vector<double> params(n);
  is.read(reinterpret_cast<char*>(params.data()), 8 * n);
  if (!is) throw IoError("truncated checkpoint: " + path);
  Flow flow = flow_from_spec(nlohmann::json::parse(spec));
  flow.set_parameters(params);
  return flow;
}

}  // namespace jflow
