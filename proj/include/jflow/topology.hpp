#pragma once

#include <span>
#include <vector>

#include "jflow/common.hpp"

namespace jflow {

// Wrap an angle into [-pi, pi).
inline double wrap_angle(double x) {
  double y = x - kTwoPi * std::floor((x + kPi) / kTwoPi);
  if (y >= kPi) y -= kTwoPi;  // guard against rounding at the seam
  if (y < -kPi) y += kTwoPi;
  return y;
}

// Per-coordinate domain kind: unbounded real line or circle of period 2*pi.
class DomainTopology {
 public:
  DomainTopology() = default;

  explicit DomainTopology(int dim) : circular_(dim, 0) {}

  DomainTopology(int dim, std::vector<int> circular_indices)
      : circular_(dim, 0) {
    for (int i : circular_indices) {
      if (i < 0 || i >= dim)
        throw ConfigError("circular index out of range");
      circular_[i] = 1;
    }
  }

  static DomainTopology all_circular(int dim) {
    DomainTopology t(dim);
    for (auto& c : t.circular_) c = 1;
    return t;
  }

  int dim() const { return static_cast<int>(circular_.size()); }
  bool is_circular(int i) const { return circular_[i] != 0; }
  double period() const { return kTwoPi; }

  bool any_circular() const {
    for (auto c : circular_)
      if (c) return true;
    return false;
  }

  std::vector<int> circular_indices() const {
    std::vector<int> idx;
    for (int i = 0; i < dim(); ++i)
      if (circular_[i]) idx.push_back(i);
    return idx;
  }

  void wrap(std::span<double> x) const {
    for (int i = 0; i < dim(); ++i)
      if (circular_[i]) x[i] = wrap_angle(x[i]);
  }

  // minimum-image displacement a - b
  double displacement(int i, double a, double b) const {
    double d = a - b;
    return circular_[i] ? wrap_angle(d) : d;
  }

  friend bool operator==(const DomainTopology& a, const DomainTopology& b) {
    return a.circular_ == b.circular_;
  }

 private:
  std::vector<std::uint8_t> circular_;
};

}  // namespace jflow
