#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sfqn/autodiff.hpp"
#include "sfqn/checkpoint.hpp"

namespace sfqn {

using Rng = std::mt19937_64;

/// Named trainable leaves of one model, in registration order.
class ParameterSet {
 public:
  ad::Var add(std::string name, DenseArray init) {
    for (const auto& [n, v] : entries_)
      if (n == name) throw ConfigError("duplicate parameter name " + name);
    ad::Var v = ad::parameter(std::move(init));
    entries_.emplace_back(std::move(name), v);
    return v;
  }

  const std::vector<std::pair<std::string, ad::Var>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const ad::Var& get(const std::string& name) const {
    for (const auto& [n, v] : entries_)
      if (n == name) return v;
    throw ConfigError("unknown parameter " + name);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  /// Copies values from a structurally identical set (hard target update).
  void copy_values_from(const ParameterSet& other) {
    if (other.entries_.size() != entries_.size())
      throw DimensionError("copy_values_from: parameter sets differ");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& dst = entries_[i].second.mutable_value();
      const auto& src = other.entries_[i].second.value();
      if (entries_[i].first != other.entries_[i].first || dst.shape() != src.shape())
        throw DimensionError("copy_values_from: mismatch at " + entries_[i].first);
      dst = src;
    }
  }

  std::vector<checkpoint::Record> to_records() const {
    std::vector<checkpoint::Record> out;
    out.reserve(entries_.size());
    for (const auto& [n, v] : entries_) out.push_back({n, v.value()});
    return out;
  }

  /// Every parameter must be present with a matching shape.
  void load_records(const std::vector<checkpoint::Record>& records) {
    for (auto& [n, v] : entries_) {
      const auto* r = checkpoint::find(records, n);
      if (!r) throw FormatError("checkpoint: missing record " + n);
      if (r->value.shape() != v.shape())
        throw FormatError("checkpoint: shape mismatch for " + n);
      v.mutable_value() = r->value;
    }
  }

  /// FNV-1a over names, shapes and value bits.
  std::uint64_t hash(bool include_values = true) const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [n, v] : entries_) {
      mix(n.data(), n.size());
      for (auto d : v.shape()) mix(&d, sizeof d);
      if (include_values) mix(v.value().data(), v.size() * sizeof(Real));
    }
    return h;
  }

  Real l2_norm() const {
    Real s = 0;
    for (const auto& e : entries_)
      for (Real x : e.second.value().values()) s += x * x;
    return std::sqrt(s);
  }

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
};

inline DenseArray uniform_init(Shape shape, Real bound, Rng& rng) {
  DenseArray a(std::move(shape));
  std::uniform_real_distribution<Real> u(-bound, bound);
  for (auto& v : a.values()) v = u(rng);
  return a;
}

/// Kaiming-uniform style bound sqrt(6 / fan_in) scaled by `gain`.
inline DenseArray fan_in_init(Shape shape, std::size_t fan_in, Rng& rng, Real gain = 1.0) {
  return uniform_init(std::move(shape), gain * std::sqrt(6.0 / static_cast<Real>(fan_in)), rng);
}

}  // namespace sfqn
