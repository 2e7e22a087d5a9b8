#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "sfqn/tensor.hpp"

namespace testing_support {

using sfqn::DenseArray;
using sfqn::Real;
using sfqn::Shape;

inline DenseArray random_array(Shape s, std::mt19937_64& rng, Real lo = -1.0, Real hi = 1.0) {
  std::uniform_real_distribution<Real> u(lo, hi);
  DenseArray a(std::move(s));
  for (auto& v : a.values()) v = u(rng);
  return a;
}

inline DenseArray random_ternary(Shape s, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(-1, 1);
  DenseArray a(std::move(s));
  for (auto& v : a.values()) v = u(rng);
  return a;
}

inline Real max_abs_diff(const DenseArray& a, const DenseArray& b) {
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Textbook triple loop.
inline DenseArray naive_matmul(const DenseArray& a, const DenseArray& b) {
  DenseArray out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      Real s = 0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

// Direct cross-correlation on [C,H,W] with zero padding.
inline DenseArray naive_conv(const DenseArray& x, const DenseArray& k, std::size_t s, std::size_t p) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), Co = k.dim(0), l = k.dim(2);
  const std::size_t Ho = (H + 2 * p - l) / s + 1, Wo = (W + 2 * p - l) / s + 1;
  DenseArray out({Co, Ho, Wo});
  for (std::size_t co = 0; co < Co; ++co)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        Real acc = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < l; ++a)
            for (std::size_t b = 0; b < l; ++b) {
              const long r = static_cast<long>(i * s + a) - static_cast<long>(p);
              const long q = static_cast<long>(j * s + b) - static_cast<long>(p);
              if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
              acc += x(c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) * k(co, c, a, b);
            }
        out(co, i, j) = acc;
      }
  return out;
}

}  // namespace testing_support
