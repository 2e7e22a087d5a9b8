#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sfqn/autodiff.hpp"
#include "sfqn/params.hpp"

namespace sfqn {

enum class MembershipKind { triangular, gaussian };

inline const char* to_string(MembershipKind k) {
  return k == MembershipKind::triangular ? "triangular" : "gaussian";
}

inline MembershipKind parse_membership_kind(const std::string& s) {
  if (s == "triangular") return MembershipKind::triangular;
  if (s == "gaussian") return MembershipKind::gaussian;
  throw ConfigError("unknown membership kind '" + s + "'");
}

struct Triangle {
  Real a, b, c;
};

struct GaussianSet {
  Real mean, sigma;
};

/// N membership functions over [0,1], stored as unconstrained parameters:
/// triangular rows are (a, log(b-a), log(c-b)), gaussian rows (mean, log sigma).
/// Any real row therefore decodes to a valid a<b<c triangle or sigma>0.
class MembershipBank {
 public:
  static MembershipBank from_triangles(const std::vector<Triangle>& tris) {
    if (tris.empty()) throw ConfigError("membership bank needs at least one function");
    DenseArray p({tris.size(), 3});
    for (std::size_t i = 0; i < tris.size(); ++i) {
      const auto& t = tris[i];
      if (!(t.a < t.b && t.b < t.c))
        throw ConfigError("triangular membership requires a < b < c");
      p(i, 0) = t.a;
      p(i, 1) = std::log(t.b - t.a);
      p(i, 2) = std::log(t.c - t.b);
    }
    return MembershipBank(MembershipKind::triangular, std::move(p));
  }

  static MembershipBank from_gaussians(const std::vector<GaussianSet>& gs) {
    if (gs.empty()) throw ConfigError("membership bank needs at least one function");
    DenseArray p({gs.size(), 2});
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (!(gs[i].sigma > 0)) throw ConfigError("gaussian membership requires sigma > 0");
      p(i, 0) = gs[i].mean;
      p(i, 1) = std::log(gs[i].sigma);
    }
    return MembershipBank(MembershipKind::gaussian, std::move(p));
  }

  static MembershipBank from_free(MembershipKind kind, DenseArray free) {
    const std::size_t cols = kind == MembershipKind::triangular ? 3 : 2;
    if (free.rank() != 2 || free.dim(1) != cols)
      throw DimensionError("membership free parameters must be [N x " + std::to_string(cols) + "]");
    return MembershipBank(kind, std::move(free));
  }

  /// Evenly spread functions over [0,1]. For N=3 the triangles are
  /// (0,0.2,0.4), (0.3,0.5,0.7), (0.6,0.8,1.0).
  static MembershipBank initial(MembershipKind kind, std::size_t n) {
    if (n == 0) throw ConfigError("membership count must be >= 1");
    std::vector<Real> centers(n, 0.5);
    Real half = 0.5;
    if (n > 1) {
      const Real spacing = 0.6 / static_cast<Real>(n - 1);
      half = spacing * 2.0 / 3.0;
      for (std::size_t i = 0; i < n; ++i) centers[i] = 0.2 + spacing * static_cast<Real>(i);
    }
    if (kind == MembershipKind::triangular) {
      std::vector<Triangle> t;
      for (Real b : centers) t.push_back({b - half, b, b + half});
      return from_triangles(t);
    }
    std::vector<GaussianSet> g;
    for (Real m : centers) g.push_back({m, half / 2.0});
    return from_gaussians(g);
  }

  MembershipKind kind() const { return kind_; }
  std::size_t size() const { return free_.dim(0); }
  const DenseArray& free_params() const { return free_; }

  Triangle triangle(std::size_t i) const {
    const Real a = free_(i, 0);
    const Real b = a + std::exp(free_(i, 1));
    return {a, b, b + std::exp(free_(i, 2))};
  }

  GaussianSet gaussian(std::size_t i) const { return {free_(i, 0), std::exp(free_(i, 1))}; }

 private:
  MembershipBank(MembershipKind k, DenseArray free) : kind_(k), free_(std::move(free)) {
    if (free_.dim(0) == 0) throw ConfigError("membership bank needs at least one function");
  }
  MembershipKind kind_;
  DenseArray free_;
};

inline Real triangular_degree(const Triangle& t, Real p) {
  if (p <= t.a || p > t.c) return 0.0;
  if (p <= t.b) return (p - t.a) / (t.b - t.a);
  return (t.c - p) / (t.c - t.b);
}

inline Real gaussian_degree(const GaussianSet& g, Real p) {
  const Real d = p - g.mean;
  return std::exp(-d * d / (2.0 * g.sigma * g.sigma));
}

/// Degrees of membership of one pixel value (clamped to [0,1]).
inline std::vector<Real> membership_eval(const MembershipBank& bank, Real p) {
  p = std::clamp(p, Real{0}, Real{1});
  std::vector<Real> out(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i)
    out[i] = bank.kind() == MembershipKind::triangular ? triangular_degree(bank.triangle(i), p)
                                                       : gaussian_degree(bank.gaussian(i), p);
  return out;
}

/// Graph op: image [B,C,H,W] (or [C,H,W]) -> degrees [B, N*C, H, W], channel
/// c*N+i holding function i applied to input channel c. Differentiable in the
/// free bank parameters; the image is treated as data.
///
/// Triangular evaluation is 1 - |p-b| * r with r the reciprocal width of the
/// active side, clipped at 0, which is one multiplication per pixel and
/// function. At the kinks p=a, b, c the gradient is the left limit.
inline ad::Var membership_activations(const ad::Var& free, MembershipKind kind,
                                      const ad::Var& image) {
  const auto& iv = image.value();
  if (iv.rank() != 3 && iv.rank() != 4)
    throw DimensionError("membership_activations: image must be [C,H,W] or [B,C,H,W]");
  const bool batched = iv.rank() == 4;
  const std::size_t off = batched ? 1 : 0;
  const std::size_t batch = batched ? iv.dim(0) : 1;
  const std::size_t ch = iv.dim(off), plane = iv.dim(off + 1) * iv.dim(off + 2);
  const auto bank = MembershipBank::from_free(kind, free.value());
  const std::size_t n = bank.size();

  Shape out_shape = batched ? Shape{batch, n * ch, iv.dim(off + 1), iv.dim(off + 2)}
                            : Shape{n * ch, iv.dim(off + 1), iv.dim(off + 2)};
  DenseArray out(out_shape);
  std::uint64_t mults = 0;
  if (kind == MembershipKind::triangular) {
    std::vector<Triangle> tri(n);
    std::vector<Real> inv_rise(n), inv_fall(n);
    for (std::size_t i = 0; i < n; ++i) {
      tri[i] = bank.triangle(i);
      inv_rise[i] = 1.0 / (tri[i].b - tri[i].a);
      inv_fall[i] = 1.0 / (tri[i].c - tri[i].b);
    }
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c) {
        const Real* src = iv.data() + (b * ch + c) * plane;
        for (std::size_t i = 0; i < n; ++i) {
          Real* dst = out.data() + (b * n * ch + c * n + i) * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            const Real p = std::clamp(src[k], Real{0}, Real{1});
            const Real d = p - tri[i].b;
            const Real v = 1.0 - std::abs(d) * (d <= 0 ? inv_rise[i] : inv_fall[i]);
            ++mults;
            dst[k] = v > 0 ? v : 0.0;
          }
        }
      }
  } else {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c) {
        const Real* src = iv.data() + (b * ch + c) * plane;
        for (std::size_t i = 0; i < n; ++i) {
          const auto g = bank.gaussian(i);
          const Real k2 = -0.5 / (g.sigma * g.sigma);
          Real* dst = out.data() + (b * n * ch + c * n + i) * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            const Real d = std::clamp(src[k], Real{0}, Real{1}) - g.mean;
            dst[k] = std::exp(d * d * k2);
            mults += 3;  // d*d, *k2, and the exponential
          }
        }
      }
  }
  op_counters().multiplications += mults;

  return ad::detail::make_result(std::move(out), {free, image},
                                 [kind, n, ch, batch, plane](ad::Node& self) {
    Real* pf = ad::detail::parent_grad(self, 0);
    if (!pf) return;
    const auto& fv = ad::detail::parent_value(self, 0);
    const auto& img = ad::detail::parent_value(self, 1);
    const auto bank = MembershipBank::from_free(kind, fv);
    const Real* g = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      Real ga = 0, gb = 0, gc = 0;  // triangular: dL/da, db, dc; gaussian: dL/dmean, dL/dsigma
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
          const Real* src = img.data() + (b * ch + c) * plane;
          const Real* gg = g + (b * n * ch + c * n + i) * plane;
          if (kind == MembershipKind::triangular) {
            const auto t = bank.triangle(i);
            const Real rise = t.b - t.a, fall = t.c - t.b;
            for (std::size_t k = 0; k < plane; ++k) {
              if (gg[k] == 0.0) continue;
              const Real p = std::clamp(src[k], Real{0}, Real{1});
              if (p <= t.a || p > t.c) continue;
              if (p <= t.b) {
                ga += gg[k] * (p - t.b) / (rise * rise);
                gb += gg[k] * -(p - t.a) / (rise * rise);
              } else {
                gb += gg[k] * (t.c - p) / (fall * fall);
                gc += gg[k] * (p - t.b) / (fall * fall);
              }
            }
          } else {
            const auto gs = bank.gaussian(i);
            const Real s2 = gs.sigma * gs.sigma;
            for (std::size_t k = 0; k < plane; ++k) {
              if (gg[k] == 0.0) continue;
              const Real d = std::clamp(src[k], Real{0}, Real{1}) - gs.mean;
              const Real mu = std::exp(-d * d / (2 * s2));
              ga += gg[k] * mu * d / s2;
              gb += gg[k] * mu * d * d / (s2 * gs.sigma);
            }
          }
        }
      if (kind == MembershipKind::triangular) {
        pf[i * 3 + 0] += ga + gb + gc;
        pf[i * 3 + 1] += (gb + gc) * std::exp(fv(i, 1));
        pf[i * 3 + 2] += gc * std::exp(fv(i, 2));
      } else {
        pf[i * 2 + 0] += ga;
        pf[i * 2 + 1] += gb * std::exp(fv(i, 1));
      }
    }
  }, "membership_activations");
}

// ---- spike trains ------------------------------------------------------------

enum class SpikeAlphabet { binary, ternary };

/// Time-major spike array: data has shape [T, ...].
struct SpikeTrain {
  DenseArray data;
  SpikeAlphabet alphabet = SpikeAlphabet::binary;

  std::size_t steps() const { return data.dim(0); }

  bool alphabet_holds() const {
    for (Real v : data.values()) {
      if (v == 0.0 || v == 1.0) continue;
      if (alphabet == SpikeAlphabet::ternary && v == -1.0) continue;
      return false;
    }
    return true;
  }
};

inline Shape time_major(std::size_t steps, const Shape& s) {
  Shape out{steps};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

/// Non-leaky integrate-and-fire with threshold 1 and subtractive reset, one
/// neuron per entry of `drive`, constant input over `steps` steps.
inline SpikeTrain if_encode(const DenseArray& drive, int steps) {
  if (steps <= 0) throw ConfigError("simulation window T must be positive");
  if (drive.rank() > 3) throw DimensionError("if_encode: drive rank must be <= 3");
  const auto T = static_cast<std::size_t>(steps);
  SpikeTrain st{DenseArray(time_major(T, drive.shape())), SpikeAlphabet::binary};
  std::vector<Real> v(drive.size(), 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] += drive[i];
      if (v[i] >= 1.0) {
        st.data[t * v.size() + i] = 1.0;
        v[i] -= 1.0;
      }
    }
  return st;
}

/// Image [C,H,W] -> spikes [T, N*C, H, W].
inline SpikeTrain fuzzy_encode(const MembershipBank& bank, const DenseArray& image, int steps) {
  if (steps <= 0) throw ConfigError("simulation window T must be positive");
  if (image.rank() != 3) throw DimensionError("fuzzy_encode: image must be [C,H,W]");
  ad::NoGradGuard no_grad;
  auto mu = membership_activations(ad::constant(bank.free_params()), bank.kind(),
                                   ad::constant(image));
  return if_encode(mu.value(), steps);
}

/// Count of pixel values clamped into [0,1] by rate_encode.
inline std::uint64_t& rate_clamp_warnings() {
  thread_local std::uint64_t n = 0;
  return n;
}

/// Independent Bernoulli(p) spike per pixel and step; image [C,H,W] or
/// [B,C,H,W] -> [T, ...].
inline SpikeTrain rate_encode(const DenseArray& image, int steps, Rng& rng) {
  if (steps <= 0) throw ConfigError("simulation window T must be positive");
  if (image.rank() > 3 && image.rank() != 4) throw DimensionError("rate_encode: bad image rank");
  const auto T = static_cast<std::size_t>(steps);
  Shape shape = image.shape();
  if (shape.size() == 4) {
    // [B,C,H,W] -> keep as [T, B*C, H, W]
    shape = {shape[0] * shape[1], shape[2], shape[3]};
  }
  SpikeTrain st{DenseArray(time_major(T, shape)), SpikeAlphabet::binary};
  std::vector<Real> p(image.values());
  for (auto& x : p)
    if (x < 0.0 || x > 1.0) {
      x = std::clamp(x, Real{0}, Real{1});
      ++rate_clamp_warnings();
    }
  std::uniform_real_distribution<Real> u(0.0, 1.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < p.size(); ++i) st.data[t * p.size() + i] = u(rng) < p[i] ? 1.0 : 0.0;
  return st;
}

// ---- decoding ------------------------------------------------------------------

/// |A| action values and the population activations behind them.
struct QVector {
  DenseArray values;      // [A]
  DenseArray population;  // [A x M]; empty when decoded without populations
};

/// lambda[a,m] = sum_t sum_i w[i, a*M+m] s[i,t]; spikes [T x H], weights [H x M*A].
/// Returns [A x M] given the population size.
inline DenseArray accumulate_population(const DenseArray& spikes, const DenseArray& weights,
                                        std::size_t population) {
  if (spikes.rank() != 2 || weights.rank() != 2 || spikes.dim(1) != weights.dim(0))
    throw DimensionError("accumulate_population: spikes " + shape_str(spikes.shape()) +
                         " vs weights " + shape_str(weights.shape()));
  if (population == 0 || weights.dim(1) % population != 0)
    throw DimensionError("accumulate_population: output width not a multiple of M");
  const std::size_t T = spikes.dim(0), H = spikes.dim(1), out = weights.dim(1);
  DenseArray lambda({out / population, population});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < H; ++i) {
      const Real s = spikes(t, i);
      if (s == 0.0) continue;
      for (std::size_t j = 0; j < out; ++j) lambda[j] += weights(i, j) * s;
    }
  return lambda;
}

/// Q(a) = sum_t sum_i w[i,a] s[i,t]: the population collapsed to one unit.
inline QVector decode_weighted_sum(const DenseArray& spikes, const DenseArray& weights) {
  auto lam = accumulate_population(spikes, weights, 1);
  return {lam.reshaped({lam.dim(0)}), {}};
}

/// Uniform grid of M positions on [-1, 1] (a single position sits at 0).
inline std::vector<Real> centroid_positions(std::size_t m) {
  if (m == 1) return {0.0};
  std::vector<Real> x(m);
  for (std::size_t i = 0; i < m; ++i) x[i] = -1.0 + 2.0 * static_cast<Real>(i) / static_cast<Real>(m - 1);
  return x;
}

/// Discrete centroid per action: sum_m x_m l_{a,m} / sum_m l_{a,m}. Actions
/// with zero total mass decode to the midpoint of the position range.
inline QVector decode_centroid(const DenseArray& lambda, const std::vector<Real>& positions) {
  if (lambda.rank() != 2 || lambda.dim(1) != positions.size())
    throw DimensionError("decode_centroid: lambda must be [A x M] with M positions");
  for (std::size_t i = 1; i < positions.size(); ++i)
    if (!(positions[i] > positions[i - 1]))
      throw ConfigError("decode_centroid: positions must be strictly increasing");
  const std::size_t A = lambda.dim(0), M = lambda.dim(1);
  QVector q{DenseArray({A}), lambda};
  for (std::size_t a = 0; a < A; ++a) {
    Real num = 0, den = 0;
    for (std::size_t m = 0; m < M; ++m) {
      num += positions[m] * lambda(a, m);
      den += lambda(a, m);
    }
    q.values[a] = den == 0.0 ? 0.5 * (positions.front() + positions.back()) : num / den;
  }
  return q;
}

/// Population activations [B x M*A] -> ReLU hidden layer -> Q-values [B x A].
struct NeuralDecoder {
  ad::Var w1, b1, w2, b2;

  static NeuralDecoder create(ParameterSet& params, const std::string& prefix, std::size_t in,
                              std::size_t hidden, std::size_t actions, Rng& rng) {
    NeuralDecoder d;
    d.w1 = params.add(prefix + ".w1", fan_in_init({in, hidden}, in, rng));
    d.b1 = params.add(prefix + ".b1", DenseArray({hidden}));
    d.w2 = params.add(prefix + ".w2", fan_in_init({hidden, actions}, hidden, rng, 0.5));
    d.b2 = params.add(prefix + ".b2", DenseArray({actions}));
    return d;
  }

  /// Decoder with hand-supplied weights (not registered anywhere).
  static NeuralDecoder from_weights(DenseArray w1, DenseArray b1, DenseArray w2, DenseArray b2) {
    return {ad::parameter(std::move(w1)), ad::parameter(std::move(b1)),
            ad::parameter(std::move(w2)), ad::parameter(std::move(b2))};
  }

  std::size_t input_width() const { return w1.shape()[0]; }

  ad::Var forward(const ad::Var& lambda) const {
    if (lambda.value().rank() != 2 || lambda.shape()[1] != input_width())
      throw DimensionError("decode_neural: input width must be M*|A| = " +
                           std::to_string(input_width()));
    auto h = ad::relu(ad::add_bias(ad::matmul(lambda, w1), b1));
    return ad::add_bias(ad::matmul(h, w2), b2);
  }
};

/// lambda [A x M] -> Q via the neural decoder.
inline QVector decode_neural(const DenseArray& lambda, const NeuralDecoder& decoder) {
  ad::NoGradGuard no_grad;
  auto in = ad::constant(lambda.reshaped({1, lambda.size()}));
  auto q = decoder.forward(in);
  return {q.value().reshaped({q.size()}), lambda};
}

}  // namespace sfqn
