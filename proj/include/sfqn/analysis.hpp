#pragma once

#include <cstdint>
#include <ostream>
#include <string>

#include "sfqn/autodiff.hpp"
#include "sfqn/tensor.hpp"

// Information-capacity and multiplication-count formulas. Capacities are
// maximum entropies in bits: a set of 2^k equiprobable states carries k bits.
namespace sfqn::analysis {

struct CapacityReport {
  std::uint64_t raw_bits = 0;    // 32-bit float image: 32*C*H*W
  std::uint64_t rate_bits = 0;   // binary train over T steps: T*C*H*W
  std::uint64_t pop_bits = 0;    // N populations: N*T*C*H*W
  std::uint64_t q_raw_bits = 0;  // one float Q-value: 32
  std::uint64_t q_pop_bits = 0;  // M spike trains of T steps: M*T

  double rate_over_raw() const { return static_cast<double>(rate_bits) / static_cast<double>(raw_bits); }
  double pop_over_raw() const { return static_cast<double>(pop_bits) / static_cast<double>(raw_bits); }
  double pop_over_rate() const { return static_cast<double>(pop_bits) / static_cast<double>(rate_bits); }
  double q_pop_over_raw() const { return static_cast<double>(q_pop_bits) / static_cast<double>(q_raw_bits); }
};

inline CapacityReport capacity(std::uint64_t C, std::uint64_t H, std::uint64_t W, std::uint64_t T,
                               std::uint64_t N, std::uint64_t M) {
  if (!C || !H || !W || !T || !N || !M) throw ConfigError("capacity: all arguments must be positive");
  CapacityReport r;
  r.raw_bits = 32 * C * H * W;
  r.rate_bits = T * C * H * W;
  r.pop_bits = N * r.rate_bits;
  r.q_raw_bits = 32;
  r.q_pop_bits = M * T;
  return r;
}

struct ConvSpec {
  std::uint64_t out_channels = 8;
  std::uint64_t kernel = 3;
  std::uint64_t stride = 1;
  std::uint64_t padding = 1;
};

struct CostReport {
  std::uint64_t h_out = 0, w_out = 0;
  std::uint64_t first_conv = 0;        // non-encoded input: c_out*c*l^2*h_out*w_out
  std::uint64_t rate_encoder = 0;      // no multiplications
  std::uint64_t fuzzy_encoder = 0;     // c*N*h*w
  std::uint64_t decoder_overhead = 0;  // M*|A|
};

inline CostReport cost_model(std::uint64_t c, std::uint64_t h, std::uint64_t w, const ConvSpec& conv,
                             std::uint64_t N, std::uint64_t M, std::uint64_t actions) {
  if (!c || !h || !w || !conv.out_channels || !conv.kernel || !conv.stride)
    throw ConfigError("cost_model: extents, channels, kernel and stride must be positive");
  CostReport r;
  r.h_out = ad::ConvGeometry::extent(h, conv.kernel, conv.stride, conv.padding);
  r.w_out = ad::ConvGeometry::extent(w, conv.kernel, conv.stride, conv.padding);
  r.first_conv = conv.out_channels * c * conv.kernel * conv.kernel * r.h_out * r.w_out;
  r.rate_encoder = 0;
  r.fuzzy_encoder = c * N * h * w;
  r.decoder_overhead = M * actions;
  return r;
}

inline void print_capacity_table(std::ostream& os, const CapacityReport& r) {
  auto row = [&os](const char* name, std::uint64_t bits) {
    os << "  " << name;
    for (std::size_t i = std::string(name).size(); i < 28; ++i) os << ' ';
    os << bits << " bits\n";
  };
  row("raw input (32-bit)", r.raw_bits);
  row("rate-coded spikes", r.rate_bits);
  row("population-coded spikes", r.pop_bits);
  row("Q-value (32-bit)", r.q_raw_bits);
  row("Q population code", r.q_pop_bits);
  os << "  pop/rate ratio              " << r.pop_over_rate() << '\n';
}

inline void write_capacity_csv(std::ostream& os, const CapacityReport& r) {
  os << "raw_bits,rate_bits,pop_bits,q_raw_bits,q_pop_bits,pop_over_rate\n"
     << r.raw_bits << ',' << r.rate_bits << ',' << r.pop_bits << ',' << r.q_raw_bits << ','
     << r.q_pop_bits << ',' << r.pop_over_rate() << '\n';
}

inline void print_cost_table(std::ostream& os, const CostReport& r) {
  auto row = [&os](const char* name, std::uint64_t n) {
    os << "  " << name;
    for (std::size_t i = std::string(name).size(); i < 28; ++i) os << ' ';
    os << n << " mult\n";
  };
  row("first conv (non-encoded)", r.first_conv);
  row("rate encoder", r.rate_encoder);
  row("fuzzy encoder", r.fuzzy_encoder);
  row("decoder overhead", r.decoder_overhead);
}

inline void write_cost_csv(std::ostream& os, const CostReport& r) {
  os << "h_out,w_out,first_conv,rate_encoder,fuzzy_encoder,decoder_overhead\n"
     << r.h_out << ',' << r.w_out << ',' << r.first_conv << ',' << r.rate_encoder << ','
     << r.fuzzy_encoder << ',' << r.decoder_overhead << '\n';
}

}  // namespace sfqn::analysis
