#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sfqn/autodiff.hpp"
#include "sfqn/checkpoint.hpp"
#include "sfqn/fuzzy_codec.hpp"
#include "sfqn/params.hpp"
#include "sfqn/snn.hpp"

namespace sfqn {

enum class EncoderKind { fuzzy, rate, direct, none };
enum class DecoderKind { neural, weighted_sum, none };

/// Encoder/decoder pairing. `none/none` is the non-spiking network (ReLU,
/// single pass); `direct` feeds raw intensities into the first spiking layer.
struct NetworkVariant {
  EncoderKind encoder = EncoderKind::fuzzy;
  DecoderKind decoder = DecoderKind::neural;
  MembershipKind membership = MembershipKind::triangular;

  bool spiking() const { return encoder != EncoderKind::none; }

  void validate() const {
    if ((encoder == EncoderKind::none) != (decoder == DecoderKind::none))
      throw ConfigError("encoder 'none' pairs only with decoder 'none'");
  }

  /// Names: fuzzy, fuzzy-ws, gaussian, gaussian-ws, rate, rate-neural, direct,
  /// nonspiking.
  static NetworkVariant parse(const std::string& name) {
    NetworkVariant v;
    if (name == "fuzzy") v = {EncoderKind::fuzzy, DecoderKind::neural, MembershipKind::triangular};
    else if (name == "fuzzy-ws") v = {EncoderKind::fuzzy, DecoderKind::weighted_sum, MembershipKind::triangular};
    else if (name == "gaussian") v = {EncoderKind::fuzzy, DecoderKind::neural, MembershipKind::gaussian};
    else if (name == "gaussian-ws") v = {EncoderKind::fuzzy, DecoderKind::weighted_sum, MembershipKind::gaussian};
    else if (name == "rate") v = {EncoderKind::rate, DecoderKind::weighted_sum, MembershipKind::triangular};
    else if (name == "rate-neural") v = {EncoderKind::rate, DecoderKind::neural, MembershipKind::triangular};
    else if (name == "direct") v = {EncoderKind::direct, DecoderKind::weighted_sum, MembershipKind::triangular};
    else if (name == "nonspiking") v = {EncoderKind::none, DecoderKind::none, MembershipKind::triangular};
    else throw ConfigError("unknown variant '" + name + "'");
    return v;
  }

  std::string name() const {
    switch (encoder) {
      case EncoderKind::fuzzy: {
        std::string base = membership == MembershipKind::triangular ? "fuzzy" : "gaussian";
        return decoder == DecoderKind::neural ? base : base + "-ws";
      }
      case EncoderKind::rate: return decoder == DecoderKind::neural ? "rate-neural" : "rate";
      case EncoderKind::direct: return "direct";
      case EncoderKind::none: return "nonspiking";
    }
    return "?";
  }
};

struct NetworkConfig {
  std::size_t obs_channels = 1;
  std::size_t obs_height = 32;
  std::size_t obs_width = 32;
  std::vector<std::size_t> conv_channels{8, 16, 16};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;
  std::size_t embed_dim = 32;
  std::size_t heads = 8;
  std::size_t ffn_dim = 128;
  std::size_t hidden_units = 512;
  std::size_t actions = 5;
  std::size_t population = 5;      // M
  std::size_t decoder_hidden = 64;
  std::size_t memberships = 3;     // N
  std::size_t time_steps = 5;      // T
  NeuronConfig neuron;

  /// Spatial extent after the conv stack, validating every layer.
  std::pair<std::size_t, std::size_t> token_grid() const {
    if (conv_channels.empty()) throw ConfigError("at least one conv layer required");
    std::size_t h = obs_height, w = obs_width;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) {
      h = ad::ConvGeometry::extent(h, kernel, stride, padding);
      w = ad::ConvGeometry::extent(w, kernel, stride, padding);
    }
    return {h, w};
  }
};

/// Per-modality multiply counts captured during one forward pass.
struct StageCounts {
  std::array<std::uint64_t, 2> encoder{};
  std::array<std::uint64_t, 2> first_conv{};
};

struct QForward {
  ad::Var q;           // [B x A]
  ad::Var population;  // [B x M*A]; empty unless the neural decoder is used
};

class QNetwork {
 public:
  static constexpr std::array<const char*, 2> kModalities{"bev", "lidar"};

  QNetwork(NetworkConfig cfg, NetworkVariant variant, std::uint64_t seed)
      : cfg_(std::move(cfg)), variant_(variant), encoder_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    variant_.validate();
    Rng rng(seed);
    const auto [th, tw] = cfg_.token_grid();
    tokens_ = th * tw;
    const bool sp = variant_.spiking();
    const Real gain = sp ? 1.5 : 1.0;
    const auto bin = sp ? NeuronKind::binary_lif : NeuronKind::relu;
    const std::size_t in_ch =
        variant_.encoder == EncoderKind::fuzzy ? cfg_.obs_channels * cfg_.memberships : cfg_.obs_channels;

    for (std::size_t m = 0; m < 2; ++m) {
      const std::string pre = kModalities[m];
      auto& br = branches_[m];
      if (variant_.encoder == EncoderKind::fuzzy)
        br.membership = params_.add(
            pre + ".membership." + to_string(variant_.membership),
            MembershipBank::initial(variant_.membership, cfg_.memberships).free_params());
      std::size_t c = in_ch;
      for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
        br.convs.push_back(ConvLifBlock::create(params_, pre + ".conv" + std::to_string(i + 1), c,
                                                cfg_.conv_channels[i], cfg_.kernel, cfg_.stride,
                                                cfg_.padding, NeuronGroup(bin, cfg_.neuron), rng, gain));
        c = cfg_.conv_channels[i];
      }
      br.embed = SpikingEmbedding::create(params_, pre + ".embed", c, cfg_.embed_dim, tokens_,
                                          NeuronGroup(bin, cfg_.neuron), rng, gain);
    }
    fusion_ = CrossFusion::create(params_, "fusion",
                                  {cfg_.embed_dim, cfg_.heads, cfg_.ffn_dim, tokens_, sp}, cfg_.neuron, rng);
    head_ = FcLifHead::create(params_, "head", tokens_ * cfg_.embed_dim, cfg_.hidden_units,
                              NeuronGroup(bin, cfg_.neuron), rng, gain);
    const std::size_t H = cfg_.hidden_units, A = cfg_.actions;
    switch (variant_.decoder) {
      case DecoderKind::neural:
        readout_ = params_.add("readout.population",
                               fan_in_init({H, cfg_.population * A}, H, rng, 0.5));
        decoder_ = NeuralDecoder::create(params_, "decoder", cfg_.population * A,
                                         cfg_.decoder_hidden, A, rng);
        break;
      case DecoderKind::weighted_sum:
        readout_ = params_.add("readout.weighted_sum", fan_in_init({H, A}, H, rng, 0.5));
        break;
      case DecoderKind::none:
        readout_ = params_.add("readout.linear.weight", fan_in_init({H, A}, H, rng, 0.5));
        readout_bias_ = params_.add("readout.linear.bias", DenseArray({A}));
        break;
    }
  }

  QNetwork(const QNetwork&) = delete;
  QNetwork& operator=(const QNetwork&) = delete;

  const NetworkConfig& config() const { return cfg_; }
  const NetworkVariant& variant() const { return variant_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  std::size_t time_steps() const { return variant_.spiking() ? cfg_.time_steps : 1; }
  std::size_t tokens() const { return tokens_; }
  std::size_t encoded_channels() const {
    return variant_.encoder == EncoderKind::fuzzy ? cfg_.obs_channels * cfg_.memberships
                                                  : cfg_.obs_channels;
  }

  std::optional<MembershipBank> membership_bank(std::size_t modality) const {
    const auto& v = branches_.at(modality).membership;
    if (!v) return std::nullopt;
    return MembershipBank::from_free(variant_.membership, v.value());
  }

  void reseed_encoder(std::uint64_t seed) { encoder_rng_.seed(seed); }

  /// Mean absolute activation per stage over the last forward pass (the
  /// firing rate for spiking stages).
  const std::map<std::string, Real>& activity() const { return activity_; }

  /// Batched forward: bev and lidar are [B, C, H, W] with values in [0,1].
  QForward forward(const DenseArray& bev, const DenseArray& lidar, StageCounts* counts = nullptr) {
    const std::array<const DenseArray*, 2> images{&bev, &lidar};
    const Shape expect_tail{cfg_.obs_channels, cfg_.obs_height, cfg_.obs_width};
    for (const auto* im : images)
      if (im->rank() != 4 || Shape(im->shape().begin() + 1, im->shape().end()) != expect_tail ||
          im->dim(0) != bev.dim(0))
        throw DimensionError("q_forward: observation shape " + shape_str(im->shape()) +
                             " does not match configured [B x " + shape_str(expect_tail) + "]");
    const std::size_t B = bev.dim(0);
    const std::size_t T = time_steps();
    reset_state();

    std::array<ad::Var, 2> raw, degrees, if_v;
    std::array<SpikeTrain, 2> rate_trains;
    for (std::size_t m = 0; m < 2; ++m) {
      raw[m] = ad::constant(*images[m]);
      const auto before = op_counters().multiplications;
      if (variant_.encoder == EncoderKind::fuzzy)
        degrees[m] = membership_activations(branches_[m].membership, variant_.membership, raw[m]);
      else if (variant_.encoder == EncoderKind::rate)
        rate_trains[m] = rate_encode(*images[m], static_cast<int>(T), encoder_rng_);
      if (counts) counts->encoder[m] += op_counters().multiplications - before;
    }

    const Real alpha = cfg_.neuron.alpha;
    activity_.clear();
    auto track = [&](const std::string& stage, const ad::Var& v) {
      const auto& a = v.value();
      Real s = 0;
      for (Real x : a.values()) s += std::abs(x);
      activity_[stage] += s / static_cast<Real>(a.size() * T);
    };
    ad::Var spike_count;
    for (std::size_t t = 0; t < T; ++t) {
      std::array<ad::Var, 2> emb;
      for (std::size_t m = 0; m < 2; ++m) {
        ad::Var x;
        switch (variant_.encoder) {
          case EncoderKind::fuzzy: {
            // non-leaky IF, threshold 1, subtractive reset
            if_v[m] = if_v[m] ? ad::add(if_v[m], degrees[m]) : degrees[m];
            x = ad::spike(if_v[m], 1.0, alpha);
            if_v[m] = ad::sub(if_v[m], x);
            break;
          }
          case EncoderKind::rate: {
            const auto& d = rate_trains[m].data;
            const std::size_t frame = d.size() / d.dim(0);
            std::vector<Real> f(d.data() + t * frame, d.data() + (t + 1) * frame);
            x = ad::constant(DenseArray(images[m]->shape(), std::move(f)));
            break;
          }
          default: x = raw[m];
        }
        auto& br = branches_[m];
        const std::string pre = kModalities[m];
        track(pre + ".input", x);
        const auto before = op_counters().multiplications;
        auto cur = br.convs[0].current(x);
        if (counts) counts->first_conv[m] += op_counters().multiplications - before;
        auto h = br.convs[0].neurons.step(cur);
        track(pre + ".conv1", h);
        for (std::size_t i = 1; i < br.convs.size(); ++i) {
          h = br.convs[i].step(h);
          track(pre + ".conv" + std::to_string(i + 1), h);
        }
        emb[m] = br.embed.step(ad::to_tokens(h));
        track(pre + ".embed", emb[m]);
      }
      auto fused = fusion_.step(emb[0], emb[1], B);
      track("fusion", fused);
      auto s = head_.step(ad::reshape(fused, {B, tokens_ * cfg_.embed_dim}));
      track("head", s);
      spike_count = spike_count ? ad::add(spike_count, s) : s;
    }

    QForward out;
    switch (variant_.decoder) {
      case DecoderKind::neural:
        out.population = ad::matmul(spike_count, readout_);
        out.q = decoder_.forward(out.population);
        break;
      case DecoderKind::weighted_sum: out.q = ad::matmul(spike_count, readout_); break;
      case DecoderKind::none: out.q = ad::add_bias(ad::matmul(spike_count, readout_), readout_bias_); break;
    }
    reset_state();
    return out;
  }

  /// Scales the weights of every spiking conv, embedding and head layer,
  /// in forward order, until its firing rate on the given batch lies in
  /// [lo, hi]. Layers that cannot reach the band within max_rounds keep
  /// their last scale. Returns the number of forward passes used.
  std::size_t calibrate(const DenseArray& bev, const DenseArray& lidar, Real lo = 0.05, Real hi = 0.25,
                        std::size_t max_rounds = 10) {
    if (!variant_.spiking()) return 0;
    if (!(0 <= lo && lo < hi && hi <= 1)) throw ConfigError("calibrate: need 0 <= lo < hi <= 1");
    ad::NoGradGuard no_grad;
    std::vector<std::pair<std::string, ad::Var>> stages;
    for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i)
      for (std::size_t m = 0; m < 2; ++m)
        stages.emplace_back(std::string(kModalities[m]) + ".conv" + std::to_string(i + 1),
                            branches_[m].convs[i].kernels);
    for (std::size_t m = 0; m < 2; ++m)
      stages.emplace_back(std::string(kModalities[m]) + ".embed", branches_[m].embed.weight);
    stages.emplace_back("head", head_.weight);
    std::size_t passes = 0;
    const std::uint64_t rng_state = 0x5eed;
    for (auto& [stage, w] : stages) {
      for (std::size_t r = 0; r < max_rounds; ++r) {
        reseed_encoder(rng_state);
        forward(bev, lidar);
        ++passes;
        const Real a = activity_.at(stage);
        if (a >= lo && a <= hi) break;
        const Real k = a < lo ? 1.5 : 0.75;
        for (auto& x : w.mutable_value().values()) x *= k;
      }
    }
    return passes;
  }

  /// Single observation, no graph: Q-values plus the population behind them.
  QVector q_values(const DenseArray& bev, const DenseArray& lidar) {
    ad::NoGradGuard no_grad;
    auto with_batch = [](const DenseArray& a) {
      Shape s{1};
      s.insert(s.end(), a.shape().begin(), a.shape().end());
      return a.reshaped(std::move(s));
    };
    auto f = forward(with_batch(bev), with_batch(lidar));
    QVector q{f.q.value().reshaped({cfg_.actions}), {}};
    if (f.population) q.population = f.population.value().reshaped({cfg_.actions, cfg_.population});
    return q;
  }

  /// Hash of names and shapes of the layers every variant shares: conv
  /// stack (first-layer input width excluded), embeddings, fusion, head.
  std::uint64_t shared_topology_hash() const {
    ParameterSet shared;
    for (const auto& [name, v] : params_.entries()) {
      if (name.find(".membership.") != std::string::npos || name.rfind("readout.", 0) == 0 ||
          name.rfind("decoder.", 0) == 0)
        continue;
      Shape s = v.shape();
      if (name.find(".conv1.weight") != std::string::npos) s[1] = 0;
      shared.add(name, DenseArray(Shape{s.size()}, std::vector<Real>(s.begin(), s.end())));
    }
    return shared.hash(true);
  }

  void copy_from(const QNetwork& other) { params_.copy_values_from(other.params_); }

  std::vector<checkpoint::Record> records() const { return params_.to_records(); }
  void load(const std::vector<checkpoint::Record>& r) { params_.load_records(r); }

 private:
  struct Branch {
    ad::Var membership;
    std::vector<ConvLifBlock> convs;
    SpikingEmbedding embed;
  };

  void reset_state() {
    for (auto& br : branches_) {
      for (auto& c : br.convs) c.reset();
      br.embed.reset();
    }
    fusion_.reset();
    head_.reset();
  }

  NetworkConfig cfg_;
  NetworkVariant variant_;
  Rng encoder_rng_;
  ParameterSet params_;
  std::size_t tokens_ = 0;
  std::array<Branch, 2> branches_;
  std::map<std::string, Real> activity_;
  CrossFusion fusion_;
  FcLifHead head_;
  ad::Var readout_, readout_bias_;
  NeuralDecoder decoder_;
};

/// Analytic and instrumented multiply counts for one modality's encoder and
/// first conv over a full forward pass, plus the decoder overhead M*|A|.
struct MultiplyReport {
  std::uint64_t encoder_analytic = 0, encoder_measured = 0;
  std::uint64_t first_conv_analytic = 0, first_conv_measured = 0;
  std::uint64_t decoder_overhead = 0;
};

inline MultiplyReport count_multiplications(const NetworkConfig& cfg, const NetworkVariant& variant,
                                            std::uint64_t seed = 1) {
  QNetwork net(cfg, variant, seed);
  Rng rng(seed);
  auto obs = uniform_init({1, cfg.obs_channels, cfg.obs_height, cfg.obs_width}, 0.5, rng);
  for (auto& v : obs.values()) v += 0.5;
  StageCounts counts;
  {
    ad::NoGradGuard no_grad;
    net.forward(obs, obs, &counts);
  }
  const std::uint64_t c = cfg.obs_channels, h = cfg.obs_height, w = cfg.obs_width;
  const std::uint64_t ho = ad::ConvGeometry::extent(h, cfg.kernel, cfg.stride, cfg.padding);
  const std::uint64_t wo = ad::ConvGeometry::extent(w, cfg.kernel, cfg.stride, cfg.padding);
  const std::uint64_t l2 = cfg.kernel * cfg.kernel;
  MultiplyReport r;
  r.encoder_measured = counts.encoder[0];
  r.first_conv_measured = counts.first_conv[0];
  const std::uint64_t cin = net.encoded_channels();
  switch (variant.encoder) {
    case EncoderKind::fuzzy:
      r.encoder_analytic = c * cfg.memberships * h * w * (variant.membership == MembershipKind::gaussian ? 3 : 1);
      break;
    default: r.encoder_analytic = 0;
  }
  r.first_conv_analytic = net.time_steps() * cfg.conv_channels[0] * cin * l2 * ho * wo;
  r.decoder_overhead = variant.decoder == DecoderKind::neural ? cfg.population * cfg.actions : 0;
  return r;
}

}  // namespace sfqn
