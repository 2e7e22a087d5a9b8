#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sfqn/autodiff.hpp"
#include "sfqn/fuzzy_codec.hpp"
#include "sfqn/params.hpp"

namespace sfqn {

struct NeuronConfig {
  Real tau = 2.0;
  Real theta_pos = 1.0;
  Real theta_neg = -4.0;  // used by ternary neurons only
  Real alpha = 2.0;       // arctangent surrogate sharpness
};

/// Membrane state of a LIF population. theta_neg set -> ternary neuron.
struct LifState {
  ad::Var v;
  Real tau = 2.0;
  Real theta_pos = 1.0;
  std::optional<Real> theta_neg;
  Real alpha = 2.0;
};

/// One discrete LIF update: v <- v + (x - v)/tau, fire +1 at v >= theta+
/// (subtract theta+), and for ternary neurons fire -1 at v <= theta-
/// (subtract theta-). Both crossings carry the surrogate gradient.
inline ad::Var lif_step(LifState& s, const ad::Var& x) {
  if (s.v && s.v.shape() != x.shape())
    throw DimensionError("lif_step: input " + shape_str(x.shape()) + " vs state " +
                         shape_str(s.v.shape()));
  if (!s.v) s.v = ad::constant(DenseArray(x.shape()));
  const Real k = 1.0 / s.tau;
  auto v = ad::axpby(1.0 - k, s.v, k, x);
  auto up = ad::spike(v, s.theta_pos, s.alpha);
  if (!s.theta_neg) {
    s.v = ad::axpby(1.0, v, -s.theta_pos, up);
    return up;
  }
  auto down = ad::spike(v, *s.theta_neg, s.alpha, -1.0);
  s.v = ad::axpby(1.0, ad::axpby(1.0, v, -s.theta_pos, up), -*s.theta_neg, down);
  return ad::sub(up, down);
}

enum class NeuronKind { binary_lif, ternary_lif, relu, identity };

/// Activation with persistent state across the time steps of one forward
/// pass. Non-spiking kinds are stateless.
class NeuronGroup {
 public:
  NeuronGroup() = default;
  NeuronGroup(NeuronKind kind, const NeuronConfig& cfg) : kind_(kind), cfg_(cfg) { reset(); }

  ad::Var step(const ad::Var& current) {
    switch (kind_) {
      case NeuronKind::relu: return ad::relu(current);
      case NeuronKind::identity: return current;
      default: return lif_step(state_, current);
    }
  }

  void reset() {
    state_ = LifState{};
    state_.tau = cfg_.tau;
    state_.theta_pos = cfg_.theta_pos;
    state_.alpha = cfg_.alpha;
    if (kind_ == NeuronKind::ternary_lif) state_.theta_neg = cfg_.theta_neg;
  }

  NeuronKind kind() const { return kind_; }
  bool spiking() const { return kind_ == NeuronKind::binary_lif || kind_ == NeuronKind::ternary_lif; }

 private:
  NeuronKind kind_ = NeuronKind::binary_lif;
  NeuronConfig cfg_;
  LifState state_;
};

/// Conv2d + bias + neuron. Input [B,C,H,W] per time step.
struct ConvLifBlock {
  ad::Var kernels, bias;
  std::size_t stride = 1, padding = 0;
  NeuronGroup neurons;

  static ConvLifBlock create(ParameterSet& ps, const std::string& name, std::size_t in_ch,
                             std::size_t out_ch, std::size_t kernel, std::size_t stride,
                             std::size_t padding, NeuronGroup neurons, Rng& rng, Real gain) {
    ConvLifBlock b;
    b.kernels = ps.add(name + ".weight",
                       fan_in_init({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng, gain));
    b.bias = ps.add(name + ".bias", DenseArray({out_ch}));
    b.stride = stride;
    b.padding = padding;
    b.neurons = neurons;
    return b;
  }

  ad::Var current(const ad::Var& x) const {
    return ad::add_channel_bias(ad::conv2d(x, kernels, stride, padding), bias);
  }
  ad::Var step(const ad::Var& x) { return neurons.step(current(x)); }
  void reset() { neurons.reset(); }
};

/// Runs a block over every step of a [T, C, H, W] spike train with membrane
/// state carried across steps and cleared at entry.
inline SpikeTrain conv_lif_block(const SpikeTrain& in, ConvLifBlock& block) {
  if (in.alphabet != SpikeAlphabet::binary || !in.alphabet_holds())
    throw DimensionError("conv_lif_block: input must be a binary spike train");
  if (in.data.rank() != 4) throw DimensionError("conv_lif_block: input must be [T,C,H,W]");
  ad::NoGradGuard no_grad;
  block.reset();
  const std::size_t T = in.steps();
  const Shape frame{1, in.data.dim(1), in.data.dim(2), in.data.dim(3)};
  const std::size_t fsize = shape_numel(frame);
  std::vector<Real> out;
  Shape out_frame;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Real> f(in.data.data() + t * fsize, in.data.data() + (t + 1) * fsize);
    auto s = block.step(ad::constant(DenseArray(frame, std::move(f))));
    out_frame = {s.shape()[1], s.shape()[2], s.shape()[3]};
    out.insert(out.end(), s.value().values().begin(), s.value().values().end());
  }
  block.reset();
  return {DenseArray(time_major(T, out_frame), std::move(out)), SpikeAlphabet::binary};
}

/// Token projection to the embedding width with learnable positional
/// encoding added to the pre-threshold current.
struct SpikingEmbedding {
  ad::Var weight, bias, position;
  NeuronGroup neurons;

  static SpikingEmbedding create(ParameterSet& ps, const std::string& name, std::size_t in,
                                 std::size_t out, std::size_t tokens, NeuronGroup neurons, Rng& rng,
                                 Real gain) {
    SpikingEmbedding e;
    e.weight = ps.add(name + ".weight", fan_in_init({in, out}, in, rng, gain));
    e.bias = ps.add(name + ".bias", DenseArray({out}));
    e.position = ps.add(name + ".position", uniform_init({tokens, out}, 0.1, rng));
    e.neurons = neurons;
    return e;
  }

  ad::Var step(const ad::Var& tokens) {
    auto cur = ad::add_positional(ad::add_bias(ad::matmul(tokens, weight), bias), position);
    return neurons.step(cur);
  }
  void reset() { neurons.reset(); }
};

struct FusionConfig {
  std::size_t width = 32;
  std::size_t heads = 8;
  std::size_t ffn = 128;
  std::size_t tokens = 16;
  bool spiking = true;
};

/// Bidirectional cross-attention fusion of two token sets.
///
/// Direction (x <- y): Q from x and K from y through ternary neurons, so
/// Q K^T is an integer accumulation of {-1,0,+1} products; V from y through
/// binary neurons. Scores are scaled by 1/sqrt(d_head), no softmax. The two
/// directed outputs are summed, projected, added to the residual e1+e2 and
/// layer-normalized before thresholding; the feed-forward sublayer repeats
/// the residual + LayerNorm pattern. Output alphabet {0,1}.
///
/// In non-spiking mode ternary neurons become identities and binary ones ReLU.
class CrossFusion {
 public:
  struct Direction {
    ad::Var wq, wk, wv;
    NeuronGroup q, k, v, attn;
  };

  static CrossFusion create(ParameterSet& ps, const std::string& name, const FusionConfig& cfg,
                            const NeuronConfig& ncfg, Rng& rng) {
    if (cfg.width % cfg.heads != 0) throw ConfigError("fusion width must be divisible by heads");
    CrossFusion f;
    f.cfg_ = cfg;
    const auto bin = cfg.spiking ? NeuronKind::binary_lif : NeuronKind::relu;
    const auto ter = cfg.spiking ? NeuronKind::ternary_lif : NeuronKind::identity;
    const std::size_t d = cfg.width;
    for (int i = 0; i < 2; ++i) {
      const std::string p = name + (i == 0 ? ".ab" : ".ba");
      auto& dir = f.dirs_[i];
      dir.wq = ps.add(p + ".wq", fan_in_init({d, d}, d, rng, 1.5));
      dir.wk = ps.add(p + ".wk", fan_in_init({d, d}, d, rng, 1.5));
      dir.wv = ps.add(p + ".wv", fan_in_init({d, d}, d, rng, 1.5));
      dir.q = NeuronGroup(ter, ncfg);
      dir.k = NeuronGroup(ter, ncfg);
      dir.v = NeuronGroup(bin, ncfg);
      dir.attn = NeuronGroup(bin, ncfg);
    }
    f.wo_ = ps.add(name + ".wo", fan_in_init({d, d}, d, rng));
    f.bo_ = ps.add(name + ".bo", DenseArray({d}));
    f.ln1_g_ = ps.add(name + ".ln1.gamma", DenseArray::ones({d}));
    f.ln1_b_ = ps.add(name + ".ln1.beta", DenseArray({d}, 0.5));
    f.ffn1_ = ps.add(name + ".ffn.w1", fan_in_init({d, cfg.ffn}, d, rng, 1.5));
    f.ffn1_b_ = ps.add(name + ".ffn.b1", DenseArray({cfg.ffn}));
    f.ffn2_ = ps.add(name + ".ffn.w2", fan_in_init({cfg.ffn, d}, cfg.ffn, rng));
    f.ffn2_b_ = ps.add(name + ".ffn.b2", DenseArray({d}));
    f.ln2_g_ = ps.add(name + ".ln2.gamma", DenseArray::ones({d}));
    f.ln2_b_ = ps.add(name + ".ln2.beta", DenseArray({d}, 0.5));
    f.hidden_ = NeuronGroup(bin, ncfg);
    f.ffn_neurons_ = NeuronGroup(bin, ncfg);
    f.out_ = NeuronGroup(bin, ncfg);
    return f;
  }

  /// One time step; e1, e2 are [B*L, width] token matrices.
  ad::Var step(const ad::Var& e1, const ad::Var& e2, std::size_t batch) {
    if (e1.shape() != e2.shape())
      throw DimensionError("cross_fusion: token-count mismatch " + shape_str(e1.shape()) + " vs " +
                           shape_str(e2.shape()));
    if (e1.value().rank() != 2 || e1.shape()[1] != cfg_.width)
      throw DimensionError("cross_fusion: tokens must be [B*L, " + std::to_string(cfg_.width) + "]");
    auto a = attend_direction(dirs_[0], e1, e2, batch);
    auto b = attend_direction(dirs_[1], e2, e1, batch);
    auto proj = ad::add_bias(ad::matmul(ad::add(a, b), wo_), bo_);
    auto h = hidden_.step(ad::layer_norm(ad::add(ad::add(e1, e2), proj), ln1_g_, ln1_b_));
    auto f = ffn_neurons_.step(ad::add_bias(ad::matmul(h, ffn1_), ffn1_b_));
    auto o = ad::add(h, ad::add_bias(ad::matmul(f, ffn2_), ffn2_b_));
    return out_.step(ad::layer_norm(o, ln2_g_, ln2_b_));
  }

  /// Raw (unscaled) scores of the last direction evaluated, for inspection.
  const DenseArray& last_scores() const { return last_scores_; }

  void reset() {
    for (auto& d : dirs_) {
      d.q.reset();
      d.k.reset();
      d.v.reset();
      d.attn.reset();
    }
    hidden_.reset();
    ffn_neurons_.reset();
    out_.reset();
  }

  const FusionConfig& config() const { return cfg_; }

 private:
  ad::Var attend_direction(Direction& d, const ad::Var& x, const ad::Var& y, std::size_t batch) {
    auto q = d.q.step(ad::matmul(x, d.wq));
    auto k = d.k.step(ad::matmul(y, d.wk));
    auto v = d.v.step(ad::matmul(y, d.wv));
    // smooth spike mode yields fractional Q/K, which the ternary kernel rejects
    const bool ternary = cfg_.spiking && ad::spike_mode_ref() == ad::SpikeMode::heaviside;
    auto raw = ternary ? ad::ternary_scores(q, k, batch, cfg_.heads)
                       : ad::dense_scores(q, k, batch, cfg_.heads);
    last_scores_ = raw.value();
    const Real scale = 1.0 / std::sqrt(static_cast<Real>(cfg_.width / cfg_.heads));
    return d.attn.step(ad::attend(ad::scale(raw, scale), v, cfg_.heads));
  }

  FusionConfig cfg_;
  Direction dirs_[2];
  ad::Var wo_, bo_, ln1_g_, ln1_b_, ffn1_, ffn1_b_, ffn2_, ffn2_b_, ln2_g_, ln2_b_;
  NeuronGroup hidden_, ffn_neurons_, out_;
  DenseArray last_scores_;
};

/// Fully connected layer + neuron over flattened fused features [B, in].
struct FcLifHead {
  ad::Var weight, bias;
  NeuronGroup neurons;

  static FcLifHead create(ParameterSet& ps, const std::string& name, std::size_t in,
                          std::size_t hidden, NeuronGroup neurons, Rng& rng, Real gain) {
    FcLifHead h;
    h.weight = ps.add(name + ".weight", fan_in_init({in, hidden}, in, rng, gain));
    h.bias = ps.add(name + ".bias", DenseArray({hidden}));
    h.neurons = neurons;
    return h;
  }

  ad::Var step(const ad::Var& x) { return neurons.step(ad::add_bias(ad::matmul(x, weight), bias)); }
  void reset() { neurons.reset(); }
};

/// Runs the head over a [T, in] train for a single sample -> spikes [T, hidden].
inline SpikeTrain fc_lif_head(const SpikeTrain& fused, FcLifHead& head) {
  if (fused.data.rank() != 2) throw DimensionError("fc_lif_head: input must be [T, features]");
  ad::NoGradGuard no_grad;
  head.reset();
  const std::size_t T = fused.steps(), in = fused.data.dim(1);
  std::vector<Real> out;
  std::size_t hidden = 0;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Real> f(fused.data.data() + t * in, fused.data.data() + (t + 1) * in);
    auto s = head.step(ad::constant(DenseArray({1, in}, std::move(f))));
    hidden = s.shape()[1];
    out.insert(out.end(), s.value().values().begin(), s.value().values().end());
  }
  head.reset();
  return {DenseArray({T, hidden}, std::move(out)), SpikeAlphabet::binary};
}

}  // namespace sfqn
