#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "sfqn/autodiff.hpp"
#include "sfqn/highway.hpp"
#include "sfqn/params.hpp"
#include "sfqn/qnet.hpp"

namespace sfqn::rl {

using highway::Observation;

struct Transition {
  std::shared_ptr<const Observation> obs;
  int action = 0;
  Real reward = 0;
  std::shared_ptr<const Observation> next_obs;
  bool terminal = false;
};

/// Fixed-capacity FIFO: once full, each insert evicts the oldest element.
template <class T>
class RingBuffer {
 public:
  explicit RingBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("ring buffer capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity, 4096));
  }

  void push(T item) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(item));
    } else {
      items_[head_] = std::move(item);
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }

  /// i = 0 is the oldest retained element.
  const T& operator[](std::size_t i) const { return items_[(head_ + i) % items_.size()]; }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<T> items_;
};

using ReplayBuffer = RingBuffer<Transition>;

struct TrainConfig {
  Real gamma = 0.99;
  Real lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t buffer_capacity = 50000;
  std::size_t target_update_every = 200;
  Real eps_start = 1.0;
  Real eps_end = 0.05;
  Real eps_decay_fraction = 0.3;
  std::size_t total_steps = 60000;
  std::size_t learning_starts = 1000;
  std::size_t train_every = 1;
  Real grad_clip = 10.0;  // global-norm clip; 0 disables
  std::size_t checkpoint_every = 5000;
  std::size_t eval_episodes = 20;
  std::uint64_t eval_seed = 1000003;
  std::size_t calibration_samples = 32;  // random-play frames for weight scaling; 0 skips it

  void validate() const {
    if (!(gamma > 0 && gamma < 1)) throw ConfigError("gamma must lie in (0,1)");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (batch_size == 0 || buffer_capacity < batch_size)
      throw ConfigError("batch_size must be positive and not exceed buffer_capacity");
    if (target_update_every == 0 || train_every == 0 || checkpoint_every == 0 || eval_episodes == 0)
      throw ConfigError("update, train, checkpoint and evaluation periods must be positive");
    if (eps_start < 0 || eps_start > 1 || eps_end < 0 || eps_end > 1)
      throw ConfigError("epsilon bounds must lie in [0,1]");
    if (eps_decay_fraction < 0 || eps_decay_fraction > 1)
      throw ConfigError("eps_decay_fraction must lie in [0,1]");
  }
};

/// Linear decay from eps_start to eps_end over the first
/// eps_decay_fraction * total_steps environment steps.
inline Real epsilon_at(const TrainConfig& cfg, std::size_t step) {
  const Real span = cfg.eps_decay_fraction * static_cast<Real>(cfg.total_steps);
  if (span <= 0) return cfg.eps_end;
  const Real f = static_cast<Real>(step) / span;
  if (f >= 1) return cfg.eps_end;
  return cfg.eps_start + f * (cfg.eps_end - cfg.eps_start);
}

class Adam {
 public:
  Adam(ParameterSet& params, Real lr, Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8)
      : params_(params), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& [n, v] : params.entries()) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  void step() {
    ++t_;
    const Real c1 = 1.0 - std::pow(b1_, static_cast<Real>(t_));
    const Real c2 = 1.0 - std::pow(b2_, static_cast<Real>(t_));
    auto& entries = params_.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      ad::Var p = entries[i].second;
      if (!p.has_grad()) continue;
      auto& val = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t k = 0; k < val.size(); ++k) {
        m_[i][k] = b1_ * m_[i][k] + (1 - b1_) * g[k];
        v_[i][k] = b2_ * v_[i][k] + (1 - b2_) * g[k] * g[k];
        val[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  ParameterSet& params_;
  Real lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<DenseArray> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline Real clip_grad_norm(ParameterSet& params, Real max_norm) {
  Real s = 0;
  for (const auto& e : params.entries()) {
    ad::Var v = e.second;
    if (!v.has_grad()) continue;
    for (Real g : v.grad().values()) s += g * g;
  }
  const Real norm = std::sqrt(s);
  if (max_norm > 0 && norm > max_norm) {
    const Real k = max_norm / norm;
    for (const auto& e : params.entries()) {
      ad::Var v = e.second;
      if (!v.has_grad()) continue;
      for (auto& g : v.grad().values()) g *= k;
    }
  }
  return norm;
}

/// Stacks [C,H,W] images into [B,C,H,W].
inline DenseArray stack(const std::vector<const DenseArray*>& images) {
  if (images.empty()) throw DimensionError("stack: no images");
  Shape s{images.size()};
  s.insert(s.end(), images[0]->shape().begin(), images[0]->shape().end());
  DenseArray out(s);
  const std::size_t n = images[0]->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != images[0]->shape()) throw DimensionError("stack: ragged images");
    std::copy_n(images[i]->data(), n, out.data() + i * n);
  }
  return out;
}

inline std::pair<DenseArray, DenseArray> stack_observations(const std::vector<const Observation*>& obs) {
  std::vector<const DenseArray*> bev, lidar;
  for (const auto* o : obs) {
    bev.push_back(&o->bev);
    lidar.push_back(&o->lidar_grid);
  }
  return {stack(bev), stack(lidar)};
}

/// y = r for terminal transitions, r + gamma * max_a' Q_target(s', a') otherwise.
inline DenseArray bellman_target(const std::vector<Real>& rewards, const std::vector<bool>& terminal,
                                 const DenseArray& next_q, Real gamma) {
  if (next_q.rank() != 2 || next_q.dim(0) != rewards.size() || terminal.size() != rewards.size())
    throw DimensionError("bellman_target: batch sizes disagree");
  DenseArray y({rewards.size()});
  for (std::size_t b = 0; b < rewards.size(); ++b) {
    Real best = next_q(b, 0);
    for (std::size_t a = 1; a < next_q.dim(1); ++a) best = std::max(best, next_q(b, a));
    y[b] = terminal[b] ? rewards[b] : rewards[b] + gamma * best;
  }
  return y;
}

/// Index of the largest entry; ties go to the lowest index.
inline int argmax(const Real* q, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (q[i] > q[best]) best = i;
  return static_cast<int>(best);
}

inline int select_action(QNetwork& net, const Observation& obs, Real eps, Rng& rng) {
  if (eps < 0 || eps > 1) throw ConfigError("select_action: eps must lie in [0,1]");
  std::uniform_real_distribution<Real> u(0.0, 1.0);
  const int n = static_cast<int>(net.config().actions);
  if (eps > 0 && u(rng) < eps) return std::uniform_int_distribution<int>(0, n - 1)(rng);
  auto q = net.q_values(obs.bev, obs.lidar_grid);
  return argmax(q.values.data(), q.values.size());
}

/// Online/target pair with the optimizer that updates every trainable
/// parameter, membership banks and decoder included.
class DqnTrainer {
 public:
  DqnTrainer(QNetwork& online, QNetwork& target, TrainConfig cfg, std::uint64_t seed)
      : online_(online), target_(target), cfg_(cfg), rng_(seed), adam_(online.params(), cfg.lr) {
    cfg_.validate();
    target_.copy_from(online_);
  }

  /// One gradient step on a uniform minibatch; nullopt when the buffer holds
  /// fewer than batch_size transitions.
  std::optional<Real> train_step(const ReplayBuffer& buffer) {
    const std::size_t B = cfg_.batch_size;
    if (buffer.size() < B) return std::nullopt;
    std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
    std::vector<const Observation*> obs, next;
    std::vector<int> actions;
    std::vector<Real> rewards;
    std::vector<bool> terminal;
    for (std::size_t i = 0; i < B; ++i) {
      const auto& t = buffer[pick(rng_)];
      obs.push_back(t.obs.get());
      next.push_back(t.next_obs.get());
      actions.push_back(t.action);
      rewards.push_back(t.reward);
      terminal.push_back(t.terminal);
    }
    DenseArray y;
    {
      ad::NoGradGuard no_grad;
      auto [nb, nl] = stack_observations(next);
      y = bellman_target(rewards, terminal, target_.forward(nb, nl).q.value(), cfg_.gamma);
    }
    auto [ob, ol] = stack_observations(obs);
    online_.params().zero_grad();
    auto q = online_.forward(ob, ol).q;
    auto loss = ad::mse(ad::gather_rows(q, actions), y);
    ad::backward(loss);
    last_grad_norm_ = clip_grad_norm(online_.params(), cfg_.grad_clip);
    adam_.step();
    ++updates_;
    if (updates_ % cfg_.target_update_every == 0) target_.copy_from(online_);
    const Real l = loss.value()[0];
    if (!std::isfinite(l)) throw NumericError("train_step: non-finite loss");
    return l;
  }

  std::uint64_t updates() const { return updates_; }
  Real last_grad_norm() const { return last_grad_norm_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  QNetwork& online_;
  QNetwork& target_;
  TrainConfig cfg_;
  Rng rng_;
  Adam adam_;
  std::uint64_t updates_ = 0;
  Real last_grad_norm_ = 0;
};

struct EvalMetrics {
  Real avg_reward = 0;  // mean cumulative reward per episode
  Real avg_speed = 0;   // mean over all steps
  Real crash_freq = 0;  // crashes per step
  std::size_t episodes = 0, steps = 0, crashes = 0;
};

/// Chooses one action per observation for a batch of live environments.
using BatchPolicy = std::function<std::vector<int>(const std::vector<const Observation*>&)>;

/// Runs n episodes in lockstep, environment i seeded with seed_base + i.
inline EvalMetrics evaluate(const BatchPolicy& policy, const highway::HighwayConfig& env_cfg,
                            std::size_t episodes, std::uint64_t seed_base) {
  std::vector<highway::HighwayEnv> envs(episodes, highway::HighwayEnv(env_cfg));
  std::vector<Observation> obs(episodes);
  std::vector<Real> returns(episodes, 0.0);
  std::vector<bool> live(episodes, true);
  for (std::size_t i = 0; i < episodes; ++i) obs[i] = envs[i].reset(seed_base + i);
  EvalMetrics m;
  m.episodes = episodes;
  Real speed_sum = 0;
  for (;;) {
    std::vector<std::size_t> idx;
    std::vector<const Observation*> batch;
    for (std::size_t i = 0; i < episodes; ++i)
      if (live[i]) {
        idx.push_back(i);
        batch.push_back(&obs[i]);
      }
    if (idx.empty()) break;
    const auto actions = policy(batch);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t i = idx[k];
      auto r = envs[i].step(static_cast<highway::Action>(actions[k]));
      returns[i] += r.reward;
      speed_sum += r.speed;
      ++m.steps;
      if (r.crashed) ++m.crashes;
      obs[i] = std::move(r.obs);
      if (r.terminal) live[i] = false;
    }
  }
  for (Real r : returns) m.avg_reward += r;
  m.avg_reward /= static_cast<Real>(episodes);
  m.avg_speed = speed_sum / static_cast<Real>(m.steps);
  m.crash_freq = static_cast<Real>(m.crashes) / static_cast<Real>(m.steps);
  return m;
}

/// Greedy evaluation of a network (eps = 0).
inline EvalMetrics evaluate(QNetwork& net, const highway::HighwayConfig& env_cfg, std::size_t episodes,
                            std::uint64_t seed_base) {
  net.reseed_encoder(seed_base);
  BatchPolicy greedy = [&net](const std::vector<const Observation*>& batch) {
    ad::NoGradGuard no_grad;
    auto [b, l] = stack_observations(batch);
    auto q = net.forward(b, l).q.value();
    std::vector<int> a(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) a[i] = argmax(q.data() + i * q.dim(1), q.dim(1));
    return a;
  };
  return evaluate(greedy, env_cfg, episodes, seed_base);
}

}  // namespace sfqn::rl
