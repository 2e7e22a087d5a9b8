#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "sfqn/checkpoint.hpp"
#include "sfqn/config.hpp"
#include "sfqn/dqn.hpp"
#include "sfqn/fuzzy_codec.hpp"
#include "sfqn/highway.hpp"
#include "sfqn/qnet.hpp"

namespace sfqn {

inline constexpr const char* kVersion = "0.1.0";

struct MetricsRow {
  std::size_t step = 0;
  std::uint64_t seed = 0;
  rl::EvalMetrics eval;
  Real eps = 0;
  Real train_loss = 0;  // mean over updates since the previous checkpoint; NaN when none
};

inline std::string fmt_metric(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_metrics_header(std::ostream& os, bool with_variant = false) {
  if (with_variant) os << "variant,";
  os << "step,seed,avg_reward,avg_speed,crash_freq,eps,train_loss\n";
}

inline void write_metrics_row(std::ostream& os, const MetricsRow& r, const std::string& variant = "") {
  if (!variant.empty()) os << variant << ',';
  os << r.step << ',' << r.seed << ',' << fmt_metric(r.eval.avg_reward) << ',' << fmt_metric(r.eval.avg_speed)
     << ',' << fmt_metric(r.eval.crash_freq) << ',' << fmt_metric(r.eps) << ',' << fmt_metric(r.train_loss)
     << '\n';
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw ConfigError("cannot create output directory '" + dir.string() + "'");
  const auto probe = dir / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw ConfigError("output directory '" + dir.string() + "' is not writable");
  }
  std::filesystem::remove(probe, ec);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t seed,
                                             std::size_t step) {
  return dir / "checkpoints" / ("seed" + std::to_string(seed)) / ("step" + std::to_string(step) + ".sfqn");
}

inline void write_manifest(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw ConfigError("cannot write manifest in '" + dir.string() + "'");
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  m << "code_version = " << kVersion << '\n'
    << "config_hash = " << hash << '\n'
    << "variant = " << cfg.network_variant().name() << '\n'
    << "seeds = " << config_detail::fmt_list(cfg.seeds) << '\n';
  std::ofstream c(dir / "config.txt");
  c << serialize_config(cfg);
}

using ProgressFn = std::function<void(const MetricsRow&)>;

/// Frames from uniformly random play, stacked as [n, C, H, W] batches.
inline std::pair<DenseArray, DenseArray> random_play_frames(const highway::HighwayConfig& env_cfg,
                                                            std::size_t n, std::uint64_t seed) {
  highway::HighwayEnv env(env_cfg);
  Rng rng(seed);
  std::uniform_int_distribution<int> act(0, highway::kActionCount - 1);
  std::vector<highway::Observation> frames;
  frames.push_back(env.reset(seed));
  std::uint64_t episode = 1;
  while (frames.size() < n) {
    auto r = env.step(static_cast<highway::Action>(act(rng)));
    frames.push_back(r.terminal ? env.reset(seed + episode++) : std::move(r.obs));
  }
  std::vector<const highway::Observation*> ptrs;
  for (const auto& f : frames) ptrs.push_back(&f);
  return rl::stack_observations(ptrs);
}

/// Trains one seed: environment interaction, replay, periodic checkpoints
/// and greedy evaluation over eval_episodes test environments.
inline std::vector<MetricsRow> train_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                          const std::filesystem::path& dir, const ProgressFn& progress = {}) {
  const auto ncfg = cfg.network_config();
  const auto variant = cfg.network_variant();
  const auto& tc = cfg.train;
  QNetwork online(ncfg, variant, seed);
  QNetwork target(ncfg, variant, seed);
  if (tc.calibration_samples > 0) {
    auto [bev, lidar] = random_play_frames(cfg.env, tc.calibration_samples, seed * 7919 + 3);
    online.calibrate(bev, lidar);
  }
  rl::DqnTrainer trainer(online, target, tc, seed * 0x2545F4914F6CDD1DULL + 7);
  rl::ReplayBuffer buffer(tc.buffer_capacity);
  Rng explore(seed * 0x9E3779B97F4A7C15ULL + 11);
  highway::HighwayEnv env(cfg.env);

  std::uint64_t episode = 0;
  auto next_episode_seed = [&] { return seed * 1000003ULL + episode++; };
  auto obs = std::make_shared<const highway::Observation>(env.reset(next_episode_seed()));
  std::vector<MetricsRow> rows;
  Real loss_sum = 0;
  std::size_t loss_n = 0;

  for (std::size_t step = 1; step <= tc.total_steps; ++step) {
    const Real eps = rl::epsilon_at(tc, step - 1);
    const int a = rl::select_action(online, *obs, eps, explore);
    auto r = env.step(static_cast<highway::Action>(a));
    auto next = std::make_shared<const highway::Observation>(std::move(r.obs));
    // time-limit truncation still bootstraps; only crashes end the return
    buffer.push({obs, a, r.reward, next, r.crashed});
    obs = r.terminal ? std::make_shared<const highway::Observation>(env.reset(next_episode_seed())) : next;

    if (step >= tc.learning_starts && step % tc.train_every == 0)
      if (auto l = trainer.train_step(buffer)) {
        loss_sum += *l;
        ++loss_n;
      }

    if (step % tc.checkpoint_every == 0 || step == tc.total_steps) {
      const auto path = checkpoint_path(dir, seed, step);
      std::filesystem::create_directories(path.parent_path());
      checkpoint::save(path.string(), online.records());
      MetricsRow row;
      row.step = step;
      row.seed = seed;
      row.eval = rl::evaluate(online, cfg.env, tc.eval_episodes, tc.eval_seed);
      row.eps = eps;
      row.train_loss = loss_n ? loss_sum / static_cast<Real>(loss_n) : std::numeric_limits<Real>::quiet_NaN();
      loss_sum = 0;
      loss_n = 0;
      rows.push_back(row);
      if (progress) progress(row);
    }
  }
  return rows;
}

/// Runs every seed in order; writes manifest, checkpoints and metrics.csv.
inline std::vector<MetricsRow> run_training(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  const std::filesystem::path dir(cfg.output_dir);
  ensure_directory(dir);
  write_manifest(cfg, dir);
  std::ofstream csv(dir / "metrics.csv");
  if (!csv) throw ConfigError("cannot write metrics in '" + dir.string() + "'");
  write_metrics_header(csv);
  std::vector<MetricsRow> all;
  for (auto seed : cfg.seeds) {
    for (const auto& row : train_seed(cfg, seed, dir, progress)) {
      write_metrics_row(csv, row);
      all.push_back(row);
    }
    csv.flush();
  }
  return all;
}

struct AblationEntry {
  std::string label;    // row label in the comparison CSV
  std::string variant;  // network variant trained for it
};

/// The ablation matrix. The "none+none" row keeps the spiking network and
/// feeds raw intensities to its first layer.
inline std::vector<AblationEntry> ablation_matrix() {
  return {{"fuzzy+neural", "fuzzy"},
          {"fuzzy+weighted_sum", "fuzzy-ws"},
          {"none+none", "direct"},
          {"gaussian+neural", "gaussian"},
          {"rate+weighted_sum", "rate"}};
}

/// Trains each matrix entry in its own subdirectory and writes
/// ablation.csv with one row per (variant, seed, checkpoint).
inline std::vector<std::pair<std::string, MetricsRow>> run_ablation(
    const ExperimentConfig& cfg, const std::vector<AblationEntry>& matrix = ablation_matrix(),
    const std::function<void(const std::string&, const MetricsRow&)>& progress = {}) {
  cfg.validate();
  const std::filesystem::path dir(cfg.output_dir);
  ensure_directory(dir);
  write_manifest(cfg, dir);
  std::ofstream csv(dir / "ablation.csv");
  if (!csv) throw ConfigError("cannot write ablation results in '" + dir.string() + "'");
  write_metrics_header(csv, true);
  std::vector<std::pair<std::string, MetricsRow>> out;
  for (const auto& e : matrix) {
    ExperimentConfig sub = cfg;
    sub.variant = e.variant;
    if (e.variant == "fuzzy" || e.variant == "fuzzy-ws") sub.membership = MembershipKind::triangular;
    sub.output_dir = (dir / e.label).string();
    ProgressFn p;
    if (progress) p = [&](const MetricsRow& r) { progress(e.label, r); };
    for (const auto& row : run_training(sub, p)) {
      write_metrics_row(csv, row, e.label);
      out.emplace_back(e.label, row);
    }
    csv.flush();
  }
  return out;
}

/// Greedy evaluation of a saved checkpoint under the config's variant.
inline rl::EvalMetrics evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& path) {
  QNetwork net(cfg.network_config(), cfg.network_variant(), cfg.seeds.front());
  net.load(checkpoint::load(path));
  return rl::evaluate(net, cfg.env, cfg.train.eval_episodes, cfg.train.eval_seed);
}

/// Membership curves stored under "<modality>.membership.<kind>", sampled at
/// `samples` evenly spaced points of [0,1]. Columns: p, mu_1..mu_N.
inline void write_membership_csv(std::ostream& os, const std::vector<checkpoint::Record>& records,
                                 const std::string& modality = "bev", std::size_t samples = 256) {
  const checkpoint::Record* rec = nullptr;
  MembershipKind kind = MembershipKind::triangular;
  for (auto k : {MembershipKind::triangular, MembershipKind::gaussian})
    if (auto r = checkpoint::find(records, modality + ".membership." + to_string(k))) {
      rec = r;
      kind = k;
    }
  if (!rec) throw FormatError("checkpoint has no membership record for modality '" + modality + "'");
  if (samples < 2) throw ConfigError("need at least two samples");
  const auto bank = MembershipBank::from_free(kind, rec->value);
  os << 'p';
  for (std::size_t i = 1; i <= bank.size(); ++i) os << ",mu_" << i;
  os << '\n';
  for (std::size_t s = 0; s < samples; ++s) {
    const Real p = static_cast<Real>(s) / static_cast<Real>(samples - 1);
    os << fmt_metric(p);
    for (Real mu : membership_eval(bank, p)) os << ',' << fmt_metric(mu);
    os << '\n';
  }
}

}  // namespace sfqn
