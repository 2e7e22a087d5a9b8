#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sfqn/dqn.hpp"
#include "sfqn/highway.hpp"
#include "sfqn/qnet.hpp"

namespace sfqn {

/// Everything needed to replay a run: variant, network, training and
/// environment settings, seeds and the output directory.
struct ExperimentConfig {
  std::string variant = "fuzzy";
  MembershipKind membership = MembershipKind::triangular;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir = "runs/default";
  NetworkConfig net;
  rl::TrainConfig train;
  highway::HighwayConfig env;

  /// Variant with the membership key applied; the gaussian variants always
  /// use Gaussian sets.
  NetworkVariant network_variant() const {
    auto v = NetworkVariant::parse(variant);
    if (v.encoder == EncoderKind::fuzzy && v.membership == MembershipKind::triangular) v.membership = membership;
    return v;
  }

  /// Network settings with the observation size taken from the environment.
  NetworkConfig network_config() const {
    NetworkConfig n = net;
    n.obs_channels = 1;
    n.obs_height = env.grid_height;
    n.obs_width = env.grid_width;
    n.actions = highway::kActionCount;
    return n;
  }

  void validate() const {
    network_variant().validate();
    if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (net.memberships == 0 || net.population == 0 || net.time_steps == 0)
      throw ConfigError("N, M and T must be positive");
    if (net.embed_dim % net.heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (!(net.neuron.tau >= 1) || !(net.neuron.theta_pos > 0) || !(net.neuron.theta_neg < 0) ||
        !(net.neuron.alpha > 0))
      throw ConfigError("neuron: tau >= 1, theta_pos > 0, theta_neg < 0, surrogate_alpha > 0");
    network_config().token_grid();
    train.validate();
    env.validate();
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// shortest text that parses back to the same double
inline std::string fmt_real(Real v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class I>
I parse_int(const std::string& key, const std::string& s) {
  I v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

inline Real parse_real(const std::string& key, const std::string& s) {
  try {
    std::size_t n = 0;
    const Real v = std::stod(s, &n);
    if (n != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
}

template <class I>
std::vector<I> parse_list(const std::string& key, const std::string& s) {
  std::vector<I> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<I>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

template <class I>
std::string fmt_list(const std::vector<I>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Key {
  std::string section;
  std::string name;
  std::string doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define SFQN_INT_KEY(sec, key, doc, T, expr)                                              \
  Key {                                                                                   \
    sec, key, doc, [](const ExperimentConfig& c) { return std::to_string(c.expr); },      \
        [](ExperimentConfig& c, const std::string& s) { c.expr = parse_int<T>(key, s); } \
  }
#define SFQN_REAL_KEY(sec, key, doc, expr)                                            \
  Key {                                                                               \
    sec, key, doc, [](const ExperimentConfig& c) { return fmt_real(c.expr); },        \
        [](ExperimentConfig& c, const std::string& s) { c.expr = parse_real(key, s); } \
  }

inline const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      {"experiment", "variant", "fuzzy | fuzzy-ws | gaussian | gaussian-ws | rate | rate-neural | direct | nonspiking",
       [](const ExperimentConfig& c) { return c.variant; },
       [](ExperimentConfig& c, const std::string& s) {
         NetworkVariant::parse(s);
         c.variant = s;
       }},
      {"experiment", "membership", "triangular | gaussian (fuzzy encoders)",
       [](const ExperimentConfig& c) { return to_string(c.membership); },
       [](ExperimentConfig& c, const std::string& s) { c.membership = parse_membership_kind(s); }},
      {"experiment", "seeds", "comma-separated; runs sequentially",
       [](const ExperimentConfig& c) { return fmt_list(c.seeds); },
       [](ExperimentConfig& c, const std::string& s) { c.seeds = parse_list<std::uint64_t>("seeds", s); }},
      {"experiment", "output_dir", "checkpoints, metrics and manifest",
       [](const ExperimentConfig& c) { return c.output_dir; },
       [](ExperimentConfig& c, const std::string& s) { c.output_dir = s; }},

      SFQN_INT_KEY("network", "N", "membership functions per pixel", std::size_t, net.memberships),
      SFQN_INT_KEY("network", "M", "output population size per action", std::size_t, net.population),
      SFQN_INT_KEY("network", "T", "simulation window in time steps", std::size_t, net.time_steps),
      SFQN_REAL_KEY("network", "surrogate_alpha", "arctangent surrogate sharpness", net.neuron.alpha),
      SFQN_REAL_KEY("network", "tau", "LIF membrane time constant", net.neuron.tau),
      SFQN_REAL_KEY("network", "theta_pos", "positive firing threshold", net.neuron.theta_pos),
      SFQN_REAL_KEY("network", "theta_neg", "negative threshold of ternary neurons", net.neuron.theta_neg),
      {"network", "conv_channels", "output channels per conv layer",
       [](const ExperimentConfig& c) { return fmt_list(c.net.conv_channels); },
       [](ExperimentConfig& c, const std::string& s) {
         c.net.conv_channels = parse_list<std::size_t>("conv_channels", s);
       }},
      SFQN_INT_KEY("network", "kernel", "conv kernel size", std::size_t, net.kernel),
      SFQN_INT_KEY("network", "stride", "conv stride", std::size_t, net.stride),
      SFQN_INT_KEY("network", "padding", "conv zero padding", std::size_t, net.padding),
      SFQN_INT_KEY("network", "embed_dim", "token width", std::size_t, net.embed_dim),
      SFQN_INT_KEY("network", "heads", "attention heads", std::size_t, net.heads),
      SFQN_INT_KEY("network", "ffn_dim", "fusion feed-forward width", std::size_t, net.ffn_dim),
      SFQN_INT_KEY("network", "hidden_units", "spiking FC layer width", std::size_t, net.hidden_units),
      SFQN_INT_KEY("network", "decoder_hidden", "neural decoder hidden width", std::size_t, net.decoder_hidden),

      SFQN_REAL_KEY("train", "gamma", "discount factor", train.gamma),
      SFQN_REAL_KEY("train", "lr", "Adam learning rate", train.lr),
      SFQN_INT_KEY("train", "batch_size", "minibatch size", std::size_t, train.batch_size),
      SFQN_INT_KEY("train", "buffer_capacity", "replay ring capacity", std::size_t, train.buffer_capacity),
      SFQN_INT_KEY("train", "target_update_every", "gradient steps between target copies", std::size_t,
                   train.target_update_every),
      SFQN_REAL_KEY("train", "eps_start", "initial exploration rate", train.eps_start),
      SFQN_REAL_KEY("train", "eps_end", "final exploration rate", train.eps_end),
      SFQN_REAL_KEY("train", "eps_decay_fraction", "share of total_steps for the linear decay",
                    train.eps_decay_fraction),
      SFQN_INT_KEY("train", "total_steps", "environment steps per seed", std::size_t, train.total_steps),
      SFQN_INT_KEY("train", "learning_starts", "environment steps before the first update", std::size_t,
                   train.learning_starts),
      SFQN_INT_KEY("train", "train_every", "environment steps per gradient step", std::size_t,
                   train.train_every),
      SFQN_REAL_KEY("train", "grad_clip", "global gradient-norm clip, 0 disables", train.grad_clip),
      SFQN_INT_KEY("train", "checkpoint_every", "environment steps between checkpoints", std::size_t,
                   train.checkpoint_every),
      SFQN_INT_KEY("train", "eval_episodes", "greedy test episodes per checkpoint", std::size_t,
                   train.eval_episodes),
      SFQN_INT_KEY("train", "eval_seed", "seed of the first test environment", std::uint64_t, train.eval_seed),
      SFQN_INT_KEY("train", "calibration_samples",
                   "random-play frames used to scale spiking layers into their firing band, 0 skips",
                   std::size_t, train.calibration_samples),

      SFQN_INT_KEY("env", "env.lanes", "number of lanes", int, env.lanes),
      SFQN_REAL_KEY("env", "env.lane_width", "metres", env.lane_width),
      SFQN_INT_KEY("env", "env.vehicles", "traffic vehicles", int, env.vehicles),
      SFQN_INT_KEY("env", "env.horizon", "decisions per episode", int, env.horizon),
      SFQN_REAL_KEY("env", "env.dt", "seconds per decision", env.dt),
      SFQN_REAL_KEY("env", "env.speed_delta", "FASTER/SLOWER increment, m/s", env.speed_delta),
      SFQN_REAL_KEY("env", "env.v_min", "m/s", env.v_min),
      SFQN_REAL_KEY("env", "env.v_max", "m/s", env.v_max),
      SFQN_REAL_KEY("env", "env.ego_speed", "initial ego speed, m/s", env.ego_speed),
      SFQN_INT_KEY("env", "env.ego_lane", "initial ego lane, -1 draws it from the seed", int, env.ego_lane),
      SFQN_REAL_KEY("env", "env.traffic_speed_min", "m/s", env.traffic_speed_min),
      SFQN_REAL_KEY("env", "env.traffic_speed_max", "m/s", env.traffic_speed_max),
      SFQN_REAL_KEY("env", "env.vehicle_length", "metres", env.vehicle_length),
      SFQN_REAL_KEY("env", "env.vehicle_width", "metres", env.vehicle_width),
      SFQN_INT_KEY("env", "env.lane_change_steps", "decisions per lane change", int, env.lane_change_steps),
      SFQN_REAL_KEY("env", "env.reward_speed", "weight of the normalised speed reward", env.reward_speed),
      SFQN_REAL_KEY("env", "env.reward_crash", "crash penalty", env.reward_crash),
      SFQN_REAL_KEY("env", "env.spawn_behind", "traffic spawn window behind the ego, metres", env.spawn_behind),
      SFQN_REAL_KEY("env", "env.spawn_ahead", "traffic spawn window ahead of the ego, metres", env.spawn_ahead),
      SFQN_REAL_KEY("env", "env.spawn_gap", "minimum same-lane gap at reset, metres", env.spawn_gap),
      SFQN_INT_KEY("env", "env.grid_height", "observation rows", std::size_t, env.grid_height),
      SFQN_INT_KEY("env", "env.grid_width", "observation columns", std::size_t, env.grid_width),
      SFQN_REAL_KEY("env", "env.res_long", "metres per row", env.res_long),
      SFQN_REAL_KEY("env", "env.res_lat", "metres per column", env.res_lat),
      SFQN_INT_KEY("env", "env.anchor_row", "ego row", std::size_t, env.anchor_row),
      SFQN_INT_KEY("env", "env.anchor_col", "ego column", std::size_t, env.anchor_col),
      SFQN_INT_KEY("env", "env.lidar_sectors", "angular sectors", int, env.lidar_sectors),
      SFQN_REAL_KEY("env", "env.lidar_range", "metres", env.lidar_range),
      SFQN_REAL_KEY("env", "env.v_rel_min", "relative speed mapped to 0", env.v_rel_min),
      SFQN_REAL_KEY("env", "env.v_rel_max", "relative speed mapped to 1", env.v_rel_max),
  };
  return k;
}

#undef SFQN_INT_KEY
#undef SFQN_REAL_KEY

}  // namespace config_detail

/// Plain key = value text; '#' starts a comment. Unknown keys and repeated
/// keys are errors. Missing keys keep their defaults.
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  std::vector<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = config_detail::trim(line.substr(0, eq));
    const auto value = config_detail::trim(line.substr(eq + 1));
    const config_detail::Key* k = nullptr;
    for (const auto& cand : config_detail::keys())
      if (cand.name == key) k = &cand;
    if (!k) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen.push_back(key);
    k->set(c, value);
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

/// Every key, grouped by section, with its documentation as a comment.
inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_detail::keys()) {
    if (k.section != section) {
      os << (section.empty() ? "" : "\n") << "# [" << k.section << "]\n";
      section = k.section;
    }
    os << k.name << " = " << k.get(c) << "  # " << k.doc << '\n';
  }
  return os.str();
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  for (const auto& k : config_detail::keys())
    if (k.get(a) != k.get(b)) return false;
  return true;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : config_detail::keys()) out.push_back(k.name);
  return out;
}

/// FNV-1a over the serialized form.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : serialize_config(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace sfqn
