// Command-line harness: training, evaluation, ablations, analysis tables and
// membership curve export.
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sfqn/sfqn.hpp"

namespace {

using namespace sfqn;

ExperimentConfig config_from(const std::string& path, const std::string& variant, const std::string& out) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  if (!variant.empty()) {
    NetworkVariant::parse(variant);
    cfg.variant = variant;
  }
  if (!out.empty()) cfg.output_dir = out;
  cfg.validate();
  return cfg;
}

void print_row(const std::string& label, const MetricsRow& r) {
  std::cerr << (label.empty() ? "" : label + " ") << "seed " << r.seed << " step " << r.step
            << "  reward " << fmt_metric(r.eval.avg_reward) << "  speed " << fmt_metric(r.eval.avg_speed)
            << "  crash " << fmt_metric(r.eval.crash_freq) << "  loss " << fmt_metric(r.train_loss) << '\n';
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw ConfigError("cannot write '" + path + "'");
  return file;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking fuzzy Q-network experiments"};
  app.require_subcommand(1);

  std::string config_path, variant, out_dir, checkpoint_path, out_file, modality = "bev";
  bool quiet = false, print_config = false;

  auto* train = app.add_subcommand("train", "train every configured seed; writes checkpoints and metrics.csv");
  train->add_option("config", config_path, "key = value config file");
  train->add_option("--variant", variant, "override the config variant");
  train->add_option("--out", out_dir, "override output_dir");
  train->add_flag("--quiet", quiet, "no progress on stderr");
  train->add_flag("--print-config", print_config, "print the effective config and exit");

  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  eval->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("--config", config_path, "config the checkpoint was trained with");
  eval->add_option("--variant", variant, "override the config variant");

  auto* ablate = app.add_subcommand("ablate", "train the five-variant ablation matrix; writes ablation.csv");
  ablate->add_option("config", config_path, "key = value config file");
  ablate->add_option("--out", out_dir, "override output_dir");
  ablate->add_flag("--quiet", quiet, "no progress on stderr");

  std::uint64_t C = 1, H = 32, W = 32, T = 5, N = 3, M = 5, A = 5;
  analysis::ConvSpec conv;
  bool csv = false;
  auto* cap = app.add_subcommand("analyze-capacity", "information capacity of each representation");
  auto* cost = app.add_subcommand("analyze-cost", "multiplications per stage");
  for (auto* sub : {cap, cost}) {
    sub->add_option("-C,--channels", C, "input channels")->capture_default_str();
    sub->add_option("-H,--height", H, "input height")->capture_default_str();
    sub->add_option("-W,--width", W, "input width")->capture_default_str();
    sub->add_option("-N,--memberships", N, "membership functions")->capture_default_str();
    sub->add_option("-M,--population", M, "output population size")->capture_default_str();
    sub->add_flag("--csv", csv, "CSV instead of a table");
  }
  cap->add_option("-T,--time-steps", T, "simulation window")->capture_default_str();
  cost->add_option("--out-channels", conv.out_channels, "first conv output channels")->capture_default_str();
  cost->add_option("--kernel", conv.kernel, "first conv kernel")->capture_default_str();
  cost->add_option("--stride", conv.stride, "first conv stride")->capture_default_str();
  cost->add_option("--padding", conv.padding, "first conv padding")->capture_default_str();
  cost->add_option("--actions", A, "number of actions")->capture_default_str();

  auto* plot = app.add_subcommand("plot-membership", "sample learned membership curves as CSV");
  plot->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  plot->add_option("--modality", modality, "bev or lidar")->capture_default_str();
  plot->add_option("-o,--output", out_file, "CSV path, stdout by default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      auto cfg = config_from(config_path, variant, out_dir);
      if (print_config) {
        std::cout << serialize_config(cfg);
        return 0;
      }
      ProgressFn p;
      if (!quiet) p = [](const MetricsRow& r) { print_row("", r); };
      run_training(cfg, p);
      std::cout << (std::filesystem::path(cfg.output_dir) / "metrics.csv").string() << '\n';
    } else if (*eval) {
      auto cfg = config_from(config_path, variant, "");
      auto m = evaluate_checkpoint(cfg, checkpoint_path);
      std::cout << "avg_reward,avg_speed,crash_freq\n"
                << fmt_metric(m.avg_reward) << ',' << fmt_metric(m.avg_speed) << ','
                << fmt_metric(m.crash_freq) << '\n';
    } else if (*ablate) {
      auto cfg = config_from(config_path, "", out_dir);
      std::function<void(const std::string&, const MetricsRow&)> p;
      if (!quiet) p = [](const std::string& l, const MetricsRow& r) { print_row(l, r); };
      run_ablation(cfg, ablation_matrix(), p);
      std::cout << (std::filesystem::path(cfg.output_dir) / "ablation.csv").string() << '\n';
    } else if (*cap) {
      auto r = analysis::capacity(C, H, W, T, N, M);
      csv ? analysis::write_capacity_csv(std::cout, r) : analysis::print_capacity_table(std::cout, r);
    } else if (*cost) {
      auto r = analysis::cost_model(C, H, W, conv, N, M, A);
      csv ? analysis::write_cost_csv(std::cout, r) : analysis::print_cost_table(std::cout, r);
    } else if (*plot) {
      std::ofstream f;
      write_membership_csv(open_out(out_file, f), checkpoint::load(checkpoint_path), modality);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
