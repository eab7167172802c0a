// Command-line driver: pretrain, adapt, ablate, replay.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "agile/harness.hpp"

namespace fs = std::filesystem;
using namespace agile;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/out";
  std::string variant;
  std::string preset;
  bool dry_run = false;
  std::string policy_path;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "experiment config JSON")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "experiment seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--variant", c.variant, "baseline | loft | anchor_only | residual_only | ours");
  app->add_option("--preset", c.preset, "reference path preset");
  app->add_flag("--dry-run", c.dry_run, "validate the configuration and exit");
}

ExperimentConfig load_config(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("cannot parse ") + c.config_path + ": " + e.what());
    }
  }
  if (c.seed) j["seed"] = *c.seed;
  if (!c.variant.empty()) j["variant"] = c.variant;
  if (!c.preset.empty()) j["preset"] = c.preset;
  if (!c.policy_path.empty()) j["policy_checkpoint"] = c.policy_path;
  ExperimentConfig cfg = experiment_config_from_json(j);
  RefTrajectory traj = preset(cfg.preset);
  check_observability(cfg.plant, traj, cfg.ats.alpha_min, cfg.bptt.dt);
  return cfg;
}

void save_config(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << '\n';
}

Policy load_or_pretrain(const ExperimentConfig& cfg) {
  if (!cfg.policy_checkpoint.empty()) {
    std::ifstream in(cfg.policy_checkpoint);
    if (!in) throw ConfigError("cannot open policy checkpoint " + cfg.policy_checkpoint);
    return policy_from_json(nlohmann::json::parse(in));
  }
  std::fprintf(stderr, "pretraining (%d updates)\n", cfg.pretrain.max_updates);
  return pretrain_policy(cfg, [](int it, double j) {
    if ((it + 1) % 100 == 0) std::fprintf(stderr, "  update %d  J %.4f\n", it + 1, j);
  });
}

void print_iteration(const IterationMetrics& m) {
  std::printf("iter %2d  alpha %.3f -> %.3f  rmse %.3f m  peak %.2f m/s  lap %.2f s%s  Emax %.4f  res %.2e  J %.3f%s\n",
              m.iter, m.alpha, m.alpha_next, m.rmse, m.peak_speed, m.lap_time, m.lap_measured ? "" : "*",
              m.window_max_E, m.residual_loss, m.objective, m.diverged ? "  DIVERGED" : "");
  std::fflush(stdout);
}

int cmd_pretrain(const Common& c, int updates) {
  ExperimentConfig cfg = load_config(c);
  if (updates > 0) cfg.pretrain.max_updates = updates;
  if (c.dry_run) {
    std::cout << to_json(cfg).dump(2) << '\n';
    return 0;
  }
  save_config(cfg, c.out);
  const Policy pol = pretrain_policy(cfg, [](int it, double j) {
    if ((it + 1) % 100 == 0) {
      std::printf("update %d  J %.4f\n", it + 1, j);
      std::fflush(stdout);
    }
  });
  RefTrajectory traj = preset(cfg.preset);
  for (double a : {cfg.ats.alpha_max, 4.0, 2.0, 1.0}) {
    traj.alpha = a;
    std::printf("alpha %.2f  nominal tracking rmse %.4f m\n", a, tracking_rmse(pol, HybridModel::nominal(), traj, 8.0));
  }
  const fs::path path = fs::path(c.out) / "policy.json";
  std::ofstream(path) << to_json(pol).dump();
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_adapt(const Common& c, int iterations) {
  ExperimentConfig cfg = load_config(c);
  if (iterations > 0) cfg.n_iterations = iterations;
  if (c.dry_run) {
    std::cout << to_json(cfg).dump(2) << '\n';
    return 0;
  }
  save_config(cfg, c.out);
  const Policy pol = load_or_pretrain(cfg);
  const ExperimentResult res = run_experiment(cfg, c.out, &pol, print_iteration);
  std::cout << res.summary.dump(2) << '\n';
  return 0;
}

int cmd_ablate(const Common& c, int iterations) {
  ExperimentConfig cfg = load_config(c);
  if (iterations > 0) cfg.n_iterations = iterations;
  if (c.dry_run) {
    std::cout << to_json(cfg).dump(2) << '\n';
    return 0;
  }
  save_config(cfg, c.out);
  const Policy pol = load_or_pretrain(cfg);
  std::ofstream table(fs::path(c.out) / "ablation.csv");
  table << "variant,final_alpha,final_lap_time,final_rmse,speedup,unsafe_iterations,diverged_iterations\n";
  std::vector<Variant> variants = all_variants();
  if (!c.variant.empty()) variants = {cfg.variant};
  for (Variant v : variants) {
    ExperimentConfig vc = cfg;
    vc.variant = v;
    std::printf("== %s\n", to_string(v).c_str());
    const ExperimentResult res = run_experiment(vc, (fs::path(c.out) / to_string(v)).string(), &pol, print_iteration);
    const auto& s = res.summary;
    table << to_string(v) << ',' << s["final_alpha"].get<double>() << ',' << s["final_lap_time"].get<double>() << ','
          << s["final_rmse"].get<double>() << ',' << s["speedup"].get<double>() << ','
          << s["unsafe_iterations"].get<int>() << ',' << s["diverged_iterations"].get<int>() << '\n';
  }
  std::printf("wrote %s\n", (fs::path(c.out) / "ablation.csv").c_str());
  return 0;
}

int cmd_replay(const Common& c, double alpha, double seconds) {
  ExperimentConfig cfg = load_config(c);
  if (cfg.policy_checkpoint.empty()) throw ConfigError("replay needs --policy or policy_checkpoint");
  if (alpha > 0.0) cfg.ats.alpha_init = alpha;
  if (seconds > 0.0) cfg.rollout_seconds = seconds;
  cfg.validate();
  if (c.dry_run) {
    std::cout << to_json(cfg).dump(2) << '\n';
    return 0;
  }
  save_config(cfg, c.out);
  World world(cfg, load_or_pretrain(cfg));
  const FlightLog flight = world.fly(cfg.rollout_seconds);
  std::ofstream steps(fs::path(c.out) / "steps.csv");
  write_steps_header(steps);
  write_steps_csv(steps, flight);
  double sq = 0.0;
  for (const auto& s : flight.steps) sq += (s.x_true.p - s.ref.p).squaredNorm();
  const nlohmann::json summary = {
      {"alpha", cfg.ats.alpha_init},
      {"seconds", flight.steps.size() * cfg.bptt.dt},
      {"rmse", flight.steps.empty() ? 0.0 : std::sqrt(sq / flight.steps.size())},
      {"peak_speed", peak_speed(flight, cfg.bptt.dt)},
      {"lap_time", flight.lap_time},
      {"diverged", flight.diverged}};
  std::ofstream(fs::path(c.out) / "summary.json") << summary.dump(2) << '\n';
  std::cout << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agile flight adaptation experiments"};
  app.require_subcommand(1);

  Common c_pre, c_adapt, c_abl, c_rep;
  int pre_updates = 0, adapt_iters = 0, abl_iters = 0;
  double rep_alpha = 0.0, rep_seconds = 0.0;

  auto* pre = app.add_subcommand("pretrain", "pretrain the policy on the nominal model");
  add_common(pre, c_pre);
  pre->add_option("--updates", pre_updates, "override pretrain.max_updates");

  auto* adapt = app.add_subcommand("adapt", "run the adaptation loop for one variant");
  add_common(adapt, c_adapt);
  adapt->add_option("--policy", c_adapt.policy_path, "pretrained policy checkpoint")->check(CLI::ExistingFile);
  adapt->add_option("--iterations", adapt_iters, "override n_iterations");

  auto* abl = app.add_subcommand("ablate", "run every variant from one pretrained policy");
  add_common(abl, c_abl);
  abl->add_option("--policy", c_abl.policy_path, "pretrained policy checkpoint")->check(CLI::ExistingFile);
  abl->add_option("--iterations", abl_iters, "override n_iterations");

  auto* rep = app.add_subcommand("replay", "fly a policy checkpoint at a fixed alpha without adaptation");
  add_common(rep, c_rep);
  rep->add_option("--policy", c_rep.policy_path, "policy checkpoint")->check(CLI::ExistingFile);
  rep->add_option("--alpha", rep_alpha, "time dilation factor");
  rep->add_option("--seconds", rep_seconds, "flight duration");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return cmd_pretrain(c_pre, pre_updates);
    if (*adapt) return cmd_adapt(c_adapt, adapt_iters);
    if (*abl) return cmd_ablate(c_abl, abl_iters);
    if (*rep) return cmd_replay(c_rep, rep_alpha, rep_seconds);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
