// gmmkin: generate data, train the kinematic model, benchmark, plan, optimize
// and audit the collision bound. Run `gmmkin --help` for usage.

#include "gmmkin/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic kinematic model for a tendon-driven continuum robot"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  app.add_option("--config", config_path, "run configuration (key = value lines)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "global seed (overrides the config)");
  app.add_option("--out", out, "output directory (overrides the config)");

  using Command = int (*)(const gmmkin::RunConfig&, std::ostream&);
  const std::pair<const char*, Command> commands[] = {
      {"gen-data", gmmkin::cmd_gen_data}, {"train", gmmkin::cmd_train},
      {"bench", gmmkin::cmd_bench},       {"plan", gmmkin::cmd_plan},
      {"optimize", gmmkin::cmd_optimize}, {"validate", gmmkin::cmd_validate},
  };
  const char* help[] = {
      "synthesize point clouds over the displacement grid",
      "train one model per component count in the sweep",
      "time the forward pass over random configurations",
      "build a roadmap and plan from start to goal",
      "refine the planned trajectory against the collision bound",
      "compare the collision bound with Monte-Carlo estimates",
  };
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    CLI::App* s = app.add_subcommand(commands[i].first, help[i]);
    // Options may appear before or after the subcommand name.
    s->fallthrough();
    subs.push_back(s);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    gmmkin::RunConfig cfg = config_path.empty() ? gmmkin::RunConfig{} : gmmkin::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed()) return commands[i].second(cfg, std::cout);
  } catch (const gmmkin::PathNotFound& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const gmmkin::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
