#include <iostream>

#include <CLI11.hpp>

#include "wmplan/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"World-model training and planning on 2-D navigation tasks"};
  app.require_subcommand(1, 1);

  wmplan::CommandOptions opts;
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string checkpoint;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Run configuration (JSON)")->required();
    sub->add_option("--seed", seed, "Override the seed this command consumes");
    sub->add_option("--threads", opts.threads, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "Override io.out_dir");
  };

  auto* generate = app.add_subcommand("generate", "Generate the offline dataset");
  add_common(generate);
  auto* train = app.add_subcommand("train", "Train the predictor and write per-epoch checkpoints");
  add_common(train);
  auto* plan = app.add_subcommand("plan", "Run one MPC episode with a checkpoint");
  add_common(plan);
  plan->add_option("--checkpoint", checkpoint, "Checkpoint file");
  plan->add_flag("--self-goal", opts.self_goal, "Use the initial state as the goal");
  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints (the path may contain wildcards)");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file or glob");
  auto* sweep = app.add_subcommand("sweep", "Retrain or replan along one axis");
  add_common(sweep);
  sweep->add_option("--checkpoint", checkpoint, "Checkpoint for the planner axis");
  sweep->add_option("--axis", opts.axis, "planner|rollout_steps|proprio|W|conditioning|depth|width")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  opts.config = config;
  if (chosen->count("--seed") > 0) opts.seed = seed;
  if (chosen->count("--out") > 0) opts.out = out;
  if (chosen->get_option_no_throw("--checkpoint") && chosen->count("--checkpoint") > 0) opts.checkpoint = checkpoint;
  return wmplan::run_command(chosen->get_name(), opts);
}
