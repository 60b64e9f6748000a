// polarize: backdoor attack/defense workbench driver.
//
// Subcommands: gendata, attack, defend, eval, sweep. Every run writes its
// artifacts plus a manifest into a fresh run directory under --out (or
// $POLARIZE_OUT, or ./runs). Exit codes: 0 ok, 2 config error, 3 training
// failure.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "polarize/dataset.hpp"
#include "polarize/experiment.hpp"
#include "polarize/runio.hpp"

namespace {

std::filesystem::path output_root(const std::string& out_flag) {
  if (!out_flag.empty()) return out_flag;
  if (const char* env = std::getenv("POLARIZE_OUT")) return env;
  return "runs";
}

int dispatch(const std::string& command, const std::string& config_path,
             const std::string& out_flag, long long seed_override) {
  using namespace polarize;
  nlohmann::json config = load_json_file(config_path);
  if (seed_override >= 0) {
    // --seed overrides every stage seed for quick reproducibility checks
    for (const char* section : {"attack", "defense"})
      if (config.contains(section)) config[section]["seed"] = seed_override;
  }
  const auto run_dir = make_run_dir(output_root(out_flag), command, config);
  nlohmann::json metrics;
  if (command == "attack") metrics = run_attack(config, run_dir);
  else if (command == "defend") metrics = run_defend(config, run_dir);
  else if (command == "eval") metrics = run_eval(config, run_dir);
  else metrics = run_sweep(config, run_dir);
  std::cout << run_dir.string() << "\n" << metrics.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural-polarizer backdoor defense workbench"};
  app.require_subcommand(1);

  std::string config_path, out_flag;
  long long seed_override = -1;

  auto add_run_cmd = [&](const std::string& name, const std::string& desc) {
    CLI::App* cmd = app.add_subcommand(name, desc);
    cmd->add_option("--config", config_path, "run config JSON")->required();
    cmd->add_option("--out", out_flag, "output root (default $POLARIZE_OUT or ./runs)");
    cmd->add_option("--seed", seed_override, "override attack/defense seeds");
    return cmd;
  };
  add_run_cmd("attack", "poison a dataset and train the backdoored model");
  add_run_cmd("defend", "train a neural polarizer on a backdoored checkpoint");
  add_run_cmd("eval", "evaluate a checkpoint (optionally with a polarizer)");
  add_run_cmd("sweep", "run an attack/defense sweep along one axis");

  // dataset generator (synthetic shape classes)
  auto* gen = app.add_subcommand("gendata", "write a synthetic dataset directory");
  std::string gen_out = "data/synth";
  int64_t classes = 10, chans = 3, height = 16, width = 16, train_n = 12000,
          test_n = 2000;
  uint64_t gen_seed = 11;
  gen->add_option("--out", gen_out, "dataset directory to create");
  gen->add_option("--classes", classes, "number of classes (2..10)");
  gen->add_option("--channels", chans, "image channels");
  gen->add_option("--height", height, "image height");
  gen->add_option("--width", width, "image width");
  gen->add_option("--train", train_n, "training sample count");
  gen->add_option("--test", test_n, "test sample count");
  gen->add_option("--seed", gen_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      polarize::DatasetMeta meta{classes, chans, height, width};
      // disjoint streams for the two splits
      auto train = polarize::make_synthetic_dataset(meta, train_n, gen_seed);
      auto test =
          polarize::make_synthetic_dataset(meta, test_n, polarize::mix_seed(gen_seed, 1));
      polarize::save_dataset(std::filesystem::path(gen_out) / "train", train);
      polarize::save_dataset(std::filesystem::path(gen_out) / "test", test);
      std::cout << gen_out << ": " << train_n << " train / " << test_n << " test, "
                << classes << " classes, " << chans << "x" << height << "x" << width
                << "\n";
      return 0;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    return dispatch(command, config_path, out_flag, seed_override);
  } catch (const polarize::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const polarize::TrainingFailure& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
