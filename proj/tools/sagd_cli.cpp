// Experiment CLI: config-driven training with Jitter adversarial samples and
// RSAM, attack-sweep evaluation, sharpness probing, embedding-bank export,
// and dataset conversion to the packed binary format.
//
// Every config key is overridable with --key.path=value. The SAGD_OUTPUT_ROOT
// environment variable, when set, prefixes relative output directories.
//
// Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O error.

#include "sagd/config.hpp"
#include "sagd/data.hpp"
#include "sagd/experiment.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;

fs::path apply_output_root(const fs::path& p) {
  const char* root = std::getenv("SAGD_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0' || p.is_absolute()) return p;
  return fs::path(root) / p;
}

// Remaining args of the form --a.b.c=value become config overrides.
std::vector<std::string> collect_overrides(std::vector<std::string> extras) {
  std::vector<std::string> overrides;
  // CLI11 yields remaining() in reverse order.
  for (auto it = extras.rbegin(); it != extras.rend(); ++it) {
    const std::string& arg = *it;
    if (arg.rfind("--", 0) != 0 || arg.find('=') == std::string::npos)
      throw sagd::ConfigError("unrecognized argument '" + arg +
                              "' (expected --key.path=value)");
    overrides.push_back(arg.substr(2));
  }
  return overrides;
}

sagd::ExperimentConfig load_config(const std::string& config_path,
                                   const std::vector<std::string>& overrides) {
  std::string text = "{}";
  if (!config_path.empty()) text = sagd::read_file(config_path);
  sagd::ExperimentConfig cfg = sagd::load_experiment_config(text, overrides);
  cfg.train.output_dir = apply_output_root(cfg.train.output_dir).string();
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"SaGD: sharpness-aware geometric defense for robust OOD detection"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("-c,--config", config_path, "experiment config JSON file")
      ->envname("SAGD_CONFIG");

  auto* train = app.add_subcommand("train", "train a model per the config");
  train->allow_extras();

  auto* eval = app.add_subcommand("eval", "attack-sweep evaluation of a checkpoint");
  eval->allow_extras();
  std::string eval_checkpoint;
  std::string eval_out;
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint.json path")->required();
  eval->add_option("--out", eval_out, "output directory (default: <output_dir>/eval)");

  auto* sharp = app.add_subcommand("sharpness", "sharpness table over checkpoints");
  sharp->allow_extras();
  std::vector<std::string> sharp_checkpoints;
  std::vector<double> rho_grid{0.0, 0.01, 0.025, 0.05, 0.1};
  std::string sharp_out;
  sharp->add_option("--checkpoint", sharp_checkpoints, "checkpoint path(s)")
      ->required()
      ->take_all();
  sharp->add_option("--rho", rho_grid, "rho grid");
  sharp->add_option("--out", sharp_out, "output file (default: <output_dir>/sharpness.csv)");

  auto* bank = app.add_subcommand("export-bank", "export the ID-train embedding bank");
  bank->allow_extras();
  std::string bank_checkpoint, bank_out;
  bank->add_option("--checkpoint", bank_checkpoint, "checkpoint.json path")->required();
  bank->add_option("--out", bank_out, "bank output path")->required();

  auto* convert = app.add_subcommand("convert-dataset",
                                 "convert images to the packed binary format");
  std::string convert_from = "imagedir";
  std::vector<std::string> convert_inputs;
  std::string convert_out;
  convert->add_option("--from", convert_from, "imagedir | cifar");
  convert->add_option("--input", convert_inputs, "source directory or binary file(s)")
      ->required()
      ->take_all();
  convert->add_option("--out", convert_out, "packed output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (convert->parsed()) {
    sagd::ImageDataset ds;
    if (convert_from == "imagedir") {
      if (convert_inputs.size() != 1)
        throw sagd::ConfigError("convert-dataset: imagedir takes one input directory");
      ds = sagd::read_image_directory(convert_inputs[0]);
    } else if (convert_from == "cifar") {
      std::vector<fs::path> files(convert_inputs.begin(), convert_inputs.end());
      ds = sagd::read_cifar_binary(files);
    } else {
      throw sagd::ConfigError("convert-dataset: unknown --from '" + convert_from + "'");
    }
    sagd::write_packed_dataset(ds, apply_output_root(convert_out));
    std::cout << "wrote " << ds.count() << " samples (" << ds.channels << "x"
              << ds.height << "x" << ds.width << ") to " << convert_out << "\n";
    return 0;
  }

  if (train->parsed()) {
    auto cfg = load_config(config_path, collect_overrides(train->remaining()));
    sagd::TrainOutput out = sagd::run_training(cfg);
    std::cout << "checkpoint: " << out.checkpoint_path.string() << "\n"
              << "log:        " << out.log_path.string() << "\n";
    return 0;
  }

  if (eval->parsed()) {
    auto cfg = load_config(config_path, collect_overrides(eval->remaining()));
    const fs::path out_dir = eval_out.empty()
                                 ? fs::path(cfg.train.output_dir) / "eval"
                                 : apply_output_root(eval_out);
    sagd::EvalOutput out = sagd::run_evaluation(cfg, eval_checkpoint, out_dir);
    std::cout << sagd::report_to_csv(out.report);
    std::cout << "report: " << out.csv_path.string() << "\n";
    return 0;
  }

  if (sharp->parsed()) {
    auto cfg = load_config(config_path, collect_overrides(sharp->remaining()));
    const fs::path out_path = sharp_out.empty()
                                  ? fs::path(cfg.train.output_dir) / "sharpness.csv"
                                  : apply_output_root(sharp_out);
    std::vector<fs::path> paths(sharp_checkpoints.begin(), sharp_checkpoints.end());
    std::cout << sagd::run_sharpness(cfg, paths, rho_grid, out_path);
    return 0;
  }

  if (bank->parsed()) {
    auto cfg = load_config(config_path, collect_overrides(bank->remaining()));
    sagd::run_export_bank(cfg, bank_checkpoint, apply_output_root(bank_out));
    std::cout << "bank: " << bank_out << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const sagd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const sagd::ContractViolation& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const sagd::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const sagd::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const sagd::IngestionError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
