// rishgen: synthesize, train and evaluate the source-to-target dMRI
// generation pipeline on built-in phantoms.
//
// Exit codes: 0 ok, 2 configuration error, 3 missing dependency (run an
// earlier stage first), 4 numerical failure.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "rishgen/pipeline.hpp"

namespace {

using rishgen::pipeline::Config;

Config load_config(const std::string& config_path, const std::string& seed_override) {
  Config cfg = config_path.empty() ? Config::defaults() : Config::load(config_path);
  if (!seed_override.empty()) cfg.set("seed", seed_override);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dMRI generation pipeline (RISH features + latent diffusion)"};
  app.require_subcommand(1);
  app.fallthrough();  // global --config/--out/--seed may follow the subcommand

  std::string config_path, out_root = "out", seed_override;
  app.add_option("--config", config_path, "Run configuration file (key = value lines)");
  app.add_option("--out", out_root, "Output root directory");
  app.add_option("--seed", seed_override, "Override the config seed");

  auto* cmd_phantom = app.add_subcommand("phantom", "Generate the phantom dataset");
  auto* cmd_fit = app.add_subcommand("fit-rish", "Fit SH and extract RISH features");

  std::string stage;
  auto* cmd_train = app.add_subcommand("train", "Train or resume one pipeline stage");
  cmd_train->add_option("--stage", stage, "vqvae3t | vqvae7t-finetune | vqvae7t-scratch | ldm | sr")
      ->required();

  std::string subject;
  bool save_intermediates = false;
  auto* cmd_infer = app.add_subcommand("infer", "Source-to-target inference");
  cmd_infer->add_option("--subject", subject, "Subject name (default: all test subjects)");
  cmd_infer->add_flag("--save-intermediates", save_intermediates,
                      "Keep latents, scale maps and other intermediates");

  std::string pred_kind = "predicted";
  auto* cmd_eval = app.add_subcommand("evaluate", "Metric report for inference outputs");
  cmd_eval->add_option("--pred", pred_kind, "Prediction kind: predicted | baseline");

  std::string axis;
  auto* cmd_ablate = app.add_subcommand("ablate", "Two-arm ablation comparison");
  cmd_ablate->add_option("--axis", axis, "finetune | superres")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const Config cfg = load_config(config_path, seed_override);
    if (cmd_phantom->parsed()) {
      rishgen::pipeline::cmd_phantom(cfg, out_root);
    } else if (cmd_fit->parsed()) {
      rishgen::pipeline::cmd_fit_rish(cfg, out_root);
    } else if (cmd_train->parsed()) {
      rishgen::pipeline::cmd_train(stage, cfg, out_root);
    } else if (cmd_infer->parsed()) {
      rishgen::pipeline::cmd_infer(cfg, out_root, subject, save_intermediates);
    } else if (cmd_eval->parsed()) {
      auto report = rishgen::pipeline::cmd_evaluate(cfg, out_root, pred_kind);
      std::printf("%s", report.summary_table({"RISH_L0", "RISH_L2", "RISH_L4", "FA"}).c_str());
    } else if (cmd_ablate->parsed()) {
      auto rows = rishgen::pipeline::cmd_ablate(axis, cfg, out_root);
      for (const auto& row : rows) {
        std::printf("%-10s NMSE %.6f  SSIM %.6f\n", row.arm.c_str(), row.nmse, row.ssim);
      }
    }
  } catch (const rishgen::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const rishgen::DependencyError& e) {
    std::fprintf(stderr, "dependency error: %s\n", e.what());
    return 3;
  } catch (const rishgen::NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 4;
  } catch (const rishgen::ArgumentError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
