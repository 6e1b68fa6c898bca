#ifndef RISHGEN_PIPELINE_HPP
#define RISHGEN_PIPELINE_HPP

#include <map>
#include <string>

#include "rishgen/ldm.hpp"
#include "rishgen/metrics.hpp"
#include "rishgen/phantom.hpp"
#include "rishgen/superres.hpp"
#include "rishgen/vqvae.hpp"

namespace rishgen::pipeline {

/// Flat key-value run configuration (text file: `key = value`, '#' comments).
/// Unknown keys are rejected so typos fail fast. Keys are grouped into
/// sections by their prefix before the first '.'.
class Config {
public:
  /// All keys with their documented defaults.
  static Config defaults();
  /// defaults() overlaid with the file's assignments.
  static Config load(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::uint64_t seed() const;

  void set(const std::string& key, const std::string& value);

  /// Sorted `key = value` lines of the full configuration.
  std::string resolved_text() const;
  void write(const std::filesystem::path& path) const;

  /// FNV-1a over the sorted lines of the listed sections plus the seed.
  /// Keys named "epochs" or ending in "_epochs" are excluded: training
  /// length is tracked by the checkpoint itself and must not invalidate
  /// resume or inference.
  std::uint64_t fingerprint(const std::vector<std::string>& sections) const;
  static std::uint64_t stage_fingerprint(const Config& cfg, const std::string& stage);

private:
  std::map<std::string, std::string> values_;
};

/// Output tree under a run root.
struct Paths {
  std::filesystem::path root;
  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path rish() const { return root / "rish"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path infer() const { return root / "infer"; }
  std::filesystem::path eval() const { return root / "eval"; }
  std::filesystem::path ablate(const std::string& axis) const {
    return root / ("ablate_" + axis);
  }
};

struct SubjectEntry {
  std::string name;
  std::string kind;  ///< train3t | paired | test
  std::uint64_t seed = 0;
};

std::vector<SubjectEntry> read_manifest(const std::filesystem::path& root);
std::uint64_t manifest_hash(const std::filesystem::path& root);

/// Stage names accepted by cmd_train.
inline constexpr const char* kTrainStages[] = {"vqvae3t", "vqvae7t-finetune",
                                               "vqvae7t-scratch", "ldm", "sr"};

/// Generates the phantom corpus + manifest (idempotent per fingerprint).
void cmd_phantom(const Config& cfg, const std::filesystem::path& root);

/// SH fit + RISH extraction for every subject and available domain.
void cmd_fit_rish(const Config& cfg, const std::filesystem::path& root);

/// Trains (or resumes) one stage; writes the checkpoint and its loss CSV.
void cmd_train(const std::string& stage, const Config& cfg,
               const std::filesystem::path& root);

struct InferOutputs {
  Volume4 predicted_dwi;
  sh::RishFeatures predicted_rish;
  Volume4 baseline_dwi;            ///< plain upsampled-input reconstruction
  sh::RishFeatures baseline_rish;
};

/// Full source-to-target inference for one subject (or every test subject
/// when `subject` is empty). Writes predictions, the comparison baseline and
/// the per-step sampling log under infer/<subject>/.
void cmd_infer(const Config& cfg, const std::filesystem::path& root,
               const std::string& subject = "", bool save_intermediates = false);

/// Metric report for a prediction kind ("predicted" or "baseline") over the
/// test subjects; emits CSV, a summary table and FA difference maps.
metrics::MetricReport cmd_evaluate(const Config& cfg, const std::filesystem::path& root,
                                   const std::string& pred_kind = "predicted");

struct AblationRow {
  std::string arm;
  double nmse = 0.0;
  double ssim = 0.0;
};

/// Two-arm comparison: axis "finetune" (scratch vs fine-tuned 7T autoencoder,
/// held-out reconstruction) or "superres" (B-spline upsampling vs the trained
/// SR head against the true target-grid RISH). Both arms consume the same
/// dataset files.
std::vector<AblationRow> cmd_ablate(const std::string& axis, const Config& cfg,
                                    const std::filesystem::path& root);

// Helpers shared by commands, the CLI and the acceptance suite.
sh::RishFeatures stack_as_rish(const Volume4& stack, int max_order);
Volume4 rish_to_stack(const sh::RishFeatures& rish);
vq::VqVaeModel load_stage_vqvae(const Config& cfg, const std::filesystem::path& root,
                                const std::string& stage);
ldm::SamplerConfig sampler_from_config(const Config& cfg);

}  // namespace rishgen::pipeline

#endif
