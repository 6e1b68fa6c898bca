#include "rishgen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rishgen::pipeline {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::map<std::string, std::string>& default_values() {
  static const std::map<std::string, std::string> defaults = {
      {"seed", "42"},
      // Desk-scale corpus: abundant source-only subjects, scarce pairs.
      {"data.train3t", "24"},
      {"data.paired", "8"},
      {"data.test", "4"},
      {"phantom.source_dim", "32"},
      {"phantom.target_dim", "38"},
      {"phantom.source_voxel", "1.25"},
      {"phantom.target_voxel", "1.05"},
      {"phantom.snr_source", "25"},
      {"phantom.snr_target", "40"},
      {"phantom.source_dirs", "60"},
      {"phantom.target_dirs", "64"},
      {"phantom.baselines", "4"},
      {"phantom.bvalue", "1000"},
      {"phantom.contrast", "0.2"},
      {"sh.max_order", "4"},
      {"sh.lambda_lb", "0.006"},
      {"sh.tau", "1e-8"},
      {"vqvae.embed_dim", "32"},
      {"vqvae.num_codes", "256"},
      {"vqvae.downsample", "4"},
      {"vqvae.base_channels", "16"},
      {"vqvae.commitment", "0.25"},
      {"vqvae.epochs", "30"},
      {"vqvae.lr", "1e-4"},
      {"vqvae.finetune_epochs", "20"},
      {"vqvae.finetune_lr", "2e-5"},
      {"ldm.timesteps", "1000"},
      {"ldm.beta_start", "1e-4"},
      {"ldm.beta_end", "0.02"},
      {"ldm.epochs", "100"},
      {"ldm.lr", "1e-4"},
      {"ldm.drop_prob", "0.1"},
      {"ldm.stride", "20"},
      {"ldm.omega", "1.0 2.0 3.0"},
      {"ldm.t_enc_frac", "0.3 0.5 0.6"},
      {"ldm.encode_unconditional", "0"},
      {"ldm.widths", "32 64 128 128"},
      {"ldm.context_dim", "64"},
      {"ldm.heads", "4"},
      {"sr.features", "32"},
      {"sr.blocks", "4"},
      {"sr.epochs", "15"},
      {"sr.lr", "1e-4"},
      {"sr.patch", "16"},
      {"sr.patches_per_sample", "4"},
      {"metrics.mask_frac", "0.1"},
  };
  return defaults;
}

std::string section_of(const std::string& key) {
  const auto dot = key.find('.');
  return dot == std::string::npos ? key : key.substr(0, dot);
}

bool is_epochs_key(const std::string& key) {
  const auto dot = key.find('.');
  const std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
  return leaf == "epochs" || leaf.ends_with("_epochs");
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

Config Config::defaults() {
  Config cfg;
  cfg.values_ = default_values();
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  Config cfg = defaults();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void Config::set(const std::string& key, const std::string& value) {
  if (!default_values().count(key)) throw ConfigError("unknown config key: " + key);
  if (value.empty()) throw ConfigError("empty value for config key: " + key);
  values_[key] = value;
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

int Config::get_int(const std::string& key) const {
  try {
    return std::stoi(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " is not an integer: " + get(key));
  }
}

double Config::get_double(const std::string& key) const {
  char* end = nullptr;
  const std::string& text = get(key);
  const double v = std::strtod(text.c_str(), &end);
  if (end == text.c_str()) throw ConfigError("config key " + key + " is not a number");
  return v;
}

bool Config::get_bool(const std::string& key) const { return get_int(key) != 0; }

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::vector<double> out;
  const std::string& text = get(key);
  const char* p = text.c_str();
  char* end = nullptr;
  while (*p) {
    const double v = std::strtod(p, &end);
    if (end == p) break;
    out.push_back(v);
    p = end;
  }
  if (out.empty()) throw ConfigError("config key " + key + " has no numeric values");
  return out;
}

std::uint64_t Config::seed() const {
  return static_cast<std::uint64_t>(std::stoull(get("seed")));
}

std::string Config::resolved_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void Config::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write config: " + path.string());
  out << resolved_text();
}

std::uint64_t Config::fingerprint(const std::vector<std::string>& sections) const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : values_) {
    const std::string sec = section_of(k);
    const bool included =
        k == "seed" || std::find(sections.begin(), sections.end(), sec) != sections.end();
    if (!included || is_epochs_key(k)) continue;
    h = fnv1a64(k + "=" + v + "\n", h);
  }
  return h;
}

std::uint64_t Config::stage_fingerprint(const Config& cfg, const std::string& stage) {
  if (stage == "dataset" || stage == "fit-rish") {
    return cfg.fingerprint({"data", "phantom", "sh"});
  }
  if (stage == "vqvae3t" || stage == "vqvae7t-finetune" || stage == "vqvae7t-scratch") {
    return cfg.fingerprint({"data", "phantom", "sh", "vqvae"});
  }
  if (stage == "ldm") return cfg.fingerprint({"data", "phantom", "sh", "vqvae", "ldm"});
  if (stage == "sr") {
    return cfg.fingerprint({"data", "phantom", "sh", "vqvae", "ldm", "sr"});
  }
  throw ConfigError("unknown stage: " + stage);
}

// ------------------------------------------------------------------ manifest

std::vector<SubjectEntry> read_manifest(const std::filesystem::path& root) {
  const auto path = Paths{root}.dataset() / "manifest.csv";
  std::ifstream in(path);
  if (!in) {
    throw DependencyError("missing dataset manifest " + path.string() +
                          "; run the phantom stage first");
  }
  std::vector<SubjectEntry> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::istringstream row(line);
    SubjectEntry e;
    std::string seed_text;
    std::getline(row, e.name, ',');
    std::getline(row, e.kind, ',');
    std::getline(row, seed_text, ',');
    e.seed = std::stoull(seed_text);
    out.push_back(std::move(e));
  }
  return out;
}

std::uint64_t manifest_hash(const std::filesystem::path& root) {
  const auto path = Paths{root}.dataset() / "manifest.csv";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing dataset manifest: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return fnv1a64(buf.str());
}

namespace {

phantom::PhantomConfig phantom_config(const Config& cfg) {
  phantom::PhantomConfig pc;
  const int sd = cfg.get_int("phantom.source_dim");
  const int td = cfg.get_int("phantom.target_dim");
  pc.source_dims = {sd, sd, sd};
  pc.target_dims = {td, td, td};
  pc.source_voxel = cfg.get_double("phantom.source_voxel");
  pc.target_voxel = cfg.get_double("phantom.target_voxel");
  pc.snr_source = cfg.get_double("phantom.snr_source");
  pc.snr_target = cfg.get_double("phantom.snr_target");
  pc.source_dirs = cfg.get_int("phantom.source_dirs");
  pc.target_dirs = cfg.get_int("phantom.target_dirs");
  pc.num_baselines = cfg.get_int("phantom.baselines");
  pc.bvalue = cfg.get_double("phantom.bvalue");
  pc.contrast_amplitude = cfg.get_double("phantom.contrast");
  pc.sh_order = cfg.get_int("sh.max_order");
  return pc;
}

bool marker_matches(const std::filesystem::path& marker, std::uint64_t fingerprint) {
  std::ifstream in(marker);
  if (!in) return false;
  std::string text;
  in >> text;
  return text == hex64(fingerprint);
}

void write_marker(const std::filesystem::path& marker, std::uint64_t fingerprint) {
  std::ofstream out(marker, std::ios::trunc);
  out << hex64(fingerprint) << "\n";
}

std::filesystem::path rish_path(const std::filesystem::path& root, const std::string& name,
                                const std::string& domain, const char* what) {
  return Paths{root}.rish() / (name + "_" + domain + "_" + what + ".rgvl");
}

Volume4 load_rish_stack(const std::filesystem::path& root, const std::string& name,
                        const std::string& domain) {
  const auto path = rish_path(root, name, domain, "rish");
  if (!std::filesystem::exists(path)) {
    throw DependencyError("missing RISH stack " + path.string() +
                          "; run the fit-rish stage first");
  }
  return load_volume4(path);
}

sh::ShCoefficients load_fitted_coeffs(const std::filesystem::path& root,
                                      const std::string& name, const std::string& domain) {
  const auto path = rish_path(root, name, domain, "coeffs");
  if (!std::filesystem::exists(path)) {
    throw DependencyError("missing SH coefficients " + path.string() +
                          "; run the fit-rish stage first");
  }
  return sh::ShCoefficients::from_volume4(load_volume4(path));
}

void require_checkpoint(const std::filesystem::path& path, const std::string& stage) {
  if (!std::filesystem::exists(path)) {
    throw DependencyError("missing checkpoint for stage '" + stage + "' (" + path.string() +
                          "); run `rishgen train --stage " + stage + "` first");
  }
}

void check_ckpt_fingerprint(const std::map<std::string, std::string>& meta,
                            const Config& cfg, const std::string& stage) {
  auto it = meta.find("fingerprint");
  if (it == meta.end() || it->second != hex64(Config::stage_fingerprint(cfg, stage))) {
    throw ConfigError("checkpoint for stage '" + stage +
                      "' was trained under a different configuration");
  }
}

std::array<int, 3> working_dims(const Config& cfg) {
  const int sd = cfg.get_int("phantom.source_dim");
  return {sd, sd, sd};
}

Volume4 target_rish_on_working_grid(const Config& cfg, const std::filesystem::path& root,
                                    const std::string& name) {
  return resample_trilinear4(load_rish_stack(root, name, "target"), working_dims(cfg));
}

vq::VqVaeConfig vq_config(const Config& cfg) {
  vq::VqVaeConfig vc;
  vc.in_channels = cfg.get_int("sh.max_order") / 2 + 1;
  vc.embed_dim = cfg.get_int("vqvae.embed_dim");
  vc.num_codes = cfg.get_int("vqvae.num_codes");
  vc.downsample = cfg.get_int("vqvae.downsample");
  vc.base_channels = cfg.get_int("vqvae.base_channels");
  vc.commitment_weight = cfg.get_double("vqvae.commitment");
  return vc;
}

ldm::DenoiserConfig denoiser_config(const Config& cfg) {
  ldm::DenoiserConfig dc;
  dc.latent_channels = cfg.get_int("vqvae.embed_dim");
  dc.widths.clear();
  for (double w : cfg.get_doubles("ldm.widths")) dc.widths.push_back(static_cast<int>(w));
  dc.context_dim = cfg.get_int("ldm.context_dim");
  dc.heads = cfg.get_int("ldm.heads");
  return dc;
}

ldm::NoiseSchedule schedule_from_config(const Config& cfg) {
  return ldm::make_schedule(cfg.get_int("ldm.timesteps"), cfg.get_double("ldm.beta_start"),
                            cfg.get_double("ldm.beta_end"));
}

}  // namespace

sh::RishFeatures stack_as_rish(const Volume4& stack, int max_order) {
  sh::RishFeatures r;
  r.dims = {stack.dims[0], stack.dims[1], stack.dims[2]};
  r.voxel_size = stack.voxel_size;
  r.max_order = max_order;
  if (stack.dims[3] != r.num_orders()) {
    throw ArgumentError("stack_as_rish: channel count does not match the order set");
  }
  r.data = stack.data;
  return r;
}

Volume4 rish_to_stack(const sh::RishFeatures& rish) { return rish.to_volume4(); }

ldm::SamplerConfig sampler_from_config(const Config& cfg) {
  ldm::SamplerConfig sc;
  sc.omega = cfg.get_doubles("ldm.omega");
  sc.stride = cfg.get_int("ldm.stride");
  sc.encode_unconditional = cfg.get_bool("ldm.encode_unconditional");
  const int timesteps = cfg.get_int("ldm.timesteps");
  sc.t_enc.clear();
  for (double frac : cfg.get_doubles("ldm.t_enc_frac")) {
    if (frac < 0.0 || frac > 1.0) throw ConfigError("ldm.t_enc_frac out of [0,1]");
    const int rungs = static_cast<int>(std::lround(frac * timesteps / sc.stride));
    sc.t_enc.push_back(rungs * sc.stride);
  }
  sc.validate(timesteps);
  return sc;
}

// ------------------------------------------------------------------- phantom

void cmd_phantom(const Config& cfg, const std::filesystem::path& root) {
  const Paths paths{root};
  const int n3t = cfg.get_int("data.train3t");
  const int npaired = cfg.get_int("data.paired");
  const int ntest = cfg.get_int("data.test");
  if (n3t < 0 || npaired < 0 || ntest < 0 || n3t + npaired + ntest == 0) {
    throw ArgumentError("phantom: subject counts must be non-negative and total >= 1");
  }

  const std::uint64_t fp = Config::stage_fingerprint(cfg, "dataset");
  const auto marker = paths.dataset() / "fingerprint.txt";
  if (marker_matches(marker, fp) &&
      std::filesystem::exists(paths.dataset() / "manifest.csv")) {
    return;  // dataset already generated under this configuration
  }

  std::filesystem::create_directories(paths.dataset());
  const phantom::PhantomConfig pc = phantom_config(cfg);
  const std::uint64_t seed = cfg.seed();

  std::ofstream manifest(paths.dataset() / "manifest.csv", std::ios::trunc);
  manifest << "subject,kind,seed\n";
  const int total = n3t + npaired + ntest;
  for (int i = 0; i < total; ++i) {
    const std::string kind = i < n3t ? "train3t" : (i < n3t + npaired ? "paired" : "test");
    char name[32];
    std::snprintf(name, sizeof name, "subj%03d", i);
    const std::uint64_t subject_seed = derive_seed(seed, "subject", static_cast<std::uint64_t>(i));
    phantom::PhantomPair pair = phantom::generate_pair(pc, subject_seed);
    phantom::save_pair(pair, paths.dataset(), name, pc, subject_seed,
                       /*include_target=*/kind != "train3t");
    manifest << name << "," << kind << "," << subject_seed << "\n";
  }
  manifest.close();
  cfg.write(paths.dataset() / "resolved.cfg");
  write_marker(marker, fp);
}

// ------------------------------------------------------------------ fit-rish

void cmd_fit_rish(const Config& cfg, const std::filesystem::path& root) {
  const Paths paths{root};
  const auto subjects = read_manifest(root);

  const std::uint64_t fp = Config::stage_fingerprint(cfg, "fit-rish");
  const auto marker = paths.rish() / "fingerprint.txt";
  if (marker_matches(marker, fp)) return;

  std::filesystem::create_directories(paths.rish());
  const int max_order = cfg.get_int("sh.max_order");
  const double lambda_lb = cfg.get_double("sh.lambda_lb");

  for (const auto& subject : subjects) {
    phantom::LoadedPhantom data = phantom::load_pair(paths.dataset(), subject.name);
    auto fit_domain = [&](const Volume4& dwi, const GradientTable& gtab,
                          const std::string& domain) {
      sh::ShCoefficients coeffs = sh::fit_sh(dwi, gtab, max_order, lambda_lb);
      save_volume(coeffs.to_volume4(), rish_path(root, subject.name, domain, "coeffs"));
      save_volume(sh::compute_rish(coeffs).to_volume4(),
                  rish_path(root, subject.name, domain, "rish"));
    };
    fit_domain(data.source_dwi, data.source_gtab, "source");
    if (data.has_target) fit_domain(data.target_dwi, data.target_gtab, "target");
  }
  cfg.write(paths.rish() / "resolved.cfg");
  write_marker(marker, fp);
}

// --------------------------------------------------------------------- train

namespace {

struct ResumeState {
  bool done = false;  ///< checkpoint already reaches the requested epochs
  int start_epoch = 0;
  bool resume = false;
};

ResumeState check_resume(const std::filesystem::path& ckpt, const Config& cfg,
                         const std::string& stage, int target_epochs) {
  ResumeState st;
  if (!std::filesystem::exists(ckpt)) return st;
  const auto meta = tn::read_checkpoint_meta(ckpt);
  check_ckpt_fingerprint(meta, cfg, stage);
  const int done_epochs = std::stoi(meta.at("epochs_done"));
  if (done_epochs >= target_epochs) {
    st.done = true;
  } else {
    st.resume = true;
    st.start_epoch = done_epochs;
  }
  return st;
}

std::map<std::string, std::string> stage_meta(const Config& cfg, const std::string& stage,
                                              int epochs_done) {
  return {{"stage", stage},
          {"fingerprint", hex64(Config::stage_fingerprint(cfg, stage))},
          {"seed", cfg.get("seed")},
          {"epochs_done", std::to_string(epochs_done)}};
}

void append_vq_loss(const std::filesystem::path& csv, const vq::VqTrainReport& report,
                    bool truncate) {
  std::ofstream out(csv, truncate ? std::ios::trunc : std::ios::app);
  if (truncate) out << "step,epoch,loss,recon,codebook,commitment\n";
  for (const auto& row : report.steps) {
    out << row.step << "," << row.epoch << "," << fmt(row.loss) << "," << fmt(row.recon)
        << "," << fmt(row.codebook) << "," << fmt(row.commitment) << "\n";
  }
}

std::vector<Volume4> source_training_stacks(const Config& cfg,
                                            const std::filesystem::path& root) {
  std::vector<Volume4> out;
  for (const auto& subject : read_manifest(root)) {
    if (subject.kind == "train3t" || subject.kind == "paired") {
      out.push_back(load_rish_stack(root, subject.name, "source"));
    }
  }
  return out;
}

std::vector<Volume4> target_training_stacks(const Config& cfg,
                                            const std::filesystem::path& root) {
  std::vector<Volume4> out;
  for (const auto& subject : read_manifest(root)) {
    if (subject.kind == "paired") {
      out.push_back(target_rish_on_working_grid(cfg, root, subject.name));
    }
  }
  return out;
}

void train_vqvae_stage(const std::string& stage, const Config& cfg,
                       const std::filesystem::path& root) {
  const Paths paths{root};
  std::filesystem::create_directories(paths.checkpoints());
  const bool is_source = stage == "vqvae3t";
  const bool is_finetune = stage == "vqvae7t-finetune";
  const std::string ckpt_name =
      is_source ? "vqvae3t" : (is_finetune ? "vqvae7t" : "vqvae7t_scratch");
  const auto ckpt = paths.checkpoints() / (ckpt_name + ".ckpt");
  const auto loss_csv = paths.checkpoints() / (ckpt_name + "_loss.csv");

  const int epochs =
      is_finetune ? cfg.get_int("vqvae.finetune_epochs") : cfg.get_int("vqvae.epochs");
  const double lr =
      is_finetune ? cfg.get_double("vqvae.finetune_lr") : cfg.get_double("vqvae.lr");

  const ResumeState st = check_resume(ckpt, cfg, stage, epochs);
  if (st.done) return;

  std::vector<Volume4> dataset =
      is_source ? source_training_stacks(cfg, root) : target_training_stacks(cfg, root);
  if (dataset.empty()) throw DependencyError("no training stacks for stage " + stage);

  vq::VqVaeModel model;
  if (st.resume) {
    model = vq::load_vqvae(ckpt);
  } else if (is_finetune) {
    const auto base = paths.checkpoints() / "vqvae3t.ckpt";
    require_checkpoint(base, "vqvae3t");
    vq::VqVaeModel pretrained = vq::load_vqvae(base);
    check_ckpt_fingerprint(tn::read_checkpoint_meta(base), cfg, "vqvae3t");
    model = vq::finetune(pretrained, dataset, vq::VqTrainConfig{0, 0, lr, 0});
  } else {
    model = vq::VqVaeModel(vq_config(cfg), is_source ? "source" : "target",
                           derive_seed(cfg.seed(), stage));
  }

  vq::VqTrainConfig tc;
  tc.epochs = epochs;
  tc.start_epoch = st.start_epoch;
  tc.lr = lr;
  tc.seed = derive_seed(cfg.seed(), stage + "-train");
  const vq::VqTrainReport report = vq::train_vqvae(model, dataset, tc);

  vq::save_vqvae(model, ckpt, stage_meta(cfg, stage, epochs));
  append_vq_loss(loss_csv, report, /*truncate=*/!st.resume);
  cfg.write(paths.checkpoints() / (ckpt_name + "_resolved.cfg"));
}

std::vector<ldm::LatentSample> build_latent_dataset(const Config& cfg,
                                                    const std::filesystem::path& root,
                                                    const vq::VqVaeModel& m3,
                                                    const vq::VqVaeModel& m7) {
  std::vector<ldm::LatentSample> out;
  for (const auto& subject : read_manifest(root)) {
    if (subject.kind != "paired") continue;
    ldm::LatentSample s3;
    s3.z = vq::encode(m3, load_rish_stack(root, subject.name, "source"));
    s3.label = ldm::ClassLabel::kSource3T;
    out.push_back(std::move(s3));
    ldm::LatentSample s7;
    s7.z = vq::encode(m7, target_rish_on_working_grid(cfg, root, subject.name));
    s7.label = ldm::ClassLabel::kTarget7T;
    out.push_back(std::move(s7));
  }
  return out;
}

void train_ldm_stage(const Config& cfg, const std::filesystem::path& root) {
  const Paths paths{root};
  std::filesystem::create_directories(paths.checkpoints());
  const auto ckpt = paths.checkpoints() / "ldm.ckpt";
  const auto loss_csv = paths.checkpoints() / "ldm_loss.csv";
  const int epochs = cfg.get_int("ldm.epochs");

  const ResumeState st = check_resume(ckpt, cfg, "ldm", epochs);
  if (st.done) return;

  const auto v3 = paths.checkpoints() / "vqvae3t.ckpt";
  const auto v7 = paths.checkpoints() / "vqvae7t.ckpt";
  require_checkpoint(v3, "vqvae3t");
  require_checkpoint(v7, "vqvae7t-finetune");
  const vq::VqVaeModel m3 = vq::load_vqvae(v3);
  const vq::VqVaeModel m7 = vq::load_vqvae(v7);

  ldm::DenoiserNet net = st.resume
                             ? ldm::load_denoiser(ckpt)
                             : ldm::DenoiserNet(denoiser_config(cfg),
                                                derive_seed(cfg.seed(), "ldm"));

  ldm::LdmTrainConfig tc;
  tc.epochs = epochs;
  tc.start_epoch = st.start_epoch;
  tc.lr = cfg.get_double("ldm.lr");
  tc.drop_prob = cfg.get_double("ldm.drop_prob");
  tc.seed = derive_seed(cfg.seed(), "ldm-train");

  const auto dataset = build_latent_dataset(cfg, root, m3, m7);
  const ldm::LdmTrainReport report =
      ldm::train_ldm(net, dataset, schedule_from_config(cfg), tc);

  ldm::save_denoiser(net, ckpt, stage_meta(cfg, "ldm", epochs));
  std::ofstream out(loss_csv, st.resume ? std::ios::app : std::ios::trunc);
  if (!st.resume) out << "step,epoch,loss\n";
  for (const auto& row : report.steps) {
    out << row.step << "," << row.epoch << "," << fmt(row.loss) << "\n";
  }
  cfg.write(paths.checkpoints() / "ldm_resolved.cfg");
}

// Generated low-res stack for one source RISH stack: encode with the source
// autoencoder, translate in latent space, decode with the target autoencoder.
Volume4 generate_lowres(const Config& cfg, const Volume4& source_rish,
                        const vq::VqVaeModel& m3, const vq::VqVaeModel& m7,
                        const ldm::DenoiserNet& net, const ldm::NoiseSchedule& schedule,
                        std::vector<ldm::SampleLogRow>* log = nullptr) {
  const vq::LatentGrid z = vq::encode(m3, source_rish);
  const vq::LatentGrid zt =
      ldm::translate(net, z, sampler_from_config(cfg), schedule, log);
  return vq::decode(m7, vq::quantize_latent(m7, zt));
}

void train_sr_stage(const Config& cfg, const std::filesystem::path& root) {
  const Paths paths{root};
  std::filesystem::create_directories(paths.checkpoints());
  const auto ckpt = paths.checkpoints() / "sr.ckpt";
  const auto loss_csv = paths.checkpoints() / "sr_loss.csv";
  const int epochs = cfg.get_int("sr.epochs");

  const ResumeState st = check_resume(ckpt, cfg, "sr", epochs);
  if (st.done) return;

  const auto v3 = paths.checkpoints() / "vqvae3t.ckpt";
  const auto v7 = paths.checkpoints() / "vqvae7t.ckpt";
  const auto ld = paths.checkpoints() / "ldm.ckpt";
  require_checkpoint(v3, "vqvae3t");
  require_checkpoint(v7, "vqvae7t-finetune");
  require_checkpoint(ld, "ldm");
  const vq::VqVaeModel m3 = vq::load_vqvae(v3);
  const vq::VqVaeModel m7 = vq::load_vqvae(v7);
  const ldm::DenoiserNet net = ldm::load_denoiser(ld);
  const ldm::NoiseSchedule schedule = schedule_from_config(cfg);

  std::vector<sr::SrPair> dataset;
  for (const auto& subject : read_manifest(root)) {
    if (subject.kind != "paired") continue;
    sr::SrPair pair;
    pair.low = generate_lowres(cfg, load_rish_stack(root, subject.name, "source"), m3, m7,
                               net, schedule);
    pair.high = load_rish_stack(root, subject.name, "target");
    dataset.push_back(std::move(pair));
  }
  if (dataset.empty()) throw DependencyError("no paired subjects for the sr stage");

  sr::SrConfig sc;
  sc.channels = cfg.get_int("sh.max_order") / 2 + 1;
  sc.features = cfg.get_int("sr.features");
  sc.blocks = cfg.get_int("sr.blocks");
  sc.scale = static_cast<double>(cfg.get_int("phantom.target_dim")) /
             cfg.get_int("phantom.source_dim");
  sc.patch = cfg.get_int("sr.patch");
  sc.patches_per_sample = cfg.get_int("sr.patches_per_sample");

  sr::SrModel model = st.resume ? sr::load_sr(ckpt)
                                : sr::SrModel(sc, derive_seed(cfg.seed(), "sr"));

  sr::SrTrainConfig tc;
  tc.epochs = epochs;
  tc.start_epoch = st.start_epoch;
  tc.lr = cfg.get_double("sr.lr");
  tc.seed = derive_seed(cfg.seed(), "sr-train");
  const sr::SrTrainReport report = sr::train_sr(model, dataset, tc);

  sr::save_sr(model, ckpt, stage_meta(cfg, "sr", epochs));
  std::ofstream out(loss_csv, st.resume ? std::ios::app : std::ios::trunc);
  if (!st.resume) out << "step,epoch,loss\n";
  for (const auto& row : report.steps) {
    out << row.step << "," << row.epoch << "," << fmt(row.loss) << "\n";
  }
  cfg.write(paths.checkpoints() / "sr_resolved.cfg");
}

}  // namespace

void cmd_train(const std::string& stage, const Config& cfg,
               const std::filesystem::path& root) {
  if (stage == "vqvae3t" || stage == "vqvae7t-finetune" || stage == "vqvae7t-scratch") {
    train_vqvae_stage(stage, cfg, root);
  } else if (stage == "ldm") {
    train_ldm_stage(cfg, root);
  } else if (stage == "sr") {
    train_sr_stage(cfg, root);
  } else {
    throw ConfigError("unknown training stage '" + stage +
                      "' (expected vqvae3t, vqvae7t-finetune, vqvae7t-scratch, ldm, sr)");
  }
}

// --------------------------------------------------------------------- infer

vq::VqVaeModel load_stage_vqvae(const Config& cfg, const std::filesystem::path& root,
                                const std::string& stage) {
  const Paths paths{root};
  const std::string name = stage == "vqvae3t"
                               ? "vqvae3t"
                               : (stage == "vqvae7t-finetune" ? "vqvae7t" : "vqvae7t_scratch");
  const auto path = paths.checkpoints() / (name + ".ckpt");
  require_checkpoint(path, stage);
  std::map<std::string, std::string> meta;
  vq::VqVaeModel model = vq::load_vqvae(path, &meta);
  check_ckpt_fingerprint(meta, cfg, stage);
  return model;
}

namespace {

Volume3 source_s0(const Volume4& dwi, const GradientTable& gtab) {
  Volume3 s0({dwi.dims[0], dwi.dims[1], dwi.dims[2]}, dwi.voxel_size);
  std::vector<std::size_t> baselines;
  for (std::size_t k = 0; k < gtab.size(); ++k) {
    if (gtab.bvals[k] == 0.0) baselines.push_back(k);
  }
  if (baselines.empty()) {
    std::fill(s0.data.begin(), s0.data.end(), 1.0);
    return s0;
  }
  const std::size_t nvox = s0.size();
  for (std::size_t v = 0; v < nvox; ++v) {
    double acc = 0.0;
    for (std::size_t k : baselines) acc += dwi.data[k * nvox + v];
    s0.data[v] = acc / static_cast<double>(baselines.size());
  }
  return s0;
}

void scale_by_s0(Volume4& dwi, const Volume3& s0) {
  const std::size_t nvox = s0.size();
  for (int q = 0; q < dwi.dims[3]; ++q) {
    double* dst = dwi.data.data() + static_cast<std::size_t>(q) * nvox;
    for (std::size_t v = 0; v < nvox; ++v) dst[v] *= s0.data[v];
  }
}

Volume4 latent_as_volume(const vq::LatentGrid& z) {
  Volume4 out({z.dims[0], z.dims[1], z.dims[2], z.channels}, z.voxel_size);
  out.data = z.data;
  return out;
}

void infer_subject(const Config& cfg, const std::filesystem::path& root,
                   const SubjectEntry& subject, bool save_intermediates,
                   const vq::VqVaeModel& m3, const vq::VqVaeModel& m7,
                   const ldm::DenoiserNet& net, const sr::SrModel& srm,
                   const ldm::NoiseSchedule& schedule) {
  const Paths paths{root};
  const auto out_dir = paths.infer() / subject.name;
  std::filesystem::create_directories(out_dir);

  const phantom::LoadedPhantom data = phantom::load_pair(paths.dataset(), subject.name);
  const int max_order = cfg.get_int("sh.max_order");
  const double lambda_lb = cfg.get_double("sh.lambda_lb");
  const double tau = cfg.get_double("sh.tau");
  const int target_dim = cfg.get_int("phantom.target_dim");
  const std::array<int, 3> target_dims{target_dim, target_dim, target_dim};

  // Source representation.
  const sh::ShCoefficients c3 = sh::fit_sh(data.source_dwi, data.source_gtab, max_order,
                                           lambda_lb);
  const sh::RishFeatures r3 = sh::compute_rish(c3);

  // Latent translation and decoding.
  std::vector<ldm::SampleLogRow> log;
  const vq::LatentGrid z3 = vq::encode(m3, r3.to_volume4());
  const vq::LatentGrid zt = ldm::translate(net, z3, sampler_from_config(cfg), schedule, &log);
  const vq::LatentGrid zq = vq::quantize_latent(m7, zt);
  const Volume4 lowres = vq::decode(m7, zq);

  // Resolution transfer and scale-map application.
  const Volume4 sr_stack = sr::sr_forward(srm, lowres);
  const sh::RishFeatures r7_hat = stack_as_rish(sr_stack, max_order);
  const Volume4 r3_up_stack = resample_trilinear4(r3.to_volume4(), target_dims);
  const sh::RishFeatures r3_up = sh::RishFeatures::from_volume4(r3_up_stack);
  const sh::ScaleMap lambda = sh::compute_scale_map(r7_hat, r3_up, tau);
  const sh::ShCoefficients c3_up =
      sh::ShCoefficients::from_volume4(resample_trilinear4(c3.to_volume4(), target_dims));
  const sh::ShCoefficients c_hat = sh::apply_scale_map(c3_up, lambda);

  // Reconstruction on the target scheme. When the subject has no stored
  // target scheme (source-only subjects) fall back to the source scheme.
  const GradientTable& target_gtab = data.has_target ? data.target_gtab : data.source_gtab;
  Volume4 predicted = sh::reconstruct_signal(c_hat, target_gtab);
  const Volume3 s0_up = resample_trilinear(source_s0(data.source_dwi, data.source_gtab),
                                           target_dims);
  scale_by_s0(predicted, s0_up);

  // Comparison baseline: plain upsampled-input reconstruction.
  Volume4 baseline = sh::reconstruct_signal(c3_up, target_gtab);
  scale_by_s0(baseline, s0_up);

  save_volume(predicted, out_dir / "predicted_dwi.rgvl");
  save_volume(sh::compute_rish(c_hat).to_volume4(), out_dir / "predicted_rish.rgvl");
  save_volume(c_hat.to_volume4(), out_dir / "predicted_coeffs.rgvl");
  save_volume(baseline, out_dir / "baseline_dwi.rgvl");
  save_volume(sh::compute_rish(c3_up).to_volume4(), out_dir / "baseline_rish.rgvl");

  std::ofstream log_csv(out_dir / "sampling_log.csv", std::ios::trunc);
  log_csv << "t,mean_abs_eps\n";
  for (const auto& row : log) log_csv << row.t << "," << fmt(row.mean_abs_eps) << "\n";

  if (save_intermediates) {
    save_volume(r3.to_volume4(), out_dir / "input_rish.rgvl");
    save_volume(latent_as_volume(z3), out_dir / "latent_source.rgvl");
    save_volume(latent_as_volume(zt), out_dir / "latent_translated.rgvl");
    save_volume(lowres, out_dir / "decoded_lowres.rgvl");
    save_volume(sr_stack, out_dir / "sr_output.rgvl");
    Volume4 lambda_vol({lambda.dims[0], lambda.dims[1], lambda.dims[2], lambda.num_orders()},
                       lambda.voxel_size);
    lambda_vol.semantics = VolumeSemantics::kScaleMap;
    lambda_vol.aux = {static_cast<std::uint32_t>(lambda.max_order), 0};
    lambda_vol.data = lambda.data;
    save_volume(lambda_vol, out_dir / "scale_map.rgvl");
  }
}

}  // namespace

void cmd_infer(const Config& cfg, const std::filesystem::path& root,
               const std::string& subject, bool save_intermediates) {
  const Paths paths{root};
  const auto subjects = read_manifest(root);

  const vq::VqVaeModel m3 = load_stage_vqvae(cfg, root, "vqvae3t");
  const vq::VqVaeModel m7 = load_stage_vqvae(cfg, root, "vqvae7t-finetune");

  const auto ldm_path = paths.checkpoints() / "ldm.ckpt";
  require_checkpoint(ldm_path, "ldm");
  std::map<std::string, std::string> meta;
  const ldm::DenoiserNet net = ldm::load_denoiser(ldm_path, &meta);
  check_ckpt_fingerprint(meta, cfg, "ldm");

  const auto sr_path = paths.checkpoints() / "sr.ckpt";
  require_checkpoint(sr_path, "sr");
  const sr::SrModel srm = sr::load_sr(sr_path, &meta);
  check_ckpt_fingerprint(meta, cfg, "sr");

  const ldm::NoiseSchedule schedule = schedule_from_config(cfg);

  std::filesystem::create_directories(paths.infer());
  cfg.write(paths.infer() / "resolved.cfg");

  bool any = false;
  for (const auto& entry : subjects) {
    if (subject.empty() ? entry.kind != "test" : entry.name != subject) continue;
    infer_subject(cfg, root, entry, save_intermediates, m3, m7, net, srm, schedule);
    any = true;
  }
  if (!any) {
    throw ArgumentError(subject.empty() ? "no test subjects in the manifest"
                                        : "unknown subject: " + subject);
  }
}

// ------------------------------------------------------------------ evaluate

metrics::MetricReport cmd_evaluate(const Config& cfg, const std::filesystem::path& root,
                                   const std::string& pred_kind) {
  if (pred_kind != "predicted" && pred_kind != "baseline") {
    throw ArgumentError("evaluate: prediction kind must be 'predicted' or 'baseline'");
  }
  const Paths paths{root};
  const auto subjects = read_manifest(root);
  const int max_order = cfg.get_int("sh.max_order");
  const double mask_frac = cfg.get_double("metrics.mask_frac");

  const auto out_dir = paths.eval() / pred_kind;
  std::filesystem::create_directories(out_dir);

  metrics::MetricReport report;
  int evaluated = 0;
  for (const auto& entry : subjects) {
    if (entry.kind != "test") continue;
    const auto pred_dir = paths.infer() / entry.name;
    const auto rish_file = pred_dir / (pred_kind + "_rish.rgvl");
    const auto dwi_file = pred_dir / (pred_kind + "_dwi.rgvl");
    if (!std::filesystem::exists(rish_file) || !std::filesystem::exists(dwi_file)) {
      throw DependencyError("missing inference outputs for " + entry.name +
                            "; run `rishgen infer` first");
    }
    const phantom::LoadedPhantom data = phantom::load_pair(paths.dataset(), entry.name);
    if (!data.has_target) continue;

    const Volume3 mask = metrics::make_mask(data.target_dwi, data.target_gtab, mask_frac);
    const sh::RishFeatures truth_rish =
        sh::compute_rish(load_fitted_coeffs(root, entry.name, "target"));
    const sh::RishFeatures pred_rish =
        sh::RishFeatures::from_volume4(load_volume4(rish_file));

    for (int oi = 0; oi < truth_rish.num_orders(); ++oi) {
      const std::string quantity = "RISH_L" + std::to_string(2 * oi);
      const Volume3 p = pred_rish.order_map(oi);
      const Volume3 t = truth_rish.order_map(oi);
      report.add(entry.name, quantity, "NMSE", metrics::nmse(p, t, mask));
      report.add(entry.name, quantity, "SSIM", metrics::ssim(p, t, mask));
    }

    const Volume3 pred_fa = metrics::fa_map(load_volume4(dwi_file), data.target_gtab);
    const Volume3 truth_fa = metrics::fa_map(data.target_dwi, data.target_gtab);
    report.add(entry.name, "FA", "NMSE", metrics::nmse(pred_fa, truth_fa, mask));
    report.add(entry.name, "FA", "SSIM", metrics::ssim(pred_fa, truth_fa, mask));

    save_volume(metrics::difference_map(pred_fa, truth_fa),
                out_dir / (entry.name + "_fa_diff.rgvl"));
    ++evaluated;
  }
  if (evaluated == 0) throw ArgumentError("evaluate: empty prediction set");

  report.write_csv(out_dir / "report.csv");
  std::vector<std::string> quantities;
  for (int l = 0; l <= max_order; l += 2) quantities.push_back("RISH_L" + std::to_string(l));
  quantities.push_back("FA");
  std::ofstream summary(out_dir / "summary.txt", std::ios::trunc);
  summary << report.summary_table(quantities);
  cfg.write(out_dir / "resolved.cfg");
  return report;
}

// -------------------------------------------------------------------- ablate

namespace {

Volume3 mask_from_stack(const Volume4& stack) {
  Volume3 mask({stack.dims[0], stack.dims[1], stack.dims[2]}, stack.voxel_size);
  const std::size_t nvox = mask.size();
  double mx = 0.0;
  for (std::size_t v = 0; v < nvox; ++v) mx = std::max(mx, stack.data[v]);
  for (std::size_t v = 0; v < nvox; ++v) {
    mask.data[v] = stack.data[v] > 0.01 * mx ? 1.0 : 0.0;
  }
  return mask;
}

// Mean masked NMSE / SSIM over the channels of two stacks.
std::pair<double, double> stack_metrics(const Volume4& pred, const Volume4& truth) {
  const Volume3 mask = mask_from_stack(truth);
  double sum_nmse = 0.0, sum_ssim = 0.0;
  for (int c = 0; c < truth.dims[3]; ++c) {
    const Volume3 p = pred.channel(c);
    const Volume3 t = truth.channel(c);
    sum_nmse += metrics::nmse(p, t, mask);
    sum_ssim += metrics::ssim(p, t, mask);
  }
  return {sum_nmse / truth.dims[3], sum_ssim / truth.dims[3]};
}

void write_ablation(const std::filesystem::path& dir, const Config& cfg,
                    const std::vector<AblationRow>& rows, std::uint64_t data_hash) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "comparison.csv", std::ios::trunc);
  out << "arm,nmse,ssim,manifest_hash\n";
  for (const auto& row : rows) {
    out << row.arm << "," << fmt(row.nmse) << "," << fmt(row.ssim) << "," << hex64(data_hash)
        << "\n";
  }
  cfg.write(dir / "resolved.cfg");
}

}  // namespace

std::vector<AblationRow> cmd_ablate(const std::string& axis, const Config& cfg,
                                    const std::filesystem::path& root) {
  const Paths paths{root};
  const auto subjects = read_manifest(root);
  const std::uint64_t data_hash = manifest_hash(root);
  std::vector<AblationRow> rows;

  if (axis == "finetune") {
    cmd_train("vqvae7t-finetune", cfg, root);
    cmd_train("vqvae7t-scratch", cfg, root);
    const vq::VqVaeModel finetuned = load_stage_vqvae(cfg, root, "vqvae7t-finetune");
    const vq::VqVaeModel scratch = load_stage_vqvae(cfg, root, "vqvae7t-scratch");

    double n_ft = 0.0, s_ft = 0.0, n_sc = 0.0, s_sc = 0.0;
    int count = 0;
    for (const auto& entry : subjects) {
      if (entry.kind != "test") continue;
      const Volume4 truth = target_rish_on_working_grid(cfg, root, entry.name);
      const auto [nf, sf] = stack_metrics(vq::reconstruct(finetuned, truth), truth);
      const auto [ns, ss] = stack_metrics(vq::reconstruct(scratch, truth), truth);
      n_ft += nf;
      s_ft += sf;
      n_sc += ns;
      s_sc += ss;
      ++count;
    }
    if (count == 0) throw ArgumentError("ablate: no test subjects");
    rows.push_back({"scratch", n_sc / count, s_sc / count});
    rows.push_back({"finetuned", n_ft / count, s_ft / count});
    write_ablation(paths.ablate(axis), cfg, rows, data_hash);
    return rows;
  }

  if (axis == "superres") {
    cmd_train("vqvae3t", cfg, root);
    cmd_train("vqvae7t-finetune", cfg, root);
    cmd_train("ldm", cfg, root);
    cmd_train("sr", cfg, root);
    const vq::VqVaeModel m3 = load_stage_vqvae(cfg, root, "vqvae3t");
    const vq::VqVaeModel m7 = load_stage_vqvae(cfg, root, "vqvae7t-finetune");
    const ldm::DenoiserNet net = ldm::load_denoiser(paths.checkpoints() / "ldm.ckpt");
    const sr::SrModel srm = sr::load_sr(paths.checkpoints() / "sr.ckpt");
    const ldm::NoiseSchedule schedule = schedule_from_config(cfg);
    const int target_dim = cfg.get_int("phantom.target_dim");

    double n_sr = 0.0, s_sr = 0.0, n_bs = 0.0, s_bs = 0.0;
    int count = 0;
    for (const auto& entry : subjects) {
      if (entry.kind != "test") continue;
      const Volume4 truth = load_rish_stack(root, entry.name, "target");
      const Volume4 lowres = generate_lowres(
          cfg, load_rish_stack(root, entry.name, "source"), m3, m7, net, schedule);

      const Volume4 via_sr = sr::sr_forward(srm, lowres);
      Volume4 via_bspline({target_dim, target_dim, target_dim, lowres.dims[3]},
                          truth.voxel_size);
      via_bspline.semantics = lowres.semantics;
      via_bspline.aux = lowres.aux;
      const std::size_t nvox = via_bspline.num_voxels();
      for (int c = 0; c < lowres.dims[3]; ++c) {
        const Volume3 up =
            upsample_bspline(lowres.channel(c), {target_dim, target_dim, target_dim});
        std::copy(up.data.begin(), up.data.end(),
                  via_bspline.data.begin() + static_cast<std::ptrdiff_t>(c * nvox));
      }

      const auto [ns, ss] = stack_metrics(via_sr, truth);
      const auto [nb, sb] = stack_metrics(via_bspline, truth);
      n_sr += ns;
      s_sr += ss;
      n_bs += nb;
      s_bs += sb;
      ++count;
    }
    if (count == 0) throw ArgumentError("ablate: no test subjects");
    rows.push_back({"bspline", n_bs / count, s_bs / count});
    rows.push_back({"superres", n_sr / count, s_sr / count});
    write_ablation(paths.ablate(axis), cfg, rows, data_hash);
    return rows;
  }

  throw ConfigError("unknown ablation axis '" + axis + "' (expected finetune or superres)");
}

}  // namespace rishgen::pipeline
