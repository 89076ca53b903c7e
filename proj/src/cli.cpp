#include "mdpg/cli.hpp"

#include "mdpg/training.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mdpg {

using nlohmann::json;

json default_run_config() {
  return json::parse(R"({
    "seed": 0,
    "threads": 1,
    "run_dir": "runs/default",
    "cache_dir": "",
    "dump_images": false,
    "data": {
      "dir": "data/phantoms",
      "source": "phantom",
      "count": 200,
      "size": 64,
      "train_ratio": 0.9,
      "seed": 0,
      "fastmri_files": [],
      "crop": 320
    },
    "mask": {
      "width": 0,
      "acceleration": 4.0,
      "center_fraction": 0.08,
      "seed": 0,
      "noise_sigma": 0.0,
      "gamma_mode": "complement"
    },
    "vae": {
      "steps": 3000,
      "batch_size": 8,
      "learning_rate": 0.002,
      "weight_decay": 0.0001,
      "lr_schedule": "cosine",
      "latent_channels": 4,
      "base_width": 32,
      "kl_weight": 1e-6,
      "phase_augment": true,
      "log_every": 100,
      "warmup_steps": 200,
      "grad_clip": 1.0
    },
    "ldm": {
      "steps": 2000,
      "batch_size": 32,
      "learning_rate": 0.001,
      "weight_decay": 0.0001,
      "lr_schedule": "cosine",
      "width": 64,
      "time_dim": 128,
      "timesteps": 1000,
      "beta_start": 0.0001,
      "beta_end": 0.02,
      "cond_mode": "latent_concat",
      "ddim_steps": 20,
      "ddim_seed": 0,
      "log_every": 100,
      "checkpoint_every": 500,
      "resume": false,
      "warmup_steps": 0,
      "grad_clip": 0.0
    },
    "backbone": {
      "epochs": 100,
      "steps": 0,
      "batch_size": 8,
      "learning_rate": 0.004,
      "weight_decay": 0.0001,
      "lr_schedule": "constant",
      "widths": [32, 64, 128],
      "patch": 4,
      "state_dim": 8,
      "heads": 4,
      "decoder_width": 16,
      "dfb_kspace_features": 8,
      "dfb_res_width": 32,
      "dfb_res_blocks": 2,
      "nu_init": 1.0,
      "lambda1": 0.1,
      "magnitude_image_term": false,
      "warmup_steps": 0,
      "grad_clip": 0.0
    },
    "ablation": {
      "A_dfb": true,
      "B_lga": true,
      "C_sigmoid_gate": true,
      "D_learnable_nu": true,
      "E_dfb_before_encoder": true,
      "F_nacs_reg": true
    },
    "checkpoints": {
      "vae": "",
      "ldm": "",
      "backbone": ""
    },
    "reconstruct": {
      "split": "val"
    },
    "evaluate": {
      "recon": "",
      "gt": ""
    },
    "ablate": {
      "rows": "all"
    }
  })");
}

namespace {

enum class Kind { Bool, Integer, Number, String, Array, Object };

Kind kind_of(const json& v) {
  if (v.is_boolean()) return Kind::Bool;
  if (v.is_number_integer()) return Kind::Integer;
  if (v.is_number()) return Kind::Number;
  if (v.is_string()) return Kind::String;
  if (v.is_array()) return Kind::Array;
  if (v.is_object()) return Kind::Object;
  throw ConfigError("null values are not accepted");
}

bool compatible(const json& def, const json& v) {
  const auto kd = kind_of(def), kv = kind_of(v);
  if (kd == Kind::Number) return kv == Kind::Number || kv == Kind::Integer;
  if (kd == Kind::Array) {
    if (kv != Kind::Array) return false;
    if (def.empty()) return std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); });
    return std::all_of(v.begin(), v.end(), [&](const json& e) { return compatible(def.front(), e); });
  }
  return kd == kv;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

json& at_path(json& j, const std::string& path) {
  json* cur = &j;
  for (const auto& part : split(path, '.')) cur = &cur->at(part);
  return *cur;
}

json parse_scalar(Kind kind, const std::string& text, const std::string& path) {
  try {
    std::size_t used = 0;
    switch (kind) {
      case Kind::Bool:
        if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
        if (text == "false" || text == "0" || text == "no" || text == "off") return false;
        break;
      case Kind::Integer: {
        const auto v = std::stoll(text, &used);
        if (used == text.size()) return v;
        break;
      }
      case Kind::Number: {
        const auto v = std::stod(text, &used);
        if (used == text.size()) return v;
        break;
      }
      case Kind::String:
        return text;
      default:
        break;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("--" + path + ": cannot parse '" + text + "'");
}

json parse_flag(const json& def, const std::string& text, const std::string& path) {
  if (!def.is_array()) return parse_scalar(kind_of(def), text, path);
  json arr = json::array();
  if (text.empty()) return arr;
  const auto elem = def.empty() ? Kind::String : kind_of(def.front());
  for (const auto& part : split(text, ',')) arr.push_back(parse_scalar(elem, part, path));
  return arr;
}

// Parsed run configuration.
struct Run {
  json cfg;
  std::uint64_t seed = 0;
  fs::path run_dir, cache_dir, data_dir;
  MaskSpec mask;
  std::int64_t mask_width = 0;
  GammaMode gamma = GammaMode::Complement;
  TrainConfig vae_train, ldm_train;
  VaeConfig vae;
  LdmConfig ldm;
  bool phase_augment = true;
  bool ldm_resume = false;
  std::int64_t ldm_checkpoint_every = 0;
  Stage2Config stage2;
  bool dump_images = false;
};

template <class Fn>
auto as_config(const char* what, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

Run resolve(const json& cfg) {
  validate_run_config(cfg);
  return as_config("config", [&] {
    Run r;
    r.cfg = cfg;
    r.seed = cfg.at("seed").get<std::uint64_t>();
    r.run_dir = cfg.at("run_dir").get<std::string>();
    r.data_dir = cfg.at("data").at("dir").get<std::string>();
    std::string cache = cfg.at("cache_dir");
    if (cache.empty()) {
      if (const char* env = std::getenv("MDPG_CACHE_DIR"); env && *env) cache = env;
    }
    r.cache_dir = cache.empty() ? r.run_dir / "prior_cache" : fs::path(cache);
    r.dump_images = cfg.at("dump_images");

    const auto& m = cfg.at("mask");
    r.mask = MaskSpec::from_json(m);
    r.mask_width = m.at("width");
    r.gamma = gamma_mode_from_string(m.at("gamma_mode"));

    const auto size = cfg.at("data").at("size").get<std::int64_t>();
    auto train_cfg = [&](const json& s, Stage stage) {
      json t = {{"stage", to_string(stage)},
                {"learning_rate", s.at("learning_rate")},
                {"batch_size", s.at("batch_size")},
                {"steps", s.at("steps")},
                {"weight_decay", s.at("weight_decay")},
                {"lr_schedule", s.at("lr_schedule")},
                {"seed", r.seed},
                {"image_size", size},
                {"warmup_steps", s.at("warmup_steps")},
                {"grad_clip", s.at("grad_clip")}};
      if (s.contains("epochs")) t["epochs"] = s.at("epochs");
      if (s.contains("log_every")) t["log_every"] = s.at("log_every");
      return TrainConfig::from_json(t);
    };
    const auto& v = cfg.at("vae");
    r.vae_train = train_cfg(v, Stage::Vae);
    r.vae.latent_channels = v.at("latent_channels");
    r.vae.base_width = v.at("base_width");
    r.vae.kl_weight = v.at("kl_weight");
    r.phase_augment = v.at("phase_augment");

    const auto& l = cfg.at("ldm");
    r.ldm_train = train_cfg(l, Stage::Ldm);
    r.ldm.vae = r.vae;
    r.ldm.denoiser.width = l.at("width");
    r.ldm.denoiser.time_dim = l.at("time_dim");
    r.ldm.timesteps = l.at("timesteps");
    r.ldm.beta_start = l.at("beta_start");
    r.ldm.beta_end = l.at("beta_end");
    r.ldm.cond_mode = cond_mode_from_string(l.at("cond_mode"));
    r.ldm.ddim.num_steps = l.at("ddim_steps");
    r.ldm.ddim.seed = l.at("ddim_seed");
    r.ldm_resume = l.at("resume");
    r.ldm_checkpoint_every = l.at("checkpoint_every");

    const auto& b = cfg.at("backbone");
    r.stage2.train = train_cfg(b, Stage::Backbone);
    r.stage2.backbone.widths = b.at("widths").get<std::vector<std::int64_t>>();
    r.stage2.backbone.patch = b.at("patch");
    r.stage2.backbone.state_dim = b.at("state_dim");
    r.stage2.backbone.heads = b.at("heads");
    r.stage2.backbone.latent_channels = r.vae.latent_channels;
    r.stage2.backbone.decoder_width = b.at("decoder_width");
    r.stage2.backbone.dfb.kspace_features = b.at("dfb_kspace_features");
    r.stage2.backbone.dfb.res_width = b.at("dfb_res_width");
    r.stage2.backbone.dfb.res_blocks = b.at("dfb_res_blocks");
    r.stage2.backbone.nu_init = b.at("nu_init");
    r.stage2.loss.lambda1 = b.at("lambda1");
    r.stage2.loss.gamma_mode = r.gamma;
    r.stage2.loss.magnitude_image_term = b.at("magnitude_image_term");
    r.stage2.loss.validate();
    r.stage2.ablation = AblationConfig::from_json(cfg.at("ablation"));
    return r;
  });
}

std::vector<std::size_t> parse_rows(const std::string& spec) {
  const auto rows = ablation_rows();
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t i = 0; i < rows.size(); ++i) out.push_back(i);
    return out;
  }
  for (const auto& part : split(spec, ',')) {
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size() || v < 1 || v > static_cast<long>(rows.size())) {
      throw ConfigError("ablate.rows: expected 'all' or a comma list of row numbers 1-" + std::to_string(rows.size()));
    }
    out.push_back(static_cast<std::size_t>(v - 1));
  }
  return out;
}

class Logger {
 public:
  Logger(std::ostream& out, const fs::path& file) : out_(out) {
    fs::create_directories(file.parent_path());
    file_.open(file, std::ios::app);
  }
  void operator()(const std::string& line) {
    out_ << line << std::endl;
    if (file_) file_ << line << std::endl;
  }
  std::function<void(const std::string&)> fn() {
    return [this](const std::string& s) { (*this)(s); };
  }

 private:
  std::ostream& out_;
  std::ofstream file_;
};

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  write_text_atomic(path, j.dump(2) + "\n");
}

fs::path checkpoint_input(const Run& r, const char* name, const char* file) {
  const std::string given = r.cfg.at("checkpoints").at(name);
  const fs::path p = given.empty() ? r.run_dir / file : fs::path(given);
  if (!fs::exists(p)) throw CheckpointError(std::string("missing ") + name + " checkpoint: " + p.string());
  return p;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> train, val;
};

Dataset load_dataset(const Run& r) {
  if (!fs::exists(r.data_dir / "manifest.json")) {
    throw InputError("no dataset at " + r.data_dir.string() + " (run gen-data first)");
  }
  Dataset d;
  d.manifest = read_manifest(r.data_dir);
  d.train = read_samples(r.data_dir, d.manifest.train);
  d.val = read_samples(r.data_dir, d.manifest.val);
  if (d.train.empty()) throw InputError("dataset has an empty training split");
  return d;
}

Tensor stack_targets(const std::vector<Sample>& s) {
  std::vector<Tensor> t;
  for (const auto& x : s) t.push_back(x.target.data);
  return t.empty() ? Tensor() : torch::stack(t);
}

void finish_run(const Run& r, const std::map<std::string, fs::path>& files) {
  write_json(r.run_dir / "config.json", r.cfg);
  write_text_atomic(r.run_dir / "seed", std::to_string(r.seed) + "\n");
  write_run_manifest(r.run_dir, r.cfg, r.seed, files);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_data(const Run& r, Logger& log) {
  const auto& d = r.cfg.at("data");
  const std::string source = d.at("source");
  const auto seed = d.at("seed").get<std::uint64_t>();
  std::vector<Sample> samples;
  DatasetManifest manifest;
  if (source == "phantom") {
    samples = generate_phantom_set(d.at("count"), d.at("size"), seed);
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.id);
    manifest = make_splits(ids, d.at("train_ratio"), seed);
  } else {
    const auto files = d.at("fastmri_files").get<std::vector<std::string>>();
    if (files.empty()) throw ConfigError("data.fastmri_files is empty");
    std::vector<std::string> volumes;
    std::map<std::string, std::vector<std::string>> by_volume;
    for (const auto& f : files) {
      auto part = load_fastmri_volume(f, d.at("crop"));
      for (auto& s : part) {
        if (by_volume[s.volume_id].empty()) volumes.push_back(s.volume_id);
        by_volume[s.volume_id].push_back(s.id);
        samples.push_back(std::move(s));
      }
    }
    // Split whole volumes so slices of one volume never straddle train and val.
    const auto vm = make_splits(volumes, d.at("train_ratio"), seed);
    for (const auto& v : vm.train) manifest.train.insert(manifest.train.end(), by_volume[v].begin(), by_volume[v].end());
    for (const auto& v : vm.val) manifest.val.insert(manifest.val.end(), by_volume[v].begin(), by_volume[v].end());
    manifest.seed = seed;
  }
  manifest.source = source;
  manifest.height = samples.front().target.height();
  manifest.width = samples.front().target.width();
  write_dataset(r.data_dir, samples, manifest);
  log("wrote " + std::to_string(samples.size()) + " samples (" + std::to_string(manifest.train.size()) + " train, " +
      std::to_string(manifest.val.size()) + " val) to " + r.data_dir.string());
  finish_run(r, {{"dataset_manifest", r.data_dir / "manifest.json"}});
  return 0;
}

int cmd_make_mask(const Run& r, Logger& log, const std::string& out_path) {
  const auto width = r.mask_width > 0 ? r.mask_width : r.cfg.at("data").at("size").get<std::int64_t>();
  const auto mask = make_cartesian_mask(width, r.mask.acceleration, r.mask.center_fraction, r.mask.seed);
  const fs::path out = out_path.empty() ? r.run_dir / "mask.json" : fs::path(out_path);
  write_json(out, mask.to_json());
  log("mask: width " + std::to_string(width) + ", " + std::to_string(mask.acs_count()) + " ACS columns, " +
      std::to_string(mask.sampled_count()) + " sampled -> " + out.string());
  finish_run(r, {{"mask", out}});
  return 0;
}

Checkpoint vae_checkpoint(Vae& vae) {
  Checkpoint ck;
  store_module_state(*vae, ck.tensors, "vae.");
  const auto& c = vae->config();
  ck.meta = {{"kind", "vae"},
             {"config", {{"latent_channels", c.latent_channels}, {"base_width", c.base_width}, {"kl_weight", c.kl_weight}}},
             {"latent_scale", vae->latent_scale()},
             {"trained", vae->trained()}};
  return ck;
}

int cmd_train_vae(const Run& r, Logger& log) {
  const auto data = load_dataset(r);
  torch::manual_seed(r.seed);
  Vae vae(r.vae);
  auto res = train_vae(vae, stack_targets(data.train), stack_targets(data.val), r.vae_train, r.phase_augment, log.fn());
  const auto ckpt = r.run_dir / "vae.ckpt";
  save_checkpoint(ckpt, vae_checkpoint(vae));
  res.curve.write_csv(r.run_dir / "vae_curve.csv");
  write_json(r.run_dir / "vae_metrics.json", {{"val_rel_error", res.val_rel_error},
                                              {"val_psnr", res.val_psnr},
                                              {"latent_scale", vae->latent_scale()}});
  log("vae: val relative error " + std::to_string(res.val_rel_error) + ", val PSNR " + std::to_string(res.val_psnr));
  finish_run(r, {{"vae", ckpt}, {"dataset_manifest", r.data_dir / "manifest.json"}});
  return 0;
}

void load_vae_into(LatentDiffusion& ldm, const fs::path& path) {
  const auto ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "vae") throw CheckpointError(path.string() + " is not a VAE checkpoint");
  const auto& c = ck.meta.at("config");
  const auto& v = ldm.config().vae;
  if (c.at("latent_channels") != v.latent_channels || c.at("base_width") != v.base_width) {
    throw ConfigError("VAE checkpoint architecture differs from the configured vae section");
  }
  load_module_state(*ldm.vae(), ck.tensors, "vae.");
  ldm.vae()->set_latent_scale(ck.meta.at("latent_scale"));
  ldm.vae()->mark_trained(ck.meta.at("trained"));
}

// Fraction of samples whose synthesized image beats zero filling.
double prior_win_rate(const PreparedSet& set, const PriorSet& priors) {
  std::int64_t wins = 0;
  const auto gt = magnitude(set.x), zf = magnitude(set.x_u), xb = magnitude(priors.xbar);
  for (std::int64_t i = 0; i < set.size(); ++i) wins += psnr(xb[i], gt[i]) > psnr(zf[i], gt[i]);
  return static_cast<double>(wins) / static_cast<double>(set.size());
}

int cmd_train_ldm(const Run& r, Logger& log) {
  const auto vae_path = checkpoint_input(r, "vae", "vae.ckpt");
  const auto data = load_dataset(r);
  const auto train = prepare_set(data.train, r.mask, r.gamma);
  const auto out = r.run_dir / "ldm.ckpt";

  std::optional<Checkpoint> resume;
  if (r.ldm_resume && fs::exists(out)) {
    auto ck = load_checkpoint(out);
    if (ck.meta.contains("train_state")) resume = std::move(ck);
  }
  torch::manual_seed(r.seed);
  LatentDiffusion ldm = resume ? LatentDiffusion::from_checkpoint(*resume) : LatentDiffusion(r.ldm);
  if (!resume) load_vae_into(ldm, vae_path);
  LdmTrainer trainer(ldm, train, r.ldm_train);
  if (resume) {
    trainer.restore(*resume);
    log("resuming LDM training at step " + std::to_string(trainer.steps_done()));
  }
  const double initial = trainer.peek_loss();
  auto curve = trainer.run(log.fn(), r.ldm_checkpoint_every, [&] { save_checkpoint(out, trainer.checkpoint()); });
  save_checkpoint(out, trainer.checkpoint());
  curve.write_csv(r.run_dir / "ldm_curve.csv");

  json metrics = {{"initial_loss", initial}, {"steps", trainer.steps_done()}};
  if (!curve.rows.empty()) metrics["final_running_loss"] = curve.rows.back().at(2);
  if (!data.val.empty()) {
    const auto val = prepare_set(data.val, r.mask, r.gamma);
    const auto priors = compute_priors(ldm, val, r.cache_dir);
    metrics["prior_win_rate"] = prior_win_rate(val, priors);
  }
  write_json(r.run_dir / "ldm_metrics.json", metrics);
  log("ldm: " + metrics.dump());
  finish_run(r, {{"vae", vae_path}, {"ldm", out}, {"dataset_manifest", r.data_dir / "manifest.json"}});
  return 0;
}

struct Stage2Data {
  Dataset data;
  PreparedSet train, val;
  PriorSet train_priors, val_priors;
  std::optional<fs::path> ldm_path;
};

Stage2Data stage2_inputs(const Run& r, bool need_priors, Logger& log) {
  Stage2Data s;
  if (need_priors) s.ldm_path = checkpoint_input(r, "ldm", "ldm.ckpt");
  s.data = load_dataset(r);
  if (s.data.val.empty()) throw InputError("dataset has an empty validation split");
  s.train = prepare_set(s.data.train, r.mask, r.gamma);
  s.val = prepare_set(s.data.val, r.mask, r.gamma);
  if (need_priors) {
    auto ldm = LatentDiffusion::from_checkpoint(load_checkpoint(*s.ldm_path));
    std::size_t hits = 0, val_hits = 0;
    s.train_priors = compute_priors(ldm, s.train, r.cache_dir, 16, &hits);
    s.val_priors = compute_priors(ldm, s.val, r.cache_dir, 16, &val_hits);
    log("priors: " + std::to_string(hits + val_hits) + " of " + std::to_string(s.train.size() + s.val.size()) +
        " from cache " + r.cache_dir.string());
  }
  return s;
}

void dump_images(const fs::path& dir, const PreparedSet& set, const Tensor& recon) {
  fs::create_directories(dir);
  for (std::int64_t i = 0; i < set.size(); ++i) {
    const double vmax = magnitude(set.x[i]).max().item<double>();
    write_png_magnitude(dir / (set.ids[i] + "_gt.png"), set.x[i], vmax);
    write_png_magnitude(dir / (set.ids[i] + "_zf.png"), set.x_u[i], vmax);
    write_png_magnitude(dir / (set.ids[i] + "_recon.png"), recon[i], vmax);
  }
}

json train_one(const Run& r, const Stage2Config& cfg, const Stage2Data& in, const fs::path& dir, Logger& log) {
  fs::create_directories(dir);
  BackboneTrainer trainer(cfg, in.train, in.train_priors);
  const double nu0 = trainer.net()->nu.item<double>();
  auto curve = trainer.run(in.val, in.val_priors, log.fn());
  const auto ckpt = dir / "backbone.ckpt";
  save_checkpoint(ckpt, trainer.checkpoint());
  curve.write_csv(dir / "curve.csv");

  const auto recon = trainer.reconstruct(in.val, in.val_priors);
  const auto report = evaluate_magnitudes(magnitude(recon).squeeze(1), magnitude(in.val.x).squeeze(1), in.val.volume_ids);
  const auto zf = zero_fill_metrics(in.val);
  std::vector<std::int64_t> probe;
  for (std::int64_t i = 0; i < std::min<std::int64_t>(in.train.size(), cfg.train.batch_size); ++i) probe.push_back(i);
  const double nu1 = trainer.net()->nu.item<double>();
  json m = {{"val", report.to_json()},
            {"zero_fill", zf.to_json()},
            {"psnr_gain_db", report.psnr - zf.psnr},
            {"ablation", cfg.ablation.to_json()},
            {"label", cfg.ablation.label()},
            {"nu_initial", nu0},
            {"nu_final", nu1},
            {"nu_unchanged", nu0 == nu1},
            {"effective_lambda1", trainer.loss_config().lambda1},
            {"kspace_grad_contribution", kspace_gradient_contribution(trainer, probe)},
            {"epochs", trainer.epoch()}};
  write_json(dir / "metrics.json", m);
  if (r.dump_images) dump_images(dir / "images", in.val, recon);
  std::map<std::string, fs::path> files = {{"backbone", ckpt}, {"dataset_manifest", r.data_dir / "manifest.json"}};
  if (in.ldm_path) files["ldm"] = *in.ldm_path;
  auto run_cfg = r.cfg;
  run_cfg["ablation"] = cfg.ablation.to_json();
  write_json(dir / "config.json", run_cfg);
  write_text_atomic(dir / "seed", std::to_string(r.seed) + "\n");
  write_run_manifest(dir, run_cfg, r.seed, files);
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << cfg.ablation.label() << ": val PSNR " << report.psnr << " dB (zero-fill "
     << zf.psnr << "), SSIM " << report.ssim << ", NMSE " << report.nmse;
  log(os.str());
  return m;
}

int cmd_train_backbone(const Run& r, Logger& log) {
  const auto in = stage2_inputs(r, r.stage2.ablation.uses_priors(), log);
  train_one(r, r.stage2, in, r.run_dir, log);
  return 0;
}

int cmd_ablate(const Run& r, Logger& log) {
  const auto rows = parse_rows(r.cfg.at("ablate").at("rows"));
  const auto table = ablation_rows();
  bool need_priors = false;
  for (auto i : rows) need_priors = need_priors || table[i].uses_priors();
  const auto in = stage2_inputs(r, need_priors, log);
  json summary = json::array();
  for (auto i : rows) {
    auto cfg = r.stage2;
    cfg.ablation = table[i];
    char name[64];
    std::snprintf(name, sizeof name, "row%zu_%s", i + 1, cfg.ablation.label().c_str());
    log(std::string("ablation ") + name);
    auto m = train_one(r, cfg, in, r.run_dir / name, log);
    summary.push_back({{"row", i + 1},
                       {"dir", name},
                       {"label", m.at("label")},
                       {"ablation", m.at("ablation")},
                       {"mean", m.at("val").at("mean")},
                       {"zero_fill_psnr", m.at("zero_fill").at("mean").at("psnr")},
                       {"nu_unchanged", m.at("nu_unchanged")},
                       {"kspace_grad_contribution", m.at("kspace_grad_contribution")}});
  }
  write_json(r.run_dir / "ablation.json", summary);
  std::map<std::string, fs::path> files = {{"dataset_manifest", r.data_dir / "manifest.json"}};
  if (in.ldm_path) files["ldm"] = *in.ldm_path;
  finish_run(r, files);
  return 0;
}

int cmd_reconstruct(const Run& r, Logger& log) {
  const auto bb_path = checkpoint_input(r, "backbone", "backbone.ckpt");
  auto net = BackboneTrainer::backbone_from_checkpoint(load_checkpoint(bb_path));
  const auto& ablation = net->ablation();
  std::optional<fs::path> ldm_path;
  if (ablation.uses_priors()) ldm_path = checkpoint_input(r, "ldm", "ldm.ckpt");

  const auto data = load_dataset(r);
  const std::string split = r.cfg.at("reconstruct").at("split");
  std::vector<Sample> chosen;
  if (split == "train" || split == "all") chosen.insert(chosen.end(), data.train.begin(), data.train.end());
  if (split == "val" || split == "all") chosen.insert(chosen.end(), data.val.begin(), data.val.end());
  if (chosen.empty()) throw InputError("nothing to reconstruct in split '" + split + "'");
  const auto set = prepare_set(chosen, r.mask, r.gamma);
  PriorSet priors;
  if (ldm_path) {
    auto ldm = LatentDiffusion::from_checkpoint(load_checkpoint(*ldm_path));
    priors = compute_priors(ldm, set, r.cache_dir);
  }
  const auto recon = reconstruct_set(net, set, priors);

  std::vector<Sample> out;
  for (std::int64_t i = 0; i < set.size(); ++i) {
    out.push_back(Sample{set.ids[i], set.volume_ids[i],
                         ComplexImage::from_tensor(recon[i].contiguous(), chosen[i].target.normalization_scale)});
  }
  DatasetManifest m;
  m.val = set.ids;
  m.source = "reconstruction";
  m.height = set.x.size(2);
  m.width = set.x.size(3);
  m.seed = r.seed;
  const auto dir = r.run_dir / "recon";
  write_dataset(dir, out, m);
  if (r.dump_images) dump_images(r.run_dir / "images", set, recon);
  log("reconstructed " + std::to_string(set.size()) + " samples -> " + dir.string());
  std::map<std::string, fs::path> files = {{"backbone", bb_path}, {"recon_manifest", dir / "manifest.json"}};
  if (ldm_path) files["ldm"] = *ldm_path;
  finish_run(r, files);
  return 0;
}

int cmd_evaluate(const Run& r, Logger& log) {
  const std::string recon_s = r.cfg.at("evaluate").at("recon"), gt_s = r.cfg.at("evaluate").at("gt");
  const fs::path recon_dir = recon_s.empty() ? r.run_dir / "recon" : fs::path(recon_s);
  const fs::path gt_dir = gt_s.empty() ? r.data_dir : fs::path(gt_s);
  if (!fs::exists(recon_dir / "manifest.json")) throw InputError("no reconstructions at " + recon_dir.string());
  const auto rm = read_manifest(recon_dir);
  auto ids = rm.train;
  ids.insert(ids.end(), rm.val.begin(), rm.val.end());
  if (ids.empty()) throw InputError("evaluate: empty reconstruction set");
  const auto recon = read_samples(recon_dir, ids);
  const auto gt = read_samples(gt_dir, ids);
  const auto report = evaluate(recon, gt);
  write_json(r.run_dir / "metrics.json", report.to_json());
  if (r.dump_images) {
    fs::create_directories(r.run_dir / "images");
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double vmax = magnitude(gt[i].target.data).max().item<double>();
      write_png_magnitude(r.run_dir / "images" / (ids[i] + "_recon.png"), recon[i].target.data, vmax);
      write_png_magnitude(r.run_dir / "images" / (ids[i] + "_gt.png"), gt[i].target.data, vmax);
    }
  }
  std::ostringstream os;
  os << std::setprecision(6) << "PSNR " << report.psnr << " SSIM " << report.ssim << " NMSE " << report.nmse << " over "
     << report.per_volume.size() << " volume(s)";
  log(os.str());
  finish_run(r, {{"recon_manifest", recon_dir / "manifest.json"}, {"gt_manifest", gt_dir / "manifest.json"}});
  return 0;
}

}  // namespace

void merge_config(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config" + (where.empty() ? "" : " '" + where + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else {
      if (!compatible(slot, value)) {
        throw ConfigError("config key '" + path + "' expects " + std::string(slot.type_name()) + ", got " + value.type_name());
      }
      slot = value;
    }
  }
}

std::vector<std::string> config_leaves(const json& cfg) {
  std::vector<std::string> out;
  std::function<void(const json&, const std::string&)> walk = [&](const json& j, const std::string& prefix) {
    for (const auto& [k, v] : j.items()) {
      const auto p = prefix.empty() ? k : prefix + "." + k;
      if (v.is_object()) {
        walk(v, p);
      } else {
        out.push_back(p);
      }
    }
  };
  walk(cfg, "");
  return out;
}

void validate_run_config(const json& cfg) {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  as_config("config", [&] {
    check(cfg.at("threads").get<std::int64_t>() >= 1, "threads must be >= 1");
    check(cfg.at("seed").get<std::int64_t>() >= 0, "seed must be >= 0");
    check(!cfg.at("run_dir").get<std::string>().empty(), "run_dir must not be empty");
    const auto& d = cfg.at("data");
    const std::string source = d.at("source");
    check(source == "phantom" || source == "fastmri", "data.source must be 'phantom' or 'fastmri'");
    check(d.at("count").get<std::int64_t>() >= 2, "data.count must be >= 2");
    const auto size = d.at("size").get<std::int64_t>();
    check(size >= 16 && size % 16 == 0, "data.size must be a positive multiple of 16");
    const double ratio = d.at("train_ratio");
    check(ratio > 0.0 && ratio < 1.0, "data.train_ratio must be in (0, 1)");
    check(d.at("seed").get<std::int64_t>() >= 0, "data.seed must be >= 0");
    const auto crop = d.at("crop").get<std::int64_t>();
    check(crop >= 16 && crop % 16 == 0, "data.crop must be a positive multiple of 16");
    const auto& m = cfg.at("mask");
    check(m.at("width").get<std::int64_t>() >= 0, "mask.width must be >= 0 (0: image width)");
    check(m.at("seed").get<std::int64_t>() >= 0, "mask.seed must be >= 0");
    MaskSpec::from_json(m);
    gamma_mode_from_string(m.at("gamma_mode"));
    const auto& v = cfg.at("vae");
    check(v.at("latent_channels").get<std::int64_t>() >= 1, "vae.latent_channels must be >= 1");
    check(v.at("base_width").get<std::int64_t>() >= 1, "vae.base_width must be >= 1");
    check(v.at("kl_weight").get<double>() >= 0.0, "vae.kl_weight must be >= 0");
    const auto& l = cfg.at("ldm");
    check(l.at("width").get<std::int64_t>() >= 8 && l.at("width").get<std::int64_t>() % 8 == 0,
          "ldm.width must be a positive multiple of 8");
    check(l.at("time_dim").get<std::int64_t>() >= 2 && l.at("time_dim").get<std::int64_t>() % 2 == 0,
          "ldm.time_dim must be even");
    const auto T = l.at("timesteps").get<std::int64_t>();
    check(T >= 1, "ldm.timesteps must be >= 1");
    const double b0 = l.at("beta_start"), b1 = l.at("beta_end");
    check(b0 > 0.0 && b1 < 1.0 && b0 < b1, "ldm betas must satisfy 0 < beta_start < beta_end < 1");
    cond_mode_from_string(l.at("cond_mode"));
    const auto S = l.at("ddim_steps").get<std::int64_t>();
    check(S >= 1 && S <= T && T % S == 0, "ldm.ddim_steps must divide ldm.timesteps");
    check(l.at("ddim_seed").get<std::int64_t>() >= 0, "ldm.ddim_seed must be >= 0");
    check(l.at("checkpoint_every").get<std::int64_t>() >= 0, "ldm.checkpoint_every must be >= 0");
    const auto& b = cfg.at("backbone");
    const auto widths = b.at("widths").get<std::vector<std::int64_t>>();
    check(!widths.empty(), "backbone.widths must not be empty");
    for (auto w : widths) check(w >= 1 && w % b.at("heads").get<std::int64_t>() == 0, "backbone.widths must be multiples of backbone.heads");
    const auto patch = b.at("patch").get<std::int64_t>();
    check(patch >= 1, "backbone.patch must be >= 1");
    check(size % (patch << (widths.size() - 1)) == 0, "data.size must be divisible by patch * 2^(stages - 1)");
    check(b.at("state_dim").get<std::int64_t>() >= 1, "backbone.state_dim must be >= 1");
    check(b.at("heads").get<std::int64_t>() >= 1, "backbone.heads must be >= 1");
    check(b.at("decoder_width").get<std::int64_t>() >= 1, "backbone.decoder_width must be >= 1");
    check(b.at("dfb_kspace_features").get<std::int64_t>() >= 1, "backbone.dfb_kspace_features must be >= 1");
    check(b.at("dfb_res_width").get<std::int64_t>() >= 1, "backbone.dfb_res_width must be >= 1");
    check(b.at("dfb_res_blocks").get<std::int64_t>() >= 0, "backbone.dfb_res_blocks must be >= 0");
    check(b.at("nu_init").get<double>() >= 0.0, "backbone.nu_init must be >= 0");
    check(b.at("lambda1").get<double>() >= 0.0, "backbone.lambda1 must be >= 0");
    const std::string split = cfg.at("reconstruct").at("split");
    check(split == "val" || split == "train" || split == "all", "reconstruct.split must be val, train or all");
    parse_rows(cfg.at("ablate").at("rows"));
    return 0;
  });
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const CLI::Error*>(&e)) return 2;
  if (dynamic_cast<const CheckpointError*>(&e)) return 3;
  return 1;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prior-guided MRI reconstruction: data, masks, two-stage training, evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show every config flag of every subcommand");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "Generate phantoms or ingest FastMRI volumes into a dataset directory"},
      {"make-mask", "Write a Cartesian undersampling mask as JSON"},
      {"train-vae", "Train the VAE on full-sampled training images"},
      {"train-ldm", "Train the conditional latent denoiser (frozen VAE)"},
      {"train-backbone", "Train the prior-guided reconstruction network"},
      {"reconstruct", "Reconstruct a dataset split with a trained backbone"},
      {"evaluate", "Compute PSNR / SSIM / NMSE of reconstructions against ground truth"},
      {"ablate", "Train one backbone per ablation row"},
  };
  const auto defaults = default_run_config();
  const auto leaves = config_leaves(defaults);

  std::string config_path, mask_out;
  std::map<std::string, std::string> overrides;
  bool dump = false;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    subs[name] = sub;
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_flag("--dump-images", dump, "Write PNG magnitude images");
    sub->add_option_function<std::string>("--run-dir", [&](const std::string& v) { overrides["run_dir"] = v; }, "Run directory");
    sub->add_option_function<std::string>("--data-dir", [&](const std::string& v) { overrides["data.dir"] = v; }, "Dataset directory");
    for (const auto& leaf : leaves) {
      const json& def = at_path(const_cast<json&>(defaults), leaf);
      const auto flag = "--" + leaf;
      if (name == "make-mask" && leaf == "seed") continue;  // --seed is the mask seed here
      sub->add_option_function<std::string>(
             flag, [&overrides, leaf](const std::string& v) { overrides[leaf] = v; }, "default: " + def.dump())
          ->group("Config overrides");
    }
  }
  auto* mm = subs.at("make-mask");
  mm->add_option_function<std::int64_t>("--width", [&](std::int64_t v) { overrides["mask.width"] = std::to_string(v); }, "Mask width (columns)");
  mm->add_option_function<std::string>("--accel", [&](const std::string& v) { overrides["mask.acceleration"] = v; }, "Acceleration factor R");
  mm->add_option_function<std::string>("--center-frac", [&](const std::string& v) { overrides["mask.center_fraction"] = v; }, "ACS fraction");
  mm->add_option_function<std::string>("--seed", [&](const std::string& v) { overrides["mask.seed"] = v; }, "Mask seed");
  mm->add_option("--out", mask_out, "Output JSON path (default: <run_dir>/mask.json)");
  subs.at("ablate")->add_option_function<std::string>("--rows", [&](const std::string& v) { overrides["ablate.rows"] = v; }, "'all' or row numbers, e.g. 1,9");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);

    json cfg = defaults;
    if (!config_path.empty()) {
      json file;
      try {
        file = json::parse(read_text(config_path));
      } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + config_path + ": " + e.what());
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      merge_config(cfg, file);
    }
    for (const auto& [leaf, text] : overrides) at_path(cfg, leaf) = parse_flag(at_path(cfg, leaf), text, leaf);
    if (dump) cfg["dump_images"] = true;
    const auto run = resolve(cfg);

    at::set_num_threads(static_cast<int>(cfg.at("threads").get<std::int64_t>()));
    fs::create_directories(run.run_dir);
    Logger log(out, run.run_dir / "log.txt");
    const auto name = app.get_subcommands().front()->get_name();
    if (name == "gen-data") return cmd_gen_data(run, log);
    if (name == "make-mask") return cmd_make_mask(run, log, mask_out);
    if (name == "train-vae") return cmd_train_vae(run, log);
    if (name == "train-ldm") return cmd_train_ldm(run, log);
    if (name == "train-backbone") return cmd_train_backbone(run, log);
    if (name == "reconstruct") return cmd_reconstruct(run, log);
    if (name == "evaluate") return cmd_evaluate(run, log);
    if (name == "ablate") return cmd_ablate(run, log);
    throw ConfigError("unknown subcommand " + name);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    const char* kind = code == 2 ? "config error" : code == 3 ? "checkpoint error" : "error";
    err << kind << ": " << e.what() << "\n";
    return code;
  }
}

}  // namespace mdpg
