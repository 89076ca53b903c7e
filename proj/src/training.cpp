#include "mdpg/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace mdpg {

namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

template <class T>
void read_opt(const json& j, const char* key, T& v) {
  if (j.contains(key)) v = j.at(key).get<T>();
}

template <class Fn>
auto config_guard(const char* what, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

constexpr std::uint64_t kShuffleSalt = 0x5a17'c0de'0000'0001ULL;
constexpr std::uint64_t kNoiseSalt = 0x5a17'c0de'0000'0002ULL;

// Batch `pos` of the epoch's seeded permutation.
std::vector<std::int64_t> epoch_batch(std::uint64_t seed, std::int64_t epoch, std::int64_t pos, std::int64_t n,
                                      std::int64_t batch) {
  auto gen = make_generator(mix_seed(seed ^ kShuffleSalt, static_cast<std::uint64_t>(epoch)));
  auto perm = torch::randperm(n, gen, torch::kLong);
  const auto begin = pos * batch, end = std::min(n, begin + batch);
  std::vector<std::int64_t> out(perm.data_ptr<std::int64_t>() + begin, perm.data_ptr<std::int64_t>() + end);
  return out;
}

std::int64_t steps_per_epoch(std::int64_t n, std::int64_t batch) { return (n + batch - 1) / batch; }

Tensor gather(const Tensor& t, const std::vector<std::int64_t>& idx) {
  return t.index_select(0, torch::tensor(idx, torch::kLong));
}

void set_lr(torch::optim::AdamW& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
}

void clip_gradients(const std::vector<Tensor>& params, double max_norm) {
  if (max_norm > 0.0) torch::nn::utils::clip_grad_norm_(params, max_norm);
}

Tensor batched_no_grad(const Tensor& x, std::int64_t batch, const std::function<Tensor(const Tensor&)>& fn) {
  torch::NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::int64_t i = 0; i < x.size(0); i += batch) parts.push_back(fn(x.slice(0, i, i + batch)));
  return torch::cat(parts);
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss

void LossConfig::validate() const {
  if (!(lambda1 >= 0.0) || !std::isfinite(lambda1)) throw ConfigError("lambda1 must be finite and >= 0");
}

json LossConfig::to_json() const {
  return {{"lambda1", lambda1}, {"gamma_mode", mdpg::to_string(gamma_mode)}, {"magnitude_image_term", magnitude_image_term}};
}

LossConfig LossConfig::from_json(const json& j) {
  return config_guard("loss config", [&] {
    LossConfig c;
    read_opt(j, "lambda1", c.lambda1);
    if (j.contains("gamma_mode")) c.gamma_mode = gamma_mode_from_string(j.at("gamma_mode"));
    read_opt(j, "magnitude_image_term", c.magnitude_image_term);
    c.validate();
    return c;
  });
}

LossTerms combined_loss_terms(const Tensor& xhat, const Tensor& x, const Tensor& gamma, const LossConfig& cfg) {
  if (xhat.sizes() != x.sizes() || x.dim() != 4 || x.size(1) != 2) {
    throw ShapeError("combined_loss: xhat and x must both be (B, 2, H, W)");
  }
  const auto xi = cfg.magnitude_image_term ? magnitude(x) : x;
  const auto xh = cfg.magnitude_image_term ? magnitude(xhat) : xhat;
  const auto x_norm = xi.flatten(1).norm(2, 1);
  if (x_norm.eq(0).any().item<bool>()) throw DegenerateTargetError("combined_loss: target has zero norm");
  auto image = (xh - xi).flatten(1).norm(2, 1) / x_norm;

  LossTerms out;
  out.image = image.mean();
  if (cfg.lambda1 == 0.0) {
    out.kspace = torch::zeros({}, x.options());
    out.total = out.image;
    return out;
  }
  const auto kx = nacs_restrict(fft2c(x), gamma);
  const auto kh = nacs_restrict(fft2c(xhat), gamma);
  const auto k_norm = kx.flatten(1).norm(2, 1);
  if (k_norm.eq(0).any().item<bool>()) {
    throw DegenerateTargetError("combined_loss: target has no energy on the NACS set");
  }
  auto kspace = (kh - kx).flatten(1).norm(2, 1) / k_norm;
  out.kspace = kspace.mean();
  out.total = (image + cfg.lambda1 * kspace).mean();
  return out;
}

Tensor combined_loss(const Tensor& xhat, const Tensor& x, const Tensor& gamma, const LossConfig& cfg) {
  return combined_loss_terms(xhat, x, gamma, cfg).total;
}

double combined_loss(const ComplexImage& xhat, const ComplexImage& x, const CartesianMask& mask,
                     const LossConfig& cfg) {
  if (x.width() != mask.width()) throw ShapeError("combined_loss: mask width mismatch");
  const auto dtype = x.data.scalar_type();
  auto gamma = mask.gamma_tensor(cfg.gamma_mode, dtype);
  return combined_loss(xhat.data.unsqueeze(0).to(dtype), x.data.unsqueeze(0), gamma, cfg).item<double>();
}

LossConfig effective_loss_config(const LossConfig& cfg, const AblationConfig& ablation) {
  auto out = cfg;
  if (!ablation.F_nacs_reg) out.lambda1 = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

double psnr(const Tensor& recon, const Tensor& gt, double cap) {
  if (recon.sizes() != gt.sizes()) throw ShapeError("psnr: shape mismatch");
  const auto r = recon.to(torch::kFloat64), g = gt.to(torch::kFloat64);
  const double mse = (r - g).pow(2).mean().item<double>();
  const double range = g.max().item<double>();
  if (mse == 0.0) return cap;
  if (!(range > 0.0)) throw DegenerateTargetError("psnr: ground truth has no positive range");
  return std::min(cap, 10.0 * std::log10(range * range / mse));
}

double ssim(const Tensor& recon, const Tensor& gt, double data_range) {
  if (recon.sizes() != gt.sizes()) throw ShapeError("ssim: shape mismatch");
  if (gt.dim() != 2 && gt.dim() != 3) throw ShapeError("ssim: expected (H, W) or (S, H, W)");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, kK1 = 0.01, kK2 = 0.03;
  if (gt.size(-1) < kWin || gt.size(-2) < kWin) throw ShapeError("ssim: images smaller than the 11x11 window");
  if (!(data_range > 0.0)) throw DegenerateTargetError("ssim: data range must be positive");

  auto g1 = torch::arange(kWin, torch::kFloat64).sub(kWin / 2).pow(2).div(-2.0 * kSigma * kSigma).exp();
  g1 = g1 / g1.sum();
  const auto window = torch::outer(g1, g1).view({1, 1, kWin, kWin});
  auto as_stack = [](const Tensor& t) {
    auto d = t.to(torch::kFloat64);
    return d.dim() == 2 ? d.view({1, 1, d.size(0), d.size(1)}) : d.unsqueeze(1);
  };
  const auto x = as_stack(recon), y = as_stack(gt);
  auto filt = [&](const Tensor& t) { return F::conv2d(t, window); };
  const auto mx = filt(x), my = filt(y);
  const auto sxx = filt(x * x) - mx * mx;
  const auto syy = filt(y * y) - my * my;
  const auto sxy = filt(x * y) - mx * my;
  const double c1 = (kK1 * data_range) * (kK1 * data_range), c2 = (kK2 * data_range) * (kK2 * data_range);
  const auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean({1, 2, 3}).mean().item<double>();
}

double nmse(const Tensor& recon, const Tensor& gt) {
  if (recon.sizes() != gt.sizes()) throw ShapeError("nmse: shape mismatch");
  const auto r = recon.to(torch::kFloat64), g = gt.to(torch::kFloat64);
  const double denom = g.pow(2).sum().item<double>();
  if (denom == 0.0) throw DegenerateTargetError("nmse: ground truth is zero");
  return (r - g).pow(2).sum().item<double>() / denom;
}

json MetricsReport::to_json() const {
  json vols = json::array();
  for (const auto& v : per_volume) {
    vols.push_back({{"volume_id", v.volume_id}, {"slices", v.slices}, {"psnr", v.psnr}, {"ssim", v.ssim}, {"nmse", v.nmse}});
  }
  return {{"per_volume", vols}, {"mean", {{"psnr", psnr}, {"ssim", ssim}, {"nmse", nmse}}}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  for (const auto& v : j.at("per_volume")) {
    r.per_volume.push_back({v.at("volume_id"), v.at("slices"), v.at("psnr"), v.at("ssim"), v.at("nmse")});
  }
  r.psnr = j.at("mean").at("psnr");
  r.ssim = j.at("mean").at("ssim");
  r.nmse = j.at("mean").at("nmse");
  return r;
}

MetricsReport evaluate_magnitudes(const Tensor& recon_mag, const Tensor& gt_mag,
                                  const std::vector<std::string>& volume_ids) {
  if (recon_mag.sizes() != gt_mag.sizes()) throw ShapeError("evaluate: reconstruction/target shape mismatch");
  if (gt_mag.dim() != 3) throw ShapeError("evaluate: expected (N, H, W) magnitudes");
  if (gt_mag.size(0) == 0) throw InputError("evaluate: empty set");
  if (static_cast<std::int64_t>(volume_ids.size()) != gt_mag.size(0)) throw ShapeError("evaluate: one volume id per slice");

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::int64_t>> groups;
  for (std::size_t i = 0; i < volume_ids.size(); ++i) {
    auto [it, fresh] = groups.try_emplace(volume_ids[i]);
    if (fresh) order.push_back(volume_ids[i]);
    it->second.push_back(static_cast<std::int64_t>(i));
  }
  MetricsReport rep;
  for (const auto& id : order) {
    const auto& idx = groups.at(id);
    const auto r = gather(recon_mag, idx), g = gather(gt_mag, idx);
    VolumeMetrics v;
    v.volume_id = id;
    v.slices = static_cast<std::int64_t>(idx.size());
    v.psnr = psnr(r, g);
    v.ssim = ssim(r, g, g.max().item<double>());
    v.nmse = nmse(r, g);
    rep.psnr += v.psnr;
    rep.ssim += v.ssim;
    rep.nmse += v.nmse;
    rep.per_volume.push_back(std::move(v));
  }
  const double n = static_cast<double>(rep.per_volume.size());
  rep.psnr /= n;
  rep.ssim /= n;
  rep.nmse /= n;
  return rep;
}

MetricsReport evaluate(const std::vector<Sample>& recon, const std::vector<Sample>& gt) {
  if (gt.empty()) throw InputError("evaluate: empty set");
  if (recon.size() != gt.size()) throw ShapeError("evaluate: reconstruction and target counts differ");
  std::vector<Tensor> r, g;
  std::vector<std::string> vols;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (recon[i].id != gt[i].id) throw InputError("evaluate: unmatched pair " + recon[i].id + " / " + gt[i].id);
    if (recon[i].target.data.sizes() != gt[i].target.data.sizes()) throw ShapeError("evaluate: shape mismatch for " + gt[i].id);
    r.push_back(magnitude(recon[i].target.data.to(torch::kFloat64)));
    g.push_back(magnitude(gt[i].target.data.to(torch::kFloat64)));
    vols.push_back(gt[i].volume_id);
  }
  return evaluate_magnitudes(torch::cat(r), torch::cat(g), vols);
}

// ---------------------------------------------------------------------------
// Configuration

Stage stage_from_string(const std::string& s) {
  if (s == "vae") return Stage::Vae;
  if (s == "ldm") return Stage::Ldm;
  if (s == "backbone") return Stage::Backbone;
  throw ConfigError("unknown stage '" + s + "' (vae, ldm, backbone)");
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Vae: return "vae";
    case Stage::Ldm: return "ldm";
    case Stage::Backbone: return "backbone";
  }
  return "?";
}

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "cosine") return LrSchedule::Cosine;
  throw ConfigError("unknown lr schedule '" + s + "' (constant, cosine)");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1 && steps < 1) throw ConfigError("either epochs or steps must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (device != "cpu") throw ConfigError("device '" + device + "' is not supported by this build (cpu only)");
  if (image_size < 16 || image_size % 16 != 0) throw ConfigError("image_size must be a positive multiple of 16");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
}

std::int64_t TrainConfig::total_steps(std::int64_t n) const {
  if (steps > 0) return steps;
  return epochs * steps_per_epoch(n, batch_size);
}

double TrainConfig::lr_at(std::int64_t step, std::int64_t total) const {
  if (step < warmup_steps) return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const auto span = total - warmup_steps;
  if (lr_schedule == LrSchedule::Constant || span <= 0) return learning_rate;
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - warmup_steps) / span));
}

json TrainConfig::to_json() const {
  return {{"stage", mdpg::to_string(stage)},      {"learning_rate", learning_rate}, {"batch_size", batch_size},
          {"epochs", epochs},                      {"steps", steps},                 {"weight_decay", weight_decay},
          {"lr_schedule", mdpg::to_string(lr_schedule)}, {"seed", seed},            {"device", device},
          {"image_size", image_size},              {"log_every", log_every},
          {"warmup_steps", warmup_steps},          {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  return config_guard("train config", [&] {
    TrainConfig c;
    if (j.contains("stage")) c.stage = stage_from_string(j.at("stage"));
    read_opt(j, "learning_rate", c.learning_rate);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "steps", c.steps);
    read_opt(j, "weight_decay", c.weight_decay);
    if (j.contains("lr_schedule")) c.lr_schedule = lr_schedule_from_string(j.at("lr_schedule"));
    read_opt(j, "seed", c.seed);
    read_opt(j, "device", c.device);
    read_opt(j, "image_size", c.image_size);
    read_opt(j, "log_every", c.log_every);
    read_opt(j, "warmup_steps", c.warmup_steps);
    read_opt(j, "grad_clip", c.grad_clip);
    c.validate();
    return c;
  });
}

CartesianMask MaskSpec::for_sample(const std::string& id, std::int64_t width) const {
  return make_cartesian_mask(width, acceleration, center_fraction, mix_seed(seed, fnv1a64(id)));
}

std::string MaskSpec::tag() const { return "m" + hex64(fnv1a64(to_json().dump())).substr(0, 8); }

json MaskSpec::to_json() const {
  return {{"acceleration", acceleration}, {"center_fraction", center_fraction}, {"seed", seed}, {"noise_sigma", noise_sigma}};
}

MaskSpec MaskSpec::from_json(const json& j) {
  return config_guard("mask config", [&] {
    MaskSpec m;
    read_opt(j, "acceleration", m.acceleration);
    read_opt(j, "center_fraction", m.center_fraction);
    read_opt(j, "seed", m.seed);
    read_opt(j, "noise_sigma", m.noise_sigma);
    if (!(m.acceleration >= 1.0)) throw ConfigError("acceleration must be >= 1");
    if (!(m.center_fraction > 0.0 && m.center_fraction <= 1.0)) throw ConfigError("center_fraction must be in (0, 1]");
    if (!(m.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    return m;
  });
}

PreparedSet prepare_set(const std::vector<Sample>& samples, const MaskSpec& spec, GammaMode gamma_mode) {
  if (samples.empty()) throw InputError("prepare_set: no samples");
  PreparedSet out;
  out.mask_tag = spec.tag();
  std::vector<Tensor> xs, ys, xus, ms, gs;
  const auto H = samples.front().target.height(), W = samples.front().target.width();
  for (const auto& s : samples) {
    if (s.target.height() != H || s.target.width() != W) throw ShapeError("prepare_set: mixed image sizes");
    const auto mask = spec.for_sample(s.id, W);
    MeasurementModel model{mask, std::nullopt, spec.noise_sigma};
    const auto y = forward_model(s.target, model, mix_seed(spec.seed ^ kNoiseSalt, fnv1a64(s.id)));
    out.ids.push_back(s.id);
    out.volume_ids.push_back(s.volume_id);
    xs.push_back(s.target.data.to(torch::kFloat32));
    ys.push_back(y.data.to(torch::kFloat32));
    xus.push_back(zero_fill(y).data.to(torch::kFloat32));
    ms.push_back(mask.tensor(torch::kFloat32).view({1, 1, W}));
    gs.push_back(mask.gamma_tensor(gamma_mode, torch::kFloat32).view({1, 1, W}));
  }
  out.x = torch::stack(xs);
  out.y = torch::stack(ys);
  out.x_u = torch::stack(xus);
  out.mask = torch::stack(ms);
  out.gamma = torch::stack(gs);
  return out;
}

void TrainLog::write_csv(const fs::path& path) const {
  std::ostringstream os;
  os << std::setprecision(10);
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << '\n';
  }
  write_text_atomic(path, os.str());
}

void store_optimizer_state(torch::optim::AdamW& opt, const std::vector<Tensor>& params,
                           std::map<std::string, Tensor>& out, const std::string& prefix) {
  auto& state = opt.state();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = state.find(params[i].unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::AdamWParamState&>(*it->second);
    const auto key = prefix + std::to_string(i);
    out[key + ".step"] = torch::tensor(s.step(), torch::kInt64);
    out[key + ".exp_avg"] = s.exp_avg().clone();
    out[key + ".exp_avg_sq"] = s.exp_avg_sq().clone();
  }
}

void load_optimizer_state(torch::optim::AdamW& opt, const std::vector<Tensor>& params,
                          const std::map<std::string, Tensor>& in, const std::string& prefix) {
  auto& state = opt.state();
  state.clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto key = prefix + std::to_string(i);
    auto it = in.find(key + ".step");
    if (it == in.end()) continue;
    auto s = std::make_unique<torch::optim::AdamWParamState>();
    s->step(it->second.item<std::int64_t>());
    const auto& avg = in.at(key + ".exp_avg");
    const auto& avg_sq = in.at(key + ".exp_avg_sq");
    if (avg.sizes() != params[i].sizes()) throw CheckpointError("optimizer state does not match parameter " + key);
    s->exp_avg(avg.to(params[i].scalar_type()).clone());
    s->exp_avg_sq(avg_sq.to(params[i].scalar_type()).clone());
    state[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

// ---------------------------------------------------------------------------
// Stage I

std::pair<double, double> vae_reconstruction_quality(Vae& vae, const Tensor& x) {
  torch::NoGradGuard no_grad;
  const auto xd = x.to(vae->parameters().front().scalar_type());
  auto recon = batched_no_grad(xd, 16, [&](const Tensor& b) { return vae->decode(vae->encode(b)); });
  const auto rel = ((recon - xd).flatten(1).norm(2, 1) / xd.flatten(1).norm(2, 1)).mean().item<double>();
  double p = 0.0;
  const auto rm = magnitude(recon), gm = magnitude(xd);
  for (std::int64_t i = 0; i < x.size(0); ++i) p += psnr(rm[i], gm[i]);
  return {rel, p / static_cast<double>(x.size(0))};
}

double fit_latent_scale(Vae& vae, const Tensor& x) {
  auto mu = batched_no_grad(x.to(vae->parameters().front().scalar_type()), 16,
                            [&](const Tensor& b) { return vae->moments(b).first; });
  const double sd = mu.std().item<double>();
  if (!(sd > 0.0) || !std::isfinite(sd)) throw DivergenceError("VAE latents have zero or non-finite spread");
  vae->set_latent_scale(1.0 / sd);
  return 1.0 / sd;
}

VaeTrainResult train_vae(Vae& vae, const Tensor& train_x, const Tensor& val_x, const TrainConfig& cfg,
                         bool phase_augment, const std::function<void(const std::string&)>& log) {
  cfg.validate();
  const auto n = train_x.size(0);
  if (n == 0) throw InputError("train_vae: empty training set");
  require_latent_compatible(train_x);
  const auto dtype = vae->parameters().front().scalar_type();
  const auto data = train_x.to(dtype);
  const auto total = cfg.total_steps(n);
  const auto spe = steps_per_epoch(n, cfg.batch_size);

  vae->train();
  torch::optim::AdamW opt(vae->parameters(),
                          torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
  VaeTrainResult res;
  res.curve.columns = {"step", "loss", "recon", "lr"};
  for (std::int64_t step = 0; step < total; ++step) {
    auto gen = make_generator(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)));
    auto x = gather(data, epoch_batch(cfg.seed, step / spe, step % spe, n, cfg.batch_size));
    if (phase_augment) {
      auto th = torch::rand({x.size(0), 1, 1}, gen, x.options()) * (2.0 * std::numbers::pi);
      auto c = torch::cos(th), s = torch::sin(th);
      auto re = x.select(1, 0), im = x.select(1, 1);
      x = torch::stack({c * re - s * im, s * re + c * im}, 1);
    }
    const double lr = cfg.lr_at(step, total);
    set_lr(opt, lr);
    opt.zero_grad();
    auto loss = vae->loss(x, gen);
    const double value = loss.total.item<double>();
    if (!std::isfinite(value)) {
      throw DivergenceError("VAE loss became non-finite at step " + std::to_string(step) + " (lr " + std::to_string(lr) + ")");
    }
    loss.total.backward();
    clip_gradients(vae->parameters(), cfg.grad_clip);
    opt.step();
    if (step % cfg.log_every == 0 || step + 1 == total) {
      res.curve.rows.push_back({static_cast<double>(step), value, loss.recon.item<double>(), lr});
      if (log) log("vae step " + std::to_string(step) + " loss " + std::to_string(value));
    }
  }
  vae->eval();
  fit_latent_scale(vae, data);
  vae->mark_trained();
  if (val_x.defined() && val_x.size(0) > 0) {
    std::tie(res.val_rel_error, res.val_psnr) = vae_reconstruction_quality(vae, val_x);
  }
  return res;
}

LdmTrainer::LdmTrainer(LatentDiffusion& ldm, const PreparedSet& train, TrainConfig cfg) : ldm_(ldm), cfg_(cfg) {
  cfg_.validate();
  if (!ldm_.vae()->trained()) throw ConfigError("LDM training refused: the VAE has not been trained");
  if (train.size() == 0) throw InputError("LDM training: empty dataset");
  const auto dtype = ldm_.dtype();
  ldm_.vae()->eval();
  z0_ = batched_no_grad(train.x.to(dtype), 16, [&](const Tensor& b) { return ldm_.vae()->encode(b); });
  cond_ = batched_no_grad(train.x_u.to(dtype), 16, [&](const Tensor& b) { return ldm_.condition(b); });
  for (auto& p : ldm_.vae()->parameters()) p.set_requires_grad(false);
  params_ = ldm_.denoiser()->parameters();
  opt_ = std::make_unique<torch::optim::AdamW>(
      params_, torch::optim::AdamWOptions(cfg_.learning_rate).weight_decay(cfg_.weight_decay));
  total_ = cfg_.total_steps(train.size());
}

std::vector<std::int64_t> LdmTrainer::batch_indices(std::int64_t step) const {
  const auto n = z0_.size(0);
  const auto spe = steps_per_epoch(n, cfg_.batch_size);
  return epoch_batch(cfg_.seed, step / spe, step % spe, n, cfg_.batch_size);
}

Tensor LdmTrainer::batch_loss(std::int64_t step) {
  auto gen = make_generator(mix_seed(cfg_.seed, static_cast<std::uint64_t>(step)));
  const auto idx = batch_indices(step);
  const auto per_sample = ldm_.ldm_loss_latent(gather(z0_, idx), gather(cond_, idx), gen);
  return per_sample.mean() / static_cast<double>(z0_[0].numel());
}

double LdmTrainer::step() {
  const double lr = cfg_.lr_at(step_, total_);
  set_lr(*opt_, lr);
  opt_->zero_grad();
  auto loss = batch_loss(step_);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    throw DivergenceError("LDM loss became non-finite at step " + std::to_string(step_) + " (lr " + std::to_string(lr) + ")");
  }
  loss.backward();
  clip_gradients(params_, cfg_.grad_clip);
  opt_->step();
  ++step_;
  return value;
}

double LdmTrainer::peek_loss() {
  torch::NoGradGuard no_grad;
  return batch_loss(step_).item<double>();
}

TrainLog LdmTrainer::run(const std::function<void(const std::string&)>& log, std::int64_t checkpoint_every,
                         const std::function<void()>& on_checkpoint) {
  TrainLog curve;
  curve.columns = {"step", "loss", "running_loss"};
  double running = 0.0;
  bool first = true;
  while (step_ < total_) {
    const auto s = step_;
    const double v = step();
    running = first ? v : 0.98 * running + 0.02 * v;
    first = false;
    if (s % cfg_.log_every == 0 || step_ == total_) {
      curve.rows.push_back({static_cast<double>(s), v, running});
      if (log) log("ldm step " + std::to_string(s) + " loss " + std::to_string(v) + " running " + std::to_string(running));
    }
    if (checkpoint_every > 0 && on_checkpoint && step_ % checkpoint_every == 0 && step_ < total_) on_checkpoint();
  }
  ldm_.mark_denoiser_trained();
  return curve;
}

Checkpoint LdmTrainer::checkpoint() {
  auto ck = ldm_.to_checkpoint();
  store_optimizer_state(*opt_, params_, ck.tensors, "optim.");
  ck.meta["train_state"] = {{"step", step_}, {"total_steps", total_}, {"config", cfg_.to_json()}};
  return ck;
}

void LdmTrainer::restore(const Checkpoint& ck) {
  if (!ck.meta.contains("train_state")) throw CheckpointError("checkpoint carries no training state to resume");
  load_module_state(*ldm_.denoiser(), ck.tensors, "denoiser.");
  load_optimizer_state(*opt_, params_, ck.tensors, "optim.");
  step_ = ck.meta.at("train_state").at("step").get<std::int64_t>();
}

// ---------------------------------------------------------------------------
// Stage II

PriorSet compute_priors(LatentDiffusion& ldm, const PreparedSet& set, const fs::path& cache_dir,
                        std::int64_t batch_size, std::size_t* cache_hits) {
  PriorGenerator gen(ldm, cache_dir);
  std::vector<Tensor> zs, xs;
  for (std::int64_t i = 0; i < set.size(); i += batch_size) {
    const auto end = std::min(set.size(), i + batch_size);
    std::vector<std::string> keys;
    for (auto k = i; k < end; ++k) keys.push_back(set.ids[k] + "." + set.mask_tag);
    for (auto& p : gen.generate(set.x_u.slice(0, i, end), keys)) {
      zs.push_back(p.z0.to(torch::kFloat32));
      xs.push_back(p.xbar.to(torch::kFloat32));
    }
  }
  if (cache_hits) *cache_hits = gen.cache_hits();
  return {torch::stack(zs), torch::stack(xs)};
}

json Stage2Config::to_json() const {
  return {{"train", train.to_json()}, {"backbone", backbone.to_json()}, {"loss", loss.to_json()}, {"ablation", ablation.to_json()}};
}

BackboneTrainer::BackboneTrainer(Stage2Config cfg, const PreparedSet& train, PriorSet train_priors)
    : cfg_(std::move(cfg)), train_(train), priors_(std::move(train_priors)) {
  cfg_.train.validate();
  cfg_.loss.validate();
  loss_ = effective_loss_config(cfg_.loss, cfg_.ablation);
  if (train_.size() == 0) throw InputError("backbone training: empty dataset");
  if (cfg_.ablation.B_lga && !priors_.z0.defined()) throw ConfigError("LGA enabled but no latent priors were provided");
  if (cfg_.ablation.A_dfb && !priors_.xbar.defined()) throw ConfigError("DFB enabled but no synthesized images were provided");
  torch::manual_seed(cfg_.train.seed);
  net_ = Backbone(cfg_.backbone, cfg_.ablation);
  opt_ = std::make_unique<torch::optim::AdamW>(
      net_->trainable_parameters(),
      torch::optim::AdamWOptions(cfg_.train.learning_rate).weight_decay(cfg_.train.weight_decay));
}

std::vector<Tensor> BackboneTrainer::optimizer_parameters() const {
  std::vector<Tensor> out;
  for (const auto& g : opt_->param_groups()) out.insert(out.end(), g.params().begin(), g.params().end());
  return out;
}

LossTerms BackboneTrainer::batch_terms(const std::vector<std::int64_t>& idx) {
  const auto& a = cfg_.ablation;
  auto out = net_->forward(gather(train_.x_u, idx), a.B_lga ? gather(priors_.z0, idx) : Tensor(),
                           a.A_dfb ? gather(priors_.xbar, idx) : Tensor(), gather(train_.y, idx),
                           gather(train_.mask, idx));
  return combined_loss_terms(out.xhat, gather(train_.x, idx), gather(train_.gamma, idx), loss_);
}

double BackboneTrainer::step(const std::vector<std::int64_t>& idx) {
  const auto total = cfg_.train.total_steps(train_.size());
  const double lr = cfg_.train.lr_at(step_, total);
  set_lr(*opt_, lr);
  opt_->zero_grad();
  LossTerms terms;
  try {
    terms = batch_terms(idx);
  } catch (const InputError&) {
    // With finite batch data, a non-finite FFT input can only come from blown-up activations.
    bool data_finite = true;
    for (const Tensor& t : {train_.x_u, train_.y, priors_.z0, priors_.xbar}) {
      if (t.defined()) data_finite = data_finite && torch::isfinite(gather(t, idx)).all().template item<bool>();
    }
    if (!data_finite) throw;
    throw DivergenceError("backbone activations became non-finite at step " + std::to_string(step_) + " (lr " +
                          std::to_string(lr) + ")");
  }
  const double value = terms.total.item<double>();
  if (!std::isfinite(value)) {
    throw DivergenceError("backbone loss became non-finite at step " + std::to_string(step_) + " (lr " + std::to_string(lr) + ")");
  }
  terms.total.backward();
  clip_gradients(optimizer_parameters(), cfg_.train.grad_clip);
  opt_->step();
  net_->project_nu();
  ++step_;
  return value;
}

double BackboneTrainer::train_epoch() {
  const auto n = train_.size(), b = cfg_.train.batch_size;
  const auto spe = steps_per_epoch(n, b);
  const auto total = cfg_.train.total_steps(n);
  double sum = 0.0;
  std::int64_t count = 0;
  for (std::int64_t pos = 0; pos < spe && step_ < total; ++pos) {
    sum += step(epoch_batch(cfg_.train.seed, epoch_, pos, n, b));
    ++count;
  }
  ++epoch_;
  return count ? sum / static_cast<double>(count) : 0.0;
}

Tensor reconstruct_set(Backbone& net, const PreparedSet& set, const PriorSet& priors, std::int64_t batch_size) {
  torch::NoGradGuard no_grad;
  const auto& a = net->ablation();
  if (a.B_lga && !priors.z0.defined()) throw ConfigError("LGA enabled but no latent priors were provided");
  if (a.A_dfb && !priors.xbar.defined()) throw ConfigError("DFB enabled but no synthesized images were provided");
  std::vector<Tensor> parts;
  for (std::int64_t i = 0; i < set.size(); i += batch_size) {
    const auto end = std::min(set.size(), i + batch_size);
    auto sl = [&](const Tensor& t) { return t.slice(0, i, end); };
    parts.push_back(net->forward(sl(set.x_u), a.B_lga ? sl(priors.z0) : Tensor(), a.A_dfb ? sl(priors.xbar) : Tensor(),
                                 sl(set.y), sl(set.mask))
                        .xhat);
  }
  return torch::cat(parts);
}

Tensor BackboneTrainer::reconstruct(const PreparedSet& set, const PriorSet& priors, std::int64_t batch_size) {
  return reconstruct_set(net_, set, priors, batch_size);
}

double kspace_gradient_contribution(BackboneTrainer& trainer, const std::vector<std::int64_t>& idx) {
  const auto params = trainer.optimizer_parameters();
  auto grads_of = [&](bool image_only) {
    auto terms = trainer.batch_terms(idx);
    auto g = torch::autograd::grad({image_only ? terms.image : terms.total}, params, {}, false, false, true);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g[i].defined()) g[i] = torch::zeros_like(params[i]);
    }
    return g;
  };
  const auto full = grads_of(false), image = grads_of(true);
  double worst = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    worst = std::max(worst, (full[i] - image[i]).abs().max().item<double>());
  }
  return worst;
}

MetricsReport BackboneTrainer::validate(const PreparedSet& set, const PriorSet& priors) {
  auto recon = reconstruct(set, priors);
  return evaluate_magnitudes(magnitude(recon).squeeze(1), magnitude(set.x).squeeze(1), set.volume_ids);
}

TrainLog BackboneTrainer::run(const PreparedSet& val, const PriorSet& val_priors,
                              const std::function<void(const std::string&)>& log) {
  TrainLog curve;
  curve.columns = {"epoch", "train_loss", "val_psnr", "val_ssim", "val_nmse", "nu"};
  const auto total = cfg_.train.total_steps(train_.size());
  while (step_ < total) {
    const double loss = train_epoch();
    const auto rep = validate(val, val_priors);
    const double nu = net_->nu.item<double>();
    curve.rows.push_back({static_cast<double>(epoch_), loss, rep.psnr, rep.ssim, rep.nmse, nu});
    if (log) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(4) << "epoch " << epoch_ << " loss " << loss << " val psnr " << rep.psnr
         << " ssim " << rep.ssim << " nmse " << rep.nmse << " nu " << nu;
      log(os.str());
    }
  }
  return curve;
}

Checkpoint BackboneTrainer::checkpoint() {
  Checkpoint ck;
  store_module_state(*net_, ck.tensors, "backbone.");
  store_optimizer_state(*opt_, optimizer_parameters(), ck.tensors, "optim.");
  ck.meta = {{"kind", "backbone"},
             {"backbone", cfg_.backbone.to_json()},
             {"ablation", cfg_.ablation.to_json()},
             {"loss", cfg_.loss.to_json()},
             {"train", cfg_.train.to_json()},
             {"epoch", epoch_},
             {"step", step_},
             {"nu", net_->nu.item<double>()}};
  return ck;
}

void BackboneTrainer::restore(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "backbone") throw CheckpointError("not a backbone checkpoint");
  if (AblationConfig::from_json(ck.meta.at("ablation")) != cfg_.ablation) {
    throw CheckpointError("checkpoint ablation flags differ from the configured ones");
  }
  load_module_state(*net_, ck.tensors, "backbone.");
  load_optimizer_state(*opt_, optimizer_parameters(), ck.tensors, "optim.");
  epoch_ = ck.meta.at("epoch").get<std::int64_t>();
  step_ = ck.meta.at("step").get<std::int64_t>();
}

Backbone BackboneTrainer::backbone_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "backbone") throw CheckpointError("not a backbone checkpoint");
  try {
    Backbone net(BackboneConfig::from_json(ck.meta.at("backbone")), AblationConfig::from_json(ck.meta.at("ablation")));
    load_module_state(*net, ck.tensors, "backbone.");
    return net;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad backbone checkpoint metadata: ") + e.what());
  }
}

MetricsReport zero_fill_metrics(const PreparedSet& set) {
  return evaluate_magnitudes(magnitude(set.x_u).squeeze(1), magnitude(set.x).squeeze(1), set.volume_ids);
}

// ---------------------------------------------------------------------------
// Provenance

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a64(buf.data(), static_cast<std::size_t>(in.gcount()), h);
  }
  return hex64(h);
}

namespace {
std::string git_revision() {
  std::string out;
  if (std::FILE* p = ::popen("git rev-parse HEAD 2>/dev/null", "r")) {
    char buf[128];
    while (std::fgets(buf, sizeof buf, p)) out += buf;
    ::pclose(p);
  }
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}
}  // namespace

void write_run_manifest(const fs::path& dir, const json& config, std::uint64_t seed,
                        const std::map<std::string, fs::path>& files) {
  json f = json::object();
  for (const auto& [name, path] : files) {
    f[name] = {{"path", path.string()}, {"hash", fs::exists(path) ? file_hash(path) : std::string("missing")}};
  }
  json m = {{"config", config},
            {"config_hash", hex64(fnv1a64(config.dump()))},
            {"seed", seed},
            {"git_revision", git_revision()},
            {"torch_threads", at::get_num_threads()},
            {"files", f}};
  fs::create_directories(dir);
  write_text_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace mdpg
