#pragma once

// Adam, the step-halving schedule, data sources, validation, and the training
// loop with checkpointing, resume, and ablation runs.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "passr/checkpoint.hpp"
#include "passr/data.hpp"
#include "passr/image_io.hpp"
#include "passr/losses.hpp"
#include "passr/metrics.hpp"
#include "passr/passrnet.hpp"

namespace passr {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor<float>> m, v;  // one per parameter, in store order
  std::uint64_t step = 0;
};

inline AdamState adam_init(const ParamStore<float>& params) {
  AdamState s;
  for (const auto& [name, t] : params.entries()) {
    s.m.emplace_back(t.shape());
    s.v.emplace_back(t.shape());
  }
  return s;
}

// Bias-corrected Adam. Gradients are checked before anything is modified, so
// a rejected step leaves parameters and moments untouched.
inline void adam_step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads, AdamState& state,
                      double lr, const AdamConfig& cfg = {}) {
  auto& entries = params.entries();
  if (grads.size() != entries.size() || state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(entries.size()) + " parameters");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Shape& s = entries[i].second.shape();
    if (grads[i].shape() != s || state.m[i].shape() != s || state.v[i].shape() != s) {
      throw ShapeError("adam_step: shape mismatch for " + entries[i].first);
    }
    for (float g : grads[i].data()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient for " + entries[i].first);
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto p = entries[i].second.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    auto g = grads[i].data();
    for (std::size_t n = 0; n < p.size(); ++n) {
      const double gn = g[n];
      const double mn = cfg.beta1 * m[n] + (1.0 - cfg.beta1) * gn;
      const double vn = cfg.beta2 * v[n] + (1.0 - cfg.beta2) * gn * gn;
      m[n] = static_cast<float>(mn);
      v[n] = static_cast<float>(vn);
      p[n] = static_cast<float>(p[n] - lr * (mn / c1) / (std::sqrt(vn / c2) + cfg.eps));
    }
  }
}

// Moments and step counter in the checkpoint container.
inline ParamStore<float> adam_to_store(const ParamStore<float>& params, const AdamState& state) {
  if (state.step >= (1ULL << 24)) throw CheckpointError("step counter too large for the state file");
  ParamStore<float> out;
  out.add("adam.step", Tensor<float>::scalar(static_cast<float>(state.step)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.add("adam.m." + params.entries()[i].first, state.m[i]);
    out.add("adam.v." + params.entries()[i].first, state.v[i]);
  }
  return out;
}

inline AdamState adam_from_store(const ParamStore<float>& params, const ParamStore<float>& store) {
  AdamState s;
  s.step = static_cast<std::uint64_t>(store.at("adam.step").item());
  for (const auto& [name, t] : params.entries()) {
    s.m.push_back(store.at("adam.m." + name));
    s.v.push_back(store.at("adam.v." + name));
    if (s.m.back().shape() != t.shape() || s.v.back().shape() != t.shape()) {
      throw CheckpointError("optimizer state does not match parameter " + name);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Configuration

enum class InputMode { kStereo, kReplicated };  // replicated: the left view is fed twice

struct TrainConfig {
  NetworkConfig net = NetworkConfig::reference(4);
  std::uint64_t seed = 1;
  double lr = 2e-4;
  std::size_t halve_every = 30;  // epochs
  std::size_t epochs = 80;
  std::size_t steps_per_epoch = 100;
  std::size_t steps = 0;  // total optimizer steps; 0 means epochs * steps_per_epoch
  std::size_t batch = 32;
  LossWeights loss{};
  PatchSpec patch{};
  InputMode input = InputMode::kStereo;
  std::filesystem::path manifest;  // empty: synthetic data
  double max_disparity = 8.0;      // synthetic data, LR pixels
  SynthOptions synth{};
  std::size_t val_count = 8;
  std::uint64_t val_seed = 0x5EED0F7A11DA7EULL;  // disjoint from the training stream
  std::size_t val_height = 30, val_width = 90;

  // Reduced settings for single-core CPU runs.
  static TrainConfig desk() {
    TrainConfig c;
    c.net = NetworkConfig::desk(32, 2);
    c.lr = 1e-3;
    c.halve_every = 30;
    c.epochs = 80;
    c.steps_per_epoch = 50;
    c.steps = 300;
    c.batch = 4;
    c.patch = PatchSpec{16, 48, 8};
    c.max_disparity = 6.0;
    c.val_height = 24;
    c.val_width = 64;
    return c;
  }

  std::size_t total_steps() const { return steps ? steps : epochs * steps_per_epoch; }

  void validate() const {
    net.validate();
    if (!(lr > 0.0) || halve_every == 0 || epochs == 0 || steps_per_epoch == 0 || batch == 0) {
      throw std::invalid_argument("lr, halve_every, epochs, steps_per_epoch and batch must be positive");
    }
    if (total_steps() > epochs * steps_per_epoch) {
      throw std::invalid_argument("steps exceed epochs * steps_per_epoch");
    }
    if (!(loss.lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
    if (patch.height == 0 || patch.width < 2 || patch.stride == 0) throw std::invalid_argument("bad patch spec");
    if (!(max_disparity >= 0.0) || max_disparity + 2 >= static_cast<double>(patch.width)) {
      throw std::invalid_argument("max_disparity must be nonnegative and below the patch width");
    }
    if (val_count == 0 || val_height == 0 || val_width <= max_disparity + 2) {
      throw std::invalid_argument("bad validation set size");
    }
  }

  // key=value pairs, one per line; also the config file format.
  std::map<std::string, std::string> to_map() const {
    auto num = [](double v) {
      std::ostringstream os;
      os << std::setprecision(17) << v;
      return os.str();
    };
    std::map<std::string, std::string> m;
    std::istringstream net_kv(net.to_string());
    for (std::string kv; net_kv >> kv;) {
      const auto eq = kv.find('=');
      m[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    m["seed"] = std::to_string(seed);
    m["lr"] = num(lr);
    m["halve_every"] = std::to_string(halve_every);
    m["epochs"] = std::to_string(epochs);
    m["steps_per_epoch"] = std::to_string(steps_per_epoch);
    m["steps"] = std::to_string(steps);
    m["batch"] = std::to_string(batch);
    m["lambda"] = num(loss.lambda);
    m["photometric"] = std::to_string(loss.photometric);
    m["smooth"] = std::to_string(loss.smooth);
    m["cycle"] = std::to_string(loss.cycle);
    m["patch_height"] = std::to_string(patch.height);
    m["patch_width"] = std::to_string(patch.width);
    m["patch_stride"] = std::to_string(patch.stride);
    m["input"] = input == InputMode::kStereo ? "stereo" : "replicated";
    m["manifest"] = manifest.string();
    m["max_disparity"] = num(max_disparity);
    m["texture_sigma"] = num(synth.texture_sigma);
    m["texture_std"] = num(synth.texture_std);
    m["val_count"] = std::to_string(val_count);
    m["val_seed"] = std::to_string(val_seed);
    m["val_height"] = std::to_string(val_height);
    m["val_width"] = std::to_string(val_width);
    return m;
  }

  std::string to_string() const {
    std::string s;
    for (const auto& [k, v] : to_map()) s += k + "=" + v + "\n";
    return s;
  }

  void set(const std::string& key, const std::string& value) {
    auto as_size = [&] {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(value, &pos);
      if (pos != value.size() || value.find('-') != std::string::npos) throw std::invalid_argument(value);
      return static_cast<std::size_t>(v);
    };
    auto as_double = [&] {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return v;
    };
    auto as_bool = [&] {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      throw std::invalid_argument(value);
    };
    try {
      if (key == "channels") net.channels = as_size();
      else if (key == "scale") net.scale = as_size();
      else if (key == "dilations") {
        net.dilations.clear();
        std::istringstream in(value);
        for (std::string d; std::getline(in, d, ',');) {
          std::size_t pos = 0;
          net.dilations.push_back(std::stoull(d, &pos));
          if (pos != d.size()) throw std::invalid_argument(value);
        }
      } else if (key == "aspp_groups") net.aspp_groups = as_size();
      else if (key == "aspp_repeats") net.aspp_repeats = as_size();
      else if (key == "post_blocks") net.post_blocks = as_size();
      else if (key == "single_input") net.single_input = as_bool();
      else if (key == "no_pam") net.no_pam = as_bool();
      else if (key == "no_transition") net.no_transition = as_bool();
      else if (key == "no_atrous") net.no_atrous = as_bool();
      else if (key == "no_aspp_residual") net.no_aspp_residual = as_bool();
      else if (key == "seed") seed = as_size();
      else if (key == "lr") lr = as_double();
      else if (key == "halve_every") halve_every = as_size();
      else if (key == "epochs") epochs = as_size();
      else if (key == "steps_per_epoch") steps_per_epoch = as_size();
      else if (key == "steps") steps = as_size();
      else if (key == "batch") batch = as_size();
      else if (key == "lambda") loss.lambda = as_double();
      else if (key == "photometric") loss.photometric = as_bool();
      else if (key == "smooth") loss.smooth = as_bool();
      else if (key == "cycle") loss.cycle = as_bool();
      else if (key == "patch_height") patch.height = as_size();
      else if (key == "patch_width") patch.width = as_size();
      else if (key == "patch_stride") patch.stride = as_size();
      else if (key == "input") {
        if (value == "stereo") input = InputMode::kStereo;
        else if (value == "replicated") input = InputMode::kReplicated;
        else throw std::invalid_argument(value);
      } else if (key == "manifest") manifest = value;
      else if (key == "max_disparity") max_disparity = as_double();
      else if (key == "texture_sigma") synth.texture_sigma = as_double();
      else if (key == "texture_std") synth.texture_std = as_double();
      else if (key == "val_count") val_count = as_size();
      else if (key == "val_seed") val_seed = as_size();
      else if (key == "val_height") val_height = as_size();
      else if (key == "val_width") val_width = as_size();
      else throw std::out_of_range("unknown config key: " + key);
    } catch (const std::out_of_range& e) {
      throw std::invalid_argument(std::string(e.what()).rfind("unknown", 0) == 0
                                      ? e.what()
                                      : "value out of range for " + key + ": " + value);
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("bad value for " + key + ": " + value);
    }
  }

  // Applies a key=value file. Blank lines and '#' comments are skipped.
  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::string line;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto e = line.find_last_not_of(" \t\r");
      line = line.substr(b, e - b + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("config line without '=': " + line);
      set(line.substr(0, eq), line.substr(eq + 1));
    }
  }
};

// lr = initial * 0.5^floor(epoch / halve_every); epochs past the last one do not exist.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " is past the last epoch (" +
                            std::to_string(cfg.epochs - 1) + ")");
  }
  return cfg.lr * std::ldexp(1.0, -static_cast<int>(epoch / cfg.halve_every));
}

// FNV-1a of the canonical config text; names run directories.
inline std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : cfg.to_string()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Data sources

// Random profile: constant (half-pixel steps at LR), occluding block
// (integer), or smooth gradient, all within [0, dmax].
inline DisparityProfile random_profile(Rng& rng, std::size_t width, double dmax) {
  const auto half_steps = static_cast<std::uint64_t>(std::floor(2.0 * dmax));
  switch (rng.below(3)) {
    case 0:
      return DisparityProfile::constant(0.5 * static_cast<double>(rng.below(half_steps + 1)));
    case 1: {
      const auto top = static_cast<std::uint64_t>(std::floor(dmax));
      if (top < 1) return DisparityProfile::constant(0.0);
      const auto bg = rng.below(top);
      const auto fg = bg + 1 + rng.below(top - bg);
      const std::size_t len = std::max<std::size_t>(2, width / 8 + rng.below(width / 4 + 1));
      const std::size_t begin = fg + rng.below(width - len - fg + 1);
      return DisparityProfile::block(static_cast<double>(bg), static_cast<double>(fg), begin, begin + len);
    }
    default:
      return DisparityProfile::gradient(rng.uniform(0.0, dmax), rng.uniform(0.0, dmax));
  }
}

using Sampler = std::function<StereoSample<float>(std::uint64_t index)>;

// Training sample n: one random patch of a fresh synthetic pair, augmented.
// Depends only on (seed, n), so any prefetch order gives the same stream.
inline Sampler synthetic_sampler(const TrainConfig& cfg) {
  return [cfg](std::uint64_t n) {
    const std::uint64_t seed = mix_seed(cfg.seed, n);
    Rng rng(seed);
    const std::size_t h = cfg.patch.height + cfg.patch.stride, w = cfg.patch.width + cfg.patch.stride;
    const DisparityProfile profile = random_profile(rng, w, cfg.max_disparity);
    const auto pair = synth_stereo<float>(mix_seed(seed, 1), h, w, profile, cfg.net.scale, cfg.synth);
    auto patches = extract_patches(pair, cfg.patch);
    return augment(patches[rng.below(patches.size())], mix_seed(seed, 2));
  };
}

// HR pair from disk, cropped to a multiple of the scale and degraded.
inline StereoSample<float> load_pair(const ManifestEntry& e, std::size_t s) {
  auto left = load_image(e.left), right = load_image(e.right);
  if (left.shape() != right.shape()) throw IoError("view sizes differ: " + e.left.string());
  const std::size_t h = left.extent(0) / s * s, w = left.extent(1) / s * s;
  if (h == 0 || w == 0) throw IoError("image smaller than the scale: " + e.left.string());
  StereoSample<float> out;
  out.scale = s;
  out.left_hr = crop(left, 0, 0, h, w);
  out.right_hr = crop(right, 0, 0, h, w);
  out.left_lr = degrade(out.left_hr, s);
  out.right_lr = degrade(out.right_hr, s);
  if (!e.disparity.empty()) {
    // Grids hold left-view disparity at LR scale.
    DisparityMap<float> d{load_grid(e.disparity), std::nullopt};
    if (d.values.shape() != Shape{h / s, w / s}) throw IoError("disparity grid size mismatch: " + e.disparity.string());
    out.left_disparity = std::move(d);
  }
  return out;
}

inline Sampler manifest_sampler(const TrainConfig& cfg) {
  auto entries = load_manifest(cfg.manifest);
  if (entries.empty()) throw std::invalid_argument("empty dataset: " + cfg.manifest.string());
  auto patches = std::make_shared<std::vector<StereoSample<float>>>();
  for (const auto& e : entries) {
    auto p = extract_patches(load_pair(e, cfg.net.scale), cfg.patch);
    for (auto& s : p) {
      s.left_disparity.reset();  // correspondence terms come from the network, not the grid
      patches->push_back(std::move(s));
    }
  }
  return [cfg, patches](std::uint64_t n) {
    const std::uint64_t seed = mix_seed(cfg.seed, n);
    Rng rng(seed);
    return augment((*patches)[rng.below(patches->size())], mix_seed(seed, 2));
  };
}

inline std::vector<StereoSample<float>> validation_set(const TrainConfig& cfg) {
  std::vector<StereoSample<float>> out;
  for (std::size_t i = 0; i < cfg.val_count; ++i) {
    const std::uint64_t seed = mix_seed(cfg.val_seed, i);
    Rng rng(seed);
    const auto profile = random_profile(rng, cfg.val_width, cfg.max_disparity);
    out.push_back(synth_stereo<float>(mix_seed(seed, 1), cfg.val_height, cfg.val_width, profile, cfg.net.scale, cfg.synth));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

inline Tensor<float> super_resolve(const ParamStore<float>& params, const NetworkConfig& net,
                                   const Tensor<float>& left_lr, const Tensor<float>& right_lr) {
  Tape<float> tape;
  Binder<float> b(tape, params, false);
  auto out = forward(tape.constant(left_lr), tape.constant(right_lr), b, net);
  return out.sr_left.value();
}

struct EvalSummary {
  double psnr = 0, ssim = 0;                  // network output vs HR left
  double bicubic_psnr = 0, bicubic_ssim = 0;  // bicubic upsampling of LR left vs HR left
  // Mean attention weight on the ground-truth correspondence over rows that
  // have one, averaged over both directions; NaN without attention or GT.
  double attention_mass = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> per_image_psnr, per_image_ssim;
};

inline double gt_attention_mass(const Tensor<float>& m, const Tensor<float>& gt) {
  const std::size_t w = m.extent(2), rows = m.size() / w;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double gsum = 0.0, dot = 0.0;
    for (std::size_t k = 0; k < w; ++k) {
      gsum += gt[r * w + k];
      dot += static_cast<double>(m[r * w + k]) * gt[r * w + k];
    }
    if (gsum > 0.0) total += dot, ++count;
  }
  return count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

inline EvalSummary evaluate(const ParamStore<float>& params, const NetworkConfig& net,
                            const std::vector<StereoSample<float>>& samples, InputMode input,
                            const EvalConfig& metric) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  EvalSummary r;
  double mass = 0.0;
  std::size_t mass_n = 0;
  for (const auto& s : samples) {
    Tape<float> tape;
    Binder<float> b(tape, params, false);
    Var<float> left = tape.constant(s.left_lr);
    Var<float> right = input == InputMode::kStereo ? tape.constant(s.right_lr) : left;
    auto out = forward(left, right, b, net);
    const Tensor<float>& sr = out.sr_left.value();
    const double p = psnr(sr, s.left_hr, metric), q = ssim(sr, s.left_hr, metric);
    r.per_image_psnr.push_back(p);
    r.per_image_ssim.push_back(q);
    r.psnr += p;
    r.ssim += q;
    Tensor<float> bic = bicubic_upsample(s.left_lr, s.scale);
    for (auto& v : bic.data()) v = std::clamp(v, 0.0f, 1.0f);
    r.bicubic_psnr += psnr(bic, s.left_hr, metric);
    r.bicubic_ssim += ssim(bic, s.left_hr, metric);
    if (out.right_to_left && input == InputMode::kStereo && s.left_disparity && s.right_disparity) {
      const double a = gt_attention_mass(out.right_to_left->values.value(),
                                         gt_attention_from_disparity(*s.left_disparity, Direction::kRightToLeft));
      const double c = gt_attention_mass(out.left_to_right->values.value(),
                                         gt_attention_from_disparity(*s.right_disparity, Direction::kLeftToRight));
      for (double v : {a, c}) {
        if (!std::isnan(v)) mass += v, ++mass_n;
      }
    }
  }
  const auto n = static_cast<double>(samples.size());
  r.psnr /= n;
  r.ssim /= n;
  r.bicubic_psnr /= n;
  r.bicubic_ssim /= n;
  if (mass_n) r.attention_mass = mass / static_cast<double>(mass_n);
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  std::size_t epoch = 0, step = 0;  // step = optimizer steps completed
  EvalSummary val;
};

struct TrainResult {
  ParamStore<float> params;  // final
  std::vector<LossReport> steps;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_psnr = -std::numeric_limits<double>::infinity();
};

struct TrainIo {
  std::ostream* log = nullptr;     // per-step and per-epoch lines
  std::filesystem::path run_dir;   // empty: no files written
  bool resume = false;             // continue from run_dir/last.* when present
};

namespace detail {

inline std::string format_report(std::size_t step, std::size_t epoch, double lr, const LossReport& r) {
  std::ostringstream os;
  os << std::setprecision(9) << "step=" << step << " epoch=" << epoch << " lr=" << lr << " sr=" << r.sr
     << " photometric=" << r.photometric << " smooth=" << r.smooth << " cycle=" << r.cycle
     << " total=" << r.total << " no_valid_pixels=" << r.no_valid_pixels;
  return os.str();
}

// One sample's loss graph; gradients are added into `grads` scaled by `weight`.
inline LossReport accumulate_sample(const ParamStore<float>& params, const TrainConfig& cfg,
                                    const StereoSample<float>& s, std::vector<Tensor<float>>& grads,
                                    float weight) {
  Tape<float> tape;
  Binder<float> b(tape, params, true);
  Var<float> left = tape.constant(s.left_lr);
  Var<float> right = cfg.input == InputMode::kStereo ? tape.constant(s.right_lr) : left;
  auto out = forward(left, right, b, cfg.net);
  LossTerms<float> terms{sr_loss(out.sr_left, tape.constant(s.left_hr)), std::nullopt, std::nullopt, std::nullopt};
  const bool aux = cfg.net.uses_pam() && cfg.loss.lambda > 0.0;
  if (aux && cfg.loss.photometric) {
    terms.photometric = photometric_loss(left, right, *out.right_to_left, *out.left_to_right, *out.valid_left,
                                         *out.valid_right);
  }
  if (aux && cfg.loss.smooth) terms.smooth = smoothness_loss(*out.left_to_right, *out.right_to_left);
  if (aux && cfg.loss.cycle) {
    terms.cycle = cycle_loss(*out.left_to_right, *out.right_to_left, *out.valid_left, *out.valid_right);
  }
  auto [total, report] = total_loss(terms, cfg.loss);
  tape.backward(total);
  std::size_t i = 0;
  for (const auto& [name, t] : params.entries()) {
    const auto it = b.bound().find(name);
    if (it != b.bound().end()) {
      const Tensor<float> g = tape.grad(it->second);
      auto dst = grads[i].data();
      auto src = g.data();
      for (std::size_t n = 0; n < dst.size(); ++n) dst[n] += weight * src[n];
    }
    ++i;
  }
  return report;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f << text;
    if (!f) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// Runs the full loop. Files under run_dir:
//   config.txt        every setting, key=value
//   train.log         the log stream's lines (when run_dir is set)
//   last.bin          parameters after the latest epoch
//   last.adam         optimizer moments and step for resume
//   best.bin          parameters with the best validation PSNR (ties: earlier epoch)
//   epochs.txt        one validation line per finished epoch
inline TrainResult train(const TrainConfig& cfg, const TrainIo& io = {}, Sampler sampler = {}) {
  cfg.validate();
  if (!sampler) sampler = cfg.manifest.empty() ? synthetic_sampler(cfg) : manifest_sampler(cfg);
  const auto val = validation_set(cfg);
  const EvalConfig metric = eval_config_for_scale(cfg.net.scale);
  namespace fs = std::filesystem;

  std::ofstream file_log;
  std::string epochs_text;
  TrainResult result;
  result.params = build<float>(cfg.net, mix_seed(cfg.seed, 0xC0FFEE));
  AdamState adam = adam_init(result.params);

  const bool files = !io.run_dir.empty();
  if (files) {
    fs::create_directories(io.run_dir);
    const bool resuming = io.resume && fs::exists(io.run_dir / "last.bin") && fs::exists(io.run_dir / "last.adam");
    if (resuming) {
      // Resume is allowed to extend `steps`/`epochs`; the rest must match.
      ParamStore<float> p = load_checkpoint((io.run_dir / "last.bin").string());
      if (p.size() != result.params.size()) throw CheckpointError("resume: parameter set differs from config");
      result.params = std::move(p);
      adam = adam_from_store(result.params, load_checkpoint((io.run_dir / "last.adam").string()));
      std::ifstream prev(io.run_dir / "epochs.txt");
      std::string line;
      while (std::getline(prev, line)) epochs_text += line + "\n";
      std::istringstream ep(epochs_text);
      while (std::getline(ep, line)) {
        EpochRecord rec;
        std::istringstream fields(line);
        for (std::string kv; fields >> kv;) {
          const auto eq = kv.find('=');
          const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
          if (k == "epoch") rec.epoch = std::stoull(v);
          else if (k == "step") rec.step = std::stoull(v);
          else if (k == "val_psnr") rec.val.psnr = std::stod(v);
          else if (k == "val_ssim") rec.val.ssim = std::stod(v);
        }
        if (rec.val.psnr > result.best_psnr) result.best_psnr = rec.val.psnr, result.best_epoch = rec.epoch;
        result.epochs.push_back(rec);
      }
    }
    detail::write_text(io.run_dir / "config.txt", cfg.to_string());
    file_log.open(io.run_dir / "train.log", resuming ? std::ios::app : std::ios::trunc);
  }
  auto emit = [&](const std::string& line) {
    if (io.log) *io.log << line << '\n';
    if (file_log) file_log << line << '\n';
  };

  if (adam.step == 0) {
    const auto defaults = TrainConfig{}.to_map();
    for (const auto& [k, v] : cfg.to_map()) {
      if (defaults.at(k) != v) emit("override " + k + "=" + v);
    }
    emit("params=" + std::to_string(param_count(result.params)) + " config_hash=" + config_hash(cfg));
  } else {
    emit("resume step=" + std::to_string(adam.step));
  }

  const std::size_t total = cfg.total_steps();
  std::vector<Tensor<float>> grads;
  for (const auto& [name, t] : result.params.entries()) grads.emplace_back(t.shape());
  const float weight = 1.0f / static_cast<float>(cfg.batch);

  for (std::size_t step = adam.step; step < total; ++step) {
    const std::size_t epoch = step / cfg.steps_per_epoch;
    const double lr = lr_schedule(epoch, cfg);
    for (auto& g : grads) g.fill(0.0f);
    LossReport mean_report;
    try {
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const auto sample = sampler(static_cast<std::uint64_t>(step) * cfg.batch + b);
        const LossReport r = detail::accumulate_sample(result.params, cfg, sample, grads, weight);
        mean_report.sr += r.sr * weight;
        mean_report.photometric += r.photometric * weight;
        mean_report.smooth += r.smooth * weight;
        mean_report.cycle += r.cycle * weight;
        mean_report.total += r.total * weight;
        mean_report.no_valid_pixels = mean_report.no_valid_pixels || r.no_valid_pixels;
      }
      if (!std::isfinite(mean_report.total)) throw NumericError("non-finite loss");
      adam_step(result.params, grads, adam, lr);
    } catch (const NumericError& e) {
      emit("abort step=" + std::to_string(step) + " reason=\"" + e.what() + "\"");
      throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + e.what() +
                            (files ? " (last good checkpoint: " + (io.run_dir / "last.bin").string() + ")" : ""));
    }
    result.steps.push_back(mean_report);
    emit(detail::format_report(step, epoch, lr, mean_report));

    const bool epoch_end = (step + 1) % cfg.steps_per_epoch == 0 || step + 1 == total;
    if (!epoch_end) continue;
    EpochRecord rec{epoch, step + 1, evaluate(result.params, cfg.net, val, cfg.input, metric)};
    std::ostringstream line;
    line << std::setprecision(9) << "epoch=" << epoch << " step=" << step + 1 << " val_psnr=" << rec.val.psnr
         << " val_ssim=" << rec.val.ssim << " bicubic_psnr=" << rec.val.bicubic_psnr
         << " bicubic_ssim=" << rec.val.bicubic_ssim << " attention_mass=" << rec.val.attention_mass;
    emit(line.str());
    const bool best = rec.val.psnr > result.best_psnr;
    if (best) result.best_psnr = rec.val.psnr, result.best_epoch = epoch;
    result.epochs.push_back(rec);
    if (files) {
      if (best) save_checkpoint((io.run_dir / "best.bin").string(), result.params);
      save_checkpoint((io.run_dir / "last.bin").string(), result.params);
      save_checkpoint((io.run_dir / "last.adam").string(), adam_to_store(result.params, adam));
      epochs_text += line.str() + "\n";
      detail::write_text(io.run_dir / "epochs.txt", epochs_text);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string name;
  TrainConfig cfg;
  std::size_t params = 0;
  EvalSummary val;
  double seconds = 0;
};

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"single_input", "replicated_inputs", "no_pam",  "no_transition",
                                             "no_atrous",    "no_aspp_residual",  "loss-subsets"};
  return axes;
}

// Variants compared on one axis; the first row is the unmodified base.
inline std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const std::string& axis,
                                                                          const TrainConfig& base) {
  std::vector<std::pair<std::string, TrainConfig>> v;
  if (axis == "loss-subsets") {
    for (const auto& w : loss_ablation_rows(base.loss.lambda)) {
      TrainConfig c = base;
      c.loss = w;
      v.emplace_back(describe(w), c);
    }
    return v;
  }
  v.emplace_back("full", base);
  TrainConfig c = base;
  if (axis == "single_input") c.net.single_input = true;
  else if (axis == "replicated_inputs") c.input = InputMode::kReplicated;
  else if (axis == "no_pam") c.net.no_pam = true;
  else if (axis == "no_transition") c.net.no_transition = true;
  else if (axis == "no_atrous") c.net.no_atrous = true;
  else if (axis == "no_aspp_residual") c.net.no_aspp_residual = true;
  else throw std::invalid_argument("unknown ablation axis: " + axis);
  v.emplace_back(axis, c);
  return v;
}

inline std::vector<AblationRow> ablate(const std::string& axis, const TrainConfig& base, std::ostream* log = nullptr,
                                       const std::filesystem::path& run_dir = {}) {
  std::vector<AblationRow> rows;
  const EvalConfig metric = eval_config_for_scale(base.net.scale);
  for (auto& [name, cfg] : ablation_variants(axis, base)) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainIo io{log, run_dir.empty() ? run_dir : run_dir / name, false};
    TrainResult r = train(cfg, io);
    AblationRow row{name, cfg, param_count(r.params), evaluate(r.params, cfg.net, validation_set(cfg), cfg.input, metric), 0};
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

// Table-shaped text: variant, inputs, loss terms, PSNR, SSIM, attention mass,
// parameter count, wall time.
inline std::string format_ablation(const std::string& axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "# ablation axis=" << axis << "\n";
  os << std::left << std::setw(28) << "variant" << std::setw(12) << "input" << std::setw(30) << "losses"
     << std::right << std::setw(9) << "psnr" << std::setw(8) << "ssim" << std::setw(10) << "att_mass"
     << std::setw(10) << "params" << std::setw(10) << "time_s" << "\n";
  for (const auto& r : rows) {
    const std::string input = r.cfg.net.single_input                   ? "left"
                              : r.cfg.input == InputMode::kReplicated ? "left-left"
                                                                      : "left-right";
    std::string losses = "sr";
    if (r.cfg.net.uses_pam() && r.cfg.loss.lambda > 0) losses = describe(r.cfg.loss);
    os << std::left << std::setw(28) << r.name << std::setw(12) << input << std::setw(30) << losses << std::right
       << std::fixed << std::setprecision(3) << std::setw(9) << r.val.psnr << std::setw(8) << r.val.ssim
       << std::setw(10) << r.val.attention_mass << std::setw(10) << r.params << std::setprecision(1)
       << std::setw(10) << r.seconds << "\n";
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

}  // namespace passr
