// Command-line front end: train, eval, sr, inspect, ablate, synth.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "passr/checkpoint.hpp"
#include "passr/image_io.hpp"
#include "passr/train.hpp"

namespace fs = std::filesystem;
using namespace passr;

namespace {

// Flags shared by the commands that build a TrainConfig. Unset optionals keep
// the preset / config-file value.
struct ConfigFlags {
  std::string preset = "desk";
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::size_t> scale, channels, steps, batch;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, lambda;
  std::string manifest;
  bool single_input = false, no_pam = false, no_transition = false, no_atrous = false, no_aspp_residual = false;
  bool replicated = false;

  void attach(CLI::App& app) {
    app.add_option("--preset", preset, "Base settings: desk (CPU-sized) or reference (full published setup)")
        ->check(CLI::IsMember({"desk", "reference"}));
    app.add_option("--config", config_file, "key=value config file applied over the preset")
        ->check(CLI::ExistingFile);
    app.add_option("--set", sets, "Extra key=value override (repeatable)");
    app.add_option("--scale", scale, "Upscaling factor")->check(CLI::IsMember({2, 4}));
    app.add_option("--channels", channels, "Feature channels");
    app.add_option("--seed", seed, "Random seed");
    app.add_option("--steps", steps, "Total optimizer steps");
    app.add_option("--batch", batch, "Batch size");
    app.add_option("--lr", lr, "Initial learning rate");
    app.add_option("--lambda", lambda, "Weight of the correspondence losses");
    app.add_option("--manifest", manifest, "Training manifest (default: synthetic data)");
    app.add_flag("--single-input", single_input, "Left view only, no attention module");
    app.add_flag("--no-pam", no_pam, "Stack both views' features instead of attention");
    app.add_flag("--no-transition", no_transition, "Attention module without its transition block");
    app.add_flag("--no-atrous", no_atrous, "All ASPP branches at dilation 1");
    app.add_flag("--no-aspp-residual", no_aspp_residual, "Cascade ASPP groups without skips");
    app.add_flag("--replicated", replicated, "Feed the left view to both inputs");
  }

  TrainConfig build() const {
    TrainConfig c = preset == "reference" ? TrainConfig{} : TrainConfig::desk();
    if (!config_file.empty()) c.load(config_file);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + kv);
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (scale) c.net.scale = *scale;
    if (channels) c.net.channels = *channels;
    if (seed) c.seed = *seed;
    if (steps) c.steps = *steps;
    if (batch) c.batch = *batch;
    if (lr) c.lr = *lr;
    if (lambda) c.loss.lambda = *lambda;
    if (!manifest.empty()) c.manifest = manifest;
    if (single_input) c.net.single_input = true;
    if (no_pam) c.net.no_pam = true;
    if (no_transition) c.net.no_transition = true;
    if (no_atrous) c.net.no_atrous = true;
    if (no_aspp_residual) c.net.no_aspp_residual = true;
    if (replicated) c.input = InputMode::kReplicated;
    // Extending the step budget past the preset's epochs is allowed.
    if (c.total_steps() > c.epochs * c.steps_per_epoch) {
      c.epochs = (c.total_steps() + c.steps_per_epoch - 1) / c.steps_per_epoch;
    }
    c.validate();
    return c;
  }
};

// <out>/<tag>-<UTC timestamp>, with a numeric suffix if taken.
fs::path make_run_dir(const fs::path& out, const std::string& tag) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  std::ostringstream name;
  name << tag << '-' << std::put_time(&utc, "%Y%m%dT%H%M%SZ");
  fs::path dir = out / name.str();
  for (int n = 1; fs::exists(dir); ++n) dir = out / (name.str() + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

// Network settings for a checkpoint: config.txt beside it when present,
// otherwise the defaults, with every shape-determined field read from the
// parameters themselves.
NetworkConfig network_for(const fs::path& ckpt, const ParamStore<float>& params) {
  TrainConfig c;
  const fs::path side = ckpt.parent_path() / "config.txt";
  if (fs::exists(side)) c.load(side);
  return infer_config(params, c.net);
}

void require_scale(const NetworkConfig& net, std::optional<std::size_t> scale) {
  if (scale && *scale != net.scale) {
    throw std::invalid_argument("--scale " + std::to_string(*scale) + " does not match the checkpoint (x" +
                                std::to_string(net.scale) + ")");
  }
}

void print_summary(std::ostream& os, const EvalSummary& s) {
  os << std::fixed << std::setprecision(4) << "mean psnr=" << s.psnr << " ssim=" << s.ssim
     << " bicubic_psnr=" << s.bicubic_psnr << " bicubic_ssim=" << s.bicubic_ssim
     << " attention_mass=" << s.attention_mass << "\n";
  os.unsetf(std::ios::fixed);
}

int run_train(const ConfigFlags& flags, const std::string& out_dir, const std::string& resume) {
  TrainConfig cfg;
  fs::path dir;
  if (!resume.empty()) {
    dir = resume;
    if (!fs::exists(dir / "config.txt")) throw std::invalid_argument("no config.txt in " + dir.string());
    TrainConfig saved;
    saved.load(dir / "config.txt");
    // The saved run defines everything except a longer step budget (--steps).
    cfg = saved;
    const std::size_t steps = flags.steps.value_or(0);
    if (steps > cfg.total_steps()) {
      cfg.steps = steps;
      cfg.epochs = std::max(cfg.epochs, (steps + cfg.steps_per_epoch - 1) / cfg.steps_per_epoch);
    }
  } else {
    cfg = flags.build();
    dir = make_run_dir(out_dir, config_hash(cfg));
  }
  std::cout << "run_dir=" << dir.string() << std::endl;
  const TrainResult r = train(cfg, TrainIo{&std::cout, dir, !resume.empty()});
  std::cout << "done steps=" << cfg.total_steps() << " best_epoch=" << r.best_epoch << " best_psnr=" << r.best_psnr
            << " checkpoint=" << (dir / "best.bin").string() << std::endl;
  return 0;
}

int run_eval(const std::string& manifest, const std::string& ckpt, const std::string& sr_manifest,
             const std::string& hr_manifest, std::optional<std::size_t> scale, std::optional<std::size_t> border,
             bool quantized, bool replicated) {
  if (!sr_manifest.empty() || !hr_manifest.empty()) {
    if (sr_manifest.empty() || hr_manifest.empty()) throw std::invalid_argument("--sr and --hr go together");
    const auto sr = load_manifest(sr_manifest), hr = load_manifest(hr_manifest);
    if (sr.size() != hr.size() || sr.empty()) throw std::invalid_argument("manifests must be non-empty and equal length");
    EvalConfig metric = eval_config_for_scale(border ? *border : scale.value_or(0));
    metric.quantized = quantized;
    double mp = 0, ms = 0;
    for (std::size_t i = 0; i < sr.size(); ++i) {
      const auto a = load_image(sr[i].left), b = load_image(hr[i].left);
      const double p = psnr(a, b, metric), s = ssim(a, b, metric);
      std::cout << "image=" << sr[i].left.filename().string() << " psnr=" << p << " ssim=" << s << "\n";
      mp += p, ms += s;
    }
    std::cout << "mean psnr=" << mp / sr.size() << " ssim=" << ms / sr.size() << std::endl;
    return 0;
  }
  if (manifest.empty() || ckpt.empty()) throw std::invalid_argument("eval needs --manifest with --ckpt, or --sr with --hr");
  const auto params = load_checkpoint(ckpt);
  const NetworkConfig net = network_for(ckpt, params);
  require_scale(net, scale);
  std::vector<StereoSample<float>> samples;
  for (const auto& e : load_manifest(manifest)) samples.push_back(load_pair(e, net.scale));
  if (samples.empty()) throw std::invalid_argument("empty dataset: " + manifest);
  EvalConfig metric = eval_config_for_scale(border ? *border : net.scale);
  metric.quantized = quantized;
  const auto s = evaluate(params, net, samples, replicated ? InputMode::kReplicated : InputMode::kStereo, metric);
  const auto entries = load_manifest(manifest);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::cout << "image=" << entries[i].left.filename().string() << " psnr=" << s.per_image_psnr[i]
              << " ssim=" << s.per_image_ssim[i] << "\n";
  }
  print_summary(std::cout, s);
  return 0;
}

int run_sr(const std::string& left, const std::string& right, const std::string& ckpt, const std::string& out,
           std::optional<std::size_t> scale) {
  const auto params = load_checkpoint(ckpt);
  const NetworkConfig net = network_for(ckpt, params);
  require_scale(net, scale);
  const auto l = load_image(left), r = load_image(right);
  if (l.shape() != r.shape()) throw ShapeError("left and right views differ in size");
  const auto sr = super_resolve(params, net, l, r);
  save_image(out, sr);
  std::cout << "wrote " << out << " (" << sr.extent(0) << "x" << sr.extent(1) << ")" << std::endl;
  return 0;
}

// Attention slices for one row, valid masks and the expected-disparity map.
int run_inspect(const std::string& left, const std::string& right, const std::string& ckpt, std::size_t row,
                const std::string& out_dir, std::optional<std::size_t> scale) {
  const auto params = load_checkpoint(ckpt);
  const NetworkConfig net = network_for(ckpt, params);
  require_scale(net, scale);
  if (!net.uses_pam()) throw std::invalid_argument("checkpoint has no attention module to inspect");
  const auto l = load_image(left), r = load_image(right);
  if (l.shape() != r.shape()) throw ShapeError("left and right views differ in size");
  if (row >= l.extent(0)) {
    throw std::invalid_argument("--row " + std::to_string(row) + " outside image height " + std::to_string(l.extent(0)));
  }
  Tape<float> tape;
  Binder<float> b(tape, params, false);
  auto out = forward(tape.constant(l), tape.constant(r), b, net);
  const fs::path dir = make_run_dir(out_dir, "inspect");
  const std::size_t w = l.extent(1);
  auto slice = [&](const Tensor<float>& m) {
    Tensor<float> s({w, w});
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < w; ++k) s(j, k) = m(row, j, k);
    return s;
  };
  const auto& r2l = out.right_to_left->values.value();
  const auto& l2r = out.left_to_right->values.value();
  const std::string tag = "_row" + std::to_string(row);
  // Rows are target columns, columns are source columns; scaled to the slice's peak.
  for (const auto& [name, m] : {std::pair{"attention_right_to_left", &r2l}, std::pair{"attention_left_to_right", &l2r}}) {
    const auto s = slice(*m);
    float peak = 0.0f;
    for (float v : s.data()) peak = std::max(peak, v);
    save_gray(dir / (name + tag + ".png"), s, 0.0f, peak > 0.0f ? peak : 1.0f);
    save_grid(dir / (name + tag + ".txt"), s);
  }
  save_gray(dir / "valid_left.png", out.valid_left->values);
  save_gray(dir / "valid_right.png", out.valid_right->values);
  const auto disp = expected_disparity(r2l, Direction::kRightToLeft).values;
  float dmin = 0.0f, dmax = 0.0f;
  for (float v : disp.data()) dmin = std::min(dmin, v), dmax = std::max(dmax, v);
  save_gray(dir / "disparity_left.png", disp, dmin, dmax);
  save_grid(dir / "disparity_left.txt", disp);
  save_image(dir / "sr_left.png", out.sr_left.value());
  std::cout << "wrote " << dir.string() << " (row " << row << ", " << w << "x" << w
            << " slices, disparity range " << dmin << ".." << dmax << ")" << std::endl;
  return 0;
}

int run_ablate(const ConfigFlags& flags, const std::string& axis, const std::string& out_dir) {
  const TrainConfig base = flags.build();
  ablation_variants(axis, base);  // rejects unknown axes before any work
  const fs::path dir = make_run_dir(out_dir, "ablate-" + axis + "-" + config_hash(base));
  std::cout << "run_dir=" << dir.string() << std::endl;
  const auto rows = ablate(axis, base, &std::cout, dir);
  const std::string table = format_ablation(axis, rows);
  std::ofstream(dir / "report.txt") << table;
  std::cout << table;
  return 0;
}

int run_synth(std::size_t count, std::size_t height, std::size_t width, std::size_t scale, std::uint64_t seed,
              double max_disparity, const std::string& out_dir) {
  if (count == 0) throw std::invalid_argument("--count must be positive");
  TrainConfig c = TrainConfig::desk();
  c.net.scale = scale;
  c.val_height = height;
  c.val_width = width;
  c.val_count = count;
  c.val_seed = seed;
  c.max_disparity = max_disparity;
  c.validate();
  std::ostringstream tag;
  tag << "synth-" << std::hex << seed;
  const fs::path dir = make_run_dir(out_dir, tag.str());
  std::vector<ManifestEntry> entries;
  std::size_t i = 0;
  for (const auto& s : validation_set(c)) {
    std::ostringstream stem;
    stem << std::setw(4) << std::setfill('0') << i++;
    ManifestEntry e{dir / (stem.str() + "_left.png"), dir / (stem.str() + "_right.png"),
                    dir / (stem.str() + "_disparity.txt")};
    save_image(e.left, s.left_hr);
    save_image(e.right, s.right_hr);
    save_grid(e.disparity, s.left_disparity->values);
    entries.push_back(std::move(e));
  }
  save_manifest(dir / "manifest.txt", entries);
  std::cout << "wrote " << count << " pairs to " << (dir / "manifest.txt").string() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stereo super-resolution with parallax attention"};
  app.require_subcommand(1);

  ConfigFlags train_flags, ablate_flags;
  std::string out_dir = "runs", resume;
  auto* train_cmd = app.add_subcommand("train", "Train a network; writes a run directory");
  train_flags.attach(*train_cmd);
  train_cmd->add_option("--out-dir", out_dir, "Parent of the run directory");
  train_cmd->add_option("--resume", resume, "Continue the run in this directory")->check(CLI::ExistingDirectory);

  std::string manifest, ckpt, sr_manifest, hr_manifest;
  std::optional<std::size_t> scale, border;
  bool quantized = false, replicated = false;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM over a manifest");
  eval_cmd->add_option("--manifest", manifest, "HR stereo manifest, degraded and super-resolved with --ckpt");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--sr", sr_manifest, "Manifest of results (left column compared)")->check(CLI::ExistingFile);
  eval_cmd->add_option("--hr", hr_manifest, "Manifest of references (left column compared)")->check(CLI::ExistingFile);
  eval_cmd->add_option("--scale", scale, "Upscaling factor")->check(CLI::IsMember({2, 4}));
  eval_cmd->add_option("--border", border, "Pixels cropped from each edge (default: the scale)");
  eval_cmd->add_flag("--quantized", quantized, "Round to 8 bits before measuring");
  eval_cmd->add_flag("--replicated", replicated, "Feed the left view to both inputs");

  std::string left, right, out_png;
  auto* sr_cmd = app.add_subcommand("sr", "Super-resolve one LR stereo pair");
  sr_cmd->add_option("--left", left, "Left LR PNG")->required()->check(CLI::ExistingFile);
  sr_cmd->add_option("--right", right, "Right LR PNG")->required()->check(CLI::ExistingFile);
  sr_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  sr_cmd->add_option("--out", out_png, "Output PNG")->required();
  sr_cmd->add_option("--scale", scale, "Expected upscaling factor")->check(CLI::IsMember({2, 4}));

  std::size_t row = 0;
  std::string inspect_out = "runs";
  auto* inspect_cmd = app.add_subcommand("inspect", "Dump attention slices, valid masks and disparity");
  inspect_cmd->add_option("--left", left, "Left LR PNG")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--right", right, "Right LR PNG")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--row", row, "Image row whose W x W attention slices are written")->required();
  inspect_cmd->add_option("--out-dir", inspect_out, "Parent of the output directory");
  inspect_cmd->add_option("--scale", scale, "Expected upscaling factor")->check(CLI::IsMember({2, 4}));

  std::string axis, ablate_out = "runs";
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare variants along one axis");
  ablate_flags.attach(*ablate_cmd);
  ablate_cmd->add_option("--axis", axis, "Ablation axis")->required()->check(CLI::IsMember(ablation_axes()));
  ablate_cmd->add_option("--out-dir", ablate_out, "Parent of the run directory");

  std::size_t count = 8, height = 32, width = 96, synth_scale = 2;
  std::uint64_t synth_seed = 1;
  double max_disp = 8.0;
  std::string synth_out = "runs";
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic stereo dataset with disparity grids");
  synth_cmd->add_option("--count", count, "Number of pairs");
  synth_cmd->add_option("--height", height, "LR height");
  synth_cmd->add_option("--width", width, "LR width");
  synth_cmd->add_option("--scale", synth_scale, "HR / LR factor")->check(CLI::IsMember({2, 4}));
  synth_cmd->add_option("--seed", synth_seed, "Random seed");
  synth_cmd->add_option("--max-disparity", max_disp, "Largest disparity in LR pixels");
  synth_cmd->add_option("--out-dir", synth_out, "Parent of the output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "passr: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train_cmd) return run_train(train_flags, out_dir, resume);
    if (*eval_cmd) return run_eval(manifest, ckpt, sr_manifest, hr_manifest, scale, border, quantized, replicated);
    if (*sr_cmd) return run_sr(left, right, ckpt, out_png, scale);
    if (*inspect_cmd) return run_inspect(left, right, ckpt, row, inspect_out, scale);
    if (*ablate_cmd) return run_ablate(ablate_flags, axis, ablate_out);
    if (*synth_cmd) return run_synth(count, height, width, synth_scale, synth_seed, max_disp, synth_out);
  } catch (const std::exception& e) {
    std::cerr << "passr: error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
