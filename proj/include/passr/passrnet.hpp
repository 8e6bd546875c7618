#pragma once

// The full stereo SR network: a shared feature extractor (conv0, resblock0,
// residual ASPP module) on both views, parallax attention fusing the right
// view into the left branch, then four residual blocks, sub-pixel upsampling
// and a final 3x3 conv to RGB.
//
// Parameters live in a ParamStore keyed by dotted names; a Binder turns them
// into tape leaves on demand so both views share the same leaves.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "passr/autodiff.hpp"
#include "passr/nn.hpp"
#include "passr/pam.hpp"
#include "passr/rng.hpp"

namespace passr {

struct NetworkConfig {
  std::size_t channels = 64;
  std::size_t scale = 4;
  std::vector<std::size_t> dilations{1, 4, 8};
  std::size_t aspp_groups = 3;   // ASPP groups per residual ASPP block
  std::size_t aspp_repeats = 2;  // (resASPP block, resblock) pairs
  std::size_t post_blocks = 4;   // residual blocks after the attention module
  bool single_input = false;     // left view only, no attention module
  bool no_pam = false;           // stack both views' features, 1x1 conv 2C -> C
  bool no_transition = false;    // attention module without its transition block
  bool no_atrous = false;        // every ASPP branch at dilation 1
  bool no_aspp_residual = false; // ASPP groups cascaded without skips

  static NetworkConfig reference(std::size_t scale = 4) {
    NetworkConfig c;
    c.scale = scale;
    return c;
  }

  // Same topology at a size where finite differences and CPU training are cheap.
  static NetworkConfig desk(std::size_t channels = 8, std::size_t scale = 2) {
    NetworkConfig c;
    c.channels = channels;
    c.scale = scale;
    c.aspp_groups = 1;
    c.aspp_repeats = 1;
    return c;
  }

  bool uses_pam() const { return !single_input && !no_pam; }

  std::vector<std::size_t> effective_dilations() const {
    return no_atrous ? std::vector<std::size_t>(dilations.size(), 1) : dilations;
  }

  void validate() const {
    if (channels == 0) throw std::invalid_argument("channels must be positive");
    if (scale != 2 && scale != 4) throw std::invalid_argument("scale must be 2 or 4");
    if (dilations.empty()) throw std::invalid_argument("at least one ASPP dilation required");
    for (std::size_t d : dilations) {
      if (d == 0) throw std::invalid_argument("dilations must be positive");
    }
    if (single_input && no_pam) throw std::invalid_argument("single_input and no_pam are exclusive");
  }

  // One line of key=value pairs; also the format of config files.
  std::string to_string() const {
    std::ostringstream os;
    os << "channels=" << channels << " scale=" << scale << " dilations=";
    for (std::size_t i = 0; i < dilations.size(); ++i) os << (i ? "," : "") << dilations[i];
    os << " aspp_groups=" << aspp_groups << " aspp_repeats=" << aspp_repeats
       << " post_blocks=" << post_blocks << " single_input=" << single_input << " no_pam=" << no_pam
       << " no_transition=" << no_transition << " no_atrous=" << no_atrous
       << " no_aspp_residual=" << no_aspp_residual;
    return os.str();
  }
};

// Ordered name -> tensor map. Insertion order is the iteration order.
template <typename T>
class ParamStore {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const { return entries_.at(lookup(name)).second; }
  Tensor<T>& at(const std::string& name) { return entries_.at(lookup(name)).second; }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  bool operator==(const ParamStore& other) const { return entries_ == other.entries_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
std::size_t param_count(const ParamStore<T>& store) {
  std::size_t n = 0;
  for (const auto& e : store.entries()) n += e.second.size();
  return n;
}

// Creates one tape leaf per parameter the first time it is requested.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParamStore<T>& store, bool trainable = true)
      : tape_(tape), store_(store), trainable_(trainable) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor<T>& t = store_.at(name);
    Var<T> v = trainable_ ? tape_.variable(t) : tape_.constant(t);
    bound_.emplace(name, v);
    return v;
  }

  // Uses an existing leaf for `name` (e.g. one owned by a gradient check).
  void preset(const std::string& name, const Var<T>& v) {
    if (v.shape() != store_.at(name).shape()) throw ShapeError("preset shape mismatch for " + name);
    bound_.insert_or_assign(name, v);
  }

  Conv2dParams<T> conv(const std::string& prefix, std::size_t dilation = 1) {
    return {(*this)(prefix + ".weight"), (*this)(prefix + ".bias"), dilation};
  }

  ResidualBlockParams<T> resblock(const std::string& prefix) {
    return {conv(prefix + ".conv1"), conv(prefix + ".conv2")};
  }

  Tape<T>& tape() { return tape_; }
  // Leaves created so far, by name.
  const std::map<std::string, Var<T>>& bound() const { return bound_; }

 private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  bool trainable_;
  std::map<std::string, Var<T>> bound_;
};

namespace detail {

template <typename T>
class Builder {
 public:
  Builder(ParamStore<T>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void conv(const std::string& prefix, std::size_t k, std::size_t cin, std::size_t cout) {
    store_.add(prefix + ".weight", init_conv_kernel<T>(rng_, k, k, cin, cout));
    store_.add(prefix + ".bias", Tensor<T>({cout}));
  }

  void resblock(const std::string& prefix, std::size_t c) {
    conv(prefix + ".conv1", 3, c, c);
    conv(prefix + ".conv2", 3, c, c);
  }

 private:
  ParamStore<T>& store_;
  Rng rng_;
};

inline std::string aspp_prefix(std::size_t repeat, std::size_t group) {
  return "aspp." + std::to_string(repeat) + ".group." + std::to_string(group);
}

}  // namespace detail

template <typename T>
ParamStore<T> build(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t c = cfg.channels;
  ParamStore<T> store;
  detail::Builder<T> b(store, seed);
  b.conv("conv0", 3, 3, c);
  b.resblock("resblock0", c);
  for (std::size_t r = 0; r < cfg.aspp_repeats; ++r) {
    for (std::size_t g = 0; g < cfg.aspp_groups; ++g) {
      const std::string p = detail::aspp_prefix(r, g);
      for (std::size_t k = 0; k < cfg.dilations.size(); ++k) {
        b.conv(p + ".branch." + std::to_string(k), 3, c, c);
      }
      b.conv(p + ".merge", 1, c * cfg.dilations.size(), c);
    }
    b.resblock("aspp." + std::to_string(r) + ".resblock", c);
  }
  if (cfg.uses_pam()) {
    if (!cfg.no_transition) b.resblock("pam.transition", c);
    b.conv("pam.query", 1, c, c);
    b.conv("pam.key", 1, c, c);
    b.conv("pam.value", 1, c, c);
    b.conv("pam.fusion", 1, 2 * c + 1, c);
  } else if (cfg.no_pam) {
    b.conv("stack", 1, 2 * c, c);
  }
  for (std::size_t i = 0; i < cfg.post_blocks; ++i) b.resblock("post." + std::to_string(i), c);
  b.conv("upsample.expand", 1, c, c * cfg.scale * cfg.scale);
  b.conv("conv3b", 3, c, 3);
  return store;
}

// Three parallel dilated 3x3 convs with LReLU, concatenated, merged by 1x1.
template <typename T>
Var<T> aspp_group(const Var<T>& x, Binder<T>& p, const std::string& prefix,
                  const std::vector<std::size_t>& dilations) {
  std::vector<Var<T>> branches;
  for (std::size_t k = 0; k < dilations.size(); ++k) {
    branches.push_back(leaky_relu(conv2d(x, p.conv(prefix + ".branch." + std::to_string(k), dilations[k])),
                                  static_cast<T>(kLeakySlope)));
  }
  return conv2d(concat_lastdim(branches), p.conv(prefix + ".merge"));
}

template <typename T>
Var<T> residual_aspp_block(const Var<T>& x, Binder<T>& p, const NetworkConfig& cfg, std::size_t repeat) {
  if (x.shape().size() != 3 || x.shape()[2] != cfg.channels) {
    throw ShapeError("residual ASPP block expects " + std::to_string(cfg.channels) + " channels, got " +
                     to_string(x.shape()));
  }
  const auto dilations = cfg.effective_dilations();
  Var<T> h = x;
  for (std::size_t g = 0; g < cfg.aspp_groups; ++g) {
    Var<T> y = aspp_group(h, p, detail::aspp_prefix(repeat, g), dilations);
    h = cfg.no_aspp_residual ? y : h + y;
  }
  return h;
}

template <typename T>
Var<T> residual_aspp_module(const Var<T>& x, Binder<T>& p, const NetworkConfig& cfg) {
  Var<T> h = x;
  for (std::size_t r = 0; r < cfg.aspp_repeats; ++r) {
    h = residual_aspp_block(h, p, cfg, r);
    h = residual_block(h, p.resblock("aspp." + std::to_string(r) + ".resblock"));
  }
  return h;
}

// Images enter the network shifted by -kImageMean and the SR output is
// shifted back, so the convolutions work on zero-centred intensities.
inline constexpr double kImageMean = 0.5;

template <typename T>
Var<T> extract_features(const Var<T>& img, Binder<T>& p, const NetworkConfig& cfg) {
  Var<T> centred = affine(img, T{1}, static_cast<T>(-kImageMean));
  Var<T> h = leaky_relu(conv2d(centred, p.conv("conv0")), static_cast<T>(kLeakySlope));
  h = residual_block(h, p.resblock("resblock0"));
  return residual_aspp_module(h, p, cfg);
}

template <typename T>
struct ForwardOutput {
  Var<T> sr_left;  // sH x sW x 3
  std::optional<AttentionMap<T>> right_to_left, left_to_right;
  std::optional<ValidMask<T>> valid_left, valid_right;  // V_{l->r}, V_{r->l}
};

template <typename T>
ForwardOutput<T> forward(const Var<T>& left, const Var<T>& right, Binder<T>& p, const NetworkConfig& cfg) {
  if (left.shape() != right.shape() || left.shape().size() != 3 || left.shape()[2] != 3) {
    throw ShapeError("forward expects two H x W x 3 views, got " + to_string(left.shape()) + " and " +
                     to_string(right.shape()));
  }
  if (left.shape()[0] == 0 || left.shape()[1] == 0) throw ShapeError("forward: empty image");
  ForwardOutput<T> out;
  Var<T> fl = extract_features(left, p, cfg);
  Var<T> fused = fl;
  if (cfg.uses_pam()) {
    Var<T> fr = extract_features(right, p, cfg);
    PamParams<T> pp{std::nullopt, p.conv("pam.query"), p.conv("pam.key"), p.conv("pam.value"),
                    p.conv("pam.fusion")};
    if (!cfg.no_transition) pp.transition = p.resblock("pam.transition");
    PamOutput<T> pam = parallax_attention(fl, fr, pp);
    fused = pam.fused;
    out.right_to_left = pam.right_to_left;
    out.left_to_right = pam.left_to_right;
    out.valid_left = std::move(pam.valid_left);
    out.valid_right = std::move(pam.valid_right);
  } else if (cfg.no_pam) {
    Var<T> fr = extract_features(right, p, cfg);
    fused = conv2d(concat_lastdim<T>({fl, fr}), p.conv("stack"));
  }
  Var<T> h = fused;
  for (std::size_t i = 0; i < cfg.post_blocks; ++i) h = residual_block(h, p.resblock("post." + std::to_string(i)));
  h = pixel_shuffle_upsample(h, p.conv("upsample.expand"), cfg.scale);
  out.sr_left = affine(conv2d(h, p.conv("conv3b")), T{1}, static_cast<T>(kImageMean));
  return out;
}

// Recovers the shape-determined part of a config from parameter names and
// extents. Dilations and the no_atrous / no_aspp_residual flags do not change
// any parameter and are taken from `base`.
template <typename T>
NetworkConfig infer_config(const ParamStore<T>& store, NetworkConfig base = {}) {
  const auto& k0 = store.at("conv0.weight");
  base.channels = k0.extent(3);
  const auto& up = store.at("upsample.expand.weight");
  const std::size_t ratio = up.extent(3) / base.channels;
  base.scale = ratio == 4 ? 2 : ratio == 16 ? 4 : 0;
  base.aspp_repeats = 0;
  while (store.contains("aspp." + std::to_string(base.aspp_repeats) + ".resblock.conv1.weight")) ++base.aspp_repeats;
  base.aspp_groups = 0;
  while (store.contains(detail::aspp_prefix(0, base.aspp_groups) + ".merge.weight")) ++base.aspp_groups;
  std::size_t branches = 0;
  while (store.contains(detail::aspp_prefix(0, 0) + ".branch." + std::to_string(branches) + ".weight")) ++branches;
  if (base.dilations.size() != branches) {
    throw std::invalid_argument("checkpoint has " + std::to_string(branches) +
                                " ASPP branches but the configured dilations list has " +
                                std::to_string(base.dilations.size()));
  }
  base.post_blocks = 0;
  while (store.contains("post." + std::to_string(base.post_blocks) + ".conv1.weight")) ++base.post_blocks;
  base.no_pam = store.contains("stack.weight");
  base.single_input = !base.no_pam && !store.contains("pam.query.weight");
  base.no_transition = store.contains("pam.query.weight") && !store.contains("pam.transition.conv1.weight");
  base.validate();
  return base;
}

}  // namespace passr
