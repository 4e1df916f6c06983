#pragma once

#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "skimba/optim.hpp"
#include "skimba/scene.hpp"

namespace skimba {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageTraining {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // > 0 overrides epochs
  std::size_t batch = 1;

  std::size_t total_steps(std::size_t scenes) const {
    if (steps > 0) return steps;
    return epochs * ((scenes + batch - 1) / batch);
  }
};

/// Everything a CLI run needs; every field has a key in the config file.
struct RunConfig {
  std::uint64_t seed = 0;
  NetworkSpec net;
  double focal = 24.0;
  std::size_t train_scenes = 256, val_scenes = 32, test_scenes = 32;

  StageTraining vae{3e-4, 1e-2, 24, 0, 4};
  StageTraining diffusion{1e-3, 1e-4, 43, 0, 4};
  StageTraining seg{5e-3, 1e-4, 24, 0, 4};
  double warmup_fraction = 0.05;
  double lr_floor = 0.01;
  double grad_clip = 1.0;
  double kl_weight = 1e-6;
  double lovasz_beta = 1.0;
  double seg_latent_noise = 0.5;  // latent perturbation for segmenter training inputs

  std::size_t timesteps = kDefaultDiffusionSteps;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  SceneConfig scene() const {
    SceneConfig s;
    s.grid = net.grid;
    s.classes = net.classes;
    s.voxel_size = net.voxel_size;
    s.image_rows = net.image_rows;
    s.image_cols = net.image_cols;
    s.focal = focal;
    return s;
  }

  NoiseSchedule schedule() const { return NoiseSchedule::linear(timesteps, beta_start, beta_end); }

  WarmupCosine lr_schedule(const StageTraining& st, std::size_t scenes) const {
    return {st.lr, st.total_steps(scenes), warmup_fraction, lr_floor};
  }
  AdamWConfig adamw(const StageTraining& st) const {
    AdamWConfig c;
    c.weight_decay = st.weight_decay;
    c.grad_clip = grad_clip;
    return c;
  }

  void validate() const {
    try {
      net.validate();
      scene().validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    if (train_scenes == 0) throw ConfigError("train_scenes must be positive");
    if (test_scenes == 0) throw ConfigError("test_scenes must be positive");
    for (const auto* st : {&vae, &diffusion, &seg}) {
      if (!(st->lr > 0)) throw ConfigError("learning rates must be positive");
      if (st->weight_decay < 0) throw ConfigError("weight decay must be non-negative");
      if (st->batch == 0) throw ConfigError("batch sizes must be positive");
      if (st->epochs == 0 && st->steps == 0) throw ConfigError("each stage needs epochs or steps");
    }
    if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("warmup_fraction must be in [0, 1)");
    if (!(lr_floor >= 0 && lr_floor <= 1)) throw ConfigError("lr_floor must be in [0, 1]");
    if (timesteps == 0) throw ConfigError("timesteps must be positive");
    if (!(beta_start > 0 && beta_end > beta_start && beta_end < 1)) {
      throw ConfigError("beta schedule must satisfy 0 < beta_start < beta_end < 1");
    }
    if (kl_weight < 0 || lovasz_beta < 0 || seg_latent_noise < 0 || grad_clip < 0) {
      throw ConfigError("loss weights, noise levels and clip norms must be non-negative");
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename U>
U parse_number(const std::string& key, const std::string& v) {
  U out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("invalid value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid boolean for " + key + ": '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename U>
Setter number(U RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<U>(k, v); };
}
template <typename U>
Setter net_number(U NetworkSpec::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.net.*field = parse_number<U>(k, v); };
}
inline Setter net_flag(bool NetworkSpec::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.net.*field = parse_bool(k, v); };
}
template <typename U>
Setter stage(StageTraining RunConfig::*st, U StageTraining::*field) {
  return [st, field](RunConfig& c, const std::string& k, const std::string& v) {
    (c.*st).*field = parse_number<U>(k, v);
  };
}

inline const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> m;
    m["seed"] = number(&RunConfig::seed);
    m["grid"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      auto l = parse_list(k, v);
      if (l.size() != 3) throw ConfigError("grid needs three extents L,W,H");
      c.net.grid = {l[0], l[1], l[2]};
    };
    m["image"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      auto l = parse_list(k, v);
      if (l.size() != 2) throw ConfigError("image needs two extents rows,cols");
      c.net.image_rows = l[0];
      c.net.image_cols = l[1];
    };
    m["channels"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.net.channels = parse_list(k, v); };
    m["classes"] = net_number(&NetworkSpec::classes);
    m["voxel_size"] = net_number(&NetworkSpec::voxel_size);
    m["latent_channels"] = net_number(&NetworkSpec::latent_channels);
    m["condition_channels"] = net_number(&NetworkSpec::condition_channels);
    m["feature_channels"] = net_number(&NetworkSpec::feature_channels);
    m["extractor_depth"] = net_number(&NetworkSpec::extractor_depth);
    m["state_size"] = net_number(&NetworkSpec::state_size);
    m["use_mscb"] = net_flag(&NetworkSpec::use_mscb);
    m["use_sb"] = net_flag(&NetworkSpec::use_sb);
    m["use_skimba"] = net_flag(&NetworkSpec::use_skimba);
    m["focal"] = number(&RunConfig::focal);
    m["train_scenes"] = number(&RunConfig::train_scenes);
    m["val_scenes"] = number(&RunConfig::val_scenes);
    m["test_scenes"] = number(&RunConfig::test_scenes);
    for (auto [name, st] : {std::pair{"vae", &RunConfig::vae}, std::pair{"diffusion", &RunConfig::diffusion},
                            std::pair{"seg", &RunConfig::seg}}) {
      const std::string p = name;
      m[p + "_lr"] = stage(st, &StageTraining::lr);
      m[p + "_weight_decay"] = stage(st, &StageTraining::weight_decay);
      m[p + "_epochs"] = stage(st, &StageTraining::epochs);
      m[p + "_steps"] = stage(st, &StageTraining::steps);
      m[p + "_batch"] = stage(st, &StageTraining::batch);
    }
    m["warmup_fraction"] = number(&RunConfig::warmup_fraction);
    m["lr_floor"] = number(&RunConfig::lr_floor);
    m["grad_clip"] = number(&RunConfig::grad_clip);
    m["kl_weight"] = number(&RunConfig::kl_weight);
    m["lovasz_beta"] = number(&RunConfig::lovasz_beta);
    m["seg_latent_noise"] = number(&RunConfig::seg_latent_noise);
    m["timesteps"] = number(&RunConfig::timesteps);
    m["beta_start"] = number(&RunConfig::beta_start);
    m["beta_end"] = number(&RunConfig::beta_end);
    return m;
  }();
  return keys;
}

}  // namespace detail

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_keys()) out.push_back(k);
  return out;
}

inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

/// Parses `key = value` lines over the defaults; '#' starts a comment. Unknown
/// keys, duplicate keys and malformed values are errors.
inline RunConfig parse_config(const std::string& text, RunConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      apply_setting(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const std::exception&) {
    throw ConfigError("cannot read config file " + path);
  }
  return parse_config(text);
}

namespace detail {
// Shortest text that parses back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
}  // namespace detail

/// Canonical key=value rendering; parse_config(format_config(c)) == c.
inline std::string format_config(const RunConfig& c) {
  std::ostringstream o;
  auto list = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  auto b = [](bool f) { return f ? "true" : "false"; };
  o << "seed = " << c.seed << "\n";
  o << "grid = " << list(c.net.grid) << "\n";
  o << "classes = " << c.net.classes << "\n";
  o << "voxel_size = " << detail::shortest(c.net.voxel_size) << "\n";
  o << "image = " << c.net.image_rows << "," << c.net.image_cols << "\n";
  o << "focal = " << detail::shortest(c.focal) << "\n";
  o << "channels = " << list(c.net.channels) << "\n";
  o << "latent_channels = " << c.net.latent_channels << "\n";
  o << "condition_channels = " << c.net.condition_channels << "\n";
  o << "feature_channels = " << c.net.feature_channels << "\n";
  o << "extractor_depth = " << c.net.extractor_depth << "\n";
  o << "state_size = " << c.net.state_size << "\n";
  o << "use_mscb = " << b(c.net.use_mscb) << "\n";
  o << "use_sb = " << b(c.net.use_sb) << "\n";
  o << "use_skimba = " << b(c.net.use_skimba) << "\n";
  o << "train_scenes = " << c.train_scenes << "\n";
  o << "val_scenes = " << c.val_scenes << "\n";
  o << "test_scenes = " << c.test_scenes << "\n";
  for (auto [name, st] : {std::pair{"vae", &c.vae}, std::pair{"diffusion", &c.diffusion}, std::pair{"seg", &c.seg}}) {
    o << name << "_lr = " << detail::shortest(st->lr) << "\n";
    o << name << "_weight_decay = " << detail::shortest(st->weight_decay) << "\n";
    o << name << "_epochs = " << st->epochs << "\n";
    o << name << "_steps = " << st->steps << "\n";
    o << name << "_batch = " << st->batch << "\n";
  }
  o << "warmup_fraction = " << detail::shortest(c.warmup_fraction) << "\n";
  o << "lr_floor = " << detail::shortest(c.lr_floor) << "\n";
  o << "grad_clip = " << detail::shortest(c.grad_clip) << "\n";
  o << "kl_weight = " << detail::shortest(c.kl_weight) << "\n";
  o << "lovasz_beta = " << detail::shortest(c.lovasz_beta) << "\n";
  o << "seg_latent_noise = " << detail::shortest(c.seg_latent_noise) << "\n";
  o << "timesteps = " << c.timesteps << "\n";
  o << "beta_start = " << detail::shortest(c.beta_start) << "\n";
  o << "beta_end = " << detail::shortest(c.beta_end) << "\n";
  return o.str();
}

}  // namespace skimba
