#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "xkey/detect.hpp"
#include "xkey/eval.hpp"
#include "xkey/register.hpp"
#include "xkey/synth.hpp"
#include "xkey/train.hpp"

namespace xkey {

enum class Preset { paper, desk };

inline std::string_view to_string(Preset p) { return p == Preset::paper ? "paper" : "desk"; }

inline Preset parse_preset(const std::string& s) {
  if (s == "paper") return Preset::paper;
  if (s == "desk") return Preset::desk;
  throw Error(ErrorKind::invalid_argument, "unknown preset: " + s);
}

/// Every tunable of the pipeline, fully resolved.
struct RunConfig {
  Preset preset = Preset::desk;
  std::uint64_t seed = 0;
  int threads = 1;

  PhantomSpec phantom;
  int n_sequences = 3;
  std::vector<double> gammas{0.3, 0.5, 0.7, 1.0};
  SynthUsParams us;
  double test_gamma = 0.6;

  HeatmapParams heatmap;
  double prior_sigma_mm = 4.0;

  TrainConfig train;
  RegisterParams reg;
  EvalParams eval;
  int repeats = 10;

  /// Largest random perturbation used by the demo and registration experiments.
  double perturb_max_deg = 10.0;
  double perturb_max_mm = 10.0;
};

inline RunConfig preset_config(Preset p) {
  RunConfig c;
  c.preset = p;
  if (p == Preset::paper) {
    c.train.epochs = 2000;
    c.train.keypoints_per_epoch = 1024;
    c.train.batch = 256;
    c.train.warmup_epochs = 200;
    c.train.rotation_ramp_epochs = 1000;
    c.train.encoder.patch_size = 32;
    c.train.encoder.descriptor_dim = 128;
    c.train.encoder.widths = {64, 128, 256, 512};
    c.train.encoder.blocks_per_stage = 2;
  } else {
    // The small encoder collapses under pure hardest-negative mining.
    c.train.mining = MiningRule::semi_hard;
    // One fixed training FoV shows each location with a single edge cut.
    c.train.positive_mask_max = 0.1;
  }
  c.train.sampler.patch_size = c.train.encoder.patch_size;
  c.reg.sampler = c.train.sampler;
  c.eval.sampler = c.train.sampler;
  return c;
}

namespace detail {

template <typename T>
std::string fmt(const T& v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

template <typename T>
T parse_as(const std::string& key, const std::string& s) {
  std::istringstream in(s);
  T v{};
  in >> v;
  require(!in.fail() && (in >> std::ws).eof(), ErrorKind::format, "bad value for " + key + ": '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error(ErrorKind::format, "bad boolean for " + key + ": '" + s + "'");
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& s) {
  std::istringstream in(s);
  std::vector<T> out;
  for (std::string tok; in >> tok;) out.push_back(parse_as<T>(key, tok));
  require(!out.empty(), ErrorKind::format, "empty list for " + key);
  return out;
}

inline std::string fmt_vec3(const Vec3& v) { return fmt(v.x()) + " " + fmt(v.y()) + " " + fmt(v.z()); }

inline Vec3 parse_vec3(const std::string& key, const std::string& s) {
  const auto l = parse_list<double>(key, s);
  require(l.size() == 3, ErrorKind::format, key + " needs 3 numbers");
  return {l[0], l[1], l[2]};
}

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define XKEY_SCALAR(key, field, type)                                                       \
  ConfigKey {                                                                               \
    key, [](const RunConfig& c) { return fmt(c.field); },                                   \
        [](RunConfig& c, const std::string& s) { c.field = parse_as<type>(key, s); }        \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      XKEY_SCALAR("seed", seed, std::uint64_t),
      XKEY_SCALAR("threads", threads, int),
      XKEY_SCALAR("phantom.seed", phantom.seed, std::uint64_t),
      {"phantom.dims",
       [](const RunConfig& c) {
         return fmt(c.phantom.grid.dims[0]) + " " + fmt(c.phantom.grid.dims[1]) + " " + fmt(c.phantom.grid.dims[2]);
       },
       [](RunConfig& c, const std::string& s) {
         const auto l = parse_list<int>("phantom.dims", s);
         require(l.size() == 3, ErrorKind::format, "phantom.dims needs 3 integers");
         c.phantom.grid.dims = {l[0], l[1], l[2]};
       }},
      {"phantom.spacing", [](const RunConfig& c) { return fmt_vec3(c.phantom.grid.spacing); },
       [](RunConfig& c, const std::string& s) { c.phantom.grid.spacing = parse_vec3("phantom.spacing", s); }},
      {"phantom.origin", [](const RunConfig& c) { return fmt_vec3(c.phantom.grid.origin); },
       [](RunConfig& c, const std::string& s) { c.phantom.grid.origin = parse_vec3("phantom.origin", s); }},
      XKEY_SCALAR("phantom.n_structures", phantom.n_structures, int),
      XKEY_SCALAR("phantom.contrast_min", phantom.contrast_min, double),
      XKEY_SCALAR("phantom.contrast_max", phantom.contrast_max, double),
      XKEY_SCALAR("phantom.detail_density", phantom.detail_density, double),
      XKEY_SCALAR("synth.n_sequences", n_sequences, int),
      {"synth.gammas", [](const RunConfig& c) { return fmt_list(c.gammas); },
       [](RunConfig& c, const std::string& s) { c.gammas = parse_list<double>("synth.gammas", s); }},
      XKEY_SCALAR("synth.speckle_strength", us.speckle_strength, double),
      XKEY_SCALAR("synth.blur_sigma", us.blur_sigma, double),
      XKEY_SCALAR("synth.edge_gain", us.edge_gain, double),
      XKEY_SCALAR("synth.test_gamma", test_gamma, double),
      {"fov.apex", [](const RunConfig& c) { return fmt_vec3(c.us.fov.apex); },
       [](RunConfig& c, const std::string& s) { c.us.fov.apex = parse_vec3("fov.apex", s); }},
      {"fov.axis", [](const RunConfig& c) { return fmt_vec3(c.us.fov.axis); },
       [](RunConfig& c, const std::string& s) { c.us.fov.axis = parse_vec3("fov.axis", s); }},
      XKEY_SCALAR("fov.radius", us.fov.radius, double),
      XKEY_SCALAR("fov.half_angle_deg", us.fov.half_angle_deg, double),
      XKEY_SCALAR("detect.n_octaves", heatmap.detector.n_octaves, int),
      XKEY_SCALAR("detect.scales_per_octave", heatmap.detector.scales_per_octave, int),
      XKEY_SCALAR("detect.base_sigma", heatmap.detector.base_sigma, double),
      XKEY_SCALAR("detect.contrast_threshold", heatmap.detector.contrast_threshold, double),
      XKEY_SCALAR("detect.edge_ratio_threshold", heatmap.detector.edge_ratio_threshold, double),
      XKEY_SCALAR("saliency.smoothing_sigma_vox", heatmap.smoothing_sigma_vox, double),
      XKEY_SCALAR("saliency.prior_sigma_mm", prior_sigma_mm, double),
      XKEY_SCALAR("patch_size", train.sampler.patch_size, int),
      XKEY_SCALAR("sampler.min_dist_mm", train.sampler.min_dist_mm, double),
      XKEY_SCALAR("sampler.fov_fraction", train.sampler.fov_fraction, double),
      XKEY_SCALAR("sampler.attempts_per_point", train.sampler.attempts_per_point, std::size_t),
      {"encoder.arch", [](const RunConfig& c) { return std::string(to_string(c.train.encoder.arch)); },
       [](RunConfig& c, const std::string& s) {
         require(s == "residual" || s == "linear", ErrorKind::format, "bad encoder.arch: " + s);
         c.train.encoder.arch = s == "residual" ? EncoderArch::residual : EncoderArch::linear;
       }},
      XKEY_SCALAR("encoder.descriptor_dim", train.encoder.descriptor_dim, int),
      {"encoder.widths", [](const RunConfig& c) { return fmt_list(c.train.encoder.widths); },
       [](RunConfig& c, const std::string& s) { c.train.encoder.widths = parse_list<int>("encoder.widths", s); }},
      XKEY_SCALAR("encoder.blocks_per_stage", train.encoder.blocks_per_stage, int),
      XKEY_SCALAR("train.epochs", train.epochs, int),
      XKEY_SCALAR("train.keypoints_per_epoch", train.keypoints_per_epoch, int),
      XKEY_SCALAR("train.batch", train.batch, int),
      XKEY_SCALAR("train.margin", train.margin, double),
      XKEY_SCALAR("train.warmup_epochs", train.warmup_epochs, int),
      XKEY_SCALAR("train.d_max_mm", train.d_max_mm, double),
      XKEY_SCALAR("train.rotation_ramp_epochs", train.rotation_ramp_epochs, int),
      XKEY_SCALAR("train.theta_cap_deg", train.theta_cap_deg, double),
      XKEY_SCALAR("train.lr_initial", train.lr_initial, double),
      XKEY_SCALAR("train.lr_final", train.lr_final, double),
      XKEY_SCALAR("train.weight_decay", train.weight_decay, double),
      XKEY_SCALAR("train.beta1", train.beta1, double),
      XKEY_SCALAR("train.beta2", train.beta2, double),
      XKEY_SCALAR("train.adam_eps", train.adam_eps, double),
      {"train.mining", [](const RunConfig& c) { return std::string(to_string(c.train.mining)); },
       [](RunConfig& c, const std::string& s) {
         c.train.mining = parse_mining_rule(s);
       }},
      XKEY_SCALAR("train.positive_mask_max", train.positive_mask_max, double),
      XKEY_SCALAR("train.chunk", train.chunk, int),
      XKEY_SCALAR("register.rounds", reg.rounds, int),
      XKEY_SCALAR("register.n_mr_keypoints", reg.n_mr_keypoints, std::size_t),
      XKEY_SCALAR("register.grid_step_mm", reg.grid_step_mm, double),
      XKEY_SCALAR("register.ratio", reg.ratio, double),
      XKEY_SCALAR("ransac.iterations", reg.ransac.iterations, int),
      XKEY_SCALAR("ransac.inlier_mm", reg.ransac.inlier_mm, double),
      {"ransac.adaptive", [](const RunConfig& c) { return std::string(c.reg.ransac.adaptive ? "true" : "false"); },
       [](RunConfig& c, const std::string& s) { c.reg.ransac.adaptive = parse_bool("ransac.adaptive", s); }},
      XKEY_SCALAR("ransac.confidence", reg.ransac.confidence, double),
      XKEY_SCALAR("eval.n_mr_keypoints", eval.n_mr_keypoints, std::size_t),
      XKEY_SCALAR("eval.grid_step_mm", eval.grid_step_mm, double),
      XKEY_SCALAR("eval.ratio", eval.ratio, double),
      XKEY_SCALAR("eval.tolerance_mm", eval.tolerance_mm, double),
      XKEY_SCALAR("eval.repeats", repeats, int),
      XKEY_SCALAR("perturb.max_deg", perturb_max_deg, double),
      XKEY_SCALAR("perturb.max_mm", perturb_max_mm, double),
  };
  return keys;
}

#undef XKEY_SCALAR

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Propagates shared settings (patch size, threads, seeds) into the sub-configs.
inline void finalize_config(RunConfig& c) {
  c.train.encoder.patch_size = c.train.sampler.patch_size;
  c.train.threads = c.threads;
  c.train.seed = c.seed;
  c.reg.sampler = c.train.sampler;
  c.reg.threads = c.threads;
  c.reg.seed = c.seed;
  c.eval.sampler = c.train.sampler;
  c.eval.threads = c.threads;
  c.train.validate();
  require(c.n_sequences >= 1, ErrorKind::invalid_argument, "synth.n_sequences must be >= 1");
  require(c.repeats >= 1, ErrorKind::invalid_argument, "eval.repeats must be >= 1");
  validate_ratio(c.reg.ratio);
  validate_ratio(c.eval.ratio);
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      k.set(c, value);
      return;
    }
  throw Error(ErrorKind::format, "unknown config key: " + key);
}

/// `key = value` lines; `#` starts a comment. Keys before any section header
/// apply to every preset; keys under `[paper]` or `[desk]` apply only to that
/// preset. A `preset = ...` line (outside sections) selects the default preset.
struct ConfigFile {
  std::vector<std::pair<std::string, std::string>> common;
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  std::string preset;
};

inline ConfigFile parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  ConfigFile f;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      require(line.back() == ']', ErrorKind::format, where + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      require(section == "paper" || section == "desk", ErrorKind::format, where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::format, where + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    require(!key.empty(), ErrorKind::format, where + ": empty key");
    if (key == "preset" && section.empty()) {
      f.preset = value;
      continue;
    }
    // Validate the key eagerly so typos surface with a line number.
    bool known = false;
    for (const auto& k : detail::config_keys()) known = known || k.name == key;
    require(known, ErrorKind::format, where + ": unknown config key: " + key);
    (section.empty() ? f.common : f.sections[section]).emplace_back(key, value);
  }
  return f;
}

inline ConfigFile read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Preset defaults, then file keys (common, then the preset's section).
inline RunConfig resolve_config(const ConfigFile& f, Preset preset) {
  RunConfig c = preset_config(preset);
  for (const auto& [k, v] : f.common) set_config_value(c, k, v);
  if (auto it = f.sections.find(std::string(to_string(preset))); it != f.sections.end())
    for (const auto& [k, v] : it->second) set_config_value(c, k, v);
  return c;
}

/// Fully resolved configuration as `key = value` lines, in registry order.
inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream o;
  o << "preset = " << to_string(c.preset) << '\n';
  for (const auto& k : detail::config_keys()) o << k.name << " = " << k.get(c) << '\n';
  return o.str();
}

inline void write_run_lock(const RunConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "run.lock", std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write run.lock in " + dir.string());
  out << config_to_text(c);
}

}  // namespace xkey
