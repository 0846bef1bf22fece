#include "idt/config.hpp"

#include "idt/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace idt {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

const std::set<std::string> kSynthKeys = {
    "seed", "scenes", "views", "width", "height", "min_spheres", "max_spheres", "min_radius",
    "max_radius", "albedo_min", "albedo_max", "checker_floor", "checker_size", "gloss_min",
    "gloss_max", "specular_min", "specular_max", "lobes", "lobe_sharpness_min",
    "lobe_sharpness_max", "lobe_amplitude_min", "lobe_amplitude_max", "ambient_min",
    "ambient_max", "arc_radius", "elevation_deg", "baseline_deg", "fov_deg", "out_dir",
    "overwrite"};

const std::set<std::string> kRunKeys = {
    "dataset", "out_dir", "seed", "steps", "lr", "momentum", "lr_decay", "grad_clip",
    "batch_scenes", "views", "checkpoint_every", "depth_weight", "model.patch_size",
    "model.embed_dim", "model.block_pairs", "model.heads", "model.registers", "model.lobes",
    "model.mlp_ratio", "model.aux_depth", "loss.eps", "loss.w_albedo", "loss.w_diffuse",
    "loss.w_specular", "loss.w_recon", "loss.w_illum"};

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const fs::path& path) {
  KeyValueConfig kv;
  kv.parse_into(read_file(path), path.parent_path(), 0);
  return kv;
}

KeyValueConfig KeyValueConfig::parse_string(const std::string& text, const fs::path& base_dir) {
  KeyValueConfig kv;
  kv.parse_into(text, base_dir, 0);
  return kv;
}

void KeyValueConfig::parse_into(const std::string& text, const fs::path& base_dir, int depth) {
  if (depth > 16) throw ConfigError("config include depth exceeds 16 (cycle?)");
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include", 0) == 0 && line.find('=') == std::string::npos) {
      const std::string rel = trim(line.substr(7));
      if (rel.empty()) throw ConfigError("line " + std::to_string(lineno) + ": include needs a path");
      const fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : base_dir / rel;
      parse_into(read_file(p), p.parent_path(), depth + 1);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    values_[key] = value;
  }
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size() || !std::isfinite(v)) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a number, got '" + it->second + "'");
  }
}

std::uint64_t KeyValueConfig::get_uint(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& s = it->second;
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ConfigError("config key " + key + ": expected a nonnegative integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": integer out of range");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + it->second + "'");
}

void KeyValueConfig::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : values_) {
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0,1]");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be nonnegative");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_scenes < 1) throw ConfigError("batch_scenes must be >= 1");
  if (views < 1) throw ConfigError("views must be >= 1");
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  optim.validate();
  if (!(depth_weight >= 0.0)) throw ConfigError("depth_weight must be nonnegative");
  if (dataset.empty()) throw ConfigError("dataset path is required");
  if (!fs::exists(dataset / "manifest.txt")) {
    throw ConfigError("dataset " + dataset.string() + " has no manifest.txt");
  }
  if (out_dir.empty()) throw ConfigError("out_dir is required");
}

GenDataConfig gen_data_config(const KeyValueConfig& kv) {
  kv.require_known(kSynthKeys);
  GenDataConfig g;
  auto& s = g.synth;
  s.seed = kv.get_uint("seed", s.seed);
  s.scenes = kv.get_uint("scenes", s.scenes);
  s.views = kv.get_uint("views", s.views);
  s.width = kv.get_uint("width", s.width);
  s.height = kv.get_uint("height", s.height);
  s.min_spheres = kv.get_uint("min_spheres", s.min_spheres);
  s.max_spheres = kv.get_uint("max_spheres", s.max_spheres);
  s.min_radius = kv.get_double("min_radius", s.min_radius);
  s.max_radius = kv.get_double("max_radius", s.max_radius);
  s.albedo_min = kv.get_double("albedo_min", s.albedo_min);
  s.albedo_max = kv.get_double("albedo_max", s.albedo_max);
  s.checker_floor = kv.get_bool("checker_floor", s.checker_floor);
  s.checker_size = kv.get_double("checker_size", s.checker_size);
  s.gloss_min = kv.get_double("gloss_min", s.gloss_min);
  s.gloss_max = kv.get_double("gloss_max", s.gloss_max);
  s.specular_min = kv.get_double("specular_min", s.specular_min);
  s.specular_max = kv.get_double("specular_max", s.specular_max);
  s.lobes = kv.get_uint("lobes", s.lobes);
  s.lobe_sharpness_min = kv.get_double("lobe_sharpness_min", s.lobe_sharpness_min);
  s.lobe_sharpness_max = kv.get_double("lobe_sharpness_max", s.lobe_sharpness_max);
  s.lobe_amplitude_min = kv.get_double("lobe_amplitude_min", s.lobe_amplitude_min);
  s.lobe_amplitude_max = kv.get_double("lobe_amplitude_max", s.lobe_amplitude_max);
  s.ambient_min = kv.get_double("ambient_min", s.ambient_min);
  s.ambient_max = kv.get_double("ambient_max", s.ambient_max);
  s.arc_radius = kv.get_double("arc_radius", s.arc_radius);
  s.elevation_deg = kv.get_double("elevation_deg", s.elevation_deg);
  s.baseline_deg = kv.get_double("baseline_deg", s.baseline_deg);
  s.fov_deg = kv.get_double("fov_deg", s.fov_deg);
  g.out_dir = kv.get_string("out_dir", "");
  g.overwrite = kv.get_bool("overwrite", false);
  if (g.out_dir.empty()) throw ConfigError("out_dir is required");
  s.validate();
  return g;
}

RunConfig run_config(const KeyValueConfig& kv) {
  kv.require_known(kRunKeys);
  RunConfig r;
  r.dataset = kv.get_string("dataset", "");
  r.out_dir = kv.get_string("out_dir", "");
  r.seed = kv.get_uint("seed", r.seed);
  auto& o = r.optim;
  o.steps = kv.get_uint("steps", o.steps);
  o.lr = kv.get_double("lr", o.lr);
  o.momentum = kv.get_double("momentum", o.momentum);
  o.lr_decay = kv.get_double("lr_decay", o.lr_decay);
  o.grad_clip = kv.get_double("grad_clip", o.grad_clip);
  o.batch_scenes = kv.get_uint("batch_scenes", o.batch_scenes);
  o.views = kv.get_uint("views", o.views);
  o.checkpoint_every = kv.get_uint("checkpoint_every", o.checkpoint_every);
  r.depth_weight = kv.get_double("depth_weight", r.depth_weight);
  auto& m = r.model;
  m.patch_size = kv.get_uint("model.patch_size", m.patch_size);
  m.embed_dim = kv.get_uint("model.embed_dim", m.embed_dim);
  m.block_pairs = kv.get_uint("model.block_pairs", m.block_pairs);
  m.heads = kv.get_uint("model.heads", m.heads);
  m.registers = kv.get_uint("model.registers", m.registers);
  m.lobes = kv.get_uint("model.lobes", m.lobes);
  m.mlp_ratio = kv.get_uint("model.mlp_ratio", m.mlp_ratio);
  m.aux_depth = kv.get_bool("model.aux_depth", m.aux_depth);
  auto& l = r.loss;
  l.eps = kv.get_double("loss.eps", l.eps);
  l.w_albedo = kv.get_double("loss.w_albedo", l.w_albedo);
  l.w_diffuse = kv.get_double("loss.w_diffuse", l.w_diffuse);
  l.w_specular = kv.get_double("loss.w_specular", l.w_specular);
  l.w_recon = kv.get_double("loss.w_recon", l.w_recon);
  l.w_illum = kv.get_double("loss.w_illum", l.w_illum);
  r.validate();
  return r;
}

}  // namespace idt
