#pragma once

// Flat "key = value" configuration files.
//
//   # comment
//   include base.cfg        (path relative to the including file)
//   steps = 200
//
// Later assignments override earlier ones, including those from includes.

#include "idt/model.hpp"
#include "idt/objectives.hpp"
#include "idt/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>

namespace idt {

class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::filesystem::path& path);
  static KeyValueConfig parse_string(const std::string& text,
                                     const std::filesystem::path& base_dir = ".");

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Throws ConfigError naming the first key outside `allowed`.
  void require_known(const std::set<std::string>& allowed) const;

 private:
  void parse_into(const std::string& text, const std::filesystem::path& base_dir, int depth);
  std::map<std::string, std::string> values_;
};

struct GenDataConfig {
  scene::SynthConfig synth;
  std::filesystem::path out_dir;
  bool overwrite = false;
};

struct OptimizerConfig {
  double lr = 3e-4;
  double momentum = 0.9;
  // Learning rate at step t is lr * lr_decay^(t / steps).
  double lr_decay = 1.0;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  std::size_t steps = 100;
  std::size_t batch_scenes = 1;
  std::size_t views = 2;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const;
};

struct RunConfig {
  std::filesystem::path dataset;
  std::filesystem::path out_dir;
  model::ModelConfig model;
  objectives::LossConfig loss;
  OptimizerConfig optim;
  double depth_weight = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

GenDataConfig gen_data_config(const KeyValueConfig& kv);
RunConfig run_config(const KeyValueConfig& kv);

}  // namespace idt
