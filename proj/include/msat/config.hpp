#ifndef MSAT_CONFIG_HPP
#define MSAT_CONFIG_HPP

#include "msat/model.hpp"
#include "msat/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace msat {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model;

  double base_lr = 0.01;
  double power = 0.9;
  long max_iter = 2000;
  long stop_iter = 0;  // stop early (schedule still uses max_iter); 0 = run to max_iter
  long batch_size = 8;
  double decoder_lr_mult = 10.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;

  long checkpoint_every = 500;  // 0 disables periodic checkpoints
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "run";
  std::filesystem::path checkpoint;  // eval/predict input
  std::filesystem::path resume;      // train: continue from this state

  std::vector<std::uint64_t> ablation_seeds{1, 2, 3};

  SynthSpec synth;
  std::uint64_t data_count = 64;

  /// Throws ConfigError on the first inconsistent value.
  void validate() const;
};

/// Applies one `key = value` setting; unknown keys throw ConfigError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses flat UTF-8 `key = value` lines ('#' starts a comment) on top of `base`.
RunConfig parse_config(std::string_view text, RunConfig base = {});

/// Serializes every key in a form parse_config reads back.
std::string format_config(const RunConfig& cfg);

}  // namespace msat

#endif  // MSAT_CONFIG_HPP
