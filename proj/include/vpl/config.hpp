#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <string>

#include "vpl/errors.hpp"
#include "vpl/optim.hpp"
#include "vpl/synth.hpp"

namespace vpl {

/// Strict key=value file: blank lines and '#' comments allowed, anything
/// else must be a known key. Unknown keys are errors, never silent typos.
class KvFile {
 public:
  explicit KvFile(const std::string& path) : path_(path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(path + ": line " + std::to_string(line_no) +
                          " is not key=value");
      }
      const std::string key = line.substr(0, eq);
      if (kv_.count(key))
        throw ConfigError(path + ": duplicate key " + key);
      kv_[key] = line.substr(eq + 1);
    }
  }

  bool has(const std::string& key) {
    return kv_.find(key) != kv_.end();
  }

  std::string take_string(const std::string& key, std::string fallback) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string v = it->second;
    kv_.erase(it);
    return v;
  }

  double take_double(const std::string& key, double fallback) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(it->second, &pos);
    } catch (const std::exception&) {
      throw ConfigError(path_ + ": bad numeric value for " + key);
    }
    if (pos != it->second.size())
      throw ConfigError(path_ + ": bad numeric value for " + key);
    kv_.erase(it);
    return v;
  }

  std::uint64_t take_u64(const std::string& key, std::uint64_t fallback) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(it->second, &pos);
    } catch (const std::exception&) {
      throw ConfigError(path_ + ": bad integer value for " + key);
    }
    if (pos != it->second.size())
      throw ConfigError(path_ + ": bad integer value for " + key);
    kv_.erase(it);
    return v;
  }

  /// Call after consuming all known keys.
  void reject_unknown() const {
    if (!kv_.empty())
      throw ConfigError(path_ + ": unknown key " + kv_.begin()->first);
  }

 private:
  std::string path_;
  std::map<std::string, std::string> kv_;
};

inline SynthConfig synth_config_from_file(const std::string& path) {
  KvFile kv(path);
  SynthConfig cfg;
  cfg.num_region_classes = kv.take_u64("num_region_classes", cfg.num_region_classes);
  cfg.num_question_types = kv.take_u64("num_question_types", cfg.num_question_types);
  cfg.answers_per_type = kv.take_u64("answers_per_type", cfg.answers_per_type);
  cfg.regions_per_image = kv.take_u64("regions_per_image", cfg.regions_per_image);
  cfg.feature_dim = kv.take_u64("feature_dim", cfg.feature_dim);
  cfg.question_dim = kv.take_u64("question_dim", cfg.question_dim);
  cfg.train_size = kv.take_u64("train_size", cfg.train_size);
  cfg.test_size = kv.take_u64("test_size", cfg.test_size);
  cfg.train_skew = kv.take_double("train_skew", cfg.train_skew);
  cfg.annotators_per_question =
      kv.take_u64("annotators_per_question", cfg.annotators_per_question);
  cfg.annotator_accuracy = kv.take_double("annotator_accuracy", cfg.annotator_accuracy);
  cfg.noise_scale = kv.take_double("noise_scale", cfg.noise_scale);
  cfg.seed = kv.take_u64("seed", cfg.seed);
  kv.reject_unknown();
  cfg.validate();
  return cfg;
}

/// Phase ordering of the finetuning losses. Algorithm order introduces the
/// class-aware loss in phase 2 and the relation-aware loss in phase 3; the
/// alternative swaps them.
enum class FinetuneOrder { ClassThenRelation, RelationThenClass };

struct TrainConfig {
  double lambda_c = 4.0;
  double lambda_b = 2.0;
  double lambda_vib = 1e-3;
  std::size_t t0 = 12;
  std::size_t t1 = 14;
  std::size_t t2 = 20;
  std::size_t batch_size = 32;
  std::size_t n_prime = 20;
  std::size_t tau = 2;
  std::size_t p = 0;  // 0 = auto: ceil(regions / 2)
  std::size_t k_max = 3;
  std::size_t d_h = 64;
  std::size_t d_m = 64;
  std::size_t d_z = 16;
  AdamConfig adam;
  LrSchedule lr;
  std::uint64_t seed = 1;
  FinetuneOrder order = FinetuneOrder::ClassThenRelation;
  bool cls_stop_gradient = true;

  void validate() const {
    if (!(t0 <= t1 && t1 <= t2))
      throw ConfigError("phase bounds must satisfy t0 <= t1 <= t2");
    if (lambda_c < 0 || lambda_b < 0 || lambda_vib < 0)
      throw ConfigError("loss weights must be nonnegative");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (tau < 1) throw ConfigError("tau must be >= 1");
    if (k_max < 1) throw ConfigError("k_max must be >= 1");
    if (n_prime < 1) throw ConfigError("n_prime must be >= 1");
    if (d_h < 1 || d_m < 1 || d_z < 1) throw ConfigError("model dims must be >= 1");
  }
};

inline TrainConfig train_config_from_file(const std::string& path) {
  KvFile kv(path);
  TrainConfig cfg;
  cfg.lambda_c = kv.take_double("lambda_c", cfg.lambda_c);
  cfg.lambda_b = kv.take_double("lambda_b", cfg.lambda_b);
  cfg.lambda_vib = kv.take_double("lambda_vib", cfg.lambda_vib);
  cfg.t0 = kv.take_u64("t0", cfg.t0);
  cfg.t1 = kv.take_u64("t1", cfg.t1);
  cfg.t2 = kv.take_u64("t2", cfg.t2);
  cfg.batch_size = kv.take_u64("batch_size", cfg.batch_size);
  cfg.n_prime = kv.take_u64("n_prime", cfg.n_prime);
  cfg.tau = kv.take_u64("tau", cfg.tau);
  cfg.p = kv.take_u64("p", cfg.p);
  cfg.k_max = kv.take_u64("k_max", cfg.k_max);
  cfg.d_h = kv.take_u64("d_h", cfg.d_h);
  cfg.d_m = kv.take_u64("d_m", cfg.d_m);
  cfg.d_z = kv.take_u64("d_z", cfg.d_z);
  cfg.adam.beta1 = kv.take_double("adam_beta1", cfg.adam.beta1);
  cfg.adam.beta2 = kv.take_double("adam_beta2", cfg.adam.beta2);
  cfg.adam.eps = kv.take_double("adam_eps", cfg.adam.eps);
  cfg.lr.base = kv.take_double("lr_base", cfg.lr.base);
  cfg.lr.cap = kv.take_double("lr_cap", cfg.lr.cap);
  cfg.lr.decay_start = kv.take_u64("lr_decay_start", cfg.lr.decay_start);
  cfg.lr.decay = kv.take_double("lr_decay", cfg.lr.decay);
  cfg.lr.decay_every = kv.take_u64("lr_decay_every", cfg.lr.decay_every);
  cfg.lr.floor = kv.take_double("lr_floor", cfg.lr.floor);
  cfg.seed = kv.take_u64("seed", cfg.seed);
  cfg.cls_stop_gradient =
      kv.take_u64("cls_stop_gradient", cfg.cls_stop_gradient ? 1 : 0) != 0;
  const std::string order = kv.take_string("order", "algorithm1");
  if (order == "algorithm1") {
    cfg.order = FinetuneOrder::ClassThenRelation;
  } else if (order == "prose") {
    cfg.order = FinetuneOrder::RelationThenClass;
  } else {
    throw ConfigError(path + ": order must be algorithm1 or prose");
  }
  kv.reject_unknown();
  cfg.validate();
  return cfg;
}

/// VPL_SEED in the environment overrides the config seed.
template <typename Config>
inline void apply_seed_env(Config& cfg) {
  const char* env = std::getenv("VPL_SEED");
  if (!env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    throw ConfigError("VPL_SEED must be an unsigned integer");
  cfg.seed = v;
}

}  // namespace vpl
