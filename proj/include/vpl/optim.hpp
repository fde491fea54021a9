#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/model.hpp"
#include "vpl/params.hpp"

namespace vpl {

/// The four loss branches of the collaborative objective.
enum class LossKind { Vqa, Vib, ClassAware, RelationAware };

/// Loss-to-group map: which parameter groups each loss branch may update.
inline const std::set<std::string>& loss_groups(LossKind loss) {
  static const std::set<std::string> vqa = {"m", "vib", "c"};
  static const std::set<std::string> vib = {"m", "vib"};
  static const std::set<std::string> cls = {"m", "vib", "c"};
  static const std::set<std::string> rel = {"m", "vib", "a"};
  switch (loss) {
    case LossKind::Vqa: return vqa;
    case LossKind::Vib: return vib;
    case LossKind::ClassAware: return cls;
    case LossKind::RelationAware: return rel;
  }
  throw ContractError("loss_groups: unknown loss kind");
}

/// Disjoint partition of the parameter set into the four named groups.
class ParamGroups {
 public:
  explicit ParamGroups(const ParamSet& params) {
    for (const auto& [name, t] : params) {
      const std::string group = param_group_of(name);
      if (group != "m" && group != "vib" && group != "c" && group != "a") {
        throw ContractError("parameter " + name + " is not assigned to any group");
      }
      members_[group].push_back(name);
    }
  }

  const std::vector<std::string>& members(const std::string& group) const {
    auto it = members_.find(group);
    if (it == members_.end())
      throw ContractError("unknown parameter group " + group);
    return it->second;
  }

  /// Union of the groups of every active loss.
  static std::set<std::string> active_groups(const std::vector<LossKind>& losses) {
    std::set<std::string> out;
    for (LossKind loss : losses) {
      const auto& groups = loss_groups(loss);
      out.insert(groups.begin(), groups.end());
    }
    return out;
  }

 private:
  std::map<std::string, std::vector<std::string>> members_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

/// Adam with bias correction. One shared step counter; parameters outside
/// the active group set are not touched at all, so they stay bit-identical.
class Adam {
 public:
  Adam(const ParamSet& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& [name, t] : params) {
      m_.add(name, Tensor::zeros(t.shape()));
      v_.add(name, Tensor::zeros(t.shape()));
    }
  }

  void step(ParamSet& params, const ParamSet& grads, double lr,
            const std::set<std::string>& active_groups) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, param] : params) {
      if (!active_groups.count(param_group_of(name))) continue;
      const Tensor& g = grads.at(name);
      if (!g.same_shape(param)) {
        throw ShapeError("adam step: gradient shape " + shape_str(g.shape()) +
                         " does not match parameter " + name + " " +
                         shape_str(param.shape()));
      }
      Tensor& m = m_.at(name);
      Tensor& v = v_.at(name);
      for (std::size_t i = 0; i < param.numel(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  ParamSet m_;
  ParamSet v_;
  std::size_t t_ = 0;
};

struct LrSchedule {
  double base = 2.5e-5;        // per-epoch warm ramp increment
  double cap = 1e-4;
  std::size_t decay_start = 16;  // last epoch before decay kicks in
  double decay = 0.25;
  std::size_t decay_every = 2;
  double floor = 1e-6;

  /// Warm ramp min(base * epoch, cap), then geometric decay after
  /// decay_start, floored.
  double at(std::size_t epoch) const {
    if (epoch < 1) throw ContractError("lr_schedule: epoch starts at 1");
    if (epoch <= decay_start)
      return std::min(base * static_cast<double>(epoch), cap);
    const std::size_t periods =
        (epoch - decay_start + decay_every - 1) / decay_every;
    return std::max(floor, cap * std::pow(decay, static_cast<double>(periods)));
  }
};

}  // namespace vpl
