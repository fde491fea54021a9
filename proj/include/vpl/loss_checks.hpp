#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vpl/gradcheck.hpp"
#include "vpl/synth.hpp"
#include "vpl/trainer.hpp"

namespace vpl {

struct LossCheckReport {
  std::string name;
  double max_rel_err = 0.0;
};

namespace detail {

struct CheckFixture {
  Dataset ds;
  ModelConfig model;
  ParamSet params;
  std::vector<StepInstance> batch;
  StepOptions opt;
  Lambdas lambdas;
  StepPlan plan;
};

/// Seeded 2-instance fixture with every branch active and the plan frozen:
/// epsilon noise, donors, the sampled negative answer, and the stop-gradient
/// constants of the class loss are all recorded once and replayed, so each
/// loss is a smooth function of the parameters.
inline CheckFixture make_fixture(std::uint64_t seed) {
  CheckFixture fx;
  SynthConfig synth;
  synth.num_region_classes = 16;
  synth.num_question_types = 2;
  synth.answers_per_type = 4;
  synth.regions_per_image = 5;
  synth.feature_dim = 6;
  synth.question_dim = 6;
  synth.train_size = 8;
  synth.test_size = 2;
  synth.train_skew = 0.6;
  synth.seed = seed;
  fx.ds = generate(synth);

  fx.model.d_v = synth.feature_dim;
  fx.model.d_q = synth.question_dim;
  fx.model.d_h = 8;
  fx.model.d_m = 6;
  fx.model.d_z = 4;
  fx.model.vocab_tokens = synth.vocab_tokens();
  fx.model.num_answers = synth.num_answers();

  Rng rng(seed + 1);
  fx.params = init_params(fx.model, rng);

  for (std::size_t i : {0u, 1u}) {
    const InstanceRecord& rec = fx.ds.train[i];
    fx.batch.push_back({view_of(rec),
                        ground_truth_from_scores(rec.soft_scores,
                                                 synth.annotators_per_question)});
  }

  fx.opt.use_vib = true;
  fx.opt.use_cls = true;
  fx.opt.use_rel = true;
  fx.opt.regions = synth.regions_per_image;
  fx.opt.d_v = synth.feature_dim;
  fx.opt.tau = 2;
  fx.opt.p = 3;
  fx.opt.k = 1;
  fx.opt.n_prime = 3;
  fx.opt.answer_token_base = synth.answer_token_base();
  fx.lambdas = Lambdas{1e-3, 4.0, 2.0};

  Rng step_rng(seed + 2);
  plan_perturbations(fx.params, fx.batch, fx.opt, step_rng, fx.plan);
  Tape tape;
  BoundParams bound(tape, fx.params, false);
  build_step_loss(tape, bound, fx.batch, fx.lambdas, fx.opt, fx.plan, &step_rng);
  return fx;
}

enum class CheckTarget { Vqa, Vib, ClassAware, RelationAware, Total };

inline double check_one(CheckFixture& fx, CheckTarget target, double eps) {
  auto component = [&](Tape& tape, const StepNodes& nodes) -> NodeId {
    switch (target) {
      case CheckTarget::Vqa: return nodes.vqa;
      case CheckTarget::Vib: return nodes.vib;
      case CheckTarget::ClassAware: return nodes.cls;
      case CheckTarget::RelationAware: return nodes.rel;
      case CheckTarget::Total: return nodes.total;
    }
    throw ContractError("unknown gradcheck target");
  };

  auto run = [&](const ParamSet& ps, ParamSet* grads) {
    Tape tape;
    BoundParams bound(tape, ps, grads != nullptr);
    StepPlan replay = fx.plan;
    replay.live = false;
    const StepNodes nodes =
        build_step_loss(tape, bound, fx.batch, fx.lambdas, fx.opt, replay, nullptr);
    const NodeId id = component(tape, nodes);
    const double value = tape.value(id).scalar_value();
    if (grads) {
      tape.backward(id);
      for (const auto& [name, pid] : bound.items()) grads->add(name, tape.grad(pid));
    }
    return value;
  };

  ParamSet analytic;
  run(fx.params, &analytic);
  auto f = [&](const ParamSet& ps) { return run(ps, nullptr); };
  return finite_diff_check(f, fx.params, analytic, eps).max_rel_err;
}

}  // namespace detail

/// Gradient check of the five losses on a seeded 2-instance batch with
/// frozen noise and negatives, every parameter coordinate tested.
inline std::vector<LossCheckReport> gradcheck_losses(double eps,
                                                     std::uint64_t seed = 97) {
  auto fx = detail::make_fixture(seed);
  using T = detail::CheckTarget;
  return {
      {"loss_vqa", detail::check_one(fx, T::Vqa, eps)},
      {"loss_vib", detail::check_one(fx, T::Vib, eps)},
      {"loss_b", detail::check_one(fx, T::RelationAware, eps)},
      {"loss_c", detail::check_one(fx, T::ClassAware, eps)},
      {"loss_total", detail::check_one(fx, T::Total, eps)},
  };
}

/// Elementwise / reduction op battery against finite differences.
inline LossCheckReport gradcheck_tensor_ops(double eps, std::uint64_t seed = 53) {
  double worst = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    Rng rng(seed + 31 * trial);
    ParamSet params;
    Tensor a = Tensor::zeros({3, 4});
    for (std::size_t i = 0; i < a.numel(); ++i) {
      const double mag = rng.uniform(0.2, 1.4);
      a[i] = rng.uniform() < 0.5 ? mag : -mag;
    }
    Tensor b = Tensor::zeros({4, 3});
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] = rng.uniform(-1, 1);
    params.add("a", a);
    params.add("b", b);

    auto run = [&](const ParamSet& ps, ParamSet* grads) {
      Tape tape;
      const NodeId av = tape.leaf(ps.at("a"), true);
      const NodeId bv = tape.leaf(ps.at("b"), true);
      const NodeId prod = tape.matmul(av, bv);
      const NodeId mix = tape.add(tape.relu(prod), tape.sigmoid(tape.scale(prod, 0.5)));
      const NodeId pooled = tape.mean_pool_cols(mix);
      const NodeId soft = tape.softmax(pooled);
      const NodeId loss = tape.sum(tape.safe_log(tape.exp(soft)));
      const double value = tape.value(loss).scalar_value();
      if (grads) {
        tape.backward(loss);
        grads->add("a", tape.grad(av));
        grads->add("b", tape.grad(bv));
      }
      return value;
    };
    ParamSet analytic;
    run(params, &analytic);
    auto f = [&](const ParamSet& ps) { return run(ps, nullptr); };
    worst = std::max(worst, finite_diff_check(f, params, analytic, eps).max_rel_err);
  }
  return {"tensor_ops", worst};
}

/// encode -> reparameterized sample -> kl chain with frozen noise.
inline LossCheckReport gradcheck_vib_chain(double eps, std::uint64_t seed = 71) {
  ModelConfig cfg;
  cfg.d_v = 4;
  cfg.d_q = 4;
  cfg.d_h = 6;
  cfg.d_m = 5;
  cfg.d_z = 4;
  cfg.vocab_tokens = 8;
  cfg.num_answers = 4;
  Rng rng(seed);
  const ParamSet params = init_params(cfg, rng);
  Tensor m = Tensor::zeros({cfg.d_m});
  Tensor eps_noise = Tensor::zeros({cfg.d_z});
  for (std::size_t i = 0; i < cfg.d_m; ++i) m[i] = rng.uniform(-1, 1);
  for (std::size_t i = 0; i < cfg.d_z; ++i) eps_noise[i] = rng.normal();

  auto run = [&](const ParamSet& ps, ParamSet* grads) {
    Tape tape;
    BoundParams bound(tape, ps, grads != nullptr);
    const auto latent = encode_latent(tape, bound, tape.constant(m));
    const NodeId z = sample_z_with(tape, latent, eps_noise);
    const NodeId loss = tape.add(kl_loss(tape, {latent}),
                                 tape.scale(tape.sum(tape.hadamard(z, z)), 0.1));
    const double value = tape.value(loss).scalar_value();
    if (grads) {
      tape.backward(loss);
      for (const auto& [name, id] : bound.items()) grads->add(name, tape.grad(id));
    }
    return value;
  };
  ParamSet analytic;
  run(params, &analytic);
  auto f = [&](const ParamSet& ps) { return run(ps, nullptr); };
  return {"vib_chain", finite_diff_check(f, params, analytic, eps).max_rel_err};
}

}  // namespace vpl
