#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "vpl/config.hpp"
#include "vpl/discriminators.hpp"
#include "vpl/errors.hpp"
#include "vpl/graph.hpp"
#include "vpl/model.hpp"
#include "vpl/optim.hpp"
#include "vpl/params.hpp"
#include "vpl/perturb.hpp"
#include "vpl/synth.hpp"
#include "vpl/vib.hpp"

namespace vpl {

/// Training-time view of an instance. The generator diagnostics (region
/// classes, salient index) are not reachable through it; only the oracle
/// baseline and the inspect dump read those.
struct TrainView {
  const std::vector<float>* features = nullptr;
  std::uint32_t question_type = 0;
  const std::vector<std::uint32_t>* tokens = nullptr;
  const std::vector<float>* soft_scores = nullptr;
};

inline TrainView view_of(const InstanceRecord& rec) {
  TrainView v;
  v.features = &rec.features;
  v.question_type = rec.question_type;
  v.tokens = &rec.tokens;
  v.soft_scores = &rec.soft_scores;
  return v;
}

struct Lambdas {
  double vib = 0.0;
  double cls = 0.0;
  double rel = 0.0;
};

struct StepInstance {
  TrainView view;
  std::vector<std::size_t> gt;
};

struct StepOptions {
  bool use_vib = false;
  bool use_cls = false;
  bool use_rel = false;
  bool cls_stop_gradient = true;  // false: gradients through both branches
  std::size_t regions = 0;
  std::size_t d_v = 0;
  std::size_t tau = 2;
  std::size_t p = 4;
  std::size_t k = 1;
  std::size_t n_prime = 20;
  std::size_t answer_token_base = 0;
};

/// Everything random or parameter-dependent that a step fixes up front, so
/// the loss can be replayed at perturbed parameters (finite differences)
/// with identical noise, donors, negatives, and stop-gradient constants.
struct StepPlan {
  struct PerInstance {
    std::vector<float> hard;   // V-hat features; empty when the branch is off
    std::vector<float> soft;   // V-tilde features
    Tensor eps;                // one noise draw per instance, shared by all branches
    std::vector<double> frozen_orig_probs;  // stop-gradient L_c constants
    std::size_t a_c = 0;
    PerturbedPair provenance;
  };
  std::vector<PerInstance> instances;
  bool live = true;  // live: fill while building; replay: reuse as recorded
};

struct StepNodes {
  NodeId total = 0;
  NodeId vqa = 0;
  NodeId vib = 0;
  NodeId cls = 0;
  NodeId rel = 0;
  bool has_vib = false;
  bool has_cls = false;
  bool has_rel = false;
  std::size_t rel_instances = 0;  // after degenerate skips
};

/// Scores the batch with the current parameters and constructs the
/// hard/soft perturbation features. Consumes the generator once per
/// instance in index order (donor draw, then region column draws).
inline void plan_perturbations(const ParamSet& params,
                               const std::vector<StepInstance>& batch,
                               const StepOptions& opt, Rng& rng,
                               StepPlan& plan) {
  const std::size_t b = batch.size();
  plan.instances.resize(b);

  std::vector<ContributionScore> scores(b);
  std::vector<std::vector<double>> joints(b);
  for (std::size_t i = 0; i < b; ++i) {
    const TrainView& v = batch[i].view;
    scores[i] = contribution_scores(params, *v.features, opt.regions, opt.d_v,
                                    *v.tokens, batch[i].gt, i);
    joints[i] = joint_vector(*v.features, opt.regions, opt.d_v,
                             question_encoding_values(params, *v.tokens));
  }
  const auto similarity = instance_similarity(joints);

  for (std::size_t i = 0; i < b; ++i) {
    const auto draw = sample_substitute(similarity, i, opt.regions, opt.k, rng);
    const TrainView& donor = batch[draw.donor].view;
    auto pair = make_perturbed_pair(*batch[i].view.features, opt.d_v,
                                    scores[i].scores, opt.tau, opt.p, opt.k,
                                    *donor.features, draw.donor_regions,
                                    draw.donor);
    auto& slot = plan.instances[i];
    slot.hard = pair.hard;
    slot.soft = pair.soft;
    slot.provenance = std::move(pair);
  }
}

/// Builds the collaborative loss for one batch on the given tape.
///
/// Live mode (plan.live, rng != nullptr) draws epsilon noise and negative
/// answers as it goes and records them into the plan; replay mode reuses the
/// recorded values so the objective is a smooth function of the parameters.
///
/// Per instance the original branch is always built; the hard branch exists
/// for the class or relation loss, the soft branch only for the relation
/// loss. Skipping inactive branches keeps a zero-weighted run bit-identical
/// to one that never had the branch.
///
/// One epsilon per instance per step, shared by all three branches. Sharing
/// is load-bearing: with per-branch noise a vision-blind model can satisfy
/// the class-aware loss by inflating sigma until the two branches decouple
/// through the noise alone; with shared noise the branch predictions can
/// only differ through the perturbed features.
inline StepNodes build_step_loss(Tape& tape, const BoundParams& bound,
                                 const std::vector<StepInstance>& batch,
                                 const Lambdas& lambdas, const StepOptions& opt,
                                 StepPlan& plan, Rng* rng) {
  if (batch.empty()) throw ContractError("build_step_loss: empty batch");
  if (plan.live && !rng)
    throw ContractError("build_step_loss: live mode needs a generator");
  if (plan.instances.size() != batch.size()) {
    if (!plan.live)
      throw ContractError("build_step_loss: replay plan is incomplete");
    plan.instances.resize(batch.size());
  }
  const bool need_hard = opt.use_cls || opt.use_rel;
  const bool need_soft = opt.use_rel;

  std::vector<NodeId> orig_probs(batch.size());
  std::vector<Tensor> targets(batch.size());
  std::vector<LatentNodes> latents;
  std::vector<Tensor> cls_constants;
  std::vector<NodeId> cls_orig_nodes;
  std::vector<NodeId> hard_probs;
  std::vector<TripletNodes> triplets;
  latents.reserve(batch.size());

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainView& v = batch[i].view;
    auto& slot = plan.instances[i];

    auto branch = [&](const std::vector<float>& feats, NodeId question) {
      const NodeId raw =
          tape.constant(region_tensor(feats.data(), opt.regions, opt.d_v));
      const NodeId m =
          fuse(tape, bound, encode_image(tape, bound, raw), question);
      const LatentNodes latent = encode_latent(tape, bound, m);
      NodeId z;
      if (plan.live && slot.eps.numel() == 0) {
        auto [zid, eps] = sample_z(tape, latent, *rng);
        z = zid;
        slot.eps = std::move(eps);
      } else {
        z = sample_z_with(tape, latent, slot.eps);
      }
      return std::pair<NodeId, LatentNodes>(z, latent);
    };

    const NodeId question = encode_question(tape, bound, *v.tokens);
    auto [z, latent] = branch(*v.features, question);
    latents.push_back(latent);
    orig_probs[i] = classify(tape, bound, z);

    Tensor y = Tensor::zeros({v.soft_scores->size()});
    for (std::size_t k = 0; k < y.numel(); ++k)
      y[k] = static_cast<double>((*v.soft_scores)[k]);
    targets[i] = std::move(y);

    NodeId z_hard = 0;
    if (need_hard) {
      if (slot.hard.empty())
        throw ContractError("build_step_loss: hard branch requested without a plan");
      auto [zh, lh] = branch(slot.hard, question);
      z_hard = zh;
      if (opt.use_cls) {
        if (plan.live) {
          const Tensor& p = tape.value(orig_probs[i]);
          slot.frozen_orig_probs.assign(p.data().begin(), p.data().end());
        }
        if (opt.cls_stop_gradient) {
          cls_constants.push_back(Tensor::from_vector(slot.frozen_orig_probs));
        } else {
          cls_orig_nodes.push_back(orig_probs[i]);
        }
        hard_probs.push_back(classify(tape, bound, z_hard));
      }
    }

    if (need_soft) {
      if (slot.soft.empty())
        throw ContractError("build_step_loss: soft branch requested without a plan");
      auto [z_soft, ls] = branch(slot.soft, question);
      TripletNodes triplet;
      if (plan.live) {
        if (slot.frozen_orig_probs.empty()) {
          const Tensor& p = tape.value(orig_probs[i]);
          slot.frozen_orig_probs.assign(p.data().begin(), p.data().end());
        }
        const auto negatives = negative_candidates(slot.frozen_orig_probs,
                                                   batch[i].gt, opt.n_prime);
        triplet = build_triplet(tape, bound, z, z_soft, z_hard, batch[i].gt,
                                negatives, opt.answer_token_base, *rng);
        slot.a_c = triplet.negative_answer;
      } else {
        triplet = build_triplet_with(tape, bound, z, z_soft, z_hard,
                                     batch[i].gt, slot.a_c,
                                     opt.answer_token_base);
      }
      // degenerate triplet vectors drop this instance from the relation
      // term rather than aborting the epoch
      bool degenerate = false;
      for (NodeId h : {triplet.original, triplet.soft, triplet.hard}) {
        const Tensor& hv = tape.value(h);
        double norm = 0.0;
        for (std::size_t d = 0; d < hv.numel(); ++d) norm += hv[d] * hv[d];
        if (std::sqrt(norm) < kDegenerateNorm) degenerate = true;
      }
      if (degenerate) {
        std::cerr << "[vpl] warning: degenerate triplet, instance " << i
                  << " skipped in relation loss\n";
      } else {
        triplets.push_back(triplet);
      }
    }
  }

  StepNodes nodes;
  nodes.vqa = vqa_loss(tape, orig_probs, targets);
  nodes.total = nodes.vqa;
  if (opt.use_vib) {
    nodes.vib = kl_loss(tape, latents);
    nodes.has_vib = true;
    nodes.total = tape.add(nodes.total, tape.scale(nodes.vib, lambdas.vib));
  }
  if (opt.use_cls) {
    nodes.cls = opt.cls_stop_gradient
                    ? class_loss(tape, cls_constants, hard_probs)
                    : class_loss_both(tape, cls_orig_nodes, hard_probs);
    nodes.has_cls = true;
    nodes.total = tape.add(nodes.total, tape.scale(nodes.cls, lambdas.cls));
  }
  if (opt.use_rel && !triplets.empty()) {
    nodes.rel = relation_loss(tape, triplets);
    nodes.has_rel = true;
    nodes.rel_instances = triplets.size();
    nodes.total = tape.add(nodes.total, tape.scale(nodes.rel, lambdas.rel));
  }
  plan.live = false;  // the recorded plan is now complete
  return nodes;
}

// ---- evaluation -------------------------------------------------------------

enum class EvalMode { VqaAccuracy, TrainTarget };

struct Prediction {
  std::size_t answer = 0;
  std::vector<double> mu;
};

/// Deterministic inference: encode, fuse, take the mean head, classify,
/// argmax (ties toward the lower answer id). Never samples.
inline Prediction predict_instance(const ParamSet& params, const TrainView& v,
                                   std::size_t regions, std::size_t d_v) {
  Tape tape;
  BoundParams bound(tape, params, /*requires_grad=*/false);
  const NodeId raw = tape.constant(region_tensor(v.features->data(), regions, d_v));
  const NodeId m = fuse(tape, bound, encode_image(tape, bound, raw),
                        encode_question(tape, bound, *v.tokens));
  const NodeId mu = inference_repr(tape, bound, m);
  const NodeId probs = classify(tape, bound, mu);
  const Tensor& p = tape.value(probs);
  Prediction out;
  for (std::size_t k = 1; k < p.numel(); ++k)
    if (p[k] > p[out.answer]) out.answer = k;
  const Tensor& muv = tape.value(mu);
  out.mu.assign(muv.data().begin(), muv.data().end());
  return out;
}

struct EvalReport {
  double overall = 0.0;
  std::vector<double> per_type;
  std::vector<std::size_t> per_type_counts;
  std::vector<std::size_t> predictions;
};

inline EvalReport evaluate(const ParamSet& params, const Dataset& ds,
                           const std::vector<InstanceRecord>& split,
                           EvalMode mode) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  const std::size_t q_types = ds.config.num_question_types;
  EvalReport report;
  report.per_type.assign(q_types, 0.0);
  report.per_type_counts.assign(q_types, 0);
  report.predictions.reserve(split.size());
  for (const auto& rec : split) {
    const TrainView v = view_of(rec);
    const Prediction pred = predict_instance(params, v, ds.config.regions_per_image,
                                             ds.config.feature_dim);
    double credit;
    if (mode == EvalMode::VqaAccuracy) {
      credit = credit_from_scores(rec.soft_scores, pred.answer,
                                  ds.config.annotators_per_question);
    } else {
      credit = static_cast<double>(rec.soft_scores[pred.answer]);
    }
    report.overall += credit;
    report.per_type[rec.question_type] += credit;
    ++report.per_type_counts[rec.question_type];
    report.predictions.push_back(pred.answer);
  }
  report.overall /= static_cast<double>(split.size());
  for (std::size_t q = 0; q < q_types; ++q) {
    if (report.per_type_counts[q])
      report.per_type[q] /= static_cast<double>(report.per_type_counts[q]);
  }
  return report;
}

// ---- baselines --------------------------------------------------------------

struct BaselineReport {
  double train = 0.0;
  double test = 0.0;
};

/// Answers every question with its type's train-split head answer. Reads
/// nothing but train-split statistics.
inline BaselineReport prior_only_baseline(const Dataset& ds) {
  const std::size_t q_types = ds.config.num_question_types;
  const std::size_t answers = ds.config.num_answers();
  std::vector<std::vector<std::size_t>> counts(q_types,
                                               std::vector<std::size_t>(answers, 0));
  for (const auto& rec : ds.train)
    ++counts[rec.question_type][ds.majority_answer(rec)];
  std::vector<std::size_t> head(q_types, 0);
  for (std::size_t q = 0; q < q_types; ++q) {
    for (std::size_t k = 1; k < answers; ++k)
      if (counts[q][k] > counts[q][head[q]]) head[q] = k;
  }
  auto score = [&](const std::vector<InstanceRecord>& split) {
    double acc = 0.0;
    for (const auto& rec : split)
      acc += ds.answer_credit(rec, head[rec.question_type]);
    return acc / static_cast<double>(split.size());
  };
  return {score(ds.train), score(ds.test)};
}

/// Reads the generator's salient diagnostics directly: the salient region's
/// latent class is the answer id under the generative bijection.
inline BaselineReport oracle_baseline(const Dataset& ds) {
  auto score = [&](const std::vector<InstanceRecord>& split) {
    double acc = 0.0;
    for (const auto& rec : split) {
      const std::size_t answer = rec.region_classes[rec.salient_index];
      acc += answer < ds.config.num_answers() ? ds.answer_credit(rec, answer) : 0.0;
    }
    return acc / static_cast<double>(split.size());
  };
  return {score(ds.train), score(ds.test)};
}

// ---- the training loop ------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string phase;
  double loss_vqa = 0.0;
  double loss_vib = 0.0;
  double loss_b = 0.0;
  double loss_c = 0.0;
  double loss_total = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::vector<double> test_acc_per_type;
  double lr = 0.0;
  std::size_t k = 0;
};

struct TrainResult {
  ParamSet params;
  std::vector<EpochMetrics> history;
  ModelConfig model;
};

class Trainer {
 public:
  Trainer(const Dataset& ds, TrainConfig cfg) : ds_(ds), cfg_(cfg) {
    cfg_.validate();
    model_.d_v = ds.config.feature_dim;
    model_.d_q = ds.config.question_dim;
    model_.d_h = cfg_.d_h;
    model_.d_m = cfg_.d_m;
    model_.d_z = cfg_.d_z;
    model_.vocab_tokens = ds.config.vocab_tokens();
    model_.num_answers = ds.config.num_answers();
    p_effective_ = cfg_.p != 0 ? cfg_.p : (ds.config.regions_per_image + 1) / 2;
    validate_compatibility();
  }

  const ModelConfig& model_config() const { return model_; }
  std::size_t effective_p() const { return p_effective_; }

  bool finetune_admits_cls(std::size_t epoch) const {
    const bool second = epoch > cfg_.t0 && epoch <= cfg_.t1;
    const bool third = epoch > cfg_.t1;
    return cfg_.order == FinetuneOrder::ClassThenRelation ? (second || third) : third;
  }

  bool finetune_admits_rel(std::size_t epoch) const {
    const bool second = epoch > cfg_.t0 && epoch <= cfg_.t1;
    const bool third = epoch > cfg_.t1;
    return cfg_.order == FinetuneOrder::ClassThenRelation ? third : (second || third);
  }

  TrainResult run() {
    Rng rng(cfg_.seed);
    ParamSet params = init_params(model_, rng);
    Adam adam(params, cfg_.adam);
    ParamGroups groups(params);

    std::vector<EpochMetrics> history;
    std::vector<std::size_t> order(ds_.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= cfg_.t2; ++epoch) {
      const double lr = cfg_.lr.at(epoch);
      const bool use_vib = cfg_.lambda_vib != 0.0;
      const bool use_cls = cfg_.lambda_c != 0.0 && finetune_admits_cls(epoch);
      const bool use_rel = cfg_.lambda_b != 0.0 && finetune_admits_rel(epoch);
      const bool perturbing = use_cls || use_rel;
      const std::size_t k_epoch =
          perturbing ? std::min(k_schedule(epoch, cfg_.t0, cfg_.k_max), cfg_.tau) : 0;

      // in-place Fisher-Yates on the shared training stream
      for (std::size_t t = order.size(); t-- > 1;) {
        const std::size_t j = rng.uniform_index(t + 1);
        std::swap(order[t], order[j]);
      }

      EpochMetrics em;
      em.epoch = epoch;
      em.phase = epoch <= cfg_.t0 ? "pretrain"
                 : epoch <= cfg_.t1 ? "finetune-c" : "finetune-full";
      em.lr = lr;
      em.k = k_epoch;

      std::size_t steps = 0, vib_steps = 0, cls_steps = 0, rel_steps = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
        const std::size_t stop = std::min(order.size(), start + cfg_.batch_size);
        std::vector<StepInstance> batch;
        batch.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i) {
          const InstanceRecord& rec = ds_.train[order[i]];
          batch.push_back({view_of(rec),
                           ground_truth_from_scores(
                               rec.soft_scores, ds_.config.annotators_per_question)});
        }

        StepOptions opt = step_options(use_vib, use_cls, use_rel, k_epoch);
        StepPlan plan;
        if (perturbing) plan_perturbations(params, batch, opt, rng, plan);

        Tape tape;
        BoundParams bound(tape, params, /*requires_grad=*/true);
        const StepNodes nodes =
            build_step_loss(tape, bound, batch, lambdas(), opt, plan, &rng);
        tape.backward(nodes.total);
        ParamSet grads;
        for (const auto& [name, id] : bound.items()) grads.add(name, tape.grad(id));

        std::vector<LossKind> active = {LossKind::Vqa};
        if (use_vib) active.push_back(LossKind::Vib);
        if (use_cls) active.push_back(LossKind::ClassAware);
        if (use_rel) active.push_back(LossKind::RelationAware);
        adam.step(params, grads, lr, ParamGroups::active_groups(active));

        em.loss_vqa += tape.value(nodes.vqa).scalar_value();
        em.loss_total += tape.value(nodes.total).scalar_value();
        if (nodes.has_vib) {
          em.loss_vib += tape.value(nodes.vib).scalar_value();
          ++vib_steps;
        }
        if (nodes.has_cls) {
          em.loss_c += tape.value(nodes.cls).scalar_value();
          ++cls_steps;
        }
        if (nodes.has_rel) {
          em.loss_b += tape.value(nodes.rel).scalar_value();
          ++rel_steps;
        }
        ++steps;
      }

      em.loss_vqa /= static_cast<double>(steps);
      em.loss_total /= static_cast<double>(steps);
      if (vib_steps) em.loss_vib /= static_cast<double>(vib_steps);
      if (cls_steps) em.loss_c /= static_cast<double>(cls_steps);
      if (rel_steps) em.loss_b /= static_cast<double>(rel_steps);

      const EvalReport train_eval =
          evaluate(params, ds_, ds_.train, EvalMode::VqaAccuracy);
      const EvalReport test_eval =
          evaluate(params, ds_, ds_.test, EvalMode::VqaAccuracy);
      em.train_acc = train_eval.overall;
      em.test_acc = test_eval.overall;
      em.test_acc_per_type = test_eval.per_type;
      history.push_back(std::move(em));
    }

    TrainResult result;
    result.params = std::move(params);
    result.history = std::move(history);
    result.model = model_;
    return result;
  }

  StepOptions step_options(bool use_vib, bool use_cls, bool use_rel,
                           std::size_t k_epoch) const {
    StepOptions opt;
    opt.use_vib = use_vib;
    opt.use_cls = use_cls;
    opt.use_rel = use_rel;
    opt.cls_stop_gradient = cfg_.cls_stop_gradient;
    opt.regions = ds_.config.regions_per_image;
    opt.d_v = ds_.config.feature_dim;
    opt.tau = cfg_.tau;
    opt.p = p_effective_;
    opt.k = k_epoch;
    opt.n_prime = cfg_.n_prime;
    opt.answer_token_base = ds_.config.answer_token_base();
    return opt;
  }

  Lambdas lambdas() const {
    return Lambdas{cfg_.lambda_vib, cfg_.lambda_c, cfg_.lambda_b};
  }

 private:
  void validate_compatibility() const {
    const std::size_t n = ds_.config.regions_per_image;
    const bool perturb_phases =
        cfg_.t2 > cfg_.t0 && (cfg_.lambda_c != 0.0 || cfg_.lambda_b != 0.0);
    if (!perturb_phases) return;
    if (ds_.config.feature_dim != ds_.config.question_dim) {
      throw ConfigError(
          "perturbation phases need feature_dim == question_dim for the "
          "joint similarity vector");
    }
    if (cfg_.tau > n)
      throw ConfigError("tau exceeds the number of regions");
    if (p_effective_ < std::min(cfg_.k_max, cfg_.tau))
      throw ConfigError("p is below the largest scheduled K");
    if (p_effective_ - 1 > n - cfg_.tau)
      throw ConfigError("p - K can exceed the non-salient region count");
    if (cfg_.batch_size > ds_.train.size())
      throw ConfigError("batch_size exceeds the training split");
    if (ds_.train.size() % cfg_.batch_size == 1)
      throw ConfigError("trailing batch of size 1 cannot sample a donor");
    if (cfg_.n_prime + 1 > ds_.config.num_answers())
      throw ConfigError("n_prime leaves no room for ground-truth answers");
  }

  const Dataset& ds_;
  TrainConfig cfg_;
  ModelConfig model_;
  std::size_t p_effective_ = 0;
};

}  // namespace vpl
