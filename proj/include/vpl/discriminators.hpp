#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/graph.hpp"
#include "vpl/model.hpp"
#include "vpl/rng.hpp"

namespace vpl {

/// The n_prime highest-probability answers excluding every ground-truth
/// answer, in descending probability with ties broken toward the lower id.
inline std::vector<std::size_t> negative_candidates(
    const std::vector<double>& prediction, const std::vector<std::size_t>& gt,
    std::size_t n_prime) {
  if (n_prime < 1) throw ContractError("negative_candidates: n_prime must be >= 1");
  std::vector<char> is_gt(prediction.size(), 0);
  for (std::size_t k : gt) {
    if (k >= prediction.size())
      throw VocabularyError("negative_candidates: ground-truth id out of range");
    is_gt[k] = 1;
  }
  std::vector<std::size_t> pool;
  for (std::size_t k = 0; k < prediction.size(); ++k)
    if (!is_gt[k]) pool.push_back(k);
  if (pool.size() < n_prime) {
    throw VocabularyError("negative_candidates: only " +
                          std::to_string(pool.size()) +
                          " non-ground-truth answers for n_prime = " +
                          std::to_string(n_prime));
  }
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
    return prediction[a] > prediction[b];
  });
  pool.resize(n_prime);
  return pool;
}

/// The three joint answer-aware representations of one instance.
struct TripletNodes {
  NodeId original = 0;      // h
  NodeId soft = 0;          // h-tilde
  NodeId hard = 0;          // h-hat
  std::size_t negative_answer = 0;  // the a_c drawn for the hard branch
};

/// Applies the answer-space map f_a(x) = W x + b to an embedded answer.
inline NodeId answer_map(Tape& tape, const BoundParams& p, NodeId embedded) {
  return tape.add(tape.matvec(p.at("a.w"), embedded), p.at("a.b"));
}

/// Builds h = z (.) f_a(mean gt embedding), its soft-perturbed twin, and the
/// hard-perturbed branch paired with one negative answer drawn uniformly
/// from the candidate list.
inline TripletNodes build_triplet(Tape& tape, const BoundParams& p, NodeId z,
                                  NodeId z_soft, NodeId z_hard,
                                  const std::vector<std::size_t>& gt_answers,
                                  const std::vector<std::size_t>& negatives,
                                  std::size_t answer_token_base, Rng& rng) {
  if (gt_answers.empty()) throw ContractError("build_triplet: empty ground-truth set");
  if (negatives.empty()) throw ContractError("build_triplet: empty negative candidates");

  std::vector<std::size_t> gt_tokens;
  gt_tokens.reserve(gt_answers.size());
  for (std::size_t k : gt_answers) gt_tokens.push_back(answer_token_base + k);

  TripletNodes out;
  out.negative_answer = negatives[rng.uniform_index(negatives.size())];
  const NodeId fa_gt = answer_map(tape, p, tape.rows_mean(p.at("m.emb"), gt_tokens));
  const NodeId fa_neg = answer_map(
      tape, p,
      tape.rows_mean(p.at("m.emb"), {answer_token_base + out.negative_answer}));
  out.original = tape.hadamard(z, fa_gt);
  out.soft = tape.hadamard(z_soft, fa_gt);
  out.hard = tape.hadamard(z_hard, fa_neg);
  return out;
}

/// build_triplet with a caller-fixed negative answer; the replay path of the
/// gradient checks, which must hold a_c constant across re-evaluations.
inline TripletNodes build_triplet_with(Tape& tape, const BoundParams& p, NodeId z,
                                       NodeId z_soft, NodeId z_hard,
                                       const std::vector<std::size_t>& gt_answers,
                                       std::size_t negative_answer,
                                       std::size_t answer_token_base) {
  if (gt_answers.empty())
    throw ContractError("build_triplet_with: empty ground-truth set");
  std::vector<std::size_t> gt_tokens;
  gt_tokens.reserve(gt_answers.size());
  for (std::size_t k : gt_answers) gt_tokens.push_back(answer_token_base + k);

  TripletNodes out;
  out.negative_answer = negative_answer;
  const NodeId fa_gt = answer_map(tape, p, tape.rows_mean(p.at("m.emb"), gt_tokens));
  const NodeId fa_neg = answer_map(
      tape, p, tape.rows_mean(p.at("m.emb"), {answer_token_base + negative_answer}));
  out.original = tape.hadamard(z, fa_gt);
  out.soft = tape.hadamard(z_soft, fa_gt);
  out.hard = tape.hadamard(z_hard, fa_neg);
  return out;
}

namespace detail {

inline void require_nondegenerate(Tape& tape, NodeId id, std::size_t instance,
                                  const char* element) {
  const Tensor& v = tape.value(id);
  double acc = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) acc += v[i] * v[i];
  if (std::sqrt(acc) < kDegenerateNorm) {
    throw DegenerateVectorError("relation_loss: triplet " +
                                std::to_string(instance) + " element " +
                                element + " is degenerate");
  }
}

}  // namespace detail

/// Intra-instance invariant loss
///   (1/B) sum_i log(2 - e^{cos(h, h~)} / (e^{cos(h, h~)} + e^{cos(h~, h^)})).
/// The ratio is sigmoid(cos(h, h~) - cos(h~, h^)), so every per-instance
/// term lies strictly inside (0, ln 2).
inline NodeId relation_loss(Tape& tape, const std::vector<TripletNodes>& triplets) {
  if (triplets.empty()) throw ContractError("relation_loss: empty batch");
  NodeId acc = 0;
  bool first = true;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const TripletNodes& t = triplets[i];
    detail::require_nondegenerate(tape, t.original, i, "h");
    detail::require_nondegenerate(tape, t.soft, i, "h_tilde");
    detail::require_nondegenerate(tape, t.hard, i, "h_hat");
    const NodeId keep = tape.cosine(t.original, t.soft);
    const NodeId flip = tape.cosine(t.soft, t.hard);
    const NodeId ratio = tape.sigmoid(tape.add(keep, tape.scale(flip, -1.0)));
    const NodeId term = tape.safe_log(tape.add_scalar(tape.scale(ratio, -1.0), 2.0));
    acc = first ? term : tape.add(acc, term);
    first = false;
  }
  return tape.scale(acc, 1.0 / static_cast<double>(triplets.size()));
}

/// Inter-instance discrimination loss
///   (1/B) sum_i sum_k p(a_k | m_i) log p(a_k | m^_i).
/// The original-branch probabilities enter as constants (stop-gradient);
/// only the hard branch is optimized, so minimizing pushes the perturbed
/// prediction away from the clean one without degrading the clean branch.
inline NodeId class_loss(Tape& tape,
                         const std::vector<Tensor>& original_probs,
                         const std::vector<NodeId>& hard_prob_nodes) {
  if (hard_prob_nodes.empty() ||
      hard_prob_nodes.size() != original_probs.size())
    throw ShapeError("class_loss: probability batches must pair up");
  NodeId acc = 0;
  bool first = true;
  for (std::size_t i = 0; i < hard_prob_nodes.size(); ++i) {
    require_same_shape(original_probs[i], tape.value(hard_prob_nodes[i]),
                       "class_loss");
    const NodeId term = tape.sum(tape.hadamard(
        tape.constant(original_probs[i]), tape.safe_log(hard_prob_nodes[i])));
    acc = first ? term : tape.add(acc, term);
    first = false;
  }
  return tape.scale(acc, 1.0 / static_cast<double>(hard_prob_nodes.size()));
}

/// class_loss with gradients through both branches: the clean-branch
/// probabilities are live graph nodes. A purely shared (non-visual) logit
/// shift then moves p and p-hat together and cancels in the loss, so only
/// pathways that tell the two branches apart can reduce it.
inline NodeId class_loss_both(Tape& tape,
                              const std::vector<NodeId>& original_prob_nodes,
                              const std::vector<NodeId>& hard_prob_nodes) {
  if (hard_prob_nodes.empty() ||
      hard_prob_nodes.size() != original_prob_nodes.size())
    throw ShapeError("class_loss_both: probability batches must pair up");
  NodeId acc = 0;
  bool first = true;
  for (std::size_t i = 0; i < hard_prob_nodes.size(); ++i) {
    require_same_shape(tape.value(original_prob_nodes[i]),
                       tape.value(hard_prob_nodes[i]), "class_loss_both");
    const NodeId term = tape.sum(tape.hadamard(
        original_prob_nodes[i], tape.safe_log(hard_prob_nodes[i])));
    acc = first ? term : tape.add(acc, term);
    first = false;
  }
  return tape.scale(acc, 1.0 / static_cast<double>(hard_prob_nodes.size()));
}

}  // namespace vpl
