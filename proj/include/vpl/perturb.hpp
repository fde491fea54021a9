#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/graph.hpp"
#include "vpl/model.hpp"
#include "vpl/rng.hpp"
#include "vpl/vib.hpp"

namespace vpl {

struct ContributionScore {
  std::vector<double> scores;  // one per region
  std::size_t instance_id = 0;
};

/// Collapses an input-feature gradient (d_v x N) into per-region scores by
/// summing each column.
inline std::vector<double> region_scores_from_grad(const Tensor& grad) {
  const std::size_t d_v = grad.rows(), n = grad.cols();
  std::vector<double> scores(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t f = 0; f < d_v; ++f) acc += grad.at(f, j);
    scores[j] = acc;
  }
  return scores;
}

/// Gradient-based region contribution scores: the gradient of the summed
/// class probabilities of `target_answers` with respect to the raw region
/// features, summed over feature coordinates per region.
///
/// The target sum runs over the instance's ground-truth answers, not the
/// whole vocabulary: softmax probabilities sum to one, so the all-answer sum
/// is a constant with an identically zero gradient. Restricting to the
/// supervised answers is what makes the saliency informative.
///
/// The pass is a pure read: parameters enter as constants, the scoring graph
/// is discarded, and the deterministic mean head feeds the classifier so no
/// generator state is consumed.
inline ContributionScore contribution_scores(
    const ParamSet& params, const std::vector<float>& features,
    std::size_t n_regions, std::size_t d_v,
    const std::vector<std::uint32_t>& tokens,
    const std::vector<std::size_t>& target_answers, std::size_t instance_id = 0) {
  if (target_answers.empty())
    throw ContractError("contribution_scores: empty target answer set");
  Tape tape;
  BoundParams bound(tape, params, /*requires_grad=*/false);
  const NodeId raw = tape.leaf(region_tensor(features.data(), n_regions, d_v),
                               /*requires_grad=*/true);
  const NodeId enc = encode_image(tape, bound, raw);
  const NodeId q = encode_question(tape, bound, tokens);
  const NodeId m = fuse(tape, bound, enc, q);
  const NodeId repr = inference_repr(tape, bound, m);
  const NodeId probs = classify(tape, bound, repr);

  Tensor mask = Tensor::zeros(tape.value(probs).shape());
  for (std::size_t k : target_answers) {
    if (k >= mask.numel())
      throw VocabularyError("contribution_scores: answer id out of range");
    mask[k] = 1.0;
  }
  const NodeId target = tape.sum(tape.hadamard(probs, tape.constant(mask)));
  tape.backward(target);
  const Tensor& grad = tape.grad(raw);
  if (!grad.all_finite())
    throw NumericError("contribution_scores: non-finite gradient");

  ContributionScore out;
  out.instance_id = instance_id;
  out.scores = region_scores_from_grad(grad);
  return out;
}

/// Indices of the tau largest scores; ties break toward the lower index.
inline std::vector<std::size_t> salient_set(const std::vector<double>& scores,
                                            std::size_t tau) {
  if (tau < 1 || tau > scores.size()) {
    throw ConfigError("salient_set: tau " + std::to_string(tau) +
                      " outside [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  order.resize(tau);
  std::sort(order.begin(), order.end());
  return order;
}

/// Joint vision-linguistic vector of one instance: mean of the raw region
/// columns, hadamard the question encoding.
inline std::vector<double> joint_vector(const std::vector<float>& features,
                                        std::size_t n_regions, std::size_t d_v,
                                        const std::vector<double>& question) {
  if (question.size() != d_v) {
    throw ShapeError("joint_vector: question dim " +
                     std::to_string(question.size()) +
                     " must match feature dim " + std::to_string(d_v));
  }
  std::vector<double> pooled(d_v, 0.0);
  for (std::size_t n = 0; n < n_regions; ++n)
    for (std::size_t f = 0; f < d_v; ++f)
      pooled[f] += static_cast<double>(features[n * d_v + f]);
  for (std::size_t f = 0; f < d_v; ++f) {
    pooled[f] /= static_cast<double>(n_regions);
    pooled[f] *= question[f];
  }
  return pooled;
}

/// Plain-value question encoding (mean of embedding rows), for the
/// similarity computation outside any tape.
inline std::vector<double> question_encoding_values(
    const ParamSet& params, const std::vector<std::uint32_t>& tokens) {
  const Tensor& emb = params.at("m.emb");
  if (tokens.empty()) throw ContractError("question_encoding_values: empty tokens");
  std::vector<double> out(emb.cols(), 0.0);
  for (std::uint32_t t : tokens) {
    if (t >= emb.rows())
      throw VocabularyError("question_encoding_values: token out of vocabulary");
    for (std::size_t j = 0; j < emb.cols(); ++j) out[j] += emb.at(t, j);
  }
  for (double& v : out) v /= static_cast<double>(tokens.size());
  return out;
}

/// Pairwise cosine similarity of the joint vectors: symmetric, unit
/// diagonal, entries in [-1, 1].
inline std::vector<std::vector<double>> instance_similarity(
    const std::vector<std::vector<double>>& joints) {
  const std::size_t b = joints.size();
  std::vector<double> norms(b);
  for (std::size_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (double v : joints[i]) acc += v * v;
    norms[i] = std::sqrt(acc);
    if (norms[i] < kDegenerateNorm) {
      throw DegenerateVectorError("instance_similarity: joint vector of instance " +
                                  std::to_string(i) + " is degenerate");
    }
  }
  std::vector<std::vector<double>> r(b, std::vector<double>(b, 0.0));
  for (std::size_t i = 0; i < b; ++i) {
    r[i][i] = 1.0;
    for (std::size_t j = i + 1; j < b; ++j) {
      double dot = 0.0;
      for (std::size_t f = 0; f < joints[i].size(); ++f)
        dot += joints[i][f] * joints[j][f];
      const double c = dot / (norms[i] * norms[j]);
      r[i][j] = c;
      r[j][i] = c;
    }
  }
  return r;
}

struct SubstituteDraw {
  std::size_t donor = 0;
  std::vector<std::size_t> donor_regions;  // K indices into the donor's columns
};

/// Draws the donor uniformly from the (up to) 3 most-similar other batch
/// instances, then K donor region columns uniformly, without replacement
/// while K <= N.
inline SubstituteDraw sample_substitute(const std::vector<std::vector<double>>& r,
                                        std::size_t i, std::size_t n_regions,
                                        std::size_t k, Rng& rng) {
  const std::size_t b = r.size();
  if (b < 2) throw ContractError("sample_substitute: batch must hold at least 2 instances");
  if (k < 1) throw ContractError("sample_substitute: K must be >= 1");

  std::vector<std::size_t> peers;
  peers.reserve(b - 1);
  for (std::size_t j = 0; j < b; ++j)
    if (j != i) peers.push_back(j);
  std::stable_sort(peers.begin(), peers.end(), [&](std::size_t a, std::size_t c) {
    return r[i][a] > r[i][c];
  });
  const std::size_t pool = std::min<std::size_t>(3, peers.size());

  SubstituteDraw draw;
  draw.donor = peers[rng.uniform_index(pool)];
  if (k <= n_regions) {
    std::vector<std::size_t> idx(n_regions);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t pick = t + rng.uniform_index(n_regions - t);
      std::swap(idx[t], idx[pick]);
      draw.donor_regions.push_back(idx[t]);
    }
  } else {
    for (std::size_t t = 0; t < k; ++t)
      draw.donor_regions.push_back(rng.uniform_index(n_regions));
  }
  return draw;
}

struct HardPerturbation {
  std::vector<float> features;          // V-hat
  std::vector<std::size_t> replaced;    // K indices, all salient
};

/// Replaces the K highest-scoring salient columns with the donor columns;
/// every other column stays bit-identical.
inline HardPerturbation hard_perturb(const std::vector<float>& features,
                                     std::size_t d_v,
                                     const std::vector<double>& scores,
                                     const std::vector<std::size_t>& salient,
                                     const std::vector<float>& donor_features,
                                     const std::vector<std::size_t>& donor_regions,
                                     std::size_t k) {
  if (k > salient.size()) {
    throw ContractError("hard_perturb: K = " + std::to_string(k) +
                        " exceeds |salient set| = " + std::to_string(salient.size()));
  }
  if (donor_regions.size() != k)
    throw ContractError("hard_perturb: donor column count must equal K");

  std::vector<std::size_t> ranked = salient;
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  ranked.resize(k);

  HardPerturbation out;
  out.features = features;
  out.replaced = ranked;
  for (std::size_t t = 0; t < k; ++t) {
    const float* src = donor_features.data() + donor_regions[t] * d_v;
    float* dst = out.features.data() + ranked[t] * d_v;
    std::copy(src, src + d_v, dst);
  }
  return out;
}

struct SoftPerturbation {
  std::vector<float> features;        // V-tilde
  std::vector<std::size_t> zeroed;    // p - K indices, none salient
};

/// Zeroes the p-K lowest-scoring non-salient columns; salient columns are
/// untouched bit for bit.
inline SoftPerturbation soft_perturb(const std::vector<float>& features,
                                     std::size_t d_v,
                                     const std::vector<double>& scores,
                                     const std::vector<std::size_t>& salient,
                                     std::size_t p, std::size_t k) {
  if (p < k) throw ContractError("soft_perturb: p must be >= K");
  const std::size_t n = scores.size();
  std::vector<char> is_salient(n, 0);
  for (std::size_t s : salient) is_salient[s] = 1;
  const std::size_t mask_count = p - k;
  if (mask_count > n - salient.size()) {
    throw ContractError("soft_perturb: p - K = " + std::to_string(mask_count) +
                        " exceeds the " + std::to_string(n - salient.size()) +
                        " non-salient regions");
  }

  std::vector<std::size_t> rest;
  for (std::size_t j = 0; j < n; ++j)
    if (!is_salient[j]) rest.push_back(j);
  std::stable_sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  rest.resize(mask_count);

  SoftPerturbation out;
  out.features = features;
  out.zeroed = rest;
  for (std::size_t j : rest)
    std::fill_n(out.features.data() + j * d_v, d_v, 0.0f);
  return out;
}

/// Perturbation strength schedule: K = min(K_max, 1 + (epoch - T0) / 2),
/// nondecreasing in the epoch. Only defined once the perturbation phases
/// can run.
inline std::size_t k_schedule(std::size_t epoch, std::size_t t0, std::size_t k_max) {
  if (epoch < t0) {
    throw PhaseError("k_schedule: epoch " + std::to_string(epoch) +
                     " precedes the first perturbation epoch T0 = " +
                     std::to_string(t0));
  }
  return std::min<std::size_t>(k_max, 1 + (epoch - t0) / 2);
}

/// Hard- and soft-perturbed features for one instance with full provenance.
struct PerturbedPair {
  std::vector<float> hard;              // V-hat
  std::vector<float> soft;              // V-tilde
  std::vector<std::size_t> salient;     // O*
  std::size_t donor = 0;
  std::vector<std::size_t> replaced;    // inside O*, |.| = K
  std::vector<std::size_t> zeroed;      // outside O*, |.| = p - K
  std::size_t k = 0;
  std::size_t p = 0;
};

inline PerturbedPair make_perturbed_pair(const std::vector<float>& features,
                                         std::size_t d_v,
                                         const std::vector<double>& scores,
                                         std::size_t tau, std::size_t p,
                                         std::size_t k,
                                         const std::vector<float>& donor_features,
                                         const std::vector<std::size_t>& donor_regions,
                                         std::size_t donor_id) {
  PerturbedPair pair;
  pair.salient = salient_set(scores, tau);
  pair.donor = donor_id;
  pair.k = k;
  pair.p = p;
  auto hard = hard_perturb(features, d_v, scores, pair.salient, donor_features,
                           donor_regions, k);
  auto soft = soft_perturb(features, d_v, scores, pair.salient, p, k);
  pair.hard = std::move(hard.features);
  pair.replaced = std::move(hard.replaced);
  pair.soft = std::move(soft.features);
  pair.zeroed = std::move(soft.zeroed);
  return pair;
}

}  // namespace vpl
