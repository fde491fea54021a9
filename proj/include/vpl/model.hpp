#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/graph.hpp"
#include "vpl/params.hpp"
#include "vpl/rng.hpp"
#include "vpl/tensor.hpp"

namespace vpl {

struct ModelConfig {
  std::size_t d_v = 32;   // region feature dim
  std::size_t d_q = 32;   // token embedding dim
  std::size_t d_h = 64;   // encoded region / attention dim
  std::size_t d_m = 64;   // fused representation dim
  std::size_t d_z = 16;   // bottleneck dim
  std::size_t vocab_tokens = 0;
  std::size_t num_answers = 0;
};

// Parameter names carry their optimization group as a prefix:
//   m.*   encoders + fusion        c.*   answer classifier
//   vib.* bottleneck modulator     a.*   answer-space map
inline std::string param_group_of(const std::string& name) {
  const auto dot = name.find('.');
  if (dot == std::string::npos)
    throw ContractError("parameter " + name + " has no group prefix");
  return name.substr(0, dot);
}

/// Builds the full parameter set in a fixed order. Weights are Gaussian with
/// 1/sqrt(fan_in) scale. Biases get a small Gaussian rather than zeros so no
/// relu pre-activation starts pinned to the kink (zeroed perturbation
/// columns would otherwise sit exactly on it).
inline ParamSet init_params(const ModelConfig& cfg, Rng& rng) {
  ParamSet p;
  auto gaussian = [&](std::vector<std::size_t> shape, double scale) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
  };
  auto fan_scaled = [&](std::size_t rows, std::size_t cols) {
    return gaussian({rows, cols}, 1.0 / std::sqrt(static_cast<double>(cols)));
  };
  auto bias = [&](std::size_t n) { return gaussian({n}, 0.01); };

  p.add("m.enc_w", fan_scaled(cfg.d_h, cfg.d_v));
  p.add("m.enc_b", bias(cfg.d_h));
  p.add("m.emb", gaussian({cfg.vocab_tokens, cfg.d_q},
                          1.0 / std::sqrt(static_cast<double>(cfg.d_q))));
  p.add("m.att_wv", fan_scaled(cfg.d_h, cfg.d_h));
  p.add("m.att_wq", fan_scaled(cfg.d_h, cfg.d_q));
  p.add("m.att_w", gaussian({cfg.d_h}, 1.0 / std::sqrt(static_cast<double>(cfg.d_h))));
  p.add("m.fuse_w1", fan_scaled(cfg.d_m, cfg.d_h));
  p.add("m.fuse_b1", bias(cfg.d_m));
  p.add("m.fuse_w2", fan_scaled(cfg.d_m, cfg.d_q));
  p.add("m.fuse_b2", bias(cfg.d_m));
  p.add("vib.w_mu", fan_scaled(cfg.d_z, cfg.d_m));
  p.add("vib.b_mu", bias(cfg.d_z));
  p.add("vib.w_sigma", fan_scaled(cfg.d_z, cfg.d_m));
  // start near-deterministic: softplus(-2) ~ 0.13, so the latent signal is
  // not swamped by sampling noise before the heads have learned anything
  Tensor b_sigma = bias(cfg.d_z);
  for (std::size_t i = 0; i < b_sigma.numel(); ++i) b_sigma[i] -= 2.0;
  p.add("vib.b_sigma", b_sigma);
  p.add("c.w", fan_scaled(cfg.num_answers, cfg.d_z));
  p.add("c.b", bias(cfg.num_answers));
  p.add("a.w", fan_scaled(cfg.d_z, cfg.d_q));
  p.add("a.b", bias(cfg.d_z));
  return p;
}

/// Derives the model dimensions back from checkpointed parameter shapes.
inline ModelConfig config_from_params(const ParamSet& p) {
  ModelConfig cfg;
  cfg.d_h = p.at("m.enc_w").rows();
  cfg.d_v = p.at("m.enc_w").cols();
  cfg.vocab_tokens = p.at("m.emb").rows();
  cfg.d_q = p.at("m.emb").cols();
  cfg.d_m = p.at("m.fuse_w1").rows();
  cfg.d_z = p.at("vib.w_mu").rows();
  cfg.num_answers = p.at("c.w").rows();
  return cfg;
}

/// Tape-bound parameter leaves for one forward pass.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool requires_grad) {
    for (const auto& [name, t] : params)
      ids_.emplace_back(name, tape.leaf(t, requires_grad));
  }

  NodeId at(const std::string& name) const {
    for (const auto& [n, id] : ids_)
      if (n == name) return id;
    throw ContractError("unbound parameter " + name);
  }

  const std::vector<std::pair<std::string, NodeId>>& items() const {
    return ids_;
  }

 private:
  std::vector<std::pair<std::string, NodeId>> ids_;
};

/// Promotes a region feature matrix (region-major float storage) to a
/// d_v x N tensor with regions as columns.
inline Tensor region_tensor(const float* features, std::size_t n_regions,
                            std::size_t d_v) {
  Tensor t = Tensor::zeros({d_v, n_regions});
  for (std::size_t n = 0; n < n_regions; ++n)
    for (std::size_t f = 0; f < d_v; ++f)
      t.at(f, n) = static_cast<double>(features[n * d_v + f]);
  return t;
}

/// Per-region affine projection followed by relu; column order preserved.
inline NodeId encode_image(Tape& tape, const BoundParams& p, NodeId raw_regions) {
  const Tensor& raw = tape.value(raw_regions);
  const Tensor& w = tape.value(p.at("m.enc_w"));
  if (raw.rank() != 2 || raw.rows() != w.cols()) {
    throw ShapeError("encode_image: regions " + shape_str(raw.shape()) +
                     " incompatible with projection " + shape_str(w.shape()));
  }
  return tape.relu(
      tape.add_bias_cols(tape.matmul(p.at("m.enc_w"), raw_regions), p.at("m.enc_b")));
}

/// Mean of token embeddings.
inline NodeId encode_question(Tape& tape, const BoundParams& p,
                              const std::vector<std::uint32_t>& tokens) {
  if (tokens.empty()) throw ContractError("encode_question: empty token list");
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  return tape.rows_mean(p.at("m.emb"), ids);
}

/// Question-guided soft attention over regions, then dual-branch fusion:
///   alpha = softmax(w' relu(Wv V + Wq q 1'))
///   m = relu(W1 V alpha + b1) (.) relu(W2 q + b2)
inline NodeId fuse(Tape& tape, const BoundParams& p, NodeId encoded_regions,
                   NodeId question) {
  const NodeId att_in = tape.add_bias_cols(
      tape.matmul(p.at("m.att_wv"), encoded_regions),
      tape.matvec(p.at("m.att_wq"), question));
  const NodeId logits = tape.matvec(tape.transpose(tape.relu(att_in)), p.at("m.att_w"));
  const NodeId alpha = tape.softmax(logits);
  const NodeId pooled = tape.matvec(encoded_regions, alpha);
  const NodeId visual = tape.relu(
      tape.add(tape.matvec(p.at("m.fuse_w1"), pooled), p.at("m.fuse_b1")));
  const NodeId textual = tape.relu(
      tape.add(tape.matvec(p.at("m.fuse_w2"), question), p.at("m.fuse_b2")));
  return tape.hadamard(visual, textual);
}

/// Softmax answer distribution from the representation the classifier sees.
inline NodeId classify(Tape& tape, const BoundParams& p, NodeId repr) {
  return tape.softmax(
      tape.add(tape.matvec(p.at("c.w"), repr), p.at("c.b")));
}

/// Soft-score cross entropy: -(1/B) sum_i sum_k y_ik log p_ik. The stored
/// soft scores are used exactly as given, without renormalization.
inline NodeId vqa_loss(Tape& tape, const std::vector<NodeId>& prob_nodes,
                       const std::vector<Tensor>& soft_scores) {
  if (prob_nodes.empty() || prob_nodes.size() != soft_scores.size())
    throw ShapeError("vqa_loss: probs and scores must pair up");
  NodeId acc = 0;
  bool first = true;
  for (std::size_t i = 0; i < prob_nodes.size(); ++i) {
    require_same_shape(tape.value(prob_nodes[i]), soft_scores[i], "vqa_loss");
    const NodeId term = tape.sum(tape.hadamard(
        tape.constant(soft_scores[i]), tape.safe_log(prob_nodes[i])));
    acc = first ? term : tape.add(acc, term);
    first = false;
  }
  return tape.scale(acc, -1.0 / static_cast<double>(prob_nodes.size()));
}

/// Token id of an answer in the shared embedding table.
inline std::uint32_t answer_token(std::size_t answer_token_base, std::size_t answer_id) {
  return static_cast<std::uint32_t>(answer_token_base + answer_id);
}

}  // namespace vpl
