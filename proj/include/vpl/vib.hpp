#pragma once

#include <atomic>
#include <cmath>
#include <utility>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/graph.hpp"
#include "vpl/model.hpp"
#include "vpl/rng.hpp"

namespace vpl {

/// Lower bound added to softplus so sigma stays strictly positive and the
/// KL log term cannot underflow.
inline constexpr double kSigmaFloor = 1e-6;

/// Counts every stochastic latent draw. Inference must never tick this; the
/// acceptance suite asserts the counter is frozen across evaluation.
inline std::atomic<std::uint64_t>& sample_z_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

struct LatentNodes {
  NodeId mu = 0;
  NodeId sigma = 0;
};

/// Encodes a fused representation into a diagonal Gaussian:
///   mu = Wmu m + bmu,  sigma = softplus(Wsigma m + bsigma) + floor.
/// The raw affine sigma head can go negative, so positivity is imposed by
/// the softplus transform.
inline LatentNodes encode_latent(Tape& tape, const BoundParams& p, NodeId m) {
  LatentNodes out;
  out.mu = tape.add(tape.matvec(p.at("vib.w_mu"), m), p.at("vib.b_mu"));
  out.sigma = tape.add_scalar(
      tape.softplus(tape.add(tape.matvec(p.at("vib.w_sigma"), m), p.at("vib.b_sigma"))),
      kSigmaFloor);
  return out;
}

/// z = mu + eps (.) sigma with eps ~ N(0, I) drawn from the provided
/// generator. The realized eps is returned so backward replays it exactly.
inline std::pair<NodeId, Tensor> sample_z(Tape& tape, const LatentNodes& latent,
                                          Rng& rng) {
  const Tensor& sigma = tape.value(latent.sigma);
  for (std::size_t i = 0; i < sigma.numel(); ++i) {
    if (!(sigma[i] > 0.0))
      throw ContractError("sample_z: nonpositive sigma coordinate");
  }
  Tensor eps = Tensor::zeros(sigma.shape());
  for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
  sample_z_counter().fetch_add(1, std::memory_order_relaxed);
  const NodeId z = tape.add(latent.mu, tape.hadamard(tape.constant(eps), latent.sigma));
  return {z, std::move(eps)};
}

/// Same reparameterization with a caller-supplied (frozen) eps; used by the
/// gradient checks, which must hold the noise fixed across re-evaluations.
inline NodeId sample_z_with(Tape& tape, const LatentNodes& latent, const Tensor& eps) {
  const Tensor& sigma = tape.value(latent.sigma);
  require_same_shape(sigma, eps, "sample_z_with");
  for (std::size_t i = 0; i < sigma.numel(); ++i) {
    if (!(sigma[i] > 0.0))
      throw ContractError("sample_z_with: nonpositive sigma coordinate");
  }
  sample_z_counter().fetch_add(1, std::memory_order_relaxed);
  return tape.add(latent.mu, tape.hadamard(tape.constant(eps), latent.sigma));
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)) averaged over the batch:
///   (1/B) sum_i 1/2 sum_d (mu^2 + sigma^2 - 1 - 2 ln sigma).
inline NodeId kl_loss(Tape& tape, const std::vector<LatentNodes>& batch) {
  if (batch.empty()) throw ContractError("kl_loss: empty batch");
  NodeId acc = 0;
  bool first = true;
  for (const auto& latent : batch) {
    const Tensor& sigma = tape.value(latent.sigma);
    for (std::size_t i = 0; i < sigma.numel(); ++i) {
      if (!(sigma[i] > 0.0))
        throw ContractError("kl_loss: nonpositive sigma coordinate");
    }
    const double dims = static_cast<double>(sigma.numel());
    const NodeId mu2 = tape.sum(tape.hadamard(latent.mu, latent.mu));
    const NodeId sig2 = tape.sum(tape.hadamard(latent.sigma, latent.sigma));
    const NodeId logs = tape.scale(tape.sum(tape.safe_log(latent.sigma)), -2.0);
    const NodeId term = tape.scale(
        tape.add_scalar(tape.add(tape.add(mu2, sig2), logs), -dims), 0.5);
    acc = first ? term : tape.add(acc, term);
    first = false;
  }
  return tape.scale(acc, 1.0 / static_cast<double>(batch.size()));
}

/// Plain-value KL of one instance; the reference the tape version is tested
/// against and the metric reported at evaluation time.
inline double kl_closed_form(const std::vector<double>& mu,
                             const std::vector<double>& sigma) {
  double acc = 0.0;
  for (std::size_t d = 0; d < mu.size(); ++d) {
    if (!(sigma[d] > 0.0)) throw ContractError("kl_closed_form: nonpositive sigma");
    acc += mu[d] * mu[d] + sigma[d] * sigma[d] - 1.0 - 2.0 * std::log(sigma[d]);
  }
  return 0.5 * acc;
}

/// Deterministic inference representation: the mean head only (the variance
/// head is discarded at test time). Bit-identical across repeated calls.
inline NodeId inference_repr(Tape& tape, const BoundParams& p, NodeId m) {
  return encode_latent(tape, p, m).mu;
}

}  // namespace vpl
