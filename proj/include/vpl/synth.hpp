#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/rng.hpp"

namespace vpl {

/// Configuration of the synthetic prior-shift benchmark generator.
///
/// Each question type owns a disjoint block of `answers_per_type` answers.
/// The train split places probability mass `train_skew` on a per-type head
/// answer; the test split places the same mass on the next answer in the
/// type's block, so the question-type prior shifts while the feature
/// distribution per latent class stays identical.
struct SynthConfig {
  std::size_t num_region_classes = 64;   // G
  std::size_t num_question_types = 6;    // Q
  std::size_t answers_per_type = 8;      // A
  std::size_t regions_per_image = 8;     // N
  std::size_t feature_dim = 32;          // d_v
  std::size_t question_dim = 32;         // d_q (consumed by the model config)
  std::size_t train_size = 8000;
  std::size_t test_size = 2000;
  double train_skew = 0.8;               // kappa
  std::size_t annotators_per_question = 10;
  double annotator_accuracy = 0.9;
  double noise_scale = 0.5;
  std::uint64_t seed = 7;

  std::size_t num_answers() const { return num_question_types * answers_per_type; }

  // token table layout: [0,Q) question-type tokens, then filler tokens,
  // then one token per answer (shared embedding table for both uses)
  static constexpr std::size_t kFillerTokens = 4;
  static constexpr std::size_t kTokensPerQuestion = 3;
  std::size_t filler_token_base() const { return num_question_types; }
  std::size_t answer_token_base() const {
    return num_question_types + kFillerTokens;
  }
  std::size_t vocab_tokens() const { return answer_token_base() + num_answers(); }

  void validate() const {
    if (regions_per_image < 2) throw ConfigError("regions_per_image must be >= 2");
    if (answers_per_type < 2) throw ConfigError("answers_per_type must be >= 2");
    if (train_size < 1 || test_size < 1) throw ConfigError("split sizes must be >= 1");
    if (num_question_types < 1) throw ConfigError("num_question_types must be >= 1");
    if (feature_dim < 1 || question_dim < 1) throw ConfigError("dims must be >= 1");
    if (annotators_per_question < 1) throw ConfigError("annotators_per_question must be >= 1");
    if (!(annotator_accuracy >= 0.0 && annotator_accuracy <= 1.0))
      throw ConfigError("annotator_accuracy must be in [0,1]");
    if (!(noise_scale >= 0.0)) throw ConfigError("noise_scale must be >= 0");
    const double floor = 1.0 / static_cast<double>(answers_per_type);
    if (!(train_skew >= floor - 1e-12 && train_skew <= 1.0)) {
      throw ConfigError("train_skew must lie in [1/answers_per_type, 1], got " +
                        std::to_string(train_skew));
    }
    if (num_answers() > num_region_classes) {
      throw ConfigError(
          "vocabulary overflow: num_question_types * answers_per_type = " +
          std::to_string(num_answers()) + " exceeds num_region_classes = " +
          std::to_string(num_region_classes));
    }
  }
};

/// One (image features, question, answers) triplet. `region_classes` and
/// `salient_index` are generator diagnostics; training code must not read
/// them (the trainer's data view hides them).
struct InstanceRecord {
  std::vector<float> features;          // regions_per_image * feature_dim, region-major
  std::vector<std::uint32_t> region_classes;  // diagnostics
  std::uint32_t question_type = 0;
  std::vector<std::uint32_t> tokens;    // kTokensPerQuestion ids
  std::vector<float> soft_scores;       // num_answers entries, votes / annotators
  std::uint32_t salient_index = 0;      // diagnostics

  const float* region(std::size_t n, std::size_t feature_dim) const {
    return features.data() + n * feature_dim;
  }
};

/// Vote count reconstructed from a stored soft score (y = votes / annotators).
inline std::size_t votes_from_score(float score, std::size_t annotators) {
  return static_cast<std::size_t>(std::llround(
      static_cast<double>(score) * static_cast<double>(annotators)));
}

/// Ground-truth answer set: the answers holding the maximum vote count.
inline std::vector<std::size_t> ground_truth_from_scores(
    const std::vector<float>& scores, std::size_t annotators) {
  std::size_t best = 0;
  for (float y : scores) best = std::max(best, votes_from_score(y, annotators));
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (best > 0 && votes_from_score(scores[k], annotators) == best)
      out.push_back(k);
  return out;
}

/// Majority answer with ties broken toward the lower id.
inline std::size_t majority_from_scores(const std::vector<float>& scores,
                                        std::size_t annotators) {
  std::size_t best_k = 0, best_v = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const std::size_t v = votes_from_score(scores[k], annotators);
    if (v > best_v) {
      best_v = v;
      best_k = k;
    }
  }
  return best_k;
}

/// Standard accuracy credit for predicting `answer`: min(1, votes / 3).
inline double credit_from_scores(const std::vector<float>& scores,
                                 std::size_t answer, std::size_t annotators) {
  return std::min(
      1.0, static_cast<double>(votes_from_score(scores[answer], annotators)) / 3.0);
}

struct Dataset {
  SynthConfig config;
  std::vector<std::string> answer_vocab;
  std::vector<InstanceRecord> train;
  std::vector<InstanceRecord> test;

  std::size_t votes(const InstanceRecord& rec, std::size_t answer) const {
    return votes_from_score(rec.soft_scores[answer], config.annotators_per_question);
  }

  std::vector<std::size_t> ground_truth(const InstanceRecord& rec) const {
    return ground_truth_from_scores(rec.soft_scores, config.annotators_per_question);
  }

  std::size_t majority_answer(const InstanceRecord& rec) const {
    return majority_from_scores(rec.soft_scores, config.annotators_per_question);
  }

  double answer_credit(const InstanceRecord& rec, std::size_t answer) const {
    return credit_from_scores(rec.soft_scores, answer, config.annotators_per_question);
  }
};

namespace detail {

inline std::size_t draw_excluding(Rng& rng, std::size_t n, std::size_t lo,
                                  std::size_t hi) {
  // uniform over [0, n) \ [lo, hi)
  const std::size_t width = hi - lo;
  std::size_t v = rng.uniform_index(n - width);
  if (v >= lo) v += width;
  return v;
}

inline InstanceRecord make_instance(const SynthConfig& cfg, bool test_split,
                                    const std::vector<std::size_t>& head_answer,
                                    const std::vector<float>& prototypes,
                                    Rng& rng) {
  const std::size_t Q = cfg.num_question_types, A = cfg.answers_per_type;
  const std::size_t N = cfg.regions_per_image, D = cfg.feature_dim;

  InstanceRecord rec;
  rec.question_type = static_cast<std::uint32_t>(rng.uniform_index(Q));
  const std::size_t q = rec.question_type;

  const std::size_t head =
      test_split ? (head_answer[q] + 1) % A : head_answer[q];
  std::size_t a_local;
  if (rng.uniform() < cfg.train_skew) {
    a_local = head;
  } else {
    a_local = rng.uniform_index(A - 1);
    if (a_local >= head) ++a_local;
  }
  const std::size_t intended = q * A + a_local;

  rec.salient_index = static_cast<std::uint32_t>(rng.uniform_index(N));
  rec.region_classes.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (n == rec.salient_index) {
      rec.region_classes[n] = static_cast<std::uint32_t>(intended);
    } else {
      // distractors avoid the instance's own answer block, so exactly one
      // region decodes a pair of this instance's own type
      rec.region_classes[n] = static_cast<std::uint32_t>(
          draw_excluding(rng, cfg.num_region_classes, q * A, q * A + A));
    }
  }

  rec.features.resize(N * D);
  for (std::size_t n = 0; n < N; ++n) {
    const float* proto = prototypes.data() + rec.region_classes[n] * D;
    for (std::size_t f = 0; f < D; ++f) {
      // clamped at zero, like the post-relu detector features it stands for
      const double v =
          static_cast<double>(proto[f]) + cfg.noise_scale * rng.normal();
      rec.features[n * D + f] = static_cast<float>(v > 0.0 ? v : 0.0);
    }
  }

  rec.tokens = {static_cast<std::uint32_t>(q),
                static_cast<std::uint32_t>(cfg.filler_token_base() +
                                           rng.uniform_index(SynthConfig::kFillerTokens)),
                static_cast<std::uint32_t>(cfg.filler_token_base() +
                                           rng.uniform_index(SynthConfig::kFillerTokens))};

  std::vector<std::size_t> votes(cfg.num_answers(), 0);
  for (std::size_t an = 0; an < cfg.annotators_per_question; ++an) {
    if (rng.uniform() < cfg.annotator_accuracy) {
      ++votes[intended];
    } else {
      ++votes[draw_excluding(rng, cfg.num_answers(), intended, intended + 1)];
    }
  }
  rec.soft_scores.resize(cfg.num_answers());
  for (std::size_t k = 0; k < cfg.num_answers(); ++k) {
    rec.soft_scores[k] = static_cast<float>(
        static_cast<double>(votes[k]) /
        static_cast<double>(cfg.annotators_per_question));
  }
  return rec;
}

}  // namespace detail

/// Generates a dataset. The whole dataset is a pure function of the config:
/// one sequential RNG drives head-answer designation, class prototypes, then
/// train and test instances in order.
inline Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;

  const std::size_t Q = cfg.num_question_types, A = cfg.answers_per_type;
  ds.answer_vocab.reserve(cfg.num_answers());
  for (std::size_t q = 0; q < Q; ++q)
    for (std::size_t a = 0; a < A; ++a)
      ds.answer_vocab.push_back("q" + std::to_string(q) + "a" + std::to_string(a));

  Rng rng(cfg.seed);
  std::vector<std::size_t> head_answer(Q);
  for (std::size_t q = 0; q < Q; ++q) head_answer[q] = rng.uniform_index(A);

  // class prototypes drawn once, frozen across both splits; half-normal to
  // mirror nonnegative detector features
  std::vector<float> prototypes(cfg.num_region_classes * cfg.feature_dim);
  for (float& v : prototypes) v = static_cast<float>(std::abs(rng.normal()));

  ds.train.reserve(cfg.train_size);
  for (std::size_t i = 0; i < cfg.train_size; ++i)
    ds.train.push_back(detail::make_instance(cfg, false, head_answer, prototypes, rng));
  ds.test.reserve(cfg.test_size);
  for (std::size_t i = 0; i < cfg.test_size; ++i)
    ds.test.push_back(detail::make_instance(cfg, true, head_answer, prototypes, rng));
  return ds;
}

/// Per-question-type distribution of majority answers over the type's own
/// answer block. Rows sum to 1; a type absent from the split gets a uniform
/// row.
inline std::vector<std::vector<double>> prior_table(
    const Dataset& ds, const std::vector<InstanceRecord>& split) {
  if (split.empty()) throw ContractError("prior_table: empty split");
  const std::size_t Q = ds.config.num_question_types;
  const std::size_t A = ds.config.answers_per_type;
  std::vector<std::vector<double>> table(Q, std::vector<double>(A, 0.0));
  std::vector<std::size_t> counts(Q, 0);
  for (const auto& rec : split) {
    const std::size_t k = ds.majority_answer(rec);
    table[rec.question_type][k % A] += 1.0;
    ++counts[rec.question_type];
  }
  for (std::size_t q = 0; q < Q; ++q) {
    if (counts[q] == 0) {
      std::fill(table[q].begin(), table[q].end(), 1.0 / static_cast<double>(A));
    } else {
      for (double& v : table[q]) v /= static_cast<double>(counts[q]);
    }
  }
  return table;
}

/// Mean over question types of the total-variation distance between two
/// prior tables.
inline double prior_shift_tv(const std::vector<std::vector<double>>& a,
                             const std::vector<std::vector<double>>& b) {
  double total = 0.0;
  for (std::size_t q = 0; q < a.size(); ++q) {
    double tv = 0.0;
    for (std::size_t k = 0; k < a[q].size(); ++k) tv += std::abs(a[q][k] - b[q][k]);
    total += 0.5 * tv;
  }
  return total / static_cast<double>(a.size());
}

}  // namespace vpl
