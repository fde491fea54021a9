#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "vpl/discriminators.hpp"
#include "vpl/gradcheck.hpp"
#include "vpl/model.hpp"

using vpl::BoundParams;
using vpl::ModelConfig;
using vpl::NodeId;
using vpl::ParamSet;
using vpl::Rng;
using vpl::Tape;
using vpl::Tensor;
using vpl::TripletNodes;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.d_v = 6;
  cfg.d_q = 6;
  cfg.d_h = 10;
  cfg.d_m = 8;
  cfg.d_z = 5;
  cfg.vocab_tokens = 24;
  cfg.num_answers = 8;
  return cfg;
}

std::vector<double> random_probs(std::size_t n, Rng& rng, double spread = 3.0) {
  std::vector<double> logits(n);
  for (auto& l : logits) l = rng.uniform(-spread, spread);
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double z = 0.0;
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

Tensor random_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("negative candidate selection") {
  SUBCASE("uniform prediction breaks ties by lower id") {
    const std::vector<double> uniform(6, 1.0 / 6.0);
    CHECK(vpl::negative_candidates(uniform, {0}, 2) ==
          std::vector<std::size_t>{1, 2});
  }

  SUBCASE("peaked ground-truth answer is excluded") {
    std::vector<double> p = {0.02, 0.9, 0.02, 0.02, 0.02, 0.02};
    const auto out = vpl::negative_candidates(p, {1}, 3);
    for (std::size_t k : out) CHECK(k != 1);
  }

  SUBCASE("matches a brute-force sort-then-filter oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      const auto p = random_probs(12, rng);
      const std::vector<std::size_t> gt = {rng.uniform_index(12),
                                           rng.uniform_index(12)};
      const std::size_t n_prime = 1 + rng.uniform_index(6);
      const auto got = vpl::negative_candidates(p, gt, n_prime);

      std::vector<std::size_t> expect;
      for (std::size_t k = 0; k < 12; ++k)
        if (k != gt[0] && k != gt[1]) expect.push_back(k);
      std::stable_sort(expect.begin(), expect.end(),
                       [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
      expect.resize(n_prime);
      CHECK(got == expect);
      for (std::size_t k : got) {
        CHECK(k != gt[0]);
        CHECK(k != gt[1]);
      }
    }
  }

  SUBCASE("insufficient non-ground-truth answers raise") {
    const std::vector<double> p(4, 0.25);
    CHECK_THROWS_AS(vpl::negative_candidates(p, {0, 1}, 3), vpl::VocabularyError);
    CHECK_THROWS_AS(vpl::negative_candidates(p, {0}, 0), vpl::ContractError);
  }
}

TEST_CASE("triplet construction") {
  ModelConfig cfg = small_model();
  Rng rng(2);
  ParamSet ps = vpl::init_params(cfg, rng);
  const std::size_t base = 10;  // answer tokens start here in this test table

  SUBCASE("single ground-truth answer pools to its own embedding") {
    Tape tape;
    BoundParams bound(tape, ps, false);
    Rng xr(3);
    const NodeId z = tape.constant(random_vec(cfg.d_z, xr));
    Rng ar(4);
    const auto t = vpl::build_triplet(tape, bound, z, z, z, {2}, {5}, base, ar);
    CHECK(t.negative_answer == 5);

    // oracle: h = z (.) (W E[base+2] + b)
    const Tensor& emb = ps.at("m.emb");
    for (std::size_t i = 0; i < cfg.d_z; ++i) {
      double fa = ps.at("a.b")[i];
      for (std::size_t j = 0; j < cfg.d_q; ++j)
        fa += ps.at("a.w").at(i, j) * emb.at(base + 2, j);
      CHECK(tape.value(t.original)[i]
            == doctest::Approx(tape.value(z)[i] * fa).epsilon(1e-12));
    }
  }

  SUBCASE("zero answer map collapses all three representations") {
    ParamSet zeroed = ps;
    zeroed.at("a.w") = Tensor::zeros({cfg.d_z, cfg.d_q});
    zeroed.at("a.b") = Tensor::zeros({cfg.d_z});
    Tape tape;
    BoundParams bound(tape, zeroed, false);
    Rng xr(5);
    const NodeId z = tape.constant(random_vec(cfg.d_z, xr));
    Rng ar(6);
    const auto t = vpl::build_triplet(tape, bound, z, z, z, {1, 3}, {0, 7}, base, ar);
    for (std::size_t i = 0; i < cfg.d_z; ++i) {
      CHECK(tape.value(t.original)[i] == 0.0);
      CHECK(tape.value(t.soft)[i] == 0.0);
      CHECK(tape.value(t.hard)[i] == 0.0);
    }
  }

  SUBCASE("seeded inputs match an independently composed evaluation") {
    Tape tape;
    BoundParams bound(tape, ps, false);
    Rng xr(7);
    const Tensor zv = random_vec(cfg.d_z, xr);
    const Tensor zs = random_vec(cfg.d_z, xr);
    const Tensor zh = random_vec(cfg.d_z, xr);
    Rng ar(8);
    const auto t = vpl::build_triplet(tape, bound, tape.constant(zv),
                                      tape.constant(zs), tape.constant(zh),
                                      {0, 4}, {2, 6, 7}, base, ar);
    const Tensor& emb = ps.at("m.emb");
    auto fa_of = [&](std::vector<std::size_t> tokens) {
      std::vector<double> pooled(cfg.d_q, 0.0);
      for (std::size_t tok : tokens)
        for (std::size_t j = 0; j < cfg.d_q; ++j) pooled[j] += emb.at(tok, j);
      for (auto& v : pooled) v /= static_cast<double>(tokens.size());
      std::vector<double> out(cfg.d_z, 0.0);
      for (std::size_t i = 0; i < cfg.d_z; ++i) {
        out[i] = ps.at("a.b")[i];
        for (std::size_t j = 0; j < cfg.d_q; ++j)
          out[i] += ps.at("a.w").at(i, j) * pooled[j];
      }
      return out;
    };
    const auto fa_gt = fa_of({base + 0, base + 4});
    const auto fa_neg = fa_of({base + t.negative_answer});
    for (std::size_t i = 0; i < cfg.d_z; ++i) {
      CHECK(tape.value(t.original)[i] == doctest::Approx(zv[i] * fa_gt[i]).epsilon(1e-12));
      CHECK(tape.value(t.soft)[i] == doctest::Approx(zs[i] * fa_gt[i]).epsilon(1e-12));
      CHECK(tape.value(t.hard)[i] == doctest::Approx(zh[i] * fa_neg[i]).epsilon(1e-12));
    }
  }

  SUBCASE("empty negatives are rejected") {
    Tape tape;
    BoundParams bound(tape, ps, false);
    Rng xr(9);
    const NodeId z = tape.constant(random_vec(cfg.d_z, xr));
    Rng ar(10);
    CHECK_THROWS_AS(vpl::build_triplet(tape, bound, z, z, z, {0}, {}, base, ar),
                    vpl::ContractError);
  }
}

namespace {

TripletNodes make_triplet(Tape& tape, const Tensor& h, const Tensor& hs,
                          const Tensor& hh) {
  TripletNodes t;
  t.original = tape.constant(h);
  t.soft = tape.constant(hs);
  t.hard = tape.constant(hh);
  return t;
}

double relation_term(double c_keep, double c_flip) {
  const double ratio = 1.0 / (1.0 + std::exp(c_flip - c_keep));
  return std::log(2.0 - ratio);
}

}  // namespace

TEST_CASE("relation loss closed-form points") {
  // equal cosines: ratio 1/2, term ln(3/2)
  {
    Tape tape;
    const Tensor h = Tensor::from_vector({1, 0, 0});
    const auto t = make_triplet(tape, h, h, h);  // both cosines equal 1
    const double loss = tape.value(vpl::relation_loss(tape, {t})).scalar_value();
    CHECK(loss == doctest::Approx(std::log(1.5)).epsilon(1e-12));
  }
  // keep -> 1, flip -> -1: term = ln(2 - e / (e + 1/e)), frozen from the
  // closed form
  {
    Tape tape;
    const Tensor h = Tensor::from_vector({1, 0});
    const Tensor hs = Tensor::from_vector({2, 0});    // cos(h, hs) = 1
    const Tensor hh = Tensor::from_vector({-3, 0});   // cos(hs, hh) = -1
    const auto t = make_triplet(tape, h, hs, hh);
    const double loss = tape.value(vpl::relation_loss(tape, {t})).scalar_value();
    const double expect = relation_term(1.0, -1.0);
    CHECK(expect == doctest::Approx(0.1126070).epsilon(1e-5));
    CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("relation loss terms stay strictly inside (0, ln 2)") {
  Rng rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    Tape tape;
    const auto t = make_triplet(tape, random_vec(4, rng), random_vec(4, rng),
                                random_vec(4, rng));
    const double loss = tape.value(vpl::relation_loss(tape, {t})).scalar_value();
    CHECK(loss > 0.0);
    CHECK(loss < std::log(2.0));
  }
}

TEST_CASE("relation loss decreases as the kept cosine rises") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const double flip = rng.uniform(-1, 1);
    const double a = rng.uniform(-1, 1);
    const double b = rng.uniform(-1, 1);
    const double lo = std::min(a, b), hi = std::max(a, b);
    if (hi - lo < 1e-6) continue;
    CHECK(relation_term(hi, flip) < relation_term(lo, flip));
  }
}

TEST_CASE("relation loss is invariant to positive rescaling of the triplet") {
  Rng rng(13);
  const Tensor h = random_vec(5, rng);
  const Tensor hs = random_vec(5, rng);
  const Tensor hh = random_vec(5, rng);
  auto eval = [&](double a, double b, double c) {
    Tape tape;
    Tensor sh = h, shs = hs, shh = hh;
    for (std::size_t i = 0; i < 5; ++i) {
      sh[i] *= a;
      shs[i] *= b;
      shh[i] *= c;
    }
    const auto t = make_triplet(tape, sh, shs, shh);
    return tape.value(vpl::relation_loss(tape, {t})).scalar_value();
  };
  const double base = eval(1, 1, 1);
  CHECK(std::abs(eval(2.5, 0.03, 17.0) - base) < 1e-10);
  CHECK(std::abs(eval(100.0, 100.0, 0.001) - base) < 1e-10);
}

TEST_CASE("relation loss gradient matches finite differences") {
  Rng rng(14);
  ParamSet params;
  params.add("h", random_vec(5, rng, 0.3, 1.2));
  params.add("hs", random_vec(5, rng, 0.3, 1.2));
  params.add("hh", random_vec(5, rng, -1.2, -0.3));

  auto forward = [&](const ParamSet& ps, ParamSet* grads) {
    Tape tape;
    TripletNodes t;
    const NodeId h = tape.leaf(ps.at("h"), true);
    const NodeId hs = tape.leaf(ps.at("hs"), true);
    const NodeId hh = tape.leaf(ps.at("hh"), true);
    t.original = h;
    t.soft = hs;
    t.hard = hh;
    const NodeId loss = vpl::relation_loss(tape, {t});
    const double value = tape.value(loss).scalar_value();
    if (grads) {
      tape.backward(loss);
      grads->add("h", tape.grad(h));
      grads->add("hs", tape.grad(hs));
      grads->add("hh", tape.grad(hh));
    }
    return value;
  };
  ParamSet grads;
  forward(params, &grads);
  auto f = [&](const ParamSet& ps) { return forward(ps, nullptr); };
  CHECK(vpl::finite_diff_check(f, params, grads, 1e-5).max_rel_err < 1e-4);
}

TEST_CASE("relation loss names the degenerate triplet element") {
  Tape tape;
  Rng rng(15);
  const auto good = random_vec(4, rng);
  const auto t = make_triplet(tape, good, Tensor::zeros({4}), good);
  try {
    vpl::relation_loss(tape, {t});
    FAIL("expected DegenerateVectorError");
  } catch (const vpl::DegenerateVectorError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("h_tilde") != std::string::npos);
    CHECK(msg.find("0") != std::string::npos);
  }
}

TEST_CASE("class loss closed-form points and bounds") {
  SUBCASE("uniform hard prediction gives ln(1/K) for any original") {
    Rng rng(16);
    for (int trial = 0; trial < 20; ++trial) {
      Tape tape;
      const auto orig = random_probs(8, rng);
      Tensor ov = Tensor::from_vector(orig);
      const NodeId hard = tape.constant(Tensor::full({8}, 1.0 / 8.0));
      const double loss =
          tape.value(vpl::class_loss(tape, {ov}, {hard})).scalar_value();
      CHECK(loss == doctest::Approx(std::log(1.0 / 8.0)).epsilon(1e-10));
    }
  }

  SUBCASE("aligned clamped one-hots give zero") {
    Tape tape;
    Tensor onehot = Tensor::zeros({6});
    onehot[2] = 1.0;
    const NodeId hard = tape.constant(onehot);
    const double loss =
        tape.value(vpl::class_loss(tape, {onehot}, {hard})).scalar_value();
    CHECK(loss == 0.0);
  }

  SUBCASE("values live in [ln(1e-8), 0] over random inputs") {
    Rng rng(17);
    const double lo = std::log(1e-8);
    for (int trial = 0; trial < 2000; ++trial) {
      Tape tape;
      const auto orig = random_probs(10, rng, 6.0);
      const auto hard = random_probs(10, rng, 30.0);
      const NodeId hn = tape.constant(Tensor::from_vector(hard));
      const double loss = tape.value(
          vpl::class_loss(tape, {Tensor::from_vector(orig)}, {hn})).scalar_value();
      CHECK(loss <= 0.0);
      CHECK(loss >= lo);
    }
  }
}

TEST_CASE("descending class loss drives the hard prediction off the original support") {
  // 50 plain gradient steps on L_c alone, original branch frozen
  Rng rng(18);
  const std::size_t n = 8;
  const auto orig = random_probs(n, rng);
  Tensor logits = random_vec(n, rng);

  auto overlap = [&](const Tensor& lg) {
    Tape tape;
    const Tensor& p = tape.value(tape.softmax(tape.constant(lg)));
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) acc += orig[k] * p[k];
    return acc;
  };

  const double before = overlap(logits);
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    const NodeId lg = tape.leaf(logits, true);
    const NodeId hard = tape.softmax(lg);
    const NodeId loss = vpl::class_loss(tape, {Tensor::from_vector(orig)}, {hard});
    tape.backward(loss);
    const Tensor& g = tape.grad(lg);
    for (std::size_t i = 0; i < n; ++i) logits[i] -= 0.5 * g[i];
  }
  CHECK(overlap(logits) < before);
}
