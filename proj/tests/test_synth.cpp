#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "vpl/dataset_io.hpp"
#include "vpl/synth.hpp"

using vpl::Dataset;
using vpl::InstanceRecord;
using vpl::SynthConfig;

namespace {

SynthConfig small_config() {
  SynthConfig cfg;
  cfg.train_size = 1500;
  cfg.test_size = 400;
  cfg.seed = 11;
  return cfg;
}

bool records_equal(const InstanceRecord& a, const InstanceRecord& b) {
  return a.question_type == b.question_type && a.tokens == b.tokens &&
         a.region_classes == b.region_classes &&
         a.salient_index == b.salient_index &&
         a.features.size() == b.features.size() &&
         a.soft_scores.size() == b.soft_scores.size() &&
         std::memcmp(a.features.data(), b.features.data(),
                     a.features.size() * sizeof(float)) == 0 &&
         std::memcmp(a.soft_scores.data(), b.soft_scores.data(),
                     a.soft_scores.size() * sizeof(float)) == 0;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.answer_vocab != b.answer_vocab) return false;
  if (a.train.size() != b.train.size() || a.test.size() != b.test.size())
    return false;
  for (std::size_t i = 0; i < a.train.size(); ++i)
    if (!records_equal(a.train[i], b.train[i])) return false;
  for (std::size_t i = 0; i < a.test.size(); ++i)
    if (!records_equal(a.test[i], b.test[i])) return false;
  return true;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vpl_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const SynthConfig cfg = small_config();
  const Dataset a = vpl::generate(cfg);
  const Dataset b = vpl::generate(cfg);
  CHECK(datasets_equal(a, b));

  SynthConfig other = cfg;
  other.seed = 12;
  CHECK_FALSE(datasets_equal(a, vpl::generate(other)));
}

TEST_CASE("config validation rejects bad settings") {
  SynthConfig cfg = small_config();
  cfg.answers_per_type = 16;
  cfg.num_question_types = 8;  // 128 answers > 64 classes
  CHECK_THROWS_AS(vpl::generate(cfg), vpl::ConfigError);

  SynthConfig low = small_config();
  low.train_skew = 0.05;  // below 1/A
  CHECK_THROWS_AS(vpl::generate(low), vpl::ConfigError);

  SynthConfig tiny = small_config();
  tiny.regions_per_image = 1;
  CHECK_THROWS_AS(vpl::generate(tiny), vpl::ConfigError);
}

TEST_CASE("skew floor produces a uniform per-type train prior") {
  SynthConfig cfg = small_config();
  cfg.train_skew = 1.0 / static_cast<double>(cfg.answers_per_type);
  cfg.train_size = 6000;
  const Dataset ds = vpl::generate(cfg);
  const auto table = vpl::prior_table(ds, ds.train);
  const double uniform = 1.0 / static_cast<double>(cfg.answers_per_type);
  for (const auto& row : table)
    for (double p : row) CHECK(std::abs(p - uniform) < 0.05);
}

TEST_CASE("degenerate skew with exact annotators pins every train answer") {
  SynthConfig cfg = small_config();
  cfg.train_skew = 1.0;
  cfg.annotator_accuracy = 1.0;
  const Dataset ds = vpl::generate(cfg);
  // per type, every instance carries the same (head) majority answer
  std::vector<long> head(cfg.num_question_types, -1);
  for (const auto& rec : ds.train) {
    const long k = static_cast<long>(ds.majority_answer(rec));
    if (head[rec.question_type] < 0) head[rec.question_type] = k;
    CHECK(head[rec.question_type] == k);
  }
  const auto table = vpl::prior_table(ds, ds.train);
  for (const auto& row : table) {
    double mx = 0.0;
    for (double p : row) mx = std::max(mx, p);
    CHECK(mx == 1.0);  // one-hot rows
  }
}

TEST_CASE("default-config train prior puts about kappa on head answers") {
  SynthConfig cfg;
  cfg.train_size = 4000;
  cfg.test_size = 500;
  cfg.seed = 3;
  const Dataset ds = vpl::generate(cfg);
  const auto table = vpl::prior_table(ds, ds.train);
  for (const auto& row : table) {
    double mx = 0.0;
    for (double p : row) mx = std::max(mx, p);
    CHECK(mx == doctest::Approx(cfg.train_skew).epsilon(0.08));
  }
}

TEST_CASE("prior table rows sum to one") {
  const Dataset ds = vpl::generate(small_config());
  for (const auto* split : {&ds.train, &ds.test}) {
    const auto table = vpl::prior_table(ds, *split);
    for (const auto& row : table) {
      double sum = 0.0;
      for (double p : row) sum += p;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(vpl::prior_table(ds, std::vector<InstanceRecord>{}),
                  vpl::ContractError);
}

TEST_CASE("train/test prior shift exceeds the analytic bound") {
  SynthConfig cfg;
  cfg.train_size = 4000;
  cfg.test_size = 2000;
  cfg.seed = 5;
  const Dataset ds = vpl::generate(cfg);
  const double tv = vpl::prior_shift_tv(vpl::prior_table(ds, ds.train),
                                        vpl::prior_table(ds, ds.test));
  const double bound = cfg.train_skew -
                       1.0 / static_cast<double>(cfg.answers_per_type) - 0.05;
  CHECK(tv >= bound);
}

TEST_CASE("salient latent class decodes the majority answer (oracle learnability)") {
  const Dataset ds = vpl::generate(small_config());
  for (const auto* split : {&ds.train, &ds.test}) {
    double credit = 0.0;
    for (const auto& rec : *split) {
      // the generative bijection: salient class id equals the answer id
      const std::size_t predicted = rec.region_classes[rec.salient_index];
      credit += ds.answer_credit(rec, predicted);
    }
    credit /= static_cast<double>(split->size());
    CHECK(credit >= 0.95);
  }
}

TEST_CASE("soft scores are valid and majority votes define the answer set") {
  const Dataset ds = vpl::generate(small_config());
  for (const auto& rec : ds.train) {
    float mx = 0.0f;
    for (float y : rec.soft_scores) {
      CHECK(y >= 0.0f);
      CHECK(y <= 1.0f);
      mx = std::max(mx, y);
    }
    CHECK(mx > 0.0f);
    const auto gt = ds.ground_truth(rec);
    REQUIRE(!gt.empty());
    const std::size_t best = ds.votes(rec, gt.front());
    for (std::size_t k : gt) CHECK(ds.votes(rec, k) == best);
    for (std::size_t k = 0; k < rec.soft_scores.size(); ++k) {
      if (std::find(gt.begin(), gt.end(), k) == gt.end())
        CHECK(ds.votes(rec, k) < best);
    }
  }
}

TEST_CASE("exactly one region carries the instance's own type block") {
  const Dataset ds = vpl::generate(small_config());
  const std::size_t A = ds.config.answers_per_type;
  for (const auto& rec : ds.train) {
    std::size_t own = 0;
    for (std::size_t n = 0; n < rec.region_classes.size(); ++n) {
      if (rec.region_classes[n] / A == rec.question_type &&
          rec.region_classes[n] < ds.config.num_answers())
        ++own;
    }
    CHECK(own == 1);
    CHECK(rec.region_classes[rec.salient_index] / A == rec.question_type);
  }
}

TEST_CASE("dataset round-trips bit-exactly through the directory format") {
  const Dataset ds = vpl::generate(small_config());
  const auto dir = temp_dir("roundtrip");
  vpl::write_dataset(ds, dir.string());
  const Dataset back = vpl::read_dataset(dir.string());
  CHECK(datasets_equal(ds, back));
  CHECK(back.config.train_skew == ds.config.train_skew);
  CHECK(back.config.seed == ds.config.seed);
  std::filesystem::remove_all(dir);
}

TEST_CASE("wrong magic raises a format error") {
  const Dataset ds = vpl::generate(small_config());
  const auto dir = temp_dir("magic");
  vpl::write_dataset(ds, dir.string());
  const auto victim = dir / "train.features.f32";
  std::string bytes = vpl::read_file_bytes(victim.string());
  bytes[0] = 'X';
  vpl::write_file_bytes(victim.string(), bytes);
  CHECK_THROWS_AS(vpl::read_dataset(dir.string()), vpl::FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("truncated payload raises a format error citing lengths") {
  const Dataset ds = vpl::generate(small_config());
  const auto dir = temp_dir("trunc");
  vpl::write_dataset(ds, dir.string());
  const auto victim = dir / "test.scores.f32";
  std::string bytes = vpl::read_file_bytes(victim.string());
  bytes.resize(bytes.size() - 4);
  vpl::write_file_bytes(victim.string(), bytes);
  try {
    vpl::read_dataset(dir.string());
    FAIL("expected FormatError");
  } catch (const vpl::FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("expected") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("meta with missing key raises a format error") {
  const Dataset ds = vpl::generate(small_config());
  const auto dir = temp_dir("meta");
  vpl::write_dataset(ds, dir.string());
  const auto meta = dir / "meta.txt";
  std::string text = vpl::read_file_bytes(meta.string());
  const auto pos = text.find("train_skew=");
  REQUIRE(pos != std::string::npos);
  text.erase(pos, text.find('\n', pos) - pos + 1);
  vpl::write_file_bytes(meta.string(), text);
  CHECK_THROWS_AS(vpl::read_dataset(dir.string()), vpl::FormatError);
  std::filesystem::remove_all(dir);
}
