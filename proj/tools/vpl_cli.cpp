// Command-line front end: dataset synthesis, training, evaluation, gradient
// checking, attribution inspection, and report regeneration.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "vpl/config.hpp"
#include "vpl/dataset_io.hpp"
#include "vpl/loss_checks.hpp"
#include "vpl/perturb.hpp"
#include "vpl/report.hpp"
#include "vpl/trainer.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_synth(const std::string& config_path, const std::string& out_dir) {
  vpl::SynthConfig cfg = config_path.empty()
                             ? vpl::SynthConfig{}
                             : vpl::synth_config_from_file(config_path);
  vpl::apply_seed_env(cfg);
  cfg.validate();
  const vpl::Dataset ds = vpl::generate(cfg);
  vpl::write_dataset(ds, out_dir);
  const auto train_table = vpl::prior_table(ds, ds.train);
  const auto test_table = vpl::prior_table(ds, ds.test);
  std::printf("wrote %s: train %zu, test %zu, answers %zu, prior shift (mean TV) %.3f\n",
              out_dir.c_str(), ds.train.size(), ds.test.size(),
              ds.answer_vocab.size(), vpl::prior_shift_tv(train_table, test_table));
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out_dir, const std::string& order) {
  const vpl::Dataset ds = vpl::read_dataset(data_dir);
  vpl::TrainConfig cfg = config_path.empty()
                             ? vpl::TrainConfig{}
                             : vpl::train_config_from_file(config_path);
  if (!order.empty()) {
    if (order == "algorithm1") {
      cfg.order = vpl::FinetuneOrder::ClassThenRelation;
    } else if (order == "prose") {
      cfg.order = vpl::FinetuneOrder::RelationThenClass;
    } else {
      throw vpl::ConfigError("--order must be algorithm1 or prose");
    }
  }
  vpl::apply_seed_env(cfg);
  cfg.validate();

  vpl::Trainer trainer(ds, cfg);
  const vpl::TrainResult result = trainer.run();
  vpl::export_run(out_dir, result, ds);
  for (const auto& em : result.history) {
    std::printf("epoch %2zu  %-13s lvqa %8.4f lvib %8.4f lb %7.4f lc %8.4f "
                "train %.4f test %.4f lr %.2e K %zu\n",
                em.epoch, em.phase.c_str(), em.loss_vqa, em.loss_vib, em.loss_b,
                em.loss_c, em.train_acc, em.test_acc, em.lr, em.k);
  }
  std::printf("%s", vpl::run_summary(result.history).c_str());
  std::printf("run written to %s\n", out_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint,
             const std::string& split) {
  const vpl::Dataset ds = vpl::read_dataset(data_dir);
  const vpl::ParamSet params = vpl::load_checkpoint(checkpoint);
  const auto& records = split == "train" ? ds.train : ds.test;

  const auto vqa = vpl::evaluate(params, ds, records, vpl::EvalMode::VqaAccuracy);
  const auto soft = vpl::evaluate(params, ds, records, vpl::EvalMode::TrainTarget);

  std::printf("split: %s (%zu instances)\n", split.c_str(), records.size());
  std::printf("vqa-accuracy (min(1, votes/3)): %.4f\n", vqa.overall);
  std::printf("train-target (mean soft score): %.4f\n", soft.overall);
  for (std::size_t q = 0; q < vqa.per_type.size(); ++q) {
    std::printf("  type %zu: vqa-accuracy %.4f over %zu instances\n", q,
                vqa.per_type[q], vqa.per_type_counts[q]);
  }
  const auto prior = vpl::prior_only_baseline(ds);
  const auto oracle = vpl::oracle_baseline(ds);
  std::printf("baselines: prior-only %.4f, salient-oracle %.4f on this split\n",
              split == "train" ? prior.train : prior.test,
              split == "train" ? oracle.train : oracle.test);

  // CSV alongside the checkpoint
  const fs::path csv =
      fs::path(checkpoint).parent_path() / ("eval_" + split + ".csv");
  std::ostringstream out;
  out << "question_type,count,vqa_accuracy,train_target\n";
  char buf[96];
  for (std::size_t q = 0; q < vqa.per_type.size(); ++q) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g\n", q,
                  vqa.per_type_counts[q], vqa.per_type[q], soft.per_type[q]);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "overall,%zu,%.17g,%.17g\n", records.size(),
                vqa.overall, soft.overall);
  out << buf;
  vpl::write_file_bytes(csv.string(), out.str());
  std::printf("per-type report written to %s\n", csv.string().c_str());
  return 0;
}

int cmd_gradcheck(const std::string& module, double eps) {
  std::vector<vpl::LossCheckReport> reports;
  if (module == "all" || module == "tensor")
    reports.push_back(vpl::gradcheck_tensor_ops(eps));
  if (module == "all" || module == "vib")
    reports.push_back(vpl::gradcheck_vib_chain(eps));
  if (module == "all" || module == "losses") {
    for (auto& r : vpl::gradcheck_losses(eps)) reports.push_back(std::move(r));
  }
  if (reports.empty())
    throw vpl::ConfigError("--module must be all, tensor, vib, or losses");

  bool ok = true;
  for (const auto& r : reports) {
    const bool pass = r.max_rel_err < 1e-4;
    ok = ok && pass;
    std::printf("%-12s max relative error %.3e  [%s]\n", r.name.c_str(),
                r.max_rel_err, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 1;
}

int cmd_inspect(const std::string& data_dir, const std::string& checkpoint,
                const std::string& out_csv) {
  const vpl::Dataset ds = vpl::read_dataset(data_dir);
  const vpl::ParamSet params = vpl::load_checkpoint(checkpoint);
  std::ostringstream out;
  out << "instance_id,region_index,score,is_salient\n";
  char buf[96];
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const auto& rec = ds.train[i];
    const auto cs = vpl::contribution_scores(
        params, rec.features, ds.config.regions_per_image, ds.config.feature_dim,
        rec.tokens, ds.ground_truth(rec), i);
    const auto salient = vpl::salient_set(cs.scores, 2);
    for (std::size_t n = 0; n < cs.scores.size(); ++n) {
      const bool in_salient =
          std::find(salient.begin(), salient.end(), n) != salient.end();
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%d\n", i, n, cs.scores[n],
                    in_salient ? 1 : 0);
      out << buf;
    }
  }
  vpl::write_file_bytes(out_csv, out.str());
  std::printf("wrote %s (%zu instances)\n", out_csv.c_str(), ds.train.size());
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const auto history = vpl::read_metrics_csv((dir / "metrics.csv").string());
  vpl::write_curves_svg((dir / "curves.svg").string(), history);
  std::printf("%s", vpl::run_summary(history).c_str());
  std::printf("curves regenerated at %s\n", (dir / "curves.svg").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"visual perturbation-aware collaborative learning toolkit"};
  app.require_subcommand(1);

  std::string synth_config, synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", synth_config, "key=value config file");
  synth->add_option("--out", synth_out, "output dataset directory")->required();

  std::string train_data, train_config, train_out, train_order;
  auto* train = app.add_subcommand("train", "run the collaborative training pipeline");
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--config", train_config, "key=value config file");
  train->add_option("--out", train_out, "run output directory")->required();
  train->add_option("--order", train_order, "finetune order: algorithm1 | prose")
      ->check(CLI::IsMember({"algorithm1", "prose"}));

  std::string eval_data, eval_checkpoint, eval_split = "test";
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  evalc->add_option("--data", eval_data, "dataset directory")->required();
  evalc->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  evalc->add_option("--split", eval_split, "train | test")
      ->check(CLI::IsMember({"train", "test"}));

  std::string gc_module = "all";
  double gc_eps = 1e-5;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--module", gc_module, "all | tensor | vib | losses")
      ->check(CLI::IsMember({"all", "tensor", "vib", "losses"}));
  gradcheck->add_option("--eps", gc_eps, "central difference step");

  std::string ins_data, ins_checkpoint, ins_out;
  auto* inspect = app.add_subcommand("inspect", "dump contribution scores as CSV");
  inspect->add_option("--data", ins_data, "dataset directory")->required();
  inspect->add_option("--checkpoint", ins_checkpoint, "checkpoint file")->required();
  inspect->add_option("--out", ins_out, "output CSV path")->required();

  std::string report_run;
  auto* report = app.add_subcommand("report", "regenerate curves and summary");
  report->add_option("--run", report_run, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_config, synth_out);
    if (train->parsed()) return cmd_train(train_data, train_config, train_out, train_order);
    if (evalc->parsed()) return cmd_eval(eval_data, eval_checkpoint, eval_split);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_module, gc_eps);
    if (inspect->parsed()) return cmd_inspect(ins_data, ins_checkpoint, ins_out);
    if (report->parsed()) return cmd_report(report_run);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
