#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/params.hpp"
#include "vpl/synth.hpp"
#include "vpl/trainer.hpp"

namespace vpl {

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_metrics_csv(const std::string& path,
                              const std::vector<EpochMetrics>& history) {
  if (history.empty()) throw ContractError("write_metrics_csv: empty history");
  std::ostringstream out;
  out << "epoch,phase,loss_vqa,loss_vib,loss_b,loss_c,loss_total,"
         "train_acc,test_acc,lr,k";
  const std::size_t q_types = history.front().test_acc_per_type.size();
  for (std::size_t q = 0; q < q_types; ++q) out << ",test_acc_type_" << q;
  out << "\n";
  for (const auto& em : history) {
    out << em.epoch << "," << em.phase << "," << detail::g17(em.loss_vqa) << ","
        << detail::g17(em.loss_vib) << "," << detail::g17(em.loss_b) << ","
        << detail::g17(em.loss_c) << "," << detail::g17(em.loss_total) << ","
        << detail::g17(em.train_acc) << "," << detail::g17(em.test_acc) << ","
        << detail::g17(em.lr) << "," << em.k;
    for (double v : em.test_acc_per_type) out << "," << detail::g17(v);
    out << "\n";
  }
  write_file_bytes(path, out.str());
}

inline std::vector<EpochMetrics> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty metrics file");
  std::size_t q_types = 0;
  {
    std::stringstream header(line);
    std::string col;
    while (std::getline(header, col, ','))
      if (col.rfind("test_acc_type_", 0) == 0) ++q_types;
  }
  std::vector<EpochMetrics> history;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    EpochMetrics em;
    auto next = [&]() {
      if (!std::getline(row, cell, ','))
        throw FormatError(path + ": short row in metrics file");
      return cell;
    };
    em.epoch = std::stoull(next());
    em.phase = next();
    em.loss_vqa = std::stod(next());
    em.loss_vib = std::stod(next());
    em.loss_b = std::stod(next());
    em.loss_c = std::stod(next());
    em.loss_total = std::stod(next());
    em.train_acc = std::stod(next());
    em.test_acc = std::stod(next());
    em.lr = std::stod(next());
    em.k = std::stoull(next());
    for (std::size_t q = 0; q < q_types; ++q)
      em.test_acc_per_type.push_back(std::stod(next()));
    history.push_back(std::move(em));
  }
  if (history.empty()) throw FormatError(path + ": no metric rows");
  return history;
}

inline void write_embeddings_csv(const std::string& path, const ParamSet& params,
                                 const Dataset& ds) {
  const ModelConfig model = config_from_params(params);
  std::ostringstream out;
  out << "question_type,true_answer,predicted_answer";
  for (std::size_t d = 0; d < model.d_z; ++d) out << ",mu_" << d;
  out << "\n";
  for (const auto& rec : ds.test) {
    const Prediction pred =
        predict_instance(params, view_of(rec), ds.config.regions_per_image,
                         ds.config.feature_dim);
    out << rec.question_type << "," << ds.majority_answer(rec) << ","
        << pred.answer;
    for (double v : pred.mu) out << "," << detail::g17(v);
    out << "\n";
  }
  write_file_bytes(path, out.str());
}

namespace detail {

struct Series {
  std::string label;
  std::string color;
  std::vector<double> values;
};

inline void append_chart(std::ostringstream& svg, double x0, double y0,
                         double width, double height,
                         const std::vector<Series>& series,
                         const std::string& title) {
  double lo = 0.0, hi = 1e-9;
  for (const auto& s : series)
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double span = hi - lo;
  auto px = [&](std::size_t i, std::size_t n) {
    return x0 + width * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5);
  };
  auto py = [&](double v) { return y0 + height * (1.0 - (v - lo) / span); };

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "<rect x='%.1f' y='%.1f' width='%.1f' height='%.1f' "
                "fill='none' stroke='#888'/>\n",
                x0, y0, width, height);
  svg << buf;
  svg << "<text x='" << x0 << "' y='" << y0 - 6 << "' font-size='13'>" << title
      << "</text>\n";
  std::snprintf(buf, sizeof(buf),
                "<text x='%.1f' y='%.1f' font-size='10'>%.4g</text>\n",
                x0 + width + 4, y0 + 10, hi);
  svg << buf;
  std::snprintf(buf, sizeof(buf),
                "<text x='%.1f' y='%.1f' font-size='10'>%.4g</text>\n",
                x0 + width + 4, y0 + height, lo);
  svg << buf;

  double ly = y0 + 14;
  for (const auto& s : series) {
    svg << "<polyline fill='none' stroke='" << s.color
        << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px(i, s.values.size()),
                    py(s.values[i]));
      svg << buf;
    }
    svg << "'/>\n";
    svg << "<text x='" << x0 + 8 << "' y='" << ly << "' font-size='11' fill='"
        << s.color << "'>" << s.label << "</text>\n";
    ly += 13;
  }
}

}  // namespace detail

/// Loss and accuracy curves as a standalone SVG; no external renderer.
inline void write_curves_svg(const std::string& path,
                             const std::vector<EpochMetrics>& history) {
  if (history.empty()) throw ContractError("write_curves_svg: empty history");
  auto collect = [&](auto member) {
    std::vector<double> out;
    out.reserve(history.size());
    for (const auto& em : history) out.push_back(member(em));
    return out;
  };
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='760' height='560' "
         "viewBox='0 0 760 560'>\n";
  svg << "<rect width='760' height='560' fill='white'/>\n";
  detail::append_chart(
      svg, 50, 30, 620, 220,
      {{"loss_total", "#d62728", collect([](const EpochMetrics& e) { return e.loss_total; })},
       {"loss_vqa", "#1f77b4", collect([](const EpochMetrics& e) { return e.loss_vqa; })},
       {"loss_vib", "#2ca02c", collect([](const EpochMetrics& e) { return e.loss_vib; })},
       {"loss_b", "#9467bd", collect([](const EpochMetrics& e) { return e.loss_b; })},
       {"loss_c", "#8c564b", collect([](const EpochMetrics& e) { return e.loss_c; })}},
      "losses per epoch");
  detail::append_chart(
      svg, 50, 300, 620, 220,
      {{"train_acc", "#1f77b4", collect([](const EpochMetrics& e) { return e.train_acc; })},
       {"test_acc", "#d62728", collect([](const EpochMetrics& e) { return e.test_acc; })}},
      "accuracy per epoch");
  svg << "</svg>\n";
  write_file_bytes(path, svg.str());
}

inline std::string run_summary(const std::vector<EpochMetrics>& history) {
  const EpochMetrics& last = history.back();
  std::ostringstream out;
  out << "epochs: " << history.size() << "\n";
  out << "final phase: " << last.phase << "\n";
  char buf[120];
  std::snprintf(buf, sizeof(buf), "final train acc: %.4f\n", last.train_acc);
  out << buf;
  std::snprintf(buf, sizeof(buf), "final test acc:  %.4f\n", last.test_acc);
  out << buf;
  double best = 0.0;
  std::size_t best_epoch = 0;
  for (const auto& em : history) {
    if (em.test_acc > best) {
      best = em.test_acc;
      best_epoch = em.epoch;
    }
  }
  std::snprintf(buf, sizeof(buf), "best test acc:   %.4f (epoch %zu)\n", best,
                best_epoch);
  out << buf;
  return out.str();
}

/// Writes the run directory: checkpoint, metrics.csv, embeddings.csv,
/// curves.svg.
inline void export_run(const std::string& out_dir, const TrainResult& result,
                       const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create run directory " + out_dir);
  const fs::path dir(out_dir);
  save_checkpoint(result.params, (dir / "model.ckpt").string());
  write_metrics_csv((dir / "metrics.csv").string(), result.history);
  write_embeddings_csv((dir / "embeddings.csv").string(), result.params, ds);
  write_curves_svg((dir / "curves.svg").string(), result.history);
}

}  // namespace vpl
