#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vpl/binary_io.hpp"
#include "vpl/errors.hpp"
#include "vpl/synth.hpp"

namespace vpl {

inline constexpr char kDatasetMagic[] = "VPLDS001";

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw FormatError("meta.txt: bad numeric value for " + key);
  }
  if (pos != s.size()) throw FormatError("meta.txt: bad numeric value for " + key);
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw FormatError("meta.txt: bad integer value for " + key);
  }
  if (pos != s.size()) throw FormatError("meta.txt: bad integer value for " + key);
  return v;
}

inline void write_split_files(const std::filesystem::path& dir,
                              const std::string& split,
                              const std::vector<InstanceRecord>& records) {
  std::string features, questions, scores, aux;
  features.append(kDatasetMagic, 8);
  questions.append(kDatasetMagic, 8);
  scores.append(kDatasetMagic, 8);
  aux.append(kDatasetMagic, 8);
  for (const auto& rec : records) {
    for (float v : rec.features) put_f32(features, v);
    put_u32(questions, rec.question_type);
    for (std::uint32_t t : rec.tokens) put_u32(questions, t);
    for (float v : rec.soft_scores) put_f32(scores, v);
    for (std::uint32_t c : rec.region_classes) put_u32(aux, c);
    put_u32(aux, rec.salient_index);
  }
  write_file_bytes((dir / (split + ".features.f32")).string(), features);
  write_file_bytes((dir / (split + ".questions.u32")).string(), questions);
  write_file_bytes((dir / (split + ".scores.f32")).string(), scores);
  write_file_bytes((dir / (split + ".aux.u32")).string(), aux);
}

inline std::vector<InstanceRecord> read_split_files(
    const std::filesystem::path& dir, const std::string& split,
    const SynthConfig& cfg, std::size_t count) {
  const std::size_t N = cfg.regions_per_image, D = cfg.feature_dim;
  const std::size_t K = cfg.num_answers();
  const std::size_t T = SynthConfig::kTokensPerQuestion;

  auto open = [&](const std::string& name, std::size_t payload) {
    const std::string path = (dir / name).string();
    ByteReader rd(read_file_bytes(path), path);
    rd.expect_magic(kDatasetMagic);
    if (rd.remaining() != payload) {
      throw FormatError(path + ": payload length mismatch, expected " +
                        std::to_string(payload + 8) + " bytes total, got " +
                        std::to_string(rd.remaining() + 8));
    }
    return rd;
  };

  ByteReader features = open(split + ".features.f32", count * N * D * 4);
  ByteReader questions = open(split + ".questions.u32", count * (1 + T) * 4);
  ByteReader scores = open(split + ".scores.f32", count * K * 4);
  ByteReader aux = open(split + ".aux.u32", count * (N + 1) * 4);

  std::vector<InstanceRecord> records(count);
  for (auto& rec : records) {
    rec.features.resize(N * D);
    for (float& v : rec.features) v = features.get_f32();
    rec.question_type = questions.get_u32();
    if (rec.question_type >= cfg.num_question_types) {
      throw FormatError(split + ".questions.u32: question type " +
                        std::to_string(rec.question_type) + " out of range at byte " +
                        std::to_string(questions.offset() - 4));
    }
    rec.tokens.resize(T);
    for (auto& t : rec.tokens) t = questions.get_u32();
    rec.soft_scores.resize(K);
    for (float& v : rec.soft_scores) v = scores.get_f32();
    rec.region_classes.resize(N);
    for (auto& c : rec.region_classes) c = aux.get_u32();
    rec.salient_index = aux.get_u32();
  }
  return records;
}

}  // namespace detail

/// Writes the dataset directory layout: meta.txt plus the per-split binary
/// files, every multi-byte value little-endian, every binary file prefixed
/// with the "VPLDS001" magic.
inline void write_dataset(const Dataset& ds, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path dir(path);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + path);

  const SynthConfig& c = ds.config;
  std::ostringstream meta;
  meta << "format_version=1\n";
  meta << "num_region_classes=" << c.num_region_classes << "\n";
  meta << "num_question_types=" << c.num_question_types << "\n";
  meta << "answers_per_type=" << c.answers_per_type << "\n";
  meta << "regions_per_image=" << c.regions_per_image << "\n";
  meta << "feature_dim=" << c.feature_dim << "\n";
  meta << "question_dim=" << c.question_dim << "\n";
  meta << "train_size=" << c.train_size << "\n";
  meta << "test_size=" << c.test_size << "\n";
  meta << "train_skew=" << detail::format_double(c.train_skew) << "\n";
  meta << "annotators_per_question=" << c.annotators_per_question << "\n";
  meta << "annotator_accuracy=" << detail::format_double(c.annotator_accuracy) << "\n";
  meta << "noise_scale=" << detail::format_double(c.noise_scale) << "\n";
  meta << "tokens_per_question=" << SynthConfig::kTokensPerQuestion << "\n";
  meta << "seed=" << c.seed << "\n";
  meta << "answers=";
  for (std::size_t k = 0; k < ds.answer_vocab.size(); ++k) {
    if (k) meta << ",";
    meta << ds.answer_vocab[k];
  }
  meta << "\n";
  write_file_bytes((dir / "meta.txt").string(), meta.str());

  detail::write_split_files(dir, "train", ds.train);
  detail::write_split_files(dir, "test", ds.test);
}

/// Reads a dataset directory back. read(write(ds)) reproduces ds bit-exactly;
/// malformed headers and truncated payloads raise FormatError.
inline Dataset read_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path dir(path);
  const std::string meta_path = (dir / "meta.txt").string();
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw IoError("cannot open " + meta_path);

  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(meta_in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(meta_path + ": line " + std::to_string(line_no) +
                        " is not key=value");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(meta_path + ": missing key " + key);
    return it->second;
  };
  if (need("format_version") != "1") {
    throw FormatError(meta_path + ": unsupported format_version " +
                      need("format_version"));
  }

  Dataset ds;
  SynthConfig& c = ds.config;
  c.num_region_classes = detail::parse_u64(need("num_region_classes"), "num_region_classes");
  c.num_question_types = detail::parse_u64(need("num_question_types"), "num_question_types");
  c.answers_per_type = detail::parse_u64(need("answers_per_type"), "answers_per_type");
  c.regions_per_image = detail::parse_u64(need("regions_per_image"), "regions_per_image");
  c.feature_dim = detail::parse_u64(need("feature_dim"), "feature_dim");
  c.question_dim = detail::parse_u64(need("question_dim"), "question_dim");
  c.train_size = detail::parse_u64(need("train_size"), "train_size");
  c.test_size = detail::parse_u64(need("test_size"), "test_size");
  c.train_skew = detail::parse_double(need("train_skew"), "train_skew");
  c.annotators_per_question =
      detail::parse_u64(need("annotators_per_question"), "annotators_per_question");
  c.annotator_accuracy =
      detail::parse_double(need("annotator_accuracy"), "annotator_accuracy");
  c.noise_scale = detail::parse_double(need("noise_scale"), "noise_scale");
  c.seed = detail::parse_u64(need("seed"), "seed");
  if (detail::parse_u64(need("tokens_per_question"), "tokens_per_question") !=
      SynthConfig::kTokensPerQuestion) {
    throw FormatError(meta_path + ": unsupported tokens_per_question");
  }

  const std::string& answers = need("answers");
  std::size_t start = 0;
  while (start <= answers.size()) {
    const auto comma = answers.find(',', start);
    const std::string token = answers.substr(
        start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!token.empty()) ds.answer_vocab.push_back(token);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (ds.answer_vocab.size() != c.num_answers()) {
    throw FormatError(meta_path + ": answer vocabulary has " +
                      std::to_string(ds.answer_vocab.size()) + " entries, expected " +
                      std::to_string(c.num_answers()));
  }

  ds.train = detail::read_split_files(dir, "train", c, c.train_size);
  ds.test = detail::read_split_files(dir, "test", c, c.test_size);
  return ds;
}

}  // namespace vpl
