#include "microprobe/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "microprobe/error.hpp"

namespace microprobe {

void ConfusionMatrix::add(std::size_t truth, std::size_t pred, std::uint64_t n) {
  if (truth < 1 || truth > k || pred < 1 || pred > k) {
    throw ValidationError("confusion matrix: class pair (" + std::to_string(truth) + ", " + std::to_string(pred) +
                          ") outside 1.." + std::to_string(k));
  }
  at(truth, pred) += n;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.k != k) throw ShapeError("confusion matrix: cannot merge K=" + std::to_string(other.k) + " into K=" + std::to_string(k));
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::false_positives(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t t = 1; t <= k; ++t) s += t == c ? 0 : at(t, c);
  return s;
}

std::uint64_t ConfusionMatrix::false_negatives(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t p = 1; p <= k; ++p) s += p == c ? 0 : at(c, p);
  return s;
}

std::vector<double> class_f1(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.k, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 1; c <= cm.k; ++c) {
    const double tp = static_cast<double>(cm.true_positives(c));
    const double fp = static_cast<double>(cm.false_positives(c));
    const double fn = static_cast<double>(cm.false_negatives(c));
    if (tp + fp + fn == 0) continue;
    // 2PR / (P + R) with P = TP / (TP + FP), R = TP / (TP + FN), in one division.
    out[c - 1] = 2 * tp / (2 * tp + fp + fn);
  }
  return out;
}

double macro_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ValidationError("macro F1 undefined: no labeled items were evaluated");
  double sum = 0;
  std::size_t n = 0;
  for (double f : class_f1(cm)) {
    if (std::isnan(f)) continue;
    sum += f;
    ++n;
  }
  return sum / static_cast<double>(n);
}

double weighted_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ValidationError("weighted F1 undefined: no labeled items were evaluated");
  const auto f = class_f1(cm);
  double sum = 0, weight = 0;
  for (std::size_t c = 1; c <= cm.k; ++c) {
    const double support = static_cast<double>(cm.true_positives(c) + cm.false_negatives(c));
    if (support == 0) continue;
    sum += support * f[c - 1];
    weight += support;
  }
  return sum / weight;
}

ConfusionMatrix evaluate_pixels(const LabelImage& pred, const LabelImage& truth, std::size_t num_classes) {
  if (pred.height != truth.height || pred.width != truth.width) {
    throw ShapeError("evaluate_pixels: prediction is " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     ", truth is " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth.data[i] != 0) cm.add(truth.data[i], pred.data[i]);
  }
  return cm;
}

ConfusionMatrix evaluate_objects(const std::map<std::uint32_t, std::uint16_t>& pred,
                                 const std::map<std::uint32_t, std::uint16_t>& truth, std::size_t num_classes) {
  std::string missing, extra;
  for (const auto& [id, _] : truth)
    if (!pred.contains(id)) missing += (missing.empty() ? "" : ", ") + std::to_string(id);
  for (const auto& [id, _] : pred)
    if (!truth.contains(id)) extra += (extra.empty() ? "" : ", ") + std::to_string(id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "evaluate_objects: id sets differ;";
    if (!missing.empty()) msg += " no prediction for [" + missing + "]";
    if (!extra.empty()) msg += " no truth for [" + extra + "]";
    throw ValidationError(msg);
  }
  ConfusionMatrix cm(num_classes);
  for (const auto& [id, t] : truth) cm.add(t, pred.at(id));
  return cm;
}

std::vector<RunSummary> aggregate_runs(const std::vector<RunRecord>& records) {
  std::vector<RunSummary> out;
  std::vector<std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    std::size_t g = 0;
    while (g < out.size() && !(out[g].method == r.method && out[g].model == r.model && out[g].budget == r.budget)) ++g;
    if (g == out.size()) {
      out.push_back({r.method, r.model, r.budget});
      groups.emplace_back();
    }
    groups[g].push_back(&r);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    auto& s = out[g];
    const double n = static_cast<double>(groups[g].size());
    s.runs = groups[g].size();
    for (const auto* r : groups[g]) {
      s.f1_mean += r->f1;
      s.train_s_mean += r->train_s;
      s.infer_s_mean += r->infer_s_per_image;
    }
    s.f1_mean /= n;
    s.train_s_mean /= n;
    s.infer_s_mean /= n;
    if (s.runs > 1) {
      double ss = 0;
      for (const auto* r : groups[g]) ss += (r->f1 - s.f1_mean) * (r->f1 - s.f1_mean);
      s.f1_std = std::sqrt(ss / (n - 1));
    }
  }
  return out;
}

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string format_results_csv(const std::vector<RunRecord>& records) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : records) {
    out += r.method + "," + r.model + "," + r.budget + "," + std::to_string(r.fold) + "," + std::to_string(r.repeat) +
           "," + fixed(r.f1) + "," + fixed(r.train_s) + "," + fixed(r.infer_s_per_image) + "\n";
  }
  return out;
}

void write_results_csv(const std::vector<RunRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << format_results_csv(records);
}

std::vector<RunRecord> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read results " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) {
    throw ValidationError(path.string() + ": expected header '" + kResultsHeader + "'");
  }
  std::vector<RunRecord> out;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 8) throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected 8 fields");
    try {
      out.push_back({f[0], f[1], f[2], std::stoul(f[3]), std::stoul(f[4]), std::stod(f[5]), std::stod(f[6]),
                     std::stod(f[7])});
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

std::string format_summary_csv(const std::vector<RunSummary>& summaries) {
  std::string out = std::string(kSummaryHeader) + "\n";
  for (const auto& s : summaries) {
    out += s.method + "," + s.model + "," + s.budget + "," + std::to_string(s.runs) + "," + fixed(s.f1_mean) + "," +
           fixed(s.f1_std) + "," + fixed(s.train_s_mean) + "," + fixed(s.infer_s_mean) + "\n";
  }
  return out;
}

}  // namespace microprobe
