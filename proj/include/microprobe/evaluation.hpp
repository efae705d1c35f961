#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "microprobe/feature_store.hpp"

namespace microprobe {

/// K x K counts, rows = true class, columns = predicted class, both 1..K.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t num_classes) : k(num_classes), counts(num_classes * num_classes, 0) {}

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[(truth - 1) * k + pred - 1]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[(truth - 1) * k + pred - 1]; }
  /// Adds one observation; throws ValidationError for classes outside 1..K.
  void add(std::size_t truth, std::size_t pred, std::uint64_t n = 1);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

  std::uint64_t total() const;
  std::uint64_t true_positives(std::size_t c) const { return at(c, c); }
  std::uint64_t false_positives(std::size_t c) const;
  std::uint64_t false_negatives(std::size_t c) const;
};

/// Per-class F1 = 2PR / (P + R), 0 when P + R = 0. Classes with
/// TP + FP + FN = 0 are left out of the average. Throws ValidationError on an
/// empty matrix.
double macro_f1(const ConfusionMatrix& cm);
/// Same per-class scores averaged with weights proportional to class support.
double weighted_f1(const ConfusionMatrix& cm);
/// Per-class F1, NaN for classes absent from both truth and prediction.
std::vector<double> class_f1(const ConfusionMatrix& cm);

/// Pixels with truth 0 are skipped. Predictions must lie in 1..K.
ConfusionMatrix evaluate_pixels(const LabelImage& pred, const LabelImage& truth, std::size_t num_classes);
/// One count per object id; the id sets must match.
ConfusionMatrix evaluate_objects(const std::map<std::uint32_t, std::uint16_t>& pred,
                                 const std::map<std::uint32_t, std::uint16_t>& truth, std::size_t num_classes);

struct RunRecord {
  std::string method;
  std::string model;
  std::string budget;  // integer or "all"
  std::size_t fold = 0;
  std::size_t repeat = 0;
  double f1 = 0;
  double train_s = 0;
  double infer_s_per_image = 0;
};

struct RunSummary {
  std::string method;
  std::string model;
  std::string budget;
  std::size_t runs = 0;
  double f1_mean = 0;
  double f1_std = 0;  // sample (n - 1), 0 for a single run
  double train_s_mean = 0;
  double infer_s_mean = 0;
};

/// Groups by (method, model, budget) in order of first appearance.
std::vector<RunSummary> aggregate_runs(const std::vector<RunRecord>& records);

inline constexpr const char* kResultsHeader = "method,model,budget,fold,repeat,f1,train_s,infer_s_per_image";
inline constexpr const char* kSummaryHeader = "method,model,budget,runs,f1_mean,f1_std,train_s_mean,infer_s_per_image_mean";

std::string format_results_csv(const std::vector<RunRecord>& records);
void write_results_csv(const std::vector<RunRecord>& records, const std::filesystem::path& path);
std::vector<RunRecord> read_results_csv(const std::filesystem::path& path);
std::string format_summary_csv(const std::vector<RunSummary>& summaries);

}  // namespace microprobe
