#pragma once

// End-to-end experiments over a dataset manifest.
//
// Every task samples its training set per (fold, budget) from the train
// split with seed mix_seed(seed, fold): folds are independent sampling draws
// over the fixed split. Random-forest tasks additionally vary the forest seed
// per repeat; probe tasks train once per (fold, budget) and report repeat 0.
// Validation images only drive probe checkpoint selection; test images are
// only used for the reported scores.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "microprobe/classical_features.hpp"
#include "microprobe/evaluation.hpp"
#include "microprobe/feature_store.hpp"
#include "microprobe/probes.hpp"
#include "microprobe/random_forest.hpp"

namespace microprobe {

enum class Task { pixel_rf, pixel_deap, object_rf, object_obap };

Task parse_task(const std::string& text);
std::string to_string(Task task);

/// Model keys computed on the fly instead of read from the manifest.
inline constexpr const char* kFilterBankModel = "filterbank";
inline constexpr const char* kRegionPropsModel = "regionprops";

struct ObjectFeatureSpec {
  bool mean = true;
  bool std = false;
  bool area = true;

  /// Comma-separated subset of {mean, std, area}, e.g. "mean,area".
  static ObjectFeatureSpec parse(const std::string& text);
  std::string to_string() const;
  std::size_t dim(std::size_t channels) const;
};

/// Per-object feature rows for the given ids. The volume may have any size;
/// each mask pixel reads the feature cell it falls into (nearest mapping),
/// and the selected aggregators (mean, population std, both per channel, then
/// area in mask pixels) are taken over those reads. Throws ValidationError
/// for an id without pixels.
std::vector<std::vector<float>> aggregate_object_features(const FeatureVolume& volume, const InstanceMask& mask,
                                                          std::span<const std::uint32_t> ids,
                                                          const ObjectFeatureSpec& spec);

/// Object classes from an instance mask and a label image: the most frequent
/// non-zero label inside each object, ties to the lower class, 0 when the
/// object has no labeled pixel.
std::map<std::uint32_t, std::uint16_t> majority_object_labels(const InstanceMask& mask, const LabelImage& labels);

struct ProbeSettings {
  std::uint32_t input_size = 1024;
  std::size_t heads = 4;
  std::size_t width = 256;
  std::vector<std::size_t> decoder_channels = {128, 64, 32};
  std::size_t n_max = 256;
  double sigma_init = 8.0;
  bool gaussian_mask = true;
  std::uint32_t filterbank_grid = 64;  // filter-bank volumes are resized to this side for probes
  TrainConfig train;
};

struct ExperimentSpec {
  Task task = Task::pixel_rf;
  std::filesystem::path manifest;
  std::string model = kFilterBankModel;
  std::vector<std::string> budgets;  // positive integers; object tasks also accept "all" (last)
  std::size_t folds = 5;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  std::size_t workers = 0;  // threads inside forest fit / predict, 0 = default
  std::size_t jobs = 1;     // (fold, repeat, budget) cells run concurrently
  bool timings = true;      // false writes 0 for all times so reruns are byte-identical
  bool save_predictions = true;
  bool weighted_f1 = false;
  std::uint32_t rf_size = 256;
  Interpolation resize = Interpolation::bilinear;
  RFConfig rf;
  ObjectFeatureSpec aggregators;
  FilterBankConfig filterbank;
  ProbeSettings probe;

  void validate() const;
};

struct ExperimentResult {
  std::vector<RunRecord> records;  // ordered by budget, fold, repeat
  std::vector<RunSummary> summary;
};

/// Runs the task, writes results.csv and summary.csv to spec.out and, when
/// enabled, prediction files under spec.out/predictions/<budget>_f<fold>_r<repeat>/:
/// label rasters (<name>.lbl) for pixel tasks, instance_id,class_index CSVs
/// for object tasks.
ExperimentResult run_experiment(const ExperimentSpec& spec);

/// Macro (or weighted) F1 of stored predictions against a split of the
/// manifest: <dir>/<name>.lbl or .png for pixel tasks, <dir>/<name>.csv for
/// object tasks.
double evaluate_predictions(const DatasetManifest& manifest, const std::filesystem::path& dir, bool objects,
                            Split split = Split::test, bool weighted = false);

}  // namespace microprobe
