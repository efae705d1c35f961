#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "microprobe/sampling.hpp"

namespace microprobe {

struct RFConfig {
  std::size_t n_trees = 100;
  std::size_t max_depth = 0;  // 0 = unlimited
  std::size_t min_samples_leaf = 1;
  std::size_t max_features = 0;  // 0 = floor(sqrt(dim))
  bool bootstrap = true;
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0 = default_workers()
};

struct DecisionTree {
  struct Node {
    std::int32_t feature = -1;  // -1 marks a leaf
    float threshold = 0;        // go left when x[feature] <= threshold
    std::uint32_t left = 0;     // child index, or leaf slot for leaves
    std::uint32_t right = 0;
  };
  std::vector<Node> nodes;            // root at 0
  std::vector<std::uint32_t> counts;  // K per leaf slot

  std::uint32_t leaf_for(std::span<const float> x) const;
  std::span<const std::uint32_t> leaf_counts(std::uint32_t slot, std::size_t k) const {
    return {counts.data() + slot * k, k};
  }
};

/// Classes are stored 0-based internally; the API speaks 1..K.
struct RandomForestModel {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::vector<DecisionTree> trees;
};

/// Gini trees on bootstrap resamples. Rows are put into a canonical order
/// before fitting, so the result does not depend on the input order.
/// `num_classes` = 0 takes the largest label.
RandomForestModel rf_fit(const LabeledSample& sample, const RFConfig& cfg, std::size_t num_classes = 0);

/// Majority vote over trees, ties to the lowest class. `features` is
/// row-major n x dim.
std::vector<std::uint16_t> rf_predict(const RandomForestModel& model, std::span<const float> features,
                                      std::size_t workers = 0);
/// Row-major n x K mean of normalised leaf counts.
std::vector<double> rf_predict_proba(const RandomForestModel& model, std::span<const float> features,
                                     std::size_t workers = 0);

std::vector<std::uint8_t> encode_forest(const RandomForestModel& model);
RandomForestModel decode_forest(std::span<const std::uint8_t> bytes);
void save_forest(const RandomForestModel& model, const std::filesystem::path& path);
RandomForestModel load_forest(const std::filesystem::path& path);

}  // namespace microprobe
