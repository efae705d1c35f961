#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "microprobe/feature_store.hpp"

namespace microprobe {

/// Row-major feature matrix with one class label (1..K) per row.
struct LabeledSample {
  std::size_t dim = 0;
  std::vector<float> features;
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const float> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
  void push_back(std::span<const float> x, std::uint16_t label);
  LabeledSample subset(std::span<const std::size_t> rows) const;
};

struct PixelBudget {
  std::size_t n_pixels = 0;
  std::uint64_t seed = 0;
};

struct ObjectBudget {
  std::optional<std::size_t> n_objects;  // nullopt = all
  std::uint64_t seed = 0;

  bool is_all() const { return !n_objects; }
  std::string to_string() const { return n_objects ? std::to_string(*n_objects) : "all"; }
  /// "all" or a positive integer.
  static ObjectBudget parse(const std::string& text, std::uint64_t seed = 0);
};

/// Sequential draws without replacement where each remaining item has weight
/// 1 / (remaining items of its class); equivalently a class is picked
/// uniformly among non-exhausted classes, then an item within it. Items with
/// class 0 are never drawn. Returns indices in draw order, so a larger budget
/// with the same seed extends a smaller one. A budget covering every labeled
/// item returns them all in pool order.
std::vector<std::size_t> sample_inverse_frequency(std::span<const std::uint16_t> classes, std::size_t budget,
                                                  std::uint64_t seed);

LabeledSample sample_pixels_rf(const LabeledSample& pool, const PixelBudget& budget);

std::vector<std::size_t> sample_objects(std::span<const std::uint16_t> classes, const ObjectBudget& budget);

/// Per-image sets of flat pixel indices (sorted) for probe training.
/// n < #images: n distinct images, one pixel each, class uniform over the
/// classes present in the image. Otherwise floor(n / #images) pixels per
/// image plus one extra for a random subset of n mod #images images, split
/// as evenly as possible over the image's classes; a class that runs out
/// contributes all its pixels and the rest goes to the other classes.
std::vector<std::vector<std::size_t>> sample_pixels_deap(std::span<const LabelImage> labels,
                                                         const PixelBudget& budget);

}  // namespace microprobe
