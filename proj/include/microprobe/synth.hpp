#pragma once

// Synthetic datasets for desk-scale experiments.
//
// pixel: each image is a partition of the feature grid into class regions
// (nearest of a few random seed points, so region borders follow feature
// cell edges). Channel k-1 of the feature volume carries class k with
// amplitude 1, every channel gets iid N(0, noise^2), remaining channels are
// pure noise. The grayscale image shows class k as a texture with its own
// mean and contrast.
//
// object: non-overlapping discs on a dark background, radius and feature
// signature by class. Features are the cell-averaged class indicators
// (channel 0 = foreground, channel k = class k) plus noise; the image shows
// each disc with a class-dependent brightness.

#include <cstdint>
#include <filesystem>
#include <string>

#include "microprobe/feature_store.hpp"

namespace microprobe {

enum class SynthKind { pixel, object };

SynthKind parse_synth_kind(const std::string& text);

struct SynthConfig {
  SynthKind kind = SynthKind::pixel;
  std::size_t num_classes = 3;
  std::size_t n_images = 40;
  std::uint64_t seed = 0;
  double noise = 0.5;
  std::uint32_t size = 0;        // image side, 0 = 128 (pixel) / 64 (object)
  std::uint32_t stride = 0;      // image pixels per feature cell side, 0 = 8 (pixel) / 2 (object)
  std::uint32_t channels = 16;
  double val_fraction = 0.2;
  double test_fraction = 0.2;

  /// Copy with the kind-dependent defaults filled in.
  SynthConfig resolved() const;
  void validate() const;
};

/// Model key under which synthetic feature volumes are registered.
inline constexpr const char* kSynthModel = "synth";

/// Writes images/, labels/, features/synth/, (object kind) instances/ and
/// object_labels/, plus manifest.json under `out`. Returns the manifest.
DatasetManifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out);

}  // namespace microprobe
