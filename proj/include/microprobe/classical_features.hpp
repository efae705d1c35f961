#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "microprobe/feature_store.hpp"

namespace microprobe {

struct FilterBankConfig {
  std::vector<double> scales = {0.5, 1.0, 2.0, 4.0};
  bool gaussian = true;
  bool laplacian = true;
  bool gradient_magnitude = true;
  bool difference_of_gaussians = true;
  bool structure_tensor = true;  // 2 channels per scale
  bool hessian = true;           // 2 channels per scale

  /// Throws ValidationError unless scales are positive and strictly ascending.
  void validate() const;
  std::size_t channels() const;
  /// Channel names in output order: per scale the enabled filters, then the
  /// difference-of-Gaussians channels between consecutive scales.
  std::vector<std::string> channel_names() const;
};

/// Sampled Gaussian and derivative kernels truncated at ceil(3 sigma).
/// Derivative kernels are scaled so that they are exact on x (first order)
/// and x^2 / 2 (second order).
std::vector<double> gaussian_kernel(double sigma);
std::vector<double> gaussian_derivative_kernel(double sigma, int order);

/// Separable correlation along rows then columns with half-sample symmetric
/// reflection at the borders. `image` is row-major height x width.
std::vector<double> separable_filter(const std::vector<double>& image, std::size_t height, std::size_t width,
                                     const std::vector<double>& row_kernel, const std::vector<double>& col_kernel);

/// Index into [0, n) after half-sample symmetric reflection (…1 0 | 0 1 … n-1 | n-1 n-2 …).
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

FeatureVolume pixel_filter_bank(const Image& image, const FilterBankConfig& cfg = {});

struct RegionFeatures {
  double area = 0;
  double mean_intensity = 0;
  double max_intensity = 0;
  double min_intensity = 0;
  double perimeter = 0;
  double eccentricity = 0;
  double solidity = 0;
  double extent = 0;
  double major_axis_length = 0;
  double minor_axis_length = 0;
  double orientation = 0;  // major axis angle from the column axis, radians in (-pi/2, pi/2]
  double centroid_row = 0;
  double centroid_col = 0;

  static constexpr std::size_t kCount = 13;
  std::array<double, kCount> to_array() const;
  static const std::array<const char*, kCount>& names();
};

/// Region properties for every id in `mask` (or only `ids` when given; ids
/// with no pixels are skipped with a warning). Image and mask must share a
/// shape.
std::map<std::uint32_t, RegionFeatures> region_props(const Image& image, const InstanceMask& mask,
                                                     const std::optional<std::vector<std::uint32_t>>& ids = {});

}  // namespace microprobe
