#include "microprobe/classical_features.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "microprobe/error.hpp"
#include "microprobe/rng.hpp"

using namespace microprobe;

namespace {

Image random_image(std::uint32_t h, std::uint32_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform() * 100.0);
  return img;
}

std::size_t channel_index(const FilterBankConfig& cfg, const std::string& name) {
  const auto names = cfg.channel_names();
  auto it = std::find(names.begin(), names.end(), name);
  EXPECT_NE(it, names.end()) << name;
  return static_cast<std::size_t>(it - names.begin());
}

}  // namespace

TEST(Kernels, ReflectIndexIsHalfSampleSymmetric) {
  const std::ptrdiff_t in[] = {-1, -2, -3, -4, -6, 0, 2, 3, 4, 5, 6, 7};
  const std::size_t want[] = {0, 1, 2, 2, 0, 0, 2, 2, 1, 0, 0, 1};
  for (std::size_t i = 0; i < std::size(in); ++i) EXPECT_EQ(reflect_index(in[i], 3), want[i]) << in[i];
}

TEST(Kernels, NormalisationAndMoments) {
  for (double s : {0.5, 1.0, 2.0, 4.0}) {
    const auto g = gaussian_kernel(s);
    EXPECT_EQ(g.size(), 2 * static_cast<std::size_t>(std::ceil(3 * s)) + 1);
    double sum = 0, m1 = 0, m2 = 0, s2 = 0;
    const auto d1 = gaussian_derivative_kernel(s, 1);
    const auto d2 = gaussian_derivative_kernel(s, 2);
    const int r = static_cast<int>(g.size() / 2);
    for (int i = -r; i <= r; ++i) {
      sum += g[i + r];
      m1 += i * d1[i + r];
      m2 += 0.5 * i * i * d2[i + r];
      s2 += d2[i + r];
    }
    EXPECT_NEAR(sum, 1.0, 1e-14);
    EXPECT_NEAR(m1, 1.0, 1e-14);
    EXPECT_NEAR(m2, 1.0, 1e-14);
    EXPECT_NEAR(s2, 0.0, 1e-14);
  }
}

TEST(FilterBank, DefaultChannelLayout) {
  FilterBankConfig cfg;
  EXPECT_EQ(cfg.channels(), 4u * 7u + 3u);
  const auto v = pixel_filter_bank(random_image(9, 7, 1), cfg);
  EXPECT_EQ(v.height, 9u);
  EXPECT_EQ(v.width, 7u);
  EXPECT_EQ(v.channels, 31u);
  FilterBankConfig only;
  only.laplacian = only.gradient_magnitude = only.structure_tensor = only.hessian = only.difference_of_gaussians = false;
  EXPECT_EQ(only.channels(), 4u);
}

TEST(FilterBank, RejectsBadScales) {
  FilterBankConfig cfg;
  cfg.scales = {1.0, 0.5};
  EXPECT_THROW(pixel_filter_bank(random_image(4, 4, 1), cfg), ValidationError);
  cfg.scales = {0.0};
  EXPECT_THROW(pixel_filter_bank(random_image(4, 4, 1), cfg), ValidationError);
}

TEST(FilterBank, ConstantImage) {
  FilterBankConfig cfg;
  const auto v = pixel_filter_bank(Image(20, 17, 42.0f), cfg);
  const auto names = cfg.channel_names();
  for (std::size_t ch = 0; ch < names.size(); ++ch) {
    const bool smooth = names[ch].rfind("gaussian@", 0) == 0;
    for (std::size_t i = 0; i < v.pixels(); ++i) {
      if (smooth) {
        EXPECT_NEAR(v.values[i * v.channels + ch], 42.0, 1e-5) << names[ch];
      } else {
        EXPECT_NEAR(v.values[i * v.channels + ch], 0.0, 1e-9) << names[ch];
      }
    }
  }
}

TEST(FilterBank, RampGradientMagnitudeIsOne) {
  // d/dx of x smoothed by any normalised symmetric kernel is 1.
  Image img(40, 64);
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t c = 0; c < 64; ++c) img.at(r, c) = static_cast<float>(c);
  FilterBankConfig cfg;
  const auto v = pixel_filter_bank(img, cfg);
  for (double s : cfg.scales) {
    char name[32];
    std::snprintf(name, sizeof name, "gradient_magnitude@%g", s);
    const std::size_t ch = channel_index(cfg, name);
    const std::size_t margin = static_cast<std::size_t>(std::ceil(3 * s));
    for (std::size_t r = 0; r < 40; ++r)
      for (std::size_t c = margin; c + margin < 64; ++c) EXPECT_NEAR(v.at(r, c, ch), 1.0, 1e-6) << name;
  }
}

TEST(FilterBank, GaussianBlobMatchesDirectConvolution) {
  const int n = 33;
  const double sig_img = 3.0, sigma = 1.0;
  Image img(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      img.at(r, c) = static_cast<float>(std::exp(-((r - 16.0) * (r - 16.0) + (c - 16.0) * (c - 16.0)) /
                                                 (2 * sig_img * sig_img)));
  // Oracle: full 2D kernel, truncated at ceil(3 sigma), mirrored borders.
  const int rad = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k2((2 * rad + 1) * (2 * rad + 1));
  double total = 0;
  for (int i = -rad; i <= rad; ++i)
    for (int j = -rad; j <= rad; ++j)
      total += k2[(i + rad) * (2 * rad + 1) + j + rad] = std::exp(-(i * i + j * j) / (2 * sigma * sigma));
  auto mirror = [&](int i) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - i - 1 : i); };
  auto oracle = [&](int r, int c) {
    double acc = 0;
    for (int i = -rad; i <= rad; ++i)
      for (int j = -rad; j <= rad; ++j)
        acc += k2[(i + rad) * (2 * rad + 1) + j + rad] / total * img.at(mirror(r + i), mirror(c + j));
    return acc;
  };
  FilterBankConfig cfg;
  cfg.scales = {sigma};
  const auto v = pixel_filter_bank(img, cfg);
  const std::size_t ch = channel_index(cfg, "gaussian@1");
  EXPECT_NEAR(v.at(16, 16, ch), oracle(16, 16), 1e-6);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) EXPECT_NEAR(v.at(r, c, ch), oracle(r, c), 1e-6);
}

TEST(FilterBank, EigenvaluesOrdered) {
  FilterBankConfig cfg;
  const auto v = pixel_filter_bank(random_image(24, 30, 9), cfg);
  for (double s : cfg.scales) {
    for (const char* base : {"structure_tensor_ev", "hessian_ev"}) {
      char n1[64], n2[64];
      std::snprintf(n1, sizeof n1, "%s1@%g", base, s);
      std::snprintf(n2, sizeof n2, "%s2@%g", base, s);
      const std::size_t a = channel_index(cfg, n1), b = channel_index(cfg, n2);
      for (std::size_t i = 0; i < v.pixels(); ++i)
        EXPECT_GE(v.values[i * v.channels + a], v.values[i * v.channels + b]);
    }
  }
}

TEST(FilterBank, TranslationEquivariantInInterior) {
  FilterBankConfig cfg;
  cfg.scales = {0.5, 1.0};
  const std::size_t shift = 3, margin = 8;
  const auto img = random_image(32, 40, 4);
  Image moved(32, 40);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 40; ++c) moved.at(r, c) = img.at(r, c >= shift ? c - shift : 0);
  const auto a = pixel_filter_bank(img, cfg);
  const auto b = pixel_filter_bank(moved, cfg);
  for (std::size_t r = margin; r + margin < 32; ++r)
    for (std::size_t c = margin; c + margin + shift < 40; ++c)
      for (std::size_t ch = 0; ch < a.channels; ++ch)
        EXPECT_NEAR(b.at(r, c + shift, ch), a.at(r, c, ch), 1e-3 + 1e-5 * std::abs(a.at(r, c, ch)));
}

TEST(RegionProps, SolidSquare) {
  Image img(5, 5, 2.0f);
  img.at(2, 2) = 7.0f;
  InstanceMask m(5, 5);
  for (std::size_t r = 1; r <= 3; ++r)
    for (std::size_t c = 1; c <= 3; ++c) m.at(r, c) = 4;
  const auto props = region_props(img, m);
  ASSERT_EQ(props.size(), 1u);
  const auto& f = props.at(4);
  EXPECT_EQ(f.area, 9.0);
  EXPECT_DOUBLE_EQ(f.extent, 1.0);
  EXPECT_DOUBLE_EQ(f.solidity, 1.0);
  EXPECT_DOUBLE_EQ(f.centroid_row, 2.0);
  EXPECT_DOUBLE_EQ(f.centroid_col, 2.0);
  EXPECT_EQ(f.perimeter, 12.0);
  EXPECT_DOUBLE_EQ(f.max_intensity, 7.0);
  EXPECT_DOUBLE_EQ(f.min_intensity, 2.0);
  EXPECT_DOUBLE_EQ(f.mean_intensity, (8 * 2.0 + 7.0) / 9.0);
  EXPECT_NEAR(f.eccentricity, 0.0, 1e-12);
}

TEST(RegionProps, HorizontalBar) {
  InstanceMask m(3, 7);
  for (std::size_t c = 1; c <= 5; ++c) m.at(1, c) = 1;
  const auto f = region_props(Image(3, 7, 1.0f), m).at(1);
  // Oracle: covariance of the five pixel coordinates (row, col).
  double mr = 0, mc = 0;
  for (int c = 1; c <= 5; ++c) mc += c / 5.0;
  mr = 1.0;
  double crr = 0, ccc = 0, crc = 0;
  for (int c = 1; c <= 5; ++c) {
    ccc += (c - mc) * (c - mc) / 5.0;
    crr += (1 - mr) * (1 - mr) / 5.0;
    crc += (1 - mr) * (c - mc) / 5.0;
  }
  EXPECT_DOUBLE_EQ(ccc, 2.0);
  EXPECT_EQ(crr, 0.0);
  EXPECT_EQ(crc, 0.0);
  // Largest eigenvalue belongs to the column direction, so the major axis
  // lies along the columns.
  EXPECT_GT(f.major_axis_length, 4.0 * f.minor_axis_length);
  EXPECT_NEAR(f.orientation, 0.0, 1e-12);
  EXPECT_GT(f.eccentricity, 0.9);
  EXPECT_LT(f.eccentricity, 1.0);
  EXPECT_DOUBLE_EQ(f.extent, 1.0);
  EXPECT_DOUBLE_EQ(f.solidity, 1.0);
  EXPECT_EQ(f.perimeter, 12.0);

  InstanceMask v(7, 3);
  for (std::size_t r = 1; r <= 5; ++r) v.at(r, 1) = 1;
  EXPECT_NEAR(std::abs(region_props(Image(7, 3), v).at(1).orientation), std::numbers::pi / 2, 1e-12);
}

TEST(RegionProps, LShapeAndDiagonal) {
  InstanceMask m(3, 3);
  m.at(0, 0) = 1;
  m.at(1, 0) = 1;
  m.at(1, 1) = 1;
  m.at(0, 2) = 2;
  m.at(1, 2) = 2;
  m.at(2, 2) = 2;
  const auto p = region_props(Image(3, 3), m);
  // Hull of the L's pixel corners has area 3.5.
  EXPECT_NEAR(p.at(1).solidity, 3.0 / 3.5, 1e-12);
  EXPECT_NEAR(p.at(1).extent, 0.75, 1e-12);

  InstanceMask d(3, 3);
  for (std::size_t i = 0; i < 3; ++i) d.at(i, i) = 9;
  EXPECT_NEAR(region_props(Image(3, 3), d).at(9).orientation, std::numbers::pi / 4, 1e-12);
}

TEST(RegionProps, SinglePixelAndBounds) {
  InstanceMask m(4, 4);
  m.at(3, 0) = 1;
  const auto f = region_props(Image(4, 4), m).at(1);
  EXPECT_EQ(f.area, 1.0);
  EXPECT_DOUBLE_EQ(f.solidity, 1.0);
  EXPECT_NEAR(f.eccentricity, 0.0, 1e-12);
  EXPECT_EQ(f.perimeter, 4.0);
}

TEST(RegionProps, InvariantToRelabeling) {
  Rng rng(3);
  InstanceMask m(20, 20);
  for (std::size_t r = 0; r < 20; ++r)
    for (std::size_t c = 0; c < 20; ++c) m.at(r, c) = static_cast<std::uint32_t>((r / 5) * 4 + c / 5 + (rng.uniform() < 0.2 ? 0 : 1));
  const auto img = random_image(20, 20, 8);
  const auto a = region_props(img, m);
  InstanceMask relabeled = m;
  for (auto& x : relabeled.data)
    if (x) x = 1000 - x * 7;
  const auto b = region_props(img, relabeled);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [id, f] : a) EXPECT_EQ(b.at(1000 - id * 7).to_array(), f.to_array());
}

TEST(RegionProps, MissingIdSkippedAndShapeChecked) {
  InstanceMask m(2, 2);
  m.at(0, 0) = 5;
  const auto p = region_props(Image(2, 2), m, std::vector<std::uint32_t>{5, 6});
  EXPECT_EQ(p.size(), 1u);
  EXPECT_TRUE(p.count(5));
  EXPECT_THROW(region_props(Image(3, 2), m), ShapeError);
}

TEST(RegionProps, InvariantRanges) {
  Rng rng(12);
  InstanceMask m(30, 30);
  for (auto& x : m.data) x = rng.uniform() < 0.5 ? static_cast<std::uint32_t>(1 + rng.uniform_index(12)) : 0;
  for (const auto& [id, f] : region_props(random_image(30, 30, 2), m)) {
    EXPECT_GE(f.area, 1.0);
    EXPECT_GT(f.solidity, 0.0);
    EXPECT_LE(f.solidity, 1.0);
    EXPECT_GE(f.eccentricity, 0.0);
    EXPECT_LT(f.eccentricity, 1.0);
    EXPECT_GT(f.extent, 0.0);
    EXPECT_LE(f.extent, 1.0);
  }
}
