#include "microprobe/classical_features.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "microprobe/error.hpp"

namespace microprobe {

void FilterBankConfig::validate() const {
  if (scales.empty()) throw ValidationError("filter bank: at least one scale is required");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0.0) || !std::isfinite(scales[i])) throw ValidationError("filter bank: scales must be positive");
    if (i && scales[i] <= scales[i - 1]) throw ValidationError("filter bank: scales must be strictly ascending");
  }
  if (!(gaussian || laplacian || gradient_magnitude || difference_of_gaussians || structure_tensor || hessian)) {
    throw ValidationError("filter bank: no filters enabled");
  }
}

std::vector<std::string> FilterBankConfig::channel_names() const {
  std::vector<std::string> names;
  for (double s : scales) {
    char tag[32];
    std::snprintf(tag, sizeof tag, "@%g", s);
    if (gaussian) names.push_back(std::string("gaussian") + tag);
    if (laplacian) names.push_back(std::string("laplacian_of_gaussian") + tag);
    if (gradient_magnitude) names.push_back(std::string("gradient_magnitude") + tag);
    if (structure_tensor) {
      names.push_back(std::string("structure_tensor_ev1") + tag);
      names.push_back(std::string("structure_tensor_ev2") + tag);
    }
    if (hessian) {
      names.push_back(std::string("hessian_ev1") + tag);
      names.push_back(std::string("hessian_ev2") + tag);
    }
  }
  if (difference_of_gaussians) {
    for (std::size_t i = 0; i + 1 < scales.size(); ++i) {
      char tag[64];
      std::snprintf(tag, sizeof tag, "difference_of_gaussians@%g-%g", scales[i], scales[i + 1]);
      names.emplace_back(tag);
    }
  }
  return names;
}

std::size_t FilterBankConfig::channels() const { return channel_names().size(); }

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double total = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& x : k) x /= total;
  return k;
}

std::vector<double> gaussian_derivative_kernel(double sigma, int order) {
  auto g = gaussian_kernel(sigma);
  if (order == 0) return g;
  const int radius = static_cast<int>(g.size() / 2);
  std::vector<double> k(g.size());
  if (order == 1) {
    double moment = 0;
    for (int i = -radius; i <= radius; ++i) {
      k[i + radius] = i * g[i + radius];
      moment += i * k[i + radius];
    }
    for (auto& x : k) x /= moment;
    return k;
  }
  if (order == 2) {
    double total = 0;
    for (int i = -radius; i <= radius; ++i) {
      k[i + radius] = (i * i / (sigma * sigma) - 1.0) * g[i + radius];
      total += k[i + radius];
    }
    double moment = 0;
    for (int i = -radius; i <= radius; ++i) {
      k[i + radius] -= total * g[i + radius];
      moment += 0.5 * i * i * k[i + radius];
    }
    for (auto& x : k) x /= moment;
    return k;
  }
  throw ValidationError("derivative order must be 0, 1 or 2");
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - 1 - m);
}

std::vector<double> separable_filter(const std::vector<double>& image, std::size_t height, std::size_t width,
                                     const std::vector<double>& row_kernel, const std::vector<double>& col_kernel) {
  const auto rx = static_cast<std::ptrdiff_t>(row_kernel.size() / 2);
  const auto ry = static_cast<std::ptrdiff_t>(col_kernel.size() / 2);
  std::vector<double> tmp(height * width), out(height * width);
  std::vector<std::size_t> idx;

  idx.resize(width + 2 * rx);
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(idx.size()); ++i) idx[i] = reflect_index(i - rx, width);
  for (std::size_t r = 0; r < height; ++r) {
    const double* src = &image[r * width];
    double* dst = &tmp[r * width];
    for (std::size_t c = 0; c < width; ++c) {
      double acc = 0;
      for (std::size_t k = 0; k < row_kernel.size(); ++k) acc += row_kernel[k] * src[idx[c + k]];
      dst[c] = acc;
    }
  }
  idx.resize(height + 2 * ry);
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(idx.size()); ++i) idx[i] = reflect_index(i - ry, height);
  for (std::size_t r = 0; r < height; ++r) {
    double* dst = &out[r * width];
    for (std::size_t k = 0; k < col_kernel.size(); ++k) {
      const double w = col_kernel[k];
      const double* src = &tmp[idx[r + k] * width];
      for (std::size_t c = 0; c < width; ++c) dst[c] += w * src[c];
    }
  }
  return out;
}

namespace {

// Eigenvalues of [[a, b], [b, c]], larger first.
std::pair<double, double> sym_eigen(double a, double b, double c) {
  const double mean = 0.5 * (a + c);
  const double radius = std::hypot(0.5 * (a - c), b);
  return {mean + radius, mean - radius};
}

}  // namespace

FeatureVolume pixel_filter_bank(const Image& image, const FilterBankConfig& cfg) {
  cfg.validate();
  const std::size_t H = image.height, W = image.width, N = H * W;
  if (N == 0) throw ValidationError("filter bank: empty image");
  std::vector<double> img(image.data.begin(), image.data.end());
  for (double v : img)
    if (!std::isfinite(v)) throw ValidationError("filter bank: image contains non-finite values");

  const std::size_t C = cfg.channels();
  FeatureVolume out(image.height, image.width, static_cast<std::uint32_t>(C));
  std::size_t ch = 0;
  auto emit = [&](const std::vector<double>& v) {
    for (std::size_t i = 0; i < N; ++i) out.values[i * C + ch] = static_cast<float>(v[i]);
    ++ch;
  };

  std::vector<std::vector<double>> smoothed;
  for (double sigma : cfg.scales) {
    const auto g = gaussian_derivative_kernel(sigma, 0);
    const auto d1 = gaussian_derivative_kernel(sigma, 1);
    const auto d2 = gaussian_derivative_kernel(sigma, 2);
    auto gs = separable_filter(img, H, W, g, g);
    if (cfg.gaussian) emit(gs);
    if (cfg.laplacian) {
      auto xx = separable_filter(img, H, W, d2, g);
      const auto yy = separable_filter(img, H, W, g, d2);
      for (std::size_t i = 0; i < N; ++i) xx[i] += yy[i];
      emit(xx);
    }
    if (cfg.gradient_magnitude || cfg.structure_tensor) {
      const auto gx = separable_filter(img, H, W, d1, g);
      const auto gy = separable_filter(img, H, W, g, d1);
      if (cfg.gradient_magnitude) {
        std::vector<double> mag(N);
        for (std::size_t i = 0; i < N; ++i) mag[i] = std::hypot(gx[i], gy[i]);
        emit(mag);
      }
      if (cfg.structure_tensor) {
        const auto go = gaussian_kernel(0.5 * sigma);
        std::vector<double> pxx(N), pxy(N), pyy(N);
        for (std::size_t i = 0; i < N; ++i) {
          pxx[i] = gx[i] * gx[i];
          pxy[i] = gx[i] * gy[i];
          pyy[i] = gy[i] * gy[i];
        }
        const auto jxx = separable_filter(pxx, H, W, go, go);
        const auto jxy = separable_filter(pxy, H, W, go, go);
        const auto jyy = separable_filter(pyy, H, W, go, go);
        std::vector<double> e1(N), e2(N);
        for (std::size_t i = 0; i < N; ++i) std::tie(e1[i], e2[i]) = sym_eigen(jxx[i], jxy[i], jyy[i]);
        emit(e1);
        emit(e2);
      }
    }
    if (cfg.hessian) {
      const auto hxx = separable_filter(img, H, W, d2, g);
      const auto hyy = separable_filter(img, H, W, g, d2);
      const auto hxy = separable_filter(img, H, W, d1, d1);
      std::vector<double> e1(N), e2(N);
      for (std::size_t i = 0; i < N; ++i) std::tie(e1[i], e2[i]) = sym_eigen(hxx[i], hxy[i], hyy[i]);
      emit(e1);
      emit(e2);
    }
    if (cfg.difference_of_gaussians) smoothed.push_back(std::move(gs));
  }
  if (cfg.difference_of_gaussians) {
    for (std::size_t s = 0; s + 1 < smoothed.size(); ++s) {
      std::vector<double> dog(N);
      for (std::size_t i = 0; i < N; ++i) dog[i] = smoothed[s][i] - smoothed[s + 1][i];
      emit(dog);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::array<double, RegionFeatures::kCount> RegionFeatures::to_array() const {
  return {area,      mean_intensity,    max_intensity,     min_intensity, perimeter,    eccentricity, solidity,
          extent,    major_axis_length, minor_axis_length, orientation,   centroid_row, centroid_col};
}

const std::array<const char*, RegionFeatures::kCount>& RegionFeatures::names() {
  static const std::array<const char*, kCount> n = {
      "area",   "mean_intensity",    "max_intensity",     "min_intensity", "perimeter",    "eccentricity", "solidity",
      "extent", "major_axis_length", "minor_axis_length", "orientation",   "centroid_row", "centroid_col"};
  return n;
}

namespace {

struct Accumulator {
  std::size_t count = 0;
  double sum = 0, max = -INFINITY, min = INFINITY;
  double sr = 0, sc = 0, srr = 0, scc = 0, src = 0;
  std::size_t rmin = SIZE_MAX, rmax = 0, cmin = SIZE_MAX, cmax = 0;
  std::size_t cracks = 0;
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> row_span;
};

double cross(const std::pair<double, double>& o, const std::pair<double, double>& a,
             const std::pair<double, double>& b) {
  return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
}

double convex_hull_area(std::vector<std::pair<double, double>> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return 0.0;
  std::vector<std::pair<double, double>> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  double area = 0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    area += a.first * b.second - b.first * a.second;
  }
  return 0.5 * std::abs(area);
}

}  // namespace

std::map<std::uint32_t, RegionFeatures> region_props(const Image& image, const InstanceMask& mask,
                                                     const std::optional<std::vector<std::uint32_t>>& ids) {
  if (image.height != mask.height || image.width != mask.width) {
    throw ShapeError("region_props: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " but mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  const std::size_t H = mask.height, W = mask.width;
  std::unordered_map<std::uint32_t, Accumulator> acc;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const std::uint32_t id = mask.at(r, c);
      if (!id) continue;
      auto& a = acc[id];
      const double v = image.at(r, c);
      ++a.count;
      a.sum += v;
      a.max = std::max(a.max, v);
      a.min = std::min(a.min, v);
      const double dr = static_cast<double>(r), dc = static_cast<double>(c);
      a.sr += dr;
      a.sc += dc;
      a.srr += dr * dr;
      a.scc += dc * dc;
      a.src += dr * dc;
      a.rmin = std::min(a.rmin, r);
      a.rmax = std::max(a.rmax, r);
      a.cmin = std::min(a.cmin, c);
      a.cmax = std::max(a.cmax, c);
      a.cracks += (r == 0 || mask.at(r - 1, c) != id) + (r + 1 == H || mask.at(r + 1, c) != id) +
                  (c == 0 || mask.at(r, c - 1) != id) + (c + 1 == W || mask.at(r, c + 1) != id);
      auto [it, fresh] = a.row_span.try_emplace(r, c, c);
      if (!fresh) {
        it->second.first = std::min(it->second.first, c);
        it->second.second = std::max(it->second.second, c);
      }
    }
  }

  std::vector<std::uint32_t> wanted;
  if (ids) {
    wanted = *ids;
  } else {
    for (const auto& [id, _] : acc) wanted.push_back(id);
  }
  std::map<std::uint32_t, RegionFeatures> out;
  for (std::uint32_t id : wanted) {
    auto it = acc.find(id);
    if (it == acc.end()) {
      spdlog::warn("region_props: instance {} has no pixels, skipped", id);
      continue;
    }
    const Accumulator& a = it->second;
    RegionFeatures f;
    const double n = static_cast<double>(a.count);
    f.area = n;
    f.mean_intensity = a.sum / n;
    f.max_intensity = a.max;
    f.min_intensity = a.min;
    f.perimeter = static_cast<double>(a.cracks);
    f.centroid_row = a.sr / n;
    f.centroid_col = a.sc / n;
    // Pixels are unit squares, hence the 1/12 on the diagonal.
    const double mrr = std::max(0.0, a.srr / n - f.centroid_row * f.centroid_row) + 1.0 / 12.0;
    const double mcc = std::max(0.0, a.scc / n - f.centroid_col * f.centroid_col) + 1.0 / 12.0;
    const double mrc = a.src / n - f.centroid_row * f.centroid_col;
    const auto [l1, l2raw] = sym_eigen(mrr, mrc, mcc);
    const double l2 = std::max(l2raw, 0.0);
    f.major_axis_length = 4.0 * std::sqrt(l1);
    f.minor_axis_length = 4.0 * std::sqrt(l2);
    f.eccentricity = std::sqrt(std::max(0.0, 1.0 - l2 / l1));
    f.orientation = 0.5 * std::atan2(2.0 * mrc, mcc - mrr);
    f.extent = n / static_cast<double>((a.rmax - a.rmin + 1) * (a.cmax - a.cmin + 1));
    std::vector<std::pair<double, double>> corners;
    corners.reserve(a.row_span.size() * 4);
    for (const auto& [r, span] : a.row_span) {
      const double r0 = static_cast<double>(r), c0 = static_cast<double>(span.first);
      const double c1 = static_cast<double>(span.second) + 1.0;
      corners.insert(corners.end(), {{r0, c0}, {r0 + 1, c0}, {r0, c1}, {r0 + 1, c1}});
    }
    f.solidity = std::min(1.0, n / convex_hull_area(std::move(corners)));
    out.emplace(id, f);
  }
  return out;
}

}  // namespace microprobe
