#include "microprobe/sampling.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <map>
#include <numeric>

#include "microprobe/error.hpp"
#include "microprobe/rng.hpp"

namespace microprobe {

void LabeledSample::push_back(std::span<const float> x, std::uint16_t label) {
  if (labels.empty() && dim == 0) dim = x.size();
  if (x.size() != dim) {
    throw ShapeError("LabeledSample: row has " + std::to_string(x.size()) + " features, expected " + std::to_string(dim));
  }
  features.insert(features.end(), x.begin(), x.end());
  labels.push_back(label);
}

LabeledSample LabeledSample::subset(std::span<const std::size_t> rows) const {
  LabeledSample out;
  out.dim = dim;
  out.features.reserve(rows.size() * dim);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto x = row(r);
    out.features.insert(out.features.end(), x.begin(), x.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

ObjectBudget ObjectBudget::parse(const std::string& text, std::uint64_t seed) {
  if (text == "all") return {std::nullopt, seed};
  std::size_t used = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || n == 0 || text.empty() || text[0] == '-') {
    throw ValidationError("object budget must be a positive integer or 'all', got '" + text + "'");
  }
  return {static_cast<std::size_t>(n), seed};
}

namespace {

struct ClassBucket {
  std::uint16_t cls;
  std::vector<std::size_t> items;
  std::size_t remaining;
};

std::vector<ClassBucket> bucket_by_class(std::span<const std::uint16_t> classes) {
  std::map<std::uint16_t, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i]) by[classes[i]].push_back(i);
  std::vector<ClassBucket> out;
  for (auto& [c, items] : by) {
    const std::size_t n = items.size();
    out.push_back({c, std::move(items), n});
  }
  return out;
}

// Uniform draw without replacement from the not-yet-drawn tail of a bucket.
std::size_t draw_from(ClassBucket& b, Rng& rng) {
  const std::size_t j = rng.uniform_index(b.remaining);
  std::swap(b.items[j], b.items[b.remaining - 1]);
  return b.items[--b.remaining];
}

}  // namespace

std::vector<std::size_t> sample_inverse_frequency(std::span<const std::uint16_t> classes, std::size_t budget,
                                                  std::uint64_t seed) {
  std::size_t labeled = 0;
  for (auto c : classes) labeled += c != 0;
  if (labeled == 0) throw ValidationError("sampling: pool has no labeled items");
  if (budget >= labeled) {
    std::vector<std::size_t> all;
    all.reserve(labeled);
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i]) all.push_back(i);
    return all;
  }
  auto buckets = bucket_by_class(classes);
  std::vector<std::size_t> active(buckets.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  Rng rng(seed);
  std::vector<std::size_t> out;
  out.reserve(budget);
  while (out.size() < budget) {
    const std::size_t a = rng.uniform_index(active.size());
    ClassBucket& b = buckets[active[a]];
    out.push_back(draw_from(b, rng));
    if (b.remaining == 0) active.erase(active.begin() + static_cast<std::ptrdiff_t>(a));
  }
  return out;
}

LabeledSample sample_pixels_rf(const LabeledSample& pool, const PixelBudget& budget) {
  if (pool.size() == 0) throw ValidationError("sample_pixels_rf: empty pool");
  if (budget.n_pixels == 0) throw ValidationError("sample_pixels_rf: budget must be >= 1");
  const auto idx = sample_inverse_frequency(pool.labels, budget.n_pixels, budget.seed);
  return pool.subset(idx);
}

std::vector<std::size_t> sample_objects(std::span<const std::uint16_t> classes, const ObjectBudget& budget) {
  if (classes.empty()) throw ValidationError("sample_objects: empty pool");
  if (budget.n_objects && *budget.n_objects == 0) throw ValidationError("sample_objects: budget must be >= 1");
  return sample_inverse_frequency(classes, budget.n_objects.value_or(classes.size()), budget.seed);
}

std::vector<std::vector<std::size_t>> sample_pixels_deap(std::span<const LabelImage> labels,
                                                         const PixelBudget& budget) {
  const std::size_t n_images = labels.size();
  if (n_images == 0) throw ValidationError("sample_pixels_deap: no images");
  if (budget.n_pixels == 0) throw ValidationError("sample_pixels_deap: budget must be >= 1");
  std::vector<std::vector<ClassBucket>> buckets(n_images);
  for (std::size_t i = 0; i < n_images; ++i) {
    buckets[i] = bucket_by_class(labels[i].data);
    if (buckets[i].empty()) throw ValidationError("sample_pixels_deap: image " + std::to_string(i) + " has no labeled pixels");
  }
  Rng rng(budget.seed);
  std::vector<std::size_t> order(n_images);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto partial_shuffle = [&](std::vector<std::size_t>& v, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) std::swap(v[i], v[i + rng.uniform_index(v.size() - i)]);
  };

  std::vector<std::vector<std::size_t>> out(n_images);
  if (budget.n_pixels < n_images) {
    partial_shuffle(order, budget.n_pixels);
    for (std::size_t k = 0; k < budget.n_pixels; ++k) {
      auto& bs = buckets[order[k]];
      out[order[k]].push_back(draw_from(bs[rng.uniform_index(bs.size())], rng));
    }
    return out;
  }

  std::vector<std::size_t> quota(n_images, budget.n_pixels / n_images);
  const std::size_t extra = budget.n_pixels % n_images;
  partial_shuffle(order, extra);
  for (std::size_t k = 0; k < extra; ++k) ++quota[order[k]];

  for (std::size_t i = 0; i < n_images; ++i) {
    auto& bs = buckets[i];
    const std::size_t m = bs.size();
    std::size_t available = 0;
    for (const auto& b : bs) available += b.items.size();
    std::size_t want = quota[i];
    if (want > available) {
      spdlog::warn("sample_pixels_deap: image {} has {} labeled pixels, budget asks for {}", i, available, want);
      want = available;
    }
    // Equal split with the remainder on random classes, then hand any
    // shortfall of small classes to the others in random order.
    std::vector<std::size_t> take(m, want / m);
    std::vector<std::size_t> cls(m);
    std::iota(cls.begin(), cls.end(), std::size_t{0});
    partial_shuffle(cls, want % m);
    for (std::size_t k = 0; k < want % m; ++k) ++take[cls[k]];
    std::size_t spill = 0;
    for (std::size_t c = 0; c < m; ++c) {
      if (take[c] > bs[c].items.size()) {
        spill += take[c] - bs[c].items.size();
        take[c] = bs[c].items.size();
      }
    }
    while (spill > 0) {
      std::vector<std::size_t> open;
      for (std::size_t c = 0; c < m; ++c)
        if (take[c] < bs[c].items.size()) open.push_back(c);
      partial_shuffle(open, open.size());
      for (std::size_t c : open) {
        if (spill == 0) break;
        ++take[c];
        --spill;
      }
    }
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t k = 0; k < take[c]; ++k) out[i].push_back(draw_from(bs[c], rng));
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

}  // namespace microprobe
