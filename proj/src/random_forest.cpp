#include "microprobe/random_forest.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "microprobe/error.hpp"
#include "microprobe/parallel.hpp"
#include "microprobe/rng.hpp"

namespace microprobe {

std::uint32_t DecisionTree::leaf_for(std::span<const float> x) const {
  std::uint32_t i = 0;
  while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].left;
}

namespace {

// Monotone map from float to unsigned so that integer order = float order.
std::uint32_t orderable(float f) {
  if (f == 0.0f) f = 0.0f;  // fold -0 into +0
  const auto u = std::bit_cast<std::uint32_t>(f);
  return (u & 0x80000000u) ? ~u : (u | 0x80000000u);
}


// Sorts keys of the form rank << 16 | class by rank; `bits` bounds the rank
// width. LSD radix with at most 11-bit digits; passes whose digit is
// constant are skipped.
void sort_by_rank(std::uint64_t* keys, std::size_t m, unsigned bits, std::vector<std::uint64_t>& scratch) {
  if (m < 256) {
    std::sort(keys, keys + m);
    return;
  }
  const unsigned passes = std::max(1u, (bits + 10) / 11);
  const unsigned width = (bits + passes - 1) / passes;
  const std::size_t buckets = std::size_t{1} << width, mask = buckets - 1;
  std::vector<std::size_t> hist(passes * buckets, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint64_t r = keys[i] >> 16;
    for (unsigned p = 0; p < passes; ++p) ++hist[p * buckets + ((r >> (p * width)) & mask)];
  }
  scratch.resize(std::max(scratch.size(), m));
  std::uint64_t* src = keys;
  std::uint64_t* dst = scratch.data();
  for (unsigned p = 0; p < passes; ++p) {
    std::size_t* h = &hist[p * buckets];
    if (h[((src[0] >> 16) >> (p * width)) & mask] == m) continue;
    std::size_t offset = 0;
    for (std::size_t b = 0; b < buckets; ++b) {
      const std::size_t c = h[b];
      h[b] = offset;
      offset += c;
    }
    for (std::size_t i = 0; i < m; ++i) dst[h[((src[i] >> 16) >> (p * width)) & mask]++] = src[i];
    std::swap(src, dst);
  }
  if (src != keys) std::copy(src, src + m, keys);
}

// Training data in column-major rank form: ranks[j * n + i] indexes the
// sorted distinct values of feature j.
struct RankedData {
  std::size_t n = 0, dim = 0;
  std::vector<std::uint32_t> ranks;
  std::vector<std::vector<float>> values;
  std::vector<unsigned> bits;
};

class TreeBuilder {
 public:
  TreeBuilder(const RankedData& data, const std::vector<std::uint16_t>& y, const std::vector<double>& inv,
              std::size_t k, const RFConfig& cfg, std::uint64_t seed)
      : data_(data), y_(y), inv_(inv), n_(data.n), dim_(data.dim), k_(k), cfg_(cfg), rng_(seed) {}

  DecisionTree build() {
    std::vector<std::uint32_t> idx(n_);
    if (cfg_.bootstrap) {
      for (auto& i : idx) i = static_cast<std::uint32_t>(rng_.uniform_index(n_));
    } else {
      std::iota(idx.begin(), idx.end(), 0u);
    }
    idx_ = std::move(idx);
    keys_.resize(n_);
    feats_.resize(dim_);
    std::iota(feats_.begin(), feats_.end(), std::size_t{0});
    mtry_ = cfg_.max_features ? std::min(cfg_.max_features, dim_)
                              : std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(dim_))));
    counts_.resize(k_);

    struct Pending {
      std::uint32_t node;
      std::size_t begin, end, depth;
    };
    std::vector<Pending> stack;
    tree_.nodes.emplace_back();
    stack.push_back({0, 0, n_, 0});
    while (!stack.empty()) {
      const Pending p = stack.back();
      stack.pop_back();
      std::fill(counts_.begin(), counts_.end(), 0u);
      for (std::size_t i = p.begin; i < p.end; ++i) ++counts_[y_[idx_[i]]];
      const std::size_t m = p.end - p.begin;
      const bool pure = std::count_if(counts_.begin(), counts_.end(), [](std::uint32_t c) { return c > 0; }) <= 1;
      Split s;
      if (!pure && m >= 2 * cfg_.min_samples_leaf && (cfg_.max_depth == 0 || p.depth < cfg_.max_depth)) {
        s = best_split(p.begin, p.end);
      }
      if (s.feature < 0) {
        auto& node = tree_.nodes[p.node];
        node.feature = -1;
        node.left = static_cast<std::uint32_t>(tree_.counts.size() / k_);
        tree_.counts.insert(tree_.counts.end(), counts_.begin(), counts_.end());
        continue;
      }
      const std::uint32_t* col = data_.ranks.data() + static_cast<std::size_t>(s.feature) * n_;
      const auto mid = std::partition(idx_.begin() + static_cast<std::ptrdiff_t>(p.begin),
                                      idx_.begin() + static_cast<std::ptrdiff_t>(p.end),
                                      [&](std::uint32_t i) { return col[i] <= s.rank; });
      const auto split_at = static_cast<std::size_t>(mid - idx_.begin());
      const auto left = static_cast<std::uint32_t>(tree_.nodes.size());
      tree_.nodes.emplace_back();
      tree_.nodes.emplace_back();
      auto& node = tree_.nodes[p.node];
      node.feature = s.feature;
      node.threshold = s.threshold;
      node.left = left;
      node.right = left + 1;
      stack.push_back({left + 1, split_at, p.end, p.depth + 1});
      stack.push_back({left, p.begin, split_at, p.depth + 1});
    }
    return std::move(tree_);
  }

 private:
  struct Split {
    std::int32_t feature = -1;
    float threshold = 0;
    std::uint32_t rank = 0;  // left side holds ranks <= this
    double score = -1;
  };

  // Gini search: maximising sum_c l_c^2 / n_l + sum_c r_c^2 / n_r is the same
  // as minimising the weighted child impurity. Zero-gain splits are allowed
  // so that problems like XOR can be separated one level deeper.
  Split best_split(std::size_t begin, std::size_t end) {
    const std::size_t m = end - begin;
    Split best;
    std::vector<std::uint32_t> left(k_), right(k_);
    for (std::size_t j = 0; j < dim_; ++j) {
      if (j >= mtry_ && best.feature >= 0) break;
      std::swap(feats_[j], feats_[j + rng_.uniform_index(dim_ - j)]);
      const std::size_t f = feats_[j];
      const std::uint32_t* col = data_.ranks.data() + f * n_;
      std::uint64_t* keys = keys_.data();
      for (std::size_t i = 0; i < m; ++i) {
        const std::uint32_t s = idx_[begin + i];
        keys[i] = std::uint64_t{col[s]} << 16 | y_[s];
      }
      sort_by_rank(keys, m, data_.bits[f], scratch_);
      if ((keys[0] >> 16) == (keys[m - 1] >> 16)) continue;

      std::fill(left.begin(), left.end(), 0u);
      std::copy(counts_.begin(), counts_.end(), right.begin());
      std::uint64_t sq_left = 0, sq_right = 0;
      for (auto c : right) sq_right += std::uint64_t{c} * c;
      const std::size_t min_leaf = cfg_.min_samples_leaf;
      for (std::size_t i = 0; i + 1 < m; ++i) {
        const auto c = static_cast<std::uint32_t>(keys[i] & 0xFFFF);
        sq_left += 2 * std::uint64_t{left[c]} + 1;
        sq_right -= 2 * std::uint64_t{right[c]} - 1;
        ++left[c];
        --right[c];
        const auto a = static_cast<std::uint32_t>(keys[i] >> 16), b = static_cast<std::uint32_t>(keys[i + 1] >> 16);
        if (a == b) continue;
        const std::size_t nl = i + 1, nr = m - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        const double score = double(sq_left) * inv_[nl] + double(sq_right) * inv_[nr];
        // Equal scores keep the lowest feature index, then the lowest threshold.
        if (score > best.score || (score == best.score && static_cast<std::int32_t>(f) < best.feature)) {
          const float lo = data_.values[f][a], hi = data_.values[f][b];
          float t = lo + (hi - lo) * 0.5f;
          if (!(t < hi) || !(t >= lo)) t = lo;
          best = {static_cast<std::int32_t>(f), t, a, score};
        }
      }
    }
    return best;
  }

  const RankedData& data_;
  const std::vector<std::uint16_t>& y_;
  const std::vector<double>& inv_;  // inv_[i] = 1 / i
  std::size_t n_, dim_, k_;
  const RFConfig& cfg_;
  Rng rng_;
  std::size_t mtry_ = 1;
  std::vector<std::uint32_t> idx_;
  std::vector<std::uint64_t> keys_, scratch_;
  std::vector<std::size_t> feats_;
  std::vector<std::uint32_t> counts_;
  DecisionTree tree_;
};

void check_dim(const RandomForestModel& model, std::span<const float> features) {
  if (model.dim == 0 || model.trees.empty()) throw Error("random forest: model is empty");
  if (features.size() % model.dim != 0) {
    throw ShapeError("random forest: feature buffer of " + std::to_string(features.size()) +
                     " values is not a multiple of the model dimension " + std::to_string(model.dim));
  }
}

}  // namespace

RandomForestModel rf_fit(const LabeledSample& sample, const RFConfig& cfg, std::size_t num_classes) {
  const std::size_t n = sample.size(), dim = sample.dim;
  if (n == 0) throw ValidationError("rf_fit: empty sample");
  if (dim == 0) throw ValidationError("rf_fit: zero-dimensional features");
  if (cfg.n_trees == 0) throw ValidationError("rf_fit: tree count must be >= 1");
  if (cfg.min_samples_leaf == 0) throw ValidationError("rf_fit: min_samples_leaf must be >= 1");
  if (n > UINT32_MAX) throw ValidationError("rf_fit: too many samples");
  const std::uint16_t max_label = *std::max_element(sample.labels.begin(), sample.labels.end());
  const std::size_t k = num_classes ? num_classes : max_label;
  for (auto l : sample.labels)
    if (l == 0 || l > k) throw ValidationError("rf_fit: label " + std::to_string(l) + " outside 1.." + std::to_string(k));
  for (float v : sample.features)
    if (!std::isfinite(v)) throw ValidationError("rf_fit: non-finite feature value");

  // Canonical row order: lexicographic on (features, label).
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const float* xa = sample.features.data() + std::size_t{a} * dim;
    const float* xb = sample.features.data() + std::size_t{b} * dim;
    for (std::size_t j = 0; j < dim; ++j) {
      const auto oa = orderable(xa[j]), ob = orderable(xb[j]);
      if (oa != ob) return oa < ob;
    }
    return sample.labels[a] < sample.labels[b];
  });
  RankedData data;
  data.n = n;
  data.dim = dim;
  data.ranks.resize(n * dim);
  data.values.resize(dim);
  data.bits.resize(dim);
  std::vector<std::uint16_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::uint16_t>(sample.labels[order[i]] - 1);
  std::vector<float> col(n);
  for (std::size_t j = 0; j < dim; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const float v = sample.features[std::size_t{order[i]} * dim + j];
      col[i] = v == 0.0f ? 0.0f : v;
    }
    auto& uniq = data.values[j];
    uniq = col;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (std::size_t i = 0; i < n; ++i) {
      data.ranks[j * n + i] =
          static_cast<std::uint32_t>(std::lower_bound(uniq.begin(), uniq.end(), col[i]) - uniq.begin());
    }
    data.bits[j] = static_cast<unsigned>(std::bit_width(uniq.size()));
  }

  std::vector<double> inv(n + 1, 0.0);
  for (std::size_t i = 1; i <= n; ++i) inv[i] = 1.0 / static_cast<double>(i);

  RandomForestModel model;
  model.num_classes = k;
  model.dim = dim;
  model.trees.resize(cfg.n_trees);
  parallel_for(cfg.n_trees, cfg.workers, [&](std::size_t t) {
    model.trees[t] = TreeBuilder(data, y, inv, k, cfg, cfg.seed + t).build();
  });
  return model;
}

std::vector<double> rf_predict_proba(const RandomForestModel& model, std::span<const float> features,
                                     std::size_t workers) {
  check_dim(model, features);
  const std::size_t n = features.size() / model.dim, k = model.num_classes;
  std::vector<double> out(n * k, 0.0);
  constexpr std::size_t kChunk = 256;
  parallel_for((n + kChunk - 1) / kChunk, workers, [&](std::size_t chunk) {
    for (std::size_t i = chunk * kChunk; i < std::min(n, (chunk + 1) * kChunk); ++i) {
      const auto x = features.subspan(i * model.dim, model.dim);
      double* row = &out[i * k];
      for (const auto& tree : model.trees) {
        const auto counts = tree.leaf_counts(tree.leaf_for(x), k);
        double total = 0;
        for (auto c : counts) total += c;
        for (std::size_t c = 0; c < k; ++c) row[c] += counts[c] / total;
      }
      for (std::size_t c = 0; c < k; ++c) row[c] /= static_cast<double>(model.trees.size());
    }
  });
  return out;
}

std::vector<std::uint16_t> rf_predict(const RandomForestModel& model, std::span<const float> features,
                                      std::size_t workers) {
  check_dim(model, features);
  const std::size_t n = features.size() / model.dim, k = model.num_classes;
  std::vector<std::uint16_t> out(n);
  constexpr std::size_t kChunk = 256;
  parallel_for((n + kChunk - 1) / kChunk, workers, [&](std::size_t chunk) {
    std::vector<std::uint32_t> votes(k);
    for (std::size_t i = chunk * kChunk; i < std::min(n, (chunk + 1) * kChunk); ++i) {
      const auto x = features.subspan(i * model.dim, model.dim);
      std::fill(votes.begin(), votes.end(), 0u);
      for (const auto& tree : model.trees) {
        const auto counts = tree.leaf_counts(tree.leaf_for(x), k);
        ++votes[static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin())];
      }
      out[i] = static_cast<std::uint16_t>(1 + (std::max_element(votes.begin(), votes.end()) - votes.begin()));
    }
  });
  return out;
}

// --- serialization -------------------------------------------------------------
//   "RFST" | u32 version=1 | u32 dtype=0 | u32 K | u32 dim | u32 trees
//   per tree: u32 nodes | u32 count values | nodes (i32 feature, f32 threshold,
//   u32 left, u32 right) | u32 counts

namespace {

constexpr std::uint32_t kForestVersion = 1;

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32() {
    if (pos_ + 4 > b_.size()) {
      throw FormatError("RFST: truncated at offset " + std::to_string(pos_) + " (file has " +
                        std::to_string(b_.size()) + " bytes)");
    }
    const std::uint32_t v = std::uint32_t{b_[pos_]} | std::uint32_t{b_[pos_ + 1]} << 8 |
                            std::uint32_t{b_[pos_ + 2]} << 16 | std::uint32_t{b_[pos_ + 3]} << 24;
    pos_ += 4;
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_forest(const RandomForestModel& model) {
  std::vector<std::uint8_t> out = {'R', 'F', 'S', 'T'};
  put32(out, kForestVersion);
  put32(out, 0);
  put32(out, static_cast<std::uint32_t>(model.num_classes));
  put32(out, static_cast<std::uint32_t>(model.dim));
  put32(out, static_cast<std::uint32_t>(model.trees.size()));
  for (const auto& t : model.trees) {
    put32(out, static_cast<std::uint32_t>(t.nodes.size()));
    put32(out, static_cast<std::uint32_t>(t.counts.size()));
    for (const auto& nd : t.nodes) {
      put32(out, static_cast<std::uint32_t>(nd.feature));
      put32(out, std::bit_cast<std::uint32_t>(nd.threshold));
      put32(out, nd.left);
      put32(out, nd.right);
    }
    for (auto c : t.counts) put32(out, c);
  }
  return out;
}

RandomForestModel decode_forest(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "RFST", 4) != 0) throw FormatError("RFST: bad magic at offset 0");
  Reader r(bytes.subspan(4));
  if (const auto v = r.u32(); v != kForestVersion) {
    throw FormatError("RFST: unsupported version " + std::to_string(v) + " at offset 4");
  }
  if (r.u32() != 0) throw FormatError("RFST: unexpected dtype at offset 8");
  RandomForestModel m;
  m.num_classes = r.u32();
  m.dim = r.u32();
  const std::uint32_t trees = r.u32();
  if (m.num_classes == 0 || m.dim == 0 || trees == 0) throw FormatError("RFST: zero dimension in header");
  m.trees.resize(trees);
  for (auto& t : m.trees) {
    const std::size_t at = r.pos() + 4;
    const std::uint32_t nodes = r.u32(), counts = r.u32();
    if (nodes == 0 || counts % m.num_classes != 0 || nodes > bytes.size() / 16 || counts > bytes.size() / 4) {
      throw FormatError("RFST: inconsistent tree header at offset " + std::to_string(at));
    }
    t.nodes.resize(nodes);
    for (auto& nd : t.nodes) {
      nd.feature = static_cast<std::int32_t>(r.u32());
      nd.threshold = std::bit_cast<float>(r.u32());
      nd.left = r.u32();
      nd.right = r.u32();
    }
    t.counts.resize(counts);
    for (auto& c : t.counts) c = r.u32();
    const std::uint32_t leaves = counts / static_cast<std::uint32_t>(m.num_classes);
    for (const auto& nd : t.nodes) {
      const bool ok = nd.feature < 0 ? nd.left < leaves
                                     : (static_cast<std::size_t>(nd.feature) < m.dim && nd.left < nodes && nd.right < nodes);
      if (!ok) throw FormatError("RFST: node references out of range");
    }
  }
  if (!r.done()) throw FormatError("RFST: trailing bytes after offset " + std::to_string(r.pos() + 4));
  return m;
}

void save_forest(const RandomForestModel& model, const std::filesystem::path& path) {
  const auto bytes = encode_forest(model);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
}

RandomForestModel load_forest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_forest(bytes);
}

}  // namespace microprobe
