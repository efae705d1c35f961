#include "microprobe/probes.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"
#include "microprobe/error.hpp"
#include "microprobe/evaluation.hpp"
#include "microprobe/rng.hpp"

namespace microprobe {

using ad::Parameter;
using ad::Shape;
using ad::Tensor;

double gaussian_mask_value(double d, double sigma) {
  return 1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi)) * std::exp(-d * d / (2.0 * sigma));
}

std::vector<GridPoint> feature_grid_points(std::uint32_t height, std::uint32_t width) {
  std::vector<GridPoint> out;
  out.reserve(std::size_t{height} * width);
  for (std::uint32_t r = 0; r < height; ++r)
    for (std::uint32_t c = 0; c < width; ++c) out.push_back({double(r), double(c)});
  return out;
}

GridPoint image_to_feature(GridPoint p, std::uint32_t image_h, std::uint32_t image_w, std::uint32_t feat_h,
                           std::uint32_t feat_w) {
  return {(p.row + 0.5) * feat_h / image_h - 0.5, (p.col + 0.5) * feat_w / image_w - 0.5};
}

std::vector<double> squared_distances(std::span<const GridPoint> q, std::span<const GridPoint> f) {
  std::vector<double> out(q.size() * f.size());
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < f.size(); ++j) {
      const double dr = q[i].row - f[j].row, dc = q[i].col - f[j].col;
      out[i * f.size() + j] = dr * dr + dc * dc;
    }
  return out;
}

namespace {

template <class T>
Tensor<T> constant(Shape shape, const std::vector<double>& values) {
  return Tensor<T>::from(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

// -d^2 / (2 sigma): log M without the row-constant -log(sigma sqrt(2 pi)).
template <class T>
Tensor<T> log_gaussian_mask(const Tensor<T>& dist2, const Tensor<T>& sigma) {
  return ad::scale(ad::div(dist2, sigma), T(-0.5));
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ad::add(ad::matmul(x, w), b);
}

double softplus_inverse(double y) { return y > 30 ? y : std::log(std::expm1(y)); }

template <class T>
class ParamBuilder {
 public:
  ParamBuilder(std::vector<Parameter<T>>& params, std::map<std::string, std::size_t>& index, std::uint64_t seed)
      : params_(params), index_(index), rng_(seed) {}

  void uniform(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / double(fan_in + fan_out));
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>(rng_.uniform(-a, a));
    add(name, std::move(shape), std::move(v));
  }
  void fill(const std::string& name, Shape shape, double value) {
    add(name, shape, std::vector<T>(ad::numel(shape), static_cast<T>(value)));
  }

 private:
  void add(const std::string& name, Shape shape, std::vector<T> v) {
    index_[name] = params_.size();
    params_.push_back({name, Tensor<T>::from(std::move(shape), std::move(v), true)});
  }
  std::vector<Parameter<T>>& params_;
  std::map<std::string, std::size_t>& index_;
  Rng rng_;
};

void check_attention(std::size_t heads, std::size_t width, double sigma_init, const char* what) {
  if (heads == 0 || width == 0 || width % heads != 0 || width % 4 != 0) {
    throw ValidationError(std::string(what) + ": width must be a positive multiple of 4 and of the head count");
  }
  if (!(sigma_init > 0)) throw ValidationError(std::string(what) + ": sigma_init must be positive");
}

std::string head(std::size_t h, const char* part) { return "head" + std::to_string(h) + "." + part; }

template <class T>
void add_attention_params(ParamBuilder<T>& pb, std::size_t heads, std::size_t width, std::size_t channels,
                          double sigma_init) {
  const std::size_t dh = width / heads;
  pb.uniform("query.w", {width, width}, width, width);
  pb.fill("query.b", {width}, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    pb.uniform(head(h, "q"), {width, dh}, width, dh);
    pb.uniform(head(h, "k"), {channels, dh}, channels, dh);
    pb.uniform(head(h, "v"), {channels, dh}, channels, dh);
    pb.fill(head(h, "sigma"), {1}, softplus_inverse(sigma_init));
  }
}

// Concatenated head outputs [Nq, width].
template <class T>
Tensor<T> attend(const std::vector<Parameter<T>>& params, const std::map<std::string, std::size_t>& index,
                 std::size_t heads, bool gaussian, const Tensor<T>& x, const Tensor<T>& features,
                 const Tensor<T>& dist2) {
  auto p = [&](const std::string& n) -> const Tensor<T>& { return params[index.at(n)].tensor; };
  std::vector<Tensor<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const auto q = ad::matmul(x, p(head(h, "q")));
    const auto k = ad::matmul(features, p(head(h, "k")));
    const auto v = ad::matmul(features, p(head(h, "v")));
    Tensor<T> log_mask;
    if (gaussian) log_mask = log_gaussian_mask(dist2, ad::softplus(p(head(h, "sigma"))));
    outs.push_back(ad::matmul(masked_attention_weights(q, k, log_mask), v));
  }
  return outs.size() == 1 ? outs[0] : ad::concat(outs);
}

template <class T>
std::vector<double> sigma_values(const std::vector<Parameter<T>>& params, const std::map<std::string, std::size_t>& index,
                                 std::size_t heads) {
  std::vector<double> out;
  for (std::size_t h = 0; h < heads; ++h) {
    const double s = params[index.at(head(h, "sigma"))].tensor[0];
    out.push_back(s > 30 ? s : std::log1p(std::exp(s)));
  }
  return out;
}

template <class T>
Tensor<T> volume_tensor(const FeatureVolume& v) {
  return Tensor<T>::from({v.pixels(), v.channels}, std::vector<T>(v.values.begin(), v.values.end()));
}

void check_volume(const FeatureVolume& v, std::uint32_t h, std::uint32_t w, std::uint32_t c, const char* what) {
  if (v.height != h || v.width != w || v.channels != c) {
    throw ShapeError(std::string(what) + ": feature volume is " + std::to_string(v.height) + "x" +
                     std::to_string(v.width) + "x" + std::to_string(v.channels) + ", probe expects " +
                     std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
  }
}

}  // namespace

template <class T>
Tensor<T> gaussian_attention_mask(std::span<const GridPoint> q, std::span<const GridPoint> f, const Tensor<T>& sigma) {
  const auto d2 = constant<T>({q.size(), f.size()}, squared_distances(q, f));
  const auto e = ad::exp(log_gaussian_mask(d2, sigma));
  const auto norm = Tensor<T>::full({1}, static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi)));
  return ad::mul(e, ad::div(norm, sigma));
}

template <class T>
Tensor<T> masked_attention_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& log_mask) {
  auto scores = ad::scale(ad::matmul(q, ad::transpose(k)), static_cast<T>(1.0 / std::sqrt(double(q.dim(1)))));
  // softmax(s) * M renormalised per row equals softmax(s + log M); the log
  // form cannot underflow to an all-zero row.
  if (log_mask.defined()) scores = ad::add(scores, log_mask);
  return ad::softmax(scores);
}

std::vector<double> sinusoidal_encoding(std::span<const GridPoint> points, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) throw ValidationError("sinusoidal_encoding: dim must be a positive multiple of 4");
  const std::size_t nf = dim / 4;
  std::vector<double> out(points.size() * dim);
  for (std::size_t i = 0; i < points.size(); ++i) {
    double* row = out.data() + i * dim;
    for (std::size_t k = 0; k < nf; ++k) {
      const double w = std::pow(10000.0, -double(k) / double(nf));
      row[4 * k] = std::sin(points[i].row * w);
      row[4 * k + 1] = std::cos(points[i].row * w);
      row[4 * k + 2] = std::sin(points[i].col * w);
      row[4 * k + 3] = std::cos(points[i].col * w);
    }
  }
  return out;
}

std::vector<Centroid> object_centroids(const InstanceMask& mask) {
  std::map<std::uint32_t, std::array<double, 3>> acc;
  for (std::uint32_t r = 0; r < mask.height; ++r)
    for (std::uint32_t c = 0; c < mask.width; ++c) {
      const auto id = mask.at(r, c);
      if (id == 0) continue;
      auto& a = acc[id];
      a[0] += r;
      a[1] += c;
      a[2] += 1;
    }
  std::vector<Centroid> out;
  for (const auto& [id, a] : acc) out.push_back({id, a[0] / a[2], a[1] / a[2]});
  return out;
}

// --- DeAP ------------------------------------------------------------------------------

void DeapConfig::validate() const {
  if (input_size == 0 || input_size % 8 != 0) throw ValidationError("DeAP: input size must be a positive multiple of 8");
  if (feat_h == 0 || feat_w == 0 || channels == 0) throw ValidationError("DeAP: empty feature volume shape");
  if (num_classes < 2) throw ValidationError("DeAP: need at least 2 classes");
  if (decoder_channels.size() != 3 || std::find(decoder_channels.begin(), decoder_channels.end(), 0u) != decoder_channels.end()) {
    throw ValidationError("DeAP: decoder needs three positive channel counts");
  }
  check_attention(heads, width, sigma_init, "DeAP");
}

template <class T>
DeapProbe<T>::DeapProbe(const DeapConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  ParamBuilder<T> pb(params_, index_, cfg_.seed);
  const std::size_t w = cfg_.width;
  add_attention_params(pb, cfg_.heads, w, cfg_.channels, cfg_.sigma_init);
  pb.uniform("ffn.w1", {w, w}, w, w);
  pb.fill("ffn.b1", {w}, 0.0);
  pb.uniform("ffn.w2", {w, w}, w, w);
  pb.fill("ffn.b2", {w}, 0.0);
  std::size_t cin = w;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t co = cfg_.decoder_channels[i];
    pb.uniform("decoder" + std::to_string(i) + ".w", {co, cin, 3, 3}, cin * 9, co * 9);
    pb.fill("decoder" + std::to_string(i) + ".b", {co}, 0.0);
    cin = co;
  }
  pb.uniform("out.w", {cfg_.num_classes, cin, 1, 1}, cin, cfg_.num_classes);
  pb.fill("out.b", {cfg_.num_classes}, 0.0);

  const std::uint32_t qs = cfg_.query_side();
  for (std::uint32_t r = 0; r < qs; ++r)
    for (std::uint32_t c = 0; c < qs; ++c) {
      // Cell centre in image pixels, then into feature-grid units.
      const double centre = 8.0 * (r + 0.5) - 0.5, centre_c = 8.0 * (c + 0.5) - 0.5;
      query_points_.push_back(image_to_feature({centre, centre_c}, cfg_.input_size, cfg_.input_size, cfg_.feat_h, cfg_.feat_w));
    }
  feature_points_ = feature_grid_points(cfg_.feat_h, cfg_.feat_w);
  dist2_ = squared_distances(query_points_, feature_points_);
  queries_ = constant<T>({query_points_.size(), w}, sinusoidal_encoding(query_points_, w));
}

template <class T>
Tensor<T>& DeapProbe<T>::parameter(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error("DeAP: no parameter '" + name + "'");
  return params_[it->second].tensor;
}

template <class T>
Tensor<T> DeapProbe<T>::forward(const FeatureVolume& volume) const {
  check_volume(volume, cfg_.feat_h, cfg_.feat_w, cfg_.channels, "DeAP");
  return forward(volume_tensor<T>(volume));
}

template <class T>
Tensor<T> DeapProbe<T>::forward(const Tensor<T>& features) const {
  if (features.rank() != 2 || features.dim(0) != feature_points_.size() || features.dim(1) != cfg_.channels) {
    throw ShapeError("DeAP: features must be [" + std::to_string(feature_points_.size()) + ", " +
                     std::to_string(cfg_.channels) + "], got " + ad::to_string(features.shape()));
  }
  auto p = [&](const std::string& n) -> const Tensor<T>& { return params_[index_.at(n)].tensor; };
  const std::size_t nq = query_points_.size(), qs = cfg_.query_side();
  const auto dist2 = constant<T>({nq, feature_points_.size()}, dist2_);
  const auto x = linear(queries_, p("query.w"), p("query.b"));
  const auto a = attend(params_, index_, cfg_.heads, cfg_.gaussian_mask, x, features, dist2);
  const auto y = linear(ad::relu(linear(a, p("ffn.w1"), p("ffn.b1"))), p("ffn.w2"), p("ffn.b2"));
  auto z = ad::reshape(ad::transpose(y), {cfg_.width, qs, qs});
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string n = "decoder" + std::to_string(i);
    z = ad::relu(ad::conv2d(ad::upsample2x(z, ad::Upsample::bilinear), p(n + ".w"), p(n + ".b")));
  }
  return ad::conv2d(z, p("out.w"), p("out.b"));
}

template <class T>
std::vector<double> DeapProbe<T>::sigmas() const {
  return sigma_values(params_, index_, cfg_.heads);
}

template <class T>
Tensor<T> deap_loss(const std::vector<Tensor<T>>& logits, const std::vector<std::vector<std::size_t>>& pixels,
                    const std::vector<std::vector<std::uint16_t>>& labels, double dice_weight, double ce_weight) {
  if (logits.empty() || logits.size() != pixels.size() || pixels.size() != labels.size()) {
    throw ShapeError("deap_loss: logits, pixels and labels must have one entry per image");
  }
  const std::size_t k = logits[0].dim(0);
  Tensor<T> ce_sum, inter, psum;
  std::vector<double> ycount(k, 0.0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (pixels[i].size() != labels[i].size()) throw ShapeError("deap_loss: pixels and labels differ in length");
    if (pixels[i].empty()) continue;
    const auto& l = logits[i];
    if (l.rank() != 3 || l.dim(0) != k) throw ShapeError("deap_loss: logits must be [K, H, W]");
    const auto rows = ad::gather_rows(ad::transpose(ad::reshape(l, {k, l.dim(1) * l.dim(2)})), pixels[i]);
    std::vector<double> onehot(pixels[i].size() * k, 0.0);
    for (std::size_t j = 0; j < labels[i].size(); ++j) {
      const auto c = labels[i][j];
      if (c < 1 || c > k) throw ValidationError("deap_loss: label " + std::to_string(c) + " outside 1.." + std::to_string(k));
      onehot[j * k + c - 1] = 1.0;
      ycount[c - 1] += 1.0;
    }
    const auto y = constant<T>({pixels[i].size(), k}, onehot);
    const auto logp = ad::log_softmax(rows);
    const auto prob = ad::exp(logp);
    const auto ce_i = ad::sum(ad::mul(logp, y));
    const auto inter_i = ad::sum(ad::mul(prob, y), {0});
    const auto psum_i = ad::sum(prob, {0});
    ce_sum = ce_sum.defined() ? ad::add(ce_sum, ce_i) : ce_i;
    inter = inter.defined() ? ad::add(inter, inter_i) : inter_i;
    psum = psum.defined() ? ad::add(psum, psum_i) : psum_i;
    total += pixels[i].size();
  }
  if (total == 0) throw ValidationError("deap_loss: no labeled pixels");
  Tensor<T> loss = Tensor<T>::scalar(T(0));
  if (ce_weight > 0) loss = ad::add(loss, ad::scale(ce_sum, static_cast<T>(-ce_weight / double(total))));
  if (dice_weight > 0) {
    std::vector<double> present(k);
    double n_present = 0;
    for (std::size_t c = 0; c < k; ++c) n_present += present[c] = ycount[c] > 0 ? 1.0 : 0.0;
    const auto ratio = ad::div(ad::scale(inter, T(2)), ad::add(psum, constant<T>({k}, ycount)));
    const auto mean_ratio = ad::scale(ad::sum(ad::mul(ratio, constant<T>({k}, present))), static_cast<T>(1.0 / n_present));
    // dice_weight * (1 - mean_ratio)
    loss = ad::add(loss, ad::scale(ad::sub(Tensor<T>::scalar(T(1)), mean_ratio), static_cast<T>(dice_weight)));
  }
  return loss;
}

// --- ObAP ------------------------------------------------------------------------------

void ObapConfig::validate() const {
  if (feat_h == 0 || feat_w == 0 || channels == 0) throw ValidationError("ObAP: empty feature volume shape");
  if (num_classes < 2) throw ValidationError("ObAP: need at least 2 classes");
  if (n_max == 0) throw ValidationError("ObAP: n_max must be positive");
  check_attention(heads, width, sigma_init, "ObAP");
}

template <class T>
ObapProbe<T>::ObapProbe(const ObapConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  ParamBuilder<T> pb(params_, index_, cfg_.seed);
  const std::size_t w = cfg_.width;
  add_attention_params(pb, cfg_.heads, w, cfg_.channels, cfg_.sigma_init);
  pb.uniform("mlp.w1", {w, w}, w, w);
  pb.fill("mlp.b1", {w}, 0.0);
  pb.uniform("mlp.w2", {w, cfg_.num_classes}, w, cfg_.num_classes);
  pb.fill("mlp.b2", {cfg_.num_classes}, 0.0);
  feature_points_ = feature_grid_points(cfg_.feat_h, cfg_.feat_w);
}

template <class T>
Tensor<T>& ObapProbe<T>::parameter(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error("ObAP: no parameter '" + name + "'");
  return params_[it->second].tensor;
}

template <class T>
Tensor<T> ObapProbe<T>::query_encoding(std::span<const GridPoint> centroids) const {
  if (centroids.size() > cfg_.n_max) {
    throw ValidationError("ObAP: image has " + std::to_string(centroids.size()) + " objects but n_max is " +
                          std::to_string(cfg_.n_max) + "; raise n_max or tile the image");
  }
  auto enc = sinusoidal_encoding(centroids, cfg_.width);
  enc.resize(cfg_.n_max * cfg_.width, 0.0);
  return constant<T>({cfg_.n_max, cfg_.width}, enc);
}

template <class T>
Tensor<T> ObapProbe<T>::forward(const FeatureVolume& volume, std::span<const GridPoint> centroids) const {
  check_volume(volume, cfg_.feat_h, cfg_.feat_w, cfg_.channels, "ObAP");
  return forward(volume_tensor<T>(volume), centroids);
}

template <class T>
Tensor<T> ObapProbe<T>::forward(const Tensor<T>& features, std::span<const GridPoint> centroids) const {
  return forward_with_queries(features, query_encoding(centroids), centroids);
}

template <class T>
Tensor<T> ObapProbe<T>::forward_with_queries(const Tensor<T>& features, const Tensor<T>& queries,
                                             std::span<const GridPoint> centroids) const {
  if (features.rank() != 2 || features.dim(0) != feature_points_.size() || features.dim(1) != cfg_.channels) {
    throw ShapeError("ObAP: features must be [" + std::to_string(feature_points_.size()) + ", " +
                     std::to_string(cfg_.channels) + "], got " + ad::to_string(features.shape()));
  }
  if (queries.shape() != Shape{cfg_.n_max, cfg_.width}) throw ShapeError("ObAP: queries must be [n_max, width]");
  if (centroids.size() > cfg_.n_max) query_encoding(centroids);  // throws
  auto p = [&](const std::string& n) -> const Tensor<T>& { return params_[index_.at(n)].tensor; };

  ad::Mask invalid{{cfg_.n_max, 1}, std::vector<std::uint8_t>(cfg_.n_max, 1)};
  std::fill_n(invalid.bits.begin(), centroids.size(), 0);
  std::vector<GridPoint> pos(centroids.begin(), centroids.end());
  pos.resize(cfg_.n_max);
  const auto dist2 = constant<T>({cfg_.n_max, feature_points_.size()}, squared_distances(pos, feature_points_));

  const auto x = ad::masked_fill(linear(queries, p("query.w"), p("query.b")), invalid, T(0));
  const auto a = ad::masked_fill(attend(params_, index_, cfg_.heads, cfg_.gaussian_mask, x, features, dist2), invalid, T(0));
  const auto logits = linear(ad::relu(linear(a, p("mlp.w1"), p("mlp.b1"))), p("mlp.w2"), p("mlp.b2"));
  return ad::masked_fill(logits, invalid, T(0));
}

template <class T>
std::vector<double> ObapProbe<T>::sigmas() const {
  return sigma_values(params_, index_, cfg_.heads);
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> rows, std::span<const std::uint16_t> labels) {
  if (rows.size() != labels.size() || rows.empty()) throw ShapeError("cross_entropy: need matching, non-empty rows and labels");
  const std::size_t k = logits.dim(1);
  std::vector<double> onehot(rows.size() * k, 0.0);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] < 1 || labels[j] > k) throw ValidationError("cross_entropy: label outside 1.." + std::to_string(k));
    onehot[j * k + labels[j] - 1] = 1.0;
  }
  const auto logp = ad::log_softmax(ad::gather_rows(logits, rows));
  return ad::scale(ad::sum(ad::mul(logp, constant<T>({rows.size(), k}, onehot))), static_cast<T>(-1.0 / double(rows.size())));
}

Tensor<float> features_tensor(const FeatureVolume& volume) { return volume_tensor<float>(volume); }

// --- Training ----------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (iterations == 0) throw ValidationError("training: iterations must be positive");
  if (!(learning_rate > 0)) throw ValidationError("training: learning rate must be positive");
  if (dice_weight < 0 || ce_weight < 0 || dice_weight + ce_weight == 0) {
    throw ValidationError("training: loss weights must be non-negative and not both zero");
  }
  if (batch_size == 0) throw ValidationError("training: batch size must be positive");
}

namespace {

std::vector<std::vector<float>> snapshot(const std::vector<Parameter<float>>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore(std::vector<Parameter<float>>& params, const std::vector<std::vector<float>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto d = params[i].tensor.mutable_data();
    std::copy(values[i].begin(), values[i].end(), d.begin());
  }
}

std::vector<std::size_t> pick_batch(std::vector<std::size_t>& pool, std::size_t batch, Rng& rng) {
  const std::size_t b = std::min(batch, pool.size());
  for (std::size_t i = 0; i < b; ++i) std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
  std::vector<std::size_t> out(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(b));
  std::sort(out.begin(), out.end());
  return out;
}

void warn_single_class(const std::set<std::uint16_t>& classes, const char* what) {
  if (classes.size() == 1) spdlog::warn("{}: every training label is class {}; the probe cannot learn a boundary", what, *classes.begin());
}

// Runs the shared loop: step(batch) returns the batch loss, validate()
// returns the validation macro F1 or a negative value when there is none.
template <class Probe, class StepFn, class ValFn>
void train_loop(Probe& probe, std::vector<std::size_t> pool, const TrainConfig& tc, StepFn&& step, ValFn&& validate,
                TrainHistory* history, const char* what) {
  tc.validate();
  if (pool.empty()) throw ValidationError(std::string(what) + ": no training examples with labels");
  ad::Adam<float> adam({.learning_rate = tc.learning_rate});
  Rng rng(tc.seed);
  TrainHistory h;
  std::vector<std::vector<float>> best;
  double loss_acc = 0;
  std::size_t loss_n = 0;
  for (std::size_t it = 1; it <= tc.iterations; ++it) {
    const auto batch = pick_batch(pool, tc.batch_size, rng);
    ad::zero_grad(probe.parameters());
    const Tensor<float> loss = step(batch);
    loss.backward();
    adam.step(probe.parameters());
    loss_acc += loss.item();
    ++loss_n;
    if ((tc.val_every && it % tc.val_every == 0) || it == tc.iterations) {
      h.loss.emplace_back(it, loss_acc / double(loss_n));
      loss_acc = 0;
      loss_n = 0;
      const double f1 = validate();
      if (f1 >= 0) {
        h.val_f1.emplace_back(it, f1);
        if (f1 > h.best_val_f1) {
          h.best_val_f1 = f1;
          h.best_iteration = it;
          best = snapshot(probe.parameters());
        }
      }
      spdlog::debug("{}: iteration {} loss {:.5f} val F1 {:.4f}", what, it, h.loss.back().second, f1);
    }
  }
  if (!best.empty()) restore(probe.parameters(), best);
  else h.best_iteration = tc.iterations;
  ad::zero_grad(probe.parameters());
  if (history) *history = std::move(h);
}

}  // namespace

LabelImage deap_predict(const DeapProbe<float>& probe, const FeatureVolume& volume) {
  const auto logits = probe.forward(volume);
  const std::size_t k = logits.dim(0), n = logits.dim(1) * logits.dim(2);
  LabelImage out(static_cast<std::uint32_t>(logits.dim(1)), static_cast<std::uint32_t>(logits.dim(2)));
  const auto v = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (v[c * n + i] > v[best * n + i]) best = c;
    out.data[i] = static_cast<std::uint16_t>(best + 1);
  }
  return out;
}

DeapProbe<float> deap_train(const DeapConfig& cfg, const std::vector<DeapExample>& train,
                            const std::vector<DeapExample>& val, const TrainConfig& tc, TrainHistory* history) {
  DeapProbe<float> probe(cfg);
  const std::uint32_t side = cfg.input_size;
  std::vector<std::size_t> pool;
  std::vector<Tensor<float>> feats(train.size());
  std::vector<std::vector<std::uint16_t>> labels(train.size());
  std::set<std::uint16_t> classes;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& ex = train[i];
    if (ex.pixels.empty()) continue;
    if (ex.labels->height != side || ex.labels->width != side) {
      throw ShapeError("DeAP: training labels must be at the input size " + std::to_string(side));
    }
    check_volume(*ex.features, cfg.feat_h, cfg.feat_w, cfg.channels, "DeAP");
    feats[i] = features_tensor(*ex.features);
    for (auto px : ex.pixels) {
      const auto c = ex.labels->data.at(px);
      if (c == 0) throw ValidationError("DeAP: sampled pixel " + std::to_string(px) + " is unlabeled");
      labels[i].push_back(c);
      classes.insert(c);
    }
    pool.push_back(i);
  }
  warn_single_class(classes, "DeAP");

  auto step = [&](const std::vector<std::size_t>& batch) {
    std::vector<Tensor<float>> logits;
    std::vector<std::vector<std::size_t>> px;
    std::vector<std::vector<std::uint16_t>> lb;
    for (auto i : batch) {
      logits.push_back(probe.forward(feats[i]));
      px.push_back(train[i].pixels);
      lb.push_back(labels[i]);
    }
    return deap_loss(logits, px, lb, tc.dice_weight, tc.ce_weight);
  };
  auto validate = [&]() -> double {
    ConfusionMatrix cm(cfg.num_classes);
    for (const auto& ex : val) cm += evaluate_pixels(deap_predict(probe, *ex.features), *ex.labels, cfg.num_classes);
    return cm.total() ? macro_f1(cm) : -1.0;
  };
  train_loop(probe, pool, tc, step, validate, history, "DeAP");
  return probe;
}

std::vector<std::uint16_t> obap_predict(const ObapProbe<float>& probe, const FeatureVolume& volume,
                                        std::span<const GridPoint> centroids) {
  const auto logits = probe.forward(volume, centroids);
  const std::size_t k = logits.dim(1);
  const auto v = logits.data();
  std::vector<std::uint16_t> out(centroids.size());
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    const float* row = v.data() + i * k;
    out[i] = static_cast<std::uint16_t>(std::max_element(row, row + k) - row + 1);
  }
  return out;
}

ObapProbe<float> obap_train(const ObapConfig& cfg, const std::vector<ObapExample>& train,
                            const std::vector<ObapExample>& val, const TrainConfig& tc, TrainHistory* history) {
  ObapProbe<float> probe(cfg);
  std::vector<std::size_t> pool;
  std::vector<Tensor<float>> feats(train.size());
  std::vector<std::vector<std::size_t>> rows(train.size());
  std::vector<std::vector<std::uint16_t>> labels(train.size());
  std::set<std::uint16_t> classes;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& ex = train[i];
    if (ex.labels.size() != ex.centroids.size()) throw ShapeError("ObAP: one label per centroid required");
    for (std::size_t j = 0; j < ex.labels.size(); ++j) {
      if (ex.labels[j] == 0) continue;
      rows[i].push_back(j);
      labels[i].push_back(ex.labels[j]);
      classes.insert(ex.labels[j]);
    }
    if (rows[i].empty()) continue;
    check_volume(*ex.features, cfg.feat_h, cfg.feat_w, cfg.channels, "ObAP");
    feats[i] = features_tensor(*ex.features);
    pool.push_back(i);
  }
  warn_single_class(classes, "ObAP");

  auto step = [&](const std::vector<std::size_t>& batch) {
    std::size_t total = 0;
    for (auto i : batch) total += rows[i].size();
    Tensor<float> loss;
    for (auto i : batch) {
      const auto ce = ad::scale(cross_entropy(probe.forward(feats[i], train[i].centroids), rows[i], labels[i]),
                                float(rows[i].size()) / float(total));
      loss = loss.defined() ? ad::add(loss, ce) : ce;
    }
    return loss;
  };
  auto validate = [&]() -> double {
    ConfusionMatrix cm(cfg.num_classes);
    for (const auto& ex : val) {
      const auto pred = obap_predict(probe, *ex.features, ex.centroids);
      for (std::size_t j = 0; j < pred.size(); ++j)
        if (ex.labels[j]) cm.add(ex.labels[j], pred[j]);
    }
    return cm.total() ? macro_f1(cm) : -1.0;
  };
  train_loop(probe, pool, tc, step, validate, history, "ObAP");
  return probe;
}

// --- Checkpoints ---------------------------------------------------------------------------

namespace {

constexpr char kProbeMagic[4] = {'P', 'R', 'B', 'E'};
enum class ProbeKind : std::uint32_t { deap = 0, obap = 1 };

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (bytes.size() - pos < n) {
      throw FormatError("probe checkpoint: truncated at byte " + std::to_string(pos) + ", need " + std::to_string(n) + " more");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes[pos + i]} << (8 * i);
    pos += 4;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

std::vector<std::uint8_t> encode(ProbeKind kind, const nlohmann::json& config, const std::vector<Parameter<float>>& params) {
  std::vector<std::uint8_t> out(kProbeMagic, kProbeMagic + 4);
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(kind));
  const std::string cfg = config.dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

nlohmann::json decode_header(Reader& r, ProbeKind want) {
  r.need(4);
  if (std::memcmp(r.bytes.data(), kProbeMagic, 4) != 0) throw FormatError("probe checkpoint: bad magic");
  r.pos = 4;
  const auto version = r.u32();
  if (version != kFormatVersion) throw FormatError("probe checkpoint: unsupported version " + std::to_string(version));
  const auto kind = r.u32();
  if (kind != static_cast<std::uint32_t>(want)) {
    throw FormatError("probe checkpoint: holds a " + std::string(kind == 0 ? "DeAP" : kind == 1 ? "ObAP" : "unknown") +
                      " probe, expected " + (want == ProbeKind::deap ? "DeAP" : "ObAP"));
  }
  try {
    return nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe checkpoint: bad config: ") + e.what());
  }
}

void decode_params(Reader& r, std::vector<Parameter<float>>& params) {
  const auto count = r.u32();
  if (count != params.size()) {
    throw FormatError("probe checkpoint: " + std::to_string(count) + " tensors, config implies " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto name = r.str();
    if (name != p.name) throw FormatError("probe checkpoint: expected tensor '" + p.name + "', found '" + name + "'");
    const auto rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    if (shape != p.tensor.shape()) throw FormatError("probe checkpoint: tensor '" + name + "' has the wrong shape");
    auto d = p.tensor.mutable_data();
    r.need(d.size() * 4);
    for (auto& v : d) {
      const auto bits = r.u32();
      std::memcpy(&v, &bits, 4);
      if (!std::isfinite(v)) throw FormatError("probe checkpoint: non-finite value in '" + name + "'");
    }
  }
  if (r.pos != r.bytes.size()) throw FormatError("probe checkpoint: trailing bytes");
}

nlohmann::json to_json(const DeapConfig& c) {
  return {{"input_size", c.input_size}, {"feat_h", c.feat_h},   {"feat_w", c.feat_w},
          {"channels", c.channels},     {"num_classes", c.num_classes}, {"heads", c.heads},
          {"width", c.width},           {"decoder_channels", c.decoder_channels}, {"sigma_init", c.sigma_init},
          {"gaussian_mask", c.gaussian_mask}, {"seed", c.seed}};
}

nlohmann::json to_json(const ObapConfig& c) {
  return {{"feat_h", c.feat_h}, {"feat_w", c.feat_w},   {"channels", c.channels},   {"num_classes", c.num_classes},
          {"heads", c.heads},   {"width", c.width},     {"n_max", c.n_max},         {"sigma_init", c.sigma_init},
          {"gaussian_mask", c.gaussian_mask}, {"seed", c.seed}};
}

template <class Cfg>
Cfg parse_config(const nlohmann::json& j) {
  Cfg c;
  try {
    if constexpr (std::is_same_v<Cfg, DeapConfig>) {
      j.at("input_size").get_to(c.input_size);
      j.at("decoder_channels").get_to(c.decoder_channels);
    } else {
      j.at("n_max").get_to(c.n_max);
    }
    j.at("feat_h").get_to(c.feat_h);
    j.at("feat_w").get_to(c.feat_w);
    j.at("channels").get_to(c.channels);
    j.at("num_classes").get_to(c.num_classes);
    j.at("heads").get_to(c.heads);
    j.at("width").get_to(c.width);
    j.at("sigma_init").get_to(c.sigma_init);
    j.at("gaussian_mask").get_to(c.gaussian_mask);
    j.at("seed").get_to(c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe checkpoint: bad config: ") + e.what());
  }
  return c;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read probe checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

std::vector<std::uint8_t> encode_probe(const DeapProbe<float>& probe) {
  return encode(ProbeKind::deap, to_json(probe.config()), probe.parameters());
}
std::vector<std::uint8_t> encode_probe(const ObapProbe<float>& probe) {
  return encode(ProbeKind::obap, to_json(probe.config()), probe.parameters());
}

DeapProbe<float> decode_deap(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  DeapProbe<float> probe(parse_config<DeapConfig>(decode_header(r, ProbeKind::deap)));
  decode_params(r, probe.parameters());
  return probe;
}

ObapProbe<float> decode_obap(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  ObapProbe<float> probe(parse_config<ObapConfig>(decode_header(r, ProbeKind::obap)));
  decode_params(r, probe.parameters());
  return probe;
}

void save_probe(const DeapProbe<float>& probe, const std::filesystem::path& path) { write_all(encode_probe(probe), path); }
void save_probe(const ObapProbe<float>& probe, const std::filesystem::path& path) { write_all(encode_probe(probe), path); }
DeapProbe<float> load_deap(const std::filesystem::path& path) { return decode_deap(read_all(path)); }
ObapProbe<float> load_obap(const std::filesystem::path& path) { return decode_obap(read_all(path)); }

#define MICROPROBE_INSTANTIATE(T)                                                                               \
  template class DeapProbe<T>;                                                                                  \
  template class ObapProbe<T>;                                                                                  \
  template Tensor<T> gaussian_attention_mask(std::span<const GridPoint>, std::span<const GridPoint>,            \
                                             const Tensor<T>&);                                                 \
  template Tensor<T> masked_attention_weights(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> deap_loss(const std::vector<Tensor<T>>&, const std::vector<std::vector<std::size_t>>&,     \
                               const std::vector<std::vector<std::uint16_t>>&, double, double);                 \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>, std::span<const std::uint16_t>);

MICROPROBE_INSTANTIATE(float)
MICROPROBE_INSTANTIATE(double)

#undef MICROPROBE_INSTANTIATE

}  // namespace microprobe
