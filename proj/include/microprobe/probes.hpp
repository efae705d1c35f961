#pragma once

// Attentive probes on frozen feature volumes.
//
// Both probes use the same attention block: per head, queries attend to the
// H' x W' feature grid through softmax(Q K^T / sqrt(d)) multiplied by a
// Gaussian locality mask and renormalised per row. Positions (query grid
// cells, object centroids, feature cells) are all expressed in feature-grid
// cell units, feature cell (r, c) sitting at (r, c).

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "microprobe/feature_store.hpp"
#include "microprobe/optim.hpp"
#include "microprobe/tensor.hpp"

namespace microprobe {

struct GridPoint {
  double row = 0;
  double col = 0;
};

/// 1 / (sigma sqrt(2 pi)) * exp(-d^2 / (2 sigma)).
double gaussian_mask_value(double d, double sigma);

/// Feature cell centres in row-major order.
std::vector<GridPoint> feature_grid_points(std::uint32_t height, std::uint32_t width);
/// Pixel coordinate (pixel centres at integers) on an image of the given size
/// mapped into feature-grid units.
GridPoint image_to_feature(GridPoint p, std::uint32_t image_h, std::uint32_t image_w, std::uint32_t feat_h,
                           std::uint32_t feat_w);
/// Squared Euclidean distances, row-major |q| x |f|.
std::vector<double> squared_distances(std::span<const GridPoint> q, std::span<const GridPoint> f);

/// Mask matrix [|q|, |f|] as a differentiable function of `sigma` (shape [1]).
template <class T>
ad::Tensor<T> gaussian_attention_mask(std::span<const GridPoint> q, std::span<const GridPoint> f,
                                      const ad::Tensor<T>& sigma);

/// softmax(q k^T / sqrt(d)) * mask, rows renormalised. `log_mask` holds
/// log M (any per-row constant may be dropped) or is undefined for plain
/// attention. Returns the [Nq, Nf] weights.
template <class T>
ad::Tensor<T> masked_attention_weights(const ad::Tensor<T>& q, const ad::Tensor<T>& k, const ad::Tensor<T>& log_mask);

/// Fixed 2D sinusoidal encoding, row-major [N, dim] with dim a multiple of 4:
/// per frequency w_i = 10000^(-i / (dim/4)) the values sin(r w), cos(r w),
/// sin(c w), cos(c w).
std::vector<double> sinusoidal_encoding(std::span<const GridPoint> points, std::size_t dim);

/// Coordinate mean of each instance's pixels, ascending id. The centroid of
/// a non-convex object may fall outside its mask.
struct Centroid {
  std::uint32_t id = 0;
  double row = 0;
  double col = 0;
};
std::vector<Centroid> object_centroids(const InstanceMask& mask);

// --- DeAP --------------------------------------------------------------------------

struct DeapConfig {
  std::uint32_t input_size = 1024;  // image side; queries form an input/8 square grid
  std::uint32_t feat_h = 64;
  std::uint32_t feat_w = 64;
  std::uint32_t channels = 256;
  std::size_t num_classes = 2;
  std::size_t heads = 4;
  std::size_t width = 256;
  std::vector<std::size_t> decoder_channels = {128, 64, 32};
  double sigma_init = 8.0;
  bool gaussian_mask = true;
  std::uint64_t seed = 0;

  std::uint32_t query_side() const { return input_size / 8; }
  void validate() const;
};

/// Queries: sinusoidal encodings of grid-cell centres through a learned
/// projection. Attention heads feed one shared two-layer FFN, the result is
/// reshaped to query_side^2 x width and decoded by three (bilinear x2,
/// 3x3 conv, ReLU) stages and a 1x1 conv to K channels.
template <class T>
class DeapProbe {
 public:
  explicit DeapProbe(const DeapConfig& cfg);

  const DeapConfig& config() const { return cfg_; }
  std::vector<ad::Parameter<T>>& parameters() { return params_; }
  const std::vector<ad::Parameter<T>>& parameters() const { return params_; }
  ad::Tensor<T>& parameter(const std::string& name);

  /// Logits [K, input, input].
  ad::Tensor<T> forward(const FeatureVolume& volume) const;
  /// `features` is [H' W', C] in raster order.
  ad::Tensor<T> forward(const ad::Tensor<T>& features) const;
  std::vector<double> sigmas() const;

 private:
  DeapConfig cfg_;
  std::vector<ad::Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
  ad::Tensor<T> queries_;  // [Nq, width], constant
  std::vector<GridPoint> query_points_, feature_points_;
  std::vector<double> dist2_;
};

/// w_dice * Dice + w_ce * CE over the listed pixels only. For each image
/// `pixels` are flat indices into the H x W logit planes and `labels` the
/// classes 1..K there. CE is the mean over all listed pixels; Dice is
/// 1 - 2 sum(p y) / (sum p + sum y) per class, averaged over classes present
/// among the labels.
template <class T>
ad::Tensor<T> deap_loss(const std::vector<ad::Tensor<T>>& logits, const std::vector<std::vector<std::size_t>>& pixels,
                        const std::vector<std::vector<std::uint16_t>>& labels, double dice_weight, double ce_weight);

// --- ObAP --------------------------------------------------------------------------

struct ObapConfig {
  std::uint32_t feat_h = 64;
  std::uint32_t feat_w = 64;
  std::uint32_t channels = 256;
  std::size_t num_classes = 2;
  std::size_t heads = 4;
  std::size_t width = 256;
  std::size_t n_max = 256;
  double sigma_init = 8.0;
  bool gaussian_mask = true;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One query per object centroid (feature-grid units), padded to n_max and
/// masked before attention; each token goes through a two-layer MLP to K
/// logits.
template <class T>
class ObapProbe {
 public:
  explicit ObapProbe(const ObapConfig& cfg);

  const ObapConfig& config() const { return cfg_; }
  std::vector<ad::Parameter<T>>& parameters() { return params_; }
  const std::vector<ad::Parameter<T>>& parameters() const { return params_; }
  ad::Tensor<T>& parameter(const std::string& name);

  /// Logits [n_max, K]; rows past centroids.size() are padding and are zero.
  ad::Tensor<T> forward(const ad::Tensor<T>& features, std::span<const GridPoint> centroids) const;
  ad::Tensor<T> forward(const FeatureVolume& volume, std::span<const GridPoint> centroids) const;
  /// Same with caller-supplied query encodings [n_max, width].
  ad::Tensor<T> forward_with_queries(const ad::Tensor<T>& features, const ad::Tensor<T>& queries,
                                     std::span<const GridPoint> centroids) const;
  ad::Tensor<T> query_encoding(std::span<const GridPoint> centroids) const;
  std::vector<double> sigmas() const;

 private:
  ObapConfig cfg_;
  std::vector<ad::Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<GridPoint> feature_points_;
};

/// Mean cross entropy over the listed rows of [N, K] logits (labels 1..K).
template <class T>
ad::Tensor<T> cross_entropy(const ad::Tensor<T>& logits, std::span<const std::size_t> rows,
                            std::span<const std::uint16_t> labels);

ad::Tensor<float> features_tensor(const FeatureVolume& volume);

// --- Training -----------------------------------------------------------------------

struct TrainConfig {
  std::size_t iterations = 10000;
  double learning_rate = 1e-3;
  double dice_weight = 0.5;
  double ce_weight = 0.5;
  std::size_t batch_size = 4;
  std::size_t val_every = 250;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainHistory {
  std::vector<std::pair<std::size_t, double>> val_f1;  // (iteration, macro F1)
  std::vector<std::pair<std::size_t, double>> loss;    // (iteration, mean training loss since last check)
  std::size_t best_iteration = 0;
  double best_val_f1 = -1;
};

/// Training image for DeAP: labels at input resolution, sampled pixels as
/// flat indices into them.
struct DeapExample {
  const FeatureVolume* features = nullptr;
  const LabelImage* labels = nullptr;
  std::vector<std::size_t> pixels;
};

/// Adam on the sampled-pixel loss; validation macro F1 (labels at input
/// resolution, 0 ignored) every val_every iterations and at the end, keeping
/// the best parameters. Without validation images the final parameters are
/// returned.
DeapProbe<float> deap_train(const DeapConfig& cfg, const std::vector<DeapExample>& train,
                            const std::vector<DeapExample>& val, const TrainConfig& tc, TrainHistory* history = nullptr);
/// Argmax + 1 at input resolution.
LabelImage deap_predict(const DeapProbe<float>& probe, const FeatureVolume& volume);

struct ObapExample {
  const FeatureVolume* features = nullptr;
  std::vector<GridPoint> centroids;    // feature-grid units, one per object
  std::vector<std::uint16_t> labels;   // per object, 0 = not used for training / scoring
};

ObapProbe<float> obap_train(const ObapConfig& cfg, const std::vector<ObapExample>& train,
                            const std::vector<ObapExample>& val, const TrainConfig& tc, TrainHistory* history = nullptr);
std::vector<std::uint16_t> obap_predict(const ObapProbe<float>& probe, const FeatureVolume& volume,
                                        std::span<const GridPoint> centroids);

// --- Checkpoints ----------------------------------------------------------------------
//
//   "PRBE" | u32 version=1 | u32 kind (0 = DeAP, 1 = ObAP) | u32 n + config JSON
//   | u32 count | count x (u32 n + name | u32 rank | rank x u32 dim | f32 values)

void save_probe(const DeapProbe<float>& probe, const std::filesystem::path& path);
void save_probe(const ObapProbe<float>& probe, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_probe(const DeapProbe<float>& probe);
std::vector<std::uint8_t> encode_probe(const ObapProbe<float>& probe);
DeapProbe<float> decode_deap(std::span<const std::uint8_t> bytes);
ObapProbe<float> decode_obap(std::span<const std::uint8_t> bytes);
DeapProbe<float> load_deap(const std::filesystem::path& path);
ObapProbe<float> load_obap(const std::filesystem::path& path);

}  // namespace microprobe
