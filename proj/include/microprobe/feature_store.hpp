#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace microprobe {

/// Dense H x W x C float embedding map, channel-fastest.
struct FeatureVolume {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<float> values;
  std::string provenance;  // free-form JSON text, may be empty

  FeatureVolume() = default;
  FeatureVolume(std::uint32_t h, std::uint32_t w, std::uint32_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), values(std::size_t{h} * w * c, fill) {}

  std::size_t pixels() const { return std::size_t{height} * width; }
  float& at(std::size_t r, std::size_t c, std::size_t ch) { return values[(r * width + c) * channels + ch]; }
  float at(std::size_t r, std::size_t c, std::size_t ch) const { return values[(r * width + c) * channels + ch]; }
  std::span<const float> pixel(std::size_t r, std::size_t c) const {
    return {values.data() + (r * width + c) * channels, channels};
  }
};

/// Single-channel raster in row-major order.
template <class T>
struct Raster {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(std::uint32_t h, std::uint32_t w, T fill = T{}) : height(h), width(w), data(std::size_t{h} * w, fill) {}

  std::size_t size() const { return data.size(); }
  T& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
  T at(std::size_t r, std::size_t c) const { return data[r * width + c]; }
  bool operator==(const Raster&) const = default;
};

/// 0 = unlabeled, 1..K = classes.
using LabelImage = Raster<std::uint16_t>;
/// 0 = background, any positive value is an instance id.
using InstanceMask = Raster<std::uint32_t>;
using Image = Raster<float>;

// --- FVOL ------------------------------------------------------------------
//
//   "FVOL" | u32 version=1 | u32 dtype=0 (f32) | u32 H | u32 W | u32 C
//   | H*W*C f32 (H-major, W next, C fastest)
//   | optional: u32 byte length + UTF-8 JSON provenance
//
// All integers and floats little-endian. The raw label (".lbl", magic "FLBL",
// dtype 1 = u16) and instance (".ins", magic "FINS", dtype 2 = u32) formats
// reuse the header with C = 1 and no trailer.

inline constexpr std::uint32_t kFormatVersion = 1;

FeatureVolume read_feature_volume(const std::filesystem::path& path);
void write_feature_volume(const FeatureVolume& volume, const std::filesystem::path& path);
FeatureVolume decode_feature_volume(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_feature_volume(const FeatureVolume& volume);

/// .lbl (raw) or .png (8/16-bit grayscale).
LabelImage read_label_image(const std::filesystem::path& path);
void write_label_image(const LabelImage& labels, const std::filesystem::path& path);
/// .ins (raw) or .png (8/16-bit grayscale).
InstanceMask read_instance_mask(const std::filesystem::path& path);
void write_instance_mask(const InstanceMask& mask, const std::filesystem::path& path);

/// Grayscale image from .png (gray or RGB(A), 8/16-bit; colour averaged)
/// or .fvol (channels summed).
Image read_image(const std::filesystem::path& path);
/// 8-bit grayscale PNG; values are clamped to [0, 255] and rounded.
void write_image_png8(const Image& image, const std::filesystem::path& path);

// --- Resampling ---------------------------------------------------------------

enum class Interpolation { nearest, bilinear };

/// Per-channel resize with the align-corners=false convention; each axis is
/// scaled independently.
FeatureVolume resize_features(const FeatureVolume& volume, std::uint32_t height, std::uint32_t width,
                              Interpolation mode);

/// Source index used by nearest-neighbour resampling from `in` to `out` cells.
std::size_t nearest_source_index(std::size_t dst, std::size_t in, std::size_t out);

template <class T>
Raster<T> resize_nearest(const Raster<T>& src, std::uint32_t height, std::uint32_t width) {
  Raster<T> out(height, width);
  for (std::uint32_t r = 0; r < height; ++r) {
    const std::size_t sr = nearest_source_index(r, src.height, height);
    for (std::uint32_t c = 0; c < width; ++c) out.at(r, c) = src.at(sr, nearest_source_index(c, src.width, width));
  }
  return out;
}

/// Nearest-neighbour projection of labels onto another grid.
LabelImage project_labels(const LabelImage& labels, std::uint32_t height, std::uint32_t width);

// --- Manifest ------------------------------------------------------------------

enum class Split { train, val, test };
Split parse_split(const std::string& tag);
std::string to_string(Split split);

struct ManifestRecord {
  std::string name;  // image file stem, used to name outputs
  std::filesystem::path image;
  std::map<std::string, std::filesystem::path> features;
  std::optional<std::filesystem::path> labels;
  std::optional<std::filesystem::path> instances;
  std::optional<std::filesystem::path> object_labels;
  Split split = Split::train;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory relative paths resolve against
  std::vector<std::string> class_names;
  std::vector<ManifestRecord> records;

  std::size_t num_classes() const { return class_names.size(); }
  std::vector<const ManifestRecord*> in_split(Split split) const;
  const std::filesystem::path& feature_path(const ManifestRecord& record, const std::string& model) const;
};

/// Parses and validates a manifest. Relative paths are resolved against the
/// manifest's directory. With `check_labels`, label images and object
/// tables are scanned for class indices above K.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_labels = true);
DatasetManifest parse_manifest(const std::string& json_text, const std::filesystem::path& root,
                               bool check_labels = true);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// "instance_id,class_index" rows; an optional header line is skipped.
std::map<std::uint32_t, std::uint16_t> read_object_labels(const std::filesystem::path& path);
void write_object_labels(const std::map<std::uint32_t, std::uint16_t>& labels, const std::filesystem::path& path);

}  // namespace microprobe
