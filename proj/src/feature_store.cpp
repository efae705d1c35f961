#include "microprobe/feature_store.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "microprobe/error.hpp"

namespace microprobe {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kDtypeF32 = 0;
constexpr std::uint32_t kDtypeU16 = 1;
constexpr std::uint32_t kDtypeU32 = 2;
constexpr std::size_t kHeaderBytes = 24;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
  return std::uint32_t{b[off]} | std::uint32_t{b[off + 1]} << 8 | std::uint32_t{b[off + 2]} << 16 |
         std::uint32_t{b[off + 3]} << 24;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

struct Header {
  std::uint32_t height, width, channels;
};

std::vector<std::uint8_t> encode_header(const char* magic, std::uint32_t dtype, std::uint32_t h, std::uint32_t w,
                                        std::uint32_t c) {
  std::vector<std::uint8_t> out(magic, magic + 4);
  put_u32(out, kFormatVersion);
  put_u32(out, dtype);
  put_u32(out, h);
  put_u32(out, w);
  put_u32(out, c);
  return out;
}

Header decode_header(std::span<const std::uint8_t> b, const char* magic, std::uint32_t dtype) {
  if (b.size() < kHeaderBytes) {
    throw FormatError(std::string(magic) + ": truncated header: expected at least " + std::to_string(kHeaderBytes) +
                      " bytes, got " + std::to_string(b.size()));
  }
  if (std::memcmp(b.data(), magic, 4) != 0) throw FormatError(std::string(magic) + ": bad magic at offset 0");
  if (const auto v = get_u32(b, 4); v != kFormatVersion) {
    throw FormatError(std::string(magic) + ": unsupported version " + std::to_string(v) + " at offset 4");
  }
  if (const auto d = get_u32(b, 8); d != dtype) {
    throw FormatError(std::string(magic) + ": unexpected dtype code " + std::to_string(d) + " at offset 8");
  }
  Header h{get_u32(b, 12), get_u32(b, 16), get_u32(b, 20)};
  const char* names[] = {"height", "width", "channels"};
  const std::uint32_t dims[] = {h.height, h.width, h.channels};
  for (int i = 0; i < 3; ++i) {
    if (dims[i] == 0) {
      throw FormatError(std::string(magic) + ": " + names[i] + " must be >= 1 (offset " + std::to_string(12 + 4 * i) + ")");
    }
  }
  return h;
}

template <class T>
std::vector<std::uint8_t> encode_raster(const Raster<T>& r, const char* magic, std::uint32_t dtype) {
  auto out = encode_header(magic, dtype, r.height, r.width, 1);
  out.reserve(out.size() + r.size() * sizeof(T));
  for (T v : r.data)
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  return out;
}

template <class T>
Raster<T> decode_raster(std::span<const std::uint8_t> b, const char* magic, std::uint32_t dtype) {
  const Header h = decode_header(b, magic, dtype);
  if (h.channels != 1) throw FormatError(std::string(magic) + ": channel count must be 1 (offset 20)");
  const std::size_t n = std::size_t{h.height} * h.width;
  const std::size_t expected = kHeaderBytes + n * sizeof(T);
  if (b.size() != expected) {
    throw FormatError(std::string(magic) + ": expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(b.size()));
  }
  Raster<T> r(h.height, h.width);
  for (std::size_t i = 0; i < n; ++i) {
    T v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k) v |= static_cast<T>(T{b[kHeaderBytes + i * sizeof(T) + k]} << (8 * k));
    r.data[i] = v;
  }
  return r;
}

// --- PNG via libpng's classic API ----------------------------------------------

struct PngPixels {
  std::uint32_t height = 0, width = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint16_t> samples;  // interleaved, promoted to 16-bit range of the source depth
};

struct PngErrorState {
  std::jmp_buf jump;
  char message[256] = {};
};

void png_error_handler(png_structp png, png_const_charp msg) {
  auto* state = static_cast<PngErrorState*>(png_get_error_ptr(png));
  std::snprintf(state->message, sizeof state->message, "%s", msg);
  std::longjmp(state->jump, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

PngPixels read_png(const fs::path& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw FormatError("cannot open '" + path.string() + "'");
  PngErrorState state;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &state, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FormatError("libpng initialisation failed");
  }
  PngPixels out;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(state.jump)) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FormatError("PNG '" + path.string() + "': " + state.message);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  out.height = png_get_image_height(png, info);
  out.width = png_get_image_width(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (std::uint32_t r = 0; r < out.height; ++r) rows[r] = buffer.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  const std::size_t n = std::size_t{out.height} * out.width * out.channels;
  out.samples.resize(n);
  if (out.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i)
      out.samples[i] = static_cast<std::uint16_t>(buffer[2 * i] << 8 | buffer[2 * i + 1]);  // PNG is big-endian
  } else {
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = buffer[i];
  }
  return out;
}

void write_png_gray(const fs::path& path, std::uint32_t height, std::uint32_t width, int depth,
                    std::span<const std::uint16_t> samples) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw FormatError("cannot open '" + path.string() + "' for writing");
  PngErrorState state;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &state, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FormatError("libpng initialisation failed");
  }
  const std::size_t bps = depth == 16 ? 2 : 1;
  std::vector<std::uint8_t> buffer(std::size_t{height} * width * bps);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (bps == 2) {
      buffer[2 * i] = static_cast<std::uint8_t>(samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<std::uint8_t>(samples[i] & 0xFF);
    } else {
      buffer[i] = static_cast<std::uint8_t>(samples[i]);
    }
  }
  std::vector<png_bytep> rows(height);
  for (std::uint32_t r = 0; r < height; ++r) rows[r] = buffer.data() + r * width * bps;
  if (setjmp(state.jump)) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FormatError("PNG '" + path.string() + "': " + state.message);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

template <class T>
Raster<T> png_as_raster(const fs::path& path) {
  const PngPixels px = read_png(path);
  if (px.channels != 1) {
    throw FormatError("'" + path.string() + "': label/instance PNGs must be single-channel grayscale");
  }
  Raster<T> r(px.height, px.width);
  std::copy(px.samples.begin(), px.samples.end(), r.data.begin());
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// FVOL

std::vector<std::uint8_t> encode_feature_volume(const FeatureVolume& v) {
  if (v.height == 0 || v.width == 0 || v.channels == 0) throw FormatError("FVOL: dimensions must be >= 1");
  if (v.values.size() != std::size_t{v.height} * v.width * v.channels) {
    throw FormatError("FVOL: value count does not match H*W*C");
  }
  auto out = encode_header("FVOL", kDtypeF32, v.height, v.width, v.channels);
  out.reserve(out.size() + v.values.size() * 4 + v.provenance.size() + 4);
  for (std::size_t i = 0; i < v.values.size(); ++i) {
    if (!std::isfinite(v.values[i])) throw FormatError("FVOL: non-finite value at index " + std::to_string(i));
    put_u32(out, std::bit_cast<std::uint32_t>(v.values[i]));
  }
  if (!v.provenance.empty()) {
    put_u32(out, static_cast<std::uint32_t>(v.provenance.size()));
    out.insert(out.end(), v.provenance.begin(), v.provenance.end());
  }
  return out;
}

FeatureVolume decode_feature_volume(std::span<const std::uint8_t> b) {
  const Header h = decode_header(b, "FVOL", kDtypeF32);
  FeatureVolume v;
  v.height = h.height;
  v.width = h.width;
  v.channels = h.channels;
  const std::size_t n = std::size_t{h.height} * h.width * h.channels;
  const std::size_t payload_end = kHeaderBytes + n * 4;
  if (b.size() < payload_end) {
    throw FormatError("FVOL: truncated payload: expected at least " + std::to_string(payload_end) + " bytes, got " +
                      std::to_string(b.size()));
  }
  v.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    v.values[i] = std::bit_cast<float>(get_u32(b, kHeaderBytes + 4 * i));
    if (!std::isfinite(v.values[i])) {
      throw FormatError("FVOL: non-finite value at offset " + std::to_string(kHeaderBytes + 4 * i));
    }
  }
  if (b.size() > payload_end) {
    if (b.size() < payload_end + 4) {
      throw FormatError("FVOL: truncated provenance length at offset " + std::to_string(payload_end));
    }
    const std::uint32_t len = get_u32(b, payload_end);
    if (b.size() != payload_end + 4 + len) {
      throw FormatError("FVOL: provenance at offset " + std::to_string(payload_end) + " declares " +
                        std::to_string(len) + " bytes, file has " + std::to_string(b.size() - payload_end - 4));
    }
    v.provenance.assign(b.begin() + static_cast<std::ptrdiff_t>(payload_end + 4), b.end());
  }
  return v;
}

FeatureVolume read_feature_volume(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_feature_volume(bytes);
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

void write_feature_volume(const FeatureVolume& volume, const fs::path& path) {
  write_file(path, encode_feature_volume(volume));
}

// ---------------------------------------------------------------------------
// Rasters

LabelImage read_label_image(const fs::path& path) {
  if (lower_ext(path) == ".png") return png_as_raster<std::uint16_t>(path);
  return decode_raster<std::uint16_t>(read_file(path), "FLBL", kDtypeU16);
}

void write_label_image(const LabelImage& labels, const fs::path& path) {
  if (lower_ext(path) == ".png") {
    write_png_gray(path, labels.height, labels.width, 16, labels.data);
    return;
  }
  write_file(path, encode_raster(labels, "FLBL", kDtypeU16));
}

InstanceMask read_instance_mask(const fs::path& path) {
  if (lower_ext(path) == ".png") return png_as_raster<std::uint32_t>(path);
  return decode_raster<std::uint32_t>(read_file(path), "FINS", kDtypeU32);
}

void write_instance_mask(const InstanceMask& mask, const fs::path& path) {
  if (lower_ext(path) == ".png") {
    std::vector<std::uint16_t> s(mask.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (mask.data[i] > 0xFFFF) throw FormatError("instance id above 65535 cannot be stored as PNG; use .ins");
      s[i] = static_cast<std::uint16_t>(mask.data[i]);
    }
    write_png_gray(path, mask.height, mask.width, 16, s);
    return;
  }
  write_file(path, encode_raster(mask, "FINS", kDtypeU32));
}

Image read_image(const fs::path& path) {
  if (lower_ext(path) == ".fvol") {
    const FeatureVolume v = read_feature_volume(path);
    Image img(v.height, v.width);
    for (std::size_t i = 0; i < img.size(); ++i) {
      float s = 0;
      for (std::size_t c = 0; c < v.channels; ++c) s += v.values[i * v.channels + c];
      img.data[i] = s;
    }
    return img;
  }
  const PngPixels px = read_png(path);
  const std::uint32_t color = px.channels >= 3 ? 3 : 1;  // alpha ignored
  Image img(px.height, px.width);
  for (std::size_t i = 0; i < img.size(); ++i) {
    float s = 0;
    for (std::uint32_t c = 0; c < color; ++c) s += px.samples[i * px.channels + c];
    img.data[i] = s / static_cast<float>(color);
  }
  return img;
}

void write_image_png8(const Image& image, const fs::path& path) {
  std::vector<std::uint16_t> s(image.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = static_cast<std::uint16_t>(std::lround(std::clamp(image.data[i], 0.0f, 255.0f)));
  }
  write_png_gray(path, image.height, image.width, 8, s);
}

// ---------------------------------------------------------------------------
// Resampling

std::size_t nearest_source_index(std::size_t dst, std::size_t in, std::size_t out) {
  return std::min((2 * dst + 1) * in / (2 * out), in - 1);
}

FeatureVolume resize_features(const FeatureVolume& v, std::uint32_t height, std::uint32_t width, Interpolation mode) {
  if (height == 0 || width == 0) throw ValidationError("resize_features: target dims must be >= 1");
  FeatureVolume out(height, width, v.channels);
  out.provenance = v.provenance;
  const std::size_t C = v.channels;
  if (mode == Interpolation::nearest) {
    for (std::uint32_t r = 0; r < height; ++r) {
      const std::size_t sr = nearest_source_index(r, v.height, height);
      for (std::uint32_t c = 0; c < width; ++c) {
        const std::size_t sc = nearest_source_index(c, v.width, width);
        std::copy_n(v.values.begin() + static_cast<std::ptrdiff_t>((sr * v.width + sc) * C), C,
                    out.values.begin() + static_cast<std::ptrdiff_t>((std::size_t{r} * width + c) * C));
      }
    }
    return out;
  }
  struct Tap {
    std::size_t lo, hi;
    float frac;
  };
  auto axis = [](std::size_t n_out, std::size_t n_in) {
    std::vector<Tap> taps(n_out);
    const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      taps[o] = {lo, std::min(lo + 1, n_in - 1), static_cast<float>(src - static_cast<double>(lo))};
    }
    return taps;
  };
  const auto ty = axis(height, v.height);
  const auto tx = axis(width, v.width);
  for (std::uint32_t r = 0; r < height; ++r) {
    const Tap& a = ty[r];
    for (std::uint32_t c = 0; c < width; ++c) {
      const Tap& b = tx[c];
      const float* p00 = &v.values[(a.lo * v.width + b.lo) * C];
      const float* p01 = &v.values[(a.lo * v.width + b.hi) * C];
      const float* p10 = &v.values[(a.hi * v.width + b.lo) * C];
      const float* p11 = &v.values[(a.hi * v.width + b.hi) * C];
      float* dst = &out.values[(std::size_t{r} * width + c) * C];
      for (std::size_t ch = 0; ch < C; ++ch) {
        const float top = p00[ch] + b.frac * (p01[ch] - p00[ch]);
        const float bottom = p10[ch] + b.frac * (p11[ch] - p10[ch]);
        dst[ch] = top + a.frac * (bottom - top);
      }
    }
  }
  return out;
}

LabelImage project_labels(const LabelImage& labels, std::uint32_t height, std::uint32_t width) {
  if (height == 0 || width == 0) throw ValidationError("project_labels: target dims must be >= 1");
  return resize_nearest(labels, height, width);
}

// ---------------------------------------------------------------------------
// Manifest

Split parse_split(const std::string& tag) {
  if (tag == "train") return Split::train;
  if (tag == "val") return Split::val;
  if (tag == "test") return Split::test;
  throw ValidationError("unknown split tag '" + tag + "' (expected train, val or test)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<const ManifestRecord*> DatasetManifest::in_split(Split split) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(&r);
  return out;
}

const fs::path& DatasetManifest::feature_path(const ManifestRecord& record, const std::string& model) const {
  auto it = record.features.find(model);
  if (it == record.features.end()) {
    throw ValidationError("record '" + record.name + "' has no features for model '" + model + "'");
  }
  return it->second;
}

std::map<std::uint32_t, std::uint16_t> read_object_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::map<std::uint32_t, std::uint16_t> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      std::size_t used = 0;
      const unsigned long id = std::stoul(line.substr(0, comma), &used);
      const unsigned long cls = std::stoul(line.substr(comma + 1));
      if (id == 0 || id > UINT32_MAX || cls > UINT16_MAX) throw std::out_of_range("range");
      if (!out.emplace(static_cast<std::uint32_t>(id), static_cast<std::uint16_t>(cls)).second) {
        throw FormatError("'" + path.string() + "' line " + std::to_string(lineno) + ": duplicate instance id " +
                          std::to_string(id));
      }
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception&) {
      if (lineno == 1) continue;  // header
      throw FormatError("'" + path.string() + "' line " + std::to_string(lineno) +
                        ": expected 'instance_id,class_index'");
    }
  }
  return out;
}

void write_object_labels(const std::map<std::uint32_t, std::uint16_t>& labels, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << "instance_id,class_index\n";
  for (const auto& [id, cls] : labels) out << id << ',' << cls << '\n';
}

DatasetManifest parse_manifest(const std::string& json_text, const fs::path& root, bool check_labels) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest is not valid JSON: ") + e.what());
  }
  DatasetManifest m;
  m.root = root;
  if (!j.contains("classes") || !j["classes"].is_array() || j["classes"].empty()) {
    throw ValidationError("manifest: 'classes' must be a non-empty array");
  }
  for (const auto& c : j["classes"]) {
    if (!c.is_string()) throw ValidationError("manifest: class names must be strings");
    m.class_names.push_back(c.get<std::string>());
  }
  if (!j.contains("records") || !j["records"].is_array()) throw ValidationError("manifest: 'records' must be an array");

  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : root / p; };
  std::vector<std::string> missing;
  auto require = [&](const fs::path& p) {
    if (!fs::exists(p)) missing.push_back(p.string());
  };
  std::set<std::string> names;
  for (std::size_t i = 0; i < j["records"].size(); ++i) {
    const auto& jr = j["records"][i];
    const std::string where = "manifest record " + std::to_string(i);
    ManifestRecord r;
    if (!jr.contains("image") || !jr["image"].is_string()) throw ValidationError(where + ": missing 'image'");
    if (!jr.contains("split") || !jr["split"].is_string()) throw ValidationError(where + ": missing 'split'");
    r.image = resolve(jr["image"].get<std::string>());
    r.name = jr.contains("name") ? jr["name"].get<std::string>() : r.image.stem().string();
    r.split = parse_split(jr["split"].get<std::string>());
    if (jr.contains("features")) {
      if (!jr["features"].is_object()) throw ValidationError(where + ": 'features' must be an object");
      for (const auto& [model, p] : jr["features"].items()) r.features[model] = resolve(p.get<std::string>());
    }
    if (jr.contains("labels") && !jr["labels"].is_null()) r.labels = resolve(jr["labels"].get<std::string>());
    if (jr.contains("instances") && !jr["instances"].is_null()) r.instances = resolve(jr["instances"].get<std::string>());
    if (jr.contains("object_labels") && !jr["object_labels"].is_null()) {
      r.object_labels = resolve(jr["object_labels"].get<std::string>());
    }
    if (!names.insert(r.name).second) throw ValidationError(where + ": duplicate record name '" + r.name + "'");
    require(r.image);
    for (const auto& [_, p] : r.features) require(p);
    if (r.labels) require(*r.labels);
    if (r.instances) require(*r.instances);
    if (r.object_labels) require(*r.object_labels);
    m.records.push_back(std::move(r));
  }
  if (!missing.empty()) {
    std::string msg = "manifest references missing files:";
    for (const auto& p : missing) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  if (check_labels) {
    const std::size_t K = m.num_classes();
    for (const auto& r : m.records) {
      if (r.labels) {
        const LabelImage l = read_label_image(*r.labels);
        const auto mx = *std::max_element(l.data.begin(), l.data.end());
        if (mx > K) {
          throw ValidationError("'" + r.labels->string() + "': class index " + std::to_string(mx) +
                                " out of range (K = " + std::to_string(K) + ")");
        }
      }
      if (r.object_labels) {
        for (const auto& [id, cls] : read_object_labels(*r.object_labels)) {
          if (cls == 0 || cls > K) {
            throw ValidationError("'" + r.object_labels->string() + "': instance " + std::to_string(id) +
                                  " has class index " + std::to_string(cls) + " out of range 1.." + std::to_string(K));
          }
        }
      }
    }
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path, bool check_labels) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path(), check_labels);
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  using nlohmann::ordered_json;
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  auto rel = [&](const fs::path& p) { return fs::relative(p, base).generic_string(); };
  ordered_json j;
  j["classes"] = m.class_names;
  j["records"] = ordered_json::array();
  for (const auto& r : m.records) {
    ordered_json jr;
    jr["name"] = r.name;
    jr["image"] = rel(r.image);
    jr["features"] = ordered_json::object();
    for (const auto& [model, p] : r.features) jr["features"][model] = rel(p);
    if (r.labels) jr["labels"] = rel(*r.labels);
    if (r.instances) jr["instances"] = rel(*r.instances);
    if (r.object_labels) jr["object_labels"] = rel(*r.object_labels);
    jr["split"] = to_string(r.split);
    j["records"].push_back(std::move(jr));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
}

}  // namespace microprobe
