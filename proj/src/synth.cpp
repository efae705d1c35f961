#include "microprobe/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "json.hpp"
#include "microprobe/error.hpp"
#include "microprobe/rng.hpp"

namespace microprobe {

namespace fs = std::filesystem;

SynthKind parse_synth_kind(const std::string& text) {
  if (text == "pixel") return SynthKind::pixel;
  if (text == "object") return SynthKind::object;
  throw ValidationError("unknown synth kind '" + text + "' (expected pixel or object)");
}

SynthConfig SynthConfig::resolved() const {
  SynthConfig c = *this;
  const bool pixel = kind == SynthKind::pixel;
  if (c.size == 0) c.size = pixel ? 128 : 64;
  if (c.stride == 0) c.stride = pixel ? 8 : 2;
  return c;
}

void SynthConfig::validate() const {
  if (num_classes < 2) throw ValidationError("synth: need at least 2 classes");
  if (n_images < 3) throw ValidationError("synth: need at least 3 images");
  if (!(noise >= 0) || !std::isfinite(noise)) throw ValidationError("synth: noise must be >= 0");
  if (stride == 0 || size == 0 || size % stride != 0) throw ValidationError("synth: size must be a multiple of stride");
  const std::size_t need = kind == SynthKind::pixel ? num_classes : num_classes + 1;
  if (channels < need) throw ValidationError("synth: need at least " + std::to_string(need) + " channels");
  if (!(val_fraction >= 0 && test_fraction > 0 && val_fraction + test_fraction < 1)) {
    throw ValidationError("synth: split fractions must leave room for training images");
  }
}

namespace {

struct Sample {
  Image image;
  LabelImage labels;
  FeatureVolume features;
  InstanceMask instances;
  std::map<std::uint32_t, std::uint16_t> object_classes;
};

void add_noise(FeatureVolume& v, double noise, Rng& rng) {
  if (noise == 0) return;
  for (auto& x : v.values) x += static_cast<float>(noise * rng.normal());
}

Sample make_pixel_sample(const SynthConfig& cfg, Rng& rng) {
  const std::uint32_t g = cfg.size / cfg.stride;
  const std::size_t k = cfg.num_classes;
  const std::size_t n_seeds = k + 2;
  std::vector<double> sr(n_seeds), sc(n_seeds);
  std::vector<std::uint16_t> cls(n_seeds);
  for (std::size_t i = 0; i < n_seeds; ++i) {
    sr[i] = rng.uniform(0, g);
    sc[i] = rng.uniform(0, g);
    cls[i] = static_cast<std::uint16_t>(i < k ? i + 1 : rng.uniform_index(k) + 1);
  }
  for (std::size_t i = k; i > 1; --i) std::swap(cls[i - 1], cls[rng.uniform_index(i)]);

  LabelImage cells(g, g);
  for (std::uint32_t r = 0; r < g; ++r)
    for (std::uint32_t c = 0; c < g; ++c) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t i = 0; i < n_seeds; ++i) {
        const double d = (r + 0.5 - sr[i]) * (r + 0.5 - sr[i]) + (c + 0.5 - sc[i]) * (c + 0.5 - sc[i]);
        if (d < bd) bd = d, best = i;
      }
      cells.at(r, c) = cls[best];
    }

  Sample s;
  s.features = FeatureVolume(g, g, cfg.channels);
  for (std::uint32_t r = 0; r < g; ++r)
    for (std::uint32_t c = 0; c < g; ++c) s.features.at(r, c, cells.at(r, c) - 1u) = 1.0f;
  add_noise(s.features, cfg.noise, rng);

  s.labels = resize_nearest(cells, cfg.size, cfg.size);
  s.image = Image(cfg.size, cfg.size);
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    const double t = double(s.labels.data[i] - 1) / double(k - 1);
    const double mean = 60 + 120 * t, contrast = 40 * cfg.noise * (0.5 + t);
    s.image.data[i] = static_cast<float>(mean + contrast * rng.normal());
  }
  return s;
}

Sample make_object_sample(const SynthConfig& cfg, Rng& rng) {
  const std::uint32_t n = cfg.size, g = n / cfg.stride;
  const std::size_t k = cfg.num_classes;
  struct Disc {
    double r, c, radius;
    std::uint16_t cls;
  };
  std::vector<Disc> discs;
  const std::size_t want = 4 + rng.uniform_index(5);
  for (int attempt = 0; attempt < 400 && discs.size() < want; ++attempt) {
    const auto cls = static_cast<std::uint16_t>(rng.uniform_index(k) + 1);
    const double radius = 2.5 + 1.0 * (cls - 1) + rng.uniform(-0.4, 0.4);
    const double lo = radius + 1, hi = n - radius - 2;
    if (hi <= lo) continue;
    const Disc d{rng.uniform(lo, hi), rng.uniform(lo, hi), radius, cls};
    const bool clear = std::none_of(discs.begin(), discs.end(), [&](const Disc& o) {
      return std::hypot(d.r - o.r, d.c - o.c) < d.radius + o.radius + 2;
    });
    if (clear) discs.push_back(d);
  }

  Sample s;
  s.instances = InstanceMask(n, n);
  s.labels = LabelImage(n, n);
  s.image = Image(n, n, 20.0f);
  for (std::size_t i = 0; i < discs.size(); ++i) {
    const Disc& d = discs[i];
    const auto id = static_cast<std::uint32_t>(i + 1);
    s.object_classes[id] = d.cls;
    for (std::uint32_t r = 0; r < n; ++r)
      for (std::uint32_t c = 0; c < n; ++c)
        if ((r - d.r) * (r - d.r) + (c - d.c) * (c - d.c) <= d.radius * d.radius) {
          s.instances.at(r, c) = id;
          s.labels.at(r, c) = d.cls;
          s.image.at(r, c) = static_cast<float>(80 + 40 * (d.cls - 1));
        }
  }
  for (auto& x : s.image.data) x += static_cast<float>(30 * cfg.noise * rng.normal());

  s.features = FeatureVolume(g, g, cfg.channels);
  const float inv = 1.0f / float(cfg.stride * cfg.stride);
  for (std::uint32_t r = 0; r < n; ++r)
    for (std::uint32_t c = 0; c < n; ++c)
      if (const auto l = s.labels.at(r, c)) {
        s.features.at(r / cfg.stride, c / cfg.stride, 0) += inv;
        s.features.at(r / cfg.stride, c / cfg.stride, l) += inv;
      }
  add_noise(s.features, cfg.noise, rng);
  return s;
}

}  // namespace

DatasetManifest synth_generate(const SynthConfig& config, const fs::path& out) {
  const SynthConfig cfg = config.resolved();
  cfg.validate();
  for (const char* sub : {"images", "labels", "features/synth"}) fs::create_directories(out / sub);
  const bool objects = cfg.kind == SynthKind::object;
  if (objects) {
    fs::create_directories(out / "instances");
    fs::create_directories(out / "object_labels");
  }

  const auto n_test = std::max<std::size_t>(1, std::size_t(std::lround(cfg.n_images * cfg.test_fraction)));
  const auto n_val = std::size_t(std::lround(cfg.n_images * cfg.val_fraction));
  if (n_test + n_val >= cfg.n_images) throw ValidationError("synth: split fractions leave no training images");
  const std::size_t n_train = cfg.n_images - n_test - n_val;

  nlohmann::ordered_json prov;
  prov["model"] = kSynthModel;
  prov["kind"] = objects ? "object" : "pixel";
  prov["seed"] = cfg.seed;
  prov["noise"] = cfg.noise;
  const std::string provenance = prov.dump();

  DatasetManifest m;
  m.root = out;
  for (std::size_t c = 1; c <= cfg.num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));
  for (std::size_t i = 0; i < cfg.n_images; ++i) {
    Rng rng(mix_seed(cfg.seed, i));
    Sample s = objects ? make_object_sample(cfg, rng) : make_pixel_sample(cfg, rng);
    s.features.provenance = provenance;

    char name[32];
    std::snprintf(name, sizeof name, "img%04zu", i);
    ManifestRecord r;
    r.name = name;
    r.image = out / "images" / (r.name + ".png");
    r.labels = out / "labels" / (r.name + ".lbl");
    r.features[kSynthModel] = out / "features" / "synth" / (r.name + ".fvol");
    r.split = i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
    write_image_png8(s.image, r.image);
    write_label_image(s.labels, *r.labels);
    write_feature_volume(s.features, r.features[kSynthModel]);
    if (objects) {
      r.instances = out / "instances" / (r.name + ".ins");
      r.object_labels = out / "object_labels" / (r.name + ".csv");
      write_instance_mask(s.instances, *r.instances);
      write_object_labels(s.object_classes, *r.object_labels);
    }
    m.records.push_back(std::move(r));
  }
  write_manifest(m, out / "manifest.json");
  return m;
}

}  // namespace microprobe
