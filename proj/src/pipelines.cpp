#include "microprobe/pipelines.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"
#include "microprobe/error.hpp"
#include "microprobe/parallel.hpp"
#include "microprobe/rng.hpp"
#include "microprobe/sampling.hpp"

namespace microprobe {

namespace fs = std::filesystem;

Task parse_task(const std::string& text) {
  if (text == "pixel-rf") return Task::pixel_rf;
  if (text == "pixel-deap") return Task::pixel_deap;
  if (text == "object-rf") return Task::object_rf;
  if (text == "object-obap") return Task::object_obap;
  throw ValidationError("unknown task '" + text + "' (expected pixel-rf, pixel-deap, object-rf or object-obap)");
}

std::string to_string(Task task) {
  switch (task) {
    case Task::pixel_rf: return "pixel-rf";
    case Task::pixel_deap: return "pixel-deap";
    case Task::object_rf: return "object-rf";
    case Task::object_obap: return "object-obap";
  }
  return "?";
}

ObjectFeatureSpec ObjectFeatureSpec::parse(const std::string& text) {
  ObjectFeatureSpec s{false, false, false};
  std::stringstream ss(text);
  std::string item;
  bool any = false;
  while (std::getline(ss, item, ',')) {
    if (item == "mean") s.mean = true;
    else if (item == "std") s.std = true;
    else if (item == "area") s.area = true;
    else throw ValidationError("unknown aggregator '" + item + "' (expected mean, std or area)");
    any = true;
  }
  if (!any) throw ValidationError("aggregators must not be empty");
  return s;
}

std::string ObjectFeatureSpec::to_string() const {
  std::string out;
  for (auto [on, name] : {std::pair{mean, "mean"}, {std, "std"}, {area, "area"}}) {
    if (!on) continue;
    if (!out.empty()) out += ',';
    out += name;
  }
  return out;
}

std::size_t ObjectFeatureSpec::dim(std::size_t channels) const {
  return (mean ? channels : 0) + (std ? channels : 0) + (area ? 1 : 0);
}

std::vector<std::vector<float>> aggregate_object_features(const FeatureVolume& volume, const InstanceMask& mask,
                                                          std::span<const std::uint32_t> ids,
                                                          const ObjectFeatureSpec& spec) {
  const std::size_t c = volume.channels;
  std::map<std::uint32_t, std::size_t> slot;
  for (std::size_t i = 0; i < ids.size(); ++i) slot.emplace(ids[i], i);
  std::vector<std::size_t> rows(mask.height), cols(mask.width);
  for (std::uint32_t r = 0; r < mask.height; ++r) rows[r] = nearest_source_index(r, volume.height, mask.height);
  for (std::uint32_t x = 0; x < mask.width; ++x) cols[x] = nearest_source_index(x, volume.width, mask.width);

  std::vector<std::vector<double>> sum(ids.size(), std::vector<double>(c)), sq(ids.size(), std::vector<double>(c));
  std::vector<std::size_t> area(ids.size());
  auto for_each_pixel = [&](auto&& fn) {
    for (std::uint32_t r = 0; r < mask.height; ++r)
      for (std::uint32_t x = 0; x < mask.width; ++x) {
        const auto id = mask.at(r, x);
        if (id == 0) continue;
        const auto it = slot.find(id);
        if (it != slot.end()) fn(it->second, volume.pixel(rows[r], cols[x]));
      }
  };
  for_each_pixel([&](std::size_t s, std::span<const float> f) {
    ++area[s];
    for (std::size_t k = 0; k < c; ++k) sum[s][k] += f[k];
  });
  for (std::size_t s = 0; s < ids.size(); ++s) {
    if (area[s] == 0) throw ValidationError("object " + std::to_string(ids[s]) + " has no pixels in the instance mask");
    for (auto& v : sum[s]) v /= double(area[s]);
  }
  if (spec.std) {
    for_each_pixel([&](std::size_t s, std::span<const float> f) {
      for (std::size_t k = 0; k < c; ++k) sq[s][k] += (f[k] - sum[s][k]) * (f[k] - sum[s][k]);
    });
  }

  std::vector<std::vector<float>> out(ids.size());
  for (std::size_t s = 0; s < ids.size(); ++s) {
    auto& row = out[s];
    row.reserve(spec.dim(c));
    if (spec.mean)
      for (double v : sum[s]) row.push_back(static_cast<float>(v));
    if (spec.std)
      for (double v : sq[s]) row.push_back(static_cast<float>(std::sqrt(v / double(area[s]))));
    if (spec.area) row.push_back(static_cast<float>(area[s]));
  }
  return out;
}

std::map<std::uint32_t, std::uint16_t> majority_object_labels(const InstanceMask& mask, const LabelImage& labels) {
  if (mask.height != labels.height || mask.width != labels.width) {
    throw ShapeError("majority_object_labels: mask is " + std::to_string(mask.height) + "x" +
                     std::to_string(mask.width) + ", labels are " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width));
  }
  std::map<std::uint32_t, std::map<std::uint16_t, std::size_t>> votes;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.data[i] == 0) continue;
    auto& v = votes[mask.data[i]];
    if (labels.data[i] != 0) ++v[labels.data[i]];
  }
  std::map<std::uint32_t, std::uint16_t> out;
  for (const auto& [id, v] : votes) {
    std::uint16_t best = 0;
    std::size_t count = 0;
    for (const auto& [cls, n] : v)
      if (n > count) best = cls, count = n;
    out[id] = best;
  }
  return out;
}

void ExperimentSpec::validate() const {
  if (budgets.empty()) throw ValidationError("at least one budget is required");
  if (folds == 0 || repeats == 0) throw ValidationError("folds and repeats must be >= 1");
  if (jobs == 0) throw ValidationError("jobs must be >= 1");
  if (rf_size == 0) throw ValidationError("rf size must be >= 1");
  if (model.empty()) throw ValidationError("model key must not be empty");
  const bool objects = task == Task::object_rf || task == Task::object_obap;
  if (model == kRegionPropsModel && task != Task::object_rf) {
    throw ValidationError("model 'regionprops' is only available for object-rf");
  }
  std::optional<std::size_t> prev;
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    const auto& b = budgets[i];
    if (b == "all") {
      if (!objects) throw ValidationError("budget 'all' is only accepted by object tasks");
      if (i + 1 != budgets.size()) throw ValidationError("budget 'all' must come last");
      continue;
    }
    const std::size_t n = ObjectBudget::parse(b).n_objects.value();
    if (prev && n <= *prev) throw ValidationError("budgets must be strictly ascending");
    prev = n;
  }
  filterbank.validate();
  if (task == Task::pixel_deap || task == Task::object_obap) probe.train.validate();
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) { return mix_seed(seed, fold); }
std::uint64_t repeat_seed(std::uint64_t seed, std::size_t fold, std::size_t repeat) {
  return mix_seed(fold_seed(seed, fold), 0x5EED0000u + repeat);
}

struct Cell {
  std::size_t budget = 0;  // index into spec.budgets
  std::size_t fold = 0;
  std::size_t repeat = 0;
};

struct CellResult {
  double f1 = 0;
  double train_s = 0;
  double infer_s = 0;
};

std::vector<const ManifestRecord*> split_records(const DatasetManifest& m, Split split, bool need_labels,
                                                 bool need_instances, const std::string& what) {
  auto recs = m.in_split(split);
  for (const auto* r : recs) {
    if (need_labels && !r->labels) {
      throw ValidationError(what + ": record '" + r->name + "' (" + to_string(split) + ") has no labels");
    }
    if (need_instances && !r->instances) {
      throw ValidationError(what + ": record '" + r->name + "' (" + to_string(split) + ") has no instance mask");
    }
  }
  return recs;
}

FeatureVolume load_volume(const DatasetManifest& m, const ManifestRecord& r, const ExperimentSpec& s) {
  if (s.model == kFilterBankModel) return pixel_filter_bank(read_image(r.image), s.filterbank);
  return read_feature_volume(m.feature_path(r, s.model));
}

FeatureVolume resized(const FeatureVolume& v, std::uint32_t side, Interpolation mode) {
  if (v.height == side && v.width == side) return v;
  return resize_features(v, side, side, mode);
}

// Probes attend over the whole grid, so image-resolution filter-bank volumes
// are brought down to a feature-grid size first.
FeatureVolume load_probe_volume(const DatasetManifest& m, const ManifestRecord& r, const ExperimentSpec& s) {
  FeatureVolume v = load_volume(m, r, s);
  if (s.model == kFilterBankModel) v = resized(v, s.probe.filterbank_grid, Interpolation::bilinear);
  return v;
}

void check_same_grid(const std::vector<FeatureVolume>& vols, const std::string& what) {
  for (const auto& v : vols) {
    if (v.height != vols[0].height || v.width != vols[0].width || v.channels != vols[0].channels) {
      throw ShapeError(what + ": feature volumes differ in shape (" + std::to_string(v.height) + "x" +
                       std::to_string(v.width) + "x" + std::to_string(v.channels) + " vs " +
                       std::to_string(vols[0].height) + "x" + std::to_string(vols[0].width) + "x" +
                       std::to_string(vols[0].channels) + ")");
    }
  }
}

double score(const ConfusionMatrix& cm, bool weighted) { return weighted ? weighted_f1(cm) : macro_f1(cm); }

fs::path cell_dir(const ExperimentSpec& s, const Cell& c) {
  return s.out / "predictions" /
         (s.budgets[c.budget] + "_f" + std::to_string(c.fold) + "_r" + std::to_string(c.repeat));
}

std::size_t budget_count(const std::string& b) { return ObjectBudget::parse(b).n_objects.value(); }

// Runs the cells (jobs at a time) and returns records in cell order.
template <class Fn>
std::vector<RunRecord> run_cells(const ExperimentSpec& s, std::size_t repeats, Fn&& fn) {
  std::vector<Cell> cells;
  for (std::size_t b = 0; b < s.budgets.size(); ++b)
    for (std::size_t f = 0; f < s.folds; ++f)
      for (std::size_t r = 0; r < repeats; ++r) cells.push_back({b, f, r});
  std::vector<RunRecord> records(cells.size());
  std::mutex log_mutex;
  parallel_for(cells.size(), s.jobs, [&](std::size_t i) {
    const Cell& c = cells[i];
    const CellResult res = fn(c);
    RunRecord& rec = records[i];
    rec.method = to_string(s.task);
    rec.model = s.model;
    rec.budget = s.budgets[c.budget];
    rec.fold = c.fold;
    rec.repeat = c.repeat;
    rec.f1 = res.f1;
    rec.train_s = s.timings ? res.train_s : 0.0;
    rec.infer_s_per_image = s.timings ? res.infer_s : 0.0;
    std::lock_guard lock(log_mutex);
    spdlog::info("{} {} budget={} fold={} repeat={} f1={:.4f} train={:.2f}s", rec.method, rec.model, rec.budget,
                 rec.fold, rec.repeat, rec.f1, res.train_s);
  });
  return records;
}

// --- pixel tasks --------------------------------------------------------------------

std::vector<RunRecord> run_pixel_rf(const ExperimentSpec& s, const DatasetManifest& m) {
  const std::string what = "pixel-rf";
  const auto train = split_records(m, Split::train, true, false, what);
  const auto test = split_records(m, Split::test, true, false, what);
  if (train.empty() || test.empty()) throw ValidationError(what + ": need train and test records");
  const std::size_t k = m.num_classes();
  const std::uint32_t side = s.rf_size;

  LabeledSample pool;
  for (const auto* r : train) {
    const FeatureVolume v = resized(load_volume(m, *r, s), side, s.resize);
    const LabelImage l = project_labels(read_label_image(*r->labels), side, side);
    if (pool.dim == 0) pool.dim = v.channels;
    if (v.channels != pool.dim) throw ShapeError(what + ": channel count differs for '" + r->name + "'");
    for (std::size_t i = 0; i < l.size(); ++i)
      if (l.data[i] != 0) pool.push_back({v.values.data() + i * v.channels, v.channels}, l.data[i]);
  }
  if (pool.size() == 0) throw ValidationError(what + ": no labeled training pixels");

  std::vector<FeatureVolume> test_vols;
  std::vector<LabelImage> truth;
  for (const auto* r : test) {
    test_vols.push_back(load_volume(m, *r, s));
    truth.push_back(read_label_image(*r->labels));
  }

  return run_cells(s, s.repeats, [&](const Cell& c) {
    const LabeledSample sample = sample_pixels_rf(pool, {budget_count(s.budgets[c.budget]), fold_seed(s.seed, c.fold)});
    RFConfig rc = s.rf;
    rc.seed = repeat_seed(s.seed, c.fold, c.repeat);
    rc.workers = s.workers;
    auto t0 = Clock::now();
    const RandomForestModel forest = rf_fit(sample, rc, k);
    CellResult res;
    res.train_s = seconds_since(t0);

    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < test.size(); ++i) {
      const FeatureVolume v = resized(test_vols[i], side, s.resize);
      t0 = Clock::now();
      LabelImage small(side, side);
      small.data = rf_predict(forest, v.values, s.workers);
      const LabelImage pred = resize_nearest(small, truth[i].height, truth[i].width);
      res.infer_s += seconds_since(t0);
      cm += evaluate_pixels(pred, truth[i], k);
      if (s.save_predictions) {
        const fs::path dir = cell_dir(s, c);
        fs::create_directories(dir);
        write_label_image(pred, dir / (test[i]->name + ".lbl"));
      }
    }
    res.infer_s /= double(test.size());
    res.f1 = score(cm, s.weighted_f1);
    return res;
  });
}

std::vector<RunRecord> run_pixel_deap(const ExperimentSpec& s, const DatasetManifest& m) {
  const std::string what = "pixel-deap";
  auto train = split_records(m, Split::train, true, false, what);
  const auto val = split_records(m, Split::val, true, false, what);
  const auto test = split_records(m, Split::test, true, false, what);
  if (train.empty() || test.empty()) throw ValidationError(what + ": need train and test records");
  const std::size_t k = m.num_classes();
  const std::uint32_t in = s.probe.input_size;

  std::vector<FeatureVolume> train_vols, val_vols, test_vols;
  std::vector<LabelImage> train_labels, val_labels, truth;
  for (const auto* r : train) {
    LabelImage l = project_labels(read_label_image(*r->labels), in, in);
    if (std::all_of(l.data.begin(), l.data.end(), [](auto x) { return x == 0; })) {
      spdlog::warn("{}: '{}' has no labeled pixels at the input size, skipped", what, r->name);
      continue;
    }
    train_labels.push_back(std::move(l));
    train_vols.push_back(load_probe_volume(m, *r, s));
  }
  if (train_vols.empty()) throw ValidationError(what + ": no labeled training images");
  for (const auto* r : val) {
    val_vols.push_back(load_probe_volume(m, *r, s));
    val_labels.push_back(project_labels(read_label_image(*r->labels), in, in));
  }
  for (const auto* r : test) {
    test_vols.push_back(load_probe_volume(m, *r, s));
    truth.push_back(read_label_image(*r->labels));
  }
  std::vector<FeatureVolume> all = train_vols;
  all.insert(all.end(), val_vols.begin(), val_vols.end());
  all.insert(all.end(), test_vols.begin(), test_vols.end());
  check_same_grid(all, what);

  DeapConfig base;
  base.input_size = in;
  base.feat_h = train_vols[0].height;
  base.feat_w = train_vols[0].width;
  base.channels = train_vols[0].channels;
  base.num_classes = k;
  base.heads = s.probe.heads;
  base.width = s.probe.width;
  base.decoder_channels = s.probe.decoder_channels;
  base.sigma_init = s.probe.sigma_init;
  base.gaussian_mask = s.probe.gaussian_mask;
  base.validate();

  std::vector<DeapExample> val_ex;
  for (std::size_t i = 0; i < val_vols.size(); ++i) val_ex.push_back({&val_vols[i], &val_labels[i], {}});

  return run_cells(s, 1, [&](const Cell& c) {
    const std::uint64_t seed = fold_seed(s.seed, c.fold);
    const auto pixels = sample_pixels_deap(train_labels, {budget_count(s.budgets[c.budget]), seed});
    std::vector<DeapExample> ex;
    for (std::size_t i = 0; i < train_vols.size(); ++i) ex.push_back({&train_vols[i], &train_labels[i], pixels[i]});
    DeapConfig cfg = base;
    cfg.seed = mix_seed(seed, 1);
    TrainConfig tc = s.probe.train;
    tc.seed = mix_seed(seed, 2);

    auto t0 = Clock::now();
    const DeapProbe<float> probe = deap_train(cfg, ex, val_ex, tc);
    CellResult res;
    res.train_s = seconds_since(t0);

    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < test.size(); ++i) {
      t0 = Clock::now();
      const LabelImage pred = resize_nearest(deap_predict(probe, test_vols[i]), truth[i].height, truth[i].width);
      res.infer_s += seconds_since(t0);
      cm += evaluate_pixels(pred, truth[i], k);
      if (s.save_predictions) {
        const fs::path dir = cell_dir(s, c);
        fs::create_directories(dir);
        write_label_image(pred, dir / (test[i]->name + ".lbl"));
      }
    }
    res.infer_s /= double(test.size());
    res.f1 = score(cm, s.weighted_f1);
    return res;
  });
}

// --- object tasks --------------------------------------------------------------------

struct ObjectImage {
  const ManifestRecord* record = nullptr;
  InstanceMask mask;
  std::vector<std::uint32_t> ids;     // ascending
  std::vector<std::uint16_t> labels;  // per id, 0 = unknown
};

std::vector<std::uint32_t> instance_ids(const InstanceMask& mask) {
  std::set<std::uint32_t> ids(mask.data.begin(), mask.data.end());
  ids.erase(0);
  return {ids.begin(), ids.end()};
}

ObjectImage load_objects(const ManifestRecord& r, std::size_t num_classes, const std::string& what) {
  ObjectImage o;
  o.record = &r;
  o.mask = read_instance_mask(*r.instances);
  o.ids = instance_ids(o.mask);
  std::map<std::uint32_t, std::uint16_t> cls;
  if (r.object_labels) {
    cls = read_object_labels(*r.object_labels);
  } else if (r.labels) {
    cls = majority_object_labels(o.mask, read_label_image(*r.labels));
  } else {
    throw ValidationError(what + ": record '" + r.name + "' has neither object labels nor a label image");
  }
  for (auto id : o.ids) {
    const auto it = cls.find(id);
    const std::uint16_t c = it == cls.end() ? 0 : it->second;
    if (c > num_classes) throw ValidationError(what + ": object " + std::to_string(id) + " in '" + r.name + "' has class " + std::to_string(c));
    o.labels.push_back(c);
  }
  return o;
}

std::vector<ObjectImage> load_object_split(const DatasetManifest& m, Split split, const std::string& what) {
  std::vector<ObjectImage> out;
  for (const auto* r : split_records(m, split, false, true, what)) out.push_back(load_objects(*r, m.num_classes(), what));
  return out;
}

std::map<std::uint32_t, std::uint16_t> known_truth(const ObjectImage& o) {
  std::map<std::uint32_t, std::uint16_t> t;
  for (std::size_t j = 0; j < o.ids.size(); ++j)
    if (o.labels[j] != 0) t[o.ids[j]] = o.labels[j];
  return t;
}

std::map<std::uint32_t, std::uint16_t> restrict_to(const std::map<std::uint32_t, std::uint16_t>& pred,
                                                   const std::map<std::uint32_t, std::uint16_t>& truth) {
  std::map<std::uint32_t, std::uint16_t> out;
  for (const auto& [id, _] : truth)
    if (const auto it = pred.find(id); it != pred.end()) out.insert(*it);
  return out;
}

ObjectBudget object_budget(const std::string& text, std::uint64_t seed) { return ObjectBudget::parse(text, seed); }

std::vector<RunRecord> run_object_rf(const ExperimentSpec& s, const DatasetManifest& m) {
  const std::string what = "object-rf";
  const auto train = load_object_split(m, Split::train, what);
  const auto test = load_object_split(m, Split::test, what);
  if (train.empty() || test.empty()) throw ValidationError(what + ": need train and test records");
  const std::size_t k = m.num_classes();

  auto rows_for = [&](const ObjectImage& o) {
    if (s.model == kRegionPropsModel) {
      const auto props = region_props(read_image(o.record->image), o.mask, o.ids);
      std::vector<std::vector<float>> rows;
      for (auto id : o.ids) {
        const auto a = props.at(id).to_array();
        rows.emplace_back(a.begin(), a.end());
      }
      return rows;
    }
    const FeatureVolume v = resized(load_volume(m, *o.record, s), s.rf_size, s.resize);
    return aggregate_object_features(v, o.mask, o.ids, s.aggregators);
  };

  LabeledSample pool;
  for (const auto& o : train) {
    const auto rows = rows_for(o);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (o.labels[j] == 0) continue;
      if (pool.dim == 0) pool.dim = rows[j].size();
      pool.push_back(rows[j], o.labels[j]);
    }
  }
  if (pool.size() == 0) throw ValidationError(what + ": no labeled training objects");
  spdlog::info("{}: {} training objects, feature dim {}", what, pool.size(), pool.dim);

  std::vector<std::vector<float>> test_rows(test.size());
  for (std::size_t i = 0; i < test.size(); ++i)
    for (const auto& row : rows_for(test[i])) test_rows[i].insert(test_rows[i].end(), row.begin(), row.end());

  return run_cells(s, s.repeats, [&](const Cell& c) {
    const auto pick = sample_objects(pool.labels, object_budget(s.budgets[c.budget], fold_seed(s.seed, c.fold)));
    const LabeledSample sample = pool.subset(pick);
    RFConfig rc = s.rf;
    rc.seed = repeat_seed(s.seed, c.fold, c.repeat);
    rc.workers = s.workers;
    auto t0 = Clock::now();
    const RandomForestModel forest = rf_fit(sample, rc, k);
    CellResult res;
    res.train_s = seconds_since(t0);

    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < test.size(); ++i) {
      t0 = Clock::now();
      const auto cls = test_rows[i].empty() ? std::vector<std::uint16_t>{} : rf_predict(forest, test_rows[i], s.workers);
      res.infer_s += seconds_since(t0);
      std::map<std::uint32_t, std::uint16_t> pred;
      for (std::size_t j = 0; j < cls.size(); ++j) pred[test[i].ids[j]] = cls[j];
      const auto truth = known_truth(test[i]);
      cm += evaluate_objects(restrict_to(pred, truth), truth, k);
      if (s.save_predictions) {
        const fs::path dir = cell_dir(s, c);
        fs::create_directories(dir);
        write_object_labels(pred, dir / (test[i].record->name + ".csv"));
      }
    }
    res.infer_s /= double(test.size());
    res.f1 = score(cm, s.weighted_f1);
    return res;
  });
}

std::vector<GridPoint> feature_centroids(const ObjectImage& o, const FeatureVolume& v) {
  std::vector<GridPoint> out;
  for (const auto& c : object_centroids(o.mask)) {
    out.push_back(image_to_feature({c.row, c.col}, o.mask.height, o.mask.width, v.height, v.width));
  }
  return out;
}

std::vector<RunRecord> run_object_obap(const ExperimentSpec& s, const DatasetManifest& m) {
  const std::string what = "object-obap";
  const auto train = load_object_split(m, Split::train, what);
  const auto val = load_object_split(m, Split::val, what);
  const auto test = load_object_split(m, Split::test, what);
  if (train.empty() || test.empty()) throw ValidationError(what + ": need train and test records");
  const std::size_t k = m.num_classes();

  auto load = [&](const std::vector<ObjectImage>& objs) {
    std::vector<FeatureVolume> vols;
    for (const auto& o : objs) vols.push_back(load_probe_volume(m, *o.record, s));
    return vols;
  };
  const auto train_vols = load(train), val_vols = load(val), test_vols = load(test);
  std::vector<FeatureVolume> all = train_vols;
  all.insert(all.end(), val_vols.begin(), val_vols.end());
  all.insert(all.end(), test_vols.begin(), test_vols.end());
  check_same_grid(all, what);

  ObapConfig cfg;
  cfg.feat_h = train_vols[0].height;
  cfg.feat_w = train_vols[0].width;
  cfg.channels = train_vols[0].channels;
  cfg.num_classes = k;
  cfg.heads = s.probe.heads;
  cfg.width = s.probe.width;
  cfg.n_max = s.probe.n_max;
  cfg.sigma_init = s.probe.sigma_init;
  cfg.gaussian_mask = s.probe.gaussian_mask;
  cfg.validate();

  std::vector<std::vector<GridPoint>> train_c, test_c;
  std::vector<ObapExample> val_ex;
  std::vector<std::uint16_t> pool_labels;
  for (std::size_t i = 0; i < train.size(); ++i) {
    train_c.push_back(feature_centroids(train[i], train_vols[i]));
    pool_labels.insert(pool_labels.end(), train[i].labels.begin(), train[i].labels.end());
  }
  for (std::size_t i = 0; i < val.size(); ++i) val_ex.push_back({&val_vols[i], feature_centroids(val[i], val_vols[i]), val[i].labels});
  for (std::size_t i = 0; i < test.size(); ++i) test_c.push_back(feature_centroids(test[i], test_vols[i]));
  if (std::all_of(pool_labels.begin(), pool_labels.end(), [](auto x) { return x == 0; })) {
    throw ValidationError(what + ": no labeled training objects");
  }

  return run_cells(s, 1, [&](const Cell& c) {
    const std::uint64_t seed = fold_seed(s.seed, c.fold);
    const auto pick = sample_objects(pool_labels, object_budget(s.budgets[c.budget], seed));
    std::vector<std::uint16_t> chosen(pool_labels.size());
    for (auto p : pick) chosen[p] = pool_labels[p];
    std::vector<ObapExample> ex;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const std::size_t n = train[i].ids.size();
      ex.push_back({&train_vols[i], train_c[i], {chosen.begin() + offset, chosen.begin() + offset + n}});
      offset += n;
    }
    ObapConfig pc = cfg;
    pc.seed = mix_seed(seed, 1);
    TrainConfig tc = s.probe.train;
    tc.seed = mix_seed(seed, 2);

    auto t0 = Clock::now();
    const ObapProbe<float> probe = obap_train(pc, ex, val_ex, tc);
    CellResult res;
    res.train_s = seconds_since(t0);

    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < test.size(); ++i) {
      t0 = Clock::now();
      const auto cls = obap_predict(probe, test_vols[i], test_c[i]);
      res.infer_s += seconds_since(t0);
      std::map<std::uint32_t, std::uint16_t> pred;
      for (std::size_t j = 0; j < cls.size(); ++j) pred[test[i].ids[j]] = cls[j];
      const auto truth = known_truth(test[i]);
      cm += evaluate_objects(restrict_to(pred, truth), truth, k);
      if (s.save_predictions) {
        const fs::path dir = cell_dir(s, c);
        fs::create_directories(dir);
        write_object_labels(pred, dir / (test[i].record->name + ".csv"));
      }
    }
    res.infer_s /= double(test.size());
    res.f1 = score(cm, s.weighted_f1);
    return res;
  });
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << text;
}

std::string spec_json(const ExperimentSpec& s) {
  nlohmann::ordered_json j;
  j["task"] = to_string(s.task);
  j["manifest"] = s.manifest.generic_string();
  j["model"] = s.model;
  j["budgets"] = s.budgets;
  j["folds"] = s.folds;
  j["repeats"] = s.repeats;
  j["seed"] = s.seed;
  j["rf_size"] = s.rf_size;
  j["resize"] = s.resize == Interpolation::bilinear ? "bilinear" : "nearest";
  j["rf"] = {{"n_trees", s.rf.n_trees},
             {"max_depth", s.rf.max_depth},
             {"min_samples_leaf", s.rf.min_samples_leaf},
             {"max_features", s.rf.max_features}};
  j["aggregators"] = s.aggregators.to_string();
  j["weighted_f1"] = s.weighted_f1;
  const auto& p = s.probe;
  j["probe"] = {{"input_size", p.input_size},         {"heads", p.heads},
                {"width", p.width},                   {"decoder_channels", p.decoder_channels},
                {"n_max", p.n_max},                   {"sigma_init", p.sigma_init},
                {"gaussian_mask", p.gaussian_mask},   {"filterbank_grid", p.filterbank_grid},
                {"iterations", p.train.iterations},   {"learning_rate", p.train.learning_rate},
                {"dice_weight", p.train.dice_weight}, {"ce_weight", p.train.ce_weight},
                {"batch_size", p.train.batch_size},   {"val_every", p.train.val_every}};
  return j.dump(2) + "\n";
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const DatasetManifest m = load_manifest(spec.manifest);
  fs::create_directories(spec.out);
  ExperimentResult r;
  switch (spec.task) {
    case Task::pixel_rf: r.records = run_pixel_rf(spec, m); break;
    case Task::pixel_deap: r.records = run_pixel_deap(spec, m); break;
    case Task::object_rf: r.records = run_object_rf(spec, m); break;
    case Task::object_obap: r.records = run_object_obap(spec, m); break;
  }
  r.summary = aggregate_runs(r.records);
  write_results_csv(r.records, spec.out / "results.csv");
  write_text(spec.out / "summary.csv", format_summary_csv(r.summary));
  write_text(spec.out / "spec.json", spec_json(spec));
  return r;
}

double evaluate_predictions(const DatasetManifest& manifest, const fs::path& dir, bool objects, Split split,
                            bool weighted) {
  const std::size_t k = manifest.num_classes();
  ConfusionMatrix cm(k);
  const std::string what = "eval";
  for (const auto* r : split_records(manifest, split, !objects, objects, what)) {
    if (objects) {
      const fs::path p = dir / (r->name + ".csv");
      if (!fs::exists(p)) throw ValidationError(what + ": missing prediction '" + p.string() + "'");
      const auto truth = known_truth(load_objects(*r, k, what));
      cm += evaluate_objects(restrict_to(read_object_labels(p), truth), truth, k);
    } else {
      fs::path p = dir / (r->name + ".lbl");
      if (!fs::exists(p)) p = dir / (r->name + ".png");
      if (!fs::exists(p)) throw ValidationError(what + ": missing prediction for '" + r->name + "' in " + dir.string());
      cm += evaluate_pixels(read_label_image(p), read_label_image(*r->labels), k);
    }
  }
  return score(cm, weighted);
}

}  // namespace microprobe
