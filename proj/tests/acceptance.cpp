// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <spdlog/spdlog.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include "microprobe/classical_features.hpp"
#include "microprobe/evaluation.hpp"
#include "microprobe/optim.hpp"
#include "microprobe/parallel.hpp"
#include "microprobe/pipelines.hpp"
#include "microprobe/probes.hpp"
#include "microprobe/random_forest.hpp"
#include "microprobe/rng.hpp"
#include "microprobe/sampling.hpp"
#include "microprobe/synth.hpp"

using namespace microprobe;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(const char* name, const std::function<Outcome()>& check) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  failures += !o.pass;
  std::printf("%s %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), seconds_since(t0));
  std::fflush(stdout);
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("microprobe_acceptance_" + std::to_string(::getpid()) + "_" + tag);
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).generic_string()] = ss.str();
  }
  return out;
}

Tensor<double> random_features(std::size_t n, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * c);
  for (auto& x : v) x = rng.normal();
  return Tensor<double>::from({n, c}, v);
}

// ---------------------------------------------------------------------------

Outcome gaussian_mask() {
  Rng rng(2024);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double d = rng.uniform(0, 30);
    const double sigma = std::exp(rng.uniform(std::log(0.1), std::log(100.0)));
    const double want = 1.0 / (sigma * std::sqrt(2 * std::numbers::pi)) * std::exp(-(d * d) / (2 * sigma));
    worst = std::max(worst, std::abs(gaussian_mask_value(d, sigma) - want));
    // Same value through the differentiable mask used inside the probes.
    const GridPoint q{0, 0}, f{0, d};
    const auto m = gaussian_attention_mask<double>(std::span(&q, 1), std::span(&f, 1),
                                                   Tensor<double>::full({1}, sigma));
    worst = std::max(worst, std::abs(m[0] - want));
  }
  return {worst <= 1e-12, fmt("max |error| %.3g over 1000 pairs (limit 1e-12)", worst)};
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  DeapConfig dc;
  dc.input_size = 16;
  dc.feat_h = dc.feat_w = 8;
  dc.channels = 4;
  dc.num_classes = 3;
  dc.heads = 2;
  dc.width = 8;
  dc.decoder_channels = {4, 4, 4};
  dc.sigma_init = 2.0;
  dc.seed = 11;
  DeapProbe<double> deap(dc);
  const auto f = random_features(64, 4, 1);
  const std::vector<std::vector<std::size_t>> px{{0, 19, 44, 97, 131, 202, 255}};
  const std::vector<std::vector<std::uint16_t>> lb{{1, 2, 3, 3, 2, 1, 2}};
  auto deap_loss_fn = [&] { return deap_loss<double>({deap.forward(f)}, px, lb, 0.5, 0.5); };
  const double deap_err = ad::grad_check(deap_loss_fn, deap.parameters(), {.step = 1e-6, .coords_per_param = 0, .seed = 3});

  ObapConfig oc;
  oc.feat_h = oc.feat_w = 8;
  oc.channels = 4;
  oc.num_classes = 3;
  oc.heads = 2;
  oc.width = 8;
  oc.n_max = 8;
  oc.sigma_init = 2.0;
  oc.seed = 12;
  ObapProbe<double> obap(oc);
  const std::vector<GridPoint> centroids{{0.7, 2.2}, {5.5, 6.1}, {3.0, 3.9}};
  const std::vector<std::size_t> rows{0, 1, 2};
  const std::vector<std::uint16_t> labels{2, 3, 1};
  auto enc = obap.query_encoding(centroids);
  const auto queries = Tensor<double>::from(enc.shape(), std::vector<double>(enc.data().begin(), enc.data().end()), true);
  auto obap_loss_fn = [&] { return cross_entropy(obap.forward_with_queries(f, queries, centroids), rows, labels); };
  const double obap_err = ad::grad_check(obap_loss_fn, obap.parameters(), {.step = 1e-6, .coords_per_param = 0, .seed = 4});

  obap_loss_fn().backward();
  const auto g = queries.grad();
  const std::size_t dim = queries.dim(1);
  double padded = 0, valid = 0;
  for (std::size_t i = 0; i < g.size(); ++i) (i / dim < centroids.size() ? valid : padded) += std::abs(g[i]);
  const double elapsed = seconds_since(t0);
  const bool ok = deap_err < 1e-4 && obap_err < 1e-4 && padded == 0.0 && valid > 0 && elapsed < 60;
  return {ok, fmt("DeAP max rel err %.2e, ObAP %.2e (limit 1e-4); padded-slot |grad| sum %g; %.1f s (limit 60 s)",
                  deap_err, obap_err, padded, elapsed)};
}

Outcome metric_oracle() {
  Rng rng(7);
  std::size_t mismatches = 0;
  double worst_textbook = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t k = 2 + rng.uniform_index(7);
    ConfusionMatrix cm(k);
    // Observation list first; the matrix is built from it and the oracle
    // counts straight from the list.
    std::vector<std::pair<std::size_t, std::size_t>> obs;
    const std::size_t n = 1 + rng.uniform_index(60);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t truth = 1 + rng.uniform_index(k);
      const std::size_t pred = rng.uniform() < 0.5 ? truth : 1 + rng.uniform_index(k);
      obs.emplace_back(truth, pred);
      cm.add(truth, pred);
    }
    double sum = 0, textbook = 0;
    std::size_t present = 0;
    for (std::size_t c = 1; c <= k; ++c) {
      std::uint64_t tp = 0, fp = 0, fn = 0;
      for (const auto& [truth, pred] : obs) {
        tp += truth == c && pred == c;
        fp += truth != c && pred == c;
        fn += truth == c && pred != c;
      }
      if (tp + fp + fn == 0) continue;
      ++present;
      sum += 2.0 * double(tp) / (2.0 * double(tp) + double(fp) + double(fn));
      const double p = tp + fp ? double(tp) / double(tp + fp) : 0, r = tp + fn ? double(tp) / double(tp + fn) : 0;
      textbook += p + r > 0 ? 2 * p * r / (p + r) : 0;
    }
    const double got = macro_f1(cm);
    mismatches += got != sum / double(present);
    worst_textbook = std::max(worst_textbook, std::abs(got - textbook / double(present)));
  }
  ConfusionMatrix one(2);
  one.at(1, 1) = 1;  // TP = 1 for class 1
  one.at(2, 1) = 1;  // FP = 1
  one.at(1, 2) = 1;  // FN = 1
  const double f1_class1 = class_f1(one)[0];
  const bool ok = mismatches == 0 && worst_textbook < 1e-12 && f1_class1 == 0.5;
  return {ok, fmt("%zu/10000 mismatches; max deviation from 2PR/(P+R) %.2g; TP=FP=FN=1 gives %.6g", mismatches,
                  worst_textbook, f1_class1)};
}

Outcome sampling_statistics() {
  std::vector<std::uint16_t> pool(100, 1);
  std::fill(pool.begin() + 90, pool.end(), 2);
  double total_b = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto picked = sample_inverse_frequency(pool, 10, seed);
    if (picked.size() != 10) return {false, "sampler returned a wrong number of items"};
    for (auto i : picked) total_b += pool[i] == 2;
  }
  const double mean_b = total_b / 10000.0;

  // DeAP rule: fewer pixels than images -> that many images, one pixel each.
  std::vector<LabelImage> imgs;
  for (int i = 0; i < 7; ++i) {
    LabelImage l(5, 6);
    for (std::size_t p = 0; p < l.size(); ++p) l.data[p] = static_cast<std::uint16_t>(p % 3 == 0 ? 0 : 1 + (p + i) % 3);
    imgs.push_back(l);
  }
  std::size_t cases = 0, bad = 0;
  for (std::size_t n = 1; n < imgs.size(); ++n)
    for (std::uint64_t seed = 0; seed < 200; ++seed, ++cases) {
      const auto out = sample_pixels_deap(imgs, {n, seed});
      std::size_t used = 0;
      bool fine = out.size() == imgs.size();
      for (std::size_t i = 0; fine && i < out.size(); ++i) {
        fine = out[i].size() <= 1;
        used += out[i].size();
        for (auto p : out[i]) fine = fine && imgs[i].data[p] != 0;
      }
      bad += !(fine && used == n);
    }
  const bool ok = mean_b >= 4.0 && mean_b <= 6.0 && bad == 0;
  return {ok, fmt("mean B-count %.3f (target [4, 6]); DeAP n<images rule violated in %zu/%zu enumerated cases", mean_b,
                  bad, cases)};
}

LabeledSample blobs(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  LabeledSample s;
  std::vector<float> x(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < dim; ++j) x[j] = static_cast<float>(rng.normal() + (c && j < 2 ? 3.0 : 0.0));
    s.push_back(x, static_cast<std::uint16_t>(c + 1));
  }
  return s;
}

Outcome random_forest() {
  const auto train = blobs(400, 8, 1), test = blobs(2000, 8, 2);
  RFConfig cfg;
  cfg.seed = 5;
  const auto model = rf_fit(train, cfg);
  const auto pred = rf_predict(model, test.features);
  ConfusionMatrix cm(2);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(test.labels[i], pred[i]);
  const double f1 = macro_f1(cm);

  const auto big = blobs(100000, 64, 3);
  const auto t0 = Clock::now();
  const auto big_model = rf_fit(big, cfg);
  const double fit_s = seconds_since(t0);
  const bool ok = f1 >= 0.95 && fit_s < 60 && big_model.trees.size() == cfg.n_trees;
  return {ok, fmt("two-blob test macro F1 %.4f (>= 0.95); 1e5 x 64 fit %.1f s with %zu worker(s) (< 60 s)", f1, fit_s,
                  default_workers())};
}

Outcome label_efficiency() {
  TempDir d("efficiency");
  SynthConfig sc;
  sc.kind = SynthKind::pixel;
  sc.num_classes = 3;
  sc.n_images = 40;
  sc.noise = 0.5;
  sc.size = 128;
  sc.stride = 8;
  synth_generate(sc, d / "data");

  const auto t0 = Clock::now();
  ExperimentSpec rf;
  rf.task = Task::pixel_rf;
  rf.manifest = d / "data" / "manifest.json";
  rf.model = kSynthModel;
  rf.budgets = {"10000"};
  rf.folds = 1;
  rf.repeats = 1;
  rf.out = d / "rf";
  rf.save_predictions = false;
  const double rf_f1 = run_experiment(rf).records.at(0).f1;

  ExperimentSpec deap = rf;
  deap.task = Task::pixel_deap;
  deap.budgets = {"100"};
  deap.out = d / "deap";
  deap.probe.input_size = 128;
  deap.probe.width = 32;
  deap.probe.heads = 2;
  deap.probe.decoder_channels = {16, 8, 8};
  deap.probe.sigma_init = 0.5;
  deap.probe.train.iterations = 400;
  deap.probe.train.learning_rate = 3e-3;
  deap.probe.train.val_every = 100;
  const double deap_f1 = run_experiment(deap).records.at(0).f1;
  const double total = seconds_since(t0);
  const bool ok = deap_f1 >= rf_f1 && total < 600;
  return {ok, fmt("DeAP@100 F1 %.4f (400 iterations) vs RF@10000 F1 %.4f; %.0f s total (< 600 s)", deap_f1, rf_f1,
                  total)};
}

Outcome obap_synthetic() {
  TempDir d("obap");
  SynthConfig sc;
  sc.kind = SynthKind::object;
  sc.num_classes = 4;
  sc.n_images = 50;
  sc.noise = 0.3;
  synth_generate(sc, d / "data");

  std::string detail;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ExperimentSpec s;
    s.task = Task::object_obap;
    s.manifest = d / "data" / "manifest.json";
    s.model = kSynthModel;
    s.budgets = {"25", "100", "all"};
    s.folds = 1;
    s.repeats = 1;
    s.seed = seed;
    s.out = d / ("run" + std::to_string(seed));
    s.save_predictions = false;
    s.probe.width = 32;
    s.probe.heads = 2;
    s.probe.n_max = 32;
    s.probe.sigma_init = 1;
    s.probe.train.iterations = 500;
    s.probe.train.learning_rate = 3e-3;
    s.probe.train.val_every = 50;
    std::map<std::string, double> f1;
    for (const auto& r : run_experiment(s).records) f1[r.budget] = r.f1;
    ok = ok && f1.at("100") >= 0.95 && f1.at("all") >= f1.at("25");
    detail += fmt("%sseed %llu: 25=%.4f 100=%.4f all=%.4f", seed ? "; " : "", (unsigned long long)seed, f1.at("25"),
                  f1.at("100"), f1.at("all"));
  }
  return {ok, detail + " (need 100 >= 0.95, all >= 25)"};
}

Outcome aggregation_plumbing() {
  TempDir d("aggregation");
  SynthConfig sc;
  sc.kind = SynthKind::object;
  sc.num_classes = 3;
  sc.n_images = 12;
  sc.channels = 8;
  const auto m = synth_generate(sc, d / "data");
  const auto volume = read_feature_volume(m.records[0].features.at(kSynthModel));
  const auto mask = read_instance_mask(*m.records[0].instances);
  std::vector<std::uint32_t> ids;
  for (const auto& c : object_centroids(mask)) ids.push_back(c.id);
  const std::size_t C = volume.channels;

  std::string detail = fmt("C=%zu:", C);
  bool ok = !ids.empty();
  const std::pair<const char*, std::size_t> configs[] = {{"mean", C}, {"mean,area", C + 1}, {"mean,std,area", 2 * C + 1}};
  for (const auto& [text, want] : configs) {
    const auto spec = ObjectFeatureSpec::parse(text);
    const auto rows = aggregate_object_features(volume, mask, ids, spec);
    const bool dims = spec.dim(C) == want && std::all_of(rows.begin(), rows.end(), [&](const auto& r) {
      return r.size() == want;
    });
    ExperimentSpec s;
    s.task = Task::object_rf;
    s.manifest = d / "data" / "manifest.json";
    s.model = kSynthModel;
    s.budgets = {"all"};
    s.folds = 1;
    s.repeats = 1;
    s.out = d / text;
    s.aggregators = spec;
    s.rf.n_trees = 20;
    s.rf_size = 32;
    const double f1 = run_experiment(s).records.at(0).f1;
    ok = ok && dims && std::isfinite(f1);
    detail += fmt(" {%s} dim %zu (want %zu) F1 %.3f;", text, rows.empty() ? 0 : rows[0].size(), want, f1);
  }
  return {ok, detail};
}

Outcome filter_bank() {
  const std::uint32_t h = 40, w = 37;
  Rng rng(17);
  Image img(h, w);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  FilterBankConfig cfg;
  const auto vol = pixel_filter_bank(img, cfg);
  const auto names = cfg.channel_names();

  auto mirror = [](int i, int n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - i - 1 : i); };
  double worst = 0;
  for (double s : cfg.scales) {
    const int rad = static_cast<int>(std::ceil(3 * s));
    std::vector<double> k2((2 * rad + 1) * (2 * rad + 1));
    double total = 0;
    for (int i = -rad; i <= rad; ++i)
      for (int j = -rad; j <= rad; ++j) total += k2[(i + rad) * (2 * rad + 1) + j + rad] = std::exp(-(i * i + j * j) / (2 * s * s));
    const std::size_t ch = std::find(names.begin(), names.end(), fmt("gaussian@%g", s)) - names.begin();
    if (ch == names.size()) return {false, fmt("no gaussian channel for scale %g", s)};
    for (int r = 0; r < int(h); ++r)
      for (int c = 0; c < int(w); ++c) {
        double acc = 0;
        for (int i = -rad; i <= rad; ++i)
          for (int j = -rad; j <= rad; ++j)
            acc += k2[(i + rad) * (2 * rad + 1) + j + rad] / total * img.at(mirror(r + i, h), mirror(c + j, w));
        worst = std::max(worst, std::abs(vol.at(r, c, ch) - acc));
      }
  }

  const auto flat = pixel_filter_bank(Image(24, 21, 57.0f), cfg);
  double residue = 0;
  std::size_t checked = 0;
  for (std::size_t ch = 0; ch < names.size(); ++ch) {
    if (names[ch].rfind("gaussian@", 0) == 0) continue;
    ++checked;
    for (std::size_t p = 0; p < flat.pixels(); ++p) residue = std::max(residue, double(std::abs(flat.values[p * flat.channels + ch])));
  }
  const bool lap_and_grad = std::any_of(names.begin(), names.end(), [](const auto& n) { return n.rfind("laplacian_of_gaussian@", 0) == 0; }) &&
                            std::any_of(names.begin(), names.end(), [](const auto& n) { return n.rfind("gradient_magnitude@", 0) == 0; });
  const bool scales = FilterBankConfig{}.scales == std::vector<double>{0.5, 1.0, 2.0, 4.0};
  const bool ok = worst <= 1e-6 && residue <= 1e-9 && lap_and_grad && scales;
  return {ok, fmt("Gaussian vs direct 2D convolution max |error| %.2e (limit 1e-6); max |response| of %zu derivative "
                  "channels on a constant image %.1e; default scales %s",
                  worst, checked, residue, scales ? "{0.5,1,2,4}" : "WRONG")};
}

Outcome determinism() {
  TempDir d("determinism");
  SynthConfig pc;
  pc.num_classes = 3;
  pc.n_images = 10;
  pc.size = 64;
  pc.stride = 8;
  pc.channels = 6;
  synth_generate(pc, d / "pixel");
  SynthConfig oc;
  oc.kind = SynthKind::object;
  oc.num_classes = 3;
  oc.n_images = 10;
  oc.size = 48;
  oc.channels = 6;
  synth_generate(oc, d / "object");

  std::string detail;
  bool ok = true;
  for (Task task : {Task::pixel_rf, Task::pixel_deap, Task::object_rf, Task::object_obap}) {
    const bool objects = task == Task::object_rf || task == Task::object_obap;
    ExperimentSpec s;
    s.task = task;
    s.manifest = d / (objects ? "object" : "pixel") / "manifest.json";
    s.model = kSynthModel;
    s.budgets = objects ? std::vector<std::string>{"10", "all"} : std::vector<std::string>{"50", "500"};
    s.folds = 2;
    s.repeats = 2;
    s.seed = 99;
    s.timings = false;
    s.rf.n_trees = 15;
    s.rf_size = 32;
    s.probe.input_size = 64;
    s.probe.width = 8;
    s.probe.heads = 2;
    s.probe.decoder_channels = {4, 4, 4};
    s.probe.n_max = 16;
    s.probe.sigma_init = 1;
    s.probe.train.iterations = 8;
    s.probe.train.val_every = 4;
    s.probe.train.learning_rate = 1e-2;
    const std::string tag = to_string(task);
    s.out = d / (tag + "_a");
    run_experiment(s);
    s.out = d / (tag + "_b");
    run_experiment(s);
    const auto a = tree(d / (tag + "_a")), b = tree(d / (tag + "_b"));
    std::size_t rasters = 0, csvs = 0;
    for (const auto& [name, _] : a) {
      rasters += name.ends_with(".lbl");
      csvs += name.ends_with(".csv");
    }
    const bool same = a == b && csvs >= 2 && (objects || rasters > 0);
    ok = ok && same;
    detail += fmt("%s%s %s (%zu files)", detail.empty() ? "" : "; ", tag.c_str(), same ? "identical" : "DIFFERENT",
                  a.size());
  }
  return {ok, detail};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  run("gaussian-mask", gaussian_mask);
  run("gradient-checks", gradient_checks);
  run("metric-oracle", metric_oracle);
  run("sampling-statistics", sampling_statistics);
  run("random-forest", random_forest);
  run("label-efficiency", label_efficiency);
  run("obap-synthetic", obap_synthetic);
  run("aggregation-plumbing", aggregation_plumbing);
  run("filter-bank", filter_bank);
  run("determinism", determinism);
  std::printf("%d failure(s)\n", failures);
  return failures ? 1 : 0;
}
