#include "microprobe/pipelines.hpp"

#include <gtest/gtest.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "microprobe/error.hpp"
#include "microprobe/rng.hpp"
#include "microprobe/synth.hpp"

using namespace microprobe;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("microprobe_pipelines_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Relative path -> bytes for every regular file under `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  return out;
}

SynthConfig small_pixel(std::uint64_t seed, double noise, std::size_t k = 2) {
  SynthConfig c;
  c.kind = SynthKind::pixel;
  c.num_classes = k;
  c.n_images = 10;
  c.seed = seed;
  c.noise = noise;
  c.size = 64;
  c.stride = 8;
  c.channels = 6;
  return c;
}

ExperimentSpec rf_spec(Task task, const fs::path& manifest, const fs::path& out) {
  ExperimentSpec s;
  s.task = task;
  s.manifest = manifest;
  s.model = kSynthModel;
  s.budgets = {"1000"};
  s.folds = 1;
  s.repeats = 1;
  s.out = out;
  s.workers = 1;
  s.rf.n_trees = 20;
  s.rf_size = 64;
  s.timings = false;
  return s;
}

}  // namespace

TEST(Synth, SameSeedGivesIdenticalFiles) {
  TempDir a, b, c;
  synth_generate(small_pixel(3, 0.5), a.path());
  synth_generate(small_pixel(3, 0.5), b.path());
  synth_generate(small_pixel(4, 0.5), c.path());
  const auto ta = tree(a.path());
  EXPECT_EQ(ta.size(), 10u * 3 + 1);
  EXPECT_EQ(ta, tree(b.path()));
  EXPECT_NE(ta, tree(c.path()));
}

TEST(Synth, PixelDatasetShapesAndSplits) {
  TempDir d;
  const auto m = synth_generate(small_pixel(1, 0.5, 3), d.path());
  EXPECT_EQ(m.num_classes(), 3u);
  EXPECT_EQ(m.in_split(Split::train).size(), 6u);
  EXPECT_EQ(m.in_split(Split::val).size(), 2u);
  EXPECT_EQ(m.in_split(Split::test).size(), 2u);
  const auto loaded = load_manifest(d.path() / "manifest.json");
  const auto v = read_feature_volume(loaded.feature_path(loaded.records[0], kSynthModel));
  EXPECT_EQ(v.height, 8u);
  EXPECT_EQ(v.channels, 6u);
  const auto l = read_label_image(*loaded.records[0].labels);
  EXPECT_EQ(l.height, 64u);
  // Region borders follow feature cells: every 8x8 block is constant.
  for (std::uint32_t r = 0; r < 64; ++r)
    for (std::uint32_t c = 0; c < 64; ++c) ASSERT_EQ(l.at(r, c), l.at(r / 8 * 8, c / 8 * 8));
}

TEST(Synth, ObjectLabelsAgreeWithMasks) {
  TempDir d;
  SynthConfig c;
  c.kind = SynthKind::object;
  c.num_classes = 4;
  c.n_images = 6;
  c.seed = 2;
  synth_generate(c, d.path());
  const auto m = load_manifest(d.path() / "manifest.json");
  for (const auto& r : m.records) {
    const auto mask = read_instance_mask(*r.instances);
    const auto csv = read_object_labels(*r.object_labels);
    EXPECT_GE(csv.size(), 1u);
    EXPECT_EQ(majority_object_labels(mask, read_label_image(*r.labels)), csv);
    EXPECT_EQ(read_feature_volume(m.feature_path(r, kSynthModel)).height, 32u);
  }
}

TEST(Synth, RejectsBadConfig) {
  TempDir d;
  auto c = small_pixel(0, 0.5);
  c.num_classes = 1;
  EXPECT_THROW(synth_generate(c, d.path()), ValidationError);
  c = small_pixel(0, 0.5);
  c.size = 60;
  EXPECT_THROW(synth_generate(c, d.path()), ValidationError);
}

TEST(ObjectFeatures, AggregatorDimensions) {
  InstanceMask mask(4, 4);
  mask.at(0, 0) = mask.at(0, 1) = 5;
  mask.at(3, 3) = 2;
  FeatureVolume v(4, 4, 3);
  for (std::size_t i = 0; i < v.values.size(); ++i) v.values[i] = float(i % 7);
  const std::vector<std::uint32_t> ids{2, 5};
  EXPECT_EQ(aggregate_object_features(v, mask, ids, ObjectFeatureSpec::parse("mean"))[0].size(), 3u);
  EXPECT_EQ(aggregate_object_features(v, mask, ids, ObjectFeatureSpec::parse("mean,area"))[0].size(), 4u);
  EXPECT_EQ(aggregate_object_features(v, mask, ids, ObjectFeatureSpec::parse("mean,std,area"))[0].size(), 7u);
  EXPECT_EQ(ObjectFeatureSpec{}.to_string(), "mean,area");
  EXPECT_THROW(ObjectFeatureSpec::parse("median"), ValidationError);
  EXPECT_THROW(ObjectFeatureSpec::parse(""), ValidationError);
}

TEST(ObjectFeatures, MatchesBruteForceStatistics) {
  Rng rng(7);
  InstanceMask mask(12, 16);
  for (auto& x : mask.data) x = static_cast<std::uint32_t>(rng.uniform_index(4));
  // Volume at half resolution: mask pixel (r, c) reads cell (r / 2, c / 2).
  FeatureVolume v(6, 8, 2);
  for (auto& x : v.values) x = static_cast<float>(rng.normal());
  const std::vector<std::uint32_t> ids{1, 2, 3};
  const auto rows = aggregate_object_features(v, mask, ids, ObjectFeatureSpec::parse("mean,std,area"));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::vector<std::vector<double>> vals(2);
    for (std::uint32_t r = 0; r < 12; ++r)
      for (std::uint32_t c = 0; c < 16; ++c)
        if (mask.at(r, c) == ids[i])
          for (std::size_t ch = 0; ch < 2; ++ch) vals[ch].push_back(v.at(r / 2, c / 2, ch));
    for (std::size_t ch = 0; ch < 2; ++ch) {
      double mean = 0, var = 0;
      for (double x : vals[ch]) mean += x;
      mean /= double(vals[ch].size());
      for (double x : vals[ch]) var += (x - mean) * (x - mean);
      EXPECT_NEAR(rows[i][ch], mean, 1e-5);
      EXPECT_NEAR(rows[i][2 + ch], std::sqrt(var / double(vals[ch].size())), 1e-5);
    }
    EXPECT_EQ(rows[i][4], float(vals[0].size()));
  }
  const std::vector<std::uint32_t> missing{9};
  EXPECT_THROW(aggregate_object_features(v, mask, missing, ObjectFeatureSpec{}), ValidationError);
}

TEST(ObjectFeatures, MajorityLabels) {
  InstanceMask mask(1, 6);
  mask.data = {1, 1, 1, 2, 2, 3};
  LabelImage labels(1, 6);
  labels.data = {2, 2, 1, 3, 1, 0};
  const auto m = majority_object_labels(mask, labels);
  EXPECT_EQ(m.at(1), 2);
  EXPECT_EQ(m.at(2), 1);  // tie goes to the lower class
  EXPECT_EQ(m.at(3), 0);  // no labeled pixel
  EXPECT_THROW(majority_object_labels(mask, LabelImage(2, 3)), ShapeError);
}

TEST(Spec, Validation) {
  ExperimentSpec s;
  s.budgets = {"100", "1000"};
  EXPECT_NO_THROW(s.validate());
  s.budgets = {};
  EXPECT_THROW(s.validate(), ValidationError);
  s.budgets = {"1000", "100"};
  EXPECT_THROW(s.validate(), ValidationError);
  s.budgets = {"100", "all"};
  EXPECT_THROW(s.validate(), ValidationError);  // pixel task
  s.task = Task::object_rf;
  EXPECT_NO_THROW(s.validate());
  s.budgets = {"all", "100"};
  EXPECT_THROW(s.validate(), ValidationError);
  s.budgets = {"0"};
  EXPECT_THROW(s.validate(), ValidationError);
  s.budgets = {"100"};
  s.folds = 0;
  EXPECT_THROW(s.validate(), ValidationError);
  s.folds = 1;
  s.task = Task::pixel_rf;
  s.model = kRegionPropsModel;
  EXPECT_THROW(s.validate(), ValidationError);
  EXPECT_EQ(parse_task("object-obap"), Task::object_obap);
  EXPECT_THROW(parse_task("pixel"), ValidationError);
}

TEST(PixelRf, ZeroNoiseIsPerfectWithNearestResize) {
  TempDir d, o;
  synth_generate(small_pixel(5, 0.0), d.path());
  auto s = rf_spec(Task::pixel_rf, d.path() / "manifest.json", o.path());
  s.resize = Interpolation::nearest;
  EXPECT_EQ(run_experiment(s).records.at(0).f1, 1.0);
  // Bilinear resizing blends features across region borders; any error must
  // sit within one feature cell (8 pixels) of a border.
  s.resize = Interpolation::bilinear;
  s.rf_size = 256;
  run_experiment(s);
  const auto m = load_manifest(d.path() / "manifest.json");
  for (const auto* r : m.in_split(Split::test)) {
    const auto truth = read_label_image(*r->labels);
    const auto pred = read_label_image(o.path() / "predictions" / "1000_f0_r0" / (r->name + ".lbl"));
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (pred.at(y, x) == truth.at(y, x)) continue;
        bool near_border = false;
        for (int dy = -8; dy <= 8; ++dy)
          for (int dx = -8; dx <= 8; ++dx) {
            const int yy = std::clamp(y + dy, 0, 63), xx = std::clamp(x + dx, 0, 63);
            near_border |= truth.at(yy, xx) != truth.at(y, x);
          }
        ASSERT_TRUE(near_border) << r->name << " " << y << "," << x;
      }
  }
}

TEST(PixelRf, BudgetGridBookkeeping) {
  TempDir d, o;
  synth_generate(small_pixel(6, 0.5), d.path());
  auto s = rf_spec(Task::pixel_rf, d.path() / "manifest.json", o.path());
  s.budgets = {"100", "1000"};
  s.folds = 2;
  s.repeats = 3;
  const auto r = run_experiment(s);
  ASSERT_EQ(r.records.size(), 2u * 2 * 3);
  EXPECT_EQ(r.records[0].budget, "100");
  EXPECT_EQ(r.records[11].budget, "1000");
  EXPECT_EQ(r.records[11].fold, 1u);
  EXPECT_EQ(r.records[11].repeat, 2u);
  ASSERT_EQ(r.summary.size(), 2u);
  EXPECT_EQ(r.summary[0].runs, 6u);
  EXPECT_EQ(read_results_csv(o.path() / "results.csv").size(), 12u);
  EXPECT_TRUE(fs::exists(o.path() / "summary.csv"));
  EXPECT_TRUE(fs::exists(o.path() / "spec.json"));
  EXPECT_TRUE(fs::exists(o.path() / "predictions" / "1000_f1_r2" / "img0009.lbl"));
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.train_s, 0.0);
    EXPECT_GE(rec.f1, 0.0);
    EXPECT_LE(rec.f1, 1.0);
  }
  // Stored predictions score the same as the run.
  const auto m = load_manifest(d.path() / "manifest.json");
  EXPECT_DOUBLE_EQ(evaluate_predictions(m, o.path() / "predictions" / "1000_f1_r2", false), r.records[11].f1);
}

TEST(PixelRf, FilterBankOnTextures) {
  TempDir d, o;
  synth_generate(small_pixel(8, 0.5), d.path());
  auto s = rf_spec(Task::pixel_rf, d.path() / "manifest.json", o.path());
  s.model = kFilterBankModel;
  s.save_predictions = false;
  EXPECT_GE(run_experiment(s).records.at(0).f1, 0.9);
}

TEST(PixelRf, NoiseSweepIsNonIncreasing) {
  std::vector<double> mean_f1;
  for (double noise : {0.0, 0.5, 1.0}) {
    double sum = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      TempDir d, o;
      synth_generate(small_pixel(10 + seed, noise, 3), d.path());
      auto s = rf_spec(Task::pixel_rf, d.path() / "manifest.json", o.path());
      s.save_predictions = false;
      sum += run_experiment(s).records.at(0).f1;
    }
    mean_f1.push_back(sum / 3);
  }
  EXPECT_GE(mean_f1[0], mean_f1[1]);
  EXPECT_GE(mean_f1[1], mean_f1[2]);
  EXPECT_GT(mean_f1[0], mean_f1[2] + 0.1);
}

TEST(PixelRf, TestLabelsDoNotInfluencePredictions) {
  TempDir d, o1, o2;
  const auto m = synth_generate(small_pixel(9, 0.5), d.path());
  auto s = rf_spec(Task::pixel_rf, d.path() / "manifest.json", o1.path());
  const double f1 = run_experiment(s).records[0].f1;
  for (const auto* r : m.in_split(Split::test)) {
    LabelImage l = read_label_image(*r->labels);
    for (auto& x : l.data) x = static_cast<std::uint16_t>(3 - x);
    write_label_image(l, *r->labels);
  }
  s.out = o2.path();
  EXPECT_NE(run_experiment(s).records[0].f1, f1);
  EXPECT_EQ(tree(o1.path() / "predictions"), tree(o2.path() / "predictions"));
}

TEST(PixelRf, MissingLabelsIsAnError) {
  TempDir d, o;
  auto m = synth_generate(small_pixel(1, 0.5), d.path());
  m.records[0].labels.reset();
  write_manifest(m, d.path() / "manifest.json");
  EXPECT_THROW(run_experiment(rf_spec(Task::pixel_rf, d.path() / "manifest.json", o.path())), ValidationError);
}

TEST(ObjectRf, AggregatorsAndRegionProps) {
  TempDir d;
  SynthConfig c;
  c.kind = SynthKind::object;
  c.num_classes = 3;
  c.n_images = 12;
  c.noise = 0.3;
  synth_generate(c, d.path());
  for (const char* agg : {"mean", "mean,area", "mean,std,area"}) {
    TempDir o;
    auto s = rf_spec(Task::object_rf, d.path() / "manifest.json", o.path());
    s.budgets = {"25", "all"};
    s.aggregators = ObjectFeatureSpec::parse(agg);
    const auto r = run_experiment(s);
    ASSERT_EQ(r.records.size(), 2u);
    EXPECT_GE(r.records[1].f1, 0.9) << agg;
    const auto m = load_manifest(d.path() / "manifest.json");
    EXPECT_DOUBLE_EQ(evaluate_predictions(m, o.path() / "predictions" / "all_f0_r0", true), r.records[1].f1);
  }
  TempDir o;
  auto s = rf_spec(Task::object_rf, d.path() / "manifest.json", o.path());
  s.model = kRegionPropsModel;
  EXPECT_GE(run_experiment(s).records.at(0).f1, 0.9);
}

TEST(ObjectRf, MissingInstancesIsAnError) {
  TempDir d, o;
  auto m = synth_generate(small_pixel(1, 0.5), d.path());
  EXPECT_THROW(run_experiment(rf_spec(Task::object_rf, d.path() / "manifest.json", o.path())), ValidationError);
}

TEST(Probes, SmallRunsAreReproducible) {
  TempDir d;
  auto c = small_pixel(2, 0.5);
  c.n_images = 8;
  synth_generate(c, d.path());
  ExperimentSpec s = rf_spec(Task::pixel_deap, d.path() / "manifest.json", "");
  s.budgets = {"20"};
  s.probe.input_size = 64;
  s.probe.width = 8;
  s.probe.heads = 2;
  s.probe.decoder_channels = {4, 4, 4};
  s.probe.sigma_init = 1;
  s.probe.train.iterations = 6;
  s.probe.train.val_every = 3;
  s.probe.train.learning_rate = 1e-2;
  TempDir o1, o2;
  s.out = o1.path();
  const auto r = run_experiment(s);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].repeat, 0u);
  s.out = o2.path();
  run_experiment(s);
  EXPECT_EQ(tree(o1.path()), tree(o2.path()));
}
