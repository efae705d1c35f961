#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "microprobe/error.hpp"
#include "microprobe/evaluation.hpp"
#include "microprobe/pipelines.hpp"
#include "microprobe/synth.hpp"

using namespace microprobe;

namespace {

struct ExperimentOptions {
  ExperimentSpec spec;
  std::string aggregators = "mean,area";
  std::string resize = "bilinear";
  bool no_timings = false;
  bool no_predictions = false;
  bool no_gaussian = false;
};

void add_experiment(CLI::App& app, Task task, ExperimentOptions& o) {
  auto* sub = app.add_subcommand(to_string(task), "Run the " + to_string(task) + " experiment");
  auto& s = o.spec;
  s.task = task;
  const bool probe = task == Task::pixel_deap || task == Task::object_obap;
  const bool objects = task == Task::object_rf || task == Task::object_obap;
  s.budgets = objects ? std::vector<std::string>{"25", "50", "100", "1000", "all"}
                      : std::vector<std::string>{"100", "1000", "10000", "100000"};
  if (probe) {
    s.folds = 5;
    s.repeats = 1;
  }

  sub->add_option("--manifest", s.manifest, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--model", s.model, "Feature key from the manifest, or 'filterbank'" +
                                           std::string(task == Task::object_rf ? " / 'regionprops'" : ""))
      ->capture_default_str();
  sub->add_option("--budgets", s.budgets, "Label budgets, ascending" + std::string(objects ? " ('all' last)" : ""))
      ->delimiter(',')
      ->capture_default_str();
  sub->add_option("--folds", s.folds, "Sampling folds")->capture_default_str();
  if (!probe) sub->add_option("--repeats", s.repeats, "Forest repeats per fold")->capture_default_str();
  sub->add_option("--seed", s.seed, "Base seed")->capture_default_str();
  sub->add_option("--out", s.out, "Output directory")->required();
  sub->add_option("--workers", s.workers, "Threads per forest (default: MICROPROBE_WORKERS or all cores)");
  sub->add_option("--jobs", s.jobs, "Experiment cells run concurrently")->capture_default_str();
  sub->add_flag("--no-timings", o.no_timings, "Write 0 for all times (byte-identical reruns)");
  sub->add_flag("--no-predictions", o.no_predictions, "Do not write prediction files");
  sub->add_flag("--weighted-f1", s.weighted_f1, "Report support-weighted instead of macro F1");

  if (!probe) {
    sub->add_option("--rf-size", s.rf_size, "Side the feature volumes are resized to")->capture_default_str();
    sub->add_option("--resize", o.resize, "Feature resize mode")
        ->check(CLI::IsMember({"bilinear", "nearest"}))
        ->capture_default_str();
    sub->add_option("--trees", s.rf.n_trees, "Trees per forest")->capture_default_str();
    sub->add_option("--max-depth", s.rf.max_depth, "Maximum tree depth (0 = unlimited)")->capture_default_str();
    sub->add_option("--min-samples-leaf", s.rf.min_samples_leaf, "Minimum samples per leaf")->capture_default_str();
    sub->add_option("--max-features", s.rf.max_features, "Features tried per split (0 = sqrt(dim))")
        ->capture_default_str();
  }
  if (task == Task::object_rf) {
    sub->add_option("--aggregators", o.aggregators, "Subset of mean,std,area")->capture_default_str();
  }
  if (probe) {
    auto& p = s.probe;
    if (task == Task::pixel_deap) {
      sub->add_option("--input-size", p.input_size, "Image side seen by the probe (query grid = side / 8)")
          ->capture_default_str();
      sub->add_option("--decoder", p.decoder_channels, "Decoder channels of the three upsampling stages")
          ->delimiter(',')
          ->expected(3)
          ->capture_default_str();
    } else {
      sub->add_option("--n-max", p.n_max, "Query slots per image")->capture_default_str();
    }
    sub->add_option("--iterations", p.train.iterations, "Training iterations")->capture_default_str();
    sub->add_option("--lr", p.train.learning_rate, "Adam learning rate")->capture_default_str();
    sub->add_option("--batch-size", p.train.batch_size, "Images per step")->capture_default_str();
    sub->add_option("--val-every", p.train.val_every, "Validation interval")->capture_default_str();
    sub->add_option("--heads", p.heads, "Attention heads")->capture_default_str();
    sub->add_option("--width", p.width, "Attention width")->capture_default_str();
    sub->add_option("--sigma-init", p.sigma_init, "Initial Gaussian mask sigma")->capture_default_str();
    sub->add_flag("--no-gaussian-mask", o.no_gaussian, "Plain cross-attention");
    sub->add_option("--filterbank-grid", p.filterbank_grid, "Grid side for filter-bank volumes")
        ->capture_default_str();
    if (task == Task::pixel_deap) {
      sub->add_option("--dice-weight", p.train.dice_weight, "Dice loss weight")->capture_default_str();
      sub->add_option("--ce-weight", p.train.ce_weight, "Cross-entropy weight")->capture_default_str();
    }
  }

  sub->callback([&o] {
    auto& s = o.spec;
    s.aggregators = ObjectFeatureSpec::parse(o.aggregators);
    s.resize = o.resize == "nearest" ? Interpolation::nearest : Interpolation::bilinear;
    s.timings = !o.no_timings;
    s.save_predictions = !o.no_predictions;
    s.probe.gaussian_mask = !o.no_gaussian;
    const auto r = run_experiment(s);
    std::cout << format_summary_csv(r.summary);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pixel and object classification on frozen feature volumes"};
  app.require_subcommand(1);
  app.fallthrough();
  spdlog::set_default_logger(spdlog::stderr_color_mt("microprobe"));
  spdlog::set_level(spdlog::level::warn);
  app.add_option_function<std::string>(
         "--log-level", [](const std::string& l) { spdlog::set_level(spdlog::level::from_str(l)); },
         "trace, debug, info, warn, error or off (default warn)")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->trigger_on_parse();

  SynthConfig synth;
  std::string synth_kind = "pixel";
  std::filesystem::path synth_out;
  auto* sy = app.add_subcommand("synth", "Generate a synthetic dataset");
  sy->add_option("--kind", synth_kind, "pixel or object")->check(CLI::IsMember({"pixel", "object"}))->capture_default_str();
  sy->add_option("--classes", synth.num_classes, "Number of classes")->capture_default_str();
  sy->add_option("--images", synth.n_images, "Number of images")->capture_default_str();
  sy->add_option("--seed", synth.seed, "Seed")->capture_default_str();
  sy->add_option("--noise", synth.noise, "Noise standard deviation")->capture_default_str();
  sy->add_option("--size", synth.size, "Image side (0 = 128 for pixel, 64 for object)")->capture_default_str();
  sy->add_option("--stride", synth.stride, "Image pixels per feature cell (0 = 8 for pixel, 2 for object)")->capture_default_str();
  sy->add_option("--channels", synth.channels, "Feature channels")->capture_default_str();
  sy->add_option("--out", synth_out, "Output directory")->required();
  sy->callback([&] {
    synth.kind = parse_synth_kind(synth_kind);
    const auto m = synth_generate(synth, synth_out);
    std::cout << "wrote " << m.records.size() << " images to " << (synth_out / "manifest.json").string() << "\n";
  });

  ExperimentOptions opts[4];
  add_experiment(app, Task::pixel_rf, opts[0]);
  add_experiment(app, Task::pixel_deap, opts[1]);
  add_experiment(app, Task::object_rf, opts[2]);
  add_experiment(app, Task::object_obap, opts[3]);

  std::filesystem::path eval_manifest, eval_dir;
  std::string eval_split = "test";
  bool eval_objects = false, eval_weighted = false;
  auto* ev = app.add_subcommand("eval", "Score stored predictions against a manifest split");
  ev->add_option("--manifest", eval_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--predictions", eval_dir, "Directory with <name>.lbl / .png or <name>.csv files")
      ->required()
      ->check(CLI::ExistingDirectory);
  ev->add_option("--split", eval_split, "train, val or test")->capture_default_str();
  ev->add_flag("--objects", eval_objects, "Predictions are per-object CSVs");
  ev->add_flag("--weighted-f1", eval_weighted, "Support-weighted F1");
  ev->callback([&] {
    const auto m = load_manifest(eval_manifest);
    const double f1 = evaluate_predictions(m, eval_dir, eval_objects, parse_split(eval_split), eval_weighted);
    std::printf("%.6f\n", f1);
  });

  std::vector<std::filesystem::path> report_in;
  std::filesystem::path report_out;
  auto* rp = app.add_subcommand("report", "Aggregate results CSVs into mean / std per method, model and budget");
  rp->add_option("--results", report_in, "results.csv files")->required()->check(CLI::ExistingFile);
  rp->add_option("--out", report_out, "Summary CSV (default: stdout)");
  rp->callback([&] {
    std::vector<RunRecord> all;
    for (const auto& p : report_in) {
      auto r = read_results_csv(p);
      all.insert(all.end(), r.begin(), r.end());
    }
    const std::string text = format_summary_csv(aggregate_runs(all));
    if (report_out.empty()) {
      std::cout << text;
    } else {
      std::ofstream out(report_out, std::ios::binary);
      if (!out) throw FormatError("cannot open '" + report_out.string() + "' for writing");
      out << text;
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
