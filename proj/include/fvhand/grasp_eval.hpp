#pragma once

// Synthetic grasp dataset and the run-wise cross-validation harness.

#include "fvhand/datapath.hpp"
#include "fvhand/hand_model.hpp"
#include "fvhand/scene.hpp"
#include "fvhand/segnet.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fvhand::grasp {

struct SubImage {
  datapath::Frame image;           // 88x72 RGB888, camera_id = finger index
  std::vector<std::uint8_t> mask;  // 88x72, 1 = object
  double coverage = 0.0;
};

struct GraspFrame {
  double progress = 0.0;  // 0 at minimal coverage, 1 at maximal
  double tendon_steps = 0.0;
  std::array<SubImage, hand::kFingerCount> views;

  double coverage() const;  // mean over the five views
};

struct GraspRun {
  scene::ObjectClass object_class = scene::ObjectClass::Bowl;
  int run_id = 0;  // 0-based trial index within the class
  std::vector<GraspFrame> frames;
};

struct Dataset {
  std::vector<GraspRun> runs;  // grouped by class, then run_id
  std::uint64_t seed = 0;

  std::size_t frame_count() const;
  std::size_t sub_image_count() const;
  std::vector<const GraspRun*> runs_of(scene::ObjectClass c) const;
};

struct DatasetConfig {
  std::vector<scene::ObjectClass> classes{scene::kAllClasses.begin(), scene::kAllClasses.end()};
  int runs_per_class = 11;
  double mean_frames_per_run = 6.47;
  std::uint64_t seed = 1;
  scene::RenderOptions render;
  scene::GeometryOptions geometry;
};

// Mixes a seed with a path of indices (class, run, frame, camera, ...).
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts);

// Frame counts for `runs` runs: round(runs * mean) frames in total, spread as
// evenly as possible, with the longer runs chosen by `rng`.
std::vector<int> frames_per_run(int runs, double mean, std::mt19937_64& rng);

// Throws std::invalid_argument for an empty class list or bad counts.
Dataset generate_dataset(const DatasetConfig& config);

// Layout: manifest.txt plus one directory per run holding P6 images and P5
// masks. See docs/formats.md.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

struct FoldSplit {
  std::size_t test;                // index into the run list
  std::vector<std::size_t> train;  // the other runs, ascending
};

// Fold i tests on run i. Throws std::invalid_argument unless exactly k runs
// of a single class are given.
std::vector<FoldSplit> kfold_by_run(std::span<const GraspRun* const> runs, int k = 11);

// Throws std::invalid_argument on size mismatch or non-binary masks.
double pixel_accuracy(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
// Intersection over union of the object class; 1 when both masks are empty.
double iou(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);

struct BinStats {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
};

using QuartileStats = std::array<std::optional<BinStats>, 4>;

struct ProgressScore {
  double progress = 0.0;
  double accuracy = 0.0;
};

// Bins [0,.25), [.25,.5), [.5,.75), [.75,1]; empty bins stay empty.
// Throws std::invalid_argument for progress outside [0, 1].
int quartile_of(double progress);
QuartileStats quartile_accuracy(std::span<const ProgressScore> scores);

struct ExperimentConfig {
  DatasetConfig dataset;
  segnet::TrainConfig train;
  // Class used only to choose the epoch count. It is trained on its first
  // runs, validated on the last ones and excluded from evaluation.
  std::optional<scene::ObjectClass> holdout = scene::ObjectClass::Bowl;
  int holdout_validation_runs = 2;
  int k = 11;
  bool quantized = true;  // evaluate the 8-bit weights
};

struct FoldResult {
  scene::ObjectClass object_class = scene::ObjectClass::Bowl;
  int fold = 0;
  int test_run = 0;
  std::size_t train_sub_images = 0;
  std::size_t test_sub_images = 0;
  double accuracy = 0.0;  // mean over test sub-images
  double iou = 0.0;
  double final_loss = 0.0;
  double quantized_agreement = 0.0;  // pixels where 8-bit and float masks agree
};

struct ClassCurve {
  scene::ObjectClass object_class = scene::ObjectClass::Bowl;
  double accuracy = 0.0;
  double accuracy_run_weighted = 0.0;
  QuartileStats quartiles;
  std::array<double, hand::kFingerCount> finger_accuracy{};
};

struct EvalReport {
  std::uint64_t seed = 0;
  int epochs = 0;
  std::vector<double> holdout_validation;  // accuracy after each tuning epoch
  std::vector<FoldResult> folds;
  std::vector<ClassCurve> classes;

  // Over all evaluated sub-images (frame-weighted, primary).
  double accuracy = 0.0;
  double iou = 0.0;
  QuartileStats quartiles;
  std::array<double, hand::kFingerCount> finger_accuracy{};
  std::size_t evaluated_sub_images = 0;
  // Each run contributes its own mean once (run-weighted).
  double accuracy_run_weighted = 0.0;
  std::array<std::optional<double>, 4> quartiles_run_weighted;
  double quantized_agreement = 0.0;
  std::size_t leaked_frames = 0;  // test frames found in a training set; must be 0
};

using Logger = std::function<void(const std::string&)>;

EvalReport run_experiment(const Dataset& dataset, const ExperimentConfig& config,
                          const Logger& log = {});

std::string report_json(const EvalReport& report);
// report.json plus folds.csv, quartiles.csv, class_curves.csv, fingers.csv.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

std::vector<segnet::Sample> to_samples(std::span<const GraspRun* const> runs);

}  // namespace fvhand::grasp
