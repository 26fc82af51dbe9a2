#include "fvhand/grasp_eval.hpp"

#include "fvhand/errors.hpp"
#include "fvhand/scene.hpp"

#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

using namespace fvhand;
using namespace fvhand::grasp;

namespace {

DatasetConfig small_config(std::uint64_t seed) {
  DatasetConfig c;
  c.classes = {scene::ObjectClass::Lemon, scene::ObjectClass::Cup};
  c.runs_per_class = 3;
  c.mean_frames_per_run = 3.0;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("class names parse back") {
  for (auto c : scene::kAllClasses) CHECK(scene::parse_class(scene::class_name(c)) == c);
  CHECK_FALSE(scene::parse_class("banana").has_value());
}

TEST_CASE("distortion ramps from the onset to full coverage") {
  scene::RenderOptions o;
  o.distortion_onset = 0.75;
  CHECK(scene::distortion_strength(0.5, o) == 0.0);
  CHECK(scene::distortion_strength(0.75, o) == 0.0);
  CHECK(scene::distortion_strength(0.875, o) == doctest::Approx(0.5));
  CHECK(scene::distortion_strength(1.0, o) == 1.0);
  o.gain_distortion = false;
  CHECK(scene::distortion_strength(1.0, o) == 0.0);
}

TEST_CASE("object coverage grows as the fingers close") {
  std::mt19937_64 rng(3);
  const auto run = scene::make_run_geometry(scene::ObjectClass::Pitcher, rng);
  CHECK(run.start_steps < run.contact_steps);
  const double start = scene::mean_coverage(run, run.start_steps);
  const double contact = scene::mean_coverage(run, run.contact_steps);
  CHECK(start >= 0.0);
  CHECK(start < 0.10 + 1e-9);
  CHECK(contact > start);
  const auto m = scene::object_mask(run, hand::Finger::Index, run.contact_steps);
  CHECK(m.size() == std::size_t{88} * 72);
  for (auto v : m) CHECK(v <= 1);
  CHECK(scene::coverage(m) == doctest::Approx(std::accumulate(m.begin(), m.end(), 0.0) / m.size()));
}

TEST_CASE("rendered views are 88x72 and reproducible") {
  std::mt19937_64 rng(4);
  const auto run = scene::make_run_geometry(scene::ObjectClass::Strawberry, rng);
  scene::RenderOptions o;
  const auto a = scene::render_view(run, hand::Finger::Thumb, run.contact_steps, o, 77, 5);
  const auto b = scene::render_view(run, hand::Finger::Thumb, run.contact_steps, o, 77, 5);
  CHECK(a.image == b.image);
  CHECK(a.image.width == 88);
  CHECK(a.image.height == 72);
  CHECK(a.image.pixels.size() == std::size_t{88} * 72 * 3);
  CHECK(a.mask == scene::object_mask(run, hand::Finger::Thumb, run.contact_steps));
  const auto q = scene::render_qcif(run, hand::Finger::Thumb, run.contact_steps, o, 77, 5);
  CHECK(q.width == 176);
  CHECK(q.height == 144);
}

TEST_CASE("frame counts hit the requested mean") {
  std::mt19937_64 rng(9);
  const auto c = frames_per_run(55, 6.47, rng);
  CHECK(std::accumulate(c.begin(), c.end(), 0) == 356);
  const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
  CHECK(*hi - *lo <= 1);
  CHECK_THROWS_AS(frames_per_run(0, 5, rng), std::invalid_argument);
  CHECK_THROWS_AS(frames_per_run(3, 1.5, rng), std::invalid_argument);
}

TEST_CASE("datasets are deterministic and survive a disk round trip") {
  const auto a = generate_dataset(small_config(5));
  const auto b = generate_dataset(small_config(5));
  REQUIRE(a.runs.size() == 6);
  CHECK(a.frame_count() == 18);
  CHECK(a.sub_image_count() == 90);
  CHECK(a.runs_of(scene::ObjectClass::Cup).size() == 3);
  for (std::size_t r = 0; r < a.runs.size(); ++r) {
    REQUIRE(a.runs[r].frames.size() == b.runs[r].frames.size());
    CHECK(a.runs[r].frames.front().progress == 0.0);
    CHECK(a.runs[r].frames.back().progress == 1.0);
    for (std::size_t f = 0; f < a.runs[r].frames.size(); ++f) {
      for (std::size_t v = 0; v < 5; ++v) {
        CHECK(a.runs[r].frames[f].views[v].image == b.runs[r].frames[f].views[v].image);
        CHECK(a.runs[r].frames[f].views[v].image.camera_id == v);
      }
    }
  }
  const auto other = generate_dataset(small_config(6));
  CHECK_FALSE(other.runs[0].frames[0].views[0].image == a.runs[0].frames[0].views[0].image);

  const auto dir = std::filesystem::temp_directory_path() / "fvhand_dataset_test";
  std::filesystem::remove_all(dir);
  save_dataset(a, dir);
  const auto back = load_dataset(dir);
  REQUIRE(back.runs.size() == a.runs.size());
  for (std::size_t r = 0; r < a.runs.size(); ++r) {
    CHECK(back.runs[r].object_class == a.runs[r].object_class);
    CHECK(back.runs[r].run_id == a.runs[r].run_id);
    REQUIRE(back.runs[r].frames.size() == a.runs[r].frames.size());
    for (std::size_t f = 0; f < a.runs[r].frames.size(); ++f) {
      CHECK(back.runs[r].frames[f].progress == doctest::Approx(a.runs[r].frames[f].progress));
      for (std::size_t v = 0; v < 5; ++v) {
        CHECK(back.runs[r].frames[f].views[v].image.pixels == a.runs[r].frames[f].views[v].image.pixels);
        CHECK(back.runs[r].frames[f].views[v].mask == a.runs[r].frames[f].views[v].mask);
      }
    }
  }
  std::ofstream(dir / "manifest.txt", std::ios::app) << "class=banana\n";
  CHECK_THROWS_AS(load_dataset(dir), DataError);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir), DataError);
}

TEST_CASE("folds hold out one run each") {
  std::vector<GraspRun> runs(11);
  for (int i = 0; i < 11; ++i) runs[i].run_id = i;
  std::vector<const GraspRun*> ptrs;
  for (const auto& r : runs) ptrs.push_back(&r);
  const auto folds = kfold_by_run(ptrs);
  REQUIRE(folds.size() == 11);
  std::set<std::size_t> tested;
  for (const auto& f : folds) {
    tested.insert(f.test);
    CHECK(f.train.size() == 10);
    CHECK(std::find(f.train.begin(), f.train.end(), f.test) == f.train.end());
    CHECK(std::is_sorted(f.train.begin(), f.train.end()));
  }
  CHECK(tested.size() == 11);

  CHECK_THROWS_AS(kfold_by_run(std::span(ptrs).first(10)), std::invalid_argument);
  runs[3].run_id = 4;
  CHECK_THROWS_AS(kfold_by_run(ptrs), std::invalid_argument);
  runs[3].run_id = 3;
  runs[5].object_class = scene::ObjectClass::Cup;
  CHECK_THROWS_AS(kfold_by_run(ptrs), std::invalid_argument);
}

TEST_CASE("pixel accuracy and IoU") {
  const std::vector<std::uint8_t> p = {1, 1, 0, 0, 1};
  const std::vector<std::uint8_t> t = {1, 0, 0, 1, 1};
  CHECK(pixel_accuracy(p, t) == doctest::Approx(0.6));
  CHECK(iou(p, t) == doctest::Approx(0.5));
  const std::vector<std::uint8_t> z(5, 0);
  CHECK(iou(z, z) == 1.0);
  CHECK_THROWS_AS(pixel_accuracy(p, std::span(z).first(4)), std::invalid_argument);
}

TEST_CASE("quartile binning") {
  CHECK(quartile_of(0.0) == 0);
  CHECK(quartile_of(0.2499) == 0);
  CHECK(quartile_of(0.25) == 1);
  CHECK(quartile_of(0.5) == 2);
  CHECK(quartile_of(0.75) == 3);
  CHECK(quartile_of(1.0) == 3);
  CHECK_THROWS_AS(quartile_of(1.01), std::invalid_argument);
  CHECK_THROWS_AS(quartile_of(-0.01), std::invalid_argument);
  CHECK_THROWS_AS(quartile_of(std::nan("")), std::invalid_argument);

  const std::vector<ProgressScore> s = {{0.0, 0.9}, {0.1, 0.7}, {0.8, 0.5}, {1.0, 0.6}};
  const auto q = quartile_accuracy(s);
  REQUIRE(q[0].has_value());
  CHECK(q[0]->mean == doctest::Approx(0.8));
  CHECK(q[0]->stddev == doctest::Approx(0.1));
  CHECK(q[0]->count == 2);
  CHECK_FALSE(q[1].has_value());
  CHECK_FALSE(q[2].has_value());
  CHECK(q[3]->mean == doctest::Approx(0.55));
}

TEST_CASE("seed derivation depends on every part") {
  const auto a = derive_seed(1, {2, 3});
  CHECK(a == derive_seed(1, {2, 3}));
  CHECK(a != derive_seed(1, {3, 2}));
  CHECK(a != derive_seed(2, {2, 3}));
  CHECK(a != derive_seed(1, {2, 3, 0}));
}

TEST_CASE("a one-class experiment produces one fold per run") {
  DatasetConfig dc;
  dc.classes = {scene::ObjectClass::Lemon};
  dc.runs_per_class = 11;
  dc.mean_frames_per_run = 2.0;
  dc.seed = 2;
  const auto ds = generate_dataset(dc);
  ExperimentConfig ec;
  ec.holdout.reset();
  ec.train.epochs = 1;
  const auto rep = run_experiment(ds, ec);
  REQUIRE(rep.folds.size() == 11);
  CHECK(rep.leaked_frames == 0);
  CHECK(rep.evaluated_sub_images == 110);
  for (int i = 0; i < 11; ++i) {
    CHECK(rep.folds[i].test_run == i);
    CHECK(rep.folds[i].test_sub_images == 10);
    CHECK(rep.folds[i].train_sub_images == 100);
  }
  CHECK(rep.accuracy >= 0.0);
  CHECK(rep.accuracy <= 1.0);
  const auto json = report_json(rep);
  CHECK(json.find("\"leaked_frames\"") != std::string::npos);
}
