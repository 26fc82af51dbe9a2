#include "fvhand/grasp_eval.hpp"

#include "fvhand/errors.hpp"
#include "fvhand/pnm.hpp"

#include <fmt/format.h>
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fvhand::grasp {

namespace {

std::uint64_t mix64(std::uint64_t x);

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t p : parts) h = mix64(h ^ p);
  return h;
}

namespace {

using scene::ObjectClass;

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr int kWidth = datapath::kReducedWidth;
constexpr int kHeight = datapath::kReducedHeight;
constexpr std::size_t kPixels = static_cast<std::size_t>(kWidth) * kHeight;

std::string run_dir_name(ObjectClass c, int run_id) {
  return fmt::format("{}_run{:02d}", scene::class_name(c), run_id);
}

std::string view_stem(int frame, int camera) { return fmt::format("f{:02d}_cam{}", frame, camera); }

std::map<std::string, std::string> parse_kv(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream in(line);
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0) throw DataError("manifest: bad token '" + token + "'");
    kv[token.substr(0, eq)] = token.substr(eq + 1);
  }
  return kv;
}

const std::string& field(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DataError("manifest: missing key '" + key + "'");
  return it->second;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DataError("manifest: bad number '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) throw DataError("manifest: bad number '" + s + "'");
  return v;
}

long to_long(const std::string& s) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    throw DataError("manifest: bad integer '" + s + "'");
  }
  if (used != s.size()) throw DataError("manifest: bad integer '" + s + "'");
  return v;
}

void check_binary(std::span<const std::uint8_t> m) {
  for (std::uint8_t v : m) {
    if (v > 1) throw std::invalid_argument("mask values must be 0 or 1");
  }
}

// One evaluated sub-image.
struct Score {
  ObjectClass object_class;
  int run_id;
  std::size_t finger;
  double progress;
  double accuracy;
  double iou;
};

double mean_of(std::span<const Score> s, auto pred) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Score& x : s) {
    if (pred(x)) {
      sum += x.accuracy;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

QuartileStats quartiles_of(std::span<const Score> s) {
  std::vector<ProgressScore> ps;
  ps.reserve(s.size());
  for (const Score& x : s) ps.push_back({x.progress, x.accuracy});
  return quartile_accuracy(ps);
}

// Averages per-run means, per quartile and overall.
void run_weighted(std::span<const Score> s, double& overall,
                  std::array<std::optional<double>, 4>& quartiles) {
  std::map<std::pair<int, int>, std::vector<Score>> by_run;
  for (const Score& x : s) by_run[{static_cast<int>(x.object_class), x.run_id}].push_back(x);
  double sum = 0.0;
  std::array<double, 4> qsum{};
  std::array<int, 4> qn{};
  for (const auto& [key, scores] : by_run) {
    sum += mean_of(scores, [](const Score&) { return true; });
    const auto q = quartiles_of(scores);
    for (int i = 0; i < 4; ++i) {
      if (q[i]) {
        qsum[i] += q[i]->mean;
        ++qn[i];
      }
    }
  }
  overall = by_run.empty() ? 0.0 : sum / static_cast<double>(by_run.size());
  for (int i = 0; i < 4; ++i) {
    quartiles[i] = qn[i] ? std::optional<double>(qsum[i] / qn[i]) : std::nullopt;
  }
}

std::array<double, hand::kFingerCount> finger_means(std::span<const Score> s) {
  std::array<double, hand::kFingerCount> out{};
  for (std::size_t f = 0; f < hand::kFingerCount; ++f) {
    out[f] = mean_of(s, [f](const Score& x) { return x.finger == f; });
  }
  return out;
}

nlohmann::ordered_json quartiles_json(const QuartileStats& q) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& b : q) {
    if (b) {
      arr.push_back({{"mean", b->mean}, {"stddev", b->stddev}, {"count", b->count}});
    } else {
      arr.push_back(nullptr);
    }
  }
  return arr;
}

std::string csv_opt(const std::optional<BinStats>& b, double BinStats::*field_ptr) {
  return b ? fmt::format("{:.6f}", (*b).*field_ptr) : std::string();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace

double GraspFrame::coverage() const {
  double s = 0.0;
  for (const auto& v : views) s += v.coverage;
  return s / static_cast<double>(views.size());
}

std::size_t Dataset::frame_count() const {
  std::size_t n = 0;
  for (const auto& r : runs) n += r.frames.size();
  return n;
}

std::size_t Dataset::sub_image_count() const { return frame_count() * hand::kFingerCount; }

std::vector<const GraspRun*> Dataset::runs_of(ObjectClass c) const {
  std::vector<const GraspRun*> out;
  for (const auto& r : runs) {
    if (r.object_class == c) out.push_back(&r);
  }
  std::sort(out.begin(), out.end(),
            [](const GraspRun* a, const GraspRun* b) { return a->run_id < b->run_id; });
  return out;
}

std::vector<int> frames_per_run(int runs, double mean, std::mt19937_64& rng) {
  if (runs <= 0 || !(mean >= 2.0)) throw std::invalid_argument("need runs > 0 and mean >= 2");
  const auto total = static_cast<long>(std::llround(runs * mean));
  const long base = total / runs;
  const long extra = total % runs;
  std::vector<int> order(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) order[static_cast<std::size_t>(i)] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<int> counts(static_cast<std::size_t>(runs), static_cast<int>(base));
  for (long i = 0; i < extra; ++i) ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  return counts;
}

Dataset generate_dataset(const DatasetConfig& config) {
  if (config.classes.empty()) throw std::invalid_argument("no object classes given");
  if (config.runs_per_class <= 0) throw std::invalid_argument("runs_per_class must be positive");
  std::set<ObjectClass> seen(config.classes.begin(), config.classes.end());
  if (seen.size() != config.classes.size()) throw std::invalid_argument("duplicate object class");

  Dataset ds;
  ds.seed = config.seed;
  std::mt19937_64 rng(config.seed);
  const int total_runs = static_cast<int>(config.classes.size()) * config.runs_per_class;
  const auto counts = frames_per_run(total_runs, config.mean_frames_per_run, rng);

  std::uint32_t counter = 0;
  std::size_t run_index = 0;
  for (ObjectClass c : config.classes) {
    for (int r = 0; r < config.runs_per_class; ++r, ++run_index) {
      std::mt19937_64 run_rng(derive_seed(config.seed, {static_cast<std::uint64_t>(c) + 1,
                                                        static_cast<std::uint64_t>(r)}));
      const auto geom = scene::make_run_geometry(c, run_rng, config.geometry, config.render.camera);
      GraspRun run;
      run.object_class = c;
      run.run_id = r;
      const int n = counts[run_index];
      for (int j = 0; j < n; ++j) {
        GraspFrame frame;
        frame.progress = static_cast<double>(j) / (n - 1);
        frame.tendon_steps =
            geom.start_steps + (geom.contact_steps - geom.start_steps) * frame.progress;
        for (hand::Finger f : hand::kAllFingers) {
          const auto seed = derive_seed(config.seed, {static_cast<std::uint64_t>(c) + 1,
                                                      static_cast<std::uint64_t>(r),
                                                      static_cast<std::uint64_t>(j),
                                                      hand::index_of(f)});
          auto view = scene::render_view(geom, f, frame.tendon_steps, config.render, seed, counter);
          auto& sub = frame.views[hand::index_of(f)];
          sub.image = std::move(view.image);
          sub.mask = std::move(view.mask);
          sub.coverage = view.coverage;
        }
        ++counter;
        run.frames.push_back(std::move(frame));
      }
      ds.runs.push_back(std::move(run));
    }
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string manifest = fmt::format("# fvhand grasp dataset\nseed={}\n", dataset.seed);
  for (const auto& run : dataset.runs) {
    const std::string rd = run_dir_name(run.object_class, run.run_id);
    std::filesystem::create_directories(dir / rd);
    for (std::size_t j = 0; j < run.frames.size(); ++j) {
      const auto& frame = run.frames[j];
      for (std::size_t k = 0; k < hand::kFingerCount; ++k) {
        const auto& v = frame.views[k];
        const std::string stem = view_stem(static_cast<int>(j), static_cast<int>(k));
        pnm::write(dir / rd / (stem + ".ppm"), {v.image.width, v.image.height, 3, v.image.pixels});
        pnm::Image m{kWidth, kHeight, 1, v.mask};
        for (auto& p : m.data) p = p ? 255 : 0;
        pnm::write(dir / rd / (stem + "_mask.pgm"), m);
        manifest += fmt::format(
            "class={} run_id={} frame={} camera_id={} progress={:.17g} steps={:.17g} counter={} "
            "image={}/{}.ppm mask={}/{}_mask.pgm\n",
            scene::class_name(run.object_class), run.run_id, j, k, frame.progress,
            frame.tendon_steps, v.image.frame_counter, rd, stem, rd, stem);
      }
    }
  }
  write_text(dir / "manifest.txt", manifest);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw DataError("cannot open " + (dir / "manifest.txt").string());
  Dataset ds;
  std::map<std::pair<int, int>, std::map<int, GraspFrame>> frames;
  std::map<std::pair<int, int>, std::map<int, std::set<int>>> seen_cams;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("seed=", 0) == 0) {
      ds.seed = std::stoull(line.substr(5));
      continue;
    }
    const auto kv = parse_kv(line);
    const auto cls = scene::parse_class(field(kv, "class"));
    if (!cls) throw DataError("manifest: unknown class '" + field(kv, "class") + "'");
    const long run_id = to_long(field(kv, "run_id"));
    const long j = to_long(field(kv, "frame"));
    const long cam = to_long(field(kv, "camera_id"));
    if (run_id < 0 || j < 0 || cam < 0 || cam >= static_cast<long>(hand::kFingerCount)) {
      throw DataError("manifest: index out of range");
    }
    const double progress = to_double(field(kv, "progress"));
    if (progress < 0.0 || progress > 1.0) throw DataError("manifest: progress outside [0, 1]");

    const auto img = pnm::read(dir / field(kv, "image"));
    const auto msk = pnm::read(dir / field(kv, "mask"));
    if (img.channels != 3 || img.width != kWidth || img.height != kHeight) {
      throw DataError("dataset image must be 88x72 RGB: " + field(kv, "image"));
    }
    if (msk.channels != 1 || msk.width != kWidth || msk.height != kHeight) {
      throw DataError("dataset mask must be 88x72 gray: " + field(kv, "mask"));
    }
    const std::pair<int, int> key{static_cast<int>(*cls), static_cast<int>(run_id)};
    if (!seen_cams[key][static_cast<int>(j)].insert(static_cast<int>(cam)).second) {
      throw DataError("manifest: duplicate view");
    }
    GraspFrame& f = frames[key][static_cast<int>(j)];
    f.progress = progress;
    f.tendon_steps = to_double(field(kv, "steps"));
    SubImage& v = f.views[static_cast<std::size_t>(cam)];
    v.image = datapath::make_frame(static_cast<std::uint8_t>(cam),
                                   static_cast<std::uint32_t>(to_long(field(kv, "counter"))),
                                   kWidth, kHeight, datapath::PixelFormat::Rgb888);
    v.image.pixels = img.data;
    v.mask.resize(kPixels);
    for (std::size_t i = 0; i < kPixels; ++i) {
      if (msk.data[i] != 0 && msk.data[i] != 255) throw DataError("mask must hold 0 or 255");
      v.mask[i] = msk.data[i] ? 1 : 0;
    }
    v.coverage = scene::coverage(v.mask);
  }
  for (auto& [key, run_frames] : frames) {
    GraspRun run;
    run.object_class = static_cast<ObjectClass>(key.first);
    run.run_id = key.second;
    int expect = 0;
    for (auto& [j, f] : run_frames) {
      if (j != expect++) throw DataError("manifest: frame indices are not contiguous");
      if (seen_cams[key][j].size() != hand::kFingerCount) throw DataError("manifest: missing camera view");
      run.frames.push_back(std::move(f));
    }
    ds.runs.push_back(std::move(run));
  }
  if (ds.runs.empty()) throw DataError("dataset is empty");
  return ds;
}

std::vector<FoldSplit> kfold_by_run(std::span<const GraspRun* const> runs, int k) {
  if (k <= 1 || runs.size() != static_cast<std::size_t>(k)) {
    throw std::invalid_argument(fmt::format("k-fold needs exactly k={} runs, got {}", k, runs.size()));
  }
  std::set<int> ids;
  for (const GraspRun* r : runs) {
    if (r->object_class != runs[0]->object_class) {
      throw std::invalid_argument("k-fold runs must belong to one class");
    }
    if (!ids.insert(r->run_id).second) throw std::invalid_argument("duplicate run id");
  }
  std::vector<FoldSplit> out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    FoldSplit s{i, {}};
    for (std::size_t j = 0; j < runs.size(); ++j) {
      if (j != i) s.train.push_back(j);
    }
    out.push_back(std::move(s));
  }
  return out;
}

double pixel_accuracy(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size() || truth.empty()) {
    throw std::invalid_argument("mask shape mismatch");
  }
  check_binary(predicted);
  check_binary(truth);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) agree += predicted[i] == truth[i];
  return static_cast<double>(agree) / static_cast<double>(truth.size());
}

double iou(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("mask shape mismatch");
  check_binary(predicted);
  check_binary(truth);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    inter += predicted[i] && truth[i];
    uni += predicted[i] || truth[i];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

int quartile_of(double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) throw std::invalid_argument("progress outside [0, 1]");
  if (progress < 0.25) return 0;
  if (progress < 0.5) return 1;
  if (progress < 0.75) return 2;
  return 3;
}

QuartileStats quartile_accuracy(std::span<const ProgressScore> scores) {
  std::array<std::vector<double>, 4> bins;
  for (const auto& s : scores) bins[static_cast<std::size_t>(quartile_of(s.progress))].push_back(s.accuracy);
  QuartileStats out;
  for (std::size_t i = 0; i < 4; ++i) {
    if (bins[i].empty()) continue;
    double sum = 0.0;
    for (double a : bins[i]) sum += a;
    const double mean = sum / static_cast<double>(bins[i].size());
    double sq = 0.0;
    for (double a : bins[i]) sq += (a - mean) * (a - mean);
    out[i] = BinStats{mean, std::sqrt(sq / static_cast<double>(bins[i].size())), bins[i].size()};
  }
  return out;
}

std::vector<segnet::Sample> to_samples(std::span<const GraspRun* const> runs) {
  std::vector<segnet::Sample> out;
  for (const GraspRun* r : runs) {
    for (const auto& f : r->frames) {
      for (const auto& v : f.views) {
        out.push_back({segnet::normalize_rgb(v.image.pixels, v.image.height, v.image.width), v.mask});
      }
    }
  }
  return out;
}

EvalReport run_experiment(const Dataset& dataset, const ExperimentConfig& config, const Logger& log) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  std::vector<ObjectClass> classes;
  for (const auto& r : dataset.runs) {
    if (std::find(classes.begin(), classes.end(), r.object_class) == classes.end()) {
      classes.push_back(r.object_class);
    }
  }
  if (classes.empty()) throw std::invalid_argument("dataset is empty");

  EvalReport rep;
  rep.seed = dataset.seed;
  rep.epochs = config.train.epochs;
  const segnet::Architecture arch;
  auto eval_params = [&](const segnet::Params<float>& p) {
    return config.quantized ? segnet::dequantize(segnet::quantize(p)) : p;
  };

  const bool tune = config.holdout && classes.size() > 1 &&
                    std::find(classes.begin(), classes.end(), *config.holdout) != classes.end();
  if (tune) {
    const auto runs = dataset.runs_of(*config.holdout);
    const int v = config.holdout_validation_runs;
    if (v <= 0 || static_cast<std::size_t>(v) >= runs.size()) {
      throw std::invalid_argument("holdout class has too few runs for validation");
    }
    const std::span<const GraspRun* const> all(runs);
    const auto train_set = to_samples(all.first(runs.size() - v));
    const auto val_set = to_samples(all.last(v));
    say(fmt::format("tuning epochs on {}: {} train / {} validation sub-images",
                    scene::class_name(*config.holdout), train_set.size(), val_set.size()));
    segnet::train(train_set, config.train, arch,
                  [&](int epoch, double loss, const segnet::Params<float>& p) {
                    const auto q = eval_params(p);
                    double acc = 0.0;
                    for (const auto& s : val_set) {
                      acc += pixel_accuracy(segnet::forward(s.image, q).mask, s.mask);
                    }
                    acc /= static_cast<double>(val_set.size());
                    rep.holdout_validation.push_back(acc);
                    say(fmt::format("  epoch {} loss {:.5f} validation accuracy {:.4f}", epoch,
                                    loss, acc));
                  });
    const auto best = std::max_element(rep.holdout_validation.begin(), rep.holdout_validation.end());
    rep.epochs = best == rep.holdout_validation.end()
                     ? config.train.epochs
                     : static_cast<int>(best - rep.holdout_validation.begin()) + 1;
    say(fmt::format("selected {} epochs", rep.epochs));
    classes.erase(std::find(classes.begin(), classes.end(), *config.holdout));
  }

  std::vector<Score> scores;
  std::size_t agree = 0, compared = 0;
  for (ObjectClass c : classes) {
    const auto runs = dataset.runs_of(c);
    const auto splits = kfold_by_run(runs, config.k);
    for (std::size_t fi = 0; fi < splits.size(); ++fi) {
      const auto& split = splits[fi];
      std::vector<const GraspRun*> train_runs;
      for (std::size_t t : split.train) train_runs.push_back(runs[t]);
      const GraspRun& test = *runs[split.test];
      std::set<int> train_ids;
      for (const GraspRun* r : train_runs) train_ids.insert(r->run_id);
      if (train_ids.count(test.run_id)) rep.leaked_frames += test.frames.size();

      const auto samples = to_samples(train_runs);
      segnet::TrainConfig tc = config.train;
      tc.epochs = rep.epochs;
      const auto trained = segnet::train(samples, tc, arch);
      const auto params = eval_params(trained.params);

      FoldResult fr;
      fr.object_class = c;
      fr.fold = static_cast<int>(fi);
      fr.test_run = test.run_id;
      fr.train_sub_images = samples.size();
      fr.final_loss = trained.epoch_loss.empty() ? 0.0 : trained.epoch_loss.back();
      std::size_t fold_agree = 0, fold_px = 0;
      double acc_sum = 0.0, iou_sum = 0.0;
      for (const auto& frame : test.frames) {
        for (std::size_t k = 0; k < hand::kFingerCount; ++k) {
          const auto& v = frame.views[k];
          const auto image = segnet::normalize_rgb(v.image.pixels, v.image.height, v.image.width);
          const auto pred = segnet::forward(image, params).mask;
          const double a = pixel_accuracy(pred, v.mask);
          const double j = iou(pred, v.mask);
          scores.push_back({c, test.run_id, k, frame.progress, a, j});
          acc_sum += a;
          iou_sum += j;
          ++fr.test_sub_images;
          if (config.quantized) {
            const auto full = segnet::forward(image, trained.params).mask;
            for (std::size_t i = 0; i < full.size(); ++i) fold_agree += full[i] == pred[i];
            fold_px += full.size();
          }
        }
      }
      fr.accuracy = acc_sum / static_cast<double>(fr.test_sub_images);
      fr.iou = iou_sum / static_cast<double>(fr.test_sub_images);
      fr.quantized_agreement =
          fold_px ? static_cast<double>(fold_agree) / static_cast<double>(fold_px) : 1.0;
      agree += fold_agree;
      compared += fold_px;
      say(fmt::format("{} fold {:2d}: test run {:2d}, {} sub-images, accuracy {:.4f}, IoU {:.4f}",
                      scene::class_name(c), fi, test.run_id, fr.test_sub_images, fr.accuracy,
                      fr.iou));
      rep.folds.push_back(fr);
    }
    const auto is_c = [c](const Score& s) { return s.object_class == c; };
    std::vector<Score> cs;
    std::copy_if(scores.begin(), scores.end(), std::back_inserter(cs), is_c);
    ClassCurve curve;
    curve.object_class = c;
    curve.accuracy = mean_of(cs, [](const Score&) { return true; });
    std::array<std::optional<double>, 4> unused;
    run_weighted(cs, curve.accuracy_run_weighted, unused);
    curve.quartiles = quartiles_of(cs);
    curve.finger_accuracy = finger_means(cs);
    rep.classes.push_back(curve);
  }

  rep.evaluated_sub_images = scores.size();
  rep.accuracy = mean_of(scores, [](const Score&) { return true; });
  double iou_sum = 0.0;
  for (const auto& s : scores) iou_sum += s.iou;
  rep.iou = scores.empty() ? 0.0 : iou_sum / static_cast<double>(scores.size());
  rep.quartiles = quartiles_of(scores);
  rep.finger_accuracy = finger_means(scores);
  run_weighted(scores, rep.accuracy_run_weighted, rep.quartiles_run_weighted);
  rep.quantized_agreement = compared ? static_cast<double>(agree) / static_cast<double>(compared) : 1.0;
  return rep;
}

std::string report_json(const EvalReport& r) {
  using J = nlohmann::ordered_json;
  J j;
  j["schema"] = "fvhand-eval-report/1";
  j["seed"] = r.seed;
  j["epochs"] = r.epochs;
  j["holdout_validation_accuracy"] = r.holdout_validation;
  j["evaluated_sub_images"] = r.evaluated_sub_images;
  j["leaked_frames"] = r.leaked_frames;
  j["frame_weighted"] = {{"accuracy", r.accuracy},
                         {"iou", r.iou},
                         {"quartiles", quartiles_json(r.quartiles)},
                         {"finger_accuracy", r.finger_accuracy}};
  J rq = J::array();
  for (const auto& q : r.quartiles_run_weighted) rq.push_back(q ? J(*q) : J(nullptr));
  j["run_weighted"] = {{"accuracy", r.accuracy_run_weighted}, {"quartiles", rq}};
  j["quantized_agreement"] = r.quantized_agreement;
  J classes = J::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"class", scene::class_name(c.object_class)},
                       {"accuracy", c.accuracy},
                       {"accuracy_run_weighted", c.accuracy_run_weighted},
                       {"quartiles", quartiles_json(c.quartiles)},
                       {"finger_accuracy", c.finger_accuracy}});
  }
  j["classes"] = classes;
  J folds = J::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"class", scene::class_name(f.object_class)},
                     {"fold", f.fold},
                     {"test_run", f.test_run},
                     {"train_sub_images", f.train_sub_images},
                     {"test_sub_images", f.test_sub_images},
                     {"accuracy", f.accuracy},
                     {"iou", f.iou},
                     {"final_loss", f.final_loss},
                     {"quantized_agreement", f.quantized_agreement}});
  }
  j["folds"] = folds;
  return j.dump(2) + "\n";
}

void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", report_json(r));

  std::string folds = "class,fold,test_run,train_sub_images,test_sub_images,accuracy,iou,final_loss\n";
  for (const auto& f : r.folds) {
    folds += fmt::format("{},{},{},{},{},{:.6f},{:.6f},{:.6f}\n", scene::class_name(f.object_class),
                         f.fold, f.test_run, f.train_sub_images, f.test_sub_images, f.accuracy, f.iou,
                         f.final_loss);
  }
  write_text(dir / "folds.csv", folds);

  std::string q = "scope,quartile,mean,stddev,count,run_weighted_mean\n";
  for (int i = 0; i < 4; ++i) {
    const auto& b = r.quartiles[i];
    q += fmt::format("all,{},{},{},{},{}\n", i + 1, csv_opt(b, &BinStats::mean),
                     csv_opt(b, &BinStats::stddev), b ? std::to_string(b->count) : std::string(),
                     r.quartiles_run_weighted[i] ? fmt::format("{:.6f}", *r.quartiles_run_weighted[i])
                                                 : std::string());
  }
  write_text(dir / "quartiles.csv", q);

  std::string curves = "class,quartile,mean,stddev,count\n";
  for (const auto& c : r.classes) {
    for (int i = 0; i < 4; ++i) {
      const auto& b = c.quartiles[i];
      curves += fmt::format("{},{},{},{},{}\n", scene::class_name(c.object_class), i + 1,
                            csv_opt(b, &BinStats::mean), csv_opt(b, &BinStats::stddev),
                            b ? std::to_string(b->count) : std::string());
    }
  }
  write_text(dir / "class_curves.csv", curves);

  std::string fingers = "class,finger,accuracy\n";
  for (const auto& c : r.classes) {
    for (hand::Finger f : hand::kAllFingers) {
      fingers += fmt::format("{},{},{:.6f}\n", scene::class_name(c.object_class), hand::finger_name(f),
                             c.finger_accuracy[hand::index_of(f)]);
    }
  }
  for (hand::Finger f : hand::kAllFingers) {
    fingers += fmt::format("all,{},{:.6f}\n", hand::finger_name(f), r.finger_accuracy[hand::index_of(f)]);
  }
  write_text(dir / "fingers.csv", fingers);
}

}  // namespace fvhand::grasp
