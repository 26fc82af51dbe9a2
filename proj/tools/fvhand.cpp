// fvhand: command-line entry point.
//
// Exit codes: 0 success, 1 usage error, 2 data error (bad config, missing or
// malformed files), 3 runtime failure.

#include "fvhand/config.hpp"
#include "fvhand/datapath.hpp"
#include "fvhand/errors.hpp"
#include "fvhand/grasp_eval.hpp"
#include "fvhand/motion_control.hpp"
#include "fvhand/pnm.hpp"
#include "fvhand/segnet.hpp"
#include "fvhand/serve.hpp"

#include "CLI11.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace fvhand;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void note(const std::string& s) { fmt::print(stderr, "[fvhand] {}\n", s); }

void write_output(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::fwrite(text.data(), 1, text.size(), stdout);
    std::fflush(stdout);
    return;
  }
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  if (!fs::exists(path)) throw DataError("no such file: " + path);
  return pnm::read_file(path);
}

hand::MotorId parse_motor(const std::string& s) {
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    const auto id = static_cast<hand::MotorId>(m);
    if (hand::motor_name(id) == s) return id;
  }
  throw UsageError("unknown motor '" + s + "' (thumb, index, coupled)");
}

// --- simulate ---

struct ScriptEvent {
  std::uint64_t tick = 0;
  int button = 0;
  motion::ButtonAction action = motion::ButtonAction::Press;
};

std::uint64_t seconds_to_tick(double t) {
  if (!(t >= 0.0)) throw DataError(fmt::format("event time {} is negative", t));
  return static_cast<std::uint64_t>(std::llround(t * motion::kLoopRateHz));
}

motion::ButtonAction parse_action(const std::string& s) {
  if (s == "press") return motion::ButtonAction::Press;
  if (s == "release") return motion::ButtonAction::Release;
  throw DataError("button action must be press or release, got '" + s + "'");
}

int parse_button(const std::string& s) {
  if (s != "1" && s != "2" && s != "3") throw DataError("button must be 1, 2 or 3, got '" + s + "'");
  return s[0] - '0';
}

// `<time_s> press|release <button>` per line, `#` comments.
std::vector<ScriptEvent> load_script(const std::string& path) {
  const auto bytes = read_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<ScriptEvent> events;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string t, action, button, extra;
    if (!(fields >> t)) continue;
    if (!(fields >> action >> button) || (fields >> extra)) {
      throw DataError(fmt::format("{}:{}: expected '<time> press|release <button>'", path, n));
    }
    try {
      events.push_back({seconds_to_tick(std::stod(t)), parse_button(button), parse_action(action)});
    } catch (const std::invalid_argument&) {
      throw DataError(fmt::format("{}:{}: bad time '{}'", path, n, t));
    }
  }
  return events;
}

// `T:B` presses button B at T seconds, `T:B:release` releases it.
ScriptEvent parse_button_flag(const std::string& s) {
  std::vector<std::string> parts;
  std::istringstream in(s);
  for (std::string p; std::getline(in, p, ':');) parts.push_back(p);
  if (parts.size() < 2 || parts.size() > 3) throw UsageError("--button expects T:B or T:B:release, got '" + s + "'");
  double t = 0.0;
  try {
    t = std::stod(parts[0]);
  } catch (const std::exception&) {
    throw UsageError("--button: bad time in '" + s + "'");
  }
  return {seconds_to_tick(t), parse_button(parts[1]),
          parts.size() == 3 ? parse_action(parts[2]) : motion::ButtonAction::Press};
}

std::string trace_header() {
  std::string h = "tick,time_s";
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    const auto name = hand::motor_name(static_cast<hand::MotorId>(m));
    h += fmt::format(",{0}_count,{0}_duty,{0}_velocity,{0}_state", name);
  }
  for (hand::Finger f : hand::kAllFingers) h += fmt::format(",{0}_mcp,{0}_pip", hand::finger_name(f));
  return h + "\n";
}

void trace_row(std::string& out, const motion::HandSimulator& sim) {
  const auto& st = sim.state();
  out += fmt::format("{},{:.3f}", sim.ticks(), sim.time());
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    const auto& ms = st.motors[m];
    out += fmt::format(",{},{},{:.3f},{}", ms.encoder_count, ms.pwm_duty,
                       motion::rad_per_s_to_steps_per_s(ms.angular_velocity),
                       motion::drive_state_name(sim.panel().state(static_cast<hand::MotorId>(m))));
  }
  for (const auto& f : st.fingers) out += fmt::format(",{:.6f},{:.6f}", f.mcp_angle, f.pip_angle);
  out += '\n';
}

struct SimulateArgs {
  std::vector<std::string> close;
  std::vector<std::string> buttons;
  std::string script;
  std::optional<double> duration;
  std::string out = "-";
  int every = 1;
};

int cmd_simulate(const RunConfig& cfg, const SimulateArgs& a) {
  motion::HandSimulator sim(cfg.simulation());
  std::vector<ScriptEvent> events;
  if (!a.script.empty()) events = load_script(a.script);
  for (const auto& b : a.buttons) events.push_back(parse_button_flag(b));
  std::stable_sort(events.begin(), events.end(),
                   [](const ScriptEvent& x, const ScriptEvent& y) { return x.tick < y.tick; });

  for (const auto& c : a.close) {
    if (c == "all") {
      for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
        const auto id = static_cast<hand::MotorId>(m);
        sim.command_position(id, motion::full_close_target(id));
      }
    } else {
      const auto id = parse_motor(c);
      sim.command_position(id, motion::full_close_target(id));
    }
  }

  double duration = 1.0;
  if (a.duration) {
    duration = *a.duration;
  } else if (!a.close.empty()) {
    duration = 2.0;
  } else if (!events.empty()) {
    duration = static_cast<double>(events.back().tick) / motion::kLoopRateHz + 1.0;
  }
  if (!(duration >= 0.0)) throw UsageError("--duration must be non-negative");
  if (a.every < 1) throw UsageError("--every must be at least 1");
  const auto end = seconds_to_tick(duration);

  std::string out = trace_header();
  trace_row(out, sim);
  std::size_t next = 0;
  while (sim.ticks() < end) {
    for (; next < events.size() && events[next].tick <= sim.ticks(); ++next) {
      sim.button(events[next].button, events[next].action);
    }
    sim.tick();
    if (sim.ticks() % static_cast<std::uint64_t>(a.every) == 0 || sim.ticks() == end) trace_row(out, sim);
  }
  write_output(a.out, out);
  const auto& st = sim.state();
  note(fmt::format("simulated {} ticks; counts thumb {} index {} coupled {}", sim.ticks(),
                   st.motors[0].encoder_count, st.motors[1].encoder_count, st.motors[2].encoder_count));
  return kExitOk;
}

// --- calibrate ---

int cmd_calibrate(const RunConfig& cfg, const std::string& out_path) {
  const motion::ClosingTargets targets;
  const auto r = motion::calibrate_closing_times(cfg.simulation(), targets);
  std::string table = "motor,target_s,closing_s,max_velocity\n";
  std::string fragment = "# velocity limits fitted to the measured closing times\n";
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    const auto name = hand::motor_name(static_cast<hand::MotorId>(m));
    table += fmt::format("{},{:.3f},{:.3f},{:.1f}\n", name, targets.seconds[m], r.closing_time[m],
                         r.max_velocity[m]);
    fragment += fmt::format("ctrl.max_velocity.{} = {:.1f}\n", name, r.max_velocity[m]);
  }
  write_output("-", table);
  if (!out_path.empty()) write_output(out_path, fragment);
  return kExitOk;
}

// --- dataset-gen ---

int cmd_dataset_gen(const RunConfig& cfg) {
  const auto dc = cfg.dataset();
  const auto ds = grasp::generate_dataset(dc);
  const fs::path dir = cfg.str("data.dir");
  grasp::save_dataset(ds, dir);
  std::string out = "class,runs,frames,sub_images\n";
  for (auto c : dc.classes) {
    const auto runs = ds.runs_of(c);
    std::size_t frames = 0;
    for (const auto* r : runs) frames += r->frames.size();
    out += fmt::format("{},{},{},{}\n", scene::class_name(c), runs.size(), frames, frames * hand::kFingerCount);
  }
  out += fmt::format("total,{},{},{}\n", ds.runs.size(), ds.frame_count(), ds.sub_image_count());
  write_output("-", out);
  note("dataset written to " + dir.string());
  return kExitOk;
}

// --- train ---

grasp::Dataset load_dataset_checked(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.txt")) throw DataError("no dataset at " + dir.string() + " (manifest.txt missing)");
  return grasp::load_dataset(dir);
}

int cmd_train(const RunConfig& cfg) {
  const auto ds = load_dataset_checked(cfg.str("data.dir"));
  const auto wanted = cfg.dataset().classes;
  std::vector<const grasp::GraspRun*> runs;
  for (const auto& r : ds.runs) {
    if (std::find(wanted.begin(), wanted.end(), r.object_class) != wanted.end()) runs.push_back(&r);
  }
  if (runs.empty()) throw DataError("dataset holds no runs of the configured classes");
  const auto samples = grasp::to_samples(runs);
  note(fmt::format("training on {} sub-images from {} runs", samples.size(), runs.size()));
  std::string log = "epoch,loss\n";
  const auto result = segnet::train(samples, cfg.training(), {}, [&](int epoch, double loss, const auto&) {
    log += fmt::format("{},{:.8f}\n", epoch, loss);
    note(fmt::format("epoch {} loss {:.6f}", epoch, loss));
  });
  const auto weights = segnet::quantize(result.params);
  const std::string path = cfg.str("net.weights");
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  segnet::save_weights(path, weights);
  write_output("-", log + fmt::format("weights,{} payload bytes\n", weights.payload_bytes()));
  note("weights written to " + path);
  return kExitOk;
}

// --- infer ---

std::string shape_text(const segnet::Shape& s) { return fmt::format("{}x{}x{}", s.width, s.height, s.channels); }

std::string ledger_text(const segnet::ResourceLedger& l) {
  std::string out = "layer,output,macs,weight_bytes,activation_bytes\n";
  for (const auto& r : l.rows) {
    out += fmt::format("{},{},{},{},{}\n", r.name, shape_text(r.output), r.macs, r.weight_bytes, r.activation_bytes);
  }
  out += fmt::format("total,,{},{},\n", l.total_macs, l.weight_bytes);
  out += fmt::format("peak_activation_bytes,,,,{}\n", l.peak_activation_bytes);
  return out;
}

datapath::Frame load_camera_image(const std::string& path) {
  const auto img = pnm::read(path);
  if (img.channels != 3) throw DataError(path + ": expected an RGB (P6) image");
  auto frame = datapath::make_frame(0, 0, static_cast<std::uint16_t>(img.width),
                                    static_cast<std::uint16_t>(img.height), datapath::PixelFormat::Rgb888);
  frame.pixels = img.data;
  return frame;
}

struct InferArgs {
  std::string image;
  std::string out;
  bool ledger = false;
  double threshold = 0.5;
  bool weights_given = false;
};

int cmd_infer(const RunConfig& cfg, const InferArgs& a) {
  if (a.image.empty() && !a.ledger) throw UsageError("infer needs --image, --ledger or both");
  if (a.image.empty()) {
    segnet::Architecture arch;
    if (a.weights_given) arch = segnet::load_weights(cfg.str("net.weights")).arch;
    write_output("-", ledger_text(segnet::expected_ledger(arch, datapath::kReducedHeight, datapath::kReducedWidth)));
    return kExitOk;
  }
  const std::string wpath = cfg.str("net.weights");
  if (!fs::exists(wpath)) throw DataError("no weights at " + wpath);
  const auto params = segnet::dequantize(segnet::load_weights(wpath));
  auto frame = load_camera_image(a.image);
  if (frame.width == datapath::kQcifWidth && frame.height == datapath::kQcifHeight) {
    frame = datapath::downsample_2x2(datapath::to_rgb565(frame));
  } else if (frame.width != datapath::kReducedWidth || frame.height != datapath::kReducedHeight) {
    throw DataError(fmt::format("{}: image is {}x{}, expected 88x72 or 176x144", a.image, frame.width, frame.height));
  }
  const auto r = segnet::forward(segnet::normalize_rgb(frame.pixels, frame.height, frame.width), params, a.threshold);
  std::string out = ledger_text(r.ledger);
  out += fmt::format("mask_coverage,{:.6f}\n", scene::coverage(r.mask));
  write_output("-", out);
  if (!a.out.empty()) {
    pnm::Image m{frame.width, frame.height, 1, {}};
    m.data.reserve(r.mask.size());
    for (auto v : r.mask) m.data.push_back(v ? 255 : 0);
    pnm::write(a.out, m);
  }
  return kExitOk;
}

// --- eval ---

std::string quartile_cell(const std::optional<grasp::BinStats>& b) {
  return b ? fmt::format("{:.4f}+-{:.4f} (n={})", b->mean, b->stddev, b->count) : std::string("empty");
}

int cmd_eval(const RunConfig& cfg, bool generate) {
  auto exp = cfg.experiment();
  grasp::Dataset ds;
  if (generate) {
    ds = grasp::generate_dataset(exp.dataset);
  } else {
    ds = load_dataset_checked(cfg.str("data.dir"));
  }
  const auto rep = grasp::run_experiment(ds, exp, note);
  std::string out = "class,fold,test_run,train_sub_images,test_sub_images,accuracy,iou,final_loss,quantized_agreement\n";
  for (const auto& f : rep.folds) {
    out += fmt::format("{},{},{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", scene::class_name(f.object_class), f.fold,
                       f.test_run, f.train_sub_images, f.test_sub_images, f.accuracy, f.iou, f.final_loss,
                       f.quantized_agreement);
  }
  out += fmt::format("\nepochs {}\naccuracy {:.6f} (run-weighted {:.6f})\niou {:.6f}\n", rep.epochs, rep.accuracy,
                     rep.accuracy_run_weighted, rep.iou);
  for (int q = 0; q < 4; ++q) out += fmt::format("quartile {} {}\n", q + 1, quartile_cell(rep.quartiles[q]));
  out += fmt::format("leaked_frames {}\n", rep.leaked_frames);
  write_output("-", out);
  const std::string dir = cfg.str("eval.report_dir");
  grasp::write_report(rep, dir);
  note("report written to " + dir);
  return kExitOk;
}

// --- replay / encode / mux ---

std::string format_name(datapath::PixelFormat f) { return f == datapath::PixelFormat::Rgb565 ? "rgb565" : "rgb888"; }

int cmd_replay(const std::string& path, const std::string& dump) {
  const auto stream = read_bytes(path);
  const auto summary = datapath::dcmi_decode(stream);
  std::string out;
  for (const auto& ev : summary.events) {
    if (const auto* f = std::get_if<datapath::Frame>(&ev)) {
      out += fmt::format("frame camera={} counter={} size={}x{} format={}\n", f->camera_id, f->frame_counter,
                         f->width, f->height, format_name(f->format));
      if (!dump.empty()) {
        fs::create_directories(dump);
        const auto rgb = datapath::to_rgb888(*f);
        pnm::write(fs::path(dump) / fmt::format("cam{}_{:06d}.ppm", f->camera_id, f->frame_counter),
                   {f->width, f->height, 3, rgb.pixels});
      }
    } else {
      const auto& s = std::get<datapath::SyncLoss>(ev);
      out += fmt::format("sync_loss offset={} reason={}", s.offset, datapath::sync_loss_name(s.reason));
      if (s.camera_id) out += fmt::format(" camera={}", *s.camera_id);
      if (s.frame_counter) out += fmt::format(" counter={}", *s.frame_counter);
      out += '\n';
    }
  }
  out += fmt::format("summary frames={} sync_losses={} bytes_skipped={}\n", summary.frames, summary.sync_losses,
                     summary.bytes_skipped);
  write_output("-", out);
  return kExitOk;
}

// ber:RATE | partial:PACKET:KEEP | dead:FIRST:LOSS[:RATE]
datapath::FaultPolicy parse_fault(const std::string& spec) {
  std::vector<std::string> p;
  std::istringstream in(spec);
  for (std::string s; std::getline(in, s, ':');) p.push_back(s);
  try {
    if (p.size() == 2 && p[0] == "ber") return datapath::BitErrorRate{std::stod(p[1])};
    if (p.size() == 3 && p[0] == "partial") {
      return datapath::PartialFrame{static_cast<std::size_t>(std::stoull(p[1])), std::stod(p[2])};
    }
    if ((p.size() == 3 || p.size() == 4) && p[0] == "dead") {
      datapath::DeadAfterCycles d;
      d.first_corrupt = static_cast<std::uint32_t>(std::stoul(p[1]));
      d.signal_loss = static_cast<std::uint32_t>(std::stoul(p[2]));
      if (p.size() == 4) d.intermittent_rate = std::stod(p[3]);
      return d;
    }
  } catch (const std::exception&) {
  }
  throw UsageError("--fault expects ber:RATE, partial:PACKET:KEEP or dead:FIRST:LOSS[:RATE], got '" + spec + "'");
}

struct EncodeArgs {
  std::string image;
  std::string out;
  int camera = 0;
  std::uint32_t counter = 0;
  std::string format = "rgb565";
  std::string fault;
};

int cmd_encode(const RunConfig& cfg, const EncodeArgs& a) {
  if (a.camera < 0 || a.camera >= datapath::kCameraCount) throw UsageError("--camera must be 0..4");
  auto frame = load_camera_image(a.image);
  frame.camera_id = static_cast<std::uint8_t>(a.camera);
  frame.frame_counter = a.counter;
  if (a.format == "rgb565") {
    frame = datapath::to_rgb565(frame);
  } else if (a.format != "rgb888") {
    throw UsageError("--format must be rgb565 or rgb888");
  }
  auto stream = datapath::dcmi_encode(frame);
  if (!a.fault.empty()) stream = datapath::inject_fault(stream, parse_fault(a.fault), cfg.seed());
  pnm::write_file(a.out, stream);
  write_output("-", fmt::format("encoded camera={} counter={} size={}x{} format={} bytes={}\n", a.camera, a.counter,
                                frame.width, frame.height, a.format, stream.size()));
  return kExitOk;
}

struct MuxArgs {
  std::size_t periods = 20;
  bool stagger = false;
  std::string out;
  std::string fault;
};

int cmd_mux(const RunConfig& cfg, const MuxArgs& a) {
  const auto mc = cfg.mux();
  const auto seed = cfg.seed();
  const auto schedule = datapath::camera_schedule(a.periods, datapath::kCameraCount, datapath::kCameraFps, a.stagger);
  // Cheap deterministic test pattern per camera and counter.
  const datapath::FrameSource source = [seed](std::uint8_t cam, std::uint32_t counter) {
    auto f = datapath::make_frame(cam, counter, datapath::kQcifWidth, datapath::kQcifHeight,
                                  datapath::PixelFormat::Rgb565);
    std::mt19937_64 rng(grasp::derive_seed(seed, {cam, counter}));
    for (auto& b : f.pixels) b = static_cast<std::uint8_t>(rng());
    return f;
  };
  const auto duration_ns =
      static_cast<std::int64_t>(std::llround(static_cast<double>(a.periods) / datapath::kCameraFps * 1e9));
  auto r = datapath::mux_serialize(schedule, source, mc, duration_ns);
  if (!a.fault.empty()) r.stream = datapath::inject_fault(r.stream, parse_fault(a.fault), seed);
  if (!a.out.empty()) pnm::write_file(a.out, r.stream);
  const auto& s = r.stats;
  write_output("-", fmt::format("frames_in {}\nframes_emitted {}\ndrops {}\npayload_bytes {}\nwire_bytes {}\n"
                                "max_occupancy {}\ncapacity {}\nduration_ns {}\npayload_bit_rate {:.1f}\n",
                                s.frames_in, s.frames_emitted, s.drops, s.payload_bytes, s.wire_bytes,
                                s.max_occupancy, mc.budget.capacity, s.duration_ns, s.payload_bit_rate));
  return kExitOk;
}

// --- serve ---

std::atomic<serve::Server*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

int cmd_serve(const RunConfig& cfg, const std::string& weights) {
  serve::ServeConfig sc;
  sc.host = cfg.str("serve.host");
  const auto port = cfg.integer("serve.port");
  if (port < 0 || port > 65535) throw DataError("serve.port must be 0..65535");
  sc.port = static_cast<std::uint16_t>(port);
  sc.speed = cfg.real("serve.speed");
  sc.state_hz = cfg.real("serve.state_hz");
  sc.frame_hz = cfg.real("serve.frame_hz");
  sc.duration_s = cfg.real("serve.duration");
  sc.seed = cfg.seed();
  sc.simulation = cfg.simulation();
  sc.render = cfg.dataset().render;
  const auto object = scene::parse_class(cfg.str("serve.object"));
  if (!object) throw DataError("serve.object: unknown class '" + cfg.str("serve.object") + "'");
  sc.object = *object;
  if (!weights.empty()) sc.weights = segnet::load_weights(weights);
  sc.log = note;
  if (!(sc.speed >= 0.0) || !(sc.state_hz > 0.0) || !(sc.frame_hz > 0.0) || sc.frame_hz > datapath::kCameraFps) {
    throw DataError("serve: speed must be >= 0, state_hz > 0, frame_hz in (0, 20]");
  }

  serve::Server server(std::move(sc));
  const auto bound = server.listen();
  // Scripts read this line to find the port when serve.port is 0.
  fmt::print("listening {}:{}\n", cfg.str("serve.host"), bound);
  std::fflush(stdout);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const auto stats = server.run();
  g_server = nullptr;
  note(fmt::format("served {} ticks, {} state packets, {} frame packets, {} connections", stats.ticks,
                   stats.state_packets, stats.frame_packets, stats.connections));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Software twin of a five-finger soft hand with fingertip cameras"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  app.add_option("-c,--config", config_path, "key = value config file");
  app.add_option("--set", overrides, "override one config key, key=value (repeatable)");
  app.add_option("--seed", seed, "random seed (same as --set seed=N)");

  // Subcommand flags that name a config key are applied as overrides so the
  // logged config shows them.
  std::vector<std::pair<std::string, std::string>> flag_overrides;
  const auto config_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key,
                               const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&flag_overrides, key](const std::string& v) { flag_overrides.emplace_back(key, v); }, help);
  };

  SimulateArgs sim_args;
  auto* sim = app.add_subcommand("simulate", "run the 1 kHz hand simulation and write a per-tick CSV trace");
  sim->add_option("--close", sim_args.close, "close a motor group to its full-close target: thumb, index, coupled, all");
  sim->add_option("--button", sim_args.buttons, "button event T:B or T:B:release (T in seconds)");
  sim->add_option("--script", sim_args.script, "file of '<time> press|release <button>' lines");
  sim->add_option("--duration", sim_args.duration, "simulated seconds");
  sim->add_option("-o,--out", sim_args.out, "trace CSV path, - for stdout");
  sim->add_option("--every", sim_args.every, "write every Nth tick");

  std::string calib_out;
  auto* cal = app.add_subcommand("calibrate", "fit the velocity limits to the measured closing times");
  cal->add_option("-o,--out", calib_out, "write the fitted limits as a config fragment");

  auto* dsg = app.add_subcommand("dataset-gen", "render the synthetic grasp dataset");
  config_flag(dsg, "-o,--out", "data.dir", "output directory");
  config_flag(dsg, "--runs", "data.runs_per_class", "runs per class");
  config_flag(dsg, "--classes", "data.classes", "comma-separated classes");

  auto* trn = app.add_subcommand("train", "train the segmentation network and save 8-bit weights");
  config_flag(trn, "-d,--data", "data.dir", "dataset directory");
  config_flag(trn, "-o,--out", "net.weights", "weights file");
  config_flag(trn, "--epochs", "net.epochs", "training epochs");

  InferArgs infer_args;
  auto* inf = app.add_subcommand("infer", "segment one image and print the resource ledger");
  inf->add_option_function<std::string>(
      "-w,--weights",
      [&](const std::string& v) {
        flag_overrides.emplace_back("net.weights", v);
        infer_args.weights_given = true;
      },
      "weights file");
  inf->add_option("-i,--image", infer_args.image, "P6 image, 88x72 or 176x144");
  inf->add_option("-o,--out", infer_args.out, "write the mask as P5");
  inf->add_flag("--ledger", infer_args.ledger, "print the ledger (no image or weights needed)");
  inf->add_option("--threshold", infer_args.threshold, "probability threshold");

  bool eval_generate = false;
  auto* evl = app.add_subcommand("eval", "run-wise cross-validation of the segmentation network");
  config_flag(evl, "-d,--data", "data.dir", "dataset directory");
  evl->add_flag("--generate", eval_generate, "generate the dataset in memory instead of loading it");
  config_flag(evl, "-r,--report", "eval.report_dir", "report directory");
  config_flag(evl, "--epochs", "net.epochs", "maximum training epochs");
  config_flag(evl, "--holdout", "eval.holdout", "class used to select the epoch count, or none");

  std::string replay_file, replay_dump;
  auto* rpl = app.add_subcommand("replay", "decode a camera stream file");
  rpl->add_option("stream", replay_file, "stream file")->required();
  rpl->add_option("--dump", replay_dump, "write decoded frames as P6 into this directory");

  EncodeArgs enc_args;
  auto* enc = app.add_subcommand("encode", "encode one image as a camera stream packet");
  enc->add_option("-i,--image", enc_args.image, "P6 image")->required();
  enc->add_option("-o,--out", enc_args.out, "stream file")->required();
  enc->add_option("--camera", enc_args.camera, "camera id 0..4");
  enc->add_option("--counter", enc_args.counter, "frame counter");
  enc->add_option("--format", enc_args.format, "rgb565 or rgb888");
  enc->add_option("--fault", enc_args.fault, "ber:RATE, partial:PACKET:KEEP or dead:FIRST:LOSS[:RATE]");

  MuxArgs mux_args;
  auto* mux = app.add_subcommand("mux", "serialize five camera feeds through the bounded buffer");
  mux->add_option("--periods", mux_args.periods, "frame periods at 20 fps");
  mux->add_flag("--stagger", mux_args.stagger, "offset camera k by k/5 of a period");
  mux->add_option("-o,--out", mux_args.out, "write the serialized stream");
  mux->add_option("--fault", mux_args.fault, "fault applied to the stream");
  config_flag(mux, "--buffer", "mux.buffer_bytes", "buffer capacity in bytes");
  config_flag(mux, "--policy", "mux.policy", "drop-newest or drop-oldest");

  std::string serve_weights;
  auto* srv = app.add_subcommand("serve", "live teleoperation session over the binary wire protocol");
  config_flag(srv, "--host", "serve.host", "listen address");
  config_flag(srv, "-p,--port", "serve.port", "listen port, 0 picks one");
  config_flag(srv, "--speed", "serve.speed", "simulation speed factor, 0 = unpaced");
  config_flag(srv, "--object", "serve.object", "object class of the scripted scene");
  config_flag(srv, "--duration", "serve.duration", "stop after this many wall-clock seconds, 0 = never");
  srv->add_option("-w,--weights", serve_weights, "weights for live segmentation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    if (seed) cfg.set("seed", std::to_string(*seed));
    for (const auto& o : overrides) cfg.set_assignment(o);
    for (const auto& [k, v] : flag_overrides) cfg.set(k, v);
    cfg.seed();
    std::string dump;
    for (const auto& [k, v] : cfg.values()) dump += fmt::format("[fvhand] config {}={}\n", k, v);
    std::fputs(dump.c_str(), stderr);

    if (*sim) return cmd_simulate(cfg, sim_args);
    if (*cal) return cmd_calibrate(cfg, calib_out);
    if (*dsg) return cmd_dataset_gen(cfg);
    if (*trn) return cmd_train(cfg);
    if (*inf) return cmd_infer(cfg, infer_args);
    if (*evl) return cmd_eval(cfg, eval_generate);
    if (*rpl) return cmd_replay(replay_file, replay_dump);
    if (*enc) return cmd_encode(cfg, enc_args);
    if (*mux) return cmd_mux(cfg, mux_args);
    if (*srv) return cmd_serve(cfg, serve_weights);
  } catch (const UsageError& e) {
    note(std::string("usage error: ") + e.what());
    return kExitUsage;
  } catch (const DataError& e) {
    note(std::string("data error: ") + e.what());
    return kExitData;
  } catch (const std::invalid_argument& e) {
    note(std::string("data error: ") + e.what());
    return kExitData;
  } catch (const serve::PortBusy& e) {
    note(std::string("runtime failure: ") + e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    note(std::string("runtime failure: ") + e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
