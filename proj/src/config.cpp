#include "fvhand/config.hpp"

#include "fvhand/errors.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <sstream>

namespace fvhand {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const char* const kMotorKeys[] = {"thumb", "index", "coupled"};

}  // namespace

RunConfig::RunConfig() {
  const motion::SimulationConfig sim;
  const auto& c = sim.controllers[0];
  values_ = {
      {"seed", "1"},
      {"sim.supply_voltage", fmt::format("{}", sim.supply_voltage)},
      {"sim.finger_stiffness", fmt::format("{}", sim.finger_stiffness)},
      {"sim.endstop_stiffness", fmt::format("{}", sim.endstop_stiffness)},
      {"sim.button_velocity", fmt::format("{}", sim.button_velocity)},
      {"sim.settle_threshold", fmt::format("{}", sim.settle_threshold)},
      {"sim.timeout", fmt::format("{}", sim.timeout_s)},
      {"sim.friction", "false"},
      {"sim.roller_efficiency", "1"},
      {"ctrl.position_kp", fmt::format("{}", c.position.kp)},
      {"ctrl.position_ki", fmt::format("{}", c.position.ki)},
      {"ctrl.position_kd", fmt::format("{}", c.position.kd)},
      {"ctrl.velocity_kp", fmt::format("{}", c.velocity.kp)},
      {"ctrl.velocity_ki", fmt::format("{}", c.velocity.ki)},
      {"ctrl.velocity_kd", fmt::format("{}", c.velocity.kd)},
      {"data.dir", "dataset"},
      {"data.classes", "bowl,lemon,pitcher,strawberry,cup"},
      {"data.runs_per_class", "11"},
      {"data.mean_frames", "6.47"},
      {"data.distortion", "true"},
      {"data.noise_sigma", "3"},
      {"net.epochs", "150"},
      {"net.batch_size", "8"},
      {"net.learning_rate", "0.001"},
      {"net.weights", "weights.fvsn"},
      {"eval.holdout", "bowl"},
      {"eval.validation_runs", "2"},
      {"eval.folds", "11"},
      {"eval.quantized", "true"},
      {"eval.report_dir", "report"},
      {"mux.buffer_bytes", std::to_string(datapath::kDefaultBufferBytes)},
      {"mux.policy", "drop-newest"},
      {"mux.link_bps", "100000000"},
      {"serve.host", "127.0.0.1"},
      {"serve.port", "8765"},
      {"serve.speed", "1"},
      {"serve.state_hz", "50"},
      {"serve.frame_hz", "20"},
      {"serve.object", "cup"},
      {"serve.duration", "0"},
  };
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    values_[fmt::format("ctrl.max_velocity.{}", kMotorKeys[m])] =
        fmt::format("{}", sim.controllers[m].max_velocity);
  }
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(fmt::format("{}:{}: expected key = value", origin, n));
    }
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}:{}: {}", origin, n, e.what()));
    }
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw DataError("unknown config key '" + key + "'");
  it->second = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw DataError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw DataError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::real(const std::string& key) const {
  const std::string& s = str(key);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || !std::isfinite(v)) {
    throw DataError(fmt::format("{}: '{}' is not a number", key, s));
  }
  return v;
}

std::int64_t RunConfig::integer(const std::string& key) const {
  const std::string& s = str(key);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw DataError(fmt::format("{}: '{}' is not an integer", key, s));
  return v;
}

std::uint64_t RunConfig::seed() const {
  const std::string& s = str("seed");
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || s[0] == '-') throw DataError("seed: '" + s + "' is not an unsigned integer");
  return v;
}

bool RunConfig::flag(const std::string& key) const {
  const std::string& s = str(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw DataError(fmt::format("{}: '{}' is not a boolean", key, s));
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

motion::SimulationConfig RunConfig::simulation() const {
  motion::SimulationConfig c;
  c.supply_voltage = real("sim.supply_voltage");
  c.finger_stiffness = real("sim.finger_stiffness");
  c.endstop_stiffness = real("sim.endstop_stiffness");
  c.button_velocity = real("sim.button_velocity");
  c.settle_threshold = real("sim.settle_threshold");
  c.timeout_s = real("sim.timeout");
  c.tendons.friction_enabled = flag("sim.friction");
  c.tendons.roller_efficiency = real("sim.roller_efficiency");
  for (std::size_t m = 0; m < hand::kMotorCount; ++m) {
    auto& ctrl = c.controllers[m];
    ctrl.position = {real("ctrl.position_kp"), real("ctrl.position_ki"), real("ctrl.position_kd")};
    ctrl.velocity = {real("ctrl.velocity_kp"), real("ctrl.velocity_ki"), real("ctrl.velocity_kd")};
    ctrl.max_velocity = real(fmt::format("ctrl.max_velocity.{}", kMotorKeys[m]));
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("simulation config: ") + e.what());
  }
  return c;
}

grasp::DatasetConfig RunConfig::dataset() const {
  grasp::DatasetConfig d;
  d.classes.clear();
  for (const auto& name : split(str("data.classes"), ',')) {
    const auto c = scene::parse_class(name);
    if (!c) throw DataError("data.classes: unknown class '" + name + "'");
    d.classes.push_back(*c);
  }
  if (d.classes.empty()) throw DataError("data.classes: no classes given");
  d.runs_per_class = static_cast<int>(integer("data.runs_per_class"));
  d.mean_frames_per_run = real("data.mean_frames");
  d.seed = seed();
  d.render.gain_distortion = flag("data.distortion");
  d.render.noise_sigma = real("data.noise_sigma");
  if (d.runs_per_class <= 0 || d.mean_frames_per_run < 2.0 || d.render.noise_sigma < 0.0) {
    throw DataError("data: runs_per_class must be positive and mean_frames at least 2");
  }
  return d;
}

segnet::TrainConfig RunConfig::training() const {
  segnet::TrainConfig t;
  t.epochs = static_cast<int>(integer("net.epochs"));
  t.batch_size = static_cast<int>(integer("net.batch_size"));
  t.learning_rate = real("net.learning_rate");
  t.seed = seed();
  if (t.epochs < 0 || t.batch_size <= 0 || !(t.learning_rate > 0.0)) {
    throw DataError("net: epochs must be >= 0, batch_size and learning_rate positive");
  }
  return t;
}

grasp::ExperimentConfig RunConfig::experiment() const {
  grasp::ExperimentConfig e;
  e.dataset = dataset();
  e.train = training();
  const std::string& h = str("eval.holdout");
  if (h == "none" || h.empty()) {
    e.holdout.reset();
  } else {
    e.holdout = scene::parse_class(h);
    if (!e.holdout) throw DataError("eval.holdout: unknown class '" + h + "'");
  }
  e.holdout_validation_runs = static_cast<int>(integer("eval.validation_runs"));
  e.k = static_cast<int>(integer("eval.folds"));
  e.quantized = flag("eval.quantized");
  return e;
}

datapath::MuxConfig RunConfig::mux() const {
  datapath::MuxConfig m;
  const auto cap = integer("mux.buffer_bytes");
  if (cap <= 0) throw DataError("mux.buffer_bytes must be positive");
  m.budget.capacity = static_cast<std::size_t>(cap);
  const std::string& p = str("mux.policy");
  if (p == "drop-newest") {
    m.policy = datapath::OverflowPolicy::DropNewest;
  } else if (p == "drop-oldest") {
    m.policy = datapath::OverflowPolicy::DropOldest;
  } else {
    throw DataError("mux.policy must be drop-newest or drop-oldest");
  }
  m.link_bits_per_second = real("mux.link_bps");
  if (!(m.link_bits_per_second > 0.0)) throw DataError("mux.link_bps must be positive");
  return m;
}

}  // namespace fvhand
