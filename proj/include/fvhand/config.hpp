#pragma once

// Run configuration shared by all subcommands: a flat set of known keys with
// defaults, read from key=value text and overridable one key at a time.

#include "fvhand/datapath.hpp"
#include "fvhand/grasp_eval.hpp"
#include "fvhand/motion_control.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace fvhand {

class RunConfig {
 public:
  RunConfig();

  // Lines are `key = value`; blank lines and `#` comments are ignored.
  // Throws DataError for unknown keys or malformed lines.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin = "config");
  // Throws DataError for unknown keys.
  void set(const std::string& key, const std::string& value);
  // Parses `key=value`.
  void set_assignment(const std::string& assignment);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::uint64_t seed() const;
  bool flag(const std::string& key) const;

  // Every key with its resolved value, one `key=value` line each, sorted.
  std::string dump() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  motion::SimulationConfig simulation() const;
  grasp::DatasetConfig dataset() const;
  segnet::TrainConfig training() const;
  grasp::ExperimentConfig experiment() const;
  datapath::MuxConfig mux() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace fvhand
