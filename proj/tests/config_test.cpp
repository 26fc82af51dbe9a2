#include "fvhand/config.hpp"

#include "fvhand/errors.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>

using fvhand::DataError;
using fvhand::RunConfig;

TEST_CASE("defaults resolve to typed configs") {
  RunConfig c;
  CHECK(c.seed() == 1);
  CHECK(c.dataset().runs_per_class == 11);
  CHECK(c.dataset().classes.size() == 5);
  CHECK(c.training().epochs == 150);
  CHECK(c.experiment().k == 11);
  CHECK(c.mux().budget.capacity == fvhand::datapath::kDefaultBufferBytes);
  CHECK_FALSE(c.flag("sim.friction"));
}

TEST_CASE("text overrides and comments") {
  RunConfig c;
  c.load_text("# comment\n\nseed = 42\n data.classes = lemon, cup \nnet.epochs=3\n");
  CHECK(c.seed() == 42);
  CHECK(c.dataset().classes.size() == 2);
  CHECK(c.training().epochs == 3);
  c.set_assignment("eval.holdout=none");
  CHECK_FALSE(c.experiment().holdout.has_value());
  CHECK(c.dump().find("seed=42\n") != std::string::npos);
}

TEST_CASE("bad input is a data error") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("nope", "1"), DataError);
  CHECK_THROWS_AS(c.load_text("seed 3\n"), DataError);
  CHECK_THROWS_AS(c.set_assignment("seed"), DataError);
  c.set("seed", "-4");
  CHECK_THROWS_AS(c.seed(), DataError);
  c.set("net.epochs", "2.5");
  CHECK_THROWS_AS(c.training(), DataError);
  c.set("net.epochs", "2");
  c.set("sim.friction", "maybe");
  CHECK_THROWS_AS(c.simulation(), DataError);
  c.set("sim.friction", "off");
  c.set("data.classes", "lemon,banana");
  CHECK_THROWS_AS(c.dataset(), DataError);
  c.set("data.classes", "lemon");
  c.set("mux.policy", "drop-random");
  CHECK_THROWS_AS(c.mux(), DataError);
  CHECK_THROWS_AS(c.load_file("/nonexistent/fvhand.conf"), DataError);
}

TEST_CASE("config files report the failing line") {
  const auto path = std::filesystem::temp_directory_path() / "fvhand_config_test.conf";
  std::ofstream(path) << "seed = 7\nbogus = 1\n";
  RunConfig c;
  try {
    c.load_file(path);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  std::filesystem::remove(path);
}
