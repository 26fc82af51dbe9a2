#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
  int status = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(FVHAND_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = ::pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string last_line_starting(const std::string& text, const std::string& prefix) {
  std::istringstream in(text);
  std::string line, found;
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) == 0) found = line;
  }
  return found;
}

int column(const std::string& header, const std::string& name) {
  std::istringstream in(header);
  std::string cell;
  for (int i = 0; std::getline(in, cell, ','); ++i) {
    if (cell == name) return i;
  }
  return -1;
}

std::string cell(const std::string& row, int index) {
  std::istringstream in(row);
  std::string c;
  for (int i = 0; i <= index; ++i) std::getline(in, c, ',');
  return c;
}

struct TempDir {
  TempDir() : path(fs::temp_directory_path() / "fvhand_cli_test") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
  fs::path path;
};

}  // namespace

TEST_CASE("exit codes") {
  CHECK(run("").status == 1);
  CHECK(run("frobnicate").status == 1);
  CHECK(run("simulate --close pinky").status == 1);
  CHECK(run("--set no.such.key=1 calibrate").status == 2);
  CHECK(run("replay /nonexistent/stream.bin").status == 2);
  CHECK(run("-c /nonexistent/fvhand.conf calibrate").status == 2);
  CHECK(run("infer -w /nonexistent/w.fvsn --ledger").status == 2);
  CHECK(run("calibrate").status == 0);
}

TEST_CASE("ledger printout") {
  const auto r = run("infer --ledger");
  REQUIRE(r.status == 0);
  CHECK(r.out.find("conv1,88x72x16,2737152,432,101376") != std::string::npos);
  CHECK(r.out.find("conv5,88x72x1,456192,72,6336") != std::string::npos);
  CHECK(r.out.find("total,,33302016,7416,") != std::string::npos);
  CHECK(r.out.find("peak_activation_bytes,,,,253440") != std::string::npos);
}

TEST_CASE("simulated closing reaches the finger limit") {
  const auto r = run("simulate --close index --every 100");
  REQUIRE(r.status == 0);
  std::istringstream in(r.out);
  std::string header;
  std::getline(in, header);
  const int col = column(header, "index_count");
  REQUIRE(col >= 0);
  const auto last = last_line_starting(r.out, "2000,");
  REQUIRE_FALSE(last.empty());
  CHECK(std::abs(std::stol(cell(last, col)) - 60000) <= 500);

  const auto idle = run("simulate --duration 0.2 --every 50");
  REQUIRE(idle.status == 0);
  const auto end = last_line_starting(idle.out, "200,");
  REQUIRE_FALSE(end.empty());
  CHECK(std::stol(cell(end, col)) == 0);
}

TEST_CASE("encode then replay") {
  TempDir dir;
  {
    std::ofstream img(dir / "a.ppm", std::ios::binary);
    img << "P6\n6 4\n255\n";
    for (int i = 0; i < 6 * 4 * 3; ++i) img.put(static_cast<char>(i * 11));
  }
  REQUIRE(run("encode -i " + (dir / "a.ppm") + " -o " + (dir / "a.bin") + " --camera 2 --counter 9").status == 0);
  const auto r = run("replay " + (dir / "a.bin"));
  REQUIRE(r.status == 0);
  CHECK(r.out.find("summary frames=1 sync_losses=0") != std::string::npos);
  CHECK(r.out.find("camera=2 counter=9") != std::string::npos);

  REQUIRE(run("encode -i " + (dir / "a.ppm") + " -o " + (dir / "b.bin") + " --fault dead:0:0").status == 0);
  CHECK(run("replay " + (dir / "b.bin")).out.find("frames=0") != std::string::npos);
  CHECK(run("encode -i " + (dir / "a.ppm") + " -o " + (dir / "c.bin") + " --fault ber:x").status == 1);
}

TEST_CASE("mux report") {
  const auto r = run("mux --periods 4");
  REQUIRE(r.status == 0);
  CHECK(r.out.find("drops 0") != std::string::npos);
  CHECK(r.out.find("payload_bit_rate 40550400") != std::string::npos);
}

TEST_CASE("dataset, training and a one-class evaluation") {
  TempDir dir;
  const std::string data = dir / "data";
  REQUIRE(run("--set data.mean_frames=2 dataset-gen -o " + data + " --runs 11 --classes lemon").status == 0);
  CHECK(fs::exists(fs::path(data) / "manifest.txt"));
  const auto tr = run("train -d " + data + " -o " + (dir / "w.fvsn") + " --epochs 1");
  REQUIRE(tr.status == 0);
  CHECK(fs::file_size(dir / "w.fvsn") > 7416);
  const auto ev = run("eval -d " + data + " --epochs 1 --holdout none -r " + (dir / "report"));
  REQUIRE(ev.status == 0);
  int rows = 0;
  std::istringstream in(ev.out);
  std::string line;
  while (std::getline(in, line)) rows += line.rfind("lemon,", 0) == 0;
  CHECK(rows == 11);
  CHECK(fs::exists(dir.path / "report" / "report.json"));
}
