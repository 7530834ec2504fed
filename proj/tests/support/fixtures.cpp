// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <fstream>
#include <sstream>

#include "akt/harness.hpp"

#ifndef AKT_TEST_SCRATCH
#define AKT_TEST_SCRATCH "test_scratch"
#endif

namespace fs = std::filesystem;

namespace akt_test {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::path(AKT_TEST_SCRATCH) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

akt::RunConfig config_of(std::initializer_list<std::string> assignments) {
  akt::RunConfig cfg;
  for (const auto& a : assignments) cfg.set(a);
  return cfg;
}

const TeacherFixture& small_teacher() {
  static const TeacherFixture fixture = [] {
    const fs::path dir = scratch_dir("small_teacher");
    const auto cfg = config_of({"out_dir=" + dir.string(), "epochs=3", "n_train=1024",
                                "n_held_out=512", "seed=0"});
    const auto r = akt::cmd_train_teacher(cfg);
    return TeacherFixture{r.checkpoint, r.held_out_top1};
  }();
  return fixture;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace akt_test
