// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "akt/config.hpp"

namespace akt_test {

/// Fresh (emptied) directory under the build tree's test scratch area.
std::filesystem::path scratch_dir(const std::string& name);

struct TeacherFixture {
  std::string checkpoint;
  double held_out_top1 = 0.0;
};

/// A small teacher trained once per test process (3 epochs on 1024 samples).
const TeacherFixture& small_teacher();

/// Config with the given assignments applied.
akt::RunConfig config_of(std::initializer_list<std::string> assignments);

std::string slurp(const std::filesystem::path& p);

}  // namespace akt_test
