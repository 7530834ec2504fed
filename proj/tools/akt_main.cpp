// SPDX-License-Identifier: Apache-2.0
//
// akt train-teacher|distill|eval|curvature --config <file> [--set key=value ...]
//
// Exit codes: 0 success, 2 configuration error, 3 numeric error.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "akt/errors.hpp"
#include "akt/harness.hpp"

namespace {

int run(akt::Command cmd, const std::string& config_path, const std::vector<std::string>& overrides) {
  akt::RunConfig cfg = config_path.empty() ? akt::RunConfig{} : akt::RunConfig::load(config_path);
  for (const auto& o : overrides) cfg.set(o);
  switch (cmd) {
    case akt::Command::kTrainTeacher: {
      const auto r = akt::cmd_train_teacher(cfg);
      std::printf("teacher held-out top1 %.4f -> %s\n", r.held_out_top1, r.checkpoint.c_str());
      break;
    }
    case akt::Command::kDistill: {
      const auto r = akt::cmd_distill(cfg);
      std::printf("student held-out top1 %.4f (teacher %.4f, skipped steps %zu) -> %s\n",
                  r.final_top1, r.teacher_top1, r.skipped_steps, r.checkpoint.c_str());
      break;
    }
    case akt::Command::kEval: {
      const auto r = akt::cmd_eval(cfg);
      std::printf("top1 %.4f (%zu/%zu), predictions in %s\n", r.top1, r.correct, r.total,
                  r.dump_path.c_str());
      break;
    }
    case akt::Command::kCurvature: {
      const auto rows = akt::cmd_curvature(cfg);
      std::fputs(akt::curvature_csv(rows).c_str(), stdout);
      break;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot quantization with attention-based knowledge transfer"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  for (akt::Command c : {akt::Command::kTrainTeacher, akt::Command::kDistill, akt::Command::kEval,
                         akt::Command::kCurvature}) {
    CLI::App* sub = app.add_subcommand(akt::command_name(c));
    sub->add_option("--config", config_path, "flat key=value config file");
    sub->add_option("--set", overrides, "override key=value (repeatable)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    const akt::Command cmd = akt::parse_command(app.get_subcommands().front()->get_name());
    return run(cmd, config_path, overrides);
  } catch (const akt::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const akt::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 2;
  } catch (const akt::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
