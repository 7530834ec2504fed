// SPDX-License-Identifier: Apache-2.0
//
// Experiment commands behind the `akt` CLI. Each command takes a resolved
// RunConfig, writes its run directory and returns a summary for callers that
// drive experiments in-process.
//
// Run directory contents:
//   config.txt       resolved config, written before any compute
//   manifest.json    command, git describe, build type, compiler
//   metrics.jsonl    one record per epoch per split
//   checkpoint.aktc  final (or last good) checkpoint
//   steps.jsonl      per-step loss breakdown (distill)
//   provenance.log   identifiers of every training batch (distill)
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "akt/config.hpp"
#include "akt/distill.hpp"

namespace akt {

enum class Command { kTrainTeacher, kDistill, kEval, kCurvature };

const char* command_name(Command c);
Command parse_command(const std::string& s);

/// Fills defaults for `cmd` and rejects unknown keys.
RunConfig resolve_config(Command cmd, RunConfig cfg);

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;
  std::optional<double> top1;
  std::optional<double> loss;  // teacher training: cross-entropy
  std::optional<LossBreakdown> breakdown;
  double lr = 0.0;
  double wall_ms = 0.0;
  std::size_t skipped_steps = 0;
};

/// One JSON object, no trailing newline.
std::string to_json(const MetricsRecord& r);

struct TeacherResult {
  std::string checkpoint;
  double held_out_top1 = 0.0;
  std::vector<double> held_out_curve;
};

struct DistillResult {
  std::string checkpoint;
  double final_top1 = 0.0;
  double teacher_top1 = 0.0;
  std::vector<double> held_out_curve;
  std::size_t skipped_steps = 0;
  std::vector<std::string> snapshots;
  std::string provenance_log;
  std::size_t synth_flagged = 0;  // batches whose statistics loss was not monotone at the start
};

struct EvalResult {
  double top1 = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::string dump_path;
};

struct CurvatureRow {
  std::size_t epoch = 0;
  std::string loss_mode;
  std::string bits;  // e.g. "3w3a"
  std::size_t probes = 0;
  double mean_trace = 0.0;
  double std = 0.0;
  std::string checkpoint;
};

TeacherResult cmd_train_teacher(const RunConfig& cfg);
DistillResult cmd_distill(const RunConfig& cfg);
EvalResult cmd_eval(const RunConfig& cfg);
std::vector<CurvatureRow> cmd_curvature(const RunConfig& cfg);

/// RFC-4180 CSV with header epoch,loss_mode,bits,M,mean_trace,std.
std::string curvature_csv(const std::vector<CurvatureRow>& rows);

struct ProvenanceAudit {
  std::size_t synth_refs = 0;
  std::size_t dataset_refs = 0;
  std::vector<std::string> offending_lines;
  bool clean() const { return dataset_refs == 0 && synth_refs > 0; }
};

/// Every training-batch line of a provenance log must name a synthesized
/// batch; anything else counts as a dataset reference.
ProvenanceAudit audit_provenance(const std::string& path);

}  // namespace akt
