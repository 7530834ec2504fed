// SPDX-License-Identifier: Apache-2.0
#include "akt/harness.hpp"

#include <akt/build_info.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "akt/curvature.hpp"
#include "akt/data.hpp"
#include "akt/model.hpp"
#include "akt/nn.hpp"
#include "akt/optim.hpp"
#include "akt/quantizer.hpp"

namespace akt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

using Defaults = std::vector<std::pair<std::string, std::string>>;

const Defaults kCommon = {
    {"out_dir", "run"},
    {"seed", "0"},
};

const Defaults kData = {
    {"data_seed", "0"},
    {"classes", "4"},
    {"n_train", "2048"},
    {"n_held_out", "1024"},
};

const Defaults kTeacher = {
    {"stages", "3"},
    {"blocks_per_stage", "1"},
    {"base_channels", "8"},
    {"tap_point", "post_activation"},
    {"epochs", "60"},
    {"full_schedule", "0"},
    {"batch_size", "64"},
    {"lr", "0.05"},
    {"momentum", "0.9"},
    {"weight_decay", "1e-4"},
    {"decay_fraction", "0.5"},
    {"grad_skip", "1000"},
};

const Defaults kDistill = {
    {"teacher", ""},
    {"mode", "rfd"},
    {"alpha", "0.5"},
    {"lambda", "1"},
    {"tau_logit", "20"},
    {"tau_feat", "8"},
    {"spatial_divergence", "kl"},
    {"w_bits", "3"},
    {"a_bits", "3"},
    {"act_ema_momentum", "0.9"},
    {"quant_skip", ""},
    {"epochs", "60"},
    {"full_schedule", "0"},
    {"batch_size", "64"},
    {"lr", "0.001"},
    {"momentum", "0.9"},
    {"weight_decay", "1e-4"},
    {"decay_fraction", "0.5"},
    {"grad_skip", "1000"},
    {"synth_batches", "8"},
    {"synth_steps", "200"},
    {"lr_img", "0.05"},
    {"synth_cache", ""},
    {"snapshots", ""},
};

const Defaults kEval = {
    {"checkpoint", ""},
    {"split", "held_out"},
    {"dump", "predictions.csv"},
};

const Defaults kCurvature = {
    {"teacher", ""},
    {"checkpoints", ""},
    {"probes", "64"},
    {"probe_seed", "0"},
    {"batch_size", "64"},
    {"batch_seed", "977"},
    {"synth_steps", "200"},
    {"lr_img", "0.05"},
    {"synth_cache", ""},
    {"output", "curvature.csv"},
    {"self_test", "0"},
    {"linearize", "0"},
};

std::vector<const Defaults*> tables_for(Command cmd) {
  switch (cmd) {
    case Command::kTrainTeacher: return {&kCommon, &kData, &kTeacher};
    case Command::kDistill: return {&kCommon, &kDistill};
    case Command::kEval: return {&kCommon, &kEval};
    case Command::kCurvature: return {&kCommon, &kCurvature};
  }
  return {};
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write '" + path.string() + "'");
  os << text;
}

class Appender {
 public:
  explicit Appender(const fs::path& path) : os_(path, std::ios::trunc) {
    if (!os_) throw ConfigError("cannot write '" + path.string() + "'");
  }
  void line(const std::string& s) {
    os_ << s << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

// Creates the run directory and writes the config echo and manifest before
// any compute happens.
fs::path open_run(Command cmd, const RunConfig& cfg) {
  const fs::path dir = cfg.get_string("out_dir");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create run directory '" + dir.string() + "': " + ec.message());
  const std::string echo = cfg.echo();
  write_file(dir / "config.txt", echo);
  json manifest;
  manifest["command"] = command_name(cmd);
  manifest["git_describe"] = build::kGitDescribe;
  manifest["build_type"] = build::kBuildType;
  manifest["compiler"] = build::kCompiler;
  manifest["config_fnv1a"] = hex64(fnv1a(echo));
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return dir;
}

fs::path in_run(const fs::path& dir, const std::string& name) {
  const fs::path p(name);
  return p.is_absolute() ? p : dir / p;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng() % i]);
  return p;
}

struct Schedule {
  std::size_t epochs = 0;
  std::size_t decay_epoch = 0;
  float lr = 0.0f;
  float at(std::size_t epoch) const { return epoch >= decay_epoch ? lr * 0.1f : lr; }
};

Schedule schedule_from(const RunConfig& cfg) {
  Schedule s;
  s.epochs = cfg.get_bool("full_schedule") ? 200 : static_cast<std::size_t>(cfg.get_uint("epochs"));
  if (s.epochs == 0) throw ConfigError("epochs must be positive");
  const double frac = cfg.get_double("decay_fraction");
  if (!(frac > 0.0 && frac <= 1.0)) throw ConfigError("decay_fraction must lie in (0,1]");
  s.decay_epoch = static_cast<std::size_t>(std::lround(frac * static_cast<double>(s.epochs)));
  s.lr = static_cast<float>(cfg.get_double("lr"));
  if (!(s.lr > 0.0f)) throw ConfigError("lr must be positive");
  return s;
}

SgdOptions sgd_from(const RunConfig& cfg) {
  SgdOptions o;
  o.momentum = static_cast<float>(cfg.get_double("momentum"));
  o.weight_decay = static_cast<float>(cfg.get_double("weight_decay"));
  o.nesterov = true;
  return o;
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

double evaluate(Model& model, const ProceduralDataset& ds) {
  return top1_accuracy(predict(model, ds.images()), ds.labels());
}

std::size_t meta_size(const CheckpointMeta& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw ConfigError("checkpoint metadata lacks '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw ConfigError("checkpoint metadata '" + key + "' is not an integer");
  }
}

std::string meta_str(const CheckpointMeta& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw ConfigError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

DatasetSplits splits_from_meta(const CheckpointMeta& meta) {
  return procedural_splits(meta_size(meta, "data_seed"), meta_size(meta, "n_train"),
                           meta_size(meta, "n_held_out"), meta_size(meta, "classes"));
}

LoadedCheckpoint load_teacher(const std::string& path) {
  if (path.empty()) throw ConfigError("no teacher checkpoint given (set teacher=<path>)");
  if (!fs::exists(path)) throw ConfigError("teacher checkpoint '" + path + "' does not exist");
  LoadedCheckpoint ck = read_checkpoint(path);
  if (ck.meta.count("kind") && ck.meta.at("kind") != "teacher") {
    throw ConfigError("'" + path + "' is not a teacher checkpoint");
  }
  return ck;
}

struct SynthRequest {
  std::string teacher_path;
  std::size_t batch = 64;
  std::size_t steps = 200;
  float lr_img = 0.05f;
  std::string cache_dir;
};

// Synthesizes (or reloads from the cache) the batch for `seed`.
SynthBatch synth_for(Model& teacher, const SynthRequest& req, std::uint64_t seed,
                     const std::string& tag) {
  SynthOptions opts;
  opts.steps = req.steps;
  opts.lr_img = req.lr_img;
  opts.seed = seed;
  opts.tag = tag;
  fs::path cached;
  if (!req.cache_dir.empty()) {
    std::ostringstream key;
    key << hex64(fnv1a(read_file(req.teacher_path))) << "-n" << req.batch << "-t" << req.steps
        << "-lr" << req.lr_img << "-s" << seed << "-" << tag << ".akts";
    fs::create_directories(req.cache_dir);
    cached = fs::path(req.cache_dir) / key.str();
    if (fs::exists(cached)) return read_synth_batch(cached.string());
  }
  const auto labels = balanced_labels(req.batch, teacher.config().num_classes, seed);
  SynthBatch b = synthesize_batch(teacher, labels, opts);
  if (!cached.empty()) {
    const fs::path tmp = cached.string() + ".tmp";
    write_synth_batch(b, tmp.string());
    fs::rename(tmp, cached);
  }
  return b;
}

LossConfig loss_from(const RunConfig& cfg) {
  LossConfig l;
  l.alpha = static_cast<float>(cfg.get_double("alpha"));
  l.lambda = static_cast<float>(cfg.get_double("lambda"));
  l.tau_logit = static_cast<float>(cfg.get_double("tau_logit"));
  l.tau_feat = static_cast<float>(cfg.get_double("tau_feat"));
  l.mode = parse_loss_mode(cfg.get_string("mode"));
  l.spatial = parse_spatial_divergence(cfg.get_string("spatial_divergence"));
  l.validate();
  return l;
}

LossConfig loss_from_meta(const CheckpointMeta& meta) {
  RunConfig c;
  for (const char* k : {"alpha", "lambda", "tau_logit", "tau_feat", "mode", "spatial_divergence"}) {
    c.set(k, meta_str(meta, k));
  }
  return loss_from(c);
}

std::string bits_label(int w, int a) { return std::to_string(w) + "w" + std::to_string(a) + "a"; }

void add_breakdown(json& j, const LossBreakdown& b) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  j["l_sp"] = opt(b.l_sp);
  j["l_ch"] = opt(b.l_ch);
  j["l_rfd"] = opt(b.l_rfd);
  j["l_kl"] = b.l_kl;
  j["l_akt"] = b.l_akt;
  j["grad_norm"] = b.grad_norm;
  j["zero_spatial_maps"] = b.zero_spatial_maps;
}

}  // namespace

const char* command_name(Command c) {
  switch (c) {
    case Command::kTrainTeacher: return "train-teacher";
    case Command::kDistill: return "distill";
    case Command::kEval: return "eval";
    case Command::kCurvature: return "curvature";
  }
  return "?";
}

Command parse_command(const std::string& s) {
  for (Command c : {Command::kTrainTeacher, Command::kDistill, Command::kEval, Command::kCurvature}) {
    if (s == command_name(c)) return c;
  }
  throw ConfigError("unknown command '" + s + "' (train-teacher|distill|eval|curvature)");
}

RunConfig resolve_config(Command cmd, RunConfig cfg) {
  std::vector<std::string> known;
  for (const Defaults* table : tables_for(cmd)) {
    for (const auto& [k, v] : *table) {
      cfg.set_default(k, v);
      known.push_back(k);
    }
  }
  cfg.require_known(known);
  return cfg;
}

std::string to_json(const MetricsRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["top1"] = r.top1 ? json(*r.top1) : json(nullptr);
  if (r.loss) j["loss"] = *r.loss;
  if (r.breakdown) add_breakdown(j, *r.breakdown);
  j["lr"] = r.lr;
  j["wall_ms"] = r.wall_ms;
  j["skipped_steps"] = r.skipped_steps;
  return j.dump();
}

// --- train-teacher -------------------------------------------------------

TeacherResult cmd_train_teacher(const RunConfig& raw) {
  const RunConfig cfg = resolve_config(Command::kTrainTeacher, raw);
  const fs::path dir = open_run(Command::kTrainTeacher, cfg);

  ModelConfig mc;
  mc.stages = cfg.get_uint("stages");
  mc.blocks_per_stage = cfg.get_uint("blocks_per_stage");
  mc.base_channels = cfg.get_uint("base_channels");
  mc.num_classes = cfg.get_uint("classes");
  mc.tap_point = parse_tap_point(cfg.get_string("tap_point"));
  mc.validate();
  const Schedule sched = schedule_from(cfg);
  const std::size_t batch = cfg.get_uint("batch_size");
  if (batch == 0) throw ConfigError("batch_size must be positive");
  const double grad_skip = cfg.get_double("grad_skip");
  const std::uint64_t seed = cfg.get_uint("seed");

  const DatasetSplits data = procedural_splits(cfg.get_uint("data_seed"), cfg.get_uint("n_train"),
                                               cfg.get_uint("n_held_out"), mc.num_classes);
  Model model = Model::build(mc, seed);
  NesterovSgd opt(tensors_of(model.parameters()), sgd_from(cfg));
  std::mt19937_64 rng(seed ^ 0xD1CEu);

  CheckpointMeta meta{{"kind", "teacher"},
                      {"seed", std::to_string(seed)},
                      {"data_seed", cfg.get_string("data_seed")},
                      {"n_train", cfg.get_string("n_train")},
                      {"n_held_out", cfg.get_string("n_held_out")},
                      {"classes", cfg.get_string("classes")}};
  const fs::path ckpt = dir / "checkpoint.aktc";
  Appender metrics(dir / "metrics.jsonl");
  TeacherResult result;
  result.checkpoint = ckpt.string();
  std::size_t skipped = 0;

  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const float lr = sched.at(epoch);
    const auto order = permutation(data.train.size(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::span<const std::size_t> rows(order.data() + start,
                                              std::min(batch, order.size() - start));
      const Tensor x = data.train.gather(rows);
      const auto y = data.train.gather_labels(rows);
      GradTape tape;
      ForwardResult fr = model.forward(x, ForwardOptions{Mode::kTrain, std::nullopt, false});
      Tensor loss = cross_entropy(fr.logits, y);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite teacher loss at epoch " + std::to_string(epoch + 1) +
                           "; last good checkpoint kept at " + ckpt.string());
      }
      tape.backward(loss);
      const auto pred = argmax_rows(fr.logits);
      for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i] ? 1 : 0;
      seen += y.size();
      loss_sum += loss.item();
      ++steps;
      const double gn = grad_norm(opt.params());
      if (!std::isfinite(gn) || gn > grad_skip) {
        ++skipped;
      } else {
        opt.step(lr);
      }
      opt.zero_grad();
    }
    const double held = evaluate(model, data.held_out);
    result.held_out_curve.push_back(held);
    const double wall = ms_since(t0);
    MetricsRecord train{epoch + 1, "train", static_cast<double>(correct) / static_cast<double>(seen),
                        loss_sum / static_cast<double>(steps), std::nullopt, lr, wall, skipped};
    MetricsRecord heldout{epoch + 1, "held_out", held, std::nullopt, std::nullopt, lr, wall, skipped};
    metrics.line(to_json(train));
    metrics.line(to_json(heldout));
    meta["epoch"] = std::to_string(epoch + 1);
    meta["held_out_top1"] = std::to_string(held);
    save_checkpoint(model, ckpt.string(), meta);
  }
  result.held_out_top1 = result.held_out_curve.back();
  return result;
}

// --- distill -------------------------------------------------------------

DistillResult cmd_distill(const RunConfig& raw) {
  const RunConfig cfg = resolve_config(Command::kDistill, raw);
  const fs::path dir = open_run(Command::kDistill, cfg);

  const std::string teacher_path = cfg.get_string("teacher");
  LoadedCheckpoint teacher_ck = load_teacher(teacher_path);
  Model& teacher = teacher_ck.model;
  const LossConfig loss = loss_from(cfg);
  const Schedule sched = schedule_from(cfg);
  const std::uint64_t seed = cfg.get_uint("seed");
  const double grad_skip = cfg.get_double("grad_skip");

  QuantSpec qs;
  qs.weight_bits = static_cast<int>(cfg.get_int("w_bits"));
  qs.act_bits = static_cast<int>(cfg.get_int("a_bits"));
  qs.act_ema_momentum = static_cast<float>(cfg.get_double("act_ema_momentum"));
  qs.skip = cfg.get_list("quant_skip");

  std::vector<std::size_t> snapshot_epochs;
  for (const auto& s : cfg.get_list("snapshots")) {
    try {
      snapshot_epochs.push_back(std::stoul(s));
    } catch (const std::exception&) {
      throw ConfigError("snapshots: '" + s + "' is not an epoch number");
    }
  }

  // Held-out split: evaluation only.
  const DatasetSplits data = splits_from_meta(teacher_ck.meta);

  SynthRequest req;
  req.teacher_path = teacher_path;
  req.batch = cfg.get_uint("batch_size");
  req.steps = cfg.get_uint("synth_steps");
  req.lr_img = static_cast<float>(cfg.get_double("lr_img"));
  req.cache_dir = cfg.get_string("synth_cache");
  const std::size_t pool_size = cfg.get_uint("synth_batches");
  if (pool_size == 0 || req.batch == 0) throw ConfigError("synth_batches and batch_size must be positive");

  DistillResult result;
  std::vector<SynthBatch> pool;
  for (std::size_t i = 0; i < pool_size; ++i) {
    pool.push_back(synth_for(teacher, req, seed * 1000003ull + i, "synth"));
    if (!pool.back().monotone_start()) ++result.synth_flagged;
  }

  // Teacher outputs on the fixed pool.
  std::vector<ForwardResult> teacher_out;
  {
    NoGrad off;
    for (const SynthBatch& b : pool) {
      teacher_out.push_back(teacher.forward(b.images(), ForwardOptions{Mode::kEval, false, false}));
    }
  }

  Model student = quantize_model(teacher, qs);
  student.set_bn_frozen(true);
  {
    NoGrad off;
    for (const SynthBatch& b : pool) student.forward(b.images(), ForwardOptions{Mode::kEval, true, false});
  }
  result.teacher_top1 = evaluate(teacher, data.held_out);

  NesterovSgd opt(tensors_of(student.parameters()), sgd_from(cfg));
  std::mt19937_64 rng(seed ^ 0xB47C4u);
  Appender metrics(dir / "metrics.jsonl");
  Appender steps_log(dir / "steps.jsonl");
  Appender provenance(dir / "provenance.log");
  for (const SynthBatch& b : pool) provenance.line("pool batch=" + b.id());
  result.provenance_log = (dir / "provenance.log").string();

  CheckpointMeta meta{{"kind", "student"},
                      {"seed", std::to_string(seed)},
                      {"teacher", teacher_path},
                      {"mode", loss_mode_name(loss.mode)},
                      {"alpha", cfg.get_string("alpha")},
                      {"lambda", cfg.get_string("lambda")},
                      {"tau_logit", cfg.get_string("tau_logit")},
                      {"tau_feat", cfg.get_string("tau_feat")},
                      {"spatial_divergence", cfg.get_string("spatial_divergence")},
                      {"w_bits", std::to_string(qs.weight_bits)},
                      {"a_bits", std::to_string(qs.act_bits)}};
  for (const char* k : {"data_seed", "n_train", "n_held_out", "classes"}) meta[k] = teacher_ck.meta.at(k);

  const fs::path ckpt = dir / "checkpoint.aktc";
  std::size_t step_no = 0;
  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const float lr = sched.at(epoch);
    LossBreakdown mean_bd;
    double sp = 0.0, ch = 0.0, rfd = 0.0;
    bool has_rfd = false;
    const auto order = permutation(pool.size(), rng);
    for (std::size_t idx : order) {
      const SynthBatch& b = pool[idx];
      provenance.line("step=" + std::to_string(++step_no) + " epoch=" + std::to_string(epoch + 1) +
                      " batch=" + b.id());
      GradTape tape;
      ForwardResult fr = student.forward(b.images(), ForwardOptions{Mode::kTrain, true, false});
      std::vector<FeatureTap> taps;
      for (std::size_t i = 0; i < fr.taps.size(); ++i) {
        taps.push_back(FeatureTap{i, teacher_out[idx].taps[i], fr.taps[i]});
      }
      LossValue lv = akt_objective(teacher_out[idx].logits, fr.logits, taps, loss);
      if (!std::isfinite(lv.loss.item())) {
        throw NumericError("non-finite distillation loss at step " + std::to_string(step_no));
      }
      tape.backward(lv.loss);
      const double gn = grad_norm(opt.params());
      lv.breakdown.grad_norm = gn;
      if (!std::isfinite(gn) || gn > grad_skip) {
        ++result.skipped_steps;
      } else {
        opt.step(lr);
      }
      opt.zero_grad();

      json step;
      step["step"] = step_no;
      step["epoch"] = epoch + 1;
      step["batch"] = b.id();
      add_breakdown(step, lv.breakdown);
      steps_log.line(step.dump());

      mean_bd.l_kl += lv.breakdown.l_kl;
      mean_bd.l_akt += lv.breakdown.l_akt;
      mean_bd.grad_norm += gn;
      mean_bd.zero_spatial_maps += lv.breakdown.zero_spatial_maps;
      if (lv.breakdown.l_rfd) {
        has_rfd = true;
        sp += *lv.breakdown.l_sp;
        ch += *lv.breakdown.l_ch;
        rfd += *lv.breakdown.l_rfd;
      }
    }
    const double n = static_cast<double>(pool.size());
    mean_bd.l_kl /= n;
    mean_bd.l_akt /= n;
    mean_bd.grad_norm /= n;
    if (has_rfd) {
      mean_bd.l_sp = sp / n;
      mean_bd.l_ch = ch / n;
      mean_bd.l_rfd = rfd / n;
    }
    const double held = evaluate(student, data.held_out);
    result.held_out_curve.push_back(held);
    const double wall = ms_since(t0);
    metrics.line(to_json(MetricsRecord{epoch + 1, "train", std::nullopt, std::nullopt, mean_bd, lr,
                                       wall, result.skipped_steps}));
    metrics.line(to_json(MetricsRecord{epoch + 1, "held_out", held, std::nullopt, std::nullopt, lr,
                                       wall, result.skipped_steps}));
    meta["epoch"] = std::to_string(epoch + 1);
    meta["held_out_top1"] = std::to_string(held);
    if (std::find(snapshot_epochs.begin(), snapshot_epochs.end(), epoch + 1) != snapshot_epochs.end()) {
      fs::create_directories(dir / "snapshots");
      const fs::path snap = dir / "snapshots" / ("epoch_" + std::to_string(epoch + 1) + ".aktc");
      save_checkpoint(student, snap.string(), meta);
      result.snapshots.push_back(snap.string());
    }
    save_checkpoint(student, ckpt.string(), meta);
  }
  result.checkpoint = ckpt.string();
  result.final_top1 = result.held_out_curve.back();
  return result;
}

// --- eval ----------------------------------------------------------------

EvalResult cmd_eval(const RunConfig& raw) {
  const RunConfig cfg = resolve_config(Command::kEval, raw);
  const fs::path dir = open_run(Command::kEval, cfg);
  const std::string path = cfg.get_string("checkpoint");
  if (path.empty()) throw ConfigError("no checkpoint given (set checkpoint=<path>)");
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path + "' does not exist");
  LoadedCheckpoint ck = read_checkpoint(path);
  const DatasetSplits data = splits_from_meta(ck.meta);
  const std::string split = cfg.get_string("split");
  const ProceduralDataset* ds = nullptr;
  if (split == "held_out") ds = &data.held_out;
  else if (split == "train") ds = &data.train;
  else throw ConfigError("split must be 'train' or 'held_out', got '" + split + "'");

  const auto t0 = std::chrono::steady_clock::now();
  const auto pred = predict(ck.model, ds->images());
  EvalResult r;
  r.total = pred.size();
  std::ostringstream dump;
  dump << "index,label,prediction\r\n";
  for (std::size_t i = 0; i < pred.size(); ++i) {
    r.correct += pred[i] == ds->labels()[i] ? 1 : 0;
    dump << i << ',' << ds->labels()[i] << ',' << pred[i] << "\r\n";
  }
  r.top1 = top1_accuracy(pred, ds->labels());
  r.dump_path = in_run(dir, cfg.get_string("dump")).string();
  write_file(r.dump_path, dump.str());

  const std::size_t epoch = ck.meta.count("epoch") ? meta_size(ck.meta, "epoch") : 0;
  Appender metrics(dir / "metrics.jsonl");
  metrics.line(to_json(MetricsRecord{epoch, split, r.top1, std::nullopt, std::nullopt, 0.0, ms_since(t0), 0}));
  return r;
}

// --- curvature -----------------------------------------------------------

std::vector<CurvatureRow> cmd_curvature(const RunConfig& raw) {
  const RunConfig cfg = resolve_config(Command::kCurvature, raw);
  const fs::path dir = open_run(Command::kCurvature, cfg);
  const std::size_t probes = cfg.get_uint("probes");
  if (probes == 0) throw ConfigError("probes must be at least 1");
  const std::uint64_t probe_seed = cfg.get_uint("probe_seed");
  std::vector<CurvatureRow> rows;

  if (cfg.get_bool("self_test")) {
    const TraceEstimate est = quadratic_self_test(probes, probe_seed);
    rows.push_back({0, "quadratic", "fp", probes, est.mean_trace, est.std_dev(), ""});
  } else {
    const std::string teacher_path = cfg.get_string("teacher");
    LoadedCheckpoint teacher_ck = load_teacher(teacher_path);
    const auto checkpoints = cfg.get_list("checkpoints");
    if (checkpoints.empty()) throw ConfigError("no student checkpoints given (set checkpoints=a,b,...)");
    SynthRequest req;
    req.teacher_path = teacher_path;
    req.batch = cfg.get_uint("batch_size");
    req.steps = cfg.get_uint("synth_steps");
    req.lr_img = static_cast<float>(cfg.get_double("lr_img"));
    req.cache_dir = cfg.get_string("synth_cache");
    const SynthBatch batch = synth_for(teacher_ck.model, req, cfg.get_uint("batch_seed"), "curv");
    for (const auto& path : checkpoints) {
      if (!fs::exists(path)) throw ConfigError("student checkpoint '" + path + "' does not exist");
      LoadedCheckpoint st = read_checkpoint(path);
      const LossConfig loss = loss_from_meta(st.meta);
      StudentLossSurface surface(st.model, teacher_ck.model, batch, loss,
                                 cfg.get_bool("linearize"));
      const TraceEstimate est = hutchinson_trace(surface.as_function(), surface.weights(), probes,
                                                 probe_seed, 0.0, surface.names());
      rows.push_back({meta_size(st.meta, "epoch"), meta_str(st.meta, "mode"),
                      bits_label(std::stoi(meta_str(st.meta, "w_bits")),
                                 std::stoi(meta_str(st.meta, "a_bits"))),
                      probes, est.mean_trace, est.std_dev(), path});
    }
  }
  write_file(in_run(dir, cfg.get_string("output")), curvature_csv(rows));
  return rows;
}

std::string curvature_csv(const std::vector<CurvatureRow>& rows) {
  auto field = [](const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  std::string out = "epoch,loss_mode,bits,M,mean_trace,std\r\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + field(r.loss_mode) + "," + field(r.bits) + "," +
           std::to_string(r.probes) + "," + num(r.mean_trace) + "," + num(r.std) + "\r\n";
  }
  return out;
}

ProvenanceAudit audit_provenance(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read provenance log '" + path + "'");
  ProvenanceAudit audit;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto at = line.find("batch=");
    const bool synth = at != std::string::npos && line.compare(at + 6, 6, "synth:") == 0 &&
                       line.find("dataset") == std::string::npos;
    if (synth) {
      ++audit.synth_refs;
    } else {
      ++audit.dataset_refs;
      audit.offending_lines.push_back(line);
    }
  }
  return audit;
}

}  // namespace akt
