#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stream4d/evaluation.hpp"
#include "stream4d/training.hpp"

namespace stream4d::cli {

enum Exit : int { kOk = 0, kValidation = 1, kRuntime = 2 };

/// A problem with the command line, config file or inputs, detected before any work.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

inline void require_exists(const fs::path& p, const char* what) {
  if (p.empty()) throw ValidationError(std::string(what) + " path is required");
  if (!fs::exists(p)) throw ValidationError(std::string(what) + " not found: " + p.string());
}

inline void require_parent(const fs::path& p, const char* what) {
  if (p.empty()) throw ValidationError(std::string(what) + " path is required");
  const auto dir = p.parent_path();
  if (!dir.empty() && !fs::is_directory(dir)) throw ValidationError(std::string(what) + " directory does not exist: " + dir.string());
}

inline std::vector<synth::Sequence> load_dataset(const fs::path& dir) {
  std::vector<synth::Sequence> out;
  for (const auto& f : synth::list_dataset(dir)) out.push_back(synth::read_sequence(f));
  return out;
}

inline void require_dims(const ModelConfig& mc, const synth::Sequence& s, const std::string& name) {
  if (s.height != mc.image_h || s.width != mc.image_w)
    throw ValidationError("sequence " + name + " is " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                          " but the checkpoint expects " + std::to_string(mc.image_h) + "x" + std::to_string(mc.image_w));
  if (s.frames.size() > mc.max_frames)
    throw ValidationError("sequence " + name + " has " + std::to_string(s.frames.size()) + " frames, more than max_frames " +
                          std::to_string(mc.max_frames));
}

inline PredictionFile to_file(const std::vector<PredictionSet>& sets, const ModelConfig& mc, std::size_t tracks) {
  return {mc.image_h, mc.image_w, tracks, sets};
}

/// Per-frame streaming inference; frame t is handed to the model only at step t.
inline PredictionFile stream_sequence(const Model<float>& m, const synth::Sequence& s, std::vector<double>* seconds = nullptr) {
  NoGradScope<float> no_grad;
  const Tensor<float> queries = s.frames.front().tracks;
  auto session = m.start_session(queries);
  std::vector<PredictionSet> sets;
  for (const auto& f : s.frames) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto pr = m.stream_step(f.image, session);
    const auto t1 = std::chrono::steady_clock::now();
    if (seconds) seconds->push_back(std::chrono::duration<double>(t1 - t0).count());
    sets.push_back(to_prediction_sets(pr, m.config()).front());
  }
  return to_file(sets, m.config(), s.tracks);
}

/// One causal forward pass over the whole sequence.
inline PredictionFile offline_sequence(const Model<float>& m, const synth::Sequence& s,
                                       TemporalMask mode = TemporalMask::Causal) {
  NoGradScope<float> no_grad;
  std::vector<const Tensor<float>*> images;
  for (const auto& f : s.frames) images.push_back(&f.image);
  const auto pr = m.forward(images, s.frames.front().tracks, mode);
  return to_file(to_prediction_sets(pr, m.config()), m.config(), s.tracks);
}

struct BenchRow {
  std::size_t frames = 0;
  double streaming = 0, full_reprocess = 0, full_causal = 0;
  double ratio() const { return streaming / full_reprocess; }
};

/// Last-frame latency at each sequence length, median over repetitions:
/// streaming = one cached step after T−1 earlier steps; full-reprocess = a
/// causal forward over all T frames (what an uncached online model repeats
/// every frame); full-causal = that pass amortized per frame.
inline std::vector<BenchRow> bench(const Model<float>& m, std::vector<std::size_t> lengths, std::size_t reps, std::uint64_t seed,
                                   std::size_t queries = 16) {
  if (lengths.empty() || reps == 0) throw ContractError("bench: need at least one length and one repetition");
  std::sort(lengths.begin(), lengths.end());
  const std::size_t tmax = lengths.back();
  const auto& mc = m.config();
  if (lengths.front() == 0 || tmax > mc.max_frames) throw ContractError("bench: lengths must be in 1..max_frames");
  std::mt19937_64 rng(seed);
  std::vector<Tensor<float>> images;
  for (std::size_t i = 0; i < tmax; ++i) images.push_back(Tensor<float>::uniform({3, mc.image_h, mc.image_w}, rng, 0.0f, 1.0f));
  Tensor<float> q({queries, 2});
  std::uniform_real_distribution<float> ux(0.0f, static_cast<float>(mc.image_w - 1)), uy(0.0f, static_cast<float>(mc.image_h - 1));
  for (std::size_t j = 0; j < queries; ++j) {
    q.at(j, 0) = ux(rng);
    q.at(j, 1) = uy(rng);
  }
  NoGradScope<float> no_grad;
  using clock = std::chrono::steady_clock;
  std::vector<std::vector<double>> stream(lengths.size()), full(lengths.size());
  for (std::size_t r = 0; r < reps; ++r) {
    auto session = m.start_session(q);
    for (std::size_t t = 1, k = 0; t <= tmax; ++t) {
      const auto t0 = clock::now();
      (void)m.stream_step(images[t - 1], session);
      const double dt = std::chrono::duration<double>(clock::now() - t0).count();
      if (k < lengths.size() && lengths[k] == t) stream[k++].push_back(dt);
    }
    for (std::size_t k = 0; k < lengths.size(); ++k) {
      std::vector<const Tensor<float>*> prefix;
      for (std::size_t i = 0; i < lengths[k]; ++i) prefix.push_back(&images[i]);
      const auto t0 = clock::now();
      (void)m.forward(prefix, q, TemporalMask::Causal);
      full[k].push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
  }
  std::vector<BenchRow> rows;
  for (std::size_t k = 0; k < lengths.size(); ++k) {
    const double f = metrics::median(full[k]);
    rows.push_back({lengths[k], metrics::median(stream[k]), f, f / static_cast<double>(lengths[k])});
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "T,streaming_s,full_reprocess_s,full_causal_s,ratio\n" << std::setprecision(9);
  for (const auto& r : rows)
    os << r.frames << ',' << r.streaming << ',' << r.full_reprocess << ',' << r.full_causal << ',' << r.ratio() << '\n';
}

struct ModelFlags {
  ModelConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--height", cfg.image_h, "Image height")->capture_default_str();
    app->add_option("--width", cfg.image_w, "Image width")->capture_default_str();
    app->add_option("--patch", cfg.patch, "Patch size")->capture_default_str();
    app->add_option("--dim", cfg.dim, "Token channels")->capture_default_str();
    app->add_option("--layers", cfg.layers, "Spatial/temporal layer pairs")->capture_default_str();
    app->add_option("--heads", cfg.heads, "Attention heads")->capture_default_str();
    app->add_option("--max-frames", cfg.max_frames, "Longest sequence")->capture_default_str();
    app->add_option("--mlp-ratio", cfg.mlp_ratio, "MLP expansion")->capture_default_str();
    app->add_option("--head-channels", cfg.head_channels, "Geometry head channels")->capture_default_str();
    app->add_option("--up1", cfg.up1, "First upsampling factor")->capture_default_str();
    app->add_option("--up2", cfg.up2, "Second upsampling factor")->capture_default_str();
    app->add_option("--track-features", cfg.track_features, "Track feature channels")->capture_default_str();
  }
};

/// Parses and runs one command. Output goes to `out`, diagnostics to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Streaming 4D reconstruction toolkit", "stream4d"};
  app.set_config("--config", "", "Key-value config file with one [section] per command");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Render a synthetic dataset");
  fs::path gen_out;
  std::size_t gen_scenes = 5, gen_frames = 10, gen_h = 32, gen_w = 32, gen_tracks = 16;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", gen_scenes, "Number of sequences")->capture_default_str();
  gen->add_option("--frames", gen_frames, "Frames per sequence")->capture_default_str();
  gen->add_option("--height", gen_h, "Image height")->capture_default_str();
  gen->add_option("--width", gen_w, "Image width")->capture_default_str();
  gen->add_option("--tracks", gen_tracks, "Track queries per sequence")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Seed of the first scene")->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a teacher or a student");
  ModelFlags train_model;
  train_model.add(train_cmd);
  TrainConfig tc;
  LossWeights lw;
  fs::path tr_data, tr_out, tr_log, tr_init, tr_teacher;
  bool as_teacher = false, as_student = false;
  std::uint64_t init_seed = 0;
  auto* teacher_flag = train_cmd->add_flag("--teacher", as_teacher, "Train the global-attention teacher");
  auto* student_flag = train_cmd->add_flag("--student", as_student, "Train the causal student");
  teacher_flag->excludes(student_flag);
  train_cmd->add_flag("--distill", tc.distill, "Supervise the student with teacher outputs");
  train_cmd->add_option("--data", tr_data, "Dataset directory or .s4d file")->required();
  train_cmd->add_option("--out", tr_out, "Final checkpoint path")->required();
  train_cmd->add_option("--log", tr_log, "Per-step CSV log");
  train_cmd->add_option("--init", tr_init, "Initial weights (student default: --teacher-ckpt)");
  train_cmd->add_option("--teacher-ckpt", tr_teacher, "Frozen teacher checkpoint for distillation");
  train_cmd->add_option("--init-seed", init_seed, "Seed for fresh weights")->capture_default_str();
  train_cmd->add_option("--epochs", tc.epochs)->capture_default_str();
  train_cmd->add_option("--steps-per-epoch", tc.steps_per_epoch)->capture_default_str();
  train_cmd->add_option("--frames-per-sample", tc.frames_per_sample)->capture_default_str();
  train_cmd->add_option("--lr", tc.peak_lr, "Peak learning rate")->capture_default_str();
  train_cmd->add_option("--warmup", tc.warmup_fraction, "Warmup fraction of all steps")->capture_default_str();
  train_cmd->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
  train_cmd->add_option("--seed", tc.seed, "Sampling seed")->capture_default_str();
  train_cmd->add_option("--blend", tc.pseudo_gt_blend, "Pseudo-GT weight in [0, 1]")->capture_default_str();
  train_cmd->add_flag("--freeze-encoder", tc.freeze_encoder, "Keep the patch embedding fixed");
  train_cmd->add_option("--lambda-track", lw.lambda_track)->capture_default_str();
  train_cmd->add_option("--alpha", lw.alpha, "Confidence regularizer weight")->capture_default_str();
  train_cmd->add_option("--huber-delta", lw.huber_delta)->capture_default_str();

  // stream
  auto* stream_cmd = app.add_subcommand("stream", "Run per-frame streaming inference");
  fs::path st_ckpt, st_data, st_out, st_timings;
  bool st_ply = false, st_offline = false;
  stream_cmd->add_option("--ckpt", st_ckpt, "Model checkpoint")->required();
  stream_cmd->add_option("--data", st_data, "Dataset directory or .s4d file")->required();
  stream_cmd->add_option("--out", st_out, "Output directory for .pred files")->required();
  stream_cmd->add_flag("--emit-ply", st_ply, "Write one PLY point cloud per frame");
  stream_cmd->add_option("--timings-csv", st_timings, "Per-frame latency CSV");
  stream_cmd->add_flag("--offline", st_offline, "One full causal pass per sequence instead of streaming");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Last-frame latency: streaming vs full reprocessing");
  ModelFlags bench_model;
  bench_model.add(bench_cmd);
  fs::path b_ckpt, b_csv;
  std::vector<std::size_t> b_lengths = {1, 10, 20, 30, 40};
  std::size_t b_reps = 3;
  std::uint64_t b_seed = 0;
  bench_cmd->add_option("--ckpt", b_ckpt, "Checkpoint (default: random weights)");
  bench_cmd->add_option("--T", b_lengths, "Sequence lengths")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--reps", b_reps, "Repetitions (median reported)")->capture_default_str();
  bench_cmd->add_option("--seed", b_seed)->capture_default_str();
  bench_cmd->add_option("--csv", b_csv, "CSV output (default: stdout)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
  fs::path ev_pred, ev_data, ev_report, ev_csv;
  eval_cmd->add_option("--pred", ev_pred, "Directory of .pred files")->required();
  eval_cmd->add_option("--data", ev_data, "Dataset directory or .s4d file")->required();
  eval_cmd->add_option("--report", ev_report, "Key-value report file (default: stdout)");
  eval_cmd->add_option("--csv", ev_csv, "Metrics CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  }

  try {
    if (gen->parsed()) {
      if (gen_scenes == 0 || gen_frames == 0) throw ValidationError("--scenes and --frames must be > 0");
      if (gen_h == 0 || gen_w == 0) throw ValidationError("--height and --width must be > 0");
      fs::create_directories(gen_out);
      for (std::size_t i = 0; i < gen_scenes; ++i) {
        const auto spec = synth::random_scene(gen_seed + i, gen_frames, gen_h, gen_w, gen_tracks);
        std::ostringstream name;
        name << "scene_" << std::setw(4) << std::setfill('0') << gen_seed + i << ".s4d";
        synth::write_sequence(gen_out / name.str(), synth::render_sequence(spec));
      }
      out << "wrote " << gen_scenes << " sequences to " << gen_out.string() << '\n';
      return kOk;
    }

    if (train_cmd->parsed()) {
      if (!as_teacher && !as_student) throw ValidationError("choose --teacher or --student");
      tc.role = as_teacher ? TrainRole::Teacher : TrainRole::Student;
      require_exists(tr_data, "dataset");
      require_parent(tr_out, "checkpoint");
      if (!tr_log.empty()) require_parent(tr_log, "log");
      if (tc.distill && tr_teacher.empty()) throw ValidationError("--distill needs --teacher-ckpt");
      if (!tr_teacher.empty()) require_exists(tr_teacher, "teacher checkpoint");
      if (tr_init.empty() && as_student) tr_init = tr_teacher;
      if (!tr_init.empty()) require_exists(tr_init, "initial checkpoint");
      ModelConfig mc = tr_init.empty() ? train_model.cfg : Model<float>::read_config(tr_init);
      mc.validate();
      tc.validate(mc);
      lw.validate();
      const auto data = load_dataset(tr_data);
      for (std::size_t i = 0; i < data.size(); ++i) require_dims(mc, data[i], std::to_string(i));
      Model<float> model = tr_init.empty() ? Model<float>(mc, init_seed) : Model<float>::load(tr_init);
      std::optional<Model<float>> teacher;
      if (tc.distill) {
        teacher.emplace(Model<float>::load(tr_teacher));
        if (!(teacher->config() == mc)) throw ValidationError("teacher and student checkpoints have different configurations");
      }
      const auto hist = train(model, tc, lw, data, {tr_out, tr_log}, teacher ? &*teacher : nullptr);
      out << "trained " << hist.size() << " steps; final L_total " << hist.back().total << "; wrote " << tr_out.string() << '\n';
      return kOk;
    }

    if (stream_cmd->parsed()) {
      require_exists(st_ckpt, "checkpoint");
      require_exists(st_data, "dataset");
      if (!st_timings.empty()) require_parent(st_timings, "timings CSV");
      const auto files = synth::list_dataset(st_data);
      const auto model = Model<float>::load(st_ckpt);
      std::vector<synth::Sequence> seqs;
      for (const auto& f : files) {
        seqs.push_back(synth::read_sequence(f));
        require_dims(model.config(), seqs.back(), f.filename().string());
      }
      fs::create_directories(st_out);
      std::ofstream timings;
      if (!st_timings.empty()) {
        timings.open(st_timings);
        if (!timings) throw io::IoError("cannot open " + st_timings.string());
        timings << "sequence,frame,seconds\n" << std::setprecision(9);
      }
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        const std::string stem = files[i].stem().string();
        std::vector<double> secs;
        const auto pred = st_offline ? offline_sequence(model, seqs[i]) : stream_sequence(model, seqs[i], &secs);
        write_predictions(st_out / (stem + ".pred"), pred);
        if (timings.is_open())
          for (std::size_t f = 0; f < secs.size(); ++f) timings << stem << ',' << f + 1 << ',' << secs[f] << '\n';
        if (st_ply)
          for (std::size_t f = 0; f < pred.frames.size(); ++f) {
            std::ostringstream name;
            name << stem << "_frame" << std::setw(3) << std::setfill('0') << f + 1 << ".ply";
            const Tensor<float> all(seqs[i].frames[f].depth.shape(), 1.0f);
            synth::write_ply(st_out / name.str(), pred.frames[f].points, seqs[i].frames[f].image, all, &pred.frames[f].point_conf);
          }
      }
      if (timings.is_open() && !timings) throw io::IoError("write failed: " + st_timings.string());
      out << (st_offline ? "processed " : "streamed ") << seqs.size() << " sequences to " << st_out.string() << '\n';
      return kOk;
    }

    if (bench_cmd->parsed()) {
      if (!b_ckpt.empty()) require_exists(b_ckpt, "checkpoint");
      if (!b_csv.empty()) require_parent(b_csv, "CSV");
      if (b_reps == 0) throw ValidationError("--reps must be > 0");
      const Model<float> model = b_ckpt.empty() ? Model<float>(bench_model.cfg, b_seed) : Model<float>::load(b_ckpt);
      for (std::size_t t : b_lengths)
        if (t == 0 || t > model.config().max_frames)
          throw ValidationError("--T value " + std::to_string(t) + " outside 1.." + std::to_string(model.config().max_frames));
      const auto rows = bench(model, b_lengths, b_reps, b_seed);
      if (b_csv.empty()) {
        write_bench_csv(out, rows);
      } else {
        std::ofstream f(b_csv);
        if (!f) throw io::IoError("cannot open " + b_csv.string());
        write_bench_csv(f, rows);
        if (!f) throw io::IoError("write failed: " + b_csv.string());
      }
      return kOk;
    }

    if (eval_cmd->parsed()) {
      require_exists(ev_pred, "prediction directory");
      require_exists(ev_data, "dataset");
      if (!ev_report.empty()) require_parent(ev_report, "report");
      if (!ev_csv.empty()) require_parent(ev_csv, "CSV");
      std::vector<metrics::Report> reports;
      for (const auto& f : synth::list_dataset(ev_data)) {
        const auto p = ev_pred / (f.stem().string() + ".pred");
        if (!fs::exists(p)) throw ValidationError("no predictions for " + f.filename().string() + " (expected " + p.string() + ")");
        reports.push_back(evaluate_sequence(read_predictions(p), synth::read_sequence(f)));
      }
      auto summary = mean_report(reports);
      summary.values.insert(summary.values.begin(), {"sequences", static_cast<double>(reports.size())});
      if (ev_report.empty()) {
        summary.write_text(out);
      } else {
        std::ofstream f(ev_report);
        if (!f) throw io::IoError("cannot open " + ev_report.string());
        summary.write_text(f);
      }
      if (!ev_csv.empty()) {
        std::ofstream f(ev_csv);
        if (!f) throw io::IoError("cannot open " + ev_csv.string());
        summary.write_csv(f);
      }
      return kOk;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kValidation;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv = {"stream4d"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace stream4d::cli
