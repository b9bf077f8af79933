#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "stream4d/cli.hpp"
#include "support/fixtures.hpp"

using namespace stream4d;
namespace fs = std::filesystem;

namespace {

using stream4d::testing::tiny_config;

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("stream4d_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

struct Result {
  int code;
  std::string out, err;
};

Result invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> tiny_model_flags() {
  return {"--height", "8",          "--width", "8",      "--patch",         "4", "--dim",  "8",  "--layers",         "1",
          "--heads",  "2",          "--max-frames", "6", "--mlp-ratio",     "2", "--head-channels", "4",
          "--up1",    "2",          "--up2",   "2",      "--track-features", "3"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

fs::path tiny_data(const fs::path& dir, std::size_t scenes = 2, std::size_t frames = 5) {
  const auto data = dir / "data";
  const auto r = invoke({"gen", "--out", data.string(), "--scenes", std::to_string(scenes), "--frames", std::to_string(frames),
                      "--height", "8", "--width", "8", "--tracks", "4", "--seed", "40"});
  EXPECT_EQ(r.code, 0) << r.err;
  return data;
}

fs::path tiny_checkpoint(const fs::path& dir, std::uint64_t seed = 3) {
  const auto path = dir / "model.ckpt";
  Model<float>(tiny_config(), seed).save(path);
  return path;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(f, line);) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST(Cli, GenWritesReproducibleSequences) {
  const auto a = tiny_data(scratch("gen_a"), 3, 4);
  const auto b = tiny_data(scratch("gen_b"), 3, 4);
  const auto files = synth::list_dataset(a);
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[0].filename(), "scene_0040.s4d");
  for (const auto& f : files) {
    EXPECT_EQ(slurp(f), slurp(b / f.filename()));
    const auto s = synth::read_sequence(f);
    EXPECT_EQ(s.frames.size(), 4u);
    EXPECT_EQ(s.height, 8u);
    EXPECT_EQ(s.tracks, 4u);
  }
}

TEST(Cli, StreamingMatchesFullCausalPass) {
  const auto dir = scratch("stream");
  const auto data = tiny_data(dir, 2, 6);
  const auto ckpt = tiny_checkpoint(dir);
  auto r = invoke({"stream", "--ckpt", ckpt.string(), "--data", data.string(), "--out", (dir / "s").string(), "--timings-csv",
                (dir / "t.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = invoke({"stream", "--offline", "--ckpt", ckpt.string(), "--data", data.string(), "--out", (dir / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& f : synth::list_dataset(data)) {
    const auto name = f.stem().string() + ".pred";
    const auto s = read_predictions(dir / "s" / name), o = read_predictions(dir / "o" / name);
    ASSERT_EQ(s.frames.size(), 6u);
    ASSERT_EQ(o.frames.size(), 6u);
    for (std::size_t t = 0; t < 6; ++t) {
      EXPECT_LT(max_abs_diff(s.frames[t].points, o.frames[t].points), 1e-4);
      EXPECT_LT(max_abs_diff(s.frames[t].depth, o.frames[t].depth), 1e-4);
      EXPECT_LT(max_abs_diff(s.frames[t].tracks, o.frames[t].tracks), 1e-4);
      const auto ps = s.frames[t].pose.to_array(), po = o.frames[t].pose.to_array();
      for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_NEAR(ps[i], po[i], 1e-4);
    }
  }
  const auto rows = csv_rows(dir / "t.csv");
  ASSERT_EQ(rows.size(), 1u + 2u * 6u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"sequence", "frame", "seconds"}));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][1], std::to_string((i - 1) % 6 + 1));
    EXPECT_GT(std::stod(rows[i][2]), 0.0);
  }
}

TEST(Cli, EmitPlyWritesOneCloudPerFrame) {
  const auto dir = scratch("ply");
  const auto data = tiny_data(dir, 1, 3);
  const auto r = invoke({"stream", "--emit-ply", "--ckpt", tiny_checkpoint(dir).string(), "--data", data.string(), "--out",
                      (dir / "p").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (int f = 1; f <= 3; ++f) {
    const auto ply = slurp(dir / "p" / ("scene_0040_frame00" + std::to_string(f) + ".ply"));
    EXPECT_EQ(ply.rfind("ply\n", 0), 0u);
    EXPECT_NE(ply.find("element vertex 64\n"), std::string::npos);
  }
}

TEST(Cli, EvalOfGroundTruthIsPerfect) {
  const auto dir = scratch("eval");
  const auto data = tiny_data(dir, 2, 5);
  fs::create_directories(dir / "gt");
  for (const auto& f : synth::list_dataset(data))
    write_predictions(dir / "gt" / (f.stem().string() + ".pred"), predictions_from_ground_truth(synth::read_sequence(f)));
  const auto r = invoke({"eval", "--pred", (dir / "gt").string(), "--data", data.string(), "--report", (dir / "r.txt").string(),
                      "--csv", (dir / "r.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = slurp(dir / "r.txt");
  EXPECT_NE(text.find("sequences = 2\n"), std::string::npos);
  EXPECT_NE(text.find("cloud.acc_mean = 0\n"), std::string::npos);
  EXPECT_NE(text.find("depth.abs_rel = 0\n"), std::string::npos);
  EXPECT_NE(text.find("pose.auc30 = 1\n"), std::string::npos);
  const auto rows = csv_rows(dir / "r.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].size(), rows[1].size());
}

TEST(Cli, EvalRequiresPredictionsForEverySequence) {
  const auto dir = scratch("eval_missing");
  const auto data = tiny_data(dir, 2, 3);
  fs::create_directories(dir / "p");
  const auto f = synth::list_dataset(data).front();
  write_predictions(dir / "p" / (f.stem().string() + ".pred"), predictions_from_ground_truth(synth::read_sequence(f)));
  const auto r = invoke({"eval", "--pred", (dir / "p").string(), "--data", data.string()});
  EXPECT_EQ(r.code, cli::kValidation);
  EXPECT_NE(r.err.find("scene_0041"), std::string::npos);
}

TEST(Cli, TrainFromConfigIsDeterministic) {
  const auto dir = scratch("train");
  const auto data = tiny_data(dir, 2, 5);
  std::ofstream(dir / "run.cfg") << "[train]\nepochs = 2\nsteps-per-epoch = 3\nframes-per-sample = 4\nseed = 9\n";
  for (const char* name : {"a", "b"}) {
    const auto r = invoke(concat({"--config", (dir / "run.cfg").string(), "train", "--teacher", "--data", data.string(), "--out",
                               (dir / (std::string(name) + ".ckpt")).string(), "--log", (dir / (std::string(name) + ".csv")).string()},
                              tiny_model_flags()));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_TRUE(fs::exists(dir / "a.epoch1.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "a.epoch2.ckpt"));
  EXPECT_EQ(csv_rows(dir / "a.csv").size(), 1u + 6u);
}

TEST(Cli, StudentDistillsFromTeacherCheckpoint) {
  const auto dir = scratch("student");
  const auto data = tiny_data(dir, 2, 4);
  const auto teacher = tiny_checkpoint(dir);
  const auto before = slurp(teacher);
  const auto r = invoke({"train", "--student", "--distill", "--teacher-ckpt", teacher.string(), "--data", data.string(), "--out",
                      (dir / "s.ckpt").string(), "--epochs", "1", "--steps-per-epoch", "2", "--frames-per-sample", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(teacher), before);
  EXPECT_EQ(Model<float>::read_config(dir / "s.ckpt"), tiny_config());
  EXPECT_NE(slurp(dir / "s.ckpt"), before);
}

TEST(Cli, BenchReportsAllLengths) {
  const auto dir = scratch("bench");
  const auto r = invoke(concat({"bench", "--T", "1,3,6", "--reps", "3", "--csv", (dir / "b.csv").string()}, tiny_model_flags()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(dir / "b.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"T", "streaming_s", "full_reprocess_s", "full_causal_s", "ratio"}));
  EXPECT_EQ(rows[1][0], "1");
  EXPECT_EQ(rows[3][0], "6");
  for (std::size_t i = 1; i < rows.size(); ++i)
    for (std::size_t c = 1; c < 5; ++c) EXPECT_GT(std::stod(rows[i][c]), 0.0);
}

TEST(Cli, BenchSingleFrameCostsMatch) {
  ModelConfig mc;
  const auto rows = cli::bench(Model<float>(mc, 1), {1}, 7, 2);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_GT(rows[0].ratio(), 0.5);
  EXPECT_LT(rows[0].ratio(), 2.0);
  EXPECT_DOUBLE_EQ(rows[0].full_causal, rows[0].full_reprocess);
}

TEST(Cli, UnknownConfigKeyIsRejected) {
  const auto dir = scratch("badcfg");
  const auto data = tiny_data(dir, 1, 3);
  std::ofstream(dir / "bad.cfg") << "[train]\nepochs = 1\nlearning_rate = 3\n";
  auto r = invoke({"--config", (dir / "bad.cfg").string(), "train", "--teacher", "--data", data.string(), "--out",
                (dir / "x.ckpt").string()});
  EXPECT_EQ(r.code, cli::kValidation);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "x.ckpt"));
  std::ofstream(dir / "flat.cfg") << "epochs = 1\n";
  r = invoke({"--config", (dir / "flat.cfg").string(), "train", "--teacher", "--data", data.string(), "--out", (dir / "x.ckpt").string()});
  EXPECT_EQ(r.code, cli::kValidation);
}

TEST(Cli, ExitCodesSeparateValidationFromRuntimeFailures) {
  const auto dir = scratch("codes");
  const auto data = tiny_data(dir, 1, 3);
  const auto ckpt = tiny_checkpoint(dir);
  EXPECT_EQ(invoke({}).code, cli::kValidation);
  EXPECT_EQ(invoke({"frobnicate"}).code, cli::kValidation);
  EXPECT_EQ(invoke({"gen"}).code, cli::kValidation);
  EXPECT_EQ(invoke({"gen", "--out", (dir / "g").string(), "--scenes", "many"}).code, cli::kValidation);
  EXPECT_EQ(invoke({"train", "--data", data.string(), "--out", (dir / "x.ckpt").string()}).code, cli::kValidation);
  EXPECT_EQ(invoke({"train", "--teacher", "--student", "--data", data.string(), "--out", (dir / "x.ckpt").string()}).code,
            cli::kValidation);
  EXPECT_EQ(invoke({"train", "--student", "--data", data.string(), "--out", (dir / "x.ckpt").string()}).code, cli::kValidation);
  EXPECT_EQ(invoke({"train", "--teacher", "--distill", "--teacher-ckpt", ckpt.string(), "--data", data.string(), "--out",
                 (dir / "x.ckpt").string()})
                .code,
            cli::kValidation);
  EXPECT_EQ(invoke({"train", "--teacher", "--lr", "-1", "--data", data.string(), "--out", (dir / "x.ckpt").string()}).code,
            cli::kValidation);
  EXPECT_EQ(invoke({"stream", "--ckpt", (dir / "none.ckpt").string(), "--data", data.string(), "--out", (dir / "o").string()}).code,
            cli::kValidation);
  EXPECT_EQ(invoke({"bench", "--T", "0"}).code, cli::kValidation);
  EXPECT_EQ(invoke({"bench", "--T", "49"}).code, cli::kValidation);
  // Checkpoint config does not match the 32x32 default data.
  const auto big = scratch("codes_big");
  ASSERT_EQ(invoke({"gen", "--out", (big / "d").string(), "--scenes", "1", "--frames", "2"}).code, 0);
  EXPECT_EQ(invoke({"stream", "--ckpt", ckpt.string(), "--data", (big / "d").string(), "--out", (dir / "o").string()}).code,
            cli::kValidation);
  std::ofstream(dir / "junk.ckpt") << "junk";
  EXPECT_EQ(invoke({"stream", "--ckpt", (dir / "junk.ckpt").string(), "--data", data.string(), "--out", (dir / "o").string()}).code,
            cli::kRuntime);
  std::ofstream(dir / "data" / "broken.s4d") << "S4D";
  EXPECT_EQ(invoke({"stream", "--ckpt", ckpt.string(), "--data", data.string(), "--out", (dir / "o").string()}).code, cli::kRuntime);
}

TEST(Cli, HelpSucceeds) {
  const auto r = invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("stream"), std::string::npos);
}
