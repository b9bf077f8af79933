#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "stream4d/synth.hpp"

using namespace stream4d;
using namespace stream4d::synth;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("stream4d_test_synth_" + name);
}

SceneSpec single_sphere(std::size_t frames) {
  SceneSpec s;
  s.frames = frames;
  s.height = s.width = 16;
  s.tracks = 6;
  Primitive sphere;
  sphere.center = {0.2, -0.1, 3.0};
  sphere.half = Eigen::Vector3d::Constant(1.2);
  s.primitives = {sphere};
  s.trajectory = {Keyframe{}};
  return s;
}

bool same_frames(const SceneFrameGT& a, const SceneFrameGT& b) {
  return a.image == b.image && a.depth == b.depth && a.points == b.points && a.valid == b.valid &&
         a.tracks == b.tracks && a.visibility == b.visibility && a.pose.to_array() == b.pose.to_array();
}

bool same_sequence(const Sequence& a, const Sequence& b) {
  if (a.frames.size() != b.frames.size() || a.height != b.height || a.width != b.width || a.tracks != b.tracks) return false;
  for (std::size_t i = 0; i < a.frames.size(); ++i)
    if (!same_frames(a.frames[i], b.frames[i])) return false;
  return a.anchor.to_array() == b.anchor.to_array();
}

// Largest |unproject(D) − P| over valid pixels of every frame.
double consistency_error(const Sequence& seq) {
  double worst = 0;
  for (const auto& f : seq.frames) {
    const auto p = unproject(f.depth, f.pose);
    const std::size_t n = f.valid.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (f.valid[i] == 0) continue;
      for (int c = 0; c < 3; ++c) worst = std::max(worst, double(std::abs(p[c * n + i] - f.points[c * n + i])));
    }
  }
  return worst;
}

}  // namespace

TEST(Unproject, CenterPixelAtUnitDepth) {
  Tensor<float> d({33, 33}, 1.0f);
  const auto p = unproject(d, CameraPose::identity({1.0, 1.0}));
  const std::size_t c = 16 * 33 + 16, n = 33 * 33;
  EXPECT_NEAR(p[c], 0.0f, 1e-7);
  EXPECT_NEAR(p[n + c], 0.0f, 1e-7);
  EXPECT_NEAR(p[2 * n + c], 1.0f, 1e-7);
}

TEST(Unproject, ProjectRoundTrip) {
  std::mt19937_64 rng(1);
  const auto d = Tensor<float>::uniform({12, 16}, rng, 0.5f, 6.0f);
  CameraPose pose;
  pose.translation = {0.3, -0.2, 0.5};
  pose.set_rotation(yaw_pitch(0.3, -0.1));
  pose.fov = {1.1, 0.9};
  const auto p = unproject(d, pose);
  const auto k = Intrinsics::from_fov(pose.fov, 16, 12);
  const std::size_t n = 12 * 16;
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      const std::size_t i = y * 16 + x;
      // Point maps are float32; project from the stored values.
      const auto uvz = project_point({p[i], p[n + i], p[2 * n + i]}, pose, k);
      ASSERT_NEAR(uvz.x(), double(x), 1e-4);
      ASSERT_NEAR(uvz.y(), double(y), 1e-4);
      // In double precision the pair inverts to 1e-6.
      const auto x64 = unproject_pixel(double(x), double(y), d[i], pose, k);
      const auto uvz64 = project_point(x64, pose, k);
      ASSERT_NEAR(uvz64.x(), double(x), 1e-6);
      ASSERT_NEAR(uvz64.y(), double(y), 1e-6);
    }
}

TEST(Render, IdentityTrajectoryIsStatic) {
  const auto seq = render_sequence(single_sphere(4));
  ASSERT_EQ(seq.frames.size(), 4u);
  for (std::size_t f = 1; f < 4; ++f) {
    EXPECT_TRUE(same_frames(seq.frames[0], seq.frames[f])) << "frame " << f + 1;
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(seq.frames[f].visibility[j], 1.0f);
  }
  const auto id = seq.frames[0].pose;
  EXPECT_EQ(id.translation.norm(), 0.0);
  EXPECT_EQ(id.quat[3], 1.0);
}

TEST(Render, ZTranslationTowardPlaneShrinksCenterDepth) {
  SceneSpec s;
  s.frames = 12;
  s.height = s.width = 15;
  s.tracks = 4;
  Primitive wall;
  wall.kind = Primitive::Kind::Box;
  wall.center = {0, 0, 6};
  wall.half = {10, 10, 0.5};
  s.primitives = {wall};
  Keyframe a, b;
  b.position = {0, 0, 3};
  s.trajectory = {a, b};
  const auto seq = render_sequence(s);
  const std::size_t c = 7 * 15 + 7;
  for (std::size_t f = 1; f < seq.frames.size(); ++f) EXPECT_LT(seq.frames[f].depth[c], seq.frames[f - 1].depth[c]);
  EXPECT_NEAR(seq.frames[0].depth[c], 5.5f, 1e-5);
  EXPECT_NEAR(seq.frames.back().depth[c], 2.5f, 1e-5);
}

TEST(Render, DepthPointmapConsistencyOnRandomScenes) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto seq = render_sequence(random_scene(seed, 8));
    EXPECT_LT(consistency_error(seq), 1e-4) << "seed " << seed;
    EXPECT_EQ(seq.frames[0].pose.translation.norm(), 0.0);
    EXPECT_NEAR(seq.frames[0].pose.quat[3], 1.0, 1e-7);
    for (const auto& f : seq.frames) EXPECT_TRUE(f.pose.valid());
  }
}

TEST(Render, VisibleTracksSitOnTheDepthBuffer) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto seq = render_sequence(random_scene(seed, 12));
    const auto& s = *seq.scene;
    const auto k = Intrinsics::from_fov(s.fov, s.width, s.height);
    const auto poses = sample_trajectory(s);
    std::size_t visible = 0, hidden = 0;
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      const auto& fr = seq.frames[f];
      // World point of each query, from frame 1's depth buffer.
      for (std::size_t j = 0; j < seq.tracks; ++j) {
        const auto& q = seq.frames[0].tracks;
        const std::size_t qx = std::size_t(q.at(j, 0)), qy = std::size_t(q.at(j, 1));
        const Eigen::Vector3d x(seq.frames[0].points[qy * s.width + qx], seq.frames[0].points[s.height * s.width + qy * s.width + qx],
                                seq.frames[0].points[2 * s.height * s.width + qy * s.width + qx]);
        const auto uvz = project_point(x, fr.pose, k);
        if (fr.visibility[j] == 0) {
          ++hidden;
          continue;
        }
        ++visible;
        ASSERT_GE(uvz.x(), -1e-3);
        ASSERT_LE(uvz.x(), double(s.width - 1) + 1e-3);
        ASSERT_GE(uvz.y(), -1e-3);
        ASSERT_LE(uvz.y(), double(s.height - 1) + 1e-3);
        EXPECT_NEAR(fr.tracks.at(j, 0), uvz.x(), 1e-3);
        EXPECT_NEAR(fr.tracks.at(j, 1), uvz.y(), 1e-3);
        // Depth buffer at the track's (sub)pixel, by an independent ray cast.
        const Eigen::Vector3d dir = poses[f].rotation_matrix() * k.ray(fr.tracks.at(j, 0), fr.tracks.at(j, 1));
        const auto hit = trace(s, poses[f].translation, dir);
        EXPECT_NEAR(hit.t, uvz.z(), 1e-3) << "seed " << seed << " frame " << f << " track " << j;
        if (f == 0) {
          EXPECT_NEAR(fr.depth[qy * s.width + qx], uvz.z(), 1e-3);
        }
      }
    }
    EXPECT_GT(visible, 0u);
    (void)hidden;
  }
}

TEST(Render, DeterministicPerSeed) {
  EXPECT_TRUE(same_sequence(render_sequence(random_scene(7, 6)), render_sequence(random_scene(7, 6))));
  EXPECT_FALSE(same_sequence(render_sequence(random_scene(7, 6)), render_sequence(random_scene(8, 6))));
}

TEST(Render, DegenerateTrajectoryRejected) {
  auto s = single_sphere(3);
  s.trajectory.clear();
  EXPECT_THROW(render_sequence(s), ContractError);
  s = single_sphere(0);
  EXPECT_THROW(render_sequence(s), ContractError);
}

TEST(Render, RandomScenesHaveDepthStructure) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto seq = render_sequence(random_scene(seed, 4));
    for (const auto& f : seq.frames) {
      float lo = 1e9f, hi = 0;
      std::size_t valid = 0;
      for (std::size_t i = 0; i < f.depth.size(); ++i) {
        if (f.valid[i] == 0) continue;
        ++valid;
        lo = std::min(lo, f.depth[i]);
        hi = std::max(hi, f.depth[i]);
      }
      EXPECT_EQ(valid, f.depth.size());  // the room encloses the camera
      EXPECT_GT(hi / lo, 1.5f);
    }
  }
}

TEST(Window, ReanchorsAndRetracks) {
  const auto seq = render_sequence(random_scene(3, 30));
  const auto w = make_window(seq, 11, 8, 42);
  ASSERT_EQ(w.frames.size(), 8u);
  EXPECT_LT(w.frames[0].pose.translation.norm(), 1e-6);
  EXPECT_NEAR(w.frames[0].pose.quat[3], 1.0, 1e-6);
  EXPECT_LT(consistency_error(w), 1e-4);
  for (std::size_t j = 0; j < w.tracks; ++j) EXPECT_EQ(w.frames[0].visibility[j], 1.0f);
  EXPECT_TRUE(w.frames[3].image == seq.frames[14].image);
  EXPECT_TRUE(w.frames[3].depth == seq.frames[14].depth);
  EXPECT_THROW(make_window(seq, 25, 8, 0), ContractError);
  // The whole sequence as a window reproduces the original geometry.
  const auto all = make_window(seq, 0, 30, 1);
  for (std::size_t f = 0; f < 30; ++f) EXPECT_LT(max_abs_diff(all.frames[f].points, seq.frames[f].points), 1e-5f);
}

TEST(Dataset, RoundTripsBitIdentical) {
  for (std::size_t frames : {1, 40}) {
    auto seq = render_sequence(random_scene(frames, frames, 16, 16, 5));
    const auto path = temp_file("rt.s4d");
    write_sequence(path, seq);
    const auto back = read_sequence(path);
    EXPECT_TRUE(same_sequence(seq, back)) << frames << " frames";
    ASSERT_TRUE(back.scene.has_value());
    EXPECT_EQ(to_json(*back.scene), to_json(*seq.scene));
    write_sequence(temp_file("rt2.s4d"), back);
    std::ifstream a(path, std::ios::binary), b(temp_file("rt2.s4d"), std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str());
  }
  std::filesystem::remove(temp_file("rt.s4d"));
  std::filesystem::remove(temp_file("rt2.s4d"));
}

TEST(Dataset, RejectsEmptyTruncatedAndForeignFiles) {
  Sequence empty;
  EXPECT_THROW(write_sequence(temp_file("e.s4d"), empty), ContractError);
  auto seq = render_sequence(random_scene(1, 2, 8, 8, 3));
  const auto path = temp_file("bad.s4d");
  write_sequence(path, seq);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  EXPECT_THROW(read_sequence(path), io::FormatError);
  {
    std::ofstream o(path, std::ios::binary);
    o << "PLYPLYPLYPLY";
  }
  EXPECT_THROW(read_sequence(path), io::FormatError);
  {
    io::Writer w(path);
    w.put_bytes(kSequenceMagic);
    w.put<std::uint32_t>(99);
    w.finish();
  }
  try {
    read_sequence(path);
    FAIL();
  } catch (const io::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  {
    io::Writer w(path);
    w.put_bytes(kSequenceMagic);
    w.put<std::uint32_t>(kSequenceVersion);
    for (int i = 0; i < 4; ++i) w.put<std::uint32_t>(i == 0 ? 0 : 8);
    w.put<std::uint64_t>(0);
    w.finish();
  }
  EXPECT_THROW(read_sequence(path), io::FormatError);
  std::filesystem::remove(path);
}

TEST(Dataset, PlyExport) {
  const auto seq = render_sequence(random_scene(2, 1, 8, 8, 2));
  const auto& f = seq.frames[0];
  const auto path = temp_file("cloud.ply");
  Tensor<float> conf(f.valid.shape(), 1.5f);
  write_ply(path, f.points, f.image, f.valid, &conf);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  bool header = true, saw_conf = false;
  while (std::getline(in, line)) {
    if (header) {
      saw_conf |= line == "property float confidence";
      if (line == "element vertex 64") ++lines;
      header = line != "end_header";
      continue;
    }
    ++lines;
  }
  EXPECT_TRUE(saw_conf);
  EXPECT_EQ(lines, 65u);
  std::filesystem::remove(path);
}

TEST(Batch, LayoutMatchesModelOutputs) {
  const auto seq = render_sequence(random_scene(4, 3, 32, 32, 5));
  const auto b = to_batch<float>(seq);
  EXPECT_EQ(b.images.size(), 3u);
  EXPECT_EQ(b.targets.points.shape(), (Shape{3, 3, 32, 32}));
  EXPECT_EQ(b.targets.tracks.shape(), (Shape{15, 2}));
  EXPECT_EQ(b.targets.visibility.shape(), (Shape{15, 1}));
  EXPECT_EQ(b.queries.shape(), (Shape{5, 2}));
  EXPECT_EQ(b.targets.depth[1 * 1024 + 37], seq.frames[1].depth[37]);
  EXPECT_EQ(b.targets.tracks.at(5 + 2, 1), seq.frames[1].tracks.at(2, 1));
}
