#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stream4d/geometry.hpp"
#include "stream4d/io.hpp"
#include "stream4d/losses.hpp"
#include "stream4d/tensor.hpp"

// Procedural static scenes rendered by ray casting. The scene lives in its own
// world frame; rendered sequences are re-expressed relative to their first
// camera, so frame 1 always has the identity pose.

namespace stream4d::synth {

struct Primitive {
  enum class Kind { Sphere, Box, Room };  // Room: a box seen from the inside
  Kind kind = Kind::Sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half = Eigen::Vector3d::Ones();  // box half extents; sphere radius in x
  Eigen::Vector3d color_a{0.8, 0.3, 0.2};
  Eigen::Vector3d color_b{0.2, 0.5, 0.9};
  double tex_freq = 3.0;
  Eigen::Vector3d tex_phase = Eigen::Vector3d::Zero();
};

/// Trajectory control point: camera position plus yaw (about +y) and pitch (about +x).
struct Keyframe {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  double yaw = 0.0;
  double pitch = 0.0;
};

struct SceneSpec {
  std::size_t frames = 10;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t tracks = 16;
  Eigen::Vector2d fov{1.2, 1.2};
  double far_plane = 50.0;
  std::uint64_t seed = 0;  // track sampling
  std::vector<Primitive> primitives;
  std::vector<Keyframe> trajectory;  // Catmull-Rom control points
};

struct Hit {
  double t = std::numeric_limits<double>::infinity();  // ray parameter; z-depth for z = 1 rays
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  int primitive = -1;
};

// ---- serialization --------------------------------------------------------

inline nlohmann::json vec_json(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }
inline Eigen::Vector3d json_vec(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

inline nlohmann::json to_json(const SceneSpec& s) {
  nlohmann::json prims = nlohmann::json::array(), traj = nlohmann::json::array();
  for (const auto& p : s.primitives)
    prims.push_back({{"kind", static_cast<int>(p.kind)}, {"center", vec_json(p.center)}, {"half", vec_json(p.half)},
                     {"color_a", vec_json(p.color_a)}, {"color_b", vec_json(p.color_b)}, {"tex_freq", p.tex_freq},
                     {"tex_phase", vec_json(p.tex_phase)}});
  for (const auto& k : s.trajectory) traj.push_back({{"position", vec_json(k.position)}, {"yaw", k.yaw}, {"pitch", k.pitch}});
  return {{"frames", s.frames}, {"height", s.height}, {"width", s.width}, {"tracks", s.tracks},
          {"fov", {s.fov[0], s.fov[1]}}, {"far_plane", s.far_plane}, {"seed", s.seed}, {"primitives", prims},
          {"trajectory", traj}};
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.frames = j.at("frames");
  s.height = j.at("height");
  s.width = j.at("width");
  s.tracks = j.at("tracks");
  s.fov = {j.at("fov").at(0).get<double>(), j.at("fov").at(1).get<double>()};
  s.far_plane = j.at("far_plane");
  s.seed = j.at("seed");
  for (const auto& p : j.at("primitives")) {
    Primitive q;
    const int kind = p.at("kind");
    if (kind < 0 || kind > 2) throw io::FormatError("scene: unknown primitive kind " + std::to_string(kind));
    q.kind = static_cast<Primitive::Kind>(kind);
    q.center = json_vec(p.at("center"));
    q.half = json_vec(p.at("half"));
    q.color_a = json_vec(p.at("color_a"));
    q.color_b = json_vec(p.at("color_b"));
    q.tex_freq = p.at("tex_freq");
    q.tex_phase = json_vec(p.at("tex_phase"));
    s.primitives.push_back(q);
  }
  for (const auto& k : j.at("trajectory")) s.trajectory.push_back({json_vec(k.at("position")), k.at("yaw"), k.at("pitch")});
  return s;
}

// ---- ray casting ----------------------------------------------------------

inline Hit intersect(const Primitive& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d, double t_min) {
  Hit h;
  if (p.kind == Primitive::Kind::Sphere) {
    const Eigen::Vector3d oc = o - p.center;
    const double r = p.half.x(), a = d.squaredNorm(), b = oc.dot(d), c = oc.squaredNorm() - r * r;
    const double disc = b * b - a * c;
    if (disc < 0) return h;
    const double sq = std::sqrt(disc);
    for (double t : {(-b - sq) / a, (-b + sq) / a})
      if (t > t_min) {
        h.t = t;
        h.normal = (o + t * d - p.center) / r;
        return h;
      }
    return h;
  }
  // Slab test on an axis-aligned box.
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int ax0 = -1, ax1 = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - p.half[a], hi = p.center[a] + p.half[a];
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo || o[a] > hi) return h;
      continue;
    }
    double ta = (lo - o[a]) / d[a], tb = (hi - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      ax0 = a;
    }
    if (tb < t1) {
      t1 = tb;
      ax1 = a;
    }
  }
  if (t0 > t1) return h;
  const bool room = p.kind == Primitive::Kind::Room;
  const double t = room ? t1 : t0;
  const int ax = room ? ax1 : ax0;
  if (!(t > t_min) || ax < 0) return h;
  h.t = t;
  h.normal = Eigen::Vector3d::Zero();
  h.normal[ax] = d[ax] > 0 ? -1.0 : 1.0;  // faces the incoming ray for both kinds
  return h;
}

inline Hit trace(const SceneSpec& s, const Eigen::Vector3d& o, const Eigen::Vector3d& d, double t_min = 1e-9) {
  Hit best;
  for (std::size_t i = 0; i < s.primitives.size(); ++i) {
    auto h = intersect(s.primitives[i], o, d, t_min);
    if (h.t < best.t) {
      best = h;
      best.primitive = static_cast<int>(i);
    }
  }
  return best;
}

inline Eigen::Vector3d shade(const Primitive& p, const Eigen::Vector3d& x, const Eigen::Vector3d& n) {
  const Eigen::Vector3d f = p.tex_freq * x + p.tex_phase;
  const double s = std::sin(f.x()) * std::sin(f.y()) * std::sin(f.z());
  const Eigen::Vector3d albedo = p.color_a + (0.5 + 0.5 * s) * (p.color_b - p.color_a);
  static const Eigen::Vector3d light = Eigen::Vector3d(0.4, -0.8, -0.45).normalized();
  const double lambert = 0.35 + 0.65 * std::abs(n.dot(light));
  return (albedo * lambert).cwiseMax(0.0).cwiseMin(1.0);
}

// ---- trajectory -----------------------------------------------------------

inline Eigen::Quaterniond yaw_pitch(double yaw, double pitch) {
  return Eigen::Quaterniond(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) * Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX()));
}

/// Camera-to-world poses (scene frame) at `frames` uniform samples of a
/// Catmull-Rom spline through the control points.
inline std::vector<CameraPose> sample_trajectory(const SceneSpec& s) {
  if (s.trajectory.empty()) throw ContractError("render_sequence: degenerate trajectory (no control points)");
  const auto& k = s.trajectory;
  const std::size_t n = k.size();
  auto at = [&](long i) { return k[static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1))]; };
  auto cr = [](double p0, double p1, double p2, double p3, double u) {
    return 0.5 * (2 * p1 + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u * u + (-p0 + 3 * p1 - 3 * p2 + p3) * u * u * u);
  };
  std::vector<CameraPose> poses;
  for (std::size_t f = 0; f < s.frames; ++f) {
    const double g = s.frames == 1 || n == 1 ? 0.0 : static_cast<double>(f) * static_cast<double>(n - 1) / static_cast<double>(s.frames - 1);
    const long seg = std::min(static_cast<long>(g), static_cast<long>(n) - 2 < 0 ? 0 : static_cast<long>(n) - 2);
    const double u = g - static_cast<double>(seg);
    const Keyframe a = at(seg - 1), b = at(seg), c = at(seg + 1), d = at(seg + 2);
    CameraPose p;
    for (int i = 0; i < 3; ++i) p.translation[i] = cr(a.position[i], b.position[i], c.position[i], d.position[i], u);
    p.set_rotation(yaw_pitch(cr(a.yaw, b.yaw, c.yaw, d.yaw, u), cr(a.pitch, b.pitch, c.pitch, d.pitch, u)));
    p.fov = s.fov;
    poses.push_back(p);
  }
  return poses;
}

// ---- ground truth -----------------------------------------------------------

/// Ground truth for one frame. Poses and point maps are relative to the
/// sequence's first camera; depth is camera-frame z.
struct SceneFrameGT {
  Tensor<float> image;       // 3 × H × W in [0, 1]
  Tensor<float> depth;       // H × W, 0 where invalid
  Tensor<float> points;      // 3 × H × W, 0 where invalid
  Tensor<float> valid;       // H × W, 1 or 0
  CameraPose pose;
  Tensor<float> tracks;      // M × 2 pixels (x, y)
  Tensor<float> visibility;  // M, 1 or 0
};

struct Sequence {
  std::size_t height = 0, width = 0, tracks = 0;
  std::optional<SceneSpec> scene;  // present for rendered sequences
  CameraPose anchor;               // scene-frame pose of frame 1
  std::vector<SceneFrameGT> frames;
};

/// Pinhole unprojection of a depth map (H × W) through `pose` into 3 × H × W world points.
inline Tensor<float> unproject(const Tensor<float>& depth, const CameraPose& pose) {
  if (depth.rank() != 2) throw ShapeError("unproject: depth must be H×W, got " + shape_str(depth.shape()));
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  const auto k = Intrinsics::from_fov(pose.fov, W, H);
  Tensor<float> out({3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto p = unproject_pixel(double(x), double(y), depth[y * W + x], pose, k);
      for (int c = 0; c < 3; ++c) out[c * H * W + y * W + x] = static_cast<float>(p[c]);
    }
  return out;
}

/// Rounds every pose component to float32 precision, matching the on-disk format.
inline CameraPose quantize(const CameraPose& p) {
  const auto a = p.to_array();
  std::array<float, CameraPose::kDims> f;
  std::copy(a.begin(), a.end(), f.begin());
  CameraPose q;
  for (int i = 0; i < 3; ++i) q.translation[i] = f[i];
  for (int i = 0; i < 4; ++i) q.quat[i] = f[3 + i];
  for (int i = 0; i < 2; ++i) q.fov[i] = f[7 + i];
  return q;
}

namespace detail {

// Depth of the first surface along the ray through (u, v) of a scene-frame camera.
inline double traced_depth(const SceneSpec& s, const CameraPose& cam, const Intrinsics& k, double u, double v) {
  const Eigen::Vector3d d = cam.rotation_matrix() * k.ray(u, v);
  const auto h = trace(s, cam.translation, d);
  return h.primitive >= 0 && h.t < s.far_plane ? h.t : std::numeric_limits<double>::infinity();
}

// Tracks of scene-frame points `xs` through scene-frame cameras.
inline void fill_tracks(const SceneSpec& s, const std::vector<CameraPose>& scene_poses, const std::vector<Eigen::Vector3d>& xs,
                        const Tensor<float>& queries, std::vector<SceneFrameGT>& frames) {
  const std::size_t H = s.height, W = s.width, M = xs.size();
  const auto k = Intrinsics::from_fov(s.fov, W, H);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    auto& fr = frames[f];
    fr.tracks = Tensor<float>({M, 2});
    fr.visibility = Tensor<float>({M});
    for (std::size_t j = 0; j < M; ++j) {
      if (f == 0) {
        fr.tracks.at(j, 0) = queries.at(j, 0);
        fr.tracks.at(j, 1) = queries.at(j, 1);
        fr.visibility[j] = 1;
        continue;
      }
      const auto uvz = project_point(xs[j], scene_poses[f], k);
      const bool front = uvz.z() > 1e-6;
      fr.tracks.at(j, 0) = static_cast<float>(front ? uvz.x() : queries.at(j, 0));
      fr.tracks.at(j, 1) = static_cast<float>(front ? uvz.y() : queries.at(j, 1));
      const bool inside = front && uvz.x() >= 0 && uvz.y() >= 0 && uvz.x() <= double(W - 1) && uvz.y() <= double(H - 1);
      // Visible iff nothing sits in front of the point along its pixel ray.
      fr.visibility[j] = inside && traced_depth(s, scene_poses[f], k, uvz.x(), uvz.y()) > uvz.z() * (1 - 1e-6) - 1e-6 ? 1.0f : 0.0f;
    }
  }
}

// Samples up to M distinct valid pixels of a frame as track queries.
inline Tensor<float> sample_queries(const Tensor<float>& valid, std::size_t W, std::size_t M, std::uint64_t seed) {
  std::vector<std::size_t> pix;
  for (std::size_t i = 0; i < valid.size(); ++i)
    if (valid[i] != 0) pix.push_back(i);
  if (pix.size() < M) throw ContractError("render_sequence: only " + std::to_string(pix.size()) + " valid pixels for " + std::to_string(M) + " tracks");
  std::mt19937_64 rng(seed);
  std::shuffle(pix.begin(), pix.end(), rng);
  Tensor<float> q({M, 2});
  for (std::size_t j = 0; j < M; ++j) {
    q.at(j, 0) = static_cast<float>(pix[j] % W);
    q.at(j, 1) = static_cast<float>(pix[j] / W);
  }
  return q;
}

inline SceneFrameGT render_frame(const SceneSpec& s, const CameraPose& cam, const CameraPose& anchor) {
  const std::size_t H = s.height, W = s.width;
  const auto k = Intrinsics::from_fov(s.fov, W, H);
  SceneFrameGT fr;
  fr.image = Tensor<float>({3, H, W});
  fr.depth = Tensor<float>({H, W});
  fr.valid = Tensor<float>({H, W});
  fr.pose = quantize(anchor.relative(cam));
  const Eigen::Matrix3d rot = cam.rotation_matrix();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const Eigen::Vector3d d = rot * k.ray(double(x), double(y));
      const auto h = trace(s, cam.translation, d);
      if (h.primitive < 0 || h.t >= s.far_plane) continue;
      const Eigen::Vector3d c = shade(s.primitives[static_cast<std::size_t>(h.primitive)], cam.translation + h.t * d, h.normal);
      for (int ch = 0; ch < 3; ++ch) fr.image[ch * H * W + y * W + x] = static_cast<float>(c[ch]);
      fr.depth[y * W + x] = static_cast<float>(h.t);
      fr.valid[y * W + x] = 1;
    }
  fr.points = unproject(fr.depth, fr.pose);
  for (std::size_t i = 0; i < H * W; ++i)
    if (fr.valid[i] == 0)
      for (int c = 0; c < 3; ++c) fr.points[c * H * W + i] = 0;
  return fr;
}

}  // namespace detail

inline void validate(const SceneSpec& s) {
  if (s.frames == 0) throw ContractError("SceneSpec: zero frames");
  if (s.height < 2 || s.width < 2) throw ContractError("SceneSpec: image smaller than 2×2");
  if (!(s.fov[0] > 0 && s.fov[0] < std::numbers::pi && s.fov[1] > 0 && s.fov[1] < std::numbers::pi))
    throw ContractError("SceneSpec: fov outside (0, pi)");
  if (s.trajectory.empty()) throw ContractError("render_sequence: degenerate trajectory (no control points)");
}

/// Renders every frame of the scene; frame 1 defines the world frame.
inline Sequence render_sequence(const SceneSpec& s) {
  validate(s);
  const auto scene_poses = sample_trajectory(s);
  Sequence seq;
  seq.height = s.height;
  seq.width = s.width;
  seq.tracks = s.tracks;
  seq.scene = s;
  seq.anchor = scene_poses.front();
  for (const auto& p : scene_poses) seq.frames.push_back(detail::render_frame(s, p, seq.anchor));
  const auto queries = detail::sample_queries(seq.frames[0].valid, s.width, s.tracks, s.seed);
  std::vector<Eigen::Vector3d> xs;
  const auto k = Intrinsics::from_fov(s.fov, s.width, s.height);
  for (std::size_t j = 0; j < s.tracks; ++j) {
    const std::size_t px = static_cast<std::size_t>(queries.at(j, 0)), py = static_cast<std::size_t>(queries.at(j, 1));
    xs.push_back(unproject_pixel(double(px), double(py), seq.frames[0].depth[py * s.width + px], seq.anchor, k));
  }
  detail::fill_tracks(s, scene_poses, xs, queries, seq.frames);
  return seq;
}

/// Frames [start, start + n) of a rendered sequence, re-anchored so that frame
/// `start` becomes the identity, with fresh track queries sampled in it.
inline Sequence make_window(const Sequence& seq, std::size_t start, std::size_t n, std::uint64_t seed) {
  if (!seq.scene) throw ContractError("make_window: sequence has no scene description");
  if (n == 0 || start + n > seq.frames.size())
    throw ContractError("make_window: window [" + std::to_string(start) + ", " + std::to_string(start + n) + ") outside " +
                        std::to_string(seq.frames.size()) + " frames");
  const auto& s = *seq.scene;
  Sequence w;
  w.height = seq.height;
  w.width = seq.width;
  w.tracks = seq.tracks;
  w.scene = s;
  std::vector<CameraPose> scene_poses;
  auto to_scene = [&](const CameraPose& rel) {
    CameraPose p;
    p.translation = seq.anchor.camera_to_world(rel.translation);
    p.set_rotation(Eigen::Quaterniond(seq.anchor.rotation_matrix() * rel.rotation_matrix()));
    p.fov = rel.fov;
    return p;
  };
  for (std::size_t f = start; f < start + n; ++f) scene_poses.push_back(to_scene(seq.frames[f].pose));
  w.anchor = scene_poses.front();
  const Eigen::Matrix3d r0t = seq.frames[start].pose.rotation_matrix().transpose();
  const Eigen::Vector3d t0 = seq.frames[start].pose.translation;
  const std::size_t HW = seq.height * seq.width;
  for (std::size_t f = start; f < start + n; ++f) {
    SceneFrameGT fr = seq.frames[f];
    fr.pose = quantize(seq.frames[start].pose.relative(seq.frames[f].pose));
    for (std::size_t i = 0; i < HW; ++i) {
      if (fr.valid[i] == 0) continue;
      const Eigen::Vector3d x(fr.points[i], fr.points[HW + i], fr.points[2 * HW + i]);
      const Eigen::Vector3d y = r0t * (x - t0);
      for (int c = 0; c < 3; ++c) fr.points[c * HW + i] = static_cast<float>(y[c]);
    }
    w.frames.push_back(std::move(fr));
  }
  const auto queries = detail::sample_queries(w.frames[0].valid, w.width, w.tracks, seed);
  const auto k = Intrinsics::from_fov(s.fov, s.width, s.height);
  std::vector<Eigen::Vector3d> xs;
  for (std::size_t j = 0; j < w.tracks; ++j) {
    const std::size_t px = static_cast<std::size_t>(queries.at(j, 0)), py = static_cast<std::size_t>(queries.at(j, 1));
    xs.push_back(unproject_pixel(double(px), double(py), w.frames[0].depth[py * w.width + px], w.anchor, k));
  }
  detail::fill_tracks(s, scene_poses, xs, queries, w.frames);
  return w;
}

// ---- random scenes ----------------------------------------------------------

/// A furnished room walked through by a camera that moves roughly where it looks.
/// Textures share one world-space frequency, so texture density is a depth cue.
inline SceneSpec random_scene(std::uint64_t seed, std::size_t frames, std::size_t height = 32, std::size_t width = 32,
                              std::size_t tracks = 16) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  auto color = [&] { return Eigen::Vector3d(range(0.1, 0.95), range(0.1, 0.95), range(0.1, 0.95)); };
  auto textured = [&](Primitive p) {
    p.color_a = color();
    p.color_b = color();
    p.tex_freq = range(2.8, 3.2);
    p.tex_phase = Eigen::Vector3d(range(0, 6.3), range(0, 6.3), range(0, 6.3));
    return p;
  };
  SceneSpec s;
  s.frames = frames;
  s.height = height;
  s.width = width;
  s.tracks = tracks;
  s.seed = seed ^ 0x9e3779b97f4a7c15ULL;
  Primitive room;
  room.kind = Primitive::Kind::Room;
  room.half = {range(2.6, 3.2), range(1.5, 1.8), range(3.2, 3.8)};
  room.center = {range(-0.3, 0.3), range(-0.15, 0.15), room.half.z() - range(1.3, 1.7)};
  s.primitives.push_back(textured(room));
  const int spheres = 1 + static_cast<int>(rng() % 3), boxes = 1 + static_cast<int>(rng() % 2);
  for (int i = 0; i < spheres + boxes; ++i) {
    Primitive p;
    p.kind = i < spheres ? Primitive::Kind::Sphere : Primitive::Kind::Box;
    p.half = p.kind == Primitive::Kind::Sphere ? Eigen::Vector3d::Constant(range(0.3, 0.6))
                                               : Eigen::Vector3d(range(0.25, 0.5), range(0.25, 0.5), range(0.25, 0.5));
    p.center = {range(-1.5, 1.5), range(-0.9, 0.5), range(2.8, 4.5)};
    s.primitives.push_back(textured(p));
  }
  // Control points every 5 frames; the whole walk is at most 1.5 units long.
  const std::size_t keys = frames <= 1 ? 2 : (frames - 2) / 5 + 2;
  const double step = std::min(0.1, 1.5 / static_cast<double>(std::max<std::size_t>(frames, 1))) *
                      static_cast<double>(std::max<std::size_t>(frames, 2) - 1) / static_cast<double>(keys - 1);
  Keyframe k;
  for (std::size_t i = 0; i < keys; ++i) {
    s.trajectory.push_back(k);
    const double heading = k.yaw + range(-0.35, 0.35);
    k.position += step * range(0.7, 1.3) * Eigen::Vector3d(std::sin(heading), range(-0.1, 0.1), std::cos(heading));
    k.yaw = std::clamp(k.yaw + range(-0.15, 0.15), -0.4, 0.4);
    k.pitch = std::clamp(k.pitch + range(-0.05, 0.05), -0.1, 0.1);
  }
  return s;
}

// ---- dataset container --------------------------------------------------------

inline constexpr std::string_view kSequenceMagic = "S4DSEQ";
inline constexpr std::uint32_t kSequenceVersion = 1;

/// Single-file container: magic, u32 version, u32 T, H, W, M, u64 scene-JSON
/// length + JSON (may be empty), then per frame: pose (9), image, depth,
/// points, valid, tracks, visibility, all little-endian float32.
inline void write_sequence(const std::filesystem::path& path, const Sequence& seq) {
  if (seq.frames.empty()) throw ContractError("dataset_write: empty sequence");
  const std::size_t H = seq.height, W = seq.width, M = seq.tracks;
  io::Writer w(path);
  w.put_bytes(kSequenceMagic);
  w.put<std::uint32_t>(kSequenceVersion);
  for (std::size_t v : {seq.frames.size(), H, W, M}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  std::string scene;
  if (seq.scene) scene = nlohmann::json{{"scene", to_json(*seq.scene)}, {"anchor", seq.anchor.to_array()}}.dump();
  w.put<std::uint64_t>(scene.size());
  w.put_bytes(scene);
  for (const auto& f : seq.frames) {
    auto check = [&](const Tensor<float>& t, Shape s, const char* what) {
      if (t.shape() != s) throw ShapeError(std::string("dataset_write: ") + what + " " + shape_str(t.shape()) + " vs " + shape_str(s));
      w.put_span(t.span());
    };
    for (double v : f.pose.to_array()) w.put<float>(static_cast<float>(v));
    check(f.image, {3, H, W}, "image");
    check(f.depth, {H, W}, "depth");
    check(f.points, {3, H, W}, "points");
    check(f.valid, {H, W}, "valid");
    check(f.tracks, {M, 2}, "tracks");
    check(f.visibility, {M}, "visibility");
  }
  w.finish();
}

inline Sequence read_sequence(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic(kSequenceMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kSequenceVersion)
    throw io::FormatError("unsupported dataset version " + std::to_string(version) + " in " + path.string());
  const std::size_t T = r.get<std::uint32_t>(), H = r.get<std::uint32_t>(), W = r.get<std::uint32_t>(), M = r.get<std::uint32_t>();
  if (T == 0) throw io::FormatError("empty sequence in " + path.string());
  Sequence seq;
  seq.height = H;
  seq.width = W;
  seq.tracks = M;
  const auto len = r.get<std::uint64_t>();
  if (len > 0) {
    try {
      const auto j = nlohmann::json::parse(r.get_bytes(len));
      seq.scene = spec_from_json(j.at("scene"));
      const auto a = j.at("anchor").get<std::vector<double>>();
      if (a.size() != CameraPose::kDims) throw io::FormatError("bad anchor pose");
      for (int i = 0; i < 3; ++i) seq.anchor.translation[i] = a[i];
      for (int i = 0; i < 4; ++i) seq.anchor.quat[i] = a[3 + i];
      for (int i = 0; i < 2; ++i) seq.anchor.fov[i] = a[7 + i];
    } catch (const nlohmann::json::exception& e) {
      throw io::FormatError("scene description unreadable in " + path.string() + ": " + e.what());
    }
  }
  auto get = [&](Shape s) { return Tensor<float>(s, r.get_vector<float>(shape_numel(s))); };
  for (std::size_t f = 0; f < T; ++f) {
    SceneFrameGT fr;
    const auto pose = r.get_vector<float>(CameraPose::kDims);
    for (int i = 0; i < 3; ++i) fr.pose.translation[i] = pose[i];
    for (int i = 0; i < 4; ++i) fr.pose.quat[i] = pose[3 + i];
    for (int i = 0; i < 2; ++i) fr.pose.fov[i] = pose[7 + i];
    fr.image = get({3, H, W});
    fr.depth = get({H, W});
    fr.points = get({3, H, W});
    fr.valid = get({H, W});
    fr.tracks = get({M, 2});
    fr.visibility = get({M});
    seq.frames.push_back(std::move(fr));
  }
  if (!r.at_end()) throw io::FormatError("trailing bytes in " + path.string());
  return seq;
}

/// Sequence files of a dataset directory, sorted by name.
inline std::vector<std::filesystem::path> list_dataset(const std::filesystem::path& dir) {
  if (std::filesystem::is_regular_file(dir)) return {dir};
  if (!std::filesystem::is_directory(dir)) throw io::IoError("dataset not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".s4d") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw io::IoError("no .s4d sequences in " + dir.string());
  return files;
}

/// ASCII PLY of valid points with color and an optional per-point confidence.
inline void write_ply(const std::filesystem::path& path, const Tensor<float>& points, const Tensor<float>& colors,
                      const Tensor<float>& valid, const Tensor<float>* confidence = nullptr) {
  const std::size_t n = valid.size();
  if (points.size() != 3 * n || colors.size() != 3 * n || (confidence && confidence->size() != n))
    throw ShapeError("write_ply: points " + shape_str(points.shape()) + " colors " + shape_str(colors.shape()) + " valid " +
                     shape_str(valid.shape()));
  std::ofstream o(path);
  if (!o) throw io::IoError("cannot open " + path.string() + " for writing");
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) count += valid[i] != 0;
  o << "ply\nformat ascii 1.0\nelement vertex " << count
    << "\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (confidence) o << "property float confidence\n";
  o << "end_header\n";
  auto byte = [](float v) { return static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); };
  for (std::size_t i = 0; i < n; ++i) {
    if (valid[i] == 0) continue;
    o << points[i] << ' ' << points[n + i] << ' ' << points[2 * n + i] << ' ' << byte(colors[i]) << ' ' << byte(colors[n + i])
      << ' ' << byte(colors[2 * n + i]);
    if (confidence) o << ' ' << (*confidence)[i];
    o << '\n';
  }
  if (!o) throw io::IoError("write failed: " + path.string());
}

// ---- model-facing views ---------------------------------------------------------

template <class T>
struct Batch {
  std::vector<Tensor<T>> images;
  Tensor<T> queries;  // M × 2, frame 1
  Targets<T> targets;
};

template <class T>
Batch<T> to_batch(const Sequence& seq) {
  const std::size_t F = seq.frames.size(), H = seq.height, W = seq.width, HW = H * W, M = seq.tracks;
  Batch<T> b;
  auto& tg = b.targets;
  tg.pose = Tensor<T>({F, CameraPose::kDims});
  tg.depth = Tensor<T>({F, H, W});
  tg.points = Tensor<T>({F, 3, H, W});
  tg.valid = Tensor<T>({F, H, W});
  tg.tracks = Tensor<T>({F * M, 2});
  tg.visibility = Tensor<T>({F * M, 1});
  for (std::size_t f = 0; f < F; ++f) {
    const auto& fr = seq.frames[f];
    b.images.push_back(fr.image.template cast<T>());
    const auto pa = fr.pose.to_array();
    for (std::size_t c = 0; c < CameraPose::kDims; ++c) tg.pose.at(f, c) = static_cast<T>(pa[c]);
    std::copy(fr.depth.vec().begin(), fr.depth.vec().end(), tg.depth.vec().begin() + static_cast<std::ptrdiff_t>(f * HW));
    std::copy(fr.points.vec().begin(), fr.points.vec().end(), tg.points.vec().begin() + static_cast<std::ptrdiff_t>(f * 3 * HW));
    std::copy(fr.valid.vec().begin(), fr.valid.vec().end(), tg.valid.vec().begin() + static_cast<std::ptrdiff_t>(f * HW));
    std::copy(fr.tracks.vec().begin(), fr.tracks.vec().end(), tg.tracks.vec().begin() + static_cast<std::ptrdiff_t>(f * M * 2));
    std::copy(fr.visibility.vec().begin(), fr.visibility.vec().end(), tg.visibility.vec().begin() + static_cast<std::ptrdiff_t>(f * M));
  }
  b.queries = seq.frames.front().tracks.template cast<T>();
  return b;
}

}  // namespace stream4d::synth
