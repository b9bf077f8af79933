#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stream4d/io.hpp"
#include "stream4d/metrics.hpp"
#include "stream4d/model.hpp"
#include "stream4d/synth.hpp"

namespace stream4d {

/// Per-frame predictions for one sequence.
struct PredictionFile {
  std::size_t height = 0, width = 0, tracks = 0;
  std::vector<PredictionSet> frames;
};

inline constexpr std::string_view kPredictionMagic = "S4DPRED1";

/// Magic, u32 T, H, W, M, then per frame: pose (9), points (3·H·W),
/// point_conf, depth, depth_conf (H·W each), tracks (2·M), visibility logits (M),
/// all little-endian float32.
inline void write_predictions(const std::filesystem::path& path, const PredictionFile& p) {
  if (p.frames.empty()) throw ContractError("write_predictions: no frames");
  const std::size_t H = p.height, W = p.width, M = p.tracks;
  io::Writer w(path);
  w.put_bytes(kPredictionMagic);
  for (std::size_t v : {p.frames.size(), H, W, M}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  for (const auto& f : p.frames) {
    auto put = [&](const Tensor<float>& t, std::size_t n, const char* what) {
      if (t.size() != n)
        throw ShapeError(std::string("write_predictions: ") + what + " has " + std::to_string(t.size()) + " values, expected " +
                         std::to_string(n));
      w.put_span(t.span());
    };
    for (double v : f.pose.to_array()) w.put<float>(static_cast<float>(v));
    put(f.points, 3 * H * W, "points");
    put(f.point_conf, H * W, "point_conf");
    put(f.depth, H * W, "depth");
    put(f.depth_conf, H * W, "depth_conf");
    put(f.tracks, 2 * M, "tracks");
    put(f.visibility_logits, M, "visibility");
  }
  w.finish();
}

inline PredictionFile read_predictions(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic(kPredictionMagic);
  PredictionFile p;
  const std::size_t T = r.get<std::uint32_t>();
  p.height = r.get<std::uint32_t>();
  p.width = r.get<std::uint32_t>();
  p.tracks = r.get<std::uint32_t>();
  if (T == 0) throw io::FormatError("no frames in " + path.string());
  const std::size_t H = p.height, W = p.width, M = p.tracks;
  auto get = [&](Shape s) { return Tensor<float>(s, r.get_vector<float>(shape_numel(s))); };
  for (std::size_t f = 0; f < T; ++f) {
    PredictionSet s;
    const auto pose = r.get_vector<float>(CameraPose::kDims);
    for (int i = 0; i < 3; ++i) s.pose.translation[i] = pose[i];
    for (int i = 0; i < 4; ++i) s.pose.quat[i] = pose[3 + i];
    for (int i = 0; i < 2; ++i) s.pose.fov[i] = pose[7 + i];
    s.points = get({3, H, W});
    s.point_conf = get({H, W});
    s.depth = get({H, W});
    s.depth_conf = get({H, W});
    s.tracks = get({M, 2});
    s.visibility_logits = get({M});
    p.frames.push_back(std::move(s));
  }
  if (!r.at_end()) throw io::FormatError("trailing bytes in " + path.string());
  return p;
}

/// Ground truth packaged as predictions (unit confidence, saturated visibility).
inline PredictionFile predictions_from_ground_truth(const synth::Sequence& seq) {
  PredictionFile p{seq.height, seq.width, seq.tracks, {}};
  for (const auto& f : seq.frames) {
    PredictionSet s;
    s.pose = f.pose;
    s.points = f.points;
    s.depth = f.depth;
    s.point_conf = Tensor<float>(f.depth.shape(), 1.0f);
    s.depth_conf = s.point_conf;
    s.tracks = f.tracks;
    s.visibility_logits = Tensor<float>({seq.tracks});
    for (std::size_t j = 0; j < seq.tracks; ++j) s.visibility_logits[j] = f.visibility[j] != 0 ? 20.0f : -20.0f;
    p.frames.push_back(std::move(s));
  }
  return p;
}

/// Stacks predicted and ground-truth frames into the inputs of the metrics.
/// Point clouds use every valid ground-truth pixel of every frame.
inline metrics::Report evaluate_sequence(const PredictionFile& pred, const synth::Sequence& gt) {
  if (pred.frames.size() != gt.frames.size() || pred.height != gt.height || pred.width != gt.width)
    throw ContractError("evaluate: predictions (" + std::to_string(pred.frames.size()) + " frames, " + std::to_string(pred.height) +
                        "x" + std::to_string(pred.width) + ") do not match the sequence (" + std::to_string(gt.frames.size()) +
                        " frames, " + std::to_string(gt.height) + "x" + std::to_string(gt.width) + ")");
  const std::size_t T = gt.frames.size(), HW = gt.height * gt.width;
  metrics::Points pc, gc;
  Tensor<double> dp({T, HW}), dg({T, HW}), valid({T, HW});
  std::vector<CameraPose> pp, gp;
  for (std::size_t f = 0; f < T; ++f) {
    const auto& p = pred.frames[f];
    const auto& g = gt.frames[f];
    for (std::size_t i = 0; i < HW; ++i) {
      dp.at(f, i) = p.depth[i];
      dg.at(f, i) = g.depth[i];
      valid.at(f, i) = g.valid[i];
      if (g.valid[i] == 0) continue;
      const Eigen::Vector3d x(p.points[i], p.points[HW + i], p.points[2 * HW + i]);
      if (!x.allFinite()) throw ContractError("evaluate: non-finite predicted point in frame " + std::to_string(f + 1));
      pc.push_back(x);
      gc.emplace_back(g.points[i], g.points[HW + i], g.points[2 * HW + i]);
    }
    pp.push_back(p.pose);
    gp.push_back(g.pose);
  }
  metrics::Report r;
  r.add("cloud.", metrics::cloud_metrics(pc, gc));
  r.add("depth.", metrics::depth_metrics(dp, dg, valid));
  if (T >= 2) r.add("pose.", metrics::pose_auc30(pp, gp));
  double se = 0;
  for (std::size_t i = 0; i < pc.size(); ++i) se += (pc[i] - gc[i]).squaredNorm();
  r.add("pointmap_rmse", std::sqrt(se / static_cast<double>(pc.size())));
  return r;
}

/// Key-wise mean of per-sequence reports with identical keys.
inline metrics::Report mean_report(const std::vector<metrics::Report>& reports) {
  if (reports.empty()) throw ContractError("mean_report: no reports");
  metrics::Report out = reports.front();
  for (std::size_t k = 0; k < out.values.size(); ++k) {
    double s = 0;
    for (const auto& r : reports) {
      if (r.values.size() != out.values.size() || r.values[k].first != out.values[k].first)
        throw ContractError("mean_report: reports have different keys");
      s += r.values[k].second;
    }
    out.values[k].second = s / static_cast<double>(reports.size());
  }
  return out;
}

}  // namespace stream4d
