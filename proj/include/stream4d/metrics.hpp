#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <queue>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "stream4d/geometry.hpp"
#include "stream4d/tensor.hpp"

namespace stream4d::metrics {

using Points = std::vector<Eigen::Vector3d>;

struct CloudMetrics {
  double acc_mean = 0, acc_median = 0;
  double comp_mean = 0, comp_median = 0;
  double nc_mean = 0, nc_median = 0;
  double overall = 0;  // (acc_mean + comp_mean) / 2
};

struct DepthMetrics {
  double abs_rel = 0;
  double delta_125 = 0;
  double scale = 1;
};

struct PoseMetrics {
  std::vector<double> rra_curve, rta_curve, curve;  // accuracy at thresholds 1..30 degrees
  double auc30 = 0;
};

/// Upper median: element n/2 of the sorted values.
inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median: empty input");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("mean: empty input");
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Exact nearest-neighbour queries on a uniform grid. Ties are broken towards
/// the lower point index, which makes results identical to a linear scan.
class NearestGrid {
 public:
  explicit NearestGrid(const Points& pts) : pts_(pts) {
    if (pts_.empty()) throw ContractError("NearestGrid: empty point set");
    lo_ = hi_ = pts_[0];
    for (const auto& p : pts_) {
      if (!p.allFinite()) throw ContractError("NearestGrid: non-finite point");
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    const Eigen::Vector3d ext = (hi_ - lo_).cwiseMax(1e-12);
    const double per_cell = 2.0;
    h_ = std::cbrt(ext.prod() * per_cell / static_cast<double>(pts_.size()));
    h_ = std::max({h_, ext.maxCoeff() / 256.0, 1e-9});
    for (int a = 0; a < 3; ++a) dims_[a] = static_cast<std::int64_t>(std::floor(ext[a] / h_)) + 1;
    for (std::size_t i = 0; i < pts_.size(); ++i) cells_[key(cell_of(pts_[i]))].push_back(i);
  }

  /// Index and squared distance of the nearest point.
  std::pair<std::size_t, double> nearest(const Eigen::Vector3d& q) const {
    auto r = knearest(q, 1);
    return r.front();
  }

  /// The k nearest points as (index, squared distance), ordered by (distance, index).
  std::vector<std::pair<std::size_t, double>> knearest(const Eigen::Vector3d& q, std::size_t k) const {
    k = std::min(k, pts_.size());
    if (k == 0) throw ContractError("NearestGrid: k must be > 0");
    if (!q.allFinite()) throw ContractError("NearestGrid: non-finite query");
    using Entry = std::pair<double, std::size_t>;
    std::priority_queue<Entry> heap;  // worst on top
    const auto c = cell_of(q);
    std::int64_t r_min = 0, r_max = 0;
    for (int a = 0; a < 3; ++a) {
      r_min = std::max({r_min, -c[a], c[a] - (dims_[a] - 1)});
      r_max = std::max({r_max, std::abs(c[a]), std::abs(dims_[a] - 1 - c[a])});
    }
    for (std::int64_t r = r_min; r <= r_max; ++r) {
      visit_shell(c, r, [&](std::size_t i) {
        const Entry e{(pts_[i] - q).squaredNorm(), i};
        if (heap.size() < k) {
          heap.push(e);
        } else if (e < heap.top()) {
          heap.pop();
          heap.push(e);
        }
      });
      // Cells outside shell r are at least r·h away from q (less a rounding margin).
      if (heap.size() == k) {
        const double bound = static_cast<double>(r) * h_ * (1 - 1e-9);
        if (heap.top().first < bound * bound) break;
      }
    }
    std::vector<std::pair<std::size_t, double>> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0; heap.pop()) out[i] = {heap.top().second, heap.top().first};
    return out;
  }

 private:
  using Cell = std::array<std::int64_t, 3>;

  Cell cell_of(const Eigen::Vector3d& p) const {
    Cell c;
    for (int a = 0; a < 3; ++a) c[a] = static_cast<std::int64_t>(std::floor((p[a] - lo_[a]) / h_));
    return c;
  }

  std::int64_t key(const Cell& c) const {
    const auto x = std::clamp<std::int64_t>(c[0], 0, dims_[0] - 1), y = std::clamp<std::int64_t>(c[1], 0, dims_[1] - 1),
               z = std::clamp<std::int64_t>(c[2], 0, dims_[2] - 1);
    return (x * dims_[1] + y) * dims_[2] + z;
  }

  template <class F>
  void visit_shell(const Cell& c, std::int64_t r, F&& f) const {
    auto lo = [&](int a) { return std::max<std::int64_t>(c[a] - r, 0); };
    auto hi = [&](int a) { return std::min<std::int64_t>(c[a] + r, dims_[a] - 1); };
    auto cell = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
      auto it = cells_.find(key({x, y, z}));
      if (it != cells_.end())
        for (std::size_t i : it->second) f(i);
    };
    for (std::int64_t x = lo(0); x <= hi(0); ++x)
      for (std::int64_t y = lo(1); y <= hi(1); ++y) {
        if (std::max(std::abs(x - c[0]), std::abs(y - c[1])) == r) {
          for (std::int64_t z = lo(2); z <= hi(2); ++z) cell(x, y, z);
        } else {
          if (c[2] - r >= 0 && c[2] - r < dims_[2]) cell(x, y, c[2] - r);
          if (r > 0 && c[2] + r >= 0 && c[2] + r < dims_[2]) cell(x, y, c[2] + r);
        }
      }
  }

  const Points& pts_;
  Eigen::Vector3d lo_, hi_;
  double h_ = 1;
  std::array<std::int64_t, 3> dims_{};
  std::unordered_map<std::int64_t, std::vector<std::size_t>> cells_;
};

/// Unit normal of the least-squares plane through the given points.
inline Eigen::Vector3d plane_normal(const Points& nbrs) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (const auto& p : nbrs) c += p;
  c /= static_cast<double>(nbrs.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : nbrs) cov += (p - c) * (p - c).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  return es.eigenvectors().col(0).normalized();
}

/// Per-point normals from a plane fit to each point's k nearest neighbours (itself included).
inline Points estimate_normals(const Points& pts, std::size_t k = 16) {
  NearestGrid grid(pts);
  Points normals(pts.size());
  Points nbrs;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    nbrs.clear();
    for (const auto& [j, _] : grid.knearest(pts[i], k)) nbrs.push_back(pts[j]);
    normals[i] = plane_normal(nbrs);
  }
  return normals;
}

/// Accuracy (pred → gt distance), completeness (gt → pred) and normal
/// consistency |cos| at nearest neighbours, each averaged over both directions
/// for NC. Normals are estimated from 16-NN plane fits when not supplied.
inline CloudMetrics cloud_metrics(const Points& pred, const Points& gt, const Points* pred_normals = nullptr,
                                  const Points* gt_normals = nullptr) {
  if (pred.empty() || gt.empty()) throw ContractError("cloud_metrics: empty point set");
  Points pn_own, gn_own;
  if (!pred_normals) pred_normals = &(pn_own = estimate_normals(pred));
  if (!gt_normals) gt_normals = &(gn_own = estimate_normals(gt));
  if (pred_normals->size() != pred.size() || gt_normals->size() != gt.size())
    throw ContractError("cloud_metrics: normals do not match their point sets");
  auto one_way = [](const Points& from, const Points& fn, const Points& to, const Points& tn, std::vector<double>& dist,
                    std::vector<double>& nc) {
    NearestGrid grid(to);
    dist.resize(from.size());
    nc.resize(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
      const auto [j, d2] = grid.nearest(from[i]);
      dist[i] = std::sqrt(d2);
      nc[i] = std::min(1.0, std::abs(fn[i].dot(tn[j])));
    }
  };
  std::vector<double> acc, comp, nc_p, nc_g;
  one_way(pred, *pred_normals, gt, *gt_normals, acc, nc_p);
  one_way(gt, *gt_normals, pred, *pred_normals, comp, nc_g);
  CloudMetrics m;
  m.acc_mean = mean(acc);
  m.acc_median = median(acc);
  m.comp_mean = mean(comp);
  m.comp_median = median(comp);
  m.nc_mean = 0.5 * (mean(nc_p) + mean(nc_g));
  m.nc_median = 0.5 * (median(nc_p) + median(nc_g));
  m.overall = 0.5 * (m.acc_mean + m.comp_mean);
  return m;
}

/// Scale-aligned depth errors over one sequence. s = median(D / D̂) over valid
/// pixels with a nonzero prediction; AbsRel = mean |s·D̂ − D| / D; δ counts
/// pixels with max(s·D̂/D, D/(s·D̂)) < 1.25 (non-positive s·D̂ never counts).
inline DepthMetrics depth_metrics(const Tensor<double>& pred, const Tensor<double>& gt, const Tensor<double>& valid) {
  if (pred.shape() != gt.shape() || gt.shape() != valid.shape()) throw_shape("depth_metrics", pred.shape(), gt.shape());
  std::vector<double> ratios;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (valid[i] == 0) continue;
    if (!(gt[i] > 0) || !std::isfinite(gt[i])) throw ContractError("depth_metrics: valid ground-truth depth must be finite and > 0");
    ++n;
    if (pred[i] != 0 && std::isfinite(pred[i])) ratios.push_back(gt[i] / pred[i]);
  }
  if (n == 0) throw ContractError("depth_metrics: no valid pixels");
  DepthMetrics m;
  m.scale = ratios.empty() ? 1.0 : median(ratios);
  double rel = 0;
  std::size_t good = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (valid[i] == 0) continue;
    const double sd = m.scale * pred[i];
    rel += std::isfinite(sd) ? std::abs(sd - gt[i]) / gt[i] : std::numeric_limits<double>::infinity();
    if (sd > 0 && std::max(sd / gt[i], gt[i] / sd) < 1.25) ++good;
  }
  m.abs_rel = rel / static_cast<double>(n);
  m.delta_125 = static_cast<double>(good) / static_cast<double>(n);
  return m;
}

/// Rotation and translation-direction errors (degrees) of the relative pose
/// between frames i and j. Translation directions of zero length compare as
/// 0° against each other and 90° against anything else.
inline std::pair<double, double> relative_pose_errors(const CameraPose& pi, const CameraPose& pj, const CameraPose& gi,
                                                      const CameraPose& gj) {
  const Eigen::Quaterniond rp = pi.rotation().conjugate() * pj.rotation();
  const Eigen::Quaterniond rg = gi.rotation().conjugate() * gj.rotation();
  const double rot = rotation_angle_deg(rp, rg);
  const Eigen::Vector3d tp = pi.rotation_matrix().transpose() * (pj.translation - pi.translation);
  const Eigen::Vector3d tg = gi.rotation_matrix().transpose() * (gj.translation - gi.translation);
  constexpr double tiny = 1e-12;
  const bool zp = tp.norm() < tiny, zg = tg.norm() < tiny;
  double trans;
  if (zp || zg) {
    trans = zp && zg ? 0.0 : 90.0;
  } else {
    trans = std::atan2(tp.cross(tg).norm(), tp.dot(tg)) * 180.0 / std::numbers::pi;
  }
  return {rot, trans};
}

/// Accuracy-vs-threshold curves over all frame pairs and their mean (AUC) for
/// thresholds 1..30 degrees. A pair passes when both errors are below the threshold.
inline PoseMetrics pose_auc30(const std::vector<CameraPose>& pred, const std::vector<CameraPose>& gt) {
  if (pred.size() != gt.size()) throw ContractError("pose_auc30: " + std::to_string(pred.size()) + " predicted vs " +
                                                    std::to_string(gt.size()) + " ground-truth poses");
  if (gt.size() < 2) throw ContractError("pose_auc30: need at least 2 frames");
  std::vector<std::pair<double, double>> errs;
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t j = i + 1; j < gt.size(); ++j) errs.push_back(relative_pose_errors(pred[i], pred[j], gt[i], gt[j]));
  PoseMetrics m;
  const double n = static_cast<double>(errs.size());
  for (int tau = 1; tau <= 30; ++tau) {
    std::size_t r = 0, t = 0, both = 0;
    for (const auto& [er, et] : errs) {
      r += er < tau;
      t += et < tau;
      both += er < tau && et < tau;
    }
    m.rra_curve.push_back(static_cast<double>(r) / n);
    m.rta_curve.push_back(static_cast<double>(t) / n);
    m.curve.push_back(static_cast<double>(both) / n);
  }
  m.auc30 = mean(m.curve);
  return m;
}

// ---- reports ------------------------------------------------------------------

struct Report {
  std::vector<std::pair<std::string, double>> values;

  void add(const std::string& key, double v) { values.emplace_back(key, v); }

  void add(const std::string& prefix, const CloudMetrics& m) {
    add(prefix + "acc_mean", m.acc_mean);
    add(prefix + "acc_median", m.acc_median);
    add(prefix + "comp_mean", m.comp_mean);
    add(prefix + "comp_median", m.comp_median);
    add(prefix + "nc_mean", m.nc_mean);
    add(prefix + "nc_median", m.nc_median);
    add(prefix + "overall", m.overall);
  }

  void add(const std::string& prefix, const DepthMetrics& m) {
    add(prefix + "abs_rel", m.abs_rel);
    add(prefix + "delta_1.25", m.delta_125);
    add(prefix + "scale", m.scale);
  }

  void add(const std::string& prefix, const PoseMetrics& m) { add(prefix + "auc30", m.auc30); }

  double at(const std::string& key) const {
    for (const auto& [k, v] : values)
      if (k == key) return v;
    throw std::out_of_range("Report: no metric '" + key + "'");
  }

  /// One `key = value` line per metric.
  void write_text(std::ostream& os) const {
    const auto old = os.precision(10);
    for (const auto& [k, v] : values) os << k << " = " << v << '\n';
    os.precision(old);
  }

  /// Header row of keys and one row of values.
  void write_csv(std::ostream& os) const {
    const auto old = os.precision(17);
    for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << values[i].first;
    os << '\n';
    for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << values[i].second;
    os << '\n';
    os.precision(old);
  }
};

}  // namespace stream4d::metrics
