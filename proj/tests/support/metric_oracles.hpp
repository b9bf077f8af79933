#pragma once

// Brute-force 64-bit references for the evaluation metrics: linear scans,
// Jacobi eigenvectors, sorted medians and rotation-matrix angles. They share
// no code with the implementations they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "stream4d/metrics.hpp"

namespace stream4d::testing {

using metrics::CloudMetrics;
using metrics::DepthMetrics;
using metrics::Points;

inline std::pair<std::size_t, double> brute_nearest(const Points& pts, const Eigen::Vector3d& q) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Eigen::Vector3d d = pts[i] - q;
    const double d2 = d.x() * d.x() + d.y() * d.y() + d.z() * d.z();
    if (d2 < bd) {
      bd = d2;
      best = i;
    }
  }
  return {best, bd};
}

// Cyclic Jacobi eigen-decomposition of a symmetric 3×3 matrix; returns the
// eigenvector of the smallest eigenvalue.
inline Eigen::Vector3d jacobi_smallest(Eigen::Matrix3d a) {
  Eigen::Matrix3d v = Eigen::Matrix3d::Identity();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = std::abs(a(0, 1)) + std::abs(a(0, 2)) + std::abs(a(1, 2));
    if (off < 1e-300) break;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        if (a(p, q) == 0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        Eigen::Matrix3d j = Eigen::Matrix3d::Identity();
        j(p, p) = c;
        j(q, q) = c;
        j(p, q) = s;
        j(q, p) = -s;
        a = j.transpose() * a * j;
        v = v * j;
      }
  }
  int k = 0;
  for (int i = 1; i < 3; ++i)
    if (a(i, i) < a(k, k)) k = i;
  return v.col(k).normalized();
}

inline Points brute_normals(const Points& pts, std::size_t k) {
  Points out;
  for (const auto& p : pts) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = 0; i < pts.size(); ++i) d.emplace_back((pts[i] - p).squaredNorm(), i);
    std::sort(d.begin(), d.end());
    const std::size_t n = std::min(k, d.size());
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) c += pts[d[i].second];
    c /= double(n);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i < n; ++i) cov += (pts[d[i].second] - c) * (pts[d[i].second] - c).transpose();
    out.push_back(jacobi_smallest(cov));
  }
  return out;
}

inline double sorted_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

inline double plain_mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

inline CloudMetrics brute_cloud(const Points& pred, const Points& gt) {
  const auto pn = brute_normals(pred, 16), gn = brute_normals(gt, 16);
  std::vector<double> acc, comp, ncp, ncg;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto [j, d2] = brute_nearest(gt, pred[i]);
    acc.push_back(std::sqrt(d2));
    ncp.push_back(std::min(1.0, std::abs(pn[i].dot(gn[j]))));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto [j, d2] = brute_nearest(pred, gt[i]);
    comp.push_back(std::sqrt(d2));
    ncg.push_back(std::min(1.0, std::abs(gn[i].dot(pn[j]))));
  }
  CloudMetrics m;
  m.acc_mean = plain_mean(acc);
  m.acc_median = sorted_median(acc);
  m.comp_mean = plain_mean(comp);
  m.comp_median = sorted_median(comp);
  m.nc_mean = (plain_mean(ncp) + plain_mean(ncg)) / 2;
  m.nc_median = (sorted_median(ncp) + sorted_median(ncg)) / 2;
  m.overall = (m.acc_mean + m.comp_mean) / 2;
  return m;
}

inline DepthMetrics brute_depth(const Tensor<double>& pred, const Tensor<double>& gt, const Tensor<double>& valid) {
  std::vector<double> r;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (valid[i] != 0 && pred[i] != 0) r.push_back(gt[i] / pred[i]);
  DepthMetrics m;
  m.scale = r.empty() ? 1.0 : sorted_median(r);
  double rel = 0, good = 0, n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (valid[i] == 0) continue;
    const double sd = m.scale * pred[i];
    rel += std::abs(sd - gt[i]) / gt[i];
    good += sd > 0 && sd / gt[i] < 1.25 && gt[i] / sd < 1.25;
    ++n;
  }
  m.abs_rel = rel / n;
  m.delta_125 = good / n;
  return m;
}

inline double matrix_angle_deg(const Eigen::Matrix3d& r) {
  return std::acos(std::clamp((r.trace() - 1) / 2, -1.0, 1.0)) * 180 / std::numbers::pi;
}

inline double brute_auc(const std::vector<CameraPose>& pred, const std::vector<CameraPose>& gt) {
  std::vector<double> er, et;
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t j = i + 1; j < gt.size(); ++j) {
      const Eigen::Matrix3d rp = pred[i].rotation_matrix().transpose() * pred[j].rotation_matrix();
      const Eigen::Matrix3d rg = gt[i].rotation_matrix().transpose() * gt[j].rotation_matrix();
      er.push_back(matrix_angle_deg(rp.transpose() * rg));
      const Eigen::Vector3d tp = pred[i].rotation_matrix().transpose() * (pred[j].translation - pred[i].translation);
      const Eigen::Vector3d tg = gt[i].rotation_matrix().transpose() * (gt[j].translation - gt[i].translation);
      et.push_back(std::acos(std::clamp(tp.normalized().dot(tg.normalized()), -1.0, 1.0)) * 180 / std::numbers::pi);
    }
  double auc = 0;
  for (int tau = 1; tau <= 30; ++tau) {
    double ok = 0;
    for (std::size_t k = 0; k < er.size(); ++k) ok += er[k] < tau && et[k] < tau;
    auc += ok / double(er.size());
  }
  return auc / 30;
}

// ---- random instances -------------------------------------------------------------

/// Gaussian, nearly planar or (with `lattice`) half-integer lattice clouds. Lattice
/// clouds have exact distance ties but can have non-unique normals.
inline Points random_cloud(std::mt19937_64& rng, std::size_t n, double scale, const Eigen::Vector3d& offset, bool lattice = true) {
  std::normal_distribution<double> g(0, 1);
  std::uniform_int_distribution<int> kind(0, lattice ? 2 : 1);
  Points p;
  const int k = kind(rng);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector3d x(g(rng), g(rng), g(rng));
    if (k == 1) x.z() = 0.01 * x.z();           // nearly planar
    if (k == 2) x = x.array().round() / 2;       // lattice with many exact ties
    p.push_back(offset + scale * x);
  }
  return p;
}

/// Half-integer lattice points: many exact distance ties and duplicates.
inline Points lattice_cloud(std::mt19937_64& rng, std::size_t n, const Eigen::Vector3d& offset) {
  std::normal_distribution<double> g(0, 1);
  Points p;
  for (std::size_t i = 0; i < n; ++i) p.push_back(offset + Eigen::Vector3d(g(rng), g(rng), g(rng)).array().round().matrix() / 2);
  return p;
}

inline CameraPose random_pose(std::mt19937_64& rng, double spread) {
  std::normal_distribution<double> g(0, 1);
  CameraPose p;
  p.translation = Eigen::Vector3d(g(rng), g(rng), g(rng)) * spread;
  p.set_rotation(Eigen::Quaterniond(Eigen::AngleAxisd(spread * g(rng), Eigen::Vector3d(g(rng), g(rng), g(rng)).normalized())));
  return p;
}

inline CameraPose perturb(const CameraPose& p, std::mt19937_64& rng, double deg, double trans) {
  std::normal_distribution<double> g(0, 1);
  CameraPose q = p;
  const double a = deg * std::abs(g(rng)) * std::numbers::pi / 180;
  q.set_rotation(p.rotation() * Eigen::Quaterniond(Eigen::AngleAxisd(a, Eigen::Vector3d(g(rng), g(rng), g(rng)).normalized())));
  q.translation += trans * Eigen::Vector3d(g(rng), g(rng), g(rng));
  return q;
}

}  // namespace stream4d::testing
