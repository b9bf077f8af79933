#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stream4d/model.hpp"
#include "stream4d/ops.hpp"

namespace stream4d {

struct LossWeights {
  double lambda_track = 0.05;
  double alpha = 0.2;        // weight of the −α·log Σ confidence regularizer
  double huber_delta = 1.0;  // scene units

  void validate() const {
    if (!(lambda_track > 0) || !(alpha > 0) || !(huber_delta > 0))
      throw ContractError("LossWeights: lambda_track, alpha and huber_delta must all be > 0");
  }
};

namespace losses {

namespace detail {

inline void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw_shape(op, a, b);
}

template <class T>
void require_conf(const char* op, const Var<T>& conf) {
  for (std::size_t i = 0; i < conf.size(); ++i)
    if (!(conf.value()[i] >= T{1}))
      throw ContractError(std::string(op) + ": confidence " + std::to_string(static_cast<double>(conf.value()[i])) +
                          " < 1 at element " + std::to_string(i));
}

}  // namespace detail

/// Σ_i Huber(ĝ_i − g_i) over all 9 pose dims. The predicted quaternion is
/// flipped onto the target's hemisphere first, since q and −q are the same rotation.
template <class T>
Var<T> camera_loss(const Var<T>& pred, const Var<T>& target, T delta) {
  detail::require_same("camera_loss", pred.shape(), target.shape());
  if (pred.value().cols() != CameraPose::kDims) throw ShapeError("camera_loss: pose rows must have 9 values, got " + shape_str(pred.shape()));
  Tensor<T> sign(pred.shape(), T{1});
  for (std::size_t r = 0; r < pred.value().rows(); ++r) {
    T dot{0};
    for (std::size_t c = 3; c < 7; ++c) dot += pred.value().at(r, c) * target.value().at(r, c);
    if (dot < T{0})
      for (std::size_t c = 3; c < 7; ++c) sign.at(r, c) = T{-1};
  }
  return ops::sum(ops::huber(ops::sub(ops::mul(pred, Var<T>::constant(std::move(sign))), target), delta));
}

/// Confidence-weighted L1 regression over stacked maps.
///   pred, target: B × C × H × W (C may be absent: B × H × W)
///   conf:         B × H × W, shared over channels, ≥ 1
///   valid:        B × H × W, nonzero = supervised
/// Σ_valid Σ·|r| + Σ_valid Σ·|∇r| − α Σ_valid log Σ, where r = pred − target and
/// ∇ takes forward differences in x and y; a difference needs both pixels valid.
template <class T>
Var<T> confidence_regression_loss(const char* op, const Var<T>& pred, const Var<T>& conf, const Var<T>& target,
                                  const Tensor<T>& valid, T alpha) {
  detail::require_same(op, pred.shape(), target.shape());
  detail::require_same(op, conf.shape(), valid.shape());
  if (conf.shape().size() < 2) throw ShapeError(std::string(op) + ": confidence must be at least H×W, got " + shape_str(conf.shape()));
  const Shape& cs = conf.shape();
  const std::size_t H = cs[cs.size() - 2], W = cs[cs.size() - 1], HW = H * W, B = conf.size() / HW;
  if (pred.size() % conf.size() != 0) throw_shape(op, pred.shape(), conf.shape());
  const std::size_t C = pred.size() / conf.size();
  if (C > 1 && (pred.shape().size() != cs.size() + 1 || pred.shape()[cs.size() - 2] != C)) throw_shape(op, pred.shape(), conf.shape());
  detail::require_conf(op, conf);

  auto r = ops::sub(pred, target);
  // Flat indices into r (per channel) and into conf, for each supervised term.
  std::vector<std::size_t> ri, ci, ra, rb, cg;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t p = b * HW + y * W + x;
        if (valid[p] == T{0}) continue;
        const bool right = x + 1 < W && valid[p + 1] != T{0};
        const bool down = y + 1 < H && valid[p + W] != T{0};
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t q = (b * C + c) * HW + y * W + x;
          ri.push_back(q);
          ci.push_back(p);
          if (right) {
            ra.push_back(q + 1);
            rb.push_back(q);
            cg.push_back(p);
          }
          if (down) {
            ra.push_back(q + W);
            rb.push_back(q);
            cg.push_back(p);
          }
        }
      }
  std::vector<std::size_t> pix;
  for (std::size_t p = 0; p < conf.size(); ++p)
    if (valid[p] != T{0}) pix.push_back(p);
  if (pix.empty()) return Var<T>::constant(Tensor<T>::scalar(T{0}));

  const std::size_t n = ri.size(), ng = ra.size(), np = pix.size();
  auto data_term = ops::sum(ops::mul(ops::gather(conf, std::move(ci), {n}), ops::abs(ops::gather(r, std::move(ri), {n}))));
  auto log_term = ops::scale(ops::sum(ops::log(ops::gather(conf, std::move(pix), {np}))), -alpha);
  if (ng == 0) return ops::add(data_term, log_term);
  auto grad_r = ops::sub(ops::gather(r, std::move(ra), {ng}), ops::gather(r, std::move(rb), {ng}));
  auto grad_term = ops::sum(ops::mul(ops::gather(conf, std::move(cg), {ng}), ops::abs(grad_r)));
  return ops::add(ops::add(data_term, grad_term), log_term);
}

/// Depth maps B × H × W (or H × W).
template <class T>
Var<T> depth_loss(const Var<T>& pred, const Var<T>& conf, const Var<T>& target, const Tensor<T>& valid, T alpha) {
  detail::require_same("depth_loss", pred.shape(), conf.shape());
  return confidence_regression_loss("depth_loss", pred, conf, target, valid, alpha);
}

/// Point maps B × 3 × H × W with a shared per-pixel confidence B × H × W.
/// The log Σ regularizer is counted once per pixel, not per channel.
template <class T>
Var<T> pointmap_loss(const Var<T>& pred, const Var<T>& conf, const Var<T>& target, const Tensor<T>& valid, T alpha) {
  const Shape& s = pred.shape();
  if (s.size() < 3 || s[s.size() - 3] != 3) throw ShapeError("pointmap_loss: expected …×3×H×W, got " + shape_str(s));
  return confidence_regression_loss("pointmap_loss", pred, conf, target, valid, alpha);
}

/// Σ ‖y − ŷ‖₁ over visible (query, frame) rows plus Σ BCE(visibility logits, targets).
///   pred, target: R × 2 pixels; logits, visible: R × 1 in [0, 1]
/// A row counts as visible when its (possibly soft) target is ≥ ½.
template <class T>
Var<T> track_loss(const Var<T>& pred, const Var<T>& target, const Var<T>& logits, const Tensor<T>& visible) {
  detail::require_same("track_loss", pred.shape(), target.shape());
  detail::require_same("track_loss(visibility)", logits.shape(), visible.shape());
  if (pred.value().cols() != 2 || logits.value().rows() != pred.value().rows())
    throw ShapeError("track_loss: tracks " + shape_str(pred.shape()) + " vs visibility " + shape_str(logits.shape()));
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < visible.size(); ++r)
    if (visible[r] >= T{0.5}) {
      idx.push_back(2 * r);
      idx.push_back(2 * r + 1);
    }
  auto bce = ops::sum(ops::bce_with_logits(logits, visible));
  if (idx.empty()) return bce;
  const std::size_t n = idx.size();
  auto picked = ops::gather(pred, idx, {n});
  auto diff = ops::sub(picked, ops::gather(target, std::move(idx), {n}));
  return ops::add(ops::sum(ops::abs(diff)), bce);
}

}  // namespace losses

template <class T>
struct LossParts {
  Var<T> camera, depth, pmap, track;
};

/// L = L_camera + L_depth + L_pmap + λ·L_track. Throws if any part is not finite.
template <class T>
Var<T> total_loss(const LossParts<T>& parts, const LossWeights& w) {
  const std::pair<const char*, const Var<T>*> named[] = {
      {"L_camera", &parts.camera}, {"L_depth", &parts.depth}, {"L_pmap", &parts.pmap}, {"L_track", &parts.track}};
  for (const auto& [name, v] : named) {
    if (!*v || v->size() != 1) throw ContractError(std::string("total_loss: ") + name + " is not a scalar");
    if (!std::isfinite(static_cast<double>(v->value()[0])))
      throw ContractError(std::string("total_loss: ") + name + " is not finite");
  }
  return ops::add(ops::add(ops::add(parts.camera, parts.depth), parts.pmap),
                  ops::scale(parts.track, static_cast<T>(w.lambda_track)));
}

/// Supervision targets for a stack of T frames; layouts mirror `Predictions`.
template <class T>
struct Targets {
  Tensor<T> pose;        // T × 9
  Tensor<T> depth;       // T × H × W
  Tensor<T> points;      // T × 3 × H × W
  Tensor<T> valid;       // T × H × W
  Tensor<T> tracks;      // (T·M) × 2
  Tensor<T> visibility;  // (T·M) × 1
};

template <class T>
LossParts<T> loss_parts(const Predictions<T>& pr, const Targets<T>& tg, const LossWeights& w) {
  LossParts<T> parts;
  const T alpha = static_cast<T>(w.alpha);
  parts.camera = losses::camera_loss(pr.pose, Var<T>::constant(tg.pose), static_cast<T>(w.huber_delta));
  parts.depth = losses::depth_loss(pr.depth, pr.depth_conf, Var<T>::constant(tg.depth), tg.valid, alpha);
  parts.pmap = losses::pointmap_loss(pr.points, pr.point_conf, Var<T>::constant(tg.points), tg.valid, alpha);
  if (pr.queries > 0)
    parts.track = losses::track_loss(pr.tracks, Var<T>::constant(tg.tracks), pr.visibility_logits, tg.visibility);
  else
    parts.track = Var<T>::constant(Tensor<T>::scalar(T{0}));
  return parts;
}

}  // namespace stream4d
