#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stream4d/losses.hpp"
#include "stream4d/model.hpp"
#include "stream4d/synth.hpp"

namespace stream4d {

enum class TrainRole { Teacher, Student };

NLOHMANN_JSON_SERIALIZE_ENUM(TrainRole, {{TrainRole::Teacher, "teacher"}, {TrainRole::Student, "student"}})

struct TrainConfig {
  std::size_t epochs = 4;
  std::size_t steps_per_epoch = 250;
  std::size_t frames_per_sample = 10;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  TrainRole role = TrainRole::Student;  // teacher trains with global attention
  bool distill = false;
  double pseudo_gt_blend = 1.0;  // 1 = teacher outputs only, 0 = ground truth only
  bool freeze_encoder = false;   // keep patch_embed and pos_embed fixed

  std::size_t total_steps() const { return epochs * steps_per_epoch; }

  void validate(const ModelConfig& model) const {
    if (epochs == 0 || steps_per_epoch == 0) throw ContractError("TrainConfig: epochs and steps_per_epoch must be > 0");
    if (frames_per_sample == 0 || frames_per_sample > model.max_frames)
      throw ContractError("TrainConfig: frames_per_sample " + std::to_string(frames_per_sample) + " outside 1.." +
                          std::to_string(model.max_frames));
    if (!(warmup_fraction > 0 && warmup_fraction < 1)) throw ContractError("TrainConfig: warmup_fraction must be in (0, 1)");
    if (!(peak_lr >= 0) || !std::isfinite(peak_lr)) throw ContractError("TrainConfig: peak_lr must be finite and >= 0");
    if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw ContractError("TrainConfig: weight_decay must be finite and >= 0");
    if (!(pseudo_gt_blend >= 0 && pseudo_gt_blend <= 1)) throw ContractError("TrainConfig: pseudo_gt_blend must be in [0, 1]");
    if (distill && role != TrainRole::Student) throw ContractError("TrainConfig: only a student can be distilled");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, steps_per_epoch, frames_per_sample, peak_lr,
                                                warmup_fraction, weight_decay, seed, role, distill, pseudo_gt_blend,
                                                freeze_encoder)

/// Linear warmup from 0 to peak, then cosine decay to 0 at `total_steps`.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps) throw ContractError("lr_at: step " + std::to_string(step) + " > total " + std::to_string(total_steps));
  const double warm = cfg.warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.peak_lr * s / warm;
  if (warm >= static_cast<double>(total_steps)) return cfg.peak_lr;
  const double progress = (s - warm) / (static_cast<double>(total_steps) - warm);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// First and second moments per parameter, in parameter order.
template <class T>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::vector<Tensor<T>> m, v;
};

/// One AdamW update with decoupled weight decay. Parameters without a gradient
/// are treated as having a zero gradient. A non-finite gradient aborts the step
/// before any parameter is touched. `frozen` parameters are skipped entirely.
template <class T>
void optimizer_step(std::vector<std::pair<std::string, Var<T>>>& params, AdamState<T>& st, double lr, double weight_decay,
                    const std::function<bool(const std::string&)>& frozen = {}) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    if (p.grad().shape() != p.shape()) throw_shape(("optimizer_step(" + name + ")").c_str(), p.grad().shape(), p.shape());
    for (std::size_t i = 0; i < p.size(); ++i)
      if (!std::isfinite(static_cast<double>(p.grad()[i])))
        throw ContractError("optimizer_step: non-finite gradient in parameter '" + name + "'");
  }
  if (st.m.empty()) {
    for (const auto& [_, p] : params) {
      st.m.emplace_back(p.shape(), T{0});
      st.v.emplace_back(p.shape(), T{0});
    }
  }
  if (st.m.size() != params.size()) throw ContractError("optimizer_step: optimizer state does not match the parameter list");
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    if (frozen && frozen(name)) continue;
    auto& w = p.mutable_value();
    auto& m = st.m[k];
    auto& v = st.v[k];
    const bool g = p.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g ? static_cast<double>(p.grad()[i]) : 0.0;
      const double mi = st.beta1 * static_cast<double>(m[i]) + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * static_cast<double>(v[i]) + (1.0 - st.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double wi = static_cast<double>(w[i]);
      wi -= lr * weight_decay * wi;
      wi -= lr * (mi / c1) / (std::sqrt(vi / c2) + st.eps);
      w[i] = static_cast<T>(wi);
    }
  }
}

template <class T>
void zero_grad(std::vector<std::pair<std::string, Var<T>>>& params) {
  for (auto& [_, p] : params) p.zero_grad();
}

struct StepStats {
  double camera = 0, depth = 0, pmap = 0, track = 0, total = 0;
};

namespace detail {

template <class T>
StepStats backward_total(const LossParts<T>& parts, const LossWeights& w, Tape<T>& tape) {
  auto total = total_loss(parts, w);
  StepStats s{static_cast<double>(parts.camera.value()[0]), static_cast<double>(parts.depth.value()[0]),
              static_cast<double>(parts.pmap.value()[0]), static_cast<double>(parts.track.value()[0]),
              static_cast<double>(total.value()[0])};
  tape.backward(total);
  return s;
}

template <class T>
std::vector<const Tensor<T>*> image_ptrs(const synth::Batch<T>& b) {
  std::vector<const Tensor<T>*> out;
  for (const auto& im : b.images) out.push_back(&im);
  return out;
}

}  // namespace detail

/// Ground-truth targets blended with teacher predictions: b·teacher + (1 − b)·gt
/// for every map, with the rotation slerped after aligning quaternion signs and
/// the visibility target taken as the teacher's probability.
template <class T>
Targets<T> blend_targets(const Targets<T>& gt, const Predictions<T>& teacher, double blend) {
  Targets<T> out = gt;
  const T b = static_cast<T>(blend), a = T{1} - b;
  auto mix = [&](Tensor<T>& dst, const Tensor<T>& src) {
    if (dst.shape() != src.shape()) throw_shape("blend_targets", dst.shape(), src.shape());
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a * dst[i] + b * src[i];
  };
  mix(out.depth, teacher.depth.value());
  mix(out.points, teacher.points.value());
  if (teacher.queries > 0) {
    mix(out.tracks, teacher.tracks.value());
    Tensor<T> prob(teacher.visibility_logits.shape());
    for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = T{1} / (T{1} + std::exp(-teacher.visibility_logits.value()[i]));
    mix(out.visibility, prob);
  }
  const auto& tp = teacher.pose.value();
  if (out.pose.shape() != tp.shape()) throw_shape("blend_targets(pose)", out.pose.shape(), tp.shape());
  for (std::size_t f = 0; f < tp.rows(); ++f) {
    for (std::size_t c : {0u, 1u, 2u, 7u, 8u}) out.pose.at(f, c) = a * gt.pose.at(f, c) + b * tp.at(f, c);
    Eigen::Quaterniond qg(gt.pose.at(f, 6), gt.pose.at(f, 3), gt.pose.at(f, 4), gt.pose.at(f, 5));
    Eigen::Quaterniond qt(tp.at(f, 6), tp.at(f, 3), tp.at(f, 4), tp.at(f, 5));
    qg.normalize();
    qt.normalize();
    if (qg.dot(qt) < 0) qt.coeffs() = -qt.coeffs();
    if (blend == 0) continue;
    const Eigen::Quaterniond q = blend == 1 ? qt : qg.slerp(blend, qt).normalized();
    out.pose.at(f, 3) = static_cast<T>(q.x());
    out.pose.at(f, 4) = static_cast<T>(q.y());
    out.pose.at(f, 5) = static_cast<T>(q.z());
    out.pose.at(f, 6) = static_cast<T>(q.w());
  }
  return out;
}

/// Forward + backward against ground truth. Gradients accumulate into `model`.
template <class T>
StepStats supervised_step(const Model<T>& model, const synth::Batch<T>& batch, const LossWeights& w, TemporalMask mode) {
  Tape<T> tape;
  TapeScope<T> scope(tape);
  auto pr = model.forward(detail::image_ptrs(batch), batch.queries, mode);
  return detail::backward_total(loss_parts(pr, batch.targets, w), w, tape);
}

/// Teacher (global attention, no tape) produces pseudo ground truth; the causal
/// student is trained against the blended targets. Only the student gets gradients.
template <class T>
StepStats distill_step(const Model<T>& student, const Model<T>& teacher, const synth::Batch<T>& batch, const LossWeights& w,
                       double blend) {
  if (!(student.config() == teacher.config()))
    throw ContractError("distill_step: teacher and student configurations differ");
  if (!(blend >= 0 && blend <= 1)) throw ContractError("distill_step: blend must be in [0, 1]");
  const auto images = detail::image_ptrs(batch);
  Targets<T> targets;
  {
    NoGradScope<T> no_grad;
    const auto pseudo = teacher.forward(images, batch.queries, TemporalMask::Global);
    targets = blend_targets(batch.targets, pseudo, blend);
  }
  Tape<T> tape;
  TapeScope<T> scope(tape);
  auto pr = student.forward(images, batch.queries, TemporalMask::Causal);
  return detail::backward_total(loss_parts(pr, targets, w), w, tape);
}

/// Per-epoch checkpoint path next to `final_path`: run.ckpt → run.epoch3.ckpt.
inline std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& final_path, std::size_t epoch) {
  auto p = final_path;
  p.replace_filename(final_path.stem().string() + ".epoch" + std::to_string(epoch) + final_path.extension().string());
  return p;
}

struct TrainOutputs {
  std::filesystem::path checkpoint;  // final; per-epoch copies beside it
  std::filesystem::path log_csv;     // empty = no log
};

/// Trains `model` in place on random windows of the dataset. Each step draws a
/// sequence and a window start from the seeded generator, re-anchors the window
/// on its first frame and takes one optimizer step.
template <class T>
std::vector<StepStats> train(Model<T>& model, const TrainConfig& cfg, const LossWeights& w,
                             const std::vector<synth::Sequence>& dataset, const TrainOutputs& out,
                             const Model<T>* teacher = nullptr) {
  cfg.validate(model.config());
  w.validate();
  if (dataset.empty()) throw ContractError("train: dataset is empty");
  if (cfg.distill && !teacher) throw ContractError("train: distillation needs a teacher");
  if (teacher && !(teacher->config() == model.config())) throw ContractError("train: teacher and student configurations differ");
  const auto& mc = model.config();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    if (s.height != mc.image_h || s.width != mc.image_w)
      throw ContractError("train: sequence " + std::to_string(i) + " is " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                          ", model expects " + std::to_string(mc.image_h) + "x" + std::to_string(mc.image_w));
    if (s.frames.size() < cfg.frames_per_sample)
      throw ContractError("train: sequence " + std::to_string(i) + " has " + std::to_string(s.frames.size()) +
                          " frames, fewer than frames_per_sample " + std::to_string(cfg.frames_per_sample));
    if (!s.scene && s.frames.size() != cfg.frames_per_sample)
      throw ContractError("train: sequence " + std::to_string(i) + " has no scene description, so it cannot be re-windowed");
  }

  std::ofstream log;
  if (!out.log_csv.empty()) {
    log.open(out.log_csv);
    if (!log) throw io::IoError("cannot open training log " + out.log_csv.string());
    log << "step,lr,L_camera,L_depth,L_pmap,L_track,L_total\n";
    log.precision(9);
  }
  std::function<bool(const std::string&)> frozen;
  if (cfg.freeze_encoder)
    frozen = [](const std::string& n) { return n.starts_with("patch_embed.") || n == "pos_embed"; };
  const TemporalMask mode = cfg.role == TrainRole::Teacher ? TemporalMask::Global : TemporalMask::Causal;

  std::mt19937_64 rng(cfg.seed);
  AdamState<T> opt;
  std::vector<StepStats> history;
  const std::size_t total = cfg.total_steps(), n = cfg.frames_per_sample;
  auto& params = model.parameters();
  for (std::size_t epoch = 1, step = 0; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < cfg.steps_per_epoch; ++k, ++step) {
      const auto& seq = dataset[rng() % dataset.size()];
      const std::size_t start = rng() % (seq.frames.size() - n + 1);
      const std::uint64_t query_seed = rng();
      const auto batch = seq.scene ? synth::to_batch<T>(synth::make_window(seq, start, n, query_seed)) : synth::to_batch<T>(seq);
      zero_grad(params);
      StepStats s;
      if (cfg.distill && teacher)
        s = distill_step(model, *teacher, batch, w, cfg.pseudo_gt_blend);
      else
        s = supervised_step(model, batch, w, mode);
      const double lr = lr_at(step, total, cfg);
      optimizer_step(params, opt, lr, cfg.weight_decay, frozen);
      history.push_back(s);
      if (log.is_open()) {
        log << step << ',' << lr << ',' << s.camera << ',' << s.depth << ',' << s.pmap << ',' << s.track << ',' << s.total << '\n';
        if (!log) throw io::IoError("write failed on training log " + out.log_csv.string());
      }
    }
    if (!out.checkpoint.empty() && epoch < cfg.epochs) model.save(epoch_checkpoint_path(out.checkpoint, epoch));
  }
  zero_grad(params);
  if (!out.checkpoint.empty()) {
    model.save(epoch_checkpoint_path(out.checkpoint, cfg.epochs));
    model.save(out.checkpoint);
  }
  return history;
}

}  // namespace stream4d
