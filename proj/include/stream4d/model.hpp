#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stream4d/attention.hpp"
#include "stream4d/geometry.hpp"
#include "stream4d/io.hpp"
#include "stream4d/ops.hpp"

namespace stream4d {

struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t layers = 4;  // one layer = spatial attn + temporal attn + MLP
  std::size_t heads = 4;
  std::size_t max_frames = 48;
  std::size_t mlp_ratio = 4;
  std::size_t head_channels = 32;  // width after the first upsampling stage
  std::size_t up1 = 4;             // first transpose-conv stride; up1 * up2 == patch
  std::size_t up2 = 2;
  std::size_t track_features = 8;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t patches() const { return grid_h() * grid_w(); }
  /// Patch tokens plus the camera token.
  std::size_t tokens_per_frame() const { return patches() + 1; }
  std::size_t pixels() const { return image_h * image_w; }
  /// point(3) + point conf + depth + depth conf + track features
  std::size_t head_outputs() const { return 6 + track_features; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ContractError("ModelConfig: " + m); };
    if (patch == 0 || image_h == 0 || image_w == 0) fail("zero image or patch size");
    if (image_h % patch || image_w % patch) fail("image size not divisible by patch size");
    if (heads == 0 || dim % heads) fail("dim not divisible by heads");
    if (layers == 0) fail("need at least one layer");
    if (max_frames == 0) fail("max_frames must be positive");
    if (up1 * up2 != patch) fail("up1 * up2 must equal patch");
    if (head_channels == 0 || track_features == 0 || mlp_ratio == 0) fail("zero head width");
  }

  bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, image_h, image_w, patch, dim, layers, heads, max_frames, mlp_ratio,
                                   head_channels, up1, up2, track_features)

/// Encoded tokens of one frame; row 0 is the camera token.
template <class T>
struct FrameTokens {
  Var<T> tokens;  // tokens_per_frame × dim
  std::int64_t frame_index = 1;
};

/// Head outputs for a stack of T frames, kept on the tape for training.
template <class T>
struct Predictions {
  Var<T> pose;               // T × 9: translation, quaternion (x,y,z,w), fov (h,v)
  Var<T> points;             // T × 3 × H × W, frame-1 world coordinates
  Var<T> point_conf;         // T × H × W, ≥ 1
  Var<T> depth;              // T × H × W, camera-frame z
  Var<T> depth_conf;         // T × H × W, ≥ 1
  Var<T> tracks;             // (T·M) × 2 pixel coordinates, frame-major
  Var<T> visibility_logits;  // (T·M) × 1
  std::size_t frames = 0;
  std::size_t queries = 0;
};

/// Plain per-frame prediction record (inference output).
struct PredictionSet {
  CameraPose pose;
  Tensor<float> points;      // 3 × H × W
  Tensor<float> point_conf;  // H × W
  Tensor<float> depth;       // H × W
  Tensor<float> depth_conf;  // H × W
  Tensor<float> tracks;      // M × 2
  Tensor<float> visibility_logits;  // M
};

namespace detail {

// Indices rearranging per-token blocks of s·s·ch channels into an
// upsampled pixel grid (depth-to-space), over `frames` stacked grids.
inline std::vector<std::size_t> depth_to_space_indices(std::size_t frames, std::size_t gh, std::size_t gw, std::size_t s,
                                                       std::size_t ch) {
  const std::size_t oh = gh * s, ow = gw * s, in_cols = s * s * ch;
  std::vector<std::size_t> idx;
  idx.reserve(frames * oh * ow * ch);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t token = f * gh * gw + (y / s) * gw + (x / s);
        const std::size_t sub = (y % s) * s + (x % s);
        for (std::size_t c = 0; c < ch; ++c) idx.push_back(token * in_cols + sub * ch + c);
      }
  return idx;
}

inline std::vector<std::int64_t> frame_range(std::int64_t first, std::size_t n) {
  std::vector<std::int64_t> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = first + static_cast<std::int64_t>(i);
  return f;
}

}  // namespace detail

/// Per-session streaming state: the temporal-layer KV cache plus the query
/// features sampled from frame 1 for the track head.
template <class T>
struct StreamSession {
  KVCache<T> cache;
  Tensor<T> queries;         // M × 2 pixel coordinates in frame 1
  Tensor<T> query_features;  // M × track_features, set after frame 1
  std::size_t frames_seen = 0;
};

/// Causal spatio-temporal transformer with camera, geometry and track heads.
/// Teacher and student share this class; they differ only in the temporal mask.
template <class T>
class Model {
 public:
  using Param = std::pair<std::string, Var<T>>;

  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param>& parameters() { return params_; }
  const std::vector<Param>& parameters() const { return params_; }

  const Var<T>& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("Model: no parameter '" + name + "'");
    return params_[it->second].second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }

  /// Deep copy of all parameter values into an independent model.
  Model clone() const {
    Model m(cfg_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i) m.params_[i].second.mutable_value() = params_[i].second.value();
    return m;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m(cfg_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i)
      m.parameters()[i].second.mutable_value() = params_[i].second.value().template cast<U>();
    return m;
  }

  AttentionParams<T> spatial(std::size_t l) const { return attn("layer" + std::to_string(l) + ".spatial"); }
  AttentionParams<T> temporal(std::size_t l) const { return attn("layer" + std::to_string(l) + ".temporal"); }

  // ---- encoder ---------------------------------------------------------

  /// Non-overlapping p×p patches of a 3×H×W image, one row per patch
  /// (row-major over the patch grid), features ordered (channel, dy, dx).
  Tensor<T> patchify(const Tensor<T>& image) const {
    const Shape expect{3, cfg_.image_h, cfg_.image_w};
    if (image.shape() != expect) throw_shape("encode", expect, image.shape());
    const std::size_t p = cfg_.patch, gw = cfg_.grid_w(), W = cfg_.image_w, H = cfg_.image_h;
    Tensor<T> out({cfg_.patches(), 3 * p * p});
    for (std::size_t py = 0; py < cfg_.grid_h(); ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        T* row = out.data() + (py * gw + px) * 3 * p * p;
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
              *row++ = image[c * H * W + (py * p + dy) * W + px * p + dx];
      }
    return out;
  }

  /// Encodes consecutive frames starting at time step `first_index` (≥ 1) into
  /// stacked tokens (T·N × C): patch embedding + 2D position embedding, camera
  /// token prepended per frame, temporal index embedding added to every token.
  Var<T> encode_frames(const std::vector<const Tensor<T>*>& images, std::int64_t first_index) const {
    const std::size_t t = images.size();
    if (t == 0) throw ContractError("encode: no frames");
    if (first_index < 1 || static_cast<std::size_t>(first_index) + t - 1 > cfg_.max_frames)
      throw ContractError("encode: frame indices " + std::to_string(first_index) + ".." +
                          std::to_string(first_index + static_cast<std::int64_t>(t) - 1) + " outside 1.." +
                          std::to_string(cfg_.max_frames));
    const std::size_t P = cfg_.patches(), N = cfg_.tokens_per_frame(), C = cfg_.dim, F = 3 * cfg_.patch * cfg_.patch;
    Tensor<T> patches({t * P, F});
    for (std::size_t f = 0; f < t; ++f) {
      const auto pf = patchify(*images[f]);
      std::copy(pf.vec().begin(), pf.vec().end(), patches.vec().begin() + static_cast<std::ptrdiff_t>(f * P * F));
    }
    std::vector<std::size_t> pos_idx(t * P * C);
    for (std::size_t i = 0; i < pos_idx.size(); ++i) pos_idx[i] = i % (P * C);
    auto patch_tok = ops::add(ops::linear(Var<T>::constant(std::move(patches)), param("patch_embed.weight"), param("patch_embed.bias")),
                              ops::gather(param("pos_embed"), std::move(pos_idx), {t * P, C}));
    // Interleave: [cam, patches of frame 0, cam, patches of frame 1, ...]
    auto pool = ops::concat_rows<T>({param("camera_token"), patch_tok});
    std::vector<std::size_t> tok_idx(t * N * C), time_idx(t * N * C);
    for (std::size_t f = 0; f < t; ++f) {
      const std::size_t time_row = static_cast<std::size_t>(first_index - 1) + f;
      for (std::size_t k = 0; k < N; ++k) {
        const std::size_t src_row = k == 0 ? 0 : 1 + f * P + (k - 1);
        for (std::size_t c = 0; c < C; ++c) {
          tok_idx[(f * N + k) * C + c] = src_row * C + c;
          time_idx[(f * N + k) * C + c] = time_row * C + c;
        }
      }
    }
    return ops::add(ops::gather(pool, std::move(tok_idx), {t * N, C}),
                    ops::gather(param("time_embed"), std::move(time_idx), {t * N, C}));
  }

  FrameTokens<T> encode(const Tensor<T>& image, std::int64_t frame_index) const {
    return {encode_frames({&image}, frame_index), frame_index};
  }

  // ---- decoder ---------------------------------------------------------

  /// Full-sequence decoder over stacked frames (training path, and the teacher
  /// with `TemporalMask::Global`). Returns geometry tokens, stacked.
  Var<T> decode(const Var<T>& tokens, const std::vector<std::int64_t>& frame_index, TemporalMask mode) const {
    const std::size_t N = cfg_.tokens_per_frame();
    if (frame_index.size() > cfg_.max_frames)
      throw ContractError("decode: " + std::to_string(frame_index.size()) + " frames exceed max_frames " +
                          std::to_string(cfg_.max_frames));
    Var<T> x = tokens;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string pre = "layer" + std::to_string(l);
      x = ops::add(x, spatial_self_attention(norm(x, pre + ".ln1"), N, spatial(l)));
      x = ops::add(x, temporal_attention(norm(x, pre + ".ln2"), N, frame_index, temporal(l), mode));
      x = ops::add(x, mlp(norm(x, pre + ".ln3"), pre));
    }
    return norm(x, "final_ln");
  }

  /// Decodes a list of frames; output per frame depends only on frames ≤ t
  /// under the causal mask.
  std::vector<Var<T>> decode_training(const std::vector<FrameTokens<T>>& frames,
                                      TemporalMask mode = TemporalMask::Causal) const {
    if (frames.empty()) throw ContractError("decode_training: no frames");
    std::vector<Var<T>> toks;
    std::vector<std::int64_t> idx;
    for (const auto& f : frames) {
      toks.push_back(f.tokens);
      idx.push_back(f.frame_index);
    }
    auto g = decode(ops::concat_rows(toks), idx, mode);
    const std::size_t N = cfg_.tokens_per_frame();
    std::vector<Var<T>> out;
    for (std::size_t f = 0; f < frames.size(); ++f) out.push_back(ops::slice_rows(g, f * N, (f + 1) * N));
    return out;
  }

  KVCache<T> make_cache() const {
    return KVCache<T>(cfg_.layers, cfg_.tokens_per_frame(), cfg_.heads, cfg_.dim / cfg_.heads);
  }

  /// Decodes the newest frame against the cached memory of earlier frames and
  /// appends this frame's keys/values at every temporal layer.
  Var<T> decode_streaming(const FrameTokens<T>& frame, KVCache<T>& cache) const {
    if (cache.layer_count() != cfg_.layers || cache.tokens_per_frame() != cfg_.tokens_per_frame() ||
        cache.width() != cfg_.dim)
      throw ContractError("decode_streaming: cache layout does not match model");
    if (!cache.consistent()) throw ContractError("decode_streaming: inconsistent session (layers disagree)");
    if (static_cast<std::size_t>(frame.frame_index) != cache.frames() + 1)
      throw ContractError("decode_streaming: frame index " + std::to_string(frame.frame_index) + " after " +
                          std::to_string(cache.frames()) + " cached frames");
    const std::size_t N = cfg_.tokens_per_frame();
    std::vector<FrameKV<T>> pending;
    Var<T> x = frame.tokens;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string pre = "layer" + std::to_string(l);
      x = ops::add(x, spatial_self_attention(norm(x, pre + ".ln1"), N, spatial(l)));
      auto res = cached_cross_attention(norm(x, pre + ".ln2"), cache, l, temporal(l));
      x = ops::add(x, res.output);
      pending.push_back(std::move(res.kv));
      x = ops::add(x, mlp(norm(x, pre + ".ln3"), pre));
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) cache_append(cache, l, pending[l]);
    return norm(x, "final_ln");
  }

  // ---- heads -----------------------------------------------------------

  /// Camera tokens (T × C) → T × 9 pose vectors. The quaternion is normalized
  /// and flipped to w ≥ 0; fov = π·sigmoid(raw) lies in (0, π).
  Var<T> camera_head(const Var<T>& camera_tokens) const {
    auto h = ops::gelu(ops::linear(camera_tokens, param("camera_head.fc1.weight"), param("camera_head.fc1.bias")));
    auto raw = ops::linear(h, param("camera_head.fc2.weight"), param("camera_head.fc2.bias"));
    return pose_from_raw(raw);
  }

  static Var<T> pose_from_raw(const Var<T>& raw) {
    auto q = ops::l2_normalize_rows(ops::slice_cols(raw, 3, 7));
    Tensor<T> sign(q.shape(), T{1});
    for (std::size_t r = 0; r < q.value().rows(); ++r)
      if (q.value().at(r, 3) < T{0})
        for (std::size_t c = 0; c < 4; ++c) sign.at(r, c) = T{-1};
    q = ops::mul(q, Var<T>::constant(std::move(sign)));
    auto fov = ops::scale(ops::sigmoid(ops::slice_cols(raw, 7, 9)), static_cast<T>(std::numbers::pi));
    return ops::concat_cols<T>({ops::slice_cols(raw, 0, 3), q, fov});
  }

  struct GeometryOut {
    Var<T> points, point_conf, depth, depth_conf;  // T×3×H×W, T×H×W ×3
    Var<T> track_features;                         // (T·H·W) × F, pixel-major
  };

  /// Patch tokens (T·P × C) → dense maps via two transpose-conv (kernel =
  /// stride) upsampling stages. Confidences are 1 + exp(raw) ≥ 1.
  GeometryOut geometry_head(const Var<T>& patch_tokens) const {
    const std::size_t P = cfg_.patches();
    if (patch_tokens.value().rows() % P != 0)
      throw ShapeError("geometry_head: " + shape_str(patch_tokens.shape()) + " is not a stack of " + std::to_string(P) +
                       "-token grids");
    const std::size_t t = patch_tokens.value().rows() / P;
    const std::size_t gh = cfg_.grid_h(), gw = cfg_.grid_w(), c1 = cfg_.head_channels, co = cfg_.head_outputs();
    auto s1 = ops::matmul(patch_tokens, param("geometry_head.up1.weight"));
    auto g1 = ops::gather(s1, detail::depth_to_space_indices(t, gh, gw, cfg_.up1, c1), {t * gh * cfg_.up1 * gw * cfg_.up1, c1});
    auto h1 = ops::gelu(ops::add_bias(g1, param("geometry_head.up1.bias")));
    auto s2 = ops::matmul(h1, param("geometry_head.up2.weight"));
    auto g2 = ops::gather(s2, detail::depth_to_space_indices(t, gh * cfg_.up1, gw * cfg_.up1, cfg_.up2, co),
                          {t * cfg_.pixels(), co});
    auto out = ops::add_bias(g2, param("geometry_head.up2.bias"));  // (T·HW) × co

    const std::size_t H = cfg_.image_h, W = cfg_.image_w, HW = H * W;
    auto channels = [&](std::size_t first, std::size_t count) {
      std::vector<std::size_t> idx;
      idx.reserve(t * count * HW);
      for (std::size_t f = 0; f < t; ++f)
        for (std::size_t c = 0; c < count; ++c)
          for (std::size_t p = 0; p < HW; ++p) idx.push_back((f * HW + p) * co + first + c);
      Shape s = count == 1 ? Shape{t, H, W} : Shape{t, count, H, W};
      return ops::gather(out, std::move(idx), std::move(s));
    };
    GeometryOut g;
    g.points = channels(0, 3);
    g.point_conf = ops::add_scalar(ops::exp(channels(3, 1)), T{1});
    g.depth = channels(4, 1);
    g.depth_conf = ops::add_scalar(ops::exp(channels(5, 1)), T{1});
    g.track_features = ops::slice_cols(out, 6, co);
    return g;
  }

  /// Bilinear sampling matrix (M × H·W) for query pixel coordinates (M × 2, x then y).
  Tensor<T> bilinear_weights(const Tensor<T>& queries) const {
    const std::size_t H = cfg_.image_h, W = cfg_.image_w;
    if (queries.rank() != 2 || queries.cols() != 2) throw ShapeError("track queries must be M×2, got " + shape_str(queries.shape()));
    const std::size_t m = queries.rows();
    Tensor<T> w({m, H * W});
    for (std::size_t j = 0; j < m; ++j) {
      const T x = queries.at(j, 0), y = queries.at(j, 1);
      if (!(x >= 0 && y >= 0 && x <= static_cast<T>(W - 1) && y <= static_cast<T>(H - 1)))
        throw ContractError("track query " + std::to_string(j) + " outside image bounds");
      const std::size_t x0 = std::min(static_cast<std::size_t>(x), W - 1), y0 = std::min(static_cast<std::size_t>(y), H - 1);
      const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const T ax = x - static_cast<T>(x0), ay = y - static_cast<T>(y0);
      w.at(j, y0 * W + x0) += (1 - ax) * (1 - ay);
      w.at(j, y0 * W + x1) += ax * (1 - ay);
      w.at(j, y1 * W + x0) += (1 - ax) * ay;
      w.at(j, y1 * W + x1) += ax * ay;
    }
    return w;
  }

  /// Query descriptors sampled from frame 1's track features (H·W × F).
  Var<T> sample_query_features(const Var<T>& frame1_features, const Tensor<T>& queries) const {
    return ops::matmul(Var<T>::constant(bilinear_weights(queries)), frame1_features);
  }

  struct TrackOut {
    Var<T> tracks;      // M × 2
    Var<T> visibility;  // M × 1 logits
  };

  /// Correlates query descriptors against one frame's features (H·W × F);
  /// soft-argmax over the correlation map gives the track position and an MLP
  /// on the correlation peak gives the visibility logit.
  TrackOut track_head(const Var<T>& query_features, const Var<T>& frame_features) const {
    const T inv = T{1} / std::sqrt(static_cast<T>(cfg_.track_features));
    auto corr = ops::scale(ops::matmul_nt(query_features, frame_features), inv);
    auto prob = ops::softmax_lastdim(corr);
    TrackOut o;
    o.tracks = ops::matmul(prob, Var<T>::constant(pixel_grid()));
    auto peak = ops::max_lastdim(corr);
    auto h = ops::gelu(ops::linear(peak, param("track_head.vis1.weight"), param("track_head.vis1.bias")));
    o.visibility = ops::linear(h, param("track_head.vis2.weight"), param("track_head.vis2.bias"));
    return o;
  }

  // ---- end to end -------------------------------------------------------

  /// All heads over decoded stacked tokens of T frames (frame 1 first).
  Predictions<T> heads(const Var<T>& decoded, std::size_t frames, const Tensor<T>& queries) const {
    const std::size_t N = cfg_.tokens_per_frame(), C = cfg_.dim, P = cfg_.patches();
    std::vector<std::size_t> cam_idx, patch_idx;
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t k = 0; k < N; ++k)
        for (std::size_t c = 0; c < C; ++c) (k == 0 ? cam_idx : patch_idx).push_back((f * N + k) * C + c);
    Predictions<T> pr;
    pr.frames = frames;
    pr.queries = queries.rows();
    pr.pose = camera_head(ops::gather(decoded, std::move(cam_idx), {frames, C}));
    auto geo = geometry_head(ops::gather(decoded, std::move(patch_idx), {frames * P, C}));
    pr.points = geo.points;
    pr.point_conf = geo.point_conf;
    pr.depth = geo.depth;
    pr.depth_conf = geo.depth_conf;
    if (pr.queries > 0) {
      const std::size_t HW = cfg_.pixels();
      auto qf = sample_query_features(ops::slice_rows(geo.track_features, 0, HW), queries);
      std::vector<Var<T>> tr, vis;
      for (std::size_t f = 0; f < frames; ++f) {
        auto o = track_head(qf, ops::slice_rows(geo.track_features, f * HW, (f + 1) * HW));
        tr.push_back(o.tracks);
        vis.push_back(o.visibility);
      }
      pr.tracks = ops::concat_rows(tr);
      pr.visibility_logits = ops::concat_rows(vis);
    }
    return pr;
  }

  /// Full-sequence forward over images of frames 1..T.
  Predictions<T> forward(const std::vector<const Tensor<T>*>& images, const Tensor<T>& queries,
                         TemporalMask mode = TemporalMask::Causal) const {
    auto tokens = encode_frames(images, 1);
    auto decoded = decode(tokens, detail::frame_range(1, images.size()), mode);
    return heads(decoded, images.size(), queries);
  }

  StreamSession<T> start_session(const Tensor<T>& queries) const {
    StreamSession<T> s{make_cache(), queries, {}, 0};
    if (queries.size()) (void)bilinear_weights(queries);  // validates bounds up front
    return s;
  }

  /// Streams one frame: encode, cached decode, heads. Never touches other frames.
  Predictions<T> stream_step(const Tensor<T>& image, StreamSession<T>& s) const {
    const auto index = static_cast<std::int64_t>(s.frames_seen + 1);
    auto tokens = encode(image, index);
    auto decoded = decode_streaming(tokens, s.cache);
    ++s.frames_seen;
    const std::size_t N = cfg_.tokens_per_frame();
    Predictions<T> pr;
    pr.frames = 1;
    pr.queries = s.queries.rows();
    pr.pose = camera_head(ops::slice_rows(decoded, 0, 1));
    auto geo = geometry_head(ops::slice_rows(decoded, 1, N));
    pr.points = geo.points;
    pr.point_conf = geo.point_conf;
    pr.depth = geo.depth;
    pr.depth_conf = geo.depth_conf;
    if (pr.queries > 0) {
      if (index == 1) s.query_features = sample_query_features(geo.track_features, s.queries).value();
      auto o = track_head(Var<T>::constant(s.query_features), geo.track_features);
      pr.tracks = o.tracks;
      pr.visibility_logits = o.visibility;
    }
    return pr;
  }

  // ---- checkpoints -----------------------------------------------------

  static constexpr std::string_view kCheckpointMagic = "S4DCKPT1";

  /// Header: magic, u64 JSON length, JSON {config, tensors:[{name, shape,
  /// offset}]}; payload: little-endian float32 values in directory order.
  void save(const std::filesystem::path& path) const {
    nlohmann::json dir = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, v] : params_) {
      dir.push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}});
      offset += v.size();
    }
    const std::string header = nlohmann::json{{"config", cfg_}, {"tensors", dir}}.dump();
    io::Writer w(path);
    w.put_bytes(kCheckpointMagic);
    w.put<std::uint64_t>(header.size());
    w.put_bytes(header);
    for (const auto& [_, v] : params_) {
      if constexpr (std::is_same_v<T, float>) {
        w.put_span(v.value().span());
      } else {
        const auto f = v.value().template cast<float>();
        w.put_span(f.span());
      }
    }
    w.finish();
  }

  static ModelConfig read_config(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic(kCheckpointMagic);
    const auto len = r.get<std::uint64_t>();
    return nlohmann::json::parse(r.get_bytes(len)).at("config").get<ModelConfig>();
  }

  /// Loads a checkpoint, validating every tensor's name, shape and offset
  /// against the directory implied by its config.
  static Model load(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic(kCheckpointMagic);
    const auto len = r.get<std::uint64_t>();
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(r.get_bytes(len));
    } catch (const nlohmann::json::exception& e) {
      throw io::FormatError("checkpoint header unreadable in " + path.string() + ": " + e.what());
    }
    Model m(header.at("config").get<ModelConfig>(), 0);
    const auto& dir = header.at("tensors");
    if (dir.size() != m.params_.size())
      throw io::FormatError("checkpoint " + path.string() + ": " + std::to_string(dir.size()) + " tensors, model expects " +
                            std::to_string(m.params_.size()));
    std::size_t offset = 0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
      auto& [name, v] = m.params_[i];
      const auto shape = dir[i].at("shape").get<Shape>();
      if (dir[i].at("name").get<std::string>() != name || shape != v.shape() ||
          dir[i].at("offset").get<std::size_t>() != offset)
        throw io::FormatError("checkpoint " + path.string() + ": tensor '" + dir[i].at("name").get<std::string>() + "' " +
                              shape_str(shape) + " does not match expected '" + name + "' " + shape_str(v.shape()));
      offset += v.size();
    }
    for (auto& [_, v] : m.params_) {
      auto data = r.get_vector<float>(v.size());
      if constexpr (std::is_same_v<T, float>) {
        v.mutable_value() = Tensor<T>(v.shape(), std::move(data));
      } else {
        v.mutable_value() = Tensor<float>(v.shape(), std::move(data)).template cast<T>();
      }
    }
    if (!r.at_end()) throw io::FormatError("trailing bytes in checkpoint " + path.string());
    return m;
  }

 private:
  Var<T> norm(const Var<T>& x, const std::string& name) const {
    return ops::layernorm(x, param(name + ".gain"), param(name + ".bias"));
  }

  Var<T> mlp(const Var<T>& x, const std::string& pre) const {
    auto h = ops::gelu(ops::linear(x, param(pre + ".mlp.fc1.weight"), param(pre + ".mlp.fc1.bias")));
    return ops::linear(h, param(pre + ".mlp.fc2.weight"), param(pre + ".mlp.fc2.bias"));
  }

  AttentionParams<T> attn(const std::string& pre) const {
    return {param(pre + ".wq"), param(pre + ".wk"), param(pre + ".wv"), param(pre + ".wo"), cfg_.heads};
  }

  Tensor<T> pixel_grid() const {
    Tensor<T> g({cfg_.pixels(), 2});
    for (std::size_t y = 0; y < cfg_.image_h; ++y)
      for (std::size_t x = 0; x < cfg_.image_w; ++x) {
        g.at(y * cfg_.image_w + x, 0) = static_cast<T>(x);
        g.at(y * cfg_.image_w + x, 1) = static_cast<T>(y);
      }
    return g;
  }

  void add(const std::string& name, Tensor<T> init) {
    index_[name] = params_.size();
    params_.emplace_back(name, Var<T>::parameter(std::move(init)));
  }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t C = cfg_.dim, H = cfg_.mlp_ratio * C, F = 3 * cfg_.patch * cfg_.patch;
    auto dense = [&](std::size_t in, std::size_t out, double gain = 1.0) {
      return Tensor<T>::randn({in, out}, rng, static_cast<T>(gain / std::sqrt(static_cast<double>(in))));
    };
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    add("patch_embed.weight", dense(F, C));
    add("patch_embed.bias", Tensor<T>({C}));
    add("pos_embed", Tensor<T>::randn({cfg_.patches(), C}, rng, T(0.1)));
    add("camera_token", Tensor<T>::randn({1, C}, rng, T(0.1)));
    add("time_embed", Tensor<T>::randn({cfg_.max_frames, C}, rng, T(0.1)));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string pre = "layer" + std::to_string(l);
      for (const char* block : {".spatial", ".temporal"}) {
        add(pre + block + ".wq", dense(C, C));
        add(pre + block + ".wk", dense(C, C));
        add(pre + block + ".wv", dense(C, C));
        add(pre + block + ".wo", dense(C, C, resid));
      }
      for (const char* ln : {".ln1", ".ln2", ".ln3"}) {
        add(pre + ln + ".gain", Tensor<T>({C}, T{1}));
        add(pre + ln + ".bias", Tensor<T>({C}));
      }
      add(pre + ".mlp.fc1.weight", dense(C, H));
      add(pre + ".mlp.fc1.bias", Tensor<T>({H}));
      add(pre + ".mlp.fc2.weight", dense(H, C, resid));
      add(pre + ".mlp.fc2.bias", Tensor<T>({C}));
    }
    add("final_ln.gain", Tensor<T>({C}, T{1}));
    add("final_ln.bias", Tensor<T>({C}));
    add("camera_head.fc1.weight", dense(C, C));
    add("camera_head.fc1.bias", Tensor<T>({C}));
    add("camera_head.fc2.weight", dense(C, CameraPose::kDims, 0.1));
    Tensor<T> cam_bias({CameraPose::kDims});
    cam_bias[6] = T{1};                                                // quaternion w → identity rotation
    cam_bias[7] = cam_bias[8] = static_cast<T>(std::log(1.0 / 2.0));  // fov ≈ π/3
    add("camera_head.fc2.bias", std::move(cam_bias));
    const std::size_t c1 = cfg_.head_channels, co = cfg_.head_outputs();
    add("geometry_head.up1.weight", dense(C, cfg_.up1 * cfg_.up1 * c1));
    add("geometry_head.up1.bias", Tensor<T>({c1}));
    add("geometry_head.up2.weight", dense(c1, cfg_.up2 * cfg_.up2 * co, 0.5));
    add("geometry_head.up2.bias", Tensor<T>({co}));
    add("track_head.vis1.weight", dense(1, 8));
    add("track_head.vis1.bias", Tensor<T>({8}));
    add("track_head.vis2.weight", dense(8, 1));
    add("track_head.vis2.bias", Tensor<T>({1}));
  }

  ModelConfig cfg_;
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

/// Converts batched head outputs of a frame stack to plain per-frame records.
template <class T>
std::vector<PredictionSet> to_prediction_sets(const Predictions<T>& pr, const ModelConfig& cfg) {
  const std::size_t HW = cfg.pixels(), H = cfg.image_h, W = cfg.image_w, M = pr.queries;
  std::vector<PredictionSet> out(pr.frames);
  auto take = [](const Tensor<T>& src, std::size_t offset, Shape s) {
    std::vector<float> d(shape_numel(s));
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(src[offset + i]);
    return Tensor<float>(std::move(s), std::move(d));
  };
  for (std::size_t f = 0; f < pr.frames; ++f) {
    auto& p = out[f];
    p.pose = CameraPose::from_array(pr.pose.value().data() + f * CameraPose::kDims);
    p.points = take(pr.points.value(), f * 3 * HW, {3, H, W});
    p.point_conf = take(pr.point_conf.value(), f * HW, {H, W});
    p.depth = take(pr.depth.value(), f * HW, {H, W});
    p.depth_conf = take(pr.depth_conf.value(), f * HW, {H, W});
    if (M > 0) {
      p.tracks = take(pr.tracks.value(), f * M * 2, {M, 2});
      p.visibility_logits = take(pr.visibility_logits.value(), f * M, {M});
    } else {
      p.tracks = Tensor<float>({0, 2});
      p.visibility_logits = Tensor<float>({0});
    }
  }
  return out;
}

}  // namespace stream4d
