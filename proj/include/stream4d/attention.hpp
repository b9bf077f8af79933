#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "stream4d/io.hpp"
#include "stream4d/ops.hpp"

namespace stream4d {

/// Projection weights of one attention block (no biases).
template <class T>
struct AttentionParams {
  Var<T> wq, wk, wv, wo;  // C×C each
  std::size_t heads = 1;

  std::size_t dim() const { return wq.value().dim(0); }
  std::size_t head_dim() const { return dim() / heads; }

  void validate() const {
    if (!wq || !wk || !wv || !wo) throw ContractError("AttentionParams: missing projection");
    const std::size_t c = dim();
    if (heads == 0 || c % heads != 0)
      throw ContractError("AttentionParams: dim " + std::to_string(c) + " not divisible by " + std::to_string(heads) + " heads");
    for (const auto* w : {&wq, &wk, &wv, &wo})
      if (w->shape() != Shape{c, c}) throw_shape("AttentionParams", Shape{c, c}, w->shape());
  }
};

enum class TemporalMask { Causal, Global };

/// Scaled dot-product attention over pre-projected q[n×C], k[m×C], v[m×C],
/// split into `heads` column blocks. Returns the concatenated heads (n×C),
/// before the output projection.
template <class T>
Var<T> multi_head_attend(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                         const Tensor<T>* mask = nullptr) {
  const std::size_t c = q.value().cols();
  if (k.value().cols() != c || v.value().cols() != c) throw_shape("attention", q.shape(), k.shape());
  if (k.value().rows() != v.value().rows()) throw_shape("attention", k.shape(), v.shape());
  const std::size_t d = c / heads;
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  if (heads == 1) {
    auto p = ops::softmax_lastdim(ops::scale(ops::matmul_nt(q, k), inv_sqrt_d), mask);
    return ops::matmul(p, v);
  }
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = ops::slice_cols(q, h * d, (h + 1) * d);
    auto kh = ops::slice_cols(k, h * d, (h + 1) * d);
    auto vh = ops::slice_cols(v, h * d, (h + 1) * d);
    auto p = ops::softmax_lastdim(ops::scale(ops::matmul_nt(qh, kh), inv_sqrt_d), mask);
    outs.push_back(ops::matmul(p, vh));
  }
  return ops::concat_cols(outs);
}

/// Frame-local self-attention: `tokens` holds frames stacked row-wise, each of
/// `tokens_per_frame` rows; no token attends across a frame boundary.
template <class T>
Var<T> spatial_self_attention(const Var<T>& tokens, std::size_t tokens_per_frame, const AttentionParams<T>& p) {
  if (tokens_per_frame == 0 || tokens.value().rows() == 0) throw ContractError("spatial_self_attention: empty frame");
  if (tokens.value().rows() % tokens_per_frame != 0)
    throw ShapeError("spatial_self_attention: " + shape_str(tokens.shape()) + " is not a whole number of " +
                     std::to_string(tokens_per_frame) + "-token frames");
  const std::size_t frames = tokens.value().rows() / tokens_per_frame;
  auto q = ops::matmul(tokens, p.wq);
  auto k = ops::matmul(tokens, p.wk);
  auto v = ops::matmul(tokens, p.wv);
  if (frames == 1) return ops::matmul(multi_head_attend(q, k, v, p.heads), p.wo);
  std::vector<Var<T>> per_frame;
  per_frame.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t b = f * tokens_per_frame, e = b + tokens_per_frame;
    per_frame.push_back(multi_head_attend(ops::slice_rows(q, b, e), ops::slice_rows(k, b, e), ops::slice_rows(v, b, e), p.heads));
  }
  return ops::matmul(ops::concat_rows(per_frame), p.wo);
}

/// Additive frame-level causal mask: a token of frame i sees every token of
/// frames ≤ i (its own frame included) and nothing later.
template <class T>
Tensor<T> frame_causal_mask(std::size_t frames, std::size_t tokens_per_frame) {
  const std::size_t n = frames * tokens_per_frame;
  Tensor<T> m({n, n});
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t fi = i / tokens_per_frame;
    for (std::size_t j = (fi + 1) * tokens_per_frame; j < n; ++j) m[i * n + j] = neg_inf;
  }
  return m;
}

/// Attention across all frames of a sequence. `frame_index` gives the time
/// step of each stacked frame and must be strictly increasing. With
/// `TemporalMask::Global` every token sees every frame (teacher mode).
template <class T>
Var<T> temporal_attention(const Var<T>& tokens, std::size_t tokens_per_frame, const std::vector<std::int64_t>& frame_index,
                          const AttentionParams<T>& p, TemporalMask mode = TemporalMask::Causal) {
  if (tokens_per_frame == 0 || tokens.value().rows() == 0) throw ContractError("temporal_attention: empty frame");
  const std::size_t frames = tokens.value().rows() / tokens_per_frame;
  if (frames * tokens_per_frame != tokens.value().rows() || frame_index.size() != frames)
    throw ShapeError("temporal_attention: " + std::to_string(frame_index.size()) + " frame indices for tokens " +
                     shape_str(tokens.shape()));
  for (std::size_t f = 1; f < frames; ++f)
    if (frame_index[f] <= frame_index[f - 1])
      throw ContractError("temporal_attention: frame indices not strictly increasing at position " + std::to_string(f));
  auto q = ops::matmul(tokens, p.wq);
  auto k = ops::matmul(tokens, p.wk);
  auto v = ops::matmul(tokens, p.wv);
  if (mode == TemporalMask::Global || frames == 1) return ops::matmul(multi_head_attend(q, k, v, p.heads), p.wo);
  const Tensor<T> mask = frame_causal_mask<T>(frames, tokens_per_frame);
  return ops::matmul(multi_head_attend(q, k, v, p.heads, &mask), p.wo);
}

template <class T>
Var<T> temporal_causal_attention(const Var<T>& tokens, std::size_t tokens_per_frame,
                                 const std::vector<std::int64_t>& frame_index, const AttentionParams<T>& p) {
  return temporal_attention(tokens, tokens_per_frame, frame_index, p, TemporalMask::Causal);
}

/// Append-only per-layer key/value memory of past frames for one streaming
/// session. Keys and values are stored row-per-token, heads as column blocks.
template <class T>
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t layers, std::size_t tokens_per_frame, std::size_t heads, std::size_t head_dim)
      : tokens_per_frame_(tokens_per_frame), heads_(heads), head_dim_(head_dim), layers_(layers) {
    for (auto& l : layers_) {
      l.keys = Tensor<T>({0, width()});
      l.values = Tensor<T>({0, width()});
    }
  }

  std::size_t layer_count() const { return layers_.size(); }
  std::size_t tokens_per_frame() const { return tokens_per_frame_; }
  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t width() const { return heads_ * head_dim_; }

  std::size_t frames(std::size_t layer) const { return layer_at(layer).frames; }
  /// Common frame count; throws if the layers disagree.
  std::size_t frames() const {
    if (!consistent()) throw ContractError("KVCache: layers disagree on cached frame count");
    return layers_.empty() ? 0 : layers_.front().frames;
  }
  bool consistent() const {
    for (const auto& l : layers_)
      if (l.frames != layers_.front().frames) return false;
    return true;
  }
  std::size_t entries(std::size_t layer) const { return layer_at(layer).keys.dim(0); }
  const Tensor<T>& keys(std::size_t layer) const { return layer_at(layer).keys; }
  const Tensor<T>& values(std::size_t layer) const { return layer_at(layer).values; }

  /// Payload bytes held by all layers.
  std::size_t bytes() const {
    std::size_t b = 0;
    for (const auto& l : layers_) b += (l.keys.size() + l.values.size()) * sizeof(T);
    return b;
  }

  /// Appends one frame's K/V (tokens_per_frame × width each) to `layer`.
  void append(std::size_t layer, const Tensor<T>& k, const Tensor<T>& v) {
    auto& l = layer_at(layer);
    const Shape expect{tokens_per_frame_, width()};
    if (k.shape() != expect) throw_shape("KVCache::append(keys)", expect, k.shape());
    if (v.shape() != expect) throw_shape("KVCache::append(values)", expect, v.shape());
    l.keys.append_rows(k);
    l.values.append_rows(v);
    ++l.frames;
  }

  void clear() {
    for (auto& l : layers_) {
      l.keys = Tensor<T>({0, width()});
      l.values = Tensor<T>({0, width()});
      l.frames = 0;
    }
  }

  bool operator==(const KVCache& o) const = default;

  static constexpr std::string_view kMagic = "S4DKVC01";

  /// Snapshot: magic, scalar width, layer count, tokens per frame, heads,
  /// head dim, per-layer frame counts, then raw K and V per layer.
  void save(const std::filesystem::path& path) const {
    io::Writer w(path);
    w.put_bytes(kMagic);
    w.put<std::uint32_t>(sizeof(T));
    w.put<std::uint64_t>(layers_.size());
    w.put<std::uint64_t>(tokens_per_frame_);
    w.put<std::uint64_t>(heads_);
    w.put<std::uint64_t>(head_dim_);
    for (const auto& l : layers_) w.put<std::uint64_t>(l.frames);
    for (const auto& l : layers_) {
      w.put_span(l.keys.span());
      w.put_span(l.values.span());
    }
    w.finish();
  }

  static KVCache load(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic(kMagic);
    if (r.get<std::uint32_t>() != sizeof(T)) throw io::FormatError("KV snapshot scalar width mismatch: " + path.string());
    const auto layers = r.get<std::uint64_t>();
    const auto tpf = r.get<std::uint64_t>();
    const auto heads = r.get<std::uint64_t>();
    const auto hd = r.get<std::uint64_t>();
    KVCache c(layers, tpf, heads, hd);
    for (auto& l : c.layers_) l.frames = r.get<std::uint64_t>();
    for (auto& l : c.layers_) {
      const std::size_t n = l.frames * tpf;
      l.keys = Tensor<T>({n, c.width()}, r.get_vector<T>(n * c.width()));
      l.values = Tensor<T>({n, c.width()}, r.get_vector<T>(n * c.width()));
    }
    if (!r.at_end()) throw io::FormatError("trailing bytes in KV snapshot: " + path.string());
    return c;
  }

 private:
  struct Layer {
    Tensor<T> keys, values;
    std::size_t frames = 0;
    bool operator==(const Layer&) const = default;
  };

  const Layer& layer_at(std::size_t i) const {
    if (i >= layers_.size())
      throw std::out_of_range("KVCache: layer " + std::to_string(i) + " of " + std::to_string(layers_.size()));
    return layers_[i];
  }
  Layer& layer_at(std::size_t i) { return const_cast<Layer&>(std::as_const(*this).layer_at(i)); }

  std::size_t tokens_per_frame_ = 0, heads_ = 0, head_dim_ = 0;
  std::vector<Layer> layers_;
};

/// One frame's keys and values at a temporal layer, ready for `KVCache::append`.
template <class T>
struct FrameKV {
  Tensor<T> keys, values;
};

template <class T>
struct CrossAttentionResult {
  Var<T> output;
  FrameKV<T> kv;
};

/// Streaming form of temporal attention for the newest frame: queries from
/// `current` (N×C), keys/values = [cached frames ‖ current frame]. Does not
/// modify the cache; pass `result.kv` to `cache_append` once the frame is done.
template <class T>
CrossAttentionResult<T> cached_cross_attention(const Var<T>& current, const KVCache<T>& cache, std::size_t layer,
                                               const AttentionParams<T>& p) {
  if (layer >= cache.layer_count())
    throw std::out_of_range("cached_cross_attention: layer " + std::to_string(layer) + " of " +
                            std::to_string(cache.layer_count()));
  if (current.value().cols() != cache.width() || current.value().rows() != cache.tokens_per_frame())
    throw_shape("cached_cross_attention", Shape{cache.tokens_per_frame(), cache.width()}, current.shape());
  auto q = ops::matmul(current, p.wq);
  auto k = ops::matmul(current, p.wk);
  auto v = ops::matmul(current, p.wv);
  CrossAttentionResult<T> res;
  res.kv = {k.value(), v.value()};
  if (cache.entries(layer) == 0) {
    res.output = ops::matmul(multi_head_attend(q, k, v, p.heads), p.wo);
  } else {
    auto keys = ops::concat_rows<T>({Var<T>::constant(cache.keys(layer)), k});
    auto values = ops::concat_rows<T>({Var<T>::constant(cache.values(layer)), v});
    res.output = ops::matmul(multi_head_attend(q, keys, values, p.heads), p.wo);
  }
  return res;
}

template <class T>
void cache_append(KVCache<T>& cache, std::size_t layer, const FrameKV<T>& kv) {
  cache.append(layer, kv.keys, kv.values);
}

}  // namespace stream4d
