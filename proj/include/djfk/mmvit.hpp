#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "djfk/autodiff.hpp"
#include "djfk/error.hpp"
#include "djfk/parameter.hpp"
#include "djfk/posenc.hpp"
#include "djfk/rng.hpp"

namespace djfk::mmvit {

inline constexpr std::size_t kMaxTextTokens = 256;
inline constexpr std::size_t kMaxImageTokens = 256 * 256;

struct Config {
  int width = 128;
  int heads = 4;
  int blocks = 2;
  double rope_base = posenc::kDefaultBase;
  bool qk_norm = true;
  // Ablation: each stream attends only to itself.
  bool split_attention = false;

  int head_dim() const { return width / heads; }

  void validate() const {
    if (width < 1 || heads < 1) throw ConfigError("model.width and model.heads must be >= 1");
    if (width % heads != 0) {
      throw ConfigError("model.width (" + std::to_string(width) + ") must be divisible by model.heads (" + std::to_string(heads) + ")");
    }
    // Axial 2-D rotary splits each head in two rotating halves.
    if (head_dim() % 4 != 0) throw ConfigError("model.width / model.heads must be a multiple of 4, got " + std::to_string(head_dim()));
    if (blocks < 0) throw ConfigError("model.blocks must be >= 0");
    if (!(rope_base > 0.0)) throw ConfigError("model.rope_base must be > 0");
  }
};

/// Rotation angles tiled per head: row (token * heads + head) holds the
/// token's angles, matching a [n, width] -> [n * heads, head_dim] reshape.
template <class T>
struct RotaryTables {
  std::size_t n_txt = 0;
  std::size_t n_img = 0;
  Tensor<T> text;   // [n_txt * heads, head_dim / 2]
  Tensor<T> image;  // [n_img * heads, head_dim / 2]
};

namespace detail {

template <class T>
Tensor<T> tile_heads(const Tensor<T>& angles, int heads) {
  const std::size_t n = angles.rows(), p = angles.cols();
  Tensor<T> out(Shape{n * static_cast<std::size_t>(heads), p});
  for (std::size_t i = 0; i < n; ++i) {
    for (int h = 0; h < heads; ++h) {
      std::copy_n(angles.data().begin() + static_cast<long>(i * p), p,
                  out.data().begin() + static_cast<long>((i * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)) * p));
    }
  }
  return out;
}

}  // namespace detail

/// Text tokens get RoPE at positions 0..n_txt-1; image tokens get axial VoPE
/// at their normalized (u, v).
template <class T>
std::shared_ptr<const RotaryTables<T>> make_rotary_tables(std::size_t n_txt, std::span<const posenc::NormalizedPosition> image_positions,
                                                          const Config& cfg) {
  cfg.validate();
  if (n_txt > kMaxTextTokens) throw ContractError("text sequence longer than " + std::to_string(kMaxTextTokens) + " tokens");
  if (image_positions.size() > kMaxImageTokens) throw ContractError("image sequence longer than 256^2 tokens");
  std::vector<int> pos(n_txt);
  std::iota(pos.begin(), pos.end(), 0);
  auto tables = std::make_shared<RotaryTables<T>>();
  tables->n_txt = n_txt;
  tables->n_img = image_positions.size();
  tables->text = detail::tile_heads(posenc::rope_angles<T>(pos, cfg.head_dim(), cfg.rope_base), cfg.heads);
  tables->image = detail::tile_heads(posenc::axial_angles<T>(image_positions, cfg.head_dim(), cfg.rope_base), cfg.heads);
  return tables;
}

/// Text and image token streams entering or leaving a block.
template <class T>
struct JointSequence {
  Var<T> text;   // [n_txt, width]
  Var<T> image;  // [n_img, width]
  std::shared_ptr<const RotaryTables<T>> rotary;
};

/// One modality's weights. No biases.
template <class T>
struct StreamWeights {
  Parameter<T> attn_norm, wq, wk, wv, wo, q_norm, k_norm, ffn_norm, w_up, w_down;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f("attn_norm", s.attn_norm);
    f("wq", s.wq);
    f("wk", s.wk);
    f("wv", s.wv);
    f("wo", s.wo);
    f("q_norm", s.q_norm);
    f("k_norm", s.k_norm);
    f("ffn_norm", s.ffn_norm);
    f("w_up", s.w_up);
    f("w_down", s.w_down);
  }
};

template <class T>
struct BlockWeights {
  StreamWeights<T> text;
  StreamWeights<T> image;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    StreamWeights<T>::visit(s.text, [&](const char* n, auto& p) { f(std::string("text.") + n, p); });
    StreamWeights<T>::visit(s.image, [&](const char* n, auto& p) { f(std::string("image.") + n, p); });
  }
};

template <class T>
Tensor<T> random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor<T> m(Shape{rows, cols});
  for (auto& v : m.data()) v = static_cast<T>(stddev * rng.normal());
  return m;
}

template <class T>
StreamWeights<T> init_stream(const Config& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.width);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  StreamWeights<T> w;
  w.attn_norm = Parameter<T>(Tensor<T>(Shape{d}, T{1}));
  w.wq = Parameter<T>(random_matrix<T>(d, d, s, rng));
  w.wk = Parameter<T>(random_matrix<T>(d, d, s, rng));
  w.wv = Parameter<T>(random_matrix<T>(d, d, s, rng));
  w.wo = Parameter<T>(random_matrix<T>(d, d, s, rng));
  w.q_norm = Parameter<T>(Tensor<T>(Shape{hd}, T{1}));
  w.k_norm = Parameter<T>(Tensor<T>(Shape{hd}, T{1}));
  w.ffn_norm = Parameter<T>(Tensor<T>(Shape{d}, T{1}));
  w.w_up = Parameter<T>(random_matrix<T>(d, 4 * d, s, rng));
  w.w_down = Parameter<T>(random_matrix<T>(4 * d, d, 0.5 / std::sqrt(static_cast<double>(d)), rng));
  return w;
}

template <class T>
BlockWeights<T> init_block(const Config& cfg, Rng& rng) {
  cfg.validate();
  BlockWeights<T> b;
  b.text = init_stream<T>(cfg, rng);
  b.image = init_stream<T>(cfg, rng);
  return b;
}

template <class T>
void collect_parameters(BlockWeights<T>& block, const std::string& prefix, ParameterList<T>& out) {
  BlockWeights<T>::visit(block, [&](const std::string& n, Parameter<T>& p) { out.push_back({prefix + n, &p}); });
}

/// How weights enter a tape: trainable leaves accumulate gradients, frozen
/// ones (e.g. an EMA shadow) are constants.
enum class Bind { trainable, frozen };

template <class T>
Var<T> bind(Tape<T>& tape, Parameter<T>& p, Bind mode) {
  return mode == Bind::trainable ? tape.param(p) : tape.constant(p.value);
}

/// Collects each head's attention probabilities as the forward runs.
template <class T>
struct AttentionProbe {
  std::vector<Tensor<T>> probs;  // one [queries, keys] matrix per (block, head)
};

namespace detail {

template <class T>
struct StreamQKV {
  Var<T> q, k, v;
};

template <class T>
struct BoundStream {
  Var<T> attn_norm, wq, wk, wv, wo, q_norm, k_norm, ffn_norm, w_up, w_down;
};

template <class T>
BoundStream<T> bind_stream(Tape<T>& tape, StreamWeights<T>& w, Bind mode) {
  return {bind(tape, w.attn_norm, mode), bind(tape, w.wq, mode),       bind(tape, w.wk, mode),
          bind(tape, w.wv, mode),        bind(tape, w.wo, mode),       bind(tape, w.q_norm, mode),
          bind(tape, w.k_norm, mode),    bind(tape, w.ffn_norm, mode), bind(tape, w.w_up, mode),
          bind(tape, w.w_down, mode)};
}

// Per-head RMSNorm (optional), then rotary, on a [n, width] projection.
template <class T>
Var<T> head_norm_rotate(Var<T> x, Var<T> scale, const Tensor<T>& angles, const Config& cfg) {
  const std::size_t n = x.value().rows();
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  auto h = reshape(x, Shape{n * static_cast<std::size_t>(cfg.heads), hd});
  if (cfg.qk_norm) h = rms_norm(h, scale);
  h = rotary(h, angles);
  return reshape(h, Shape{n, static_cast<std::size_t>(cfg.width)});
}

template <class T>
StreamQKV<T> project(Var<T> x, const BoundStream<T>& w, const Tensor<T>& angles, const Config& cfg) {
  auto h = rms_norm(x, w.attn_norm);
  return {head_norm_rotate(matmul(h, w.wq), w.q_norm, angles, cfg), head_norm_rotate(matmul(h, w.wk), w.k_norm, angles, cfg),
          matmul(h, w.wv)};
}

template <class T>
Var<T> attend(const StreamQKV<T>& s, const Config& cfg, AttentionProbe<T>* probe) {
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  std::vector<Var<T>> heads;
  heads.reserve(static_cast<std::size_t>(cfg.heads));
  for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.heads); ++h) {
    auto q = slice(s.q, -1, h * hd, (h + 1) * hd);
    auto k = slice(s.k, -1, h * hd, (h + 1) * hd);
    auto v = slice(s.v, -1, h * hd, (h + 1) * hd);
    auto p = softmax_lastdim(scale(matmul(q, transpose_lastdims(k)), inv_sqrt));
    if (probe) probe->probs.push_back(p.value());
    heads.push_back(matmul(p, v));
  }
  return concat(heads, -1);
}

template <class T>
Var<T> residual_ffn(Var<T> x, Var<T> attn_out, const BoundStream<T>& w) {
  x = add(x, matmul(attn_out, w.wo));
  auto h = silu(matmul(rms_norm(x, w.ffn_norm), w.w_up));
  return add(x, matmul(h, w.w_down));
}

}  // namespace detail

/// One dual-stream block. Each stream has its own pre-norm, projections,
/// QK-norm and FFN; the streams meet only inside attention, which runs over
/// the concatenated [text; image] sequence. There is no timestep input.
template <class T>
JointSequence<T> block_forward(const JointSequence<T>& seq, BlockWeights<T>& weights, const Config& cfg, Bind mode = Bind::trainable,
                               AttentionProbe<T>* probe = nullptr) {
  const auto d = static_cast<std::size_t>(cfg.width);
  const auto& tv = seq.text.value();
  const auto& iv = seq.image.value();
  if (tv.rank() != 2 || iv.rank() != 2 || tv.cols() != d || iv.cols() != d) {
    throw ShapeError("block_forward: expected [n, " + std::to_string(d) + "] streams, got text " + shape_str(tv.shape()) + " and image " +
                     shape_str(iv.shape()));
  }
  const auto& rt = *seq.rotary;
  if (rt.n_txt != tv.rows() || rt.n_img != iv.rows()) throw ShapeError("block_forward: rotary tables do not match sequence lengths");
  Tape<T>& tape = *seq.image.tape;
  const std::size_t n_txt = tv.rows(), n_img = iv.rows();

  JointSequence<T> out = seq;
  if (n_txt == 0 && n_img == 0) return out;
  if (n_txt == 0) {
    // Empty text: image self-attention only, text path untouched.
    auto wi = detail::bind_stream(tape, weights.image, mode);
    out.image = detail::residual_ffn(seq.image, detail::attend(detail::project(seq.image, wi, rt.image, cfg), cfg, probe), wi);
    return out;
  }
  if (n_img == 0) {
    auto wt = detail::bind_stream(tape, weights.text, mode);
    out.text = detail::residual_ffn(seq.text, detail::attend(detail::project(seq.text, wt, rt.text, cfg), cfg, probe), wt);
    return out;
  }
  auto wt = detail::bind_stream(tape, weights.text, mode);
  auto wi = detail::bind_stream(tape, weights.image, mode);
  auto st = detail::project(seq.text, wt, rt.text, cfg);
  auto si = detail::project(seq.image, wi, rt.image, cfg);
  Var<T> at, ai;
  if (cfg.split_attention) {
    at = detail::attend(st, cfg, probe);
    ai = detail::attend(si, cfg, probe);
  } else {
    detail::StreamQKV<T> joint{concat<T>({st.q, si.q}, 0), concat<T>({st.k, si.k}, 0), concat<T>({st.v, si.v}, 0)};
    auto a = detail::attend(joint, cfg, probe);
    at = slice(a, 0, 0, n_txt);
    ai = slice(a, 0, n_txt, n_txt + n_img);
  }
  out.text = detail::residual_ffn(seq.text, at, wt);
  out.image = detail::residual_ffn(seq.image, ai, wi);
  return out;
}

template <class T>
JointSequence<T> stack_forward(JointSequence<T> seq, std::vector<BlockWeights<T>>& blocks, const Config& cfg, Bind mode = Bind::trainable,
                               AttentionProbe<T>* probe = nullptr) {
  for (auto& b : blocks) seq = block_forward(seq, b, cfg, mode, probe);
  return seq;
}

/// Mean Shannon entropy (nats) of the rows of a probability matrix.
template <class T>
double mean_row_entropy(const Tensor<T>& p) {
  const std::size_t r = p.rows(), c = p.cols();
  if (r == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double v = static_cast<double>(p[i * c + j]);
      if (v > 0.0) total -= v * std::log(v);
    }
  }
  return total / static_cast<double>(r);
}

/// Per-head attention entropy of one block, averaged over queries.
template <class T>
std::vector<double> attention_entropy(const Tensor<T>& text, const Tensor<T>& image, std::shared_ptr<const RotaryTables<T>> rotary,
                                      BlockWeights<T>& weights, const Config& cfg) {
  Tape<T> tape(false, false);
  JointSequence<T> seq{tape.constant(text), tape.constant(image), std::move(rotary)};
  AttentionProbe<T> probe;
  block_forward(seq, weights, cfg, Bind::frozen, &probe);
  std::vector<double> out(static_cast<std::size_t>(cfg.heads), 0.0);
  // Split attention yields two matrices per head; average them.
  const std::size_t per_head = probe.probs.size() / out.size();
  for (std::size_t i = 0; i < probe.probs.size(); ++i) out[i % out.size()] += mean_row_entropy(probe.probs[i]) / static_cast<double>(per_head);
  return out;
}

}  // namespace djfk::mmvit
