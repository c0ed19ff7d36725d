#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "djfk/autodiff.hpp"
#include "djfk/error.hpp"
#include "djfk/flowmatch.hpp"
#include "djfk/grid.hpp"
#include "djfk/mmvit.hpp"
#include "djfk/optim.hpp"
#include "djfk/parameter.hpp"
#include "djfk/rng.hpp"

namespace djfk::jepa {

/// Condition id of the learned null embedding.
inline constexpr int kNullCondition = -1;

struct Config {
  int token_dim = 8;
  int classes = 2;
  int text_tokens = 4;
  mmvit::Config model;
  int denoiser_hidden = 0;  // 0 means 4 * token_dim
  int denoiser_layers = 3;
  int time_embed_dim = 64;
  double lambda_pred = 1.0;
  double ema_tau = 0.999;
  double mask_min = 0.7;
  double mask_max = 1.0;
  double cond_drop = 0.1;
  std::size_t token_cap = kDefaultTokenCap;
  int flow_repeats = 1;  // noise draws per masked token
  double grad_clip = 0.0;
  AdamWConfig optim;

  int hidden() const { return denoiser_hidden > 0 ? denoiser_hidden : 4 * token_dim; }

  void validate() const {
    model.validate();
    if (token_dim < 1) throw ConfigError("data.token_dim must be >= 1");
    if (classes < 1) throw ConfigError("data.classes must be >= 1");
    if (text_tokens < 1 || static_cast<std::size_t>(text_tokens) > mmvit::kMaxTextTokens) {
      throw ConfigError("model.text_tokens must be in [1, 256]");
    }
    if (denoiser_hidden < 0) throw ConfigError("denoiser.hidden must be >= 0");
    if (denoiser_layers < 1) throw ConfigError("denoiser.layers must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("denoiser.time_embed_dim must be even and >= 2");
    if (!(lambda_pred >= 0.0)) throw ConfigError("train.lambda_pred must be >= 0");
    if (!(ema_tau >= 0.0 && ema_tau <= 1.0)) throw ConfigError("train.ema_tau must be in [0, 1]");
    if (!(mask_min > 0.0 && mask_min <= mask_max && mask_max <= 1.0)) {
      throw ConfigError("train.mask_min/train.mask_max must satisfy 0 < min <= max <= 1");
    }
    if (!(cond_drop >= 0.0 && cond_drop <= 1.0)) throw ConfigError("train.cond_drop must be in [0, 1]");
    if (token_cap < 1) throw ConfigError("train.token_cap must be >= 1");
    if (flow_repeats < 1) throw ConfigError("train.flow_repeats must be >= 1");
    if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
    optim.validate();
  }
};

/// Context encoder layout, shared by phi and its EMA shadow.
template <class T>
struct Encoder {
  Parameter<T> token_in;    // [d, width]
  Parameter<T> cond_table;  // [classes + 1, text_tokens * width]; last row is the null condition
  std::vector<mmvit::BlockWeights<T>> blocks;
  Parameter<T> out_norm_text;
  Parameter<T> out_norm_image;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f(std::string("token_in"), s.token_in);
    f(std::string("cond_table"), s.cond_table);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      mmvit::BlockWeights<T>::visit(s.blocks[i], [&](const std::string& n, auto& p) { f("blocks." + std::to_string(i) + "." + n, p); });
    }
    f(std::string("out_norm_text"), s.out_norm_text);
    f(std::string("out_norm_image"), s.out_norm_image);
  }
};

template <class T>
struct Predictor {
  Parameter<T> mask_query;  // [1, width]
  std::vector<mmvit::BlockWeights<T>> blocks;
  Parameter<T> out_norm;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f(std::string("mask_query"), s.mask_query);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      mmvit::BlockWeights<T>::visit(s.blocks[i], [&](const std::string& n, auto& p) { f("blocks." + std::to_string(i) + "." + n, p); });
    }
    f(std::string("out_norm"), s.out_norm);
  }
};

/// Per-token velocity MLP over [x_t, embed(t), z].
template <class T>
struct Denoiser {
  std::vector<Parameter<T>> weights;
  std::vector<Parameter<T>> biases;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    for (std::size_t i = 0; i < s.weights.size(); ++i) {
      f("w" + std::to_string(i), s.weights[i]);
      f("b" + std::to_string(i), s.biases[i]);
    }
  }
};

template <class T>
struct Model {
  Config cfg;
  Encoder<T> phi;
  Encoder<T> phi_bar;  // values only; never bound as trainable
  Predictor<T> gamma;
  Denoiser<T> denoiser;

  template <class F>
  void visit_trainable(F&& f) {
    Encoder<T>::visit(phi, [&](const std::string& n, Parameter<T>& p) { f("phi." + n, p); });
    Predictor<T>::visit(gamma, [&](const std::string& n, Parameter<T>& p) { f("gamma." + n, p); });
    Denoiser<T>::visit(denoiser, [&](const std::string& n, Parameter<T>& p) { f("denoiser." + n, p); });
  }

  ParameterList<T> trainable() {
    ParameterList<T> out;
    visit_trainable([&](const std::string& n, Parameter<T>& p) { out.push_back({n, &p}); });
    return out;
  }

  ParameterList<T> shadow() {
    ParameterList<T> out;
    Encoder<T>::visit(phi_bar, [&](const std::string& n, Parameter<T>& p) { out.push_back({"phi_bar." + n, &p}); });
    return out;
  }
};

/// A value-only copy: gradient and moment tensors are left empty.
template <class T>
Parameter<T> value_only(const Parameter<T>& p) {
  Parameter<T> out;
  out.value = p.value;
  out.grad = out.first_moment = out.second_moment = Tensor<T>(Shape{0});
  return out;
}

template <class T>
Encoder<T> make_shadow(const Encoder<T>& phi) {
  Encoder<T> s = phi;
  Encoder<T>::visit(s, [](const std::string&, Parameter<T>& p) { p = value_only(p); });
  return s;
}

template <class T>
bool has_gradient_state(const Encoder<T>& e) {
  bool any = false;
  Encoder<T>::visit(e, [&](const std::string&, const Parameter<T>& p) {
    any = any || p.grad.numel() != 0 || p.first_moment.numel() != 0 || p.second_moment.numel() != 0 || p.step_count != 0;
  });
  return any;
}

template <class T>
Model<T> init_model(const Config& cfg, Rng& rng) {
  cfg.validate();
  const auto D = static_cast<std::size_t>(cfg.model.width);
  const auto d = static_cast<std::size_t>(cfg.token_dim);
  Model<T> m;
  m.cfg = cfg;
  m.phi.token_in = Parameter<T>(mmvit::random_matrix<T>(d, D, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  m.phi.cond_table = Parameter<T>(
      mmvit::random_matrix<T>(static_cast<std::size_t>(cfg.classes + 1), static_cast<std::size_t>(cfg.text_tokens) * D, 1.0, rng));
  for (int i = 0; i < cfg.model.blocks; ++i) m.phi.blocks.push_back(mmvit::init_block<T>(cfg.model, rng));
  m.phi.out_norm_text = Parameter<T>(Tensor<T>(Shape{D}, T{1}));
  m.phi.out_norm_image = Parameter<T>(Tensor<T>(Shape{D}, T{1}));
  m.phi_bar = make_shadow(m.phi);

  m.gamma.mask_query = Parameter<T>(mmvit::random_matrix<T>(1, D, 1.0, rng));
  for (int i = 0; i < cfg.model.blocks; ++i) m.gamma.blocks.push_back(mmvit::init_block<T>(cfg.model, rng));
  m.gamma.out_norm = Parameter<T>(Tensor<T>(Shape{D}, T{1}));

  const auto h = static_cast<std::size_t>(cfg.hidden());
  std::size_t fan_in = d + static_cast<std::size_t>(cfg.time_embed_dim) + D;
  for (int i = 0; i < cfg.denoiser_layers; ++i) {
    m.denoiser.weights.emplace_back(mmvit::random_matrix<T>(fan_in, h, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng));
    m.denoiser.biases.emplace_back(Tensor<T>(Shape{h}));
    fan_in = h;
  }
  // Zero-initialized output layer: the untrained velocity is exactly 0.
  m.denoiser.weights.emplace_back(Tensor<T>(Shape{h, d}));
  m.denoiser.biases.emplace_back(Tensor<T>(Shape{d}));
  return m;
}

// ---------------------------------------------------------------------------
// Masking

struct MaskPlan {
  std::vector<std::size_t> masked;   // sorted
  std::vector<std::size_t> context;  // sorted, disjoint from masked
  double ratio = 1.0;

  std::size_t size() const { return masked.size() + context.size(); }
};

/// Split 0..n-1 into masked/context given the masked set.
inline MaskPlan make_plan(std::size_t n, std::vector<std::size_t> masked) {
  std::sort(masked.begin(), masked.end());
  std::vector<char> flag(n, 0);
  for (auto i : masked) {
    if (i >= n) throw ContractError("mask index " + std::to_string(i) + " out of range " + std::to_string(n));
    if (flag[i]) throw ContractError("mask index " + std::to_string(i) + " repeated");
    flag[i] = 1;
  }
  MaskPlan p;
  p.masked = std::move(masked);
  for (std::size_t i = 0; i < n; ++i) {
    if (!flag[i]) p.context.push_back(i);
  }
  p.ratio = n ? static_cast<double>(p.masked.size()) / static_cast<double>(n) : 0.0;
  return p;
}

/// |M| = max(1, round(r N)) with r ~ U[lo, hi]; M uniform among subsets of that size.
inline MaskPlan sample_mask(std::size_t n, Rng& rng, double lo = 0.7, double hi = 1.0) {
  if (n < 1) throw ContractError("sample_mask needs at least one token");
  const double r = lo == hi ? lo : rng.uniform(lo, hi);
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(r * static_cast<double>(n))), 1, n);
  auto plan = make_plan(n, token_drop(n, k, rng));
  plan.ratio = r;
  return plan;
}

// ---------------------------------------------------------------------------
// Forward pieces

/// Sinusoidal features [cos(s f_k), sin(s f_k)] of s = 1000 t, f_k = 10000^(-k/half).
template <class T>
Tensor<T> time_embedding(std::span<const T> t, int dim) {
  const auto half = static_cast<std::size_t>(dim / 2);
  Tensor<T> out(Shape{t.size(), 2 * half});
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double s = 1000.0 * static_cast<double>(t[i]);
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      out[i * 2 * half + k] = static_cast<T>(std::cos(s * f));
      out[i * 2 * half + half + k] = static_cast<T>(std::sin(s * f));
    }
  }
  return out;
}

template <class T>
Var<T> condition_tokens(Tape<T>& tape, Encoder<T>& enc, int condition, const Config& cfg, mmvit::Bind mode) {
  if (condition != kNullCondition && (condition < 0 || condition >= cfg.classes)) {
    throw ContractError("condition id " + std::to_string(condition) + " outside [0, " + std::to_string(cfg.classes) + ")");
  }
  const auto row = static_cast<std::size_t>(condition == kNullCondition ? cfg.classes : condition);
  auto emb = gather_rows(mmvit::bind(tape, enc.cond_table, mode), {row});
  return reshape(emb, Shape{static_cast<std::size_t>(cfg.text_tokens), static_cast<std::size_t>(cfg.model.width)});
}

/// Encoder pass over the given tokens; returns normalized text and image outputs.
template <class T>
mmvit::JointSequence<T> encode(Tape<T>& tape, Encoder<T>& enc, const Tensor<T>& tokens, std::span<const posenc::NormalizedPosition> positions,
                               int condition, const Config& cfg, mmvit::Bind mode) {
  if (tokens.rows() != positions.size()) throw ShapeError("encode: token and position counts differ");
  if (tokens.cols() != static_cast<std::size_t>(cfg.token_dim)) {
    throw ShapeError("encode: token dim " + std::to_string(tokens.cols()) + " != " + std::to_string(cfg.token_dim));
  }
  auto text = condition_tokens(tape, enc, condition, cfg, mode);
  auto image = matmul(tape.constant(tokens), mmvit::bind(tape, enc.token_in, mode));
  mmvit::JointSequence<T> seq{text, image,
                              mmvit::make_rotary_tables<T>(static_cast<std::size_t>(cfg.text_tokens), positions, cfg.model)};
  seq = mmvit::stack_forward(seq, enc.blocks, cfg.model, mode);
  seq.text = rms_norm(seq.text, mmvit::bind(tape, enc.out_norm_text, mode));
  seq.image = rms_norm(seq.image, mmvit::bind(tape, enc.out_norm_image, mode));
  return seq;
}

/// Shadow-encoder features of every token; plain values, outside any graph.
template <class T>
Tensor<T> target_features(Model<T>& m, const Tensor<T>& tokens, std::span<const posenc::NormalizedPosition> positions, int condition) {
  Tape<T> tape(false, false);
  return encode(tape, m.phi_bar, tokens, positions, condition, m.cfg, mmvit::Bind::frozen).image.value();
}

/// phi encodes the context; gamma reads phi's outputs plus one mask query per
/// masked position and returns z in the order of `masked_positions`.
template <class T>
Var<T> predict_features(Tape<T>& tape, Model<T>& m, const Tensor<T>& context_tokens,
                        std::span<const posenc::NormalizedPosition> context_positions,
                        std::span<const posenc::NormalizedPosition> masked_positions, int condition,
                        mmvit::Bind mode = mmvit::Bind::trainable) {
  if (masked_positions.empty()) throw ContractError("predict_features: empty mask set");
  const auto& cfg = m.cfg;
  auto ctx = encode(tape, m.phi, context_tokens, context_positions, condition, cfg, mode);
  auto queries = gather_rows(mmvit::bind(tape, m.gamma.mask_query, mode), std::vector<std::size_t>(masked_positions.size(), 0));
  std::vector<posenc::NormalizedPosition> pos(context_positions.begin(), context_positions.end());
  pos.insert(pos.end(), masked_positions.begin(), masked_positions.end());
  auto image = context_positions.empty() ? queries : concat<T>({ctx.image, queries}, 0);
  mmvit::JointSequence<T> seq{ctx.text, image, mmvit::make_rotary_tables<T>(static_cast<std::size_t>(cfg.text_tokens), pos, cfg.model)};
  seq = mmvit::stack_forward(seq, m.gamma.blocks, cfg.model, mode);
  auto z = slice(seq.image, 0, context_positions.size(), pos.size());
  return rms_norm(z, mmvit::bind(tape, m.gamma.out_norm, mode));
}

/// MSE between RMS-normalized predictions and RMS-normalized fixed targets.
template <class T>
Var<T> pred_loss(Var<T> z, const Tensor<T>& targets) {
  if (z.shape() != targets.shape()) throw ShapeError("pred_loss: " + shape_str(z.shape()) + " vs " + shape_str(targets.shape()));
  Tape<T> scratch(false, false);
  const Tensor<T> t_hat = rms_norm(scratch.constant(targets)).value();
  return mean_squared_error(rms_norm(z), z.tape->constant(t_hat));
}

/// v_theta(x_t, t, z) for a batch of tokens; z is [n, width].
template <class T>
Var<T> denoise(Var<T> x_t, std::span<const T> t, Var<T> z, Denoiser<T>& net, const Config& cfg, mmvit::Bind mode = mmvit::Bind::trainable) {
  Tape<T>& tape = *x_t.tape;
  const std::size_t n = x_t.value().rows();
  if (t.size() != n || z.value().rows() != n) throw ShapeError("denoise: batch sizes of x_t, t and z differ");
  auto h = concat<T>({x_t, tape.constant(time_embedding(t, cfg.time_embed_dim)), z}, -1);
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    h = add(matmul(h, mmvit::bind(tape, net.weights[i], mode)), mmvit::bind(tape, net.biases[i], mode));
    if (i + 1 < net.weights.size()) h = silu(h);
  }
  return h;
}

/// phi_bar <- tau * phi_bar + (1 - tau) * phi.
template <class T>
void ema_update(const Encoder<T>& online, Encoder<T>& shadow, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ContractError("ema_update: tau must lie in [0, 1]");
  std::vector<const Parameter<T>*> src;
  Encoder<T>::visit(online, [&](const std::string&, const Parameter<T>& p) { src.push_back(&p); });
  std::size_t k = 0;
  Encoder<T>::visit(shadow, [&](const std::string& name, Parameter<T>& p) {
    if (k >= src.size() || src[k]->value.shape() != p.value.shape()) throw ShapeError("ema_update: shadow layout differs at " + name);
    const auto& v = src[k++]->value;
    for (std::size_t i = 0; i < v.numel(); ++i) p.value[i] = static_cast<T>(tau * p.value[i] + (1.0 - tau) * v[i]);
  });
  if (k != src.size()) throw ShapeError("ema_update: shadow has fewer tensors than the online encoder");
}

// ---------------------------------------------------------------------------
// Training

template <class T>
struct Example {
  TokenGrid<T> grid;
  int condition = kNullCondition;
};

/// Every random choice of one training example, drawn up front so the loss
/// is a deterministic function of the parameters.
template <class T>
struct StepInputs {
  std::vector<std::size_t> kept;  // grid indices surviving the token cap
  MaskPlan plan;                  // indices into `kept`
  int condition = kNullCondition;
  Tensor<T> eps;       // [|M| * repeats, d]
  std::vector<T> t;    // |M| * repeats
};

template <class T>
StepInputs<T> sample_step_inputs(const Config& cfg, const Example<T>& ex, Rng& rng) {
  ex.grid.validate();
  StepInputs<T> in;
  in.kept = token_drop(ex.grid.size(), cfg.token_cap, rng);
  in.plan = sample_mask(in.kept.size(), rng, cfg.mask_min, cfg.mask_max);
  in.condition = rng.uniform() < cfg.cond_drop ? kNullCondition : ex.condition;
  const std::size_t rows = in.plan.masked.size() * static_cast<std::size_t>(cfg.flow_repeats);
  in.eps = flow::standard_normal<T>(Shape{rows, ex.grid.token_dim()}, rng);
  in.t.resize(rows);
  for (auto& t : in.t) t = static_cast<T>(rng.uniform());
  return in;
}

template <class T>
struct FlowBatch {
  Tensor<T> x_t;       // [|M| * repeats, d]
  Tensor<T> v_target;  // [|M| * repeats, d]
  std::vector<std::size_t> z_rows;  // row of z feeding each flow row
};

/// Interpolants and velocity targets; reads only the masked tokens.
template <class T>
FlowBatch<T> flow_batch(const Example<T>& ex, const StepInputs<T>& in) {
  const std::size_t m = in.plan.masked.size(), d = ex.grid.token_dim();
  const std::size_t reps = m ? in.t.size() / m : 0;
  FlowBatch<T> fb{Tensor<T>(Shape{in.t.size(), d}), Tensor<T>(Shape{in.t.size(), d}), {}};
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t row = r * m + i;
      const auto x = ex.grid.tokens.row(in.kept[in.plan.masked[i]]);
      const T t = in.t[row];
      for (std::size_t j = 0; j < d; ++j) {
        const T e = in.eps[row * d + j];
        fb.x_t[row * d + j] = t * x[j] + (T{1} - t) * e;
        fb.v_target[row * d + j] = x[j] - e;
      }
      fb.z_rows.push_back(i);
    }
  }
  return fb;
}

template <class T>
struct StepLoss {
  Var<T> total;
  Var<T> pred;
  Var<T> flow;
};

/// lambda_pred * L_pred + L_flow for one example; both averaged over masked tokens.
template <class T>
StepLoss<T> step_loss(Tape<T>& tape, Model<T>& m, const Example<T>& ex, const StepInputs<T>& in) {
  const auto all_pos = ex.grid.positions();
  const auto kept_pos = gather(all_pos, in.kept);
  const auto kept_tokens = gather(ex.grid.tokens, in.kept);
  const auto ctx_pos = gather(kept_pos, in.plan.context);
  const auto msk_pos = gather(kept_pos, in.plan.masked);

  auto z = predict_features(tape, m, gather(kept_tokens, in.plan.context), ctx_pos, msk_pos, in.condition);
  const Tensor<T> targets = gather(target_features(m, kept_tokens, kept_pos, in.condition), in.plan.masked);
  auto lp = pred_loss(z, targets);

  const auto fb = flow_batch(ex, in);
  auto v = denoise(tape.constant(fb.x_t), std::span<const T>(in.t), gather_rows(z, fb.z_rows), m.denoiser, m.cfg);
  auto lf = mean_squared_error(v, tape.constant(fb.v_target));
  return {add(scale(lp, static_cast<T>(m.cfg.lambda_pred)), lf), lp, lf};
}

struct Metrics {
  std::uint64_t step = 0;
  double loss_pred = 0.0;
  double loss_flow = 0.0;
  double grad_norm = 0.0;
  double ema_tau = 0.0;

  bool operator==(const Metrics&) const = default;
};

inline void write_metrics_header(std::ostream& os) { os << "step,loss_pred,loss_flow,grad_norm,ema_tau\n"; }

inline void write_metrics_row(std::ostream& os, const Metrics& m) {
  char buf[200];
  std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%.9g\n", static_cast<unsigned long long>(m.step), m.loss_pred, m.loss_flow,
                m.grad_norm, m.ema_tau);
  os << buf;
}

/// One optimizer step over a batch: mean loss, backward, AdamW on phi, gamma
/// and the denoiser, then the EMA update of phi_bar.
template <class T>
Metrics train_step(Model<T>& m, std::span<const Example<T>> batch, Rng& rng, std::uint64_t step) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  auto params = m.trainable();
  zero_grads<T>(params);
  Metrics out;
  out.step = step;
  out.ema_tau = m.cfg.ema_tau;
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  for (const auto& ex : batch) {
    const auto inputs = sample_step_inputs(m.cfg, ex, rng);
    Tape<T> tape;
    auto loss = step_loss(tape, m, ex, inputs);
    const double lp = loss.pred.value().item(), lf = loss.flow.value().item();
    if (!std::isfinite(lp) || !std::isfinite(lf)) throw NumericError("non-finite loss at step " + std::to_string(step));
    out.loss_pred += lp / static_cast<double>(batch.size());
    out.loss_flow += lf / static_cast<double>(batch.size());
    tape.backward(scale(loss.total, inv_b));
  }
  out.grad_norm = grad_norm<T>(params);
  if (!std::isfinite(out.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
  if (m.cfg.grad_clip > 0.0) clip_grad_norm<T>(params, m.cfg.grad_clip);
  optimizer_step<T>(params, m.cfg.optim);
  ema_update(m.phi, m.phi_bar, m.cfg.ema_tau);
  if (has_gradient_state(m.phi_bar)) throw ContractError("target encoder acquired gradient state at step " + std::to_string(step));
  return out;
}

}  // namespace djfk::jepa
