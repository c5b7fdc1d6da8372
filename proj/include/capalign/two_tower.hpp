#pragma once

// CLIP-style two-tower contrastive model over precomputed image features and
// mean-pooled token embeddings.
//
// Forward pass for a batch of N pairs:
//   u_i = W_img x_i + b_img            a_i = u_i / |u_i|
//   m_j = mean of E[tok] over non-pad  w_j = W_txt m_j + b_txt   t_j = w_j / |w_j|
//   L_ij = s * <a_i, t_j>,  s = min(exp(log_temperature), 100)
//   loss = 1/2 (CE over rows of L + CE over columns of L), targets on the diagonal.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <sstream>
#include <string>
#include <vector>

#include "capalign/error.hpp"
#include "capalign/io.hpp"
#include "capalign/tokenizer.hpp"

namespace capalign::two_tower {

using tokenizer::TokenSequence;
using Vector = std::vector<double>;

inline constexpr double kMaxLogitScale = 100.0;
inline constexpr double kMinNorm = 1e-12;

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Image and text projection heads into a shared embedding space plus a
/// learnable temperature. The same type holds gradients.
struct TwoTowerModel {
  Matrix image_proj;       // d_emb x d_img
  Vector image_bias;       // d_emb
  Matrix token_embedding;  // |V| x d_tok
  Matrix text_proj;        // d_emb x d_tok
  Vector text_bias;        // d_emb
  double log_temperature = 0.0;

  std::size_t d_img() const { return image_proj.cols; }
  std::size_t d_tok() const { return token_embedding.cols; }
  std::size_t d_emb() const { return image_proj.rows; }
  std::size_t vocab_size() const { return token_embedding.rows; }

  /// Parameters in a fixed order; used by the optimizer and checkpoints.
  std::array<std::span<double>, 6> parameters() {
    return {std::span<double>(image_proj.data), std::span<double>(image_bias),
            std::span<double>(token_embedding.data), std::span<double>(text_proj.data),
            std::span<double>(text_bias), std::span<double>(&log_temperature, 1)};
  }
  std::array<std::span<const double>, 6> parameters() const {
    return {std::span<const double>(image_proj.data), std::span<const double>(image_bias),
            std::span<const double>(token_embedding.data), std::span<const double>(text_proj.data),
            std::span<const double>(text_bias), std::span<const double>(&log_temperature, 1)};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto p : parameters()) n += p.size();
    return n;
  }

  bool same_shape(const TwoTowerModel& other) const {
    return d_img() == other.d_img() && d_tok() == other.d_tok() && d_emb() == other.d_emb() &&
           vocab_size() == other.vocab_size() && text_proj.rows == other.text_proj.rows &&
           text_proj.cols == other.text_proj.cols && image_bias.size() == other.image_bias.size() &&
           text_bias.size() == other.text_bias.size();
  }

  static TwoTowerModel zeros(std::size_t d_img, std::size_t d_tok, std::size_t d_emb, std::size_t vocab_size) {
    TwoTowerModel m;
    m.image_proj = Matrix(d_emb, d_img);
    m.image_bias.assign(d_emb, 0.0);
    m.token_embedding = Matrix(vocab_size, d_tok);
    m.text_proj = Matrix(d_emb, d_tok);
    m.text_bias.assign(d_emb, 0.0);
    return m;
  }

  friend bool operator==(const TwoTowerModel&, const TwoTowerModel&) = default;
};

struct Batch {
  std::vector<Vector> image_features;
  std::vector<TokenSequence> token_sequences;

  std::size_t size() const { return image_features.size(); }
};

struct Sample {
  Vector image_features;
  TokenSequence tokens;
};

struct SchedulerConfig {
  double eta_min = 0.0;
  long t0 = 0;  // 0: one cycle per epoch (optimizer steps per epoch)
  long t_mult = 1;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  SchedulerConfig scheduler;
  long epochs = 10;
  std::uint64_t rng_seed = 0;
};

// ---- initialization ----

namespace detail {

// Uniform double in [0, 1) from the top 53 bits; stable across standard libraries.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline void fill_uniform(std::span<double> values, double bound, std::mt19937_64& rng) {
  for (auto& v : values) v = (2.0 * unit_uniform(rng) - 1.0) * bound;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace detail

/// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; log_temperature = ln(1/0.07).
inline TwoTowerModel initialize(std::size_t d_img, std::size_t d_tok, std::size_t d_emb, std::size_t vocab_size,
                                std::uint64_t seed) {
  if (d_img == 0 || d_tok == 0 || d_emb == 0 || vocab_size == 0) {
    throw DimensionMismatch("model dimensions must be >= 1");
  }
  auto m = TwoTowerModel::zeros(d_img, d_tok, d_emb, vocab_size);
  std::mt19937_64 rng(seed);
  const double img_bound = 1.0 / std::sqrt(static_cast<double>(d_img));
  const double tok_bound = 1.0 / std::sqrt(static_cast<double>(d_tok));
  detail::fill_uniform(m.image_proj.data, img_bound, rng);
  detail::fill_uniform(m.image_bias, img_bound, rng);
  detail::fill_uniform(m.token_embedding.data, tok_bound, rng);
  detail::fill_uniform(m.text_proj.data, tok_bound, rng);
  detail::fill_uniform(m.text_bias, tok_bound, rng);
  m.log_temperature = std::log(1.0 / 0.07);
  return m;
}

inline double logit_scale(const TwoTowerModel& model) {
  return std::min(std::exp(model.log_temperature), kMaxLogitScale);
}

// ---- encoders ----

inline Vector affine(const Matrix& w, std::span<const double> b, std::span<const double> x) {
  Vector out(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) out[r] = b[r] + detail::dot(w.row(r), x);
  return out;
}

/// Returns the norm of `v` and scales it to unit length.
inline double normalize_in_place(Vector& v) {
  const double n = detail::norm(v);
  if (!(n >= kMinNorm)) throw DegenerateEmbedding();
  for (auto& x : v) x /= n;
  return n;
}

inline Vector project_image(const TwoTowerModel& model, std::span<const double> features) {
  if (features.size() != model.d_img()) {
    throw DimensionMismatch("image feature has dimension " + std::to_string(features.size()) + ", model expects " +
                            std::to_string(model.d_img()));
  }
  return affine(model.image_proj, model.image_bias, features);
}

inline void validate_tokens(const TwoTowerModel& model, const TokenSequence& tokens) {
  if (tokens.true_length < 2 || static_cast<std::size_t>(tokens.true_length) > tokens.ids.size()) {
    throw ShapeMismatch("token sequence true_length out of range");
  }
  for (int p = 0; p < tokens.true_length; ++p) {
    const auto id = tokens.ids[static_cast<std::size_t>(p)];
    if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size()) {
      throw DimensionMismatch("token id " + std::to_string(id) + " outside the embedding table");
    }
  }
}

/// Mean of the embedding rows at positions [0, true_length).
inline Vector mean_token_embedding(const TwoTowerModel& model, const TokenSequence& tokens) {
  validate_tokens(model, tokens);
  Vector mean(model.d_tok(), 0.0);
  for (int p = 0; p < tokens.true_length; ++p) {
    auto row = model.token_embedding.row(static_cast<std::size_t>(tokens.ids[static_cast<std::size_t>(p)]));
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += row[k];
  }
  for (auto& x : mean) x /= tokens.true_length;
  return mean;
}

inline Vector embed_image(const TwoTowerModel& model, std::span<const double> features) {
  auto u = project_image(model, features);
  normalize_in_place(u);
  return u;
}

inline Vector embed_text(const TwoTowerModel& model, const TokenSequence& tokens) {
  auto w = affine(model.text_proj, model.text_bias, mean_token_embedding(model, tokens));
  normalize_in_place(w);
  return w;
}

// ---- loss ----

inline void validate_batch(const Batch& batch) {
  if (batch.image_features.size() != batch.token_sequences.size()) {
    throw ShapeMismatch("batch has " + std::to_string(batch.image_features.size()) + " images but " +
                        std::to_string(batch.token_sequences.size()) + " captions");
  }
  if (batch.size() < 2) throw ShapeMismatch("contrastive batch needs at least 2 pairs");
}

/// Symmetric cross-entropy of a square logit matrix with diagonal targets.
/// When `grad` is given it receives d loss / d logits.
inline double symmetric_cross_entropy(const Matrix& logits, Matrix* grad = nullptr) {
  const std::size_t n = logits.rows;
  if (n == 0 || logits.cols != n) throw ShapeMismatch("logit matrix must be square and non-empty");
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad) *grad = Matrix(n, n);

  double row_loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(logits(i, j) - mx);
    const double lse = mx + std::log(z);
    row_loss += lse - logits(i, i);
    if (grad) {
      for (std::size_t j = 0; j < n; ++j) {
        (*grad)(i, j) += 0.5 * inv_n * (std::exp(logits(i, j) - lse) - (i == j ? 1.0 : 0.0));
      }
    }
  }
  double col_loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mx = logits(0, j);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(logits(i, j) - mx);
    const double lse = mx + std::log(z);
    col_loss += lse - logits(j, j);
    if (grad) {
      for (std::size_t i = 0; i < n; ++i) {
        (*grad)(i, j) += 0.5 * inv_n * (std::exp(logits(i, j) - lse) - (i == j ? 1.0 : 0.0));
      }
    }
  }
  return 0.5 * (row_loss * inv_n + col_loss * inv_n);
}

struct LossResult {
  double loss = 0.0;
  Matrix logits;
};

namespace detail {

// Intermediate values of one forward pass, kept for backpropagation.
struct Forward {
  std::vector<Vector> image_unit, text_unit, text_mean;
  Vector image_norm, text_norm;
  double scale = 0.0;
  Matrix logits;
};

inline Forward forward(const TwoTowerModel& model, const Batch& batch) {
  validate_batch(batch);
  const std::size_t n = batch.size();
  Forward f;
  f.image_unit.reserve(n);
  f.text_unit.reserve(n);
  f.text_mean.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto u = project_image(model, batch.image_features[i]);
    f.image_norm.push_back(normalize_in_place(u));
    f.image_unit.push_back(std::move(u));

    auto mean = mean_token_embedding(model, batch.token_sequences[i]);
    auto w = affine(model.text_proj, model.text_bias, mean);
    f.text_norm.push_back(normalize_in_place(w));
    f.text_unit.push_back(std::move(w));
    f.text_mean.push_back(std::move(mean));
  }
  f.scale = logit_scale(model);
  f.logits = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) f.logits(i, j) = f.scale * dot(f.image_unit[i], f.text_unit[j]);
  }
  return f;
}

// Gradient through v = u / |u| given the unit vector and |u|.
inline Vector unnormalize_grad(std::span<const double> unit, double n, std::span<const double> d_unit) {
  const double proj = dot(unit, d_unit);
  Vector du(unit.size());
  for (std::size_t k = 0; k < unit.size(); ++k) du[k] = (d_unit[k] - unit[k] * proj) / n;
  return du;
}

}  // namespace detail

inline LossResult contrastive_loss(const TwoTowerModel& model, const Batch& batch) {
  auto f = detail::forward(model, batch);
  LossResult r;
  r.loss = symmetric_cross_entropy(f.logits);
  r.logits = std::move(f.logits);
  return r;
}

struct LossAndGradients {
  double loss = 0.0;
  TwoTowerModel gradients;
};

/// Loss and analytic gradients with respect to every parameter. The
/// temperature gradient is zero while the logit scale sits at its clamp.
inline LossAndGradients loss_and_gradients(const TwoTowerModel& model, const Batch& batch) {
  auto f = detail::forward(model, batch);
  const std::size_t n = batch.size();
  const std::size_t d = model.d_emb();

  Matrix g;
  LossAndGradients out;
  out.loss = symmetric_cross_entropy(f.logits, &g);
  auto& grad = out.gradients;
  grad = TwoTowerModel::zeros(model.d_img(), model.d_tok(), d, model.vocab_size());

  // d loss / d scale = sum_ij g_ij <a_i, t_j>
  double d_scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) d_scale += g(i, j) * f.logits(i, j);
  }
  d_scale /= f.scale;
  grad.log_temperature = std::exp(model.log_temperature) < kMaxLogitScale ? d_scale * f.scale : 0.0;

  for (std::size_t i = 0; i < n; ++i) {
    // image side: dA_i = s * sum_j g_ij t_j
    Vector d_unit(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < d; ++k) d_unit[k] += f.scale * g(i, j) * f.text_unit[j][k];
    }
    const auto du = detail::unnormalize_grad(f.image_unit[i], f.image_norm[i], d_unit);
    const auto& x = batch.image_features[i];
    for (std::size_t r = 0; r < d; ++r) {
      grad.image_bias[r] += du[r];
      auto row = grad.image_proj.row(r);
      for (std::size_t c = 0; c < x.size(); ++c) row[c] += du[r] * x[c];
    }
  }

  for (std::size_t j = 0; j < n; ++j) {
    // text side: dT_j = s * sum_i g_ij a_i
    Vector d_unit(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) d_unit[k] += f.scale * g(i, j) * f.image_unit[i][k];
    }
    const auto dw = detail::unnormalize_grad(f.text_unit[j], f.text_norm[j], d_unit);
    const auto& mean = f.text_mean[j];
    Vector d_mean(model.d_tok(), 0.0);
    for (std::size_t r = 0; r < d; ++r) {
      grad.text_bias[r] += dw[r];
      auto row = grad.text_proj.row(r);
      auto w_row = model.text_proj.row(r);
      for (std::size_t c = 0; c < mean.size(); ++c) {
        row[c] += dw[r] * mean[c];
        d_mean[c] += w_row[c] * dw[r];
      }
    }
    const auto& seq = batch.token_sequences[j];
    const double inv_len = 1.0 / seq.true_length;
    for (int p = 0; p < seq.true_length; ++p) {
      auto row = grad.token_embedding.row(static_cast<std::size_t>(seq.ids[static_cast<std::size_t>(p)]));
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += d_mean[c] * inv_len;
    }
  }
  return out;
}

inline TwoTowerModel loss_gradients(const TwoTowerModel& model, const Batch& batch) {
  return loss_and_gradients(model, batch).gradients;
}

// ---- optimizer ----

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment estimates, one entry per parameter.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
};

namespace detail {

inline void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                        std::span<double> v, long t, double lr, const AdamConfig& cfg) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grads[k];
    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grads[k] * grads[k];
    const double m_hat = m[k] / c1;
    const double v_hat = v[k] / c2;
    params[k] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

inline void prepare_state(AdamState& state, std::size_t n, long t) {
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  if (state.m.size() != n || state.v.size() != n) {
    throw ShapeMismatch("optimizer state does not match parameter count");
  }
  if (t < 1) throw std::invalid_argument("adam step index must be >= 1");
}

}  // namespace detail

/// One bias-corrected Adam update at step index t (1-based). A default
/// constructed state is sized on first use.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, long t, double lr,
                      const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw ShapeMismatch("parameter and gradient sizes differ");
  detail::prepare_state(state, params.size(), t);
  detail::adam_update(params, grads, state.m, state.v, t, lr, cfg);
}

inline void adam_step(TwoTowerModel& model, const TwoTowerModel& grads, AdamState& state, long t, double lr,
                      const AdamConfig& cfg = {}) {
  if (!model.same_shape(grads)) throw ShapeMismatch("gradient shape does not match model");
  detail::prepare_state(state, model.parameter_count(), t);
  auto params = model.parameters();
  auto g = grads.parameters();
  std::size_t offset = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    const auto len = params[b].size();
    detail::adam_update(params[b], g[b], std::span<double>(state.m).subspan(offset, len),
                        std::span<double>(state.v).subspan(offset, len), t, lr, cfg);
    offset += len;
  }
}

// ---- learning-rate schedule ----

/// Cosine annealing within one cycle of length `cycle_length`.
inline double lr_at(long step_in_cycle, long cycle_length, double lr_max, double eta_min) {
  if (cycle_length < 1 || step_in_cycle < 0 || step_in_cycle > cycle_length) {
    throw std::invalid_argument("step_in_cycle must lie in [0, cycle_length]");
  }
  const double phase = std::numbers::pi * static_cast<double>(step_in_cycle) / static_cast<double>(cycle_length);
  return eta_min + 0.5 * (lr_max - eta_min) * (1.0 + std::cos(phase));
}

struct CyclePosition {
  long step_in_cycle = 0;
  long cycle_length = 1;
  long restarts = 0;
};

/// Locates a global optimizer step inside the warm-restart cycles
/// T_i = t0 * t_mult^i. A cycle's last step is followed by step 0 of the next.
inline CyclePosition cycle_position(long global_step, long t0, long t_mult) {
  if (t0 < 1 || t_mult < 1) throw std::invalid_argument("scheduler needs t0 >= 1 and t_mult >= 1");
  CyclePosition pos{global_step, t0, 0};
  while (pos.step_in_cycle >= pos.cycle_length) {
    pos.step_in_cycle -= pos.cycle_length;
    pos.cycle_length *= t_mult;
    ++pos.restarts;
  }
  return pos;
}

inline double scheduled_lr(long global_step, long t0, const TrainConfig& cfg) {
  const auto pos = cycle_position(global_step, t0, cfg.scheduler.t_mult);
  return lr_at(pos.step_in_cycle, pos.cycle_length, cfg.learning_rate, cfg.scheduler.eta_min);
}

// ---- training ----

struct EpochLog {
  long epoch = 0;
  double mean_loss = 0.0;
  double lr_at_epoch_start = 0.0;
};

struct TrainResult {
  TwoTowerModel model;
  std::vector<EpochLog> log;
};

/// Batches actually run per epoch: full batches plus a final partial one of size >= 2.
inline long steps_per_epoch(std::size_t dataset_size, std::size_t batch_size) {
  const auto full = dataset_size / batch_size;
  const auto rest = dataset_size % batch_size;
  return static_cast<long>(full + (rest >= 2 ? 1 : 0));
}

inline void validate(const TrainConfig& cfg) {
  if (cfg.batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (cfg.scheduler.t0 < 0 || cfg.scheduler.t_mult < 1) throw std::invalid_argument("invalid scheduler settings");
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
}

/// Single-threaded seeded training; the same seed and data give a bit-identical model.
inline TrainResult train(TwoTowerModel model, const std::vector<Sample>& dataset, const TrainConfig& cfg) {
  validate(cfg);
  if (dataset.size() < cfg.batch_size) {
    throw DatasetTooSmall("dataset has " + std::to_string(dataset.size()) + " samples, batch_size is " +
                          std::to_string(cfg.batch_size));
  }
  const long per_epoch = steps_per_epoch(dataset.size(), cfg.batch_size);
  const long t0 = cfg.scheduler.t0 > 0 ? cfg.scheduler.t0 : per_epoch;
  const AdamConfig adam{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon};

  TrainResult result;
  AdamState state;
  std::mt19937_64 rng(cfg.rng_seed);
  std::vector<std::size_t> order(dataset.size());
  long global_step = 0;

  for (long epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng() % k]);

    EpochLog entry{epoch, 0.0, scheduled_lr(global_step, t0, cfg)};
    for (long s = 0; s < per_epoch; ++s) {
      const std::size_t begin = static_cast<std::size_t>(s) * cfg.batch_size;
      const std::size_t end = std::min(begin + cfg.batch_size, dataset.size());
      Batch batch;
      for (std::size_t k = begin; k < end; ++k) {
        batch.image_features.push_back(dataset[order[k]].image_features);
        batch.token_sequences.push_back(dataset[order[k]].tokens);
      }
      auto lg = loss_and_gradients(model, batch);
      const double lr = scheduled_lr(global_step, t0, cfg);
      ++global_step;
      adam_step(model, lg.gradients, state, global_step, lr, adam);
      entry.mean_loss += lg.loss;
    }
    entry.mean_loss /= static_cast<double>(per_epoch);
    result.log.push_back(entry);
  }
  result.model = std::move(model);
  return result;
}

inline std::string loss_log_to_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,mean_loss,lr_at_epoch_start\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + "," + io::format_double(e.mean_loss) + "," +
           io::format_double(e.lr_at_epoch_start) + "\n";
  }
  return out;
}

// ---- checkpoint ----

inline constexpr const char* kCheckpointMagic = "capalign-two-tower";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_block(std::string& out, const char* name, std::size_t rows, std::size_t cols,
                        std::span<const double> values) {
  out += name;
  out += ' ' + std::to_string(rows) + ' ' + std::to_string(cols) + '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c) out += ' ';
      out += io::format_double(values[r * cols + c]);
    }
    out += '\n';
  }
}

inline void read_block(std::istream& in, const char* name, std::size_t rows, std::size_t cols,
                       std::span<double> values) {
  std::string tag;
  std::size_t r = 0, c = 0;
  if (!(in >> tag >> r >> c) || tag != name) throw ParseError(std::string("checkpoint: expected block ") + name);
  if (r != rows || c != cols) {
    throw ParseError(std::string("checkpoint: block ") + name + " has shape " + std::to_string(r) + "x" +
                     std::to_string(c) + ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  std::string token;
  for (auto& v : values) {
    if (!(in >> token)) throw ParseError(std::string("checkpoint: block ") + name + " is truncated");
    v = io::parse_double(token);
    if (!std::isfinite(v)) throw ParseError(std::string("checkpoint: non-finite value in ") + name);
  }
}

}  // namespace detail

/// Text checkpoint: a version line, the dimensions, then each parameter block
/// as a "name rows cols" header followed by row-major values.
inline std::string checkpoint_to_string(const TwoTowerModel& m) {
  std::string out = std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion) + "\n";
  out += "dims " + std::to_string(m.d_img()) + " " + std::to_string(m.d_tok()) + " " + std::to_string(m.d_emb()) +
         " " + std::to_string(m.vocab_size()) + "\n";
  detail::write_block(out, "image_proj", m.image_proj.rows, m.image_proj.cols, m.image_proj.data);
  detail::write_block(out, "image_bias", 1, m.image_bias.size(), m.image_bias);
  detail::write_block(out, "token_embedding", m.token_embedding.rows, m.token_embedding.cols, m.token_embedding.data);
  detail::write_block(out, "text_proj", m.text_proj.rows, m.text_proj.cols, m.text_proj.data);
  detail::write_block(out, "text_bias", 1, m.text_bias.size(), m.text_bias);
  detail::write_block(out, "log_temperature", 1, 1, std::span<const double>(&m.log_temperature, 1));
  return out;
}

inline TwoTowerModel checkpoint_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string magic, dims_tag;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) throw ParseError("not a two-tower checkpoint");
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  long d_img = 0, d_tok = 0, d_emb = 0, vocab = 0;
  if (!(in >> dims_tag >> d_img >> d_tok >> d_emb >> vocab) || dims_tag != "dims") {
    throw ParseError("checkpoint: missing dims line");
  }
  if (d_img < 1 || d_tok < 1 || d_emb < 1 || vocab < 1) throw ParseError("checkpoint: dimensions must be >= 1");
  auto m = TwoTowerModel::zeros(static_cast<std::size_t>(d_img), static_cast<std::size_t>(d_tok),
                                static_cast<std::size_t>(d_emb), static_cast<std::size_t>(vocab));
  detail::read_block(in, "image_proj", m.image_proj.rows, m.image_proj.cols, m.image_proj.data);
  detail::read_block(in, "image_bias", 1, m.image_bias.size(), m.image_bias);
  detail::read_block(in, "token_embedding", m.token_embedding.rows, m.token_embedding.cols, m.token_embedding.data);
  detail::read_block(in, "text_proj", m.text_proj.rows, m.text_proj.cols, m.text_proj.data);
  detail::read_block(in, "text_bias", 1, m.text_bias.size(), m.text_bias);
  detail::read_block(in, "log_temperature", 1, 1, std::span<double>(&m.log_temperature, 1));
  std::string trailing;
  if (in >> trailing) throw ParseError("checkpoint: unexpected trailing data");
  return m;
}

inline void save_checkpoint(const TwoTowerModel& m, const std::filesystem::path& path) {
  io::write_file(path, checkpoint_to_string(m));
}

inline TwoTowerModel load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(io::read_file(path));
}

}  // namespace capalign::two_tower
