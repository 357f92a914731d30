// SPDX-License-Identifier: Apache-2.0
#pragma once

// MOS regressor: per-channel batch norm, optional stacked bidirectional LSTM,
// additive attention pooling over valid frames, a one-hidden-layer
// feedforward head and a sigmoid output in (0, 1).
//
// Only the first valid_frames rows of each sequence are read; the padded tail
// never influences batch statistics, recurrences or attention.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mosqa/error.hpp"
#include "mosqa/features.hpp"
#include "mosqa/rng.hpp"

namespace mosqa {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  std::size_t input_channels = 40;
  bool use_bilstm = true;
  std::size_t lstm_layers = 2;
  std::size_t lstm_hidden = 32; // per direction
  std::size_t attpool_hidden = 64;
  double dropout_p = 0.1;
  std::size_t seq_len = kSequenceLength;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  /// Width of the sequence seen by attention pooling.
  std::size_t pooled_dim() const noexcept {
    return use_bilstm ? 2 * lstm_hidden : input_channels;
  }

  void validate() const {
    if (input_channels == 0) throw UsageError("model: input_channels must be positive");
    if (use_bilstm && (lstm_layers == 0 || lstm_hidden == 0))
      throw UsageError("model: lstm_layers and lstm_hidden must be positive");
    if (attpool_hidden == 0) throw UsageError("model: attpool_hidden must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw UsageError("model: dropout_p must be in [0, 1)");
    if (seq_len == 0) throw UsageError("model: seq_len must be positive");
    if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw UsageError("model: bn_momentum must be in [0, 1]");
    if (!(bn_eps > 0.0)) throw UsageError("model: bn_eps must be positive");
  }

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

/// Weights of one LSTM direction. Gate order along rows: input, forget, cell, output.
template <typename T>
struct LstmWeights {
  Matrix<T> w_ih; // 4H x in
  Matrix<T> w_hh; // 4H x H
  Vector<T> bias; // 4H
};

template <typename T>
struct NamedTensor {
  std::string name;
  std::span<T> values;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;

  Vector<T> bn_scale;
  Vector<T> bn_shift;
  // Not trained; updated from batch statistics in Train mode.
  Vector<T> bn_running_mean;
  Vector<T> bn_running_var;

  std::vector<LstmWeights<T>> lstm; // index = 2 * layer + direction

  Matrix<T> att_w; // A x D
  Vector<T> att_b; // A
  Vector<T> att_v; // A

  Matrix<T> ff_w1; // F x D
  Vector<T> ff_b1; // F
  Matrix<T> ff_w2; // 1 x F
  Vector<T> ff_b2; // 1

  /// Zero-filled parameters with the shapes implied by `cfg`.
  static ModelParams zeros(const ModelConfig &cfg) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    const auto C = static_cast<Eigen::Index>(cfg.input_channels);
    const auto H = static_cast<Eigen::Index>(cfg.lstm_hidden);
    const auto D = static_cast<Eigen::Index>(cfg.pooled_dim());
    const auto A = static_cast<Eigen::Index>(cfg.attpool_hidden);
    p.bn_scale = Vector<T>::Zero(C);
    p.bn_shift = Vector<T>::Zero(C);
    p.bn_running_mean = Vector<T>::Zero(C);
    p.bn_running_var = Vector<T>::Ones(C);
    if (cfg.use_bilstm) {
      for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
        const Eigen::Index in = l == 0 ? C : 2 * H;
        for (int d = 0; d < 2; ++d)
          p.lstm.push_back({Matrix<T>::Zero(4 * H, in), Matrix<T>::Zero(4 * H, H), Vector<T>::Zero(4 * H)});
      }
    }
    p.att_w = Matrix<T>::Zero(A, D);
    p.att_b = Vector<T>::Zero(A);
    p.att_v = Vector<T>::Zero(A);
    p.ff_w1 = Matrix<T>::Zero(A, D);
    p.ff_b1 = Vector<T>::Zero(A);
    p.ff_w2 = Matrix<T>::Zero(1, A);
    p.ff_b2 = Vector<T>::Zero(1);
    return p;
  }

  /// Trainable tensors in a fixed order (batch-norm running stats excluded).
  std::vector<NamedTensor<T>> trainable() { return collect<T>(*this); }
  std::vector<NamedTensor<const T>> trainable() const { return collect<const T>(*this); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto &t : trainable()) n += t.values.size();
    return n;
  }

private:
  template <typename U, typename Self>
  static std::vector<NamedTensor<U>> collect(Self &p) {
    std::vector<NamedTensor<U>> out;
    auto add = [&](std::string name, auto &m) {
      out.push_back({std::move(name), std::span<U>(m.data(), static_cast<std::size_t>(m.size()))});
    };
    add("bn.scale", p.bn_scale);
    add("bn.shift", p.bn_shift);
    for (std::size_t i = 0; i < p.lstm.size(); ++i) {
      const auto prefix = "lstm.l" + std::to_string(i / 2) + (i % 2 ? ".bwd" : ".fwd");
      add(prefix + ".w_ih", p.lstm[i].w_ih);
      add(prefix + ".w_hh", p.lstm[i].w_hh);
      add(prefix + ".bias", p.lstm[i].bias);
    }
    add("att.w", p.att_w);
    add("att.b", p.att_b);
    add("att.v", p.att_v);
    add("ff.w1", p.ff_w1);
    add("ff.b1", p.ff_b1);
    add("ff.w2", p.ff_w2);
    add("ff.b2", p.ff_b2);
    return out;
  }
};

/// Closed-form trainable parameter count for a configuration.
inline std::size_t parameter_count(const ModelConfig &cfg) {
  const std::size_t C = cfg.input_channels, H = cfg.lstm_hidden, A = cfg.attpool_hidden;
  const std::size_t D = cfg.pooled_dim();
  std::size_t n = 2 * C;
  if (cfg.use_bilstm)
    for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
      const std::size_t in = l == 0 ? C : 2 * H;
      n += 2 * (4 * H * in + 4 * H * H + 4 * H);
    }
  n += A * D + 2 * A;     // attention scoring
  n += A * D + A + A + 1; // feedforward head
  return n;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases except the
/// LSTM forget gate (1), batch-norm scale 1 and shift 0.
template <typename T = double>
ModelParams<T> init_params(const ModelConfig &cfg, std::uint64_t seed) {
  auto p = ModelParams<T>::zeros(cfg);
  Rng rng(derive_seed(seed, 0x1417));
  auto fill = [&](auto &m, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  };
  p.bn_scale.setOnes();
  const auto H = static_cast<Eigen::Index>(cfg.lstm_hidden);
  for (auto &w : p.lstm) {
    fill(w.w_ih, static_cast<std::size_t>(w.w_ih.cols()));
    fill(w.w_hh, static_cast<std::size_t>(w.w_hh.cols()));
    w.bias.segment(H, H).setOnes();
  }
  fill(p.att_w, cfg.pooled_dim());
  fill(p.att_v, cfg.attpool_hidden);
  fill(p.ff_w1, cfg.pooled_dim());
  fill(p.ff_w2, cfg.attpool_hidden);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode { Train, Eval };

/// A batch is a list of sequences sharing channel count and length.
using Batch = std::vector<const FixedSequence *>;

inline Batch make_batch(const std::vector<FixedSequence> &items) {
  Batch b;
  b.reserve(items.size());
  for (const auto &s : items) b.push_back(&s);
  return b;
}

template <typename T>
struct LstmDirectionCache {
  Matrix<T> gates;     // n x 4H, activated
  Matrix<T> cell;      // n x H
  Matrix<T> tanh_cell; // n x H
  Matrix<T> hidden;    // n x H
};

template <typename T>
struct ItemCache {
  std::size_t frames = 0;
  Matrix<T> x_hat;  // n x C, normalized before scale/shift
  Matrix<T> bn_out; // n x C
  std::vector<Matrix<T>> layer_in;
  std::vector<std::array<LstmDirectionCache<T>, 2>> lstm;
  std::vector<Matrix<T>> layer_mask; // empty when dropout is off
  Matrix<T> pool_in;                 // n x D
  Matrix<T> att_act;                 // n x A
  Vector<T> alpha;                   // n
  Vector<T> pooled;                  // D
  Vector<T> ff_hidden;               // F, after tanh
  Vector<T> ff_mask;                 // F, empty when dropout is off
  T logit{};
  T prediction{};
};

template <typename T>
struct ForwardResult {
  Mode mode = Mode::Eval;
  std::vector<T> predictions;
  std::vector<ItemCache<T>> items;
  Vector<T> batch_mean;    // Train mode only
  Vector<T> batch_var;     // biased, Train mode only
  std::size_t batch_frames = 0;
};

template <typename T>
struct BackwardResult {
  T loss{};
  ModelParams<T> grads;
};

namespace detail {

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename Derived>
void check_finite(const Eigen::MatrixBase<Derived> &m, const char *layer) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite values after ") + layer);
}

/// Runs fn(i) for i in [0, n). Work is split by index only, so the result of
/// each call never depends on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn &&fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += threads) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
  }
  for (auto &e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename T>
Matrix<T> dropout_mask(Rng &rng, Eigen::Index rows, Eigen::Index cols, double p) {
  Matrix<T> m(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? T(0) : keep;
  return m;
}

template <typename T>
void lstm_direction_forward(const LstmWeights<T> &w, const Matrix<T> &x, bool reverse,
                            LstmDirectionCache<T> &cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index H = w.w_hh.cols();
  Matrix<T> pre = x * w.w_ih.transpose();
  pre.rowwise() += w.bias.transpose();
  cache.gates.resize(n, 4 * H);
  cache.cell.resize(n, H);
  cache.tanh_cell.resize(n, H);
  cache.hidden.resize(n, H);
  Vector<T> h = Vector<T>::Zero(H), c = Vector<T>::Zero(H), z(4 * H);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index t = reverse ? n - 1 - k : k;
    z.noalias() = pre.row(t).transpose();
    z.noalias() += w.w_hh * h;
    for (Eigen::Index j = 0; j < H; ++j) {
      const T ig = sigmoid(z[j]);
      const T fg = sigmoid(z[H + j]);
      const T gg = std::tanh(z[2 * H + j]);
      const T og = sigmoid(z[3 * H + j]);
      c[j] = fg * c[j] + ig * gg;
      const T tc = std::tanh(c[j]);
      h[j] = og * tc;
      cache.gates(t, j) = ig;
      cache.gates(t, H + j) = fg;
      cache.gates(t, 2 * H + j) = gg;
      cache.gates(t, 3 * H + j) = og;
      cache.tanh_cell(t, j) = tc;
    }
    cache.cell.row(t) = c.transpose();
    cache.hidden.row(t) = h.transpose();
  }
}

/// Backpropagation through time for one direction. Accumulates weight
/// gradients into `g` and input gradients into `dx`.
template <typename T>
void lstm_direction_backward(const LstmWeights<T> &w, const Matrix<T> &x, bool reverse,
                             const LstmDirectionCache<T> &cache, const Matrix<T> &dh_out,
                             LstmWeights<T> &g, Matrix<T> &dx) {
  const Eigen::Index n = x.rows();
  const Eigen::Index H = w.w_hh.cols();
  Matrix<T> dz(n, 4 * H);
  Matrix<T> h_prev = Matrix<T>::Zero(n, H);
  Vector<T> dh_next = Vector<T>::Zero(H), dc_next = Vector<T>::Zero(H);
  for (Eigen::Index k = n - 1; k >= 0; --k) {
    const Eigen::Index t = reverse ? n - 1 - k : k;
    const bool has_prev = k > 0;
    const Eigen::Index tp = reverse ? t + 1 : t - 1;
    for (Eigen::Index j = 0; j < H; ++j) {
      const T ig = cache.gates(t, j);
      const T fg = cache.gates(t, H + j);
      const T gg = cache.gates(t, 2 * H + j);
      const T og = cache.gates(t, 3 * H + j);
      const T tc = cache.tanh_cell(t, j);
      const T c_prev = has_prev ? cache.cell(tp, j) : T(0);
      const T dh = dh_out(t, j) + dh_next[j];
      const T dc = dc_next[j] + dh * og * (T(1) - tc * tc);
      dz(t, j) = dc * gg * ig * (T(1) - ig);
      dz(t, H + j) = dc * c_prev * fg * (T(1) - fg);
      dz(t, 2 * H + j) = dc * ig * (T(1) - gg * gg);
      dz(t, 3 * H + j) = dh * tc * og * (T(1) - og);
      dc_next[j] = dc * fg;
    }
    if (has_prev) h_prev.row(t) = cache.hidden.row(tp);
    dh_next.noalias() = w.w_hh.transpose() * dz.row(t).transpose();
  }
  g.w_ih.noalias() += dz.transpose() * x;
  g.w_hh.noalias() += dz.transpose() * h_prev;
  g.bias += dz.colwise().sum().transpose();
  dx.noalias() += dz * w.w_ih;
}

} // namespace detail

/// Runs the network on a batch. In Train mode batch norm uses statistics of
/// the batch's valid frames and dropout masks are drawn from `dropout_seed`;
/// in Eval mode running statistics are used and dropout is off.
template <typename T>
ForwardResult<T> forward(const ModelParams<T> &p, const Batch &batch, Mode mode,
                         std::uint64_t dropout_seed = 0, unsigned threads = 1) {
  const ModelConfig &cfg = p.cfg;
  const auto C = static_cast<Eigen::Index>(cfg.input_channels);
  if (batch.empty()) throw DataError("forward: empty batch");
  for (const auto *s : batch) {
    if (s->channels != cfg.input_channels)
      throw DataError("forward: batch has " + std::to_string(s->channels) + " channels, model expects " +
                      std::to_string(cfg.input_channels));
    if (s->valid_frames == 0 || s->valid_frames > s->length())
      throw DataError("forward: valid_frames out of range");
  }

  ForwardResult<T> out;
  out.mode = mode;
  out.items.resize(batch.size());
  out.predictions.resize(batch.size());

  auto rows = [](const FixedSequence &s) {
    using InMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    return InMap(s.data.data(), static_cast<Eigen::Index>(s.valid_frames),
                 static_cast<Eigen::Index>(s.channels)).template cast<T>();
  };

  Vector<T> mean, inv_std;
  if (mode == Mode::Train) {
    // Two-pass batch statistics over valid frames only.
    mean = Vector<T>::Zero(C);
    std::size_t n_total = 0;
    for (const auto *s : batch) {
      mean += rows(*s).colwise().sum().transpose();
      n_total += s->valid_frames;
    }
    mean /= static_cast<T>(n_total);
    Vector<T> var = Vector<T>::Zero(C);
    for (const auto *s : batch)
      var += (rows(*s).rowwise() - mean.transpose()).array().square().matrix().colwise().sum().transpose();
    var /= static_cast<T>(n_total);
    out.batch_mean = mean;
    out.batch_var = var;
    out.batch_frames = n_total;
    inv_std = (var.array() + static_cast<T>(cfg.bn_eps)).rsqrt().matrix();
  } else {
    mean = p.bn_running_mean;
    inv_std = (p.bn_running_var.array() + static_cast<T>(cfg.bn_eps)).rsqrt().matrix();
  }

  const bool use_dropout = mode == Mode::Train && cfg.dropout_p > 0.0;
  const auto H = static_cast<Eigen::Index>(cfg.lstm_hidden);

  detail::parallel_for(batch.size(), threads, [&](std::size_t b) {
    ItemCache<T> &ic = out.items[b];
    const FixedSequence &seq = *batch[b];
    const auto n = static_cast<Eigen::Index>(seq.valid_frames);
    ic.frames = seq.valid_frames;
    Rng rng(derive_seed(dropout_seed, b));

    ic.x_hat = ((rows(seq).rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array()).matrix();
    ic.bn_out = (ic.x_hat.array().rowwise() * p.bn_scale.transpose().array()).matrix();
    ic.bn_out.rowwise() += p.bn_shift.transpose();
    detail::check_finite(ic.bn_out, "batch norm");

    Matrix<T> h = ic.bn_out;
    if (cfg.use_bilstm) {
      ic.layer_in.resize(cfg.lstm_layers);
      ic.lstm.resize(cfg.lstm_layers);
      if (use_dropout) ic.layer_mask.resize(cfg.lstm_layers);
      for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
        ic.layer_in[l] = std::move(h);
        detail::lstm_direction_forward(p.lstm[2 * l], ic.layer_in[l], false, ic.lstm[l][0]);
        detail::lstm_direction_forward(p.lstm[2 * l + 1], ic.layer_in[l], true, ic.lstm[l][1]);
        h.resize(n, 2 * H);
        h.leftCols(H) = ic.lstm[l][0].hidden;
        h.rightCols(H) = ic.lstm[l][1].hidden;
        if (use_dropout) {
          ic.layer_mask[l] = detail::dropout_mask<T>(rng, n, 2 * H, cfg.dropout_p);
          h.array() *= ic.layer_mask[l].array();
        }
        detail::check_finite(h, "lstm");
      }
    }
    ic.pool_in = std::move(h);

    // Additive attention, softmax restricted to the valid frames.
    Matrix<T> u = ic.pool_in * p.att_w.transpose();
    u.rowwise() += p.att_b.transpose();
    ic.att_act = u.array().tanh().matrix();
    Vector<T> scores = ic.att_act * p.att_v;
    const T smax = scores.maxCoeff();
    ic.alpha = (scores.array() - smax).exp().matrix();
    ic.alpha /= ic.alpha.sum();
    ic.pooled = ic.pool_in.transpose() * ic.alpha;
    detail::check_finite(ic.pooled, "attention pooling");

    ic.ff_hidden = (p.ff_w1 * ic.pooled + p.ff_b1).array().tanh().matrix();
    Vector<T> hidden = ic.ff_hidden;
    if (use_dropout) {
      ic.ff_mask = detail::dropout_mask<T>(rng, hidden.size(), 1, cfg.dropout_p);
      hidden.array() *= ic.ff_mask.array();
    }
    ic.logit = (p.ff_w2 * hidden)(0) + p.ff_b2(0);
    ic.prediction = detail::sigmoid(ic.logit);
    if (!std::isfinite(static_cast<double>(ic.prediction)))
      throw NumericError("non-finite values after output layer");
    out.predictions[b] = ic.prediction;
  });
  return out;
}

namespace detail {

template <typename T>
void item_backward(const ModelParams<T> &p, const ItemCache<T> &ic, T dlogit, ModelParams<T> &g) {
  const ModelConfig &cfg = p.cfg;
  const auto H = static_cast<Eigen::Index>(cfg.lstm_hidden);

  Vector<T> hidden = ic.ff_hidden;
  if (ic.ff_mask.size()) hidden.array() *= ic.ff_mask.array();
  g.ff_w2.row(0) += dlogit * hidden.transpose();
  g.ff_b2(0) += dlogit;
  Vector<T> dh = dlogit * p.ff_w2.row(0).transpose();
  if (ic.ff_mask.size()) dh.array() *= ic.ff_mask.array();
  const Vector<T> dz1 = (dh.array() * (T(1) - ic.ff_hidden.array().square())).matrix();
  g.ff_w1.noalias() += dz1 * ic.pooled.transpose();
  g.ff_b1 += dz1;
  const Vector<T> dpooled = p.ff_w1.transpose() * dz1;

  // Softmax Jacobian: ds_t = alpha_t (dalpha_t - sum_k alpha_k dalpha_k).
  const Vector<T> dalpha = ic.pool_in * dpooled;
  const Vector<T> ds = (ic.alpha.array() * (dalpha.array() - ic.alpha.dot(dalpha))).matrix();
  g.att_v.noalias() += ic.att_act.transpose() * ds;
  const Matrix<T> du =
      ((ds * p.att_v.transpose()).array() * (T(1) - ic.att_act.array().square())).matrix();
  g.att_w.noalias() += du.transpose() * ic.pool_in;
  g.att_b += du.colwise().sum().transpose();
  Matrix<T> dseq = ic.alpha * dpooled.transpose();
  dseq.noalias() += du * p.att_w;

  if (cfg.use_bilstm) {
    for (std::size_t l = cfg.lstm_layers; l-- > 0;) {
      if (!ic.layer_mask.empty()) dseq.array() *= ic.layer_mask[l].array();
      const Matrix<T> &x = ic.layer_in[l];
      Matrix<T> dx = Matrix<T>::Zero(x.rows(), x.cols());
      const Matrix<T> d_fwd = dseq.leftCols(H);
      const Matrix<T> d_bwd = dseq.rightCols(H);
      lstm_direction_backward(p.lstm[2 * l], x, false, ic.lstm[l][0], d_fwd, g.lstm[2 * l], dx);
      lstm_direction_backward(p.lstm[2 * l + 1], x, true, ic.lstm[l][1], d_bwd, g.lstm[2 * l + 1], dx);
      dseq = std::move(dx);
    }
  }

  // The input carries no parameters, so only scale and shift need gradients
  // (batch statistics are functions of the data alone).
  g.bn_scale += (dseq.array() * ic.x_hat.array()).matrix().colwise().sum().transpose();
  g.bn_shift += dseq.colwise().sum().transpose();
}

} // namespace detail

/// Mean squared error against unit-interval targets and its exact gradient
/// with respect to every trainable tensor. Uses the masks and statistics
/// recorded by the matching forward call.
template <typename T>
BackwardResult<T> backward(const ModelParams<T> &p, const ForwardResult<T> &fwd,
                           std::span<const T> targets, unsigned threads = 1) {
  const std::size_t B = fwd.items.size();
  if (targets.size() != B)
    throw DataError("backward: " + std::to_string(targets.size()) + " targets for batch of " +
                    std::to_string(B));
  BackwardResult<T> out;
  out.grads = ModelParams<T>::zeros(p.cfg);
  out.grads.bn_running_var.setZero();

  T loss{};
  for (std::size_t b = 0; b < B; ++b) {
    const T r = fwd.predictions[b] - targets[b];
    loss += r * r;
  }
  out.loss = loss / static_cast<T>(B);

  // Per-item buffers summed in index order keep the reduction independent of
  // the thread count.
  std::vector<ModelParams<T>> item_grads(B);
  detail::parallel_for(B, threads, [&](std::size_t b) {
    item_grads[b] = ModelParams<T>::zeros(p.cfg);
    const T pred = fwd.predictions[b];
    const T dpred = T(2) * (pred - targets[b]) / static_cast<T>(B);
    detail::item_backward(p, fwd.items[b], dpred * pred * (T(1) - pred), item_grads[b]);
  });
  auto total = out.grads.trainable();
  for (std::size_t b = 0; b < B; ++b) {
    auto part = std::as_const(item_grads[b]).trainable();
    for (std::size_t k = 0; k < total.size(); ++k)
      for (std::size_t i = 0; i < total[k].values.size(); ++i) total[k].values[i] += part[k].values[i];
  }
  for (const auto &t : total)
    for (T v : t.values)
      if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite gradient in " + t.name);
  return out;
}

/// Folds Train-mode batch statistics into the running estimates (momentum
/// update, unbiased variance).
template <typename T>
void update_running_stats(ModelParams<T> &p, const ForwardResult<T> &fwd) {
  if (fwd.mode != Mode::Train || fwd.batch_frames == 0) return;
  const T m = static_cast<T>(p.cfg.bn_momentum);
  const T n = static_cast<T>(fwd.batch_frames);
  const T unbias = fwd.batch_frames > 1 ? n / (n - T(1)) : T(1);
  p.bn_running_mean = (T(1) - m) * p.bn_running_mean + m * fwd.batch_mean;
  p.bn_running_var = (T(1) - m) * p.bn_running_var + m * unbias * fwd.batch_var;
}

/// Eval-mode scores in (0, 1), one per sequence.
template <typename T>
std::vector<T> predict(const ModelParams<T> &p, const Batch &batch, unsigned threads = 1) {
  return forward(p, batch, Mode::Eval, 0, threads).predictions;
}

/// Maps a normalized score to the 1-5 MOS scale.
inline double to_mos(double normalized) { return 1.0 + 4.0 * normalized; }

/// Normalizes, fits to the model's sequence length and scores one clip on
/// the 1-5 scale.
template <typename T>
double predict_mos(const ModelParams<T> &p, const FeatureMatrix &features, const NormStats &stats) {
  const FixedSequence seq = fit_length(apply_norm(features, stats), p.cfg.seq_len);
  const Batch batch{&seq};
  return to_mos(static_cast<double>(predict(p, batch).front()));
}

} // namespace mosqa
