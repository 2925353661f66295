#pragma once

// Minimal transformer building blocks with hand-written backward passes.
//
// Parameters live in a ParameterStore addressed by integer ids; layers only hold
// ids. Gradients go to a separate buffer with the same ids, so any number of
// forward/backward passes can share one read-only store.
//
// Token matrices are row-major (tokens x features). Several sequences are stacked
// vertically; `offsets` (size S + 1) marks where each sequence starts.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dimae/errors.hpp"
#include "dimae/parallel.hpp"
#include "dimae/rng.hpp"

namespace dimae::nn {

using Index = Eigen::Index;
using ParamId = std::size_t;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
class ParameterStore {
 public:
  ParamId add(std::string name, Index rows, Index cols, bool decay) {
    require(!index_.contains(name), "duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), Matrix<T>::Zero(rows, cols), decay});
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }
  Matrix<T>& value(ParamId id) { return entries_[id].value; }
  const Matrix<T>& value(ParamId id) const { return entries_[id].value; }
  const std::string& name(ParamId id) const { return entries_[id].name; }
  bool decays(ParamId id) const { return entries_[id].decay; }

  std::optional<ParamId> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

 private:
  struct Entry {
    std::string name;
    Matrix<T> value;
    bool decay;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, ParamId> index_;
};

/// Gradient accumulator keyed like a ParameterStore. Entries are allocated on first
/// touch; untouched entries are exactly zero.
template <typename T>
class Gradients {
 public:
  explicit Gradients(const ParameterStore<T>& store) : store_(&store), grads_(store.size()) {}

  Matrix<T>& operator[](ParamId id) {
    auto& g = grads_[id];
    if (!g) g = Matrix<T>::Zero(store_->value(id).rows(), store_->value(id).cols());
    return *g;
  }
  const Matrix<T>* find(ParamId id) const { return grads_[id] ? &*grads_[id] : nullptr; }
  bool touched(ParamId id) const { return grads_[id].has_value(); }
  std::size_t size() const { return grads_.size(); }

  double squared_norm(ParamId id) const {
    return grads_[id] ? static_cast<double>(grads_[id]->squaredNorm()) : 0.0;
  }

  void scale(T factor) {
    for (auto& g : grads_) {
      if (g) *g *= factor;
    }
  }

 private:
  const ParameterStore<T>* store_;
  std::vector<std::optional<Matrix<T>>> grads_;
};

template <typename T>
struct Linear {
  ParamId weight = 0;  // out x in
  ParamId bias = 0;    // 1 x out
  Index in = 0;
  Index out = 0;

  static Linear create(ParameterStore<T>& store, const std::string& prefix, Index in, Index out, Rng& rng) {
    Linear layer;
    layer.in = in;
    layer.out = out;
    layer.weight = store.add(prefix + ".weight", out, in, true);
    layer.bias = store.add(prefix + ".bias", 1, out, false);
    auto& w = store.value(layer.weight);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.truncated_normal(0.02));
    return layer;
  }

  Matrix<T> forward(const ParameterStore<T>& p, const Matrix<T>& x) const {
    Matrix<T> y(x.rows(), out);
    y.noalias() = x * p.value(weight).transpose();
    y.rowwise() += p.value(bias).row(0);
    return y;
  }

  /// Accumulates weight/bias gradients; returns dL/dx unless `need_input_grad` is false.
  Matrix<T> backward(const ParameterStore<T>& p, const Matrix<T>& x, const Matrix<T>& dy, Gradients<T>& g,
                     bool need_input_grad = true) const {
    g[weight].noalias() += dy.transpose() * x;
    g[bias].row(0) += dy.colwise().sum();
    if (!need_input_grad) return {};
    Matrix<T> dx(x.rows(), in);
    dx.noalias() = dy * p.value(weight);
    return dx;
  }
};

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  Vector<T> rstd;
};

template <typename T>
struct LayerNorm {
  ParamId gamma = 0;
  ParamId beta = 0;
  Index dim = 0;
  static constexpr double kEps = 1e-6;

  static LayerNorm create(ParameterStore<T>& store, const std::string& prefix, Index dim) {
    LayerNorm ln;
    ln.dim = dim;
    ln.gamma = store.add(prefix + ".weight", 1, dim, false);
    ln.beta = store.add(prefix + ".bias", 1, dim, false);
    store.value(ln.gamma).setOnes();
    return ln;
  }

  Matrix<T> forward(const ParameterStore<T>& p, const Matrix<T>& x, LayerNormCache<T>& cache) const {
    const Index n = x.rows();
    cache.xhat.resize(n, dim);
    cache.rstd.resize(n);
    Matrix<T> y(n, dim);
    const auto& g = p.value(gamma);
    const auto& b = p.value(beta);
    for (Index r = 0; r < n; ++r) {
      const T mean = x.row(r).mean();
      const T var = (x.row(r).array() - mean).square().mean();
      const T rstd = T(1) / std::sqrt(var + static_cast<T>(kEps));
      cache.rstd(r) = rstd;
      cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
      y.row(r) = cache.xhat.row(r).cwiseProduct(g.row(0)) + b.row(0);
    }
    return y;
  }

  Matrix<T> backward(const ParameterStore<T>& p, const Matrix<T>& dy, const LayerNormCache<T>& cache,
                     Gradients<T>& grads) const {
    const Index n = dy.rows();
    grads[gamma].row(0) += (dy.cwiseProduct(cache.xhat)).colwise().sum();
    grads[beta].row(0) += dy.colwise().sum();
    const auto& g = p.value(gamma);
    Matrix<T> dx(n, dim);
    for (Index r = 0; r < n; ++r) {
      RowVector<T> dxhat = dy.row(r).cwiseProduct(g.row(0));
      const T mean_d = dxhat.mean();
      const T mean_dx = dxhat.cwiseProduct(cache.xhat.row(r)).mean();
      dx.row(r) = (dxhat.array() - mean_d - cache.xhat.row(r).array() * mean_dx) * cache.rstd(r);
    }
    return dx;
  }
};

template <typename T>
inline T gelu(T x) {
  return static_cast<T>(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2.0)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2.0)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
struct AttentionCache {
  Matrix<T> x;
  Matrix<T> qkv;
  std::vector<Matrix<T>> probs;  // [segment * heads + head]
  Matrix<T> context;
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> qkv;
  Linear<T> proj;
  Index width = 0;
  Index heads = 1;

  static MultiHeadAttention create(ParameterStore<T>& store, const std::string& prefix, Index width, Index heads,
                                   Rng& rng) {
    require(width % heads == 0, "attention width must be divisible by the head count");
    MultiHeadAttention a;
    a.width = width;
    a.heads = heads;
    a.qkv = Linear<T>::create(store, prefix + ".qkv", width, 3 * width, rng);
    a.proj = Linear<T>::create(store, prefix + ".proj", width, width, rng);
    return a;
  }

  Matrix<T> forward(const ParameterStore<T>& p, const Matrix<T>& x, std::span<const Index> offsets,
                    AttentionCache<T>& cache) const {
    const Index head_dim = width / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const std::size_t segments = offsets.size() - 1;
    cache.x = x;
    cache.qkv = qkv.forward(p, x);
    cache.context.resize(x.rows(), width);
    cache.probs.assign(segments * heads, Matrix<T>());
    parallel_for(segments, [&](std::size_t s) {
      const Index start = offsets[s];
      const Index len = offsets[s + 1] - start;
      for (Index h = 0; h < heads; ++h) {
        auto q = cache.qkv.block(start, h * head_dim, len, head_dim);
        auto k = cache.qkv.block(start, width + h * head_dim, len, head_dim);
        auto v = cache.qkv.block(start, 2 * width + h * head_dim, len, head_dim);
        Matrix<T> scores(len, len);
        scores.noalias() = (q * k.transpose()) * scale;
        for (Index r = 0; r < len; ++r) {
          const T m = scores.row(r).maxCoeff();
          scores.row(r) = (scores.row(r).array() - m).exp();
          scores.row(r) /= scores.row(r).sum();
        }
        cache.context.block(start, h * head_dim, len, head_dim).noalias() = scores * v;
        cache.probs[s * heads + h] = std::move(scores);
      }
    });
    return proj.forward(p, cache.context);
  }

  Matrix<T> backward(const ParameterStore<T>& p, const Matrix<T>& dy, std::span<const Index> offsets,
                     const AttentionCache<T>& cache, Gradients<T>& g) const {
    const Index head_dim = width / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const std::size_t segments = offsets.size() - 1;
    Matrix<T> d_context = proj.backward(p, cache.context, dy, g);
    Matrix<T> d_qkv = Matrix<T>::Zero(cache.qkv.rows(), cache.qkv.cols());
    parallel_for(segments, [&](std::size_t s) {
      const Index start = offsets[s];
      const Index len = offsets[s + 1] - start;
      for (Index h = 0; h < heads; ++h) {
        const Matrix<T>& probs = cache.probs[s * heads + h];
        auto q = cache.qkv.block(start, h * head_dim, len, head_dim);
        auto k = cache.qkv.block(start, width + h * head_dim, len, head_dim);
        auto v = cache.qkv.block(start, 2 * width + h * head_dim, len, head_dim);
        auto d_out = d_context.block(start, h * head_dim, len, head_dim);
        Matrix<T> d_probs(len, len);
        d_probs.noalias() = d_out * v.transpose();
        d_qkv.block(start, 2 * width + h * head_dim, len, head_dim).noalias() = probs.transpose() * d_out;
        Matrix<T> d_scores = probs.cwiseProduct(d_probs);
        Vector<T> row_dot = d_scores.rowwise().sum();
        d_scores -= probs.cwiseProduct(row_dot.replicate(1, len));
        d_scores *= scale;
        d_qkv.block(start, h * head_dim, len, head_dim).noalias() = d_scores * k;
        d_qkv.block(start, width + h * head_dim, len, head_dim).noalias() = d_scores.transpose() * q;
      }
    });
    return qkv.backward(p, cache.x, d_qkv, g);
  }
};

template <typename T>
struct BlockCache {
  LayerNormCache<T> ln1;
  AttentionCache<T> attn;
  LayerNormCache<T> ln2;
  Matrix<T> h2;
  Matrix<T> pre;
  Matrix<T> act;
};

/// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.)) with GELU.
template <typename T>
struct Block {
  LayerNorm<T> norm1;
  MultiHeadAttention<T> attn;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;

  static Block create(ParameterStore<T>& store, const std::string& prefix, Index width, Index heads,
                      Index mlp_hidden, Rng& rng) {
    Block b;
    b.norm1 = LayerNorm<T>::create(store, prefix + ".norm1", width);
    b.attn = MultiHeadAttention<T>::create(store, prefix + ".attn", width, heads, rng);
    b.norm2 = LayerNorm<T>::create(store, prefix + ".norm2", width);
    b.fc1 = Linear<T>::create(store, prefix + ".mlp.fc1", width, mlp_hidden, rng);
    b.fc2 = Linear<T>::create(store, prefix + ".mlp.fc2", mlp_hidden, width, rng);
    return b;
  }

  Matrix<T> forward(const ParameterStore<T>& p, const Matrix<T>& x, std::span<const Index> offsets,
                    BlockCache<T>& cache) const {
    Matrix<T> h1 = norm1.forward(p, x, cache.ln1);
    Matrix<T> mid = x + attn.forward(p, h1, offsets, cache.attn);
    cache.h2 = norm2.forward(p, mid, cache.ln2);
    cache.pre = fc1.forward(p, cache.h2);
    cache.act = cache.pre.unaryExpr([](T v) { return gelu(v); });
    mid += fc2.forward(p, cache.act);
    return mid;
  }

  Matrix<T> backward(const ParameterStore<T>& p, const Matrix<T>& dy, std::span<const Index> offsets,
                     const BlockCache<T>& cache, Gradients<T>& g) const {
    Matrix<T> d_act = fc2.backward(p, cache.act, dy, g);
    Matrix<T> d_pre = d_act.cwiseProduct(cache.pre.unaryExpr([](T v) { return gelu_grad(v); }));
    Matrix<T> d_h2 = fc1.backward(p, cache.h2, d_pre, g);
    Matrix<T> d_mid = dy + norm2.backward(p, d_h2, cache.ln2, g);
    Matrix<T> d_h1 = attn.backward(p, d_mid, offsets, cache.attn, g);
    return d_mid + norm1.backward(p, d_h1, cache.ln1, g);
  }
};

/// Fixed 2-D sine-cosine embedding for a grid_h x grid_w patch grid; width % 4 == 0.
template <typename T>
Matrix<T> sincos_position_embedding(Index width, int grid_h, int grid_w) {
  require(width % 4 == 0, "positional embedding width must be divisible by 4");
  const Index quarter = width / 4;
  Matrix<T> pos(static_cast<Index>(grid_h) * grid_w, width);
  for (int gy = 0; gy < grid_h; ++gy) {
    for (int gx = 0; gx < grid_w; ++gx) {
      const Index r = static_cast<Index>(gy) * grid_w + gx;
      for (Index i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        // First half encodes the column, second half the row.
        pos(r, i) = static_cast<T>(std::sin(gx * omega));
        pos(r, quarter + i) = static_cast<T>(std::cos(gx * omega));
        pos(r, 2 * quarter + i) = static_cast<T>(std::sin(gy * omega));
        pos(r, 3 * quarter + i) = static_cast<T>(std::cos(gy * omega));
      }
    }
  }
  return pos;
}

}  // namespace dimae::nn
