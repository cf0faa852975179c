#pragma once

#include <cmath>
#include <vector>

#include "spfl/net.hpp"

namespace spfl {

constexpr double kProbFloor = 1e-12;  // clamp before every log

template <typename T>
Mat<T> onehot_rows(const std::vector<int>& classes, int k) {
  Mat<T> m({static_cast<int>(classes.size()), k});
  for (size_t b = 0; b < classes.size(); ++b)
    m[b * static_cast<size_t>(k) + static_cast<size_t>(classes[b])] = T(1);
  return m;
}

// Mean cross-entropy over the batch: -sum_i y_i log p_i.
template <typename T>
T task_loss(const Mat<T>& probs, const Mat<T>& onehot) {
  const int n = probs.dim(0), k = probs.dim(1);
  T total = T(0);
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < k; ++j) {
      T y = onehot[static_cast<size_t>(b) * k + j];
      if (y != T(0)) {
        T p = probs[static_cast<size_t>(b) * k + j];
        total -= y * std::log(std::max(p, static_cast<T>(kProbFloor)));
      }
    }
  return total / static_cast<T>(n);
}

// Mean KL(reference || learner) over the batch. Asymmetric: the first
// argument is the distribution being matched.
template <typename T>
T kd_loss(const Mat<T>& reference, const Mat<T>& learner) {
  const int n = reference.dim(0), k = reference.dim(1);
  T total = T(0);
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < k; ++j) {
      T a = reference[static_cast<size_t>(b) * k + j];
      if (a <= T(0)) continue;
      T q = std::max(learner[static_cast<size_t>(b) * k + j],
                     static_cast<T>(kProbFloor));
      total += a * std::log(a / q);
    }
  return total / static_cast<T>(n);
}

// ---------------------------------------------------------------------------
// Attention maps

// Channel weights by global average pooling of d(score)/dA over space.
template <typename T>
Mat<T> gradcam_channel_weights(const Tensor<T>& act_grad) {
  const int n = act_grad.dim(0), c = act_grad.dim(1);
  const int hw = act_grad.dim(2) * act_grad.dim(3);
  Mat<T> alpha({n, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T* src = act_grad.ptr() + (static_cast<size_t>(b) * c + ch) * hw;
      T acc = T(0);
      for (int j = 0; j < hw; ++j) acc += src[j];
      alpha[static_cast<size_t>(b) * c + ch] = acc / static_cast<T>(hw);
    }
  return alpha;
}

// relu(sum_k alpha_k A_k) per sample -> (n, h, w). Entries are >= 0.
template <typename T>
Tensor<T> attention_map_from_weights(const Tensor<T>& acts,
                                     const Mat<T>& alpha) {
  const int n = acts.dim(0), c = acts.dim(1), h = acts.dim(2), w = acts.dim(3);
  const int hw = h * w;
  Tensor<T> map({n, h, w});
  for (int b = 0; b < n; ++b) {
    T* dst = map.ptr() + static_cast<size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      T a = alpha[static_cast<size_t>(b) * c + ch];
      if (a == T(0)) continue;
      const T* src = acts.ptr() + (static_cast<size_t>(b) * c + ch) * hw;
      for (int j = 0; j < hw; ++j) dst[j] += a * src[j];
    }
    for (int j = 0; j < hw; ++j) dst[j] = dst[j] > T(0) ? dst[j] : T(0);
  }
  return map;
}

// sum_k |A_k| per sample -> (n, h, w).
template <typename T>
Tensor<T> nad_attention(const Tensor<T>& acts) {
  const int n = acts.dim(0), c = acts.dim(1), h = acts.dim(2), w = acts.dim(3);
  const int hw = h * w;
  Tensor<T> map({n, h, w});
  for (int b = 0; b < n; ++b) {
    T* dst = map.ptr() + static_cast<size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const T* src = acts.ptr() + (static_cast<size_t>(b) * c + ch) * hw;
      for (int j = 0; j < hw; ++j) dst[j] += std::abs(src[j]);
    }
  }
  return map;
}

// d(score_c)/dA^l for the per-sample classes, at every requested layer.
// One backward pass, no parameter gradients.
template <typename T>
std::map<int, Tensor<T>> score_activation_grads(const Engine<T>& engine,
                                                const Params<T>& params,
                                                const Cache<T>& cache,
                                                const std::vector<int>& classes,
                                                const std::vector<int>& layers) {
  Mat<T> d = onehot_rows<T>(classes, engine.spec().num_classes);
  BackwardOptions<T> opts;
  opts.param_grads = false;
  opts.capture_layers = &layers;
  return engine.backward(params, cache, d, opts).captured;
}

// Full class-discriminative attention map at one layer: forward, score
// backward for the chosen class, gradient-weighted channel sum, ReLU.
template <typename T>
Tensor<T> attention_map(const Engine<T>& engine, const Params<T>& params,
                        const Tensor<T>& inputs, const std::vector<int>& classes,
                        int layer) {
  if (!engine.layer_is_spatial(layer))
    throw ConfigError("attention layer " + std::to_string(layer) +
                      " has no spatial activation map");
  Cache<T> cache;
  engine.forward(params, inputs, &cache);
  auto grads = score_activation_grads(engine, params, cache, classes, {layer});
  Mat<T> alpha = gradcam_channel_weights(grads.at(layer));
  return attention_map_from_weights(cache.layers[static_cast<size_t>(layer)].out,
                                    alpha);
}

// ---------------------------------------------------------------------------
// Attention loss

// Frobenius distance per sample, averaged over the batch, for one layer.
template <typename T>
T attention_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ConfigError("attention maps have mismatched shapes");
  const int n = a.dim(0);
  const size_t per = a.size() / static_cast<size_t>(n);
  T total = T(0);
  for (int s = 0; s < n; ++s) {
    T acc = T(0);
    const T* pa = a.ptr() + static_cast<size_t>(s) * per;
    const T* pb = b.ptr() + static_cast<size_t>(s) * per;
    for (size_t j = 0; j < per; ++j) {
      T d = pa[j] - pb[j];
      acc += d * d;
    }
    total += std::sqrt(acc);
  }
  return total / static_cast<T>(n);
}

// Sum over aligned layers of the batch-mean map distance.
template <typename T>
T attention_loss(const std::vector<Tensor<T>>& teacher_maps,
                 const std::vector<Tensor<T>>& student_maps) {
  if (teacher_maps.size() != student_maps.size())
    throw ConfigError("attention loss: layer sets differ");
  T total = T(0);
  for (size_t l = 0; l < teacher_maps.size(); ++l)
    total += attention_distance(teacher_maps[l], student_maps[l]);
  return total;
}

// d(attention_distance)/d(student map), scaled by `scale`.
template <typename T>
Tensor<T> attention_distance_map_grad(const Tensor<T>& teacher_map,
                                      const Tensor<T>& student_map, T scale) {
  const int n = student_map.dim(0);
  const size_t per = student_map.size() / static_cast<size_t>(n);
  Tensor<T> dmap(student_map.shape);
  for (int s = 0; s < n; ++s) {
    const T* pt = teacher_map.ptr() + static_cast<size_t>(s) * per;
    const T* ps = student_map.ptr() + static_cast<size_t>(s) * per;
    T* pd = dmap.ptr() + static_cast<size_t>(s) * per;
    T nrm = T(0);
    for (size_t j = 0; j < per; ++j) {
      T d = ps[j] - pt[j];
      nrm += d * d;
    }
    nrm = std::sqrt(nrm);
    if (nrm <= T(0)) continue;
    T f = scale / (static_cast<T>(n) * nrm);
    for (size_t j = 0; j < per; ++j) pd[j] = f * (ps[j] - pt[j]);
  }
  return dmap;
}

// Push a map gradient back to the layer activations. Channel weights are
// treated as constants here: the weighted-sum path carries the gradient,
// the weights themselves do not.
template <typename T>
Tensor<T> attention_acts_grad(const Tensor<T>& dmap, const Tensor<T>& acts,
                              const Mat<T>& alpha, const Tensor<T>& map) {
  const int n = acts.dim(0), c = acts.dim(1);
  const int hw = acts.dim(2) * acts.dim(3);
  Tensor<T> dacts(acts.shape);
  for (int b = 0; b < n; ++b) {
    const T* pm = map.ptr() + static_cast<size_t>(b) * hw;
    const T* pd = dmap.ptr() + static_cast<size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      T a = alpha[static_cast<size_t>(b) * c + ch];
      if (a == T(0)) continue;
      T* dst = dacts.ptr() + (static_cast<size_t>(b) * c + ch) * hw;
      for (int j = 0; j < hw; ++j)
        if (pm[j] > T(0)) dst[j] = a * pd[j];
    }
  }
  return dacts;
}

// d(attention loss)/d(channel weights): the map is relu(sum_k alpha_k A_k),
// so each alpha_k collects the masked correlation of the map gradient with
// its channel's activations.
template <typename T>
Mat<T> attention_alpha_grad(const Tensor<T>& dmap, const Tensor<T>& acts,
                            const Tensor<T>& map) {
  const int n = acts.dim(0), c = acts.dim(1);
  const int hw = acts.dim(2) * acts.dim(3);
  Mat<T> dalpha({n, c});
  for (int b = 0; b < n; ++b) {
    const T* pm = map.ptr() + static_cast<size_t>(b) * hw;
    const T* pd = dmap.ptr() + static_cast<size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const T* pa = acts.ptr() + (static_cast<size_t>(b) * c + ch) * hw;
      T acc = T(0);
      for (int j = 0; j < hw; ++j)
        if (pm[j] > T(0)) acc += pd[j] * pa[j];
      dalpha[static_cast<size_t>(b) * c + ch] = acc;
    }
  }
  return dalpha;
}

// Adjoint of global average pooling: spread dalpha back over space.
template <typename T>
Tensor<T> gap_adjoint(const Mat<T>& dalpha, int h, int w) {
  const int n = dalpha.dim(0), c = dalpha.dim(1);
  const T inv = T(1) / static_cast<T>(h * w);
  Tensor<T> u({n, c, h, w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      T v = dalpha[static_cast<size_t>(b) * c + ch] * inv;
      T* dst = u.ptr() + (static_cast<size_t>(b) * c + ch) *
                             static_cast<size_t>(h) * w;
      for (int j = 0; j < h * w; ++j) dst[j] = v;
    }
  return u;
}

// The channel weights alpha = GAP(dS/dA^l) are themselves functions of the
// parameters. Their contribution to a loss gradient is the mixed second
// derivative d/dw <u, dS/dA^l>, taken here by central differences of the
// class-score gradient under an epsilon-shift of the layer output. The
// networks are piecewise linear in their activations, so this derivative
// vanishes for parameters at or below the injection layer; those entries
// are zeroed (the difference there only measures spurious mask flips).
template <typename T>
Params<T> score_grad_hvp(const Engine<T>& engine, const Params<T>& params,
                         const Tensor<T>& inputs,
                         const std::vector<int>& classes, int layer,
                         const Tensor<T>& direction, double eps) {
  Mat<T> donehot = onehot_rows<T>(classes, engine.spec().num_classes);
  auto run = [&](double sign) {
    Tensor<T> shifted = direction;
    const T f = static_cast<T>(sign * eps);
    for (auto& v : shifted.data) v *= f;
    std::map<int, Tensor<T>> inject;
    inject.emplace(layer, std::move(shifted));
    Cache<T> cache;
    engine.forward(params, inputs, &cache, &inject);
    return engine.backward(params, cache, donehot).grads;
  };
  Params<T> plus = run(1.0);
  Params<T> minus = run(-1.0);
  const T inv = static_cast<T>(1.0 / (2.0 * eps));
  const size_t above = engine.param_offset_above(layer);
  for (size_t i = 0; i < above; ++i) plus.values[i] = T(0);
  for (size_t i = above; i < plus.values.size(); ++i)
    plus.values[i] = (plus.values[i] - minus.values[i]) * inv;
  return plus;
}

template <typename T>
T rms(const Tensor<T>& t) {
  if (t.empty()) return T(0);
  double acc = 0.0;
  for (T v : t.data) acc += static_cast<double>(v) * v;
  return static_cast<T>(std::sqrt(acc / static_cast<double>(t.size())));
}

// NAD variant: d(sum_k |A_k|)/dA_k = sign(A_k).
template <typename T>
Tensor<T> nad_acts_grad(const Tensor<T>& dmap, const Tensor<T>& acts) {
  const int n = acts.dim(0), c = acts.dim(1);
  const int hw = acts.dim(2) * acts.dim(3);
  Tensor<T> dacts(acts.shape);
  for (int b = 0; b < n; ++b) {
    const T* pd = dmap.ptr() + static_cast<size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const T* src = acts.ptr() + (static_cast<size_t>(b) * c + ch) * hw;
      T* dst = dacts.ptr() + (static_cast<size_t>(b) * c + ch) * hw;
      for (int j = 0; j < hw; ++j) {
        if (src[j] > T(0))
          dst[j] = pd[j];
        else if (src[j] < T(0))
          dst[j] = -pd[j];
      }
    }
  }
  return dacts;
}

}  // namespace spfl
