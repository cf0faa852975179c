#include "spfl/distill.hpp"

#include <cmath>
#include <stdexcept>

namespace spfl {

double beta_schedule(int t, int total_rounds, double beta_final) {
  if (total_rounds < 1)
    throw std::invalid_argument("beta_schedule: total rounds must be >= 1");
  if (t < 0 || t > total_rounds)
    throw std::invalid_argument("beta_schedule: t outside [0, T]");
  return beta_final * static_cast<double>(t) / static_cast<double>(total_rounds);
}

namespace {

// relative epsilon of the central-difference step in the channel-weight
// gradient route
constexpr double kHvpEpsRel = 1e-2;

template <typename T>
std::vector<int> label_classes(const Mat<T>& onehot) {
  const int n = onehot.dim(0), k = onehot.dim(1);
  std::vector<int> cls(static_cast<size_t>(n), 0);
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < k; ++j)
      if (onehot[static_cast<size_t>(b) * k + j] > T(0)) {
        cls[static_cast<size_t>(b)] = j;
        break;
      }
  return cls;
}

template <typename T>
void axpy(std::vector<T>& y, T a, const std::vector<T>& x) {
  for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

template <typename T>
void check_finite(double v, int round, const char* which) {
  if (!std::isfinite(v))
    throw DivergenceError(std::string("non-finite ") + which +
                          " loss at round " + std::to_string(round));
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> reference_attention_maps(const Engine<T>& engine,
                                                const Params<T>& reference,
                                                const Cache<T>& cache,
                                                const std::vector<int>& classes,
                                                const std::vector<int>& layers,
                                                bool gradcam) {
  std::vector<Tensor<T>> maps;
  std::map<int, Tensor<T>> grads;
  if (gradcam)
    grads = score_activation_grads(engine, reference, cache, classes, layers);
  for (int l : layers) {
    const Tensor<T>& acts = cache.layers[static_cast<size_t>(l)].out;
    if (gradcam)
      maps.push_back(attention_map_from_weights(
          acts, gradcam_channel_weights(grads.at(l))));
    else
      maps.push_back(nad_attention(acts));
  }
  return maps;
}

template <typename T>
AttentionGrads<T> attention_loss_grads(const Engine<T>& engine,
                                       const Params<T>& learner,
                                       const Cache<T>& cache,
                                       const Tensor<T>& inputs,
                                       const std::vector<int>& classes,
                                       const std::vector<int>& layers,
                                       const std::vector<Tensor<T>>& ref_maps,
                                       T scale, bool gradcam,
                                       double hvp_eps_rel) {
  AttentionGrads<T> out;
  std::map<int, Tensor<T>> grads;
  if (gradcam)
    grads = score_activation_grads(engine, learner, cache, classes, layers);

  for (size_t i = 0; i < layers.size(); ++i) {
    const int l = layers[i];
    const Tensor<T>& acts = cache.layers[static_cast<size_t>(l)].out;
    if (gradcam) {
      Mat<T> alpha = gradcam_channel_weights(grads.at(l));
      Tensor<T> map = attention_map_from_weights(acts, alpha);
      out.loss += attention_distance(ref_maps[i], map);
      Tensor<T> dmap = attention_distance_map_grad(ref_maps[i], map, scale);
      out.activation_grads.emplace(l,
                                   attention_acts_grad(dmap, acts, alpha, map));
      Mat<T> dalpha = attention_alpha_grad(dmap, acts, map);
      Tensor<T> u = gap_adjoint(dalpha, acts.dim(2), acts.dim(3));
      T u_rms = rms(u);
      if (u_rms <= T(0)) continue;
      double eps = hvp_eps_rel *
                   std::max(static_cast<double>(rms(acts)), 1e-12) /
                   static_cast<double>(u_rms);
      Params<T> route =
          score_grad_hvp(engine, learner, inputs, classes, l, u, eps);
      if (!out.has_weight_route) {
        out.weight_route = std::move(route);
        out.has_weight_route = true;
      } else {
        for (size_t j = 0; j < route.values.size(); ++j)
          out.weight_route.values[j] += route.values[j];
      }
    } else {
      Tensor<T> map = nad_attention(acts);
      out.loss += attention_distance(ref_maps[i], map);
      Tensor<T> dmap = attention_distance_map_grad(ref_maps[i], map, scale);
      out.activation_grads.emplace(l, nad_acts_grad(dmap, acts));
    }
  }
  return out;
}

template AttentionGrads<float> attention_loss_grads(
    const Engine<float>&, const Params<float>&, const Cache<float>&,
    const Tensor<float>&, const std::vector<int>&, const std::vector<int>&,
    const std::vector<Tensor<float>>&, float, bool, double);
template AttentionGrads<double> attention_loss_grads(
    const Engine<double>&, const Params<double>&, const Cache<double>&,
    const Tensor<double>&, const std::vector<int>&, const std::vector<int>&,
    const std::vector<Tensor<double>>&, double, bool, double);
template std::vector<Tensor<float>> reference_attention_maps(
    const Engine<float>&, const Params<float>&, const Cache<float>&,
    const std::vector<int>&, const std::vector<int>&, bool);
template std::vector<Tensor<double>> reference_attention_maps(
    const Engine<double>&, const Params<double>&, const Cache<double>&,
    const std::vector<int>&, const std::vector<int>&, bool);

template <typename T>
Params<T> sgd_round(const Engine<T>& engine, const Params<T>& start,
                    const BatchMaker<T>& make_batches, int epochs, double lr) {
  Params<T> w = start;
  const T step = static_cast<T>(lr);
  for (int e = 0; e < epochs; ++e) {
    for (const Batch<T>& batch : make_batches(e)) {
      const int n = batch.size();
      Cache<T> cache;
      Mat<T> z = engine.forward(w, batch.inputs, &cache);
      Mat<T> p = softmax(z);
      Mat<T> d({n, z.dim(1)});
      for (size_t j = 0; j < d.size(); ++j)
        d[j] = (p[j] - batch.labels[j]) / static_cast<T>(n);
      auto back = engine.backward(w, cache, d);
      axpy(w.values, -step, back.grads.values);
    }
  }
  return w;
}

template <typename T>
ClientModels<T> localkd_round(const Engine<T>& engine, const Params<T>& global,
                              const Params<T>& teacher,
                              const BatchMaker<T>& make_batches,
                              const DistillConfig& cfg, int round,
                              RoundDiag* diag) {
  Params<T> student = global;
  Params<T> teacher_w = teacher;
  const T step = static_cast<T>(cfg.lr);
  const int k = engine.spec().num_classes;

  const double beta_kd = beta_schedule(round, cfg.total_rounds, cfg.beta_kd_final);
  const double beta_at = cfg.variant == Variant::SPFL_oA
                             ? 0.0
                             : beta_schedule(round, cfg.total_rounds,
                                             cfg.beta_at_final);
  const bool use_kd = beta_kd > 0.0;
  const bool use_at = beta_at > 0.0;
  const std::vector<int> att_layers = engine.attention_layers();
  if (use_at && att_layers.empty())
    throw ConfigError("attention loss requested but no spatial layer exists");

  bool first = true;
  for (int e = 0; e < cfg.epochs; ++e) {
    for (const Batch<T>& batch : make_batches(e)) {
      const int n = batch.size();
      const T invn = T(1) / static_cast<T>(n);

      // phase (i): student step on L_CE,S + beta_kd L_KD,S + beta_at L_AT,S
      Cache<T> cache_s, cache_t;
      Mat<T> z_s = engine.forward(student, batch.inputs, &cache_s);
      Mat<T> p_s = softmax(z_s);
      double ce_s = task_loss(p_s, batch.labels);
      Mat<T> d({n, k});
      for (size_t j = 0; j < d.size(); ++j)
        d[j] = (p_s[j] - batch.labels[j]) * invn;

      Mat<T> z_t;
      double kd_s = 0.0;
      bool teacher_forwarded = false;
      if (use_kd || use_at) {
        z_t = engine.forward(teacher_w, batch.inputs, &cache_t);
        teacher_forwarded = true;
      }
      if (use_kd) {
        Mat<T> q_s = softened(z_s, cfg.tau);
        Mat<T> q_t = softened(z_t, cfg.tau);
        kd_s = kd_loss(q_t, q_s);
        const T f = static_cast<T>(beta_kd / cfg.tau) * invn;
        for (size_t j = 0; j < d.size(); ++j) d[j] += f * (q_s[j] - q_t[j]);
      }

      double at_s = 0.0;
      AttentionGrads<T> at;
      if (use_at) {
        const bool gradcam = cfg.variant == Variant::SPFL;
        std::vector<int> cls = label_classes(batch.labels);
        std::vector<Tensor<T>> ref_maps = reference_attention_maps(
            engine, teacher_w, cache_t, cls, att_layers, gradcam);
        at = attention_loss_grads(engine, student, cache_s, batch.inputs, cls,
                                  att_layers, ref_maps,
                                  static_cast<T>(beta_at), gradcam,
                                  kHvpEpsRel);
        at_s = at.loss;
      }

      double loss_s = ce_s + beta_kd * kd_s + beta_at * at_s;
      check_finite<T>(loss_s, round, "student");

      BackwardOptions<T> opts;
      opts.extra_output_grads =
          at.activation_grads.empty() ? nullptr : &at.activation_grads;
      auto back_s = engine.backward(student, cache_s, d, opts);
      if (at.has_weight_route)
        axpy(back_s.grads.values, T(1), at.weight_route.values);
      axpy(student.values, -step, back_s.grads.values);

      // phase (ii): teacher step on L_CE,T + beta_kd L_KD,T against the
      // already-updated student.
      if (!teacher_forwarded) {
        z_t = engine.forward(teacher_w, batch.inputs, &cache_t);
      }
      Mat<T> p_t = softmax(z_t);
      double ce_t = task_loss(p_t, batch.labels);
      Mat<T> dt({n, k});
      for (size_t j = 0; j < dt.size(); ++j)
        dt[j] = (p_t[j] - batch.labels[j]) * invn;
      double kd_t = 0.0;
      if (use_kd) {
        Mat<T> z_s2 = engine.forward(student, batch.inputs, nullptr);
        Mat<T> q_s2 = softened(z_s2, cfg.tau);
        Mat<T> q_t = softened(z_t, cfg.tau);
        kd_t = kd_loss(q_s2, q_t);
        const T f = static_cast<T>(beta_kd / cfg.tau) * invn;
        for (size_t j = 0; j < dt.size(); ++j) dt[j] += f * (q_t[j] - q_s2[j]);
      }
      double loss_t = ce_t + beta_kd * kd_t;
      check_finite<T>(loss_t, round, "teacher");

      auto back_t = engine.backward(teacher_w, cache_t, dt);
      axpy(teacher_w.values, -step, back_t.grads.values);

      if (first && diag != nullptr) {
        diag->valid = true;
        diag->ce_s = ce_s;
        diag->kd_s = kd_s;
        diag->at_s = at_s;
        diag->ce_t = ce_t;
        diag->kd_t = kd_t;
      }
      first = false;
    }
  }
  return ClientModels<T>{std::move(teacher_w), std::move(student)};
}

template <typename T>
Mat<T> enspre_logits(const Engine<T>& engine, const Params<T>& teacher,
                     const Params<T>& student, const Tensor<T>& inputs) {
  Mat<T> z_t = engine.forward(teacher, inputs, nullptr);
  Mat<T> z_s = engine.forward(student, inputs, nullptr);
  for (size_t j = 0; j < z_t.size(); ++j)
    z_t[j] = (z_t[j] + z_s[j]) / T(2);
  return z_t;
}

template <typename T>
int argmax_lowest(const T* row, int k) {
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

template <typename T>
std::vector<int> enspre(const Engine<T>& engine, const Params<T>& teacher,
                        const Params<T>& student, const Tensor<T>& inputs) {
  Mat<T> z = enspre_logits(engine, teacher, student, inputs);
  const int n = z.dim(0), k = z.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (int b = 0; b < n; ++b)
    out[static_cast<size_t>(b)] =
        argmax_lowest(z.ptr() + static_cast<size_t>(b) * k, k);
  return out;
}

template Params<float> sgd_round(const Engine<float>&, const Params<float>&,
                                 const BatchMaker<float>&, int, double);
template Params<double> sgd_round(const Engine<double>&, const Params<double>&,
                                  const BatchMaker<double>&, int, double);
template ClientModels<float> localkd_round(const Engine<float>&, const Params<float>&,
                                           const Params<float>&, const BatchMaker<float>&,
                                           const DistillConfig&, int, RoundDiag*);
template ClientModels<double> localkd_round(const Engine<double>&, const Params<double>&,
                                            const Params<double>&, const BatchMaker<double>&,
                                            const DistillConfig&, int, RoundDiag*);
template Mat<float> enspre_logits(const Engine<float>&, const Params<float>&,
                                  const Params<float>&, const Tensor<float>&);
template Mat<double> enspre_logits(const Engine<double>&, const Params<double>&,
                                   const Params<double>&, const Tensor<double>&);
template int argmax_lowest(const float*, int);
template int argmax_lowest(const double*, int);
template std::vector<int> enspre(const Engine<float>&, const Params<float>&,
                                 const Params<float>&, const Tensor<float>&);
template std::vector<int> enspre(const Engine<double>&, const Params<double>&,
                                 const Params<double>&, const Tensor<double>&);

}  // namespace spfl
