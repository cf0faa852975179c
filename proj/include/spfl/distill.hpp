#pragma once

#include <functional>
#include <string>
#include <vector>

#include "spfl/losses.hpp"
#include "spfl/net.hpp"

namespace spfl {

enum class Variant { SPFL, SPFL_oA, SPFL_NAD };

struct DistillConfig {
  double tau = 4.0;
  double beta_kd_final = 1.0;
  double beta_at_final = 1.0;
  int epochs = 1;        // E internal epochs
  double lr = 0.1;       // local step size
  int total_rounds = 1;  // T, denominator of the linear schedule
  Variant variant = Variant::SPFL;
};

template <typename T>
struct ClientModels {
  Params<T> teacher;
  Params<T> student;
};

// Produces the mini-batches of one internal epoch, already shuffled.
template <typename T>
using BatchMaker = std::function<std::vector<Batch<T>>(int epoch)>;

// Loss breakdown of the first mini-batch of a round, for tests and
// divergence diagnostics.
struct RoundDiag {
  bool valid = false;
  double ce_s = 0, kd_s = 0, at_s = 0, ce_t = 0, kd_t = 0;
};

// Linear growth: beta_final * t / T.
double beta_schedule(int t, int total_rounds, double beta_final);

template <typename T>
struct AttentionGrads {
  double loss = 0;  // summed over layers, batch-mean per layer
  std::map<int, Tensor<T>> activation_grads;
  Params<T> weight_route;  // gradient through the channel weights
  bool has_weight_route = false;
};

// Gradient of the attention loss for the learner. The activation route
// treats the channel weights as constants; the gradient-weighted variant
// adds the route through the weights themselves (they are score gradients,
// so this is a mixed second derivative, see score_grad_hvp).
template <typename T>
AttentionGrads<T> attention_loss_grads(const Engine<T>& engine,
                                       const Params<T>& learner,
                                       const Cache<T>& cache,
                                       const Tensor<T>& inputs,
                                       const std::vector<int>& classes,
                                       const std::vector<int>& layers,
                                       const std::vector<Tensor<T>>& ref_maps,
                                       T scale, bool gradcam,
                                       double hvp_eps_rel);

// Reference (teacher) attention maps at the given layers, as constants.
template <typename T>
std::vector<Tensor<T>> reference_attention_maps(const Engine<T>& engine,
                                                const Params<T>& reference,
                                                const Cache<T>& cache,
                                                const std::vector<int>& classes,
                                                const std::vector<int>& layers,
                                                bool gradcam);

// Plain cross-entropy SGD for `epochs` passes; the baseline local update
// and the phase structure LOCALKD reduces to when both betas are zero.
template <typename T>
Params<T> sgd_round(const Engine<T>& engine, const Params<T>& start,
                    const BatchMaker<T>& make_batches, int epochs, double lr);

// Two-phase self-distillation round. The student starts from the global
// model, the teacher carries over; per mini-batch the student steps on
// CE + beta_kd*KD + beta_at*AT, then the teacher steps on CE + beta_kd*KD
// computed against the already-updated student.
template <typename T>
ClientModels<T> localkd_round(const Engine<T>& engine, const Params<T>& global,
                              const Params<T>& teacher,
                              const BatchMaker<T>& make_batches,
                              const DistillConfig& cfg, int round,
                              RoundDiag* diag = nullptr);

// Ensemble logits (z_T + z_S) / 2.
template <typename T>
Mat<T> enspre_logits(const Engine<T>& engine, const Params<T>& teacher,
                     const Params<T>& student, const Tensor<T>& inputs);

// Argmax with ties resolved to the lowest class index.
template <typename T>
int argmax_lowest(const T* row, int k);

// Ensemble prediction for a batch of inputs.
template <typename T>
std::vector<int> enspre(const Engine<T>& engine, const Params<T>& teacher,
                        const Params<T>& student, const Tensor<T>& inputs);

extern template AttentionGrads<float> attention_loss_grads(
    const Engine<float>&, const Params<float>&, const Cache<float>&,
    const Tensor<float>&, const std::vector<int>&, const std::vector<int>&,
    const std::vector<Tensor<float>>&, float, bool, double);
extern template AttentionGrads<double> attention_loss_grads(
    const Engine<double>&, const Params<double>&, const Cache<double>&,
    const Tensor<double>&, const std::vector<int>&, const std::vector<int>&,
    const std::vector<Tensor<double>>&, double, bool, double);
extern template std::vector<Tensor<float>> reference_attention_maps(
    const Engine<float>&, const Params<float>&, const Cache<float>&,
    const std::vector<int>&, const std::vector<int>&, bool);
extern template std::vector<Tensor<double>> reference_attention_maps(
    const Engine<double>&, const Params<double>&, const Cache<double>&,
    const std::vector<int>&, const std::vector<int>&, bool);
extern template Params<float> sgd_round(const Engine<float>&, const Params<float>&,
                                        const BatchMaker<float>&, int, double);
extern template Params<double> sgd_round(const Engine<double>&, const Params<double>&,
                                         const BatchMaker<double>&, int, double);
extern template ClientModels<float> localkd_round(const Engine<float>&, const Params<float>&,
                                                  const Params<float>&, const BatchMaker<float>&,
                                                  const DistillConfig&, int, RoundDiag*);
extern template ClientModels<double> localkd_round(const Engine<double>&, const Params<double>&,
                                                   const Params<double>&, const BatchMaker<double>&,
                                                   const DistillConfig&, int, RoundDiag*);
extern template Mat<float> enspre_logits(const Engine<float>&, const Params<float>&,
                                         const Params<float>&, const Tensor<float>&);
extern template Mat<double> enspre_logits(const Engine<double>&, const Params<double>&,
                                          const Params<double>&, const Tensor<double>&);
extern template std::vector<int> enspre(const Engine<float>&, const Params<float>&,
                                        const Params<float>&, const Tensor<float>&);
extern template std::vector<int> enspre(const Engine<double>&, const Params<double>&,
                                        const Params<double>&, const Tensor<double>&);

}  // namespace spfl
