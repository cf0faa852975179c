#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "spfl/errors.hpp"
#include "spfl/rng.hpp"
#include "spfl/tensor.hpp"

namespace spfl {

// ---------------------------------------------------------------------------
// Layer descriptors

struct ConvLayer {
  int out_ch = 0;
  int ksize = 3;
  int stride = 1;
  int pad = 0;
};
struct ReluLayer {};
struct MaxPoolLayer {
  int ksize = 2;
  int stride = 2;
};
struct DenseLayer {
  int out_features = 0;
};
struct GlobalPoolLayer {};
// Two 3x3 convs with an identity (or strided 1x1 projection) skip path,
// ReLU after the sum. No batch norm, so samples stay independent.
struct ResidualLayer {
  int out_ch = 0;
  int stride = 1;
};

using LayerDesc = std::variant<ConvLayer, ReluLayer, MaxPoolLayer, DenseLayer,
                               GlobalPoolLayer, ResidualLayer>;

// Shape of a layer boundary: spatial (c,h,w) or flat (d).
struct Extent {
  bool spatial = true;
  int c = 0, h = 0, w = 0;
  int d = 0;  // valid when !spatial
  size_t count() const {
    return spatial ? static_cast<size_t>(c) * h * w : static_cast<size_t>(d);
  }
};

struct NetworkSpec {
  int in_channels = 1;
  int in_height = 28;
  int in_width = 28;
  int num_classes = 10;
  std::vector<LayerDesc> layers;
  std::vector<int> attention_layers;

  // Line-based text form, round-trippable. See parse() for the grammar.
  std::string to_text() const;
  static NetworkSpec parse(const std::string& text);

  // Built-in architectures.
  static NetworkSpec mnist_cnn();     // 2 conv + 2 dense, ~0.2M params
  static NetworkSpec cifar_resnet(); // 3 stages of 2 basic blocks
};

// ---------------------------------------------------------------------------
// Parameters

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  size_t offset = 0;
  size_t extent = 0;
};

struct Manifest {
  std::vector<TensorInfo> tensors;
  size_t total = 0;
  const TensorInfo* find(const std::string& name) const;
};

// Flat view of all model parameters plus the manifest describing the layout.
template <typename T>
struct Params {
  std::shared_ptr<const Manifest> manifest;
  std::vector<T> values;

  size_t size() const { return values.size(); }
  T* at(const TensorInfo& info) { return values.data() + info.offset; }
  const T* at(const TensorInfo& info) const { return values.data() + info.offset; }
};

// flatten/unflatten round-trip is the identity.
template <typename T>
std::vector<Tensor<T>> unflatten(const Params<T>& p);
template <typename T>
Params<T> flatten(std::shared_ptr<const Manifest> manifest,
                  const std::vector<Tensor<T>>& tensors);

// ---------------------------------------------------------------------------
// Forward/backward

// Per-layer retained state. Only the fields a layer kind needs are filled.
template <typename T>
struct LayerState {
  Tensor<T> out;                  // layer output (the A^l of attention maps)
  std::vector<int32_t> argmax;    // max-pool winners
  Tensor<T> col;                  // conv im2col, (n, ckk*ohow)
  // residual internals
  Tensor<T> act1, col1, col2, colp;
};

template <typename T>
struct Cache {
  bool retained = false;
  Tensor<T> input;
  std::vector<LayerState<T>> layers;
};

template <typename T>
struct BackwardOptions {
  bool param_grads = true;
  // Gradient added at a layer's output before backpropagating through it.
  const std::map<int, Tensor<T>>* extra_output_grads = nullptr;
  // Layers whose incoming output-gradient should be recorded.
  const std::vector<int>* capture_layers = nullptr;
};

template <typename T>
struct BackwardResult {
  Params<T> grads;                    // empty when param_grads == false
  std::map<int, Tensor<T>> captured;  // layer -> d(score)/d(A^l)
};

// Validated network bound to a spec: shape chain, manifest, forward/backward.
// An Engine is immutable and may be shared across threads; each call owns its
// Params and Cache.
template <typename T>
class Engine {
 public:
  explicit Engine(NetworkSpec spec);

  const NetworkSpec& spec() const { return spec_; }
  std::shared_ptr<const Manifest> manifest() const { return manifest_; }
  size_t param_count() const { return manifest_->total; }
  int num_layers() const { return static_cast<int>(spec_.layers.size()); }
  const Extent& output_extent(int layer) const { return extents_[static_cast<size_t>(layer) + 1]; }
  bool layer_is_spatial(int layer) const { return output_extent(layer).spatial; }
  // Default layer for attention losses: spec list, or last spatial layer.
  std::vector<int> attention_layers() const;

  Params<T> zero_params() const;
  Params<T> init_params(Rng& rng) const;

  // Offset of the first parameter belonging to layers strictly above `layer`
  // in the flat vector (manifest order follows layer order).
  size_t param_offset_above(int layer) const;

  // inputs (n,c,h,w) -> logits (n,k); fills cache when given.
  // inject_outputs adds a tensor to a layer's output before the next layer
  // consumes it (used for mixed second derivatives of score gradients).
  Mat<T> forward(const Params<T>& params, const Tensor<T>& inputs,
                 Cache<T>* cache,
                 const std::map<int, Tensor<T>>* inject_outputs = nullptr) const;

  // dlogits (n,k) -> parameter gradient with the same manifest.
  // Requires a retained cache from forward on the same params/inputs.
  BackwardResult<T> backward(const Params<T>& params, const Cache<T>& cache,
                             const Mat<T>& dlogits,
                             const BackwardOptions<T>& opts = {}) const;

 private:
  void validate_and_build();

  NetworkSpec spec_;
  std::vector<Extent> extents_;  // layer boundaries, size = layers+1
  std::shared_ptr<const Manifest> manifest_;
  std::vector<size_t> first_tensor_;  // manifest index of each layer's first tensor
};

extern template class Engine<float>;
extern template class Engine<double>;

// ---------------------------------------------------------------------------
// Probabilities

// Row-wise softmax; softened(z, tau) = softmax(z / tau), tau > 0.
template <typename T>
Mat<T> softmax(const Mat<T>& logits);
template <typename T>
Mat<T> softened(const Mat<T>& logits, double tau);

// A labelled mini-batch: inputs (n,c,h,w), labels one-hot (n,k).
template <typename T>
struct Batch {
  Tensor<T> inputs;
  Mat<T> labels;
  int size() const { return inputs.empty() ? 0 : inputs.dim(0); }
};

}  // namespace spfl
