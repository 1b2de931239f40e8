#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cascade/rng.hpp"
#include "cascade/views.hpp"

namespace cascade {

template <typename T>
struct TensorT {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  /// Contents are unspecified after a resize; whoever writes the tensor is
  /// expected to fill it completely (call zero() first when accumulating).
  void resize(int n_, int c_, int h_, int w_) {
    n = n_;
    c = c_;
    h = h_;
    w = w_;
    data.resize(numel());
  }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }
  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  T* example(int i) { return data.data() + static_cast<std::size_t>(i) * c * h * w; }
  const T* example(int i) const { return data.data() + static_cast<std::size_t>(i) * c * h * w; }
};
using Tensor = TensorT<float>;

enum class LayerKind { kConv, kRelu, kMaxPool, kLocal, kDense, kSoftmax };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  int channels = 0;          // conv / locally-connected output maps
  int kernel = 0;            // conv / locally-connected / pool window
  int stride = 1;            // pool
  int units = 0;             // dense
  bool dropconnect = false;  // dense only: mask weights during training

  static LayerSpec conv(int channels, int kernel) { return {LayerKind::kConv, channels, kernel, 1, 0, false}; }
  static LayerSpec relu() { return {LayerKind::kRelu, 0, 0, 1, 0, false}; }
  static LayerSpec maxpool(int kernel, int stride) { return {LayerKind::kMaxPool, 0, kernel, stride, 0, false}; }
  static LayerSpec local(int channels, int kernel) { return {LayerKind::kLocal, channels, kernel, 1, 0, false}; }
  static LayerSpec dense(int units, bool dropconnect = false) {
    return {LayerKind::kDense, 0, 0, 1, units, dropconnect};
  }
  static LayerSpec softmax() { return {LayerKind::kSoftmax, 0, 0, 1, 0, false}; }
};

struct NetworkSpec {
  int in_channels = 3;
  int in_px = 32;
  std::vector<LayerSpec> layers;

  /// conv(16@5x5) - relu - pool2 - conv(32@5x5) - relu - pool2 -
  /// local(16@3x3) - relu - dense(64, DropConnect) - relu - dense(2) - softmax
  static NetworkSpec reference();
};

/// Throws ValidationError unless every consecutive pair of layers is shape
/// compatible and the net ends in a 2-way softmax.
void validate_network(const NetworkSpec& spec);

/// Output shape {c, h, w} after each layer (dense outputs are {units, 1, 1}).
std::vector<std::array<int, 3>> layer_output_shapes(const NetworkSpec& spec);

template <typename T>
struct ModelParamsT {
  NetworkSpec spec;
  std::vector<std::vector<T>> weights;  // indexed by layer; empty when the layer has none
  std::vector<std::vector<T>> biases;
  double dropconnect_keep = 1.0;  // keep probability the model was trained with
  int epochs_run = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
};
using ModelParams = ModelParamsT<float>;

/// He-normal weights, zero biases.
template <typename T>
ModelParamsT<T> init_params(const NetworkSpec& spec, std::uint64_t seed);

enum class Mode { kTrain, kEval };

/// Per-batch activations and sampling state. acts[0] is the input, acts[l+1]
/// the output of layer l; probabilities come out in acts.back().
template <typename T>
struct WorkspaceT {
  std::vector<TensorT<T>> acts;
  std::vector<std::vector<std::int32_t>> pool_src;            // argmax offsets per pool layer
  std::vector<std::vector<std::uint8_t>> keep_mask;           // DropConnect masks per dense layer
};
using Workspace = WorkspaceT<float>;

/// In train mode, DropConnect masks are sampled from `rng` per example; pass
/// rng = nullptr to reuse the masks already in the workspace (for gradient
/// checks with the mask held fixed). Eval mode scales the masked layers'
/// weights by the keep probability instead.
template <typename T>
void forward(const ModelParamsT<T>& params, const TensorT<T>& batch, Mode mode, WorkspaceT<T>& ws,
             Rng* rng = nullptr);

template <typename T>
double mean_cross_entropy(const TensorT<T>& probs, const std::vector<int>& labels);

/// Gradients of the mean cross-entropy w.r.t. every parameter, reusing the
/// train-mode forward pass stored in ws. Gradients land in `grads` (same
/// shapes as params). skip_input_grad drops the (unused) gradient w.r.t. the
/// network input.
template <typename T>
void backward(const ModelParamsT<T>& params, const std::vector<int>& labels, const WorkspaceT<T>& ws,
              ModelParamsT<T>& grads, bool skip_input_grad = true);

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;  // applied to weights, not biases
  int batch_size = 64;
  int epochs = 30;
  double keep_prob = 0.5;  // DropConnect keep probability
  double lr_decay_factor = 0.1;
  double lr_decay_fraction = 2.0 / 3.0;  // of total epochs, when the decay kicks in
  std::uint64_t seed = 0;
};

void validate_train_config(const TrainConfig& cfg);

/// Minibatch SGD with momentum over the multiset patches[sample[i]] (pass
/// balanced indices for a 50/50 training set). Patches with one stored
/// channel are replicated to the network's input channels. Throws
/// DivergenceError (with the epoch) when the loss goes non-finite.
ModelParams train_sgd(const NetworkSpec& spec, const std::vector<Patch>& patches,
                      const std::vector<int>& labels, const std::vector<std::size_t>& sample,
                      const TrainConfig& cfg);

/// Eval-mode probability of the positive class for one patch.
double predict_view(const ModelParams& params, const Patch& patch);

/// Single file: one JSON header line (architecture + training metadata),
/// then the raw little-endian f32 parameters in layer order. Bit-exact
/// round-trip.
void save_model(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace cascade
