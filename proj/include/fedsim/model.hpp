#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

constexpr int kConv1Channels = 16;
constexpr int kConv2Channels = 32;
constexpr int kKernel = 3;
constexpr int kFlattenedSize = kConv2Channels * (kImageH / 4) * (kImageW / 4);  // 1568
constexpr int kHiddenSize = 256;

// The full parameter set of the CNN:
//   conv 3x3 (16) -> ReLU -> maxpool 2x2 -> conv 3x3 (32) -> ReLU -> maxpool 2x2
//   -> flatten 1568 -> fc 256 -> ReLU -> fc 10 -> softmax
// Parameter iteration order is fixed (fields()) and identical everywhere.
struct ModelParams {
    Tensor conv1_w{std::vector<int>{kConv1Channels, 1, kKernel, kKernel}};
    Tensor conv1_b{std::vector<int>{kConv1Channels}};
    Tensor conv2_w{std::vector<int>{kConv2Channels, kConv1Channels, kKernel, kKernel}};
    Tensor conv2_b{std::vector<int>{kConv2Channels}};
    Tensor fc1_w{std::vector<int>{kHiddenSize, kFlattenedSize}};
    Tensor fc1_b{std::vector<int>{kHiddenSize}};
    Tensor fc2_w{std::vector<int>{kNumClasses, kHiddenSize}};
    Tensor fc2_b{std::vector<int>{kNumClasses}};

    static const std::array<Tensor ModelParams::*, 8>& fields();
    static const std::array<const char*, 8>& field_names();

    bool operator==(const ModelParams& o) const;
};

// Gradients are shape-for-shape congruent with the parameters.
using Gradients = ModelParams;

// Scaled-uniform fan-in init, U(-sqrt(1/fan_in), +sqrt(1/fan_in)); biases zero.
ModelParams init_params(std::uint64_t seed);

struct AdamHyper {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    ModelParams m;  // first moments, zero-initialized
    ModelParams v;  // second moments, zero-initialized
    long step_count = 0;
    AdamHyper hyper;

    explicit AdamState(const AdamHyper& h = {}) : hyper(h) {}
};

// One bias-corrected Adam update of a single tensor; t is the 1-based step.
void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, long t,
                 const AdamHyper& hyper);

// Updates every parameter tensor in the fixed field order and bumps step_count.
void adam_step(ModelParams& params, const Gradients& grads, AdamState& state);

// Zero-padded stride-1 3x3 convolution (cross-correlation):
//   out[o,y,x] = bias[o] + sum_{c,dy,dx} in[c,y+dy-1,x+dx-1] * k[o,c,dy,dx]
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias);

// Gradients of conv2d; d_input may be null when not needed (first layer).
void conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& d_out,
                     Tensor& d_kernels, Tensor& d_bias, Tensor* d_input);

// Disjoint 2x2 max pooling; ties resolve to the first element in row-major
// order. argmax, when given, receives the flat input index per output cell.
Tensor maxpool2(const Tensor& input, std::vector<int>* argmax = nullptr);

// Softmax probabilities for a batch, rows on the simplex. batch is [N,1,28,28].
Tensor model_forward(const ModelParams& params, const Tensor& batch);

// Pre-softmax outputs, same pipeline minus the final softmax.
Tensor model_logits(const ModelParams& params, const Tensor& batch);

// Mean cross-entropy of the batch without computing gradients.
double model_loss(const ModelParams& params, const Tensor& batch, const std::vector<int>& labels);

struct BackwardResult {
    double loss = 0.0;
    Gradients grads;
};

// Mean cross-entropy loss and exact analytic gradients for every parameter.
BackwardResult model_backward(const ModelParams& params, const Tensor& batch,
                              const std::vector<int>& labels);

// Fraction of examples whose argmax prediction (ties to the lowest class
// index) matches the label. threads > 1 splits the dataset into chunks.
double evaluate(const ModelParams& params, const std::vector<Example>& dataset, int threads = 1);

}  // namespace fedsim
