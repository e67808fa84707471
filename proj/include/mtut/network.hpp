#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtut/alignment.hpp"
#include "mtut/tensor.hpp"

namespace mtut {

enum class LayerKind { Conv3d, Relu, MaxPool3d, GlobalAvgPool, Dense };

struct LayerSpec {
    LayerKind kind;
    // Conv3d: kernel extents (kw, kh, kt), inCh -> outCh, stride, pad.
    // MaxPool3d: kernel holds the window, stride the step.
    // Dense: inCh -> outCh.
    std::size_t kw = 0, kh = 0, kt = 0;
    std::size_t inCh = 0, outCh = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;

    static LayerSpec conv3d(std::size_t k, std::size_t inCh, std::size_t outCh,
                            std::size_t stride = 1, std::size_t pad = 1) {
        return LayerSpec{LayerKind::Conv3d, k, k, k, inCh, outCh, stride, pad};
    }
    static LayerSpec relu() { return LayerSpec{LayerKind::Relu}; }
    static LayerSpec maxpool3d(std::size_t window = 2, std::size_t stride = 2) {
        return LayerSpec{LayerKind::MaxPool3d, window, window, window, 0, 0, stride, 0};
    }
    static LayerSpec gavgpool() { return LayerSpec{LayerKind::GlobalAvgPool}; }
    static LayerSpec dense(std::size_t inCh, std::size_t outCh) {
        return LayerSpec{LayerKind::Dense, 0, 0, 0, inCh, outCh, 1, 0};
    }
};

// Weight/bias pair for one layer; empty tensors for parameterless layers.
struct LayerParams {
    Tensor weight;
    Tensor bias;
};

// One classifier: layer stack, parameters and the index of the layer whose
// output feeds the alignment loss.
struct ModalityNetwork {
    std::string modalityId;
    std::vector<LayerSpec> layers;
    std::vector<LayerParams> params;
    std::size_t alignLayerIndex = 0;
};

// Per-layer activations and pooling argmax indices kept for the backward
// pass. outputs[i] is the output of layers[i]; input is the network input.
struct ForwardCache {
    Tensor input;
    std::vector<Tensor> outputs;
    std::vector<std::vector<std::size_t>> poolArgmax;  // flat input indices
};

struct ForwardResult {
    Tensor logits;
    ForwardCache cache;

    const Tensor& alignOutput(const ModalityNetwork& net) const {
        return cache.outputs[net.alignLayerIndex];
    }
};

// Gradients mirror ModalityNetwork::params shapes.
struct Gradients {
    std::vector<LayerParams> perLayer;
};

// He-normal init for conv/dense weights (stddev sqrt(2 / fan_in)), zero
// biases. Validates channel chaining against inputDims.
ModalityNetwork init_network(const std::string& modalityId, std::vector<LayerSpec> layers,
                             std::size_t alignLayerIndex, const std::vector<std::size_t>& inputDims,
                             RngStream& rng);

// Reference stack: conv3(3^3, Cin->8) relu pool2, conv3(8->16) relu pool2,
// conv3(16->32) relu (alignment layer), gavgpool, dense(32->K).
std::vector<LayerSpec> mini_gesture_net(std::size_t inCh, std::size_t numClasses);
std::size_t mini_gesture_net_align_index();

// Layer primitives. Accumulation order is fixed: bias first, then taps in
// (dx, dy, dt, ci) order, so results are identical at any thread count.
Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                      std::size_t pad);
void conv3d_backward(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                     const Tensor& dOut, Tensor* dX, Tensor& dW, Tensor& dB);

// Per-window max; ties go to the lowest row-major index.
Tensor maxpool3d_forward(const Tensor& x, std::size_t window, std::size_t stride,
                         std::vector<std::size_t>& argmaxOut);
Tensor maxpool3d_backward(const std::vector<std::size_t>& argmax,
                          const std::vector<std::size_t>& inputDims, const Tensor& dOut);

Tensor gavgpool_forward(const Tensor& x);
Tensor gavgpool_backward(const std::vector<std::size_t>& inputDims, const Tensor& dOut);

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b);
void dense_backward(const Tensor& x, const Tensor& w, const Tensor& dOut, Tensor& dX, Tensor& dW,
                    Tensor& dB);

struct XentResult {
    double loss = 0.0;
    Tensor dLogits;
};

// Stable -log softmax(logits)[label] with its gradient.
XentResult softmax_xent(const Tensor& logits, std::size_t label);

ForwardResult network_forward(const ModalityNetwork& net, const Tensor& input);

// Backward of (head loss + alignment contribution): dAlign, when present,
// is added to the backpropagated signal at the alignment layer.
Gradients network_backward(const ModalityNetwork& net, const ForwardCache& cache,
                           const Tensor& dLogits, const Tensor* dAlign = nullptr);

}  // namespace mtut
