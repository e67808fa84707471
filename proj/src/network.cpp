#include "mtut/network.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace mtut {

namespace {

constexpr std::size_t kParallelCutoff = 1u << 13;

bool wantParallel(std::size_t work) {
    return work >= kParallelCutoff && !omp_in_parallel();
}

std::size_t outExtent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                      const char* what) {
    if (in + 2 * pad < k) {
        throw ValidationError(std::string(what) + ": kernel larger than padded input");
    }
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                      std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 5 || b.rank() != 1) {
        throw ValidationError("conv3d: expected x rank-4, w rank-5, b rank-1");
    }
    const std::size_t W = x.dims()[0], H = x.dims()[1], T = x.dims()[2], Cin = x.dims()[3];
    const std::size_t kw = w.dims()[0], kh = w.dims()[1], kt = w.dims()[2];
    const std::size_t wCin = w.dims()[3], Cout = w.dims()[4];
    if (wCin != Cin || b.dims()[0] != Cout) {
        throw ValidationError("conv3d: channel mismatch");
    }
    if (pad >= kw || pad >= kh || pad >= kt) {
        throw ValidationError("conv3d: padding must be smaller than the kernel");
    }
    const std::size_t Wo = outExtent(W, kw, stride, pad, "conv3d");
    const std::size_t Ho = outExtent(H, kh, stride, pad, "conv3d");
    const std::size_t To = outExtent(T, kt, stride, pad, "conv3d");

    Tensor out({Wo, Ho, To, Cout});
    const double* xd = x.data();
    const double* wd = w.data();
    const double* bd = b.data();
    double* od = out.data();
    const std::size_t positions = Wo * Ho * To;
    const std::size_t work = positions * Cout * kw * kh * kt * Cin;

#pragma omp parallel if (wantParallel(work))
    {
        std::vector<double> acc(Cout);
#pragma omp for schedule(static)
        for (std::ptrdiff_t ps = 0; ps < static_cast<std::ptrdiff_t>(positions); ++ps) {
            const std::size_t pos = static_cast<std::size_t>(ps);
            const std::size_t ot = pos % To;
            const std::size_t oy = (pos / To) % Ho;
            const std::size_t ox = pos / (To * Ho);
            // Valid tap ranges replace per-tap bounds checks; skipped taps
            // read zero padding and contribute nothing.
            const std::ptrdiff_t bx = static_cast<std::ptrdiff_t>(ox * stride) - pad;
            const std::ptrdiff_t by = static_cast<std::ptrdiff_t>(oy * stride) - pad;
            const std::ptrdiff_t bt = static_cast<std::ptrdiff_t>(ot * stride) - pad;
            const std::size_t dxLo = bx < 0 ? static_cast<std::size_t>(-bx) : 0;
            const std::size_t dyLo = by < 0 ? static_cast<std::size_t>(-by) : 0;
            const std::size_t dtLo = bt < 0 ? static_cast<std::size_t>(-bt) : 0;
            const std::size_t dxHi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                static_cast<std::ptrdiff_t>(kw), static_cast<std::ptrdiff_t>(W) - bx));
            const std::size_t dyHi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                static_cast<std::ptrdiff_t>(kh), static_cast<std::ptrdiff_t>(H) - by));
            const std::size_t dtHi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                static_cast<std::ptrdiff_t>(kt), static_cast<std::ptrdiff_t>(T) - bt));

            for (std::size_t co = 0; co < Cout; ++co) acc[co] = bd[co];
            for (std::size_t dx = dxLo; dx < dxHi; ++dx) {
                const std::size_t ix = static_cast<std::size_t>(bx + static_cast<std::ptrdiff_t>(dx));
                for (std::size_t dy = dyLo; dy < dyHi; ++dy) {
                    const std::size_t iy =
                        static_cast<std::size_t>(by + static_cast<std::ptrdiff_t>(dy));
                    for (std::size_t dt = dtLo; dt < dtHi; ++dt) {
                        const std::size_t it =
                            static_cast<std::size_t>(bt + static_cast<std::ptrdiff_t>(dt));
                        const double* xrow = xd + ((ix * H + iy) * T + it) * Cin;
                        const double* wrow = wd + (((dx * kh + dy) * kt + dt) * Cin) * Cout;
                        for (std::size_t ci = 0; ci < Cin; ++ci) {
                            const double v = xrow[ci];
                            const double* wco = wrow + ci * Cout;
                            for (std::size_t co = 0; co < Cout; ++co) {
                                acc[co] += v * wco[co];
                            }
                        }
                    }
                }
            }
            double* orow = od + pos * Cout;
            for (std::size_t co = 0; co < Cout; ++co) orow[co] = acc[co];
        }
    }
    return out;
}

void conv3d_backward(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                     const Tensor& dOut, Tensor* dX, Tensor& dW, Tensor& dB) {
    const std::size_t W = x.dims()[0], H = x.dims()[1], T = x.dims()[2], Cin = x.dims()[3];
    const std::size_t kw = w.dims()[0], kh = w.dims()[1], kt = w.dims()[2];
    const std::size_t Cout = w.dims()[4];
    const std::size_t Wo = outExtent(W, kw, stride, pad, "conv3d");
    const std::size_t Ho = outExtent(H, kh, stride, pad, "conv3d");
    const std::size_t To = outExtent(T, kt, stride, pad, "conv3d");
    if (dOut.dims() != std::vector<std::size_t>{Wo, Ho, To, Cout}) {
        throw ValidationError("conv3d_backward: dOut shape mismatch");
    }

    dW = Tensor(w.dims());
    dB = Tensor({Cout});
    const double* xd = x.data();
    const double* wd = w.data();
    const double* gd = dOut.data();
    const std::size_t positions = Wo * Ho * To;

    // Bias: ascending output position per channel.
    {
        double* dbd = dB.data();
        for (std::size_t pos = 0; pos < positions; ++pos) {
            const double* grow = gd + pos * Cout;
            for (std::size_t co = 0; co < Cout; ++co) dbd[co] += grow[co];
        }
    }

    // Weights: one task per (dx, dy, dt, ci); inner loop over co stays
    // contiguous and the output-position order is fixed.
    {
        double* dwd = dW.data();
        const std::size_t taps = kw * kh * kt * Cin;
#pragma omp parallel for schedule(static) if (wantParallel(taps * positions * Cout))
        for (std::ptrdiff_t tapS = 0; tapS < static_cast<std::ptrdiff_t>(taps); ++tapS) {
            const std::size_t tap = static_cast<std::size_t>(tapS);
            const std::size_t ci = tap % Cin;
            const std::size_t dt = (tap / Cin) % kt;
            const std::size_t dy = (tap / (Cin * kt)) % kh;
            const std::size_t dx = tap / (Cin * kt * kh);
            double* dwRow = dwd + tap * Cout;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * stride + dx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ot = 0; ot < To; ++ot) {
                        const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(ot * stride + dt) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (it < 0 || it >= static_cast<std::ptrdiff_t>(T)) continue;
                        const double v = xd[((static_cast<std::size_t>(ix) * H +
                                              static_cast<std::size_t>(iy)) *
                                                 T +
                                             static_cast<std::size_t>(it)) *
                                                Cin +
                                            ci];
                        const double* grow = gd + ((ox * Ho + oy) * To + ot) * Cout;
                        for (std::size_t co = 0; co < Cout; ++co) {
                            dwRow[co] += v * grow[co];
                        }
                    }
                }
            }
        }
    }

    if (dX == nullptr) return;
    *dX = Tensor(x.dims());
    double* dxd = dX->data();
    const std::size_t inPositions = W * H * T;
#pragma omp parallel for schedule(static) \
    if (wantParallel(inPositions * Cin * kw * kh * kt * Cout))
    for (std::ptrdiff_t ps = 0; ps < static_cast<std::ptrdiff_t>(inPositions); ++ps) {
        const std::size_t pos = static_cast<std::size_t>(ps);
        const std::size_t it = pos % T;
        const std::size_t iy = (pos / T) % H;
        const std::size_t ix = pos / (T * H);
        double* dxRow = dxd + pos * Cin;
        for (std::size_t dx = 0; dx < kw; ++dx) {
            const std::ptrdiff_t num =
                static_cast<std::ptrdiff_t>(ix + pad) - static_cast<std::ptrdiff_t>(dx);
            if (num < 0 || num % static_cast<std::ptrdiff_t>(stride) != 0) continue;
            const std::size_t ox = static_cast<std::size_t>(num) / stride;
            if (ox >= Wo) continue;
            for (std::size_t dy = 0; dy < kh; ++dy) {
                const std::ptrdiff_t numY =
                    static_cast<std::ptrdiff_t>(iy + pad) - static_cast<std::ptrdiff_t>(dy);
                if (numY < 0 || numY % static_cast<std::ptrdiff_t>(stride) != 0) continue;
                const std::size_t oy = static_cast<std::size_t>(numY) / stride;
                if (oy >= Ho) continue;
                for (std::size_t dt = 0; dt < kt; ++dt) {
                    const std::ptrdiff_t numT =
                        static_cast<std::ptrdiff_t>(it + pad) - static_cast<std::ptrdiff_t>(dt);
                    if (numT < 0 || numT % static_cast<std::ptrdiff_t>(stride) != 0) continue;
                    const std::size_t ot = static_cast<std::size_t>(numT) / stride;
                    if (ot >= To) continue;
                    const double* grow = gd + ((ox * Ho + oy) * To + ot) * Cout;
                    const double* wrow = wd + (((dx * kh + dy) * kt + dt) * Cin) * Cout;
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        const double* wco = wrow + ci * Cout;
                        double acc = 0.0;
                        for (std::size_t co = 0; co < Cout; ++co) {
                            acc += wco[co] * grow[co];
                        }
                        dxRow[ci] += acc;
                    }
                }
            }
        }
    }
}

Tensor maxpool3d_forward(const Tensor& x, std::size_t window, std::size_t stride,
                         std::vector<std::size_t>& argmaxOut) {
    if (x.rank() != 4) {
        throw ValidationError("maxpool3d: expected rank-4 input");
    }
    const std::size_t W = x.dims()[0], H = x.dims()[1], T = x.dims()[2], C = x.dims()[3];
    if (window != stride || W % window != 0 || H % window != 0 || T % window != 0) {
        throw ValidationError("maxpool3d: extents must divide by the window");
    }
    const std::size_t Wo = W / window, Ho = H / window, To = T / window;
    Tensor out({Wo, Ho, To, C});
    argmaxOut.assign(out.size(), 0);
    const double* xd = x.data();
    double* od = out.data();
    std::size_t* am = argmaxOut.data();
    const std::size_t positions = Wo * Ho * To;
#pragma omp parallel for schedule(static) if (wantParallel(positions * C * window * window * window))
    for (std::ptrdiff_t ps = 0; ps < static_cast<std::ptrdiff_t>(positions); ++ps) {
        const std::size_t pos = static_cast<std::size_t>(ps);
        const std::size_t ot = pos % To;
        const std::size_t oy = (pos / To) % Ho;
        const std::size_t ox = pos / (To * Ho);
        for (std::size_t c = 0; c < C; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t bestIdx = 0;
            // Row-major window scan with strict >, so ties keep the lowest
            // row-major index.
            for (std::size_t dx = 0; dx < window; ++dx) {
                for (std::size_t dy = 0; dy < window; ++dy) {
                    for (std::size_t dt = 0; dt < window; ++dt) {
                        const std::size_t idx = (((ox * window + dx) * H + oy * window + dy) * T +
                                                 ot * window + dt) *
                                                    C +
                                                c;
                        if (xd[idx] > best) {
                            best = xd[idx];
                            bestIdx = idx;
                        }
                    }
                }
            }
            od[pos * C + c] = best;
            am[pos * C + c] = bestIdx;
        }
    }
    return out;
}

Tensor maxpool3d_backward(const std::vector<std::size_t>& argmax,
                          const std::vector<std::size_t>& inputDims, const Tensor& dOut) {
    if (argmax.size() != dOut.size()) {
        throw ValidationError("maxpool3d_backward: argmax/dOut size mismatch");
    }
    Tensor dX(inputDims);
    double* dxd = dX.data();
    const double* gd = dOut.data();
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        dxd[argmax[i]] += gd[i];
    }
    return dX;
}

Tensor gavgpool_forward(const Tensor& x) {
    if (x.rank() != 4) {
        throw ValidationError("gavgpool: expected rank-4 input");
    }
    const std::size_t spatial = x.dims()[0] * x.dims()[1] * x.dims()[2];
    const std::size_t C = x.dims()[3];
    Tensor out({C});
    const double* xd = x.data();
    double* od = out.data();
    for (std::size_t p = 0; p < spatial; ++p) {
        const double* row = xd + p * C;
        for (std::size_t c = 0; c < C; ++c) od[c] += row[c];
    }
    const double inv = 1.0 / static_cast<double>(spatial);
    for (std::size_t c = 0; c < C; ++c) od[c] *= inv;
    return out;
}

Tensor gavgpool_backward(const std::vector<std::size_t>& inputDims, const Tensor& dOut) {
    if (inputDims.size() != 4 || dOut.rank() != 1 || dOut.dims()[0] != inputDims[3]) {
        throw ValidationError("gavgpool_backward: shape mismatch");
    }
    const std::size_t spatial = inputDims[0] * inputDims[1] * inputDims[2];
    const std::size_t C = inputDims[3];
    Tensor dX(inputDims);
    double* dxd = dX.data();
    const double* gd = dOut.data();
    const double inv = 1.0 / static_cast<double>(spatial);
    for (std::size_t p = 0; p < spatial; ++p) {
        double* row = dxd + p * C;
        for (std::size_t c = 0; c < C; ++c) row[c] = gd[c] * inv;
    }
    return dX;
}

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1) {
        throw ValidationError("dense: expected x rank-1, w rank-2, b rank-1");
    }
    const std::size_t Cin = x.dims()[0];
    const std::size_t K = w.dims()[1];
    if (w.dims()[0] != Cin || b.dims()[0] != K) {
        throw ValidationError("dense: shape mismatch");
    }
    Tensor out({K});
    const double* xd = x.data();
    const double* wd = w.data();
    double* od = out.data();
    for (std::size_t k = 0; k < K; ++k) od[k] = b[k];
    for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double v = xd[ci];
        const double* wrow = wd + ci * K;
        for (std::size_t k = 0; k < K; ++k) od[k] += v * wrow[k];
    }
    return out;
}

void dense_backward(const Tensor& x, const Tensor& w, const Tensor& dOut, Tensor& dX, Tensor& dW,
                    Tensor& dB) {
    const std::size_t Cin = x.dims()[0];
    const std::size_t K = w.dims()[1];
    if (dOut.rank() != 1 || dOut.dims()[0] != K) {
        throw ValidationError("dense_backward: dOut shape mismatch");
    }
    dX = Tensor({Cin});
    dW = Tensor(w.dims());
    dB = dOut;
    const double* xd = x.data();
    const double* wd = w.data();
    const double* gd = dOut.data();
    double* dxd = dX.data();
    double* dwd = dW.data();
    for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* wrow = wd + ci * K;
        double* dwRow = dwd + ci * K;
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            acc += wrow[k] * gd[k];
            dwRow[k] = xd[ci] * gd[k];
        }
        dxd[ci] = acc;
    }
}

XentResult softmax_xent(const Tensor& logits, std::size_t label) {
    if (logits.rank() != 1) {
        throw ValidationError("softmax_xent: expected rank-1 logits");
    }
    const std::size_t K = logits.dims()[0];
    if (label >= K) {
        throw ValidationError("softmax_xent: label out of range");
    }
    const double* z = logits.data();
    double zmax = z[0];
    for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
    double sum = 0.0;
    XentResult res;
    res.dLogits = Tensor({K});
    double* g = res.dLogits.data();
    for (std::size_t k = 0; k < K; ++k) {
        g[k] = std::exp(z[k] - zmax);
        sum += g[k];
    }
    res.loss = std::log(sum) - (z[label] - zmax);
    const double inv = 1.0 / sum;
    for (std::size_t k = 0; k < K; ++k) g[k] *= inv;
    g[label] -= 1.0;
    return res;
}

namespace {

// Walks the stack symbolically to validate chaining and find the output
// dims of every layer for the given input dims.
std::vector<std::vector<std::size_t>> traceShapes(const std::vector<LayerSpec>& layers,
                                                  const std::vector<std::size_t>& inputDims) {
    if (inputDims.size() != 4) {
        throw ValidationError("network: input must be rank-4 (W,H,T,C)");
    }
    std::vector<std::vector<std::size_t>> shapes;
    std::vector<std::size_t> cur = inputDims;
    for (const LayerSpec& l : layers) {
        switch (l.kind) {
            case LayerKind::Conv3d: {
                if (cur.size() != 4 || cur[3] != l.inCh) {
                    throw ValidationError("network: conv3d channel chaining mismatch");
                }
                if (l.pad >= l.kw || l.pad >= l.kh || l.pad >= l.kt) {
                    throw ValidationError("network: conv padding must be below kernel extent");
                }
                cur = {outExtent(cur[0], l.kw, l.stride, l.pad, "network"),
                       outExtent(cur[1], l.kh, l.stride, l.pad, "network"),
                       outExtent(cur[2], l.kt, l.stride, l.pad, "network"), l.outCh};
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::MaxPool3d: {
                if (cur.size() != 4 || cur[0] % l.kw || cur[1] % l.kh || cur[2] % l.kt) {
                    throw ValidationError("network: pool extents must divide input");
                }
                cur = {cur[0] / l.kw, cur[1] / l.kh, cur[2] / l.kt, cur[3]};
                break;
            }
            case LayerKind::GlobalAvgPool: {
                if (cur.size() != 4) {
                    throw ValidationError("network: gavgpool needs rank-4 input");
                }
                cur = {cur[3]};
                break;
            }
            case LayerKind::Dense: {
                if (cur.size() != 1 || cur[0] != l.inCh) {
                    throw ValidationError("network: dense channel chaining mismatch");
                }
                cur = {l.outCh};
                break;
            }
        }
        shapes.push_back(cur);
    }
    return shapes;
}

}  // namespace

ModalityNetwork init_network(const std::string& modalityId, std::vector<LayerSpec> layers,
                             std::size_t alignLayerIndex, const std::vector<std::size_t>& inputDims,
                             RngStream& rng) {
    if (alignLayerIndex >= layers.size()) {
        throw ValidationError("network: alignLayerIndex out of range");
    }
    const auto shapes = traceShapes(layers, inputDims);
    const auto& alignDims = shapes[alignLayerIndex];
    if (alignDims.size() != 4 || alignDims[3] < 2 || alignDims[0] * alignDims[1] * alignDims[2] < 2) {
        throw ValidationError("network: alignment layer needs C >= 2 and d >= 2");
    }

    ModalityNetwork net;
    net.modalityId = modalityId;
    net.layers = std::move(layers);
    net.alignLayerIndex = alignLayerIndex;
    net.params.resize(net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        std::size_t fanIn = 0;
        if (l.kind == LayerKind::Conv3d) {
            net.params[i].weight = Tensor({l.kw, l.kh, l.kt, l.inCh, l.outCh});
            net.params[i].bias = Tensor({l.outCh});
            fanIn = l.kw * l.kh * l.kt * l.inCh;
        } else if (l.kind == LayerKind::Dense) {
            net.params[i].weight = Tensor({l.inCh, l.outCh});
            net.params[i].bias = Tensor({l.outCh});
            fanIn = l.inCh;
        } else {
            continue;
        }
        const double stddev = std::sqrt(2.0 / static_cast<double>(fanIn));
        double* wd = net.params[i].weight.data();
        for (std::size_t j = 0; j < net.params[i].weight.size(); ++j) {
            wd[j] = stddev * rng.nextNormal();
        }
    }
    return net;
}

std::vector<LayerSpec> mini_gesture_net(std::size_t inCh, std::size_t numClasses) {
    return {
        LayerSpec::conv3d(3, inCh, 8),  LayerSpec::relu(), LayerSpec::maxpool3d(),
        LayerSpec::conv3d(3, 8, 16),    LayerSpec::relu(), LayerSpec::maxpool3d(),
        LayerSpec::conv3d(3, 16, 32),   LayerSpec::relu(),  // alignment layer
        LayerSpec::gavgpool(),          LayerSpec::dense(32, numClasses),
    };
}

std::size_t mini_gesture_net_align_index() { return 7; }

ForwardResult network_forward(const ModalityNetwork& net, const Tensor& input) {
    ForwardResult res;
    res.cache.input = input;
    res.cache.outputs.reserve(net.layers.size());
    res.cache.poolArgmax.resize(net.layers.size());
    const Tensor* cur = &input;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        switch (l.kind) {
            case LayerKind::Conv3d:
                res.cache.outputs.push_back(
                    conv3d_forward(*cur, net.params[i].weight, net.params[i].bias, l.stride, l.pad));
                break;
            case LayerKind::Relu:
                res.cache.outputs.push_back(elementwise_map(*cur, MapFn::Relu));
                break;
            case LayerKind::MaxPool3d:
                res.cache.outputs.push_back(
                    maxpool3d_forward(*cur, l.kw, l.stride, res.cache.poolArgmax[i]));
                break;
            case LayerKind::GlobalAvgPool:
                res.cache.outputs.push_back(gavgpool_forward(*cur));
                break;
            case LayerKind::Dense:
                res.cache.outputs.push_back(
                    dense_forward(*cur, net.params[i].weight, net.params[i].bias));
                break;
        }
        cur = &res.cache.outputs.back();
    }
    res.logits = res.cache.outputs.back();
    return res;
}

Gradients network_backward(const ModalityNetwork& net, const ForwardCache& cache,
                           const Tensor& dLogits, const Tensor* dAlign) {
    if (cache.outputs.size() != net.layers.size()) {
        throw ValidationError("network_backward: cache does not match the network");
    }
    if (!dLogits.sameDims(cache.outputs.back())) {
        throw ValidationError("network_backward: dLogits shape mismatch");
    }
    if (dAlign != nullptr && !dAlign->sameDims(cache.outputs[net.alignLayerIndex])) {
        throw ValidationError("network_backward: dAlign shape mismatch");
    }

    Gradients grads;
    grads.perLayer.resize(net.layers.size());
    Tensor signal = dLogits;
    for (std::size_t ii = net.layers.size(); ii-- > 0;) {
        if (dAlign != nullptr && ii == net.alignLayerIndex) {
            double* s = signal.data();
            const double* a = dAlign->data();
            for (std::size_t j = 0; j < signal.size(); ++j) s[j] += a[j];
        }
        const LayerSpec& l = net.layers[ii];
        const Tensor& layerIn = ii == 0 ? cache.input : cache.outputs[ii - 1];
        const bool needDx = ii > 0;
        switch (l.kind) {
            case LayerKind::Conv3d: {
                Tensor dX;
                conv3d_backward(layerIn, net.params[ii].weight, l.stride, l.pad, signal,
                                needDx ? &dX : nullptr, grads.perLayer[ii].weight,
                                grads.perLayer[ii].bias);
                if (needDx) signal = std::move(dX);
                break;
            }
            case LayerKind::Relu: {
                if (!signal.sameDims(layerIn)) {
                    throw ValidationError("network_backward: relu signal mismatch");
                }
                Tensor dX(layerIn.dims());
                const double* in = layerIn.data();
                const double* g = signal.data();
                double* o = dX.data();
                for (std::size_t j = 0; j < dX.size(); ++j) o[j] = in[j] > 0.0 ? g[j] : 0.0;
                signal = std::move(dX);
                break;
            }
            case LayerKind::MaxPool3d:
                signal = maxpool3d_backward(cache.poolArgmax[ii], layerIn.dims(), signal);
                break;
            case LayerKind::GlobalAvgPool:
                signal = gavgpool_backward(layerIn.dims(), signal);
                break;
            case LayerKind::Dense: {
                Tensor dX;
                dense_backward(layerIn, net.params[ii].weight, signal, dX,
                               grads.perLayer[ii].weight, grads.perLayer[ii].bias);
                signal = std::move(dX);
                break;
            }
        }
    }
    return grads;
}

}  // namespace mtut
