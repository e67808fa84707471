#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mtut/tensor.hpp"

namespace mtut {

// 4-D activation block (width x height x frames x channels) taken at the
// alignment layer of a modality network.
struct FeatureMap {
    Tensor values;  // dims (W, H, T, C)

    explicit FeatureMap(Tensor v);

    std::size_t width() const { return values.dims()[0]; }
    std::size_t height() const { return values.dims()[1]; }
    std::size_t frames() const { return values.dims()[2]; }
    std::size_t channels() const { return values.dims()[3]; }
    std::size_t elementCount() const { return width() * height() * frames(); }
};

struct ElementStats {
    double mean = 0.0;
    double stddev = 0.0;     // population form (divide by C)
    double tildeNorm = 0.0;  // Euclidean norm of the standardized vector
};

// Standardized, unit-norm element vectors of a feature map, one row per
// spatiotemporal element in row-major (i, j, t) order. Rows flagged in
// zeroMask (vanishing variance) are exactly zero.
struct NormalizedFeatureMap {
    Tensor rows;  // d x C
    std::size_t d = 0;
    std::vector<ElementStats> elementStats;
    std::vector<std::uint8_t> zeroMask;
};

// Symmetric d x d matrix of inner products between normalized element
// vectors; diagonal is 1 for live elements, 0 for masked ones.
struct CorrelationMatrix {
    Tensor values;
};

// One-way transfer weight. rho = relu(exp(beta * deltaLoss) - 1), so it is
// zero whenever the other network is not strictly better.
struct FocalGate {
    double rho = 0.0;
    double lossSelf = 0.0;
    double lossOther = 0.0;
    double beta = 1.0;
    double deltaLoss = 0.0;
};

struct SsaTerm {
    std::string otherModality;
    FocalGate gate;
    double ssaValue = 0.0;
};

// Per-network objective: total = clsLoss + lambda * sum(ssaValue).
struct LossBreakdown {
    double clsLoss = 0.0;
    std::vector<SsaTerm> ssaTerms;
    double lambda = 0.0;
    double total = 0.0;
};

struct NormEps {
    double std = 1e-5;   // added to sigma before dividing
    double norm = 1e-8;  // rows with ||f~|| at or below this are masked
};

NormalizedFeatureMap normalize_feature_map(const FeatureMap& f, double epsStd = 1e-5,
                                           double epsNorm = 1e-8);

CorrelationMatrix correlation_matrix(const NormalizedFeatureMap& n);

// rho * squared Frobenius distance between the two correlation matrices.
// The target map only needs matching (W, H, T); channels may differ.
double ssa_loss(const FeatureMap& fm, const FeatureMap& fnTarget, const FocalGate& gate,
                const NormEps& eps = {});

// Exact gradient of ssa_loss with respect to fm, with the target and the
// gate held constant. Masked elements receive zero gradient.
Tensor ssa_loss_grad(const FeatureMap& fm, const FeatureMap& fnTarget, const FocalGate& gate,
                     const NormEps& eps = {});

struct SsaEval {
    double value = 0.0;
    Tensor grad;
};

// Loss and gradient in one pass; the training step uses this to avoid
// normalizing twice.
SsaEval ssa_loss_with_grad(const FeatureMap& fm, const FeatureMap& fnTarget, const FocalGate& gate,
                           const NormEps& eps = {});

FocalGate focal_rho(double lossSelf, double lossOther, double beta);

LossBreakdown total_objective(double clsLoss, std::vector<SsaTerm> ssaTerms, double lambda);

// d rows of d comma-separated decimal values, LF-terminated.
void write_correlation_csv(const CorrelationMatrix& corr, std::ostream& out);

}  // namespace mtut
