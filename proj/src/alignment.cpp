#include "mtut/alignment.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

namespace mtut {

FeatureMap::FeatureMap(Tensor v) : values(std::move(v)) {
    if (values.rank() != 4) {
        throw ValidationError("feature map: expected rank-4 (W,H,T,C)");
    }
    if (channels() < 2) {
        throw ValidationError("feature map: needs at least 2 channels");
    }
    if (!values.allFinite()) {
        throw ValidationError("feature map: non-finite values");
    }
}

NormalizedFeatureMap normalize_feature_map(const FeatureMap& f, double epsStd, double epsNorm) {
    if (epsStd < 0.0 || epsNorm <= 0.0) {
        throw ValidationError("normalize: eps values must be positive (epsStd may be 0)");
    }
    const std::size_t d = f.elementCount();
    const std::size_t C = f.channels();
    NormalizedFeatureMap out;
    out.rows = Tensor({d, C});
    out.d = d;
    out.elementStats.resize(d);
    out.zeroMask.assign(d, 0);

    const double* src = f.values.data();  // element-major: row e is src + e*C
    double* rows = out.rows.data();
#pragma omp parallel for schedule(static) if (d * C >= 1u << 14)
    for (std::ptrdiff_t es = 0; es < static_cast<std::ptrdiff_t>(d); ++es) {
        const std::size_t e = static_cast<std::size_t>(es);
        const double* v = src + e * C;
        double* r = rows + e * C;
        double mean = 0.0;
        for (std::size_t c = 0; c < C; ++c) mean += v[c];
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double dv = v[c] - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(C);
        const double sigma = std::sqrt(var);
        const double denom = sigma + epsStd;
        if (denom == 0.0) {  // constant element with epsStd = 0
            for (std::size_t c = 0; c < C; ++c) r[c] = 0.0;
            out.elementStats[e] = {mean, 0.0, 0.0};
            out.zeroMask[e] = 1;
            continue;
        }
        double norm2 = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double t = (v[c] - mean) / denom;
            r[c] = t;
            norm2 += t * t;
        }
        const double norm = std::sqrt(norm2);
        out.elementStats[e] = {mean, sigma, norm};
        if (norm <= epsNorm) {
            for (std::size_t c = 0; c < C; ++c) r[c] = 0.0;
            out.zeroMask[e] = 1;
        } else {
            for (std::size_t c = 0; c < C; ++c) r[c] /= norm;
        }
    }
    return out;
}

CorrelationMatrix correlation_matrix(const NormalizedFeatureMap& n) {
    const std::size_t d = n.d;
    const std::size_t C = n.rows.dims()[1];
    CorrelationMatrix corr{Tensor({d, d})};
    const double* rows = n.rows.data();
    double* m = corr.values.data();
    // Upper triangle only, mirrored, so symmetry holds exactly.
#pragma omp parallel for schedule(static) if (d * d * C >= 1u << 16)
    for (std::ptrdiff_t is = 0; is < static_cast<std::ptrdiff_t>(d); ++is) {
        const std::size_t i = static_cast<std::size_t>(is);
        const double* ri = rows + i * C;
        for (std::size_t j = i; j < d; ++j) {
            const double* rj = rows + j * C;
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) dot += ri[c] * rj[c];
            m[i * d + j] = dot;
            m[j * d + i] = dot;
        }
    }
    return corr;
}

namespace {

void check_ssa_shapes(const FeatureMap& fm, const FeatureMap& fn) {
    if (fm.width() != fn.width() || fm.height() != fn.height() || fm.frames() != fn.frames()) {
        throw ValidationError("ssa: feature maps must share (W,H,T)");
    }
}

}  // namespace

double ssa_loss(const FeatureMap& fm, const FeatureMap& fnTarget, const FocalGate& gate,
                const NormEps& eps) {
    check_ssa_shapes(fm, fnTarget);
    if (gate.rho == 0.0) return 0.0;
    const CorrelationMatrix cm = correlation_matrix(normalize_feature_map(fm, eps.std, eps.norm));
    const CorrelationMatrix cn =
        correlation_matrix(normalize_feature_map(fnTarget, eps.std, eps.norm));
    const std::size_t n = cm.values.size();
    const double* a = cm.values.data();
    const double* b = cn.values.data();
    double fro2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = a[i] - b[i];
        fro2 += diff * diff;
    }
    return gate.rho * fro2;
}

Tensor ssa_loss_grad(const FeatureMap& fm, const FeatureMap& fnTarget, const FocalGate& gate,
                     const NormEps& eps) {
    return ssa_loss_with_grad(fm, fnTarget, gate, eps).grad;
}

SsaEval ssa_loss_with_grad(const FeatureMap& fm, const FeatureMap& fnTarget, const FocalGate& gate,
                           const NormEps& eps) {
    check_ssa_shapes(fm, fnTarget);
    SsaEval result;
    result.grad = Tensor(fm.values.dims());
    if (gate.rho == 0.0) return result;

    const NormalizedFeatureMap nm = normalize_feature_map(fm, eps.std, eps.norm);
    const NormalizedFeatureMap nn = normalize_feature_map(fnTarget, eps.std, eps.norm);
    const CorrelationMatrix cm = correlation_matrix(nm);
    const CorrelationMatrix cn = correlation_matrix(nn);

    const std::size_t d = nm.d;
    const std::size_t C = fm.channels();

    // L = rho * sum_ab (R R^T - N)_ab^2 with R the normalized rows, so
    // dL/dR = 4 rho D R with D = corr(m) - corr(n) (symmetric).
    Tensor diff({d, d});
    {
        const double* a = cm.values.data();
        const double* b = cn.values.data();
        double* dd = diff.data();
        double fro2 = 0.0;
        for (std::size_t i = 0; i < d * d; ++i) {
            dd[i] = a[i] - b[i];
            fro2 += dd[i] * dd[i];
        }
        result.value = gate.rho * fro2;
    }
    Tensor gRows = matmul(diff, nm.rows);  // d x C, scaled below

    const double* rows = nm.rows.data();
    const double* g = gRows.data();
    const double* src = fm.values.data();
    double* out = result.grad.data();
    const double scale = 4.0 * gate.rho;
#pragma omp parallel for schedule(static) if (d * C >= 1u << 14)
    for (std::ptrdiff_t es = 0; es < static_cast<std::ptrdiff_t>(d); ++es) {
        const std::size_t e = static_cast<std::size_t>(es);
        if (nm.zeroMask[e]) continue;  // masked rows carry no gradient
        const ElementStats& st = nm.elementStats[e];
        const double* fhat = rows + e * C;
        const double* v = src + e * C;
        double* o = out + e * C;

        // Through the unit-norm map: g~ = (g - (fhat . g) fhat) / ||f~||.
        double dotFG = 0.0;
        for (std::size_t c = 0; c < C; ++c) dotFG += fhat[c] * scale * g[e * C + c];
        const double invNorm = 1.0 / st.tildeNorm;
        double gtMean = 0.0;
        double gtDotTilde = 0.0;  // sum_c g~_c * f~_c
        for (std::size_t c = 0; c < C; ++c) {
            const double gh = scale * g[e * C + c];
            const double gt = (gh - dotFG * fhat[c]) * invNorm;
            o[c] = gt;  // stash g~ temporarily
            gtMean += gt;
            gtDotTilde += gt * fhat[c] * st.tildeNorm;
        }
        gtMean /= static_cast<double>(C);

        // Through standardization f~ = (f - mu) / (sigma + epsStd):
        // dL/df_k = (g~_k - mean(g~)) / (sigma + eps) - f~_k (g~ . f~) / (C sigma).
        const double denom = st.stddev + eps.std;
        const double sigmaTerm =
            st.stddev > 0.0 ? gtDotTilde / (static_cast<double>(C) * st.stddev) : 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double tilde = (v[c] - st.mean) / denom;
            o[c] = (o[c] - gtMean) / denom - tilde * sigmaTerm;
        }
    }
    return result;
}

FocalGate focal_rho(double lossSelf, double lossOther, double beta) {
    if (beta <= 0.0) {
        throw ValidationError("focal_rho: beta must be positive");
    }
    FocalGate gate;
    gate.lossSelf = lossSelf;
    gate.lossOther = lossOther;
    gate.beta = beta;
    gate.deltaLoss = lossSelf - lossOther;
    const double raw = std::exp(beta * gate.deltaLoss) - 1.0;
    gate.rho = raw > 0.0 ? raw : 0.0;  // thresholding at zero, ReLU form
    return gate;
}

LossBreakdown total_objective(double clsLoss, std::vector<SsaTerm> ssaTerms, double lambda) {
    if (lambda < 0.0) {
        throw ValidationError("total_objective: lambda must be non-negative");
    }
    LossBreakdown lb;
    lb.clsLoss = clsLoss;
    lb.ssaTerms = std::move(ssaTerms);
    lb.lambda = lambda;
    double sum = 0.0;
    for (const SsaTerm& t : lb.ssaTerms) sum += t.ssaValue;
    lb.total = clsLoss + lambda * sum;
    return lb;
}

void write_correlation_csv(const CorrelationMatrix& corr, std::ostream& out) {
    const std::size_t d = corr.values.dims()[0];
    char buf[32];
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", corr.values.at2(i, j));
            out << buf;
            if (j + 1 < d) out << ',';
        }
        out << '\n';
    }
}

}  // namespace mtut
