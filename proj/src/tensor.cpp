#include "mtut/tensor.hpp"

#include <cmath>
#include <numbers>
#include <utility>

namespace mtut {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& dims) {
    if (dims.empty()) {
        throw ValidationError("tensor: dims must be non-empty");
    }
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d == 0) {
            throw ValidationError("tensor: zero extent");
        }
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims)
    : dims_(std::move(dims)), data_(checked_product(dims_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
    if (checked_product(dims_) != data_.size()) {
        throw ValidationError("tensor: data length does not match dims");
    }
}

Tensor Tensor::full(std::vector<std::size_t> dims, double value) {
    Tensor t(std::move(dims));
    for (auto& v : t.data_) v = value;
    return t;
}

bool Tensor::allFinite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::uint64_t RngStream::nextU64() {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double RngStream::nextUniform() {
    return static_cast<double>(nextU64() >> 11) * 0x1.0p-53;
}

double RngStream::nextNormal() {
    // Box-Muller on two fresh uniforms; the second branch is discarded so
    // the stream state stays a single u64.
    double u1 = nextUniform();
    double u2 = nextUniform();
    while (u1 == 0.0) u1 = nextUniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

RngStream RngStream::derive(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
    // FNV-1a over the tag, then one splitmix mix per ingredient.
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    RngStream mixer(seed ^ h);
    mixer.state += index * 0x9E3779B97F4A7C15ull;
    return RngStream(mixer.nextU64());
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ValidationError("matmul: both operands must be rank-2");
    }
    const std::size_t p = a.dims()[0], q = a.dims()[1];
    const std::size_t q2 = b.dims()[0], r = b.dims()[1];
    if (q != q2) {
        throw ValidationError("matmul: inner extents mismatch");
    }
    Tensor c({p, r});
    const double* ad = a.data();
    const double* bd = b.data();
    double* cd = c.data();
#pragma omp parallel for schedule(static) if (p * q * r >= 1u << 16)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(p); ++i) {
        double* crow = cd + static_cast<std::size_t>(i) * r;
        const double* arow = ad + static_cast<std::size_t>(i) * q;
        // j outer / k inner keeps the per-entry accumulation in ascending j
        // while letting the k loop vectorize.
        for (std::size_t j = 0; j < q; ++j) {
            const double av = arow[j];
            const double* brow = bd + j * r;
            for (std::size_t k = 0; k < r; ++k) {
                crow[k] += av * brow[k];
            }
        }
    }
    return c;
}

Tensor elementwise_map(const Tensor& t, MapFn fn, double arg) {
    Tensor out(t.dims());
    const double* in = t.data();
    double* o = out.data();
    const std::size_t n = t.size();
    switch (fn) {
        case MapFn::Relu:
            for (std::size_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
            break;
        case MapFn::ReluGradMask:
            for (std::size_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? 1.0 : 0.0;
            break;
        case MapFn::AddScalar:
            for (std::size_t i = 0; i < n; ++i) o[i] = in[i] + arg;
            break;
        case MapFn::MulScalar:
            for (std::size_t i = 0; i < n; ++i) o[i] = in[i] * arg;
            break;
        case MapFn::Exp:
            for (std::size_t i = 0; i < n; ++i) o[i] = std::exp(in[i]);
            break;
    }
    return out;
}

}  // namespace mtut
