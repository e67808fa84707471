#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "mtut/errors.hpp"

namespace mtut {

// Dense multi-dimensional array of doubles, row-major with the last
// dimension fastest. Operations return new tensors; existing values are
// never mutated through the public API except via data().
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims);  // zero-filled
    Tensor(std::vector<std::size_t> dims, std::vector<double> data);

    static Tensor full(std::vector<std::size_t> dims, double value);

    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    // Flat index for a rank-4 tensor laid out (d0, d1, d2, d3).
    std::size_t index4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return ((a * dims_[1] + b) * dims_[2] + c) * dims_[3] + d;
    }
    double at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data_[index4(a, b, c, d)];
    }
    double& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data_[index4(a, b, c, d)];
    }
    std::size_t index2(std::size_t r, std::size_t c) const { return r * dims_[1] + c; }
    double at2(std::size_t r, std::size_t c) const { return data_[index2(r, c)]; }
    double& at2(std::size_t r, std::size_t c) { return data_[index2(r, c)]; }

    bool sameDims(const Tensor& other) const { return dims_ == other.dims_; }
    bool allFinite() const;

  private:
    std::vector<std::size_t> dims_;
    std::vector<double> data_;
};

// splitmix64 stream. Single-owner; pass by reference, never share.
// Same seed gives the same sequence on every platform.
struct RngStream {
    std::uint64_t state = 0;

    RngStream() = default;
    explicit RngStream(std::uint64_t seed) : state(seed) {}

    std::uint64_t nextU64();
    double nextUniform();  // [0, 1)
    double nextNormal();   // standard normal, Box-Muller

    // Independent stream derived from a seed and a textual tag, so that
    // consumers (per-modality init, per-epoch shuffles, per-clip noise)
    // do not interleave draws.
    static RngStream derive(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);
};

// c[i][k] = sum_j a[i][j] * b[j][k], accumulated in ascending j per (i, k).
Tensor matmul(const Tensor& a, const Tensor& b);

enum class MapFn { Relu, ReluGradMask, AddScalar, MulScalar, Exp };

// Applies fn independently to every value; `arg` feeds AddScalar/MulScalar.
Tensor elementwise_map(const Tensor& t, MapFn fn, double arg = 0.0);

}  // namespace mtut
