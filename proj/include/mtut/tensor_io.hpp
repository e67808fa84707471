#pragma once

#include <filesystem>

#include "mtut/tensor.hpp"

namespace mtut {

// On-disk container: magic "MTUT", u32 version = 1, u32 ndim, u32
// extents[ndim], u32 dtype, then the raw little-endian payload in
// row-major order. Dataset files use Float32; checkpoints use Float64 so
// that resuming reproduces an unbroken run exactly.
enum class TensorDtype : std::uint32_t { Float32 = 1, Float64 = 2 };

void write_tensor_file(const std::filesystem::path& path, const Tensor& t,
                       TensorDtype dtype = TensorDtype::Float32);
Tensor read_tensor_file(const std::filesystem::path& path);

}  // namespace mtut
