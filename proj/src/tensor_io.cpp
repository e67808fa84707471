#include "mtut/tensor_io.hpp"

#include <cstring>
#include <fstream>
#include <limits>

namespace mtut {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'U', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::filesystem::path& path, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw IoError("tensor file " + path.string() + ": truncated reading " + what);
    }
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const Tensor& t, TensorDtype dtype) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("tensor file " + path.string() + ": cannot open for writing");
    }
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.dims()) {
        if (d > std::numeric_limits<std::uint32_t>::max()) {
            throw IoError("tensor file " + path.string() + ": extent overflows u32");
        }
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    put_u32(out, static_cast<std::uint32_t>(dtype));
    if (dtype == TensorDtype::Float32) {
        std::vector<float> buf(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) {
        throw IoError("tensor file " + path.string() + ": write failed");
    }
}

Tensor read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("tensor file " + path.string() + ": cannot open");
    }
    char magic[4];
    if (!in.read(magic, 4)) {
        throw IoError("tensor file " + path.string() + ": truncated reading magic");
    }
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("tensor file " + path.string() + ": bad magic");
    }
    const std::uint32_t version = get_u32(in, path, "version");
    if (version != kVersion) {
        throw IoError("tensor file " + path.string() + ": unsupported version " +
                      std::to_string(version));
    }
    const std::uint32_t ndim = get_u32(in, path, "ndim");
    if (ndim == 0 || ndim > 8) {
        throw IoError("tensor file " + path.string() + ": implausible ndim " +
                      std::to_string(ndim));
    }
    std::vector<std::size_t> dims(ndim);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        dims[i] = get_u32(in, path, "extent");
        if (dims[i] == 0 || count > (std::size_t{1} << 40) / dims[i]) {
            throw IoError("tensor file " + path.string() + ": extent overflow");
        }
        count *= dims[i];
    }
    const std::uint32_t dtype = get_u32(in, path, "dtype");
    std::vector<double> data(count);
    if (dtype == static_cast<std::uint32_t>(TensorDtype::Float32)) {
        std::vector<float> buf(count);
        if (!in.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(count * sizeof(float)))) {
            throw IoError("tensor file " + path.string() + ": truncated payload");
        }
        for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<double>(buf[i]);
    } else if (dtype == static_cast<std::uint32_t>(TensorDtype::Float64)) {
        if (!in.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(count * sizeof(double)))) {
            throw IoError("tensor file " + path.string() + ": truncated payload");
        }
    } else {
        throw IoError("tensor file " + path.string() + ": unknown dtype " + std::to_string(dtype));
    }
    return Tensor(std::move(dims), std::move(data));
}

}  // namespace mtut
