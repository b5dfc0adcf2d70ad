/*
 * mrfunroll
 *
 * Copyright 2026 The mrfunroll Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Binary tensor container (.mrfb).
//
//   offset 0  : magic "MRFB1\0" (6 bytes)
//   offset 6  : dtype code, uint8 (f32=1, f64=2, c64=3, c128=4)
//   offset 7  : ndim, uint8
//   offset 8  : ndim x uint64 little-endian dims
//   then      : row-major payload, little-endian, complex interleaved (re, im)

#include "mrf/core.hpp"

#include <array>
#include <bit>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <type_traits>

namespace mrf {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, c64 = 3, c128 = 4 };

inline std::size_t dtype_size(DType t)
{
    switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::c64: return 8;
    case DType::c128: return 16;
    }
    throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(t)));
}

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> { static constexpr DType value = DType::f32; };
template <>
struct dtype_of<double> { static constexpr DType value = DType::f64; };
template <>
struct dtype_of<std::complex<float>> { static constexpr DType value = DType::c64; };
template <>
struct dtype_of<std::complex<double>> { static constexpr DType value = DType::c128; };

template <typename T>
concept TensorElement = requires { dtype_of<T>::value; };

using Dims = std::vector<std::uint64_t>;

inline constexpr std::array<char, 6> kTensorMagic{'M', 'R', 'F', 'B', '1', '\0'};

/// A tensor read back from disk with its element type still erased.
struct TensorBlob {
    DType dtype{DType::f64};
    Dims dims;
    std::vector<unsigned char> payload;

    std::uint64_t count() const
    {
        return std::accumulate(dims.begin(), dims.end(), std::uint64_t{1}, std::multiplies<>{});
    }
};

namespace detail {

inline void swap_scalar_bytes(unsigned char* p, std::size_t bytes, std::size_t scalar)
{
    for (std::size_t off = 0; off + scalar <= bytes; off += scalar)
        std::reverse(p + off, p + off + scalar);
}

inline void to_little_endian(unsigned char* p, std::size_t bytes, std::size_t scalar)
{
    if constexpr (std::endian::native == std::endian::big)
        swap_scalar_bytes(p, bytes, scalar);
}

inline std::size_t scalar_width(DType t) { return (t == DType::f32 || t == DType::c64) ? 4 : 8; }

} // namespace detail

inline void write_tensor_blob(const std::filesystem::path& path, const TensorBlob& blob)
{
    if (blob.dims.size() > 255)
        throw FormatError("tensor rank above 255 is not representable");
    if (blob.payload.size() != blob.count() * dtype_size(blob.dtype))
        throw ShapeError("tensor payload size does not match dims");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("cannot open " + path.string() + " for writing");
    os.write(kTensorMagic.data(), kTensorMagic.size());
    const unsigned char code = static_cast<unsigned char>(blob.dtype);
    const unsigned char ndim = static_cast<unsigned char>(blob.dims.size());
    os.put(static_cast<char>(code));
    os.put(static_cast<char>(ndim));
    for (std::uint64_t d : blob.dims) {
        unsigned char b[8];
        std::memcpy(b, &d, 8);
        detail::to_little_endian(b, 8, 8);
        os.write(reinterpret_cast<const char*>(b), 8);
    }
    if constexpr (std::endian::native == std::endian::big) {
        auto copy = blob.payload;
        detail::swap_scalar_bytes(copy.data(), copy.size(), detail::scalar_width(blob.dtype));
        os.write(reinterpret_cast<const char*>(copy.data()), static_cast<std::streamsize>(copy.size()));
    } else {
        os.write(reinterpret_cast<const char*>(blob.payload.data()), static_cast<std::streamsize>(blob.payload.size()));
    }
    if (!os)
        throw Error("short write to " + path.string());
}

inline TensorBlob read_tensor_blob(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw FormatError("cannot open tensor file " + path.string());
    std::array<char, 6> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kTensorMagic)
        throw FormatError(path.string() + ": bad magic, not an MRFB1 tensor file");
    const int code = is.get();
    const int ndim = is.get();
    if (!is)
        throw FormatError(path.string() + ": truncated header");
    if (code < 1 || code > 4)
        throw FormatError(path.string() + ": unknown dtype code " + std::to_string(code));
    TensorBlob blob;
    blob.dtype = static_cast<DType>(code);
    blob.dims.resize(static_cast<std::size_t>(ndim));
    for (auto& d : blob.dims) {
        unsigned char b[8];
        is.read(reinterpret_cast<char*>(b), 8);
        if (!is)
            throw FormatError(path.string() + ": truncated dims");
        detail::to_little_endian(b, 8, 8);
        std::memcpy(&d, b, 8);
    }
    const std::uint64_t bytes = blob.count() * dtype_size(blob.dtype);
    blob.payload.resize(bytes);
    if (bytes > 0)
        is.read(reinterpret_cast<char*>(blob.payload.data()), static_cast<std::streamsize>(bytes));
    if (!is)
        throw FormatError(path.string() + ": payload shorter than dims imply");
    if (is.peek() != std::char_traits<char>::eof())
        throw FormatError(path.string() + ": trailing bytes after payload");
    detail::to_little_endian(blob.payload.data(), blob.payload.size(), detail::scalar_width(blob.dtype));
    return blob;
}

template <TensorElement T>
void write_tensor(const std::filesystem::path& path, std::span<const T> data, const Dims& dims)
{
    TensorBlob blob;
    blob.dtype = dtype_of<T>::value;
    blob.dims = dims;
    if (data.size() != blob.count())
        throw ShapeError("write_tensor: " + std::to_string(data.size()) + " elements but dims hold " + std::to_string(blob.count()));
    blob.payload.resize(data.size_bytes());
    if (!data.empty())
        std::memcpy(blob.payload.data(), data.data(), data.size_bytes());
    write_tensor_blob(path, blob);
}

template <TensorElement T>
void write_tensor(const std::filesystem::path& path, const std::vector<T>& data, const Dims& dims)
{
    write_tensor(path, std::span<const T>(data), dims);
}

/// Reads a tensor of exactly element type T; dims are returned through out_dims.
template <TensorElement T>
std::vector<T> read_tensor(const std::filesystem::path& path, Dims* out_dims = nullptr)
{
    TensorBlob blob = read_tensor_blob(path);
    if (blob.dtype != dtype_of<T>::value)
        throw FormatError(path.string() + ": dtype code " + std::to_string(static_cast<int>(blob.dtype)) + " does not match requested " +
                          std::to_string(static_cast<int>(dtype_of<T>::value)));
    std::vector<T> out(blob.count());
    if (!out.empty())
        std::memcpy(out.data(), blob.payload.data(), blob.payload.size());
    if (out_dims)
        *out_dims = std::move(blob.dims);
    return out;
}

} // namespace mrf
