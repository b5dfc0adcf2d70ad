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
#include "mrf/tensor_file.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

using namespace mrf;
using mrf::testing::TempDir;

namespace {

std::vector<unsigned char> slurp(const std::filesystem::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

template <typename T>
std::vector<T> random_values(std::size_t n, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    std::vector<T> v(n);
    for (auto& x : v) {
        if constexpr (std::is_floating_point_v<T>)
            x = static_cast<T>(u(rng));
        else
            x = T(static_cast<typename T::value_type>(u(rng)), static_cast<typename T::value_type>(u(rng)));
    }
    return v;
}

template <typename T>
void expect_round_trip(const TempDir& dir, const Dims& dims, std::mt19937_64& rng)
{
    const std::uint64_t n = std::accumulate(dims.begin(), dims.end(), std::uint64_t{1}, std::multiplies<>{});
    const auto data = random_values<T>(n, rng);
    const auto path = dir / "t.mrfb";
    write_tensor<T>(path, data, dims);
    Dims back_dims;
    const auto back = read_tensor<T>(path, &back_dims);
    EXPECT_EQ(back_dims, dims);
    ASSERT_EQ(back.size(), data.size());
    EXPECT_EQ(0, std::memcmp(back.data(), data.data(), data.size() * sizeof(T)));
    // Rewriting what was read yields the same file bytes.
    const auto bytes = slurp(path);
    write_tensor<T>(path, back, back_dims);
    EXPECT_EQ(slurp(path), bytes);
}

} // namespace

TEST(TensorFile, HeaderLayoutIsExact)
{
    TempDir dir("tf");
    const auto path = dir / "h.mrfb";
    write_tensor<double>(path, std::vector<double>{1.0, -2.0, 0.5}, {3});
    const auto bytes = slurp(path);
    const std::vector<unsigned char> header{'M', 'R', 'F', 'B', '1', 0, 2, 1, 3, 0, 0, 0, 0, 0, 0, 0};
    ASSERT_EQ(bytes.size(), header.size() + 3 * 8);
    EXPECT_TRUE(std::equal(header.begin(), header.end(), bytes.begin()));
    double second = 0.0;
    std::memcpy(&second, bytes.data() + header.size() + 8, 8);
    EXPECT_EQ(second, -2.0);
}

TEST(TensorFile, ComplexIsInterleaved)
{
    TempDir dir("tf");
    const auto path = dir / "c.mrfb";
    write_tensor<std::complex<float>>(path, std::vector<std::complex<float>>{{1.5f, -3.0f}}, {1, 1});
    const auto bytes = slurp(path);
    ASSERT_EQ(bytes.size(), 6u + 2u + 16u + 8u);
    EXPECT_EQ(bytes[6], 3);
    EXPECT_EQ(bytes[7], 2);
    float re = 0, im = 0;
    std::memcpy(&re, bytes.data() + 24, 4);
    std::memcpy(&im, bytes.data() + 28, 4);
    EXPECT_EQ(re, 1.5f);
    EXPECT_EQ(im, -3.0f);
}

TEST(TensorFile, RoundTripIsBitExactForEveryDtype)
{
    TempDir dir("tf");
    std::mt19937_64 rng(11);
    for (const Dims& dims : {Dims{}, Dims{0}, Dims{7}, Dims{3, 0, 2}, Dims{4, 5, 6}, Dims{1, 1, 1, 1, 9}}) {
        expect_round_trip<float>(dir, dims, rng);
        expect_round_trip<double>(dir, dims, rng);
        expect_round_trip<std::complex<float>>(dir, dims, rng);
        expect_round_trip<std::complex<double>>(dir, dims, rng);
    }
}

TEST(TensorFile, SpecialValuesSurvive)
{
    TempDir dir("tf");
    const std::vector<double> v{0.0, -0.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::denorm_min(),
                                std::numeric_limits<double>::quiet_NaN()};
    write_tensor<double>(dir / "s.mrfb", v, {v.size()});
    const auto back = read_tensor<double>(dir / "s.mrfb");
    EXPECT_EQ(0, std::memcmp(back.data(), v.data(), v.size() * sizeof(double)));
}

TEST(TensorFile, RejectsMalformedFiles)
{
    TempDir dir("tf");
    write_tensor<double>(dir / "ok.mrfb", std::vector<double>{1, 2, 3, 4}, {2, 2});
    const auto good = slurp(dir / "ok.mrfb");
    auto put = [&](const std::string& name, std::vector<unsigned char> bytes) {
        std::ofstream os(dir / name, std::ios::binary);
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        return dir / name;
    };

    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(read_tensor_blob(put("m.mrfb", bad_magic)), FormatError);

    auto bad_code = good;
    bad_code[6] = 9;
    EXPECT_THROW(read_tensor_blob(put("d.mrfb", bad_code)), FormatError);

    auto truncated = good;
    truncated.pop_back();
    EXPECT_THROW(read_tensor_blob(put("t.mrfb", truncated)), FormatError);

    auto trailing = good;
    trailing.push_back(0);
    EXPECT_THROW(read_tensor_blob(put("x.mrfb", trailing)), FormatError);

    EXPECT_THROW(read_tensor<float>(dir / "ok.mrfb"), FormatError);
    EXPECT_THROW(read_tensor_blob(dir / "missing.mrfb"), FormatError);
}

TEST(TensorFile, WriteChecksElementCount)
{
    TempDir dir("tf");
    EXPECT_THROW(write_tensor<double>(dir / "w.mrfb", std::vector<double>{1, 2, 3}, {2, 2}), ShapeError);
}
