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

// Shared fixtures and brute-force oracles for the test suites.

#include "mrf/acquisition.hpp"

#include <filesystem>
#include <random>

namespace mrf::testing {

inline CVec random_cvec(std::size_t n, std::mt19937_64& rng)
{
    std::normal_distribution<double> g;
    CVec v(n);
    for (auto& z : v)
        z = {g(rng), g(rng)};
    return v;
}

inline TSMI random_tsmi(std::size_t s, std::size_t n, std::mt19937_64& rng)
{
    TSMI x(s, n, n);
    x.data = random_cvec(s * n * n, rng);
    return x;
}

inline KSpaceData random_kspace(const AcquisitionOperator& op, std::mt19937_64& rng)
{
    KSpaceData y = op.make_kspace();
    y.data = random_cvec(y.data.size(), rng);
    return y;
}

/// Random L x s matrix with orthonormal columns.
inline Subspace random_subspace(std::size_t length, std::size_t s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    CMatrix a(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(s));
    std::normal_distribution<double> g;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        a(i) = {g(rng), g(rng)};
    Eigen::HouseholderQR<CMatrix> qr(a);
    Subspace sub;
    sub.basis = qr.householderQ() * CMatrix::Identity(a.rows(), a.cols());
    sub.singular_values = RVec(s, 1.0);
    return sub;
}

/// Rank-1 "subspace" with a flat basis vector (every frame weighted 1/sqrt(L)), or exactly 1 when L = 1.
inline Subspace flat_subspace(std::size_t length)
{
    Subspace sub;
    sub.basis = CMatrix::Constant(static_cast<Eigen::Index>(length), 1, 1.0 / std::sqrt(static_cast<double>(length)));
    sub.singular_values = {1.0};
    return sub;
}

/// Direct O(D d) evaluation of y(k) = sum_r x(r) exp(-2 pi i k.r / N), r centred.
inline CVec direct_dft(std::span<const cplx> img, std::size_t n, std::span<const double> kxy)
{
    const std::size_t npts = kxy.size() / 2;
    CVec y(npts);
    const double h = static_cast<double>(n / 2);
    for (std::size_t p = 0; p < npts; ++p) {
        cplx acc{};
        for (std::size_t iy = 0; iy < n; ++iy)
            for (std::size_t ix = 0; ix < n; ++ix) {
                const double ph = -2.0 * kPi * (kxy[2 * p] * (static_cast<double>(ix) - h) + kxy[2 * p + 1] * (static_cast<double>(iy) - h)) /
                                  static_cast<double>(n);
                acc += img[iy * n + ix] * cplx{std::cos(ph), std::sin(ph)};
            }
        y[p] = acc;
    }
    return y;
}

/// Adjoint mismatch |<Hx, y> - <x, H^H y>| / (||Hx|| ||y||).
inline double dot_test(const AcquisitionOperator& op, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    const TSMI x = random_tsmi(op.rank(), op.matrix(), rng);
    const KSpaceData y = random_kspace(op, rng);
    const KSpaceData hx = op.forward(x);
    const TSMI hy = op.adjoint(y);
    return std::abs(dot(hx.data, y.data) - dot(x.data, hy.data)) / (norm(hx.data) * norm(y.data));
}

struct DefaultModel {
    SequenceParams seq;
    DictionaryGrid dict;
    Subspace sub;
    MatchTable full_table;
    MatchTable table;
};

/// Default grid, default L = 1000 schedule, s = 10; built once per process.
inline const DefaultModel& default_model()
{
    static const DefaultModel m = [] {
        DefaultModel d;
        d.seq = default_sequence();
        d.dict = build_dictionary(d.seq, GridSpec::default_grid());
        d.sub = compute_subspace(d.dict, 10);
        d.full_table = make_match_table(d.dict);
        d.table = make_match_table(d.dict, d.sub);
        return d;
    }();
    return m;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("mrf_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

} // namespace mrf::testing
