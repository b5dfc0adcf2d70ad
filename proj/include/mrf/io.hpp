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

// On-disk layouts of maps, k-space, dictionaries and subspaces, all as
// TensorFiles.

#include "mrf/dictionary.hpp"
#include "mrf/acquisition.hpp"
#include "mrf/tensor_file.hpp"

#include <filesystem>

namespace mrf {

namespace fs = std::filesystem;

/// t1.mrfb, t2.mrfb, pd.mrfb and mask.mrfb, each f64 (height, width).
inline void save_maps(const fs::path& dir, const QMaps& m)
{
    fs::create_directories(dir);
    const Dims dims{m.height, m.width};
    write_tensor(dir / "t1.mrfb", m.t1_ms, dims);
    write_tensor(dir / "t2.mrfb", m.t2_ms, dims);
    write_tensor(dir / "pd.mrfb", m.pd, dims);
    RVec mask(m.mask.begin(), m.mask.end());
    write_tensor(dir / "mask.mrfb", mask, dims);
}

inline QMaps load_maps(const fs::path& dir)
{
    Dims d1, d2, d3, dm;
    RVec t1 = read_tensor<double>(dir / "t1.mrfb", &d1);
    RVec t2 = read_tensor<double>(dir / "t2.mrfb", &d2);
    RVec pd = read_tensor<double>(dir / "pd.mrfb", &d3);
    RVec mask = read_tensor<double>(dir / "mask.mrfb", &dm);
    if (d1.size() != 2 || d1 != d2 || d1 != d3 || d1 != dm)
        throw FormatError(dir.string() + ": map files disagree on their 2-D shape");
    QMaps m(d1[0], d1[1]);
    m.t1_ms = std::move(t1);
    m.t2_ms = std::move(t2);
    m.pd = std::move(pd);
    for (std::size_t v = 0; v < mask.size(); ++v)
        m.mask[v] = mask[v] != 0.0 ? 1 : 0;
    return m;
}

/// c128 (frames, coils, points).
inline void save_kspace(const fs::path& path, const KSpaceData& y) { write_tensor(path, y.data, {y.frames, y.coils, y.points}); }

inline KSpaceData load_kspace(const fs::path& path)
{
    Dims d;
    CVec data = read_tensor<cplx>(path, &d);
    if (d.size() != 3)
        throw FormatError(path.string() + ": k-space needs 3 dims, found " + std::to_string(d.size()));
    KSpaceData y(d[0], d[1], d[2]);
    y.data = std::move(data);
    return y;
}

/// Column-major Eigen matrices are stored row-major as (rows, cols).
inline void save_cmatrix(const fs::path& path, const CMatrix& m)
{
    const Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m;
    write_tensor(path, std::span<const cplx>(r.data(), static_cast<std::size_t>(r.size())),
                 {static_cast<std::uint64_t>(r.rows()), static_cast<std::uint64_t>(r.cols())});
}

inline CMatrix load_cmatrix(const fs::path& path)
{
    Dims d;
    CVec v = read_tensor<cplx>(path, &d);
    if (d.size() != 2)
        throw FormatError(path.string() + ": matrix needs 2 dims");
    CMatrix m(static_cast<Eigen::Index>(d[0]), static_cast<Eigen::Index>(d[1]));
    for (std::size_t i = 0; i < d[0]; ++i)
        for (std::size_t j = 0; j < d[1]; ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[i * d[1] + j];
    return m;
}

/// dict.mrfb (atoms), dict_params.mrfb (t1, t2, norm per atom), grid_t1.mrfb, grid_t2.mrfb.
inline void save_dictionary(const fs::path& dir, const DictionaryGrid& d)
{
    fs::create_directories(dir);
    save_cmatrix(dir / "dict.mrfb", d.atoms);
    RVec params(3 * d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        params[3 * i] = d.atom_t1_ms[i];
        params[3 * i + 1] = d.atom_t2_ms[i];
        params[3 * i + 2] = d.atom_norm[i];
    }
    write_tensor(dir / "dict_params.mrfb", params, {d.size(), 3});
    write_tensor(dir / "grid_t1.mrfb", d.t1_values_ms, {d.t1_values_ms.size()});
    write_tensor(dir / "grid_t2.mrfb", d.t2_values_ms, {d.t2_values_ms.size()});
}

inline DictionaryGrid load_dictionary(const fs::path& dir)
{
    DictionaryGrid d;
    d.atoms = load_cmatrix(dir / "dict.mrfb");
    Dims pd;
    const RVec params = read_tensor<double>(dir / "dict_params.mrfb", &pd);
    if (pd.size() != 2 || pd[1] != 3 || pd[0] != d.size())
        throw FormatError(dir.string() + ": dict_params.mrfb does not match dict.mrfb");
    for (std::size_t i = 0; i < d.size(); ++i) {
        d.atom_t1_ms.push_back(params[3 * i]);
        d.atom_t2_ms.push_back(params[3 * i + 1]);
        d.atom_norm.push_back(params[3 * i + 2]);
    }
    d.t1_values_ms = read_tensor<double>(dir / "grid_t1.mrfb");
    d.t2_values_ms = read_tensor<double>(dir / "grid_t2.mrfb");
    return d;
}

/// subspace.mrfb (basis, L x s) and singular_values.mrfb.
inline void save_subspace(const fs::path& dir, const Subspace& s)
{
    fs::create_directories(dir);
    save_cmatrix(dir / "subspace.mrfb", s.basis);
    write_tensor(dir / "singular_values.mrfb", s.singular_values, {s.singular_values.size()});
}

inline Subspace load_subspace(const fs::path& dir)
{
    Subspace s;
    s.basis = load_cmatrix(dir / "subspace.mrfb");
    s.singular_values = read_tensor<double>(dir / "singular_values.mrfb");
    return s;
}

} // namespace mrf
