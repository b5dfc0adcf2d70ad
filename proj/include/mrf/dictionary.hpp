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

// MRF dictionary over a (T1, T2) grid, its SVD temporal subspace, and
// exhaustive dictionary matching.

#include "mrf/epg.hpp"
#include "mrf/types.hpp"

#include <Eigen/Dense>

#include <sstream>

namespace mrf {

using CMatrix = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic>;

struct GridSpec {
    RVec t1_values_ms;
    RVec t2_values_ms;

    /// 60 log-spaced T1 values over [100, 4000] ms and 50 log-spaced T2 values over [10, 600] ms.
    static GridSpec default_grid() { return {logspace(100.0, 4000.0, 60), logspace(10.0, 600.0, 50)}; }
};

struct DictionaryGrid {
    RVec t1_values_ms;
    RVec t2_values_ms;
    RVec atom_t1_ms;
    RVec atom_t2_ms;
    RVec atom_norm;  ///< norm of each atom before normalisation (unit PD)
    CMatrix atoms;   ///< n_atoms x L, unit-norm rows

    std::size_t size() const { return static_cast<std::size_t>(atoms.rows()); }
    std::size_t length() const { return static_cast<std::size_t>(atoms.cols()); }
};

/// Orthonormal temporal basis (L x s) with the full singular spectrum of the dictionary.
struct Subspace {
    CMatrix basis;
    RVec singular_values;

    std::size_t rank() const { return static_cast<std::size_t>(basis.cols()); }
    std::size_t length() const { return static_cast<std::size_t>(basis.rows()); }
};

/// Number of (t1, t2) pairs with t2 <= t1.
inline std::size_t count_valid_pairs(const GridSpec& g)
{
    std::size_t n = 0;
    for (double t1 : g.t1_values_ms)
        for (double t2 : g.t2_values_ms)
            n += (t2 <= t1) ? 1 : 0;
    return n;
}

inline DictionaryGrid build_dictionary(const SequenceParams& seq, const GridSpec& grid, const EpgOptions& opt = {})
{
    seq.validate();
    if (grid.t1_values_ms.empty() || grid.t2_values_ms.empty())
        throw ParameterError("grid: T1 and T2 value lists must be non-empty");
    DictionaryGrid d;
    d.t1_values_ms = grid.t1_values_ms;
    d.t2_values_ms = grid.t2_values_ms;
    std::sort(d.t1_values_ms.begin(), d.t1_values_ms.end());
    std::sort(d.t2_values_ms.begin(), d.t2_values_ms.end());
    for (double t1 : d.t1_values_ms)
        for (double t2 : d.t2_values_ms)
            if (t2 <= t1) {
                d.atom_t1_ms.push_back(t1);
                d.atom_t2_ms.push_back(t2);
            }
    if (d.atom_t1_ms.empty())
        throw ParameterError("grid: empty dictionary, every (t1, t2) pair has t2 > t1");

    const std::size_t n = d.atom_t1_ms.size();
    const std::size_t len = seq.length();
    d.atoms.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(len));
    d.atom_norm.assign(n, 0.0);
    std::vector<Fingerprint> raw(n);
    parallel_for(n, [&](std::size_t j) { raw[j] = simulate_epg(seq, {d.atom_t1_ms[j], d.atom_t2_ms[j], 1.0}, opt); });
    for (std::size_t j = 0; j < n; ++j) {
        const double nrm = norm(raw[j]);
        if (!(nrm > 0.0)) {
            std::ostringstream os;
            os << "dictionary: degenerate zero-norm atom at (t1=" << d.atom_t1_ms[j] << " ms, t2=" << d.atom_t2_ms[j] << " ms)";
            throw ParameterError(os.str());
        }
        d.atom_norm[j] = nrm;
        for (std::size_t t = 0; t < len; ++t)
            d.atoms(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(t)) = raw[j][t] / nrm;
    }
    return d;
}

namespace detail {
// Rotates each column so its largest-magnitude entry is real and positive.
inline void canonicalise_column_phase(CMatrix& m)
{
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        Eigen::Index best = 0;
        double mag = -1.0;
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            if (std::abs(m(r, c)) > mag) {
                mag = std::abs(m(r, c));
                best = r;
            }
        if (mag > 0.0)
            m.col(c) *= std::conj(m(best, c)) / mag;
    }
}
} // namespace detail

/// Top-s right singular vectors of the atom matrix. The spectrum comes from
/// the Hermitian eigendecomposition of the L x L Gram matrix.
inline Subspace compute_subspace(const DictionaryGrid& dict, std::size_t s)
{
    const std::size_t len = dict.length();
    const std::size_t full = std::min(len, dict.size());
    if (s < 1 || s > full)
        throw ParameterError("subspace: s must lie in [1, " + std::to_string(full) + "], got " + std::to_string(s));
    const CMatrix gram = dict.atoms.adjoint() * dict.atoms;
    Eigen::SelfAdjointEigenSolver<CMatrix> es(gram);
    if (es.info() != Eigen::Success)
        throw Error("subspace: eigendecomposition failed");
    const Eigen::Index l = static_cast<Eigen::Index>(len);
    Subspace sub;
    sub.basis.resize(l, static_cast<Eigen::Index>(s));
    for (std::size_t c = 0; c < s; ++c)
        sub.basis.col(static_cast<Eigen::Index>(c)) = es.eigenvectors().col(l - 1 - static_cast<Eigen::Index>(c));
    detail::canonicalise_column_phase(sub.basis);
    sub.singular_values.resize(full);
    for (std::size_t i = 0; i < full; ++i)
        sub.singular_values[i] = std::sqrt(std::max(0.0, es.eigenvalues()(l - 1 - static_cast<Eigen::Index>(i))));
    return sub;
}

/// Per-voxel basis^H x. The TSMI must carry L channels.
inline TSMI compress(const TSMI& full, const Subspace& sub)
{
    if (full.channels != sub.length())
        throw ShapeError("compress: TSMI has " + std::to_string(full.channels) + " channels, subspace expects " + std::to_string(sub.length()));
    TSMI out(sub.rank(), full.height, full.width, TemporalDomain::subspace);
    const auto d = static_cast<Eigen::Index>(full.voxels());
    Eigen::Map<const CMatrix> x(full.data.data(), d, static_cast<Eigen::Index>(full.channels));
    Eigen::Map<CMatrix> z(out.data.data(), d, static_cast<Eigen::Index>(out.channels));
    z.noalias() = x * sub.basis.conjugate();
    return out;
}

/// Per-voxel basis z. The TSMI must carry s channels.
inline TSMI decompress(const TSMI& comp, const Subspace& sub)
{
    if (comp.channels != sub.rank())
        throw ShapeError("decompress: TSMI has " + std::to_string(comp.channels) + " channels, subspace rank is " + std::to_string(sub.rank()));
    TSMI out(sub.length(), comp.height, comp.width, TemporalDomain::full);
    const auto d = static_cast<Eigen::Index>(comp.voxels());
    Eigen::Map<const CMatrix> z(comp.data.data(), d, static_cast<Eigen::Index>(comp.channels));
    Eigen::Map<CMatrix> x(out.data.data(), d, static_cast<Eigen::Index>(out.channels));
    x.noalias() = z * sub.basis.transpose();
    return out;
}

/// Atoms in the representation the data will be matched in.
struct MatchTable {
    TemporalDomain domain = TemporalDomain::full;
    CMatrix atoms;  ///< n_atoms x channels, unit-norm rows
    RVec pd_scale;  ///< divides |<x, atom>| to give PD
    RVec atom_t1_ms;
    RVec atom_t2_ms;

    std::size_t size() const { return static_cast<std::size_t>(atoms.rows()); }
    std::size_t channels() const { return static_cast<std::size_t>(atoms.cols()); }
};

inline MatchTable make_match_table(const DictionaryGrid& dict)
{
    if (dict.size() == 0)
        throw ParameterError("match: empty dictionary");
    return {TemporalDomain::full, dict.atoms, dict.atom_norm, dict.atom_t1_ms, dict.atom_t2_ms};
}

/// Compressed atoms basis^H b_j, renormalised; PD scale folds in both norms.
inline MatchTable make_match_table(const DictionaryGrid& dict, const Subspace& sub)
{
    if (dict.size() == 0)
        throw ParameterError("match: empty dictionary");
    if (dict.length() != sub.length())
        throw ShapeError("match: dictionary length " + std::to_string(dict.length()) + " != subspace length " + std::to_string(sub.length()));
    MatchTable t{TemporalDomain::subspace, dict.atoms * sub.basis.conjugate(), RVec(dict.size()), dict.atom_t1_ms, dict.atom_t2_ms};
    for (Eigen::Index j = 0; j < t.atoms.rows(); ++j) {
        const double cn = t.atoms.row(j).norm();
        if (!(cn > 0.0)) {
            std::ostringstream os;
            os << "match: atom (t1=" << dict.atom_t1_ms[j] << ", t2=" << dict.atom_t2_ms[j] << ") vanishes in the subspace";
            throw ParameterError(os.str());
        }
        t.atoms.row(j) /= cn;
        t.pd_scale[static_cast<std::size_t>(j)] = dict.atom_norm[static_cast<std::size_t>(j)] * cn;
    }
    return t;
}

struct MatchResult {
    std::vector<std::size_t> atom;  ///< best atom per voxel
    RVec correlation;               ///< |<x_v, atom>| of the winner
    std::vector<cplx> inner;        ///< complex <x_v, atom> of the winner
};

/// Exhaustive argmax_j |<x_v, a_j>| per voxel, lowest index wins ties.
inline MatchResult match_atoms(const TSMI& x, const MatchTable& table)
{
    if (table.size() == 0)
        throw ParameterError("match: empty dictionary");
    if (x.channels != table.channels())
        throw ShapeError("match: TSMI has " + std::to_string(x.channels) + " channels, dictionary has " + std::to_string(table.channels()));
    const std::size_t nvox = x.voxels();
    const std::size_t nch = x.channels;
    MatchResult res{std::vector<std::size_t>(nvox, 0), RVec(nvox, 0.0), std::vector<cplx>(nvox)};
    constexpr std::size_t block = 128;
    const std::size_t nblocks = (nvox + block - 1) / block;
    const CMatrix at = table.atoms.transpose();
    parallel_for(nblocks, [&](std::size_t b) {
        const std::size_t v0 = b * block;
        const std::size_t nb = std::min(block, nvox - v0);
        CMatrix xb(static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(nch));
        for (std::size_t c = 0; c < nch; ++c)
            for (std::size_t i = 0; i < nb; ++i)
                xb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = std::conj(x.at(c, v0 + i));
        const CMatrix corr = xb * at;
        for (std::size_t i = 0; i < nb; ++i) {
            std::size_t best = 0;
            double best_mag = -1.0;
            for (Eigen::Index j = 0; j < corr.cols(); ++j) {
                const double m = std::norm(corr(static_cast<Eigen::Index>(i), j));
                if (m > best_mag) {
                    best_mag = m;
                    best = static_cast<std::size_t>(j);
                }
            }
            res.atom[v0 + i] = best;
            res.inner[v0 + i] = corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(best));
            res.correlation[v0 + i] = std::sqrt(best_mag);
        }
    });
    return res;
}

/// Dictionary matching with PD estimation. The returned mask covers the full field of view.
inline QMaps dictionary_match(const TSMI& x, const MatchTable& table)
{
    if (x.domain != table.domain)
        throw ShapeError("match: TSMI and dictionary are in different temporal representations");
    const MatchResult r = match_atoms(x, table);
    QMaps m(x.height, x.width);
    for (std::size_t v = 0; v < x.voxels(); ++v) {
        const std::size_t j = r.atom[v];
        m.t1_ms[v] = table.atom_t1_ms[j];
        m.t2_ms[v] = table.atom_t2_ms[j];
        m.pd[v] = r.correlation[v] / table.pd_scale[j];
        m.mask[v] = 1;
    }
    return m;
}

} // namespace mrf
