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

// Proximal gradient descent on ||y - Hx||^2 with pluggable proximal maps.

#include "mrf/acquisition.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>

namespace mrf {

enum class ProxKind { identity, dictionary, neural };

inline std::string to_string(ProxKind k)
{
    switch (k) {
    case ProxKind::identity: return "identity";
    case ProxKind::dictionary: return "dictionary";
    case ProxKind::neural: return "neural";
    }
    return "?";
}

struct ProxResult {
    TSMI x;
    QMaps maps;
};

class ProxOperator {
public:
    virtual ~ProxOperator() = default;
    virtual ProxResult apply(const TSMI& g) const = 0;
};

/// Leaves the iterate alone; maps are empty (mask all zero).
class IdentityProx final : public ProxOperator {
public:
    ProxResult apply(const TSMI& g) const override { return {g, QMaps(g.height, g.width)}; }
};

/// Per voxel: match, then replace by PD times the compressed unit-PD atom.
inline ProxResult dictionary_prox(const TSMI& g, const MatchTable& table)
{
    if (table.domain != g.domain)
        throw ShapeError("dictionary prox: TSMI and dictionary are in different temporal representations");
    const MatchResult r = match_atoms(g, table);
    ProxResult out{TSMI(g.channels, g.height, g.width, g.domain), QMaps(g.height, g.width)};
    for (std::size_t v = 0; v < g.voxels(); ++v) {
        const std::size_t j = r.atom[v];
        const double pd = r.correlation[v] / table.pd_scale[j];
        out.maps.t1_ms[v] = table.atom_t1_ms[j];
        out.maps.t2_ms[v] = table.atom_t2_ms[j];
        out.maps.pd[v] = pd;
        out.maps.mask[v] = 1;
        // PD * (pd_scale * unit atom) == correlation * unit atom
        const auto row = table.atoms.row(static_cast<Eigen::Index>(j));
        for (std::size_t c = 0; c < g.channels; ++c)
            out.x.at(c, v) = r.correlation[v] * row(static_cast<Eigen::Index>(c));
    }
    return out;
}

class DictionaryProx final : public ProxOperator {
public:
    explicit DictionaryProx(const MatchTable& table) : table_(&table) {}
    ProxResult apply(const TSMI& g) const override { return dictionary_prox(g, *table_); }

private:
    const MatchTable* table_;
};

struct PgdConfig {
    std::size_t iterations = 5;
    RVec step_sizes;  ///< one per iteration
    bool record_trace = true;
    bool record_maps = false;

    void validate() const
    {
        if (iterations < 1)
            throw ParameterError("pgd: iterations must be >= 1");
        if (step_sizes.size() != iterations)
            throw ParameterError("pgd: need " + std::to_string(iterations) + " step sizes, got " + std::to_string(step_sizes.size()));
        for (double a : step_sizes)
            if (!(a > 0.0) || !std::isfinite(a))
                throw ParameterError("pgd: step sizes must be positive and finite");
    }
};

inline PgdConfig constant_step_config(std::size_t iterations, double alpha)
{
    return {iterations, RVec(iterations, alpha), true, false};
}

struct ReconTrace {
    RVec fidelity;                ///< ||y - H x^(t)||^2 for t = 0..T
    std::vector<QMaps> snapshots; ///< maps after each prox, when requested
};

struct PgdResult {
    QMaps maps;
    TSMI x;
    ReconTrace trace;
};

inline constexpr double kDivergenceFactor = 1e6;

inline PgdResult pgd_reconstruct(const KSpaceData& y, const AcquisitionOperator& op, const ProxOperator& prox, const PgdConfig& cfg)
{
    cfg.validate();
    PgdResult res;
    res.x = backproject(op, y);
    res.maps = QMaps(op.matrix(), op.matrix());
    KSpaceData hx = op.forward(res.x);
    auto residual_norm2 = [&] {
        double acc = 0.0;
        for (std::size_t i = 0; i < hx.data.size(); ++i)
            acc += std::norm(y.data[i] - hx.data[i]);
        return acc;
    };
    const double f0 = residual_norm2();
    if (cfg.record_trace)
        res.trace.fidelity.push_back(f0);
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
        KSpaceData r = y;
        for (std::size_t i = 0; i < r.data.size(); ++i)
            r.data[i] -= hx.data[i];
        const TSMI grad = op.adjoint(r);
        TSMI g = res.x;
        const double a = cfg.step_sizes[t];
        for (std::size_t i = 0; i < g.data.size(); ++i)
            g.data[i] += a * grad.data[i];
        ProxResult p = prox.apply(g);
        if (!all_finite(p.x.data))
            throw DivergenceError("pgd: non-finite iterate at iteration " + std::to_string(t + 1));
        res.x = std::move(p.x);
        res.maps = std::move(p.maps);
        hx = op.forward(res.x);
        const double f = residual_norm2();
        if (!std::isfinite(f) || (f0 > 0.0 && f > kDivergenceFactor * f0))
            throw DivergenceError("pgd: data fidelity diverged at iteration " + std::to_string(t + 1));
        if (cfg.record_trace)
            res.trace.fidelity.push_back(f);
        if (cfg.record_maps)
            res.trace.snapshots.push_back(res.maps);
    }
    return res;
}

/// Density-compensated back-projection followed by one dictionary match.
inline QMaps backprojection_baseline(const KSpaceData& y, const AcquisitionOperator& op, const MatchTable& table)
{
    return dictionary_match(backproject(op, y), table);
}

inline void write_trace_csv(const std::filesystem::path& path, const ReconTrace& trace)
{
    std::ofstream os(path);
    if (!os)
        throw Error("cannot write " + path.string());
    os << "iteration,fidelity\n" << std::setprecision(17);
    for (std::size_t t = 0; t < trace.fidelity.size(); ++t)
        os << t << ',' << trace.fidelity[t] << '\n';
}

} // namespace mrf
