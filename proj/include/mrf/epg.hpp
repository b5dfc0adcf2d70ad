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

// MRF-FISP signal simulation with the Extended Phase Graph recursion, plus a
// brute-force isochromat simulator used to validate it.

#include "mrf/core.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace mrf {

struct SequenceParams {
    RVec flip_angles_rad;
    double tr_ms = 10.0;
    double te_ms = 1.8;
    double ti_ms = 18.0;
    bool invert_first = true;

    std::size_t length() const { return flip_angles_rad.size(); }

    void validate() const
    {
        if (flip_angles_rad.empty())
            throw ParameterError("sequence: need at least one flip angle");
        if (!(te_ms > 0.0) || !(tr_ms > te_ms) || !std::isfinite(tr_ms))
            throw ParameterError("sequence: require tr_ms > te_ms > 0");
        if (!(ti_ms >= 0.0) || !std::isfinite(ti_ms))
            throw ParameterError("sequence: ti_ms must be >= 0");
        for (std::size_t i = 0; i < flip_angles_rad.size(); ++i) {
            const double a = flip_angles_rad[i];
            if (!(a >= 0.0 && a <= kPi))
                throw ParameterError("sequence: flip angle " + std::to_string(i) + " outside [0, pi]");
        }
    }
};

struct TissueParams {
    double t1_ms = 1000.0;
    double t2_ms = 100.0;
    double pd = 1.0;

    void validate() const
    {
        if (!(t1_ms > 0.0) || !(t2_ms > 0.0) || !std::isfinite(t1_ms))
            throw ParameterError("tissue: T1 and T2 must be positive");
        if (t2_ms > t1_ms)
            throw ParameterError("tissue: T2 must not exceed T1");
        if (!(pd >= 0.0) || !std::isfinite(pd))
            throw ParameterError("tissue: PD must be >= 0");
    }
};

/// Configuration states indexed by dephasing order k in [0, k_max).
struct EpgState {
    CVec f_plus;
    CVec f_minus;
    CVec z;

    explicit EpgState(std::size_t k_max) : f_plus(k_max), f_minus(k_max), z(k_max) { z[0] = 1.0; }

    std::size_t orders() const { return z.size(); }
};

using Fingerprint = CVec;

struct EpgOptions {
    std::size_t k_max = 50;
};

/// 10 deg + 50 deg * |sin(i * pi / 200)|, i = 0..L-1.
inline RVec sinusoidal_flip_schedule(std::size_t length)
{
    RVec out(length);
    for (std::size_t i = 0; i < length; ++i) {
        const double deg = 10.0 + 50.0 * std::abs(std::sin(static_cast<double>(i) * kPi / 200.0));
        out[i] = deg * kPi / 180.0;
    }
    return out;
}

inline SequenceParams default_sequence(std::size_t length = 1000)
{
    SequenceParams seq;
    seq.flip_angles_rad = sinusoidal_flip_schedule(length);
    return seq;
}

/// One angle in degrees per line; blank lines and '#' comments are skipped.
inline RVec load_flip_schedule_csv(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw ParameterError("cannot open flip schedule " + path.string());
    RVec out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r,");
        if (first == std::string::npos || line[first] == '#')
            continue;
        const auto last = line.find_last_not_of(" \t\r,");
        const std::string tok = line.substr(first, last - first + 1);
        std::size_t used = 0;
        double deg = 0.0;
        try {
            deg = std::stod(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size() || !std::isfinite(deg))
            throw ParameterError(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + tok + "'");
        out.push_back(deg * kPi / 180.0);
    }
    if (out.empty())
        throw ParameterError(path.string() + ": no flip angles");
    return out;
}

namespace detail {

inline void epg_rf(EpgState& s, double alpha)
{
    const double c2 = std::pow(std::cos(alpha / 2.0), 2);
    const double s2 = std::pow(std::sin(alpha / 2.0), 2);
    const double sa = std::sin(alpha);
    const double ca = std::cos(alpha);
    const auto times_i = [](cplx v) { return cplx{-v.imag(), v.real()}; };
    for (std::size_t k = 0; k < s.orders(); ++k) {
        const cplx fp = s.f_plus[k], fm = s.f_minus[k], zz = s.z[k];
        const cplx iz = times_i(zz) * sa;
        s.f_plus[k] = c2 * fp + s2 * fm - iz;
        s.f_minus[k] = s2 * fp + c2 * fm + iz;
        s.z[k] = times_i(fm - fp) * (0.5 * sa) + ca * zz;
    }
}

inline void epg_relax(EpgState& s, double t_ms, double t1_ms, double t2_ms)
{
    const double e1 = std::exp(-t_ms / t1_ms);
    const double e2 = std::exp(-t_ms / t2_ms);
    for (std::size_t k = 0; k < s.orders(); ++k) {
        s.f_plus[k] *= e2;
        s.f_minus[k] *= e2;
        s.z[k] *= e1;
    }
    s.z[0] += 1.0 - e1;
}

// Unit dephasing: F+ moves up one order, F- moves down; the top order is dropped.
inline void epg_shift(EpgState& s)
{
    std::copy_backward(s.f_plus.begin(), s.f_plus.end() - 1, s.f_plus.end());
    std::copy(s.f_minus.begin() + 1, s.f_minus.end(), s.f_minus.begin());
    s.f_minus.back() = 0.0;
    s.f_plus[0] = std::conj(s.f_minus[0]);
}

} // namespace detail

inline Fingerprint simulate_epg(const SequenceParams& seq, const TissueParams& tissue, const EpgOptions& opt = {})
{
    seq.validate();
    tissue.validate();
    if (opt.k_max < 2)
        throw ParameterError("epg: k_max must be >= 2");
    EpgState st(opt.k_max);
    if (seq.invert_first) {
        detail::epg_rf(st, kPi);
        detail::epg_relax(st, seq.ti_ms, tissue.t1_ms, tissue.t2_ms);
    }
    Fingerprint out(seq.length());
    for (std::size_t i = 0; i < seq.length(); ++i) {
        detail::epg_rf(st, seq.flip_angles_rad[i]);
        detail::epg_relax(st, seq.te_ms, tissue.t1_ms, tissue.t2_ms);
        const cplx sig = st.f_plus[0];
        if (!std::isfinite(sig.real()) || !std::isfinite(sig.imag()))
            throw DivergenceError("epg: non-finite state at frame " + std::to_string(i));
        out[i] = tissue.pd * sig;
        detail::epg_relax(st, seq.tr_ms - seq.te_ms, tissue.t1_ms, tissue.t2_ms);
        detail::epg_shift(st);
    }
    if (!all_finite(st.f_plus) || !all_finite(st.f_minus) || !all_finite(st.z))
        throw DivergenceError("epg: non-finite configuration state");
    return out;
}

/// Full Bloch simulation of n_spins isochromats whose per-TR dephasing angles
/// are spread uniformly over [0, 2pi); returns the complex mean transverse
/// magnetisation at each echo.
inline Fingerprint simulate_isochromat_oracle(const SequenceParams& seq, const TissueParams& tissue, std::size_t n_spins)
{
    seq.validate();
    tissue.validate();
    if (n_spins < 2)
        throw ParameterError("isochromat oracle: n_spins must be >= 2");
    std::vector<double> mx(n_spins, 0.0), my(n_spins, 0.0), mz(n_spins, 1.0);
    std::vector<double> cth(n_spins), sth(n_spins);
    for (std::size_t n = 0; n < n_spins; ++n) {
        const double th = 2.0 * kPi * static_cast<double>(n) / static_cast<double>(n_spins);
        cth[n] = std::cos(th);
        sth[n] = std::sin(th);
    }
    auto rotate_x = [&](double a) {
        const double c = std::cos(a), s = std::sin(a);
        for (std::size_t n = 0; n < n_spins; ++n) {
            const double y = my[n], z = mz[n];
            my[n] = c * y - s * z;
            mz[n] = s * y + c * z;
        }
    };
    auto relax = [&](double t) {
        const double e1 = std::exp(-t / tissue.t1_ms), e2 = std::exp(-t / tissue.t2_ms);
        for (std::size_t n = 0; n < n_spins; ++n) {
            mx[n] *= e2;
            my[n] *= e2;
            mz[n] = mz[n] * e1 + (1.0 - e1);
        }
    };
    if (seq.invert_first) {
        rotate_x(kPi);
        relax(seq.ti_ms);
    }
    Fingerprint out(seq.length());
    for (std::size_t i = 0; i < seq.length(); ++i) {
        rotate_x(seq.flip_angles_rad[i]);
        relax(seq.te_ms);
        double sx = 0.0, sy = 0.0;
        for (std::size_t n = 0; n < n_spins; ++n) {
            sx += mx[n];
            sy += my[n];
        }
        out[i] = tissue.pd * cplx{sx, sy} / static_cast<double>(n_spins);
        relax(seq.tr_ms - seq.te_ms);
        for (std::size_t n = 0; n < n_spins; ++n) {
            const double x = mx[n], y = my[n];
            mx[n] = cth[n] * x - sth[n] * y;
            my[n] = sth[n] * x + cth[n] * y;
        }
    }
    return out;
}

} // namespace mrf
