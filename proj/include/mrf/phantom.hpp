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

// Synthetic quantitative phantoms, measurement simulation and map metrics.

#include "mrf/acquisition.hpp"

#include "json.hpp"

#include <map>

namespace mrf {

/// Ellipse in normalised field-of-view coordinates ([-1, 1] on both axes,
/// x to the right, y downwards).
struct Region {
    std::string name;
    double cx = 0.0;
    double cy = 0.0;
    double a = 0.5;  ///< semi-axis along x before rotation
    double b = 0.5;  ///< semi-axis along y before rotation
    double angle_deg = 0.0;
    TissueParams tissue;

    bool contains(double x, double y) const
    {
        const double th = angle_deg * kPi / 180.0;
        const double dx = x - cx, dy = y - cy;
        const double u = std::cos(th) * dx + std::sin(th) * dy;
        const double v = -std::sin(th) * dx + std::cos(th) * dy;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
};

struct Phantom {
    QMaps truth;
    std::vector<Region> regions;
};

/// Eight ellipses with brain-like tissue values.
inline std::vector<Region> default_phantom_regions()
{
    return {
        {"gray_matter", 0.0, 0.0, 0.72, 0.90, 0.0, {1300.0, 110.0, 0.80}},
        {"white_matter", 0.0, 0.0, 0.60, 0.78, 0.0, {800.0, 80.0, 0.70}},
        {"csf_left", -0.22, -0.10, 0.10, 0.28, 18.0, {3000.0, 300.0, 1.00}},
        {"csf_right", 0.22, -0.10, 0.10, 0.28, -18.0, {3000.0, 300.0, 1.00}},
        {"deep_gray", 0.0, 0.38, 0.22, 0.14, 0.0, {1200.0, 100.0, 0.82}},
        {"lesion", -0.30, 0.40, 0.12, 0.10, 30.0, {1600.0, 150.0, 0.90}},
        {"short_t1", 0.34, 0.36, 0.09, 0.12, 0.0, {500.0, 50.0, 0.75}},
        {"long_t1", 0.0, -0.55, 0.16, 0.08, 0.0, {2000.0, 200.0, 0.95}},
    };
}

inline Phantom rasterize_phantom(std::vector<Region> regions, std::size_t matrix)
{
    if (matrix < 8)
        throw ParameterError("phantom: matrix must be >= 8");
    for (const auto& r : regions) {
        r.tissue.validate();
        if (!(r.a > 0.0) || !(r.b > 0.0))
            throw ParameterError("phantom: region '" + r.name + "' needs positive semi-axes");
    }
    Phantom ph{QMaps(matrix, matrix), std::move(regions)};
    for (std::size_t iy = 0; iy < matrix; ++iy)
        for (std::size_t ix = 0; ix < matrix; ++ix) {
            const double x = 2.0 * (static_cast<double>(ix) + 0.5) / static_cast<double>(matrix) - 1.0;
            const double y = 2.0 * (static_cast<double>(iy) + 0.5) / static_cast<double>(matrix) - 1.0;
            const std::size_t v = iy * matrix + ix;
            for (const auto& r : ph.regions)
                if (r.contains(x, y)) {
                    ph.truth.t1_ms[v] = r.tissue.t1_ms;
                    ph.truth.t2_ms[v] = r.tissue.t2_ms;
                    ph.truth.pd[v] = r.tissue.pd;
                    ph.truth.mask[v] = 1;
                }
        }
    return ph;
}

namespace detail {
inline double nearest_log(const RVec& values, double x, double upper)
{
    double best = 0.0, dist = std::numeric_limits<double>::infinity();
    for (double v : values) {
        if (v > upper)
            continue;
        const double d = std::abs(std::log(v) - std::log(x));
        if (d < dist) {
            dist = d;
            best = v;
        }
    }
    if (!(best > 0.0))
        throw ParameterError("phantom: no grid value available for snapping");
    return best;
}
} // namespace detail

/// Quantises every region's (T1, T2) to the nearest grid values (log distance), keeping T2 <= T1.
inline std::vector<Region> snap_regions_to_grid(std::vector<Region> regions, const GridSpec& grid)
{
    for (auto& r : regions) {
        r.tissue.t1_ms = detail::nearest_log(grid.t1_values_ms, r.tissue.t1_ms, std::numeric_limits<double>::infinity());
        r.tissue.t2_ms = detail::nearest_log(grid.t2_values_ms, r.tissue.t2_ms, r.tissue.t1_ms);
    }
    return regions;
}

inline Region region_from_json(const nlohmann::json& j)
{
    static const std::vector<std::string> allowed{"name", "cx", "cy", "a", "b", "angle_deg", "t1_ms", "t2_ms", "pd"};
    if (!j.is_object())
        throw ParameterError("phantom: region must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            throw ParameterError("phantom: unknown region key '" + k + "'");
    try {
        Region r;
        r.name = j.value("name", std::string{"region"});
        r.cx = j.value("cx", 0.0);
        r.cy = j.value("cy", 0.0);
        r.a = j.at("a").get<double>();
        r.b = j.at("b").get<double>();
        r.angle_deg = j.value("angle_deg", 0.0);
        r.tissue.t1_ms = j.at("t1_ms").get<double>();
        r.tissue.t2_ms = j.at("t2_ms").get<double>();
        r.tissue.pd = j.value("pd", 1.0);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("phantom: malformed region: ") + e.what());
    }
}

inline nlohmann::json region_to_json(const Region& r)
{
    return {{"name", r.name}, {"cx", r.cx}, {"cy", r.cy}, {"a", r.a}, {"b", r.b}, {"angle_deg", r.angle_deg},
            {"t1_ms", r.tissue.t1_ms}, {"t2_ms", r.tissue.t2_ms}, {"pd", r.tissue.pd}};
}

struct PhantomSpec {
    std::string preset = "default";  ///< "default", "empty" or "custom" (use regions)
    std::vector<Region> regions;
    bool snap_to_grid = false;
};

inline Phantom make_phantom(const PhantomSpec& spec, std::size_t matrix, const GridSpec& grid = GridSpec::default_grid())
{
    std::vector<Region> regions;
    if (spec.preset == "default")
        regions = default_phantom_regions();
    else if (spec.preset == "empty")
        regions = {};
    else if (spec.preset == "custom")
        regions = spec.regions;
    else
        throw ParameterError("phantom: unknown preset '" + spec.preset + "'");
    if (spec.snap_to_grid)
        regions = snap_regions_to_grid(std::move(regions), grid);
    return rasterize_phantom(std::move(regions), matrix);
}

/// Random brain-like phantom: an outer tissue ellipse holding a handful of
/// random inner ellipses with random tissue values.
inline Phantom random_phantom(std::size_t matrix, std::uint64_t seed, std::size_t inner = 6)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto tissue = [&] {
        const double t1 = std::exp(std::log(300.0) + u(rng) * (std::log(3500.0) - std::log(300.0)));
        const double t2_hi = std::min(0.25 * t1, 400.0);
        const double t2 = std::exp(std::log(20.0) + u(rng) * (std::log(t2_hi) - std::log(20.0)));
        return TissueParams{t1, t2, 0.5 + 0.5 * u(rng)};
    };
    std::vector<Region> regions;
    regions.push_back({"outer", 0.1 * (u(rng) - 0.5), 0.1 * (u(rng) - 0.5), 0.65 + 0.2 * u(rng), 0.75 + 0.15 * u(rng), 20.0 * (u(rng) - 0.5), tissue()});
    for (std::size_t i = 0; i < inner; ++i) {
        const double r = 0.55 * std::sqrt(u(rng)), th = 2.0 * kPi * u(rng);
        regions.push_back({"inner" + std::to_string(i), r * std::cos(th), r * std::sin(th), 0.06 + 0.25 * u(rng), 0.06 + 0.25 * u(rng),
                           180.0 * u(rng), tissue()});
    }
    return rasterize_phantom(std::move(regions), matrix);
}

/// The default preset with every region moved, resized, turned and given
/// perturbed tissue values. Training sets built from these keep the default
/// phantom itself out of sample while staying in its anatomical family.
inline Phantom jittered_phantom(std::size_t matrix, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Region> regions = default_phantom_regions();
    for (auto& r : regions) {
        r.cx += 0.06 * u(rng);
        r.cy += 0.06 * u(rng);
        r.a *= 1.0 + 0.15 * u(rng);
        r.b *= 1.0 + 0.15 * u(rng);
        r.angle_deg += 15.0 * u(rng);
        r.tissue.t1_ms = std::clamp(r.tissue.t1_ms * std::exp(0.3 * u(rng)), 150.0, 3800.0);
        r.tissue.t2_ms = std::clamp(r.tissue.t2_ms * std::exp(0.3 * u(rng)), 15.0, std::min(500.0, 0.5 * r.tissue.t1_ms));
        r.tissue.pd = std::clamp(r.tissue.pd + 0.1 * u(rng), 0.3, 1.0);
    }
    return rasterize_phantom(std::move(regions), matrix);
}

/// Noise-free subspace TSMI of a phantom: per voxel PD * basis^H B(T1, T2).
inline TSMI phantom_tsmi(const QMaps& truth, const SequenceParams& seq, const Subspace& sub, const EpgOptions& epg = {})
{
    if (seq.length() != sub.length())
        throw ShapeError("phantom: sequence length " + std::to_string(seq.length()) + " != subspace length " + std::to_string(sub.length()));
    std::map<std::pair<double, double>, CVec> cache;
    for (std::size_t v = 0; v < truth.voxels(); ++v)
        if (truth.mask[v] && truth.pd[v] != 0.0)
            cache.try_emplace({truth.t1_ms[v], truth.t2_ms[v]});
    std::vector<std::pair<const std::pair<double, double>, CVec>*> work;
    for (auto& kv : cache)
        work.push_back(&kv);
    parallel_for(work.size(), [&](std::size_t i) {
        const auto [t1, t2] = work[i]->first;
        const Fingerprint f = simulate_epg(seq, {t1, t2, 1.0}, epg);
        Eigen::Map<const Eigen::Matrix<cplx, Eigen::Dynamic, 1>> fv(f.data(), static_cast<Eigen::Index>(f.size()));
        const Eigen::Matrix<cplx, Eigen::Dynamic, 1> c = sub.basis.adjoint() * fv;
        work[i]->second.assign(c.data(), c.data() + c.size());
    });
    TSMI x(sub.rank(), truth.height, truth.width, TemporalDomain::subspace);
    for (std::size_t v = 0; v < truth.voxels(); ++v) {
        if (!truth.mask[v] || truth.pd[v] == 0.0)
            continue;
        const CVec& c = cache.at({truth.t1_ms[v], truth.t2_ms[v]});
        for (std::size_t j = 0; j < sub.rank(); ++j)
            x.at(j, v) = truth.pd[v] * c[j];
    }
    return x;
}

struct NoiseSpec {
    double sigma = 0.0;  ///< E|xi|^2 = sigma^2 per complex sample
    std::uint64_t seed = 0;
};

inline void add_noise(KSpaceData& y, const NoiseSpec& noise)
{
    if (!(noise.sigma >= 0.0))
        throw ParameterError("noise: sigma must be >= 0");
    if (noise.sigma == 0.0)
        return;
    std::mt19937_64 rng(noise.seed);
    std::normal_distribution<double> g(0.0, noise.sigma / std::sqrt(2.0));
    for (auto& z : y.data) {
        const double re = g(rng);
        const double im = g(rng);
        z += cplx{re, im};
    }
}

/// y = H(compress(EPG fingerprints)) + xi
inline KSpaceData simulate_measurements(const Phantom& ph, const SequenceParams& seq, const Subspace& sub, const AcquisitionOperator& op,
                                        const NoiseSpec& noise, const EpgOptions& epg = {})
{
    const TSMI x = phantom_tsmi(ph.truth, seq, sub, epg);
    KSpaceData y = op.forward(x);
    add_noise(y, noise);
    return y;
}

namespace detail {
inline void check_metric_inputs(const QMaps& est, const QMaps& truth)
{
    if (est.height != truth.height || est.width != truth.width)
        throw ShapeError("metrics: map shapes differ");
}
} // namespace detail

/// ||est - truth|| / ||truth|| over the truth mask.
inline double nrmse(const QMaps& est, const QMaps& truth, Property which)
{
    detail::check_metric_inputs(est, truth);
    const RVec& e = property_map(est, which);
    const RVec& t = property_map(truth, which);
    double num = 0.0, den = 0.0;
    for (std::size_t v = 0; v < truth.voxels(); ++v)
        if (truth.mask[v]) {
            num += (e[v] - t[v]) * (e[v] - t[v]);
            den += t[v] * t[v];
        }
    if (!(den > 0.0))
        throw ParameterError("metrics: NRMSE undefined, " + property_name(which) + " truth is zero inside the mask");
    return std::sqrt(num / den);
}

/// Mean |est - truth| over the truth mask, in native units.
inline double mae(const QMaps& est, const QMaps& truth, Property which)
{
    detail::check_metric_inputs(est, truth);
    const RVec& e = property_map(est, which);
    const RVec& t = property_map(truth, which);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < truth.voxels(); ++v)
        if (truth.mask[v]) {
            acc += std::abs(e[v] - t[v]);
            ++n;
        }
    if (n == 0)
        throw ParameterError("metrics: MAE undefined on an empty mask");
    return acc / static_cast<double>(n);
}

} // namespace mrf
