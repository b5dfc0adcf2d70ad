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

// Multi-coil, per-frame non-uniform Fourier acquisition of a subspace TSMI:
//
//   y[t, c, p] = sum_j basis[t, j] * NUFFT_{t,p}( coil_c * x_j )
//
// and its exact adjoint.

#include "mrf/dictionary.hpp"
#include "mrf/nufft.hpp"
#include "mrf/types.hpp"

#include <memory>
#include <numeric>
#include <optional>
#include <random>

namespace mrf {

enum class TrajectoryKind { golden_radial, cartesian_full, cartesian_lines, custom };

inline std::string to_string(TrajectoryKind k)
{
    switch (k) {
    case TrajectoryKind::golden_radial: return "golden_radial";
    case TrajectoryKind::cartesian_full: return "cartesian_full";
    case TrajectoryKind::cartesian_lines: return "cartesian_lines";
    case TrajectoryKind::custom: return "custom";
    }
    return "custom";
}

inline TrajectoryKind trajectory_kind_from_string(const std::string& s)
{
    if (s == "golden_radial")
        return TrajectoryKind::golden_radial;
    if (s == "cartesian_full")
        return TrajectoryKind::cartesian_full;
    if (s == "cartesian_lines")
        return TrajectoryKind::cartesian_lines;
    if (s == "custom")
        return TrajectoryKind::custom;
    throw ParameterError("unknown trajectory kind '" + s + "'");
}

/// Golden angle for radial spokes, 180 deg / golden ratio (about 111.246 deg).
inline constexpr double kGoldenAngleDeg = 180.0 * 0.6180339887498949;

/// Per-frame k-space sample coordinates in cycles/FOV.
struct Trajectory {
    TrajectoryKind kind = TrajectoryKind::custom;
    std::size_t matrix = 0;
    std::size_t frames = 0;
    std::size_t points_per_frame = 0;
    std::size_t acceleration = 1;
    RVec kxy;  ///< frames x points x (kx, ky)

    double kx(std::size_t t, std::size_t p) const { return kxy[2 * (t * points_per_frame + p)]; }
    double ky(std::size_t t, std::size_t p) const { return kxy[2 * (t * points_per_frame + p) + 1]; }

    std::span<const double> frame(std::size_t t) const { return {kxy.data() + 2 * t * points_per_frame, 2 * points_per_frame}; }

    void validate() const
    {
        if (frames == 0 || points_per_frame == 0)
            throw ParameterError("trajectory: needs at least one frame and one point per frame");
        if (kxy.size() != 2 * frames * points_per_frame)
            throw ShapeError("trajectory: coordinate count does not match frames x points");
        const double half = static_cast<double>(matrix) / 2.0;
        for (double k : kxy)
            if (!std::isfinite(k) || std::abs(k) > half + 1e-9)
                throw ParameterError("trajectory: point outside the Nyquist band |k| <= " + std::to_string(half));
    }
};

/// `d` is ignored for cartesian_full, which always samples matrix^2 points.
inline Trajectory make_trajectory(TrajectoryKind kind, std::size_t matrix, std::size_t d, std::size_t frames)
{
    if (matrix < 2)
        throw ParameterError("trajectory: matrix must be >= 2");
    if (frames < 1 || (d < 1 && kind != TrajectoryKind::cartesian_full))
        throw ParameterError("trajectory: need d >= 1 and frames >= 1");
    Trajectory tr;
    tr.kind = kind;
    tr.matrix = matrix;
    tr.frames = frames;
    const double n = static_cast<double>(matrix);
    switch (kind) {
    case TrajectoryKind::golden_radial: {
        tr.points_per_frame = d;
        tr.kxy.resize(2 * frames * d);
        for (std::size_t t = 0; t < frames; ++t) {
            const double ang = std::fmod(static_cast<double>(t) * kGoldenAngleDeg, 360.0) * kPi / 180.0;
            const double c = std::cos(ang), s = std::sin(ang);
            for (std::size_t i = 0; i < d; ++i) {
                const double k = n * (static_cast<double>(i) - static_cast<double>(d) / 2.0) / static_cast<double>(d);
                tr.kxy[2 * (t * d + i)] = k * c;
                tr.kxy[2 * (t * d + i) + 1] = k * s;
            }
        }
        break;
    }
    case TrajectoryKind::cartesian_full: {
        tr.points_per_frame = matrix * matrix;
        tr.kxy.resize(2 * frames * matrix * matrix);
        const long h = static_cast<long>(matrix / 2);
        for (std::size_t t = 0; t < frames; ++t)
            for (std::size_t iy = 0; iy < matrix; ++iy)
                for (std::size_t ix = 0; ix < matrix; ++ix) {
                    const std::size_t p = t * matrix * matrix + iy * matrix + ix;
                    tr.kxy[2 * p] = static_cast<double>(static_cast<long>(ix) - h);
                    tr.kxy[2 * p + 1] = static_cast<double>(static_cast<long>(iy) - h);
                }
        break;
    }
    case TrajectoryKind::cartesian_lines: {
        if (matrix % d != 0)
            throw ParameterError("trajectory: cartesian_lines needs d dividing the matrix size");
        tr.points_per_frame = d;
        tr.kxy.resize(2 * frames * d);
        // Line order steps through ky with a stride coprime to the matrix.
        std::size_t stride = static_cast<std::size_t>(std::lround(n * 0.6180339887498949));
        while (std::gcd(stride, matrix) != 1)
            ++stride;
        const long h = static_cast<long>(matrix / 2);
        const std::size_t step = matrix / d;
        for (std::size_t t = 0; t < frames; ++t) {
            const long ky = static_cast<long>((t * stride) % matrix) - h;
            for (std::size_t i = 0; i < d; ++i) {
                tr.kxy[2 * (t * d + i)] = static_cast<double>(static_cast<long>(i * step) - h);
                tr.kxy[2 * (t * d + i) + 1] = static_cast<double>(ky);
            }
        }
        break;
    }
    case TrajectoryKind::custom:
        throw ParameterError("trajectory: 'custom' trajectories are supplied, not generated");
    }
    return tr;
}

inline std::size_t accelerated_frames(std::size_t frames, std::size_t r)
{
    if (r < 1)
        throw ParameterError("acceleration: r must be >= 1");
    const std::size_t lr = frames / r;
    if (lr == 0)
        throw ParameterError("acceleration: r=" + std::to_string(r) + " leaves no frames out of " + std::to_string(frames));
    return lr;
}

/// Keeps the first floor(L / r) frames.
inline Trajectory truncate_acceleration(const Trajectory& tr, std::size_t r)
{
    const std::size_t lr = accelerated_frames(tr.frames, r);
    Trajectory out = tr;
    out.frames = lr;
    out.acceleration = tr.acceleration * r;
    out.kxy.resize(2 * lr * tr.points_per_frame);
    return out;
}

/// Complex receive sensitivities, coils x N x N.
struct CoilMaps {
    std::size_t coils = 0;
    std::size_t matrix = 0;
    CVec data;

    std::span<const cplx> coil(std::size_t c) const { return {data.data() + c * matrix * matrix, matrix * matrix}; }

    static CoilMaps ones(std::size_t coils, std::size_t matrix)
    {
        return {coils, matrix, CVec(coils * matrix * matrix, cplx{1.0, 0.0})};
    }

    static CoilMaps zeros(std::size_t coils, std::size_t matrix) { return {coils, matrix, CVec(coils * matrix * matrix)}; }
};

/// Smooth complex Gaussian sensitivities centred on a ring outside the field
/// of view, each with a linear phase ramp, normalised to unit root-sum-of-squares
/// at every pixel.
inline CoilMaps simulate_coil_maps(std::size_t coils, std::size_t matrix)
{
    if (coils < 1 || matrix < 2)
        throw ParameterError("coil maps: need coils >= 1 and matrix >= 2");
    CoilMaps m = CoilMaps::zeros(coils, matrix);
    const double ring = 1.2, width = 0.9;
    for (std::size_t c = 0; c < coils; ++c) {
        const double th = 2.0 * kPi * static_cast<double>(c) / static_cast<double>(coils);
        const double cx = ring * std::cos(th), cy = ring * std::sin(th);
        for (std::size_t iy = 0; iy < matrix; ++iy)
            for (std::size_t ix = 0; ix < matrix; ++ix) {
                const double x = 2.0 * (static_cast<double>(ix) + 0.5) / static_cast<double>(matrix) - 1.0;
                const double y = 2.0 * (static_cast<double>(iy) + 0.5) / static_cast<double>(matrix) - 1.0;
                const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                const double mag = std::exp(-r2 / (2.0 * width * width));
                const double phase = 0.5 * kPi * (std::cos(th) * x + std::sin(th) * y) + th;
                m.data[(c * matrix + iy) * matrix + ix] = std::polar(mag, phase);
            }
    }
    const std::size_t d = matrix * matrix;
    for (std::size_t v = 0; v < d; ++v) {
        double rss = 0.0;
        for (std::size_t c = 0; c < coils; ++c)
            rss += std::norm(m.data[c * d + v]);
        rss = std::sqrt(rss);
        for (std::size_t c = 0; c < coils; ++c)
            m.data[c * d + v] /= rss;
    }
    return m;
}

/// Measurements, frames x coils x points.
struct KSpaceData {
    std::size_t frames = 0;
    std::size_t coils = 0;
    std::size_t points = 0;
    CVec data;

    KSpaceData() = default;
    KSpaceData(std::size_t f, std::size_t c, std::size_t p) : frames(f), coils(c), points(p), data(f * c * p) {}

    cplx& at(std::size_t t, std::size_t c, std::size_t p) { return data[(t * coils + c) * points + p]; }
    const cplx& at(std::size_t t, std::size_t c, std::size_t p) const { return data[(t * coils + c) * points + p]; }

    bool same_shape(const KSpaceData& o) const { return frames == o.frames && coils == o.coils && points == o.points; }
};

inline KSpaceData truncate_acceleration(const KSpaceData& y, std::size_t r)
{
    const std::size_t lr = accelerated_frames(y.frames, r);
    KSpaceData out(lr, y.coils, y.points);
    std::copy_n(y.data.begin(), out.data.size(), out.data.begin());
    return out;
}

/// The composed operator H: subspace TSMI -> multi-coil k-space.
class AcquisitionOperator {
public:
    AcquisitionOperator(CoilMaps coils, Trajectory traj, const Subspace& sub, const NufftOptions& nufft = {})
        : coils_(std::move(coils)), traj_(std::move(traj)), nufft_opt_(nufft)
    {
        traj_.validate();
        if (coils_.coils == 0 || coils_.matrix != traj_.matrix || coils_.data.size() != coils_.coils * coils_.matrix * coils_.matrix)
            throw ShapeError("acquisition: coil maps do not match the trajectory matrix");
        if (traj_.frames > sub.length())
            throw ShapeError("acquisition: trajectory has " + std::to_string(traj_.frames) + " frames but the subspace covers only " +
                             std::to_string(sub.length()));
        weights_ = sub.basis.topRows(static_cast<Eigen::Index>(traj_.frames));
        // One sampling mode for every frame, so all frames share a spectral grid.
        if (nufft_opt_.mode == NufftOptions::Mode::automatic) {
            const bool integral = std::all_of(traj_.kxy.begin(), traj_.kxy.end(), [](double k) { return k == std::round(k); });
            nufft_opt_.mode = integral ? NufftOptions::Mode::exact_cartesian : NufftOptions::Mode::gridding;
        }
        plans_.reserve(traj_.frames);
        for (std::size_t t = 0; t < traj_.frames; ++t)
            plans_.emplace_back(traj_.matrix, traj_.frame(t), nufft_opt_);
        dcf_ = make_density_compensation();
    }

    std::size_t matrix() const { return traj_.matrix; }
    std::size_t rank() const { return static_cast<std::size_t>(weights_.cols()); }
    std::size_t frames() const { return traj_.frames; }
    std::size_t coils() const { return coils_.coils; }
    std::size_t points() const { return traj_.points_per_frame; }
    const Trajectory& trajectory() const { return traj_; }
    const CoilMaps& coil_maps() const { return coils_; }
    const CMatrix& frame_weights() const { return weights_; }
    const RVec& density_compensation() const { return dcf_; }
    const NufftOptions& nufft_options() const { return nufft_opt_; }

    TSMI make_image() const { return TSMI(rank(), matrix(), matrix(), TemporalDomain::subspace); }
    KSpaceData make_kspace() const { return KSpaceData(frames(), coils(), points()); }

    KSpaceData forward(const TSMI& x) const
    {
        check_image(x);
        const std::size_t s = rank(), nc = coils(), n2 = matrix() * matrix();
        // Each (coil, channel) image is transformed once onto a grid that
        // interleaves the channels, so a frame visits each footprint once and
        // mixes channels with its temporal weights afterwards.
        const std::size_t gsize = plans_[0].grid() * plans_[0].grid();
        std::vector<CVec> grids(nc, CVec(gsize * s));
        parallel_for(nc * s, [&](std::size_t cj) {
            const std::size_t c = cj / s, j = cj % s;
            CVec img(n2), grid(gsize);
            const auto sens = coils_.coil(c);
            const auto xj = x.channel(j);
            for (std::size_t v = 0; v < n2; ++v)
                img[v] = sens[v] * xj[v];
            plans_[0].image_to_grid(img, grid);
            cplx* dst = grids[c].data();
            for (std::size_t i = 0; i < gsize; ++i)
                dst[i * s + j] = grid[i];
        });
        KSpaceData y = make_kspace();
        parallel_for(frames(), [&](std::size_t t) {
            const NufftPlan& plan = plans_[t];
            CVec acc(s), wt(s);
            for (std::size_t j = 0; j < s; ++j)
                wt[j] = weights_(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j));
            for (std::size_t c = 0; c < nc; ++c)
                for (std::size_t p = 0; p < points(); ++p) {
                    std::fill(acc.begin(), acc.end(), cplx{});
                    plan.for_each_tap(p, [&](std::size_t idx, double w) {
                        const cplx* g = grids[c].data() + idx * s;
                        for (std::size_t j = 0; j < s; ++j)
                            acc[j] += w * g[j];
                    });
                    cplx v{};
                    for (std::size_t j = 0; j < s; ++j)
                        v += wt[j] * acc[j];
                    y.at(t, c, p) = v;
                }
        });
        return y;
    }

    TSMI adjoint(const KSpaceData& y) const
    {
        check_kspace(y);
        const std::size_t s = rank(), nc = coils(), n2 = matrix() * matrix();
        const std::size_t gsize = plans_[0].grid() * plans_[0].grid();
        // Spread every coil onto its own interleaved grid; coils never share
        // a grid, so the sums are the same for any thread count.
        std::vector<CVec> grids(nc, CVec(gsize * s));
        parallel_for(nc, [&](std::size_t c) {
            CVec wv(s);
            cplx* base = grids[c].data();
            for (std::size_t t = 0; t < frames(); ++t)
                for (std::size_t p = 0; p < points(); ++p) {
                    const cplx v = y.at(t, c, p);
                    for (std::size_t j = 0; j < s; ++j)
                        wv[j] = std::conj(weights_(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j))) * v;
                    plans_[t].for_each_tap(p, [&](std::size_t idx, double w) {
                        cplx* g = base + idx * s;
                        for (std::size_t j = 0; j < s; ++j)
                            g[j] += w * wv[j];
                    });
                }
        });
        TSMI x = make_image();
        parallel_for(s, [&](std::size_t j) {
            CVec grid(gsize), img(n2);
            auto xj = x.channel(j);
            for (std::size_t c = 0; c < nc; ++c) {
                const cplx* src = grids[c].data();
                for (std::size_t i = 0; i < gsize; ++i)
                    grid[i] = src[i * s + j];
                plans_[0].grid_to_image(grid, img);
                const auto sens = coils_.coil(c);
                for (std::size_t v = 0; v < n2; ++v)
                    xj[v] += std::conj(sens[v]) * img[v];
            }
        });
        return x;
    }

    /// H^H H x
    TSMI normal(const TSMI& x) const { return adjoint(forward(x)); }

private:
    void check_image(const TSMI& x) const
    {
        if (x.channels != rank() || x.height != matrix() || x.width != matrix())
            throw ShapeError("acquisition: TSMI shape (" + std::to_string(x.channels) + "x" + std::to_string(x.height) + "x" +
                             std::to_string(x.width) + ") does not match operator (" + std::to_string(rank()) + "x" + std::to_string(matrix()) +
                             "x" + std::to_string(matrix()) + ")");
    }

    void check_kspace(const KSpaceData& y) const
    {
        if (y.frames != frames() || y.coils != coils() || y.points != points() || y.data.size() != frames() * coils() * points())
            throw ShapeError("acquisition: k-space shape does not match the trajectory and coil count");
    }

    // Ramp |k| weights for radial sampling, uniform otherwise.
    RVec make_density_compensation() const
    {
        RVec w(frames() * points(), 1.0);
        if (traj_.kind == TrajectoryKind::golden_radial) {
            for (std::size_t t = 0; t < frames(); ++t)
                for (std::size_t p = 0; p < points(); ++p)
                    w[t * points() + p] = std::max(std::hypot(traj_.kx(t, p), traj_.ky(t, p)), 0.25);
        }
        return w;
    }

    CoilMaps coils_;
    Trajectory traj_;
    NufftOptions nufft_opt_;
    CMatrix weights_;
    std::vector<NufftPlan> plans_;
    RVec dcf_;
};

/// Re <a, b> over k-space arrays.
inline double real_dot(const KSpaceData& a, const KSpaceData& b) { return dot(a.data, b.data).real(); }

/// Data fidelity ||y - H x||^2.
inline double data_fidelity(const AcquisitionOperator& op, const TSMI& x, const KSpaceData& y)
{
    const KSpaceData hx = op.forward(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < hx.data.size(); ++i)
        acc += std::norm(y.data[i] - hx.data[i]);
    return acc;
}

/// Power iteration on H^H H from a fixed-seed Gaussian start. Returns the
/// Rayleigh quotient of the last iterate.
inline double estimate_operator_norm(const AcquisitionOperator& op, std::size_t iters, std::uint64_t seed = 0x5eed)
{
    if (iters < 1)
        throw ParameterError("operator norm: iters must be >= 1");
    TSMI v = op.make_image();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    for (auto& z : v.data)
        z = {g(rng), g(rng)};
    double lambda = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
        const double nv = norm(v.data);
        if (!(nv > 0.0))
            return 0.0;
        for (auto& z : v.data)
            z /= nv;
        TSMI w = op.normal(v);
        lambda = dot(v.data, w.data).real();
        v = std::move(w);
    }
    return std::max(lambda, 0.0);
}

/// Density-compensated back-projection c * H^H (W y), with the global scale c
/// chosen to minimise ||y - c H H^H W y||^2. Used for initialisation and the
/// non-iterative baselines only.
inline TSMI backproject(const AcquisitionOperator& op, const KSpaceData& y)
{
    KSpaceData wy = y;
    const RVec& dcf = op.density_compensation();
    for (std::size_t t = 0; t < y.frames; ++t)
        for (std::size_t c = 0; c < y.coils; ++c)
            for (std::size_t p = 0; p < y.points; ++p)
                wy.at(t, c, p) *= dcf[t * y.points + p];
    TSMI x = op.adjoint(wy);
    const KSpaceData hx = op.forward(x);
    const double den = norm2(hx.data);
    const double scale = den > 0.0 ? real_dot(hx, y) / den : 0.0;
    for (auto& z : x.data)
        z *= scale;
    return x;
}

} // namespace mrf
