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

// 2-D non-uniform Fourier sampling of an N x N image at arbitrary k-space
// points (cycles/FOV), either through Kaiser-Bessel gridding on an
// oversampled grid or, for integer coordinates, through an exact FFT lookup.
//
// Image pixel (iy, ix) sits at r = (ix - N/2, iy - N/2) and the sampled value is
//   y(k) = sum_r x(r) exp(-2 pi i k.r / N).

#include "mrf/fft.hpp"

#include <cmath>

namespace mrf {

struct NufftOptions {
    enum class Mode { automatic, gridding, exact_cartesian };
    double oversampling = 2.0;
    int kernel_width = 4;
    Mode mode = Mode::automatic;
};

/// Kaiser-Bessel window on |u| <= W/2 (oversampled-grid units) and its
/// continuous Fourier transform.
class KaiserBessel {
public:
    KaiserBessel(int width, double oversampling) : width_(width)
    {
        const double w = static_cast<double>(width);
        const double a = (w / oversampling) * (oversampling - 0.5);
        beta_ = kPi * std::sqrt(a * a - 0.8);
    }

    double beta() const { return beta_; }
    int width() const { return width_; }

    double operator()(double u) const
    {
        const double t = 2.0 * u / static_cast<double>(width_);
        if (std::abs(t) > 1.0)
            return 0.0;
        return std::cyl_bessel_i(0.0, beta_ * std::sqrt(1.0 - t * t));
    }

    /// int C(u) exp(-2 pi i u nu) du, nu in cycles per grid sample.
    double transform(double nu) const
    {
        const double w = static_cast<double>(width_);
        const double q = kPi * w * nu;
        const double arg = beta_ * beta_ - q * q;
        if (arg > 0.0) {
            const double r = std::sqrt(arg);
            return w * std::sinh(r) / r;
        }
        if (arg < 0.0) {
            const double r = std::sqrt(-arg);
            return w * std::sin(r) / r;
        }
        return w;
    }

private:
    int width_;
    double beta_ = 0.0;
};

/// Precomputed sampling plan for one fixed list of k-space points.
class NufftPlan {
public:
    static constexpr int kMaxTaps = 8;

    NufftPlan(std::size_t matrix, std::span<const double> kxy, const NufftOptions& opt = {})
        : n_(matrix), kernel_(opt.kernel_width, opt.oversampling)
    {
        if (matrix < 2)
            throw ParameterError("nufft: matrix must be >= 2");
        if (opt.oversampling < 1.0 || opt.kernel_width < 1 || opt.kernel_width + 1 > kMaxTaps)
            throw ParameterError("nufft: oversampling must be >= 1 and kernel width in [1, 7]");
        if (kxy.size() % 2 != 0)
            throw ShapeError("nufft: coordinate list must hold (kx, ky) pairs");
        const double half = static_cast<double>(matrix) / 2.0;
        bool integral = true;
        for (double k : kxy) {
            if (!std::isfinite(k) || std::abs(k) > half + 1e-9)
                throw ParameterError("nufft: trajectory point outside the Nyquist band |k| <= " + std::to_string(half));
            integral = integral && (k == std::round(k));
        }
        npts_ = kxy.size() / 2;
        exact_ = opt.mode == NufftOptions::Mode::exact_cartesian || (opt.mode == NufftOptions::Mode::automatic && integral);
        if (exact_ && !integral)
            throw ParameterError("nufft: exact Cartesian sampling needs integer k-space coordinates");
        if (exact_)
            build_exact(kxy);
        else
            build_gridding(kxy, opt.oversampling);
    }

    std::size_t matrix() const { return n_; }
    std::size_t points() const { return npts_; }
    bool exact() const { return exact_; }
    /// Side length of the spectral grid the image is transformed onto.
    std::size_t grid() const { return g_; }
    const KaiserBessel& kernel() const { return kernel_; }

    /// Image (N x N) to spectral grid (G x G). `out` must hold G*G values.
    void image_to_grid(std::span<const cplx> img, std::span<cplx> out) const
    {
        std::fill(out.begin(), out.end(), cplx{});
        const std::size_t h = n_ / 2;
        for (std::size_t iy = 0; iy < n_; ++iy) {
            const std::size_t gy = wrap(static_cast<long>(iy) - static_cast<long>(h));
            for (std::size_t ix = 0; ix < n_; ++ix) {
                const std::size_t gx = wrap(static_cast<long>(ix) - static_cast<long>(h));
                out[gy * g_ + gx] = img[iy * n_ + ix] * (apod_[iy] * apod_[ix]);
            }
        }
        Fft2d::forward(out.data(), g_, g_);
    }

    /// Adjoint of image_to_grid; the grid is consumed as scratch space.
    void grid_to_image(std::span<cplx> grid, std::span<cplx> img) const
    {
        Fft2d::backward(grid.data(), g_, g_);
        const std::size_t h = n_ / 2;
        for (std::size_t iy = 0; iy < n_; ++iy) {
            const std::size_t gy = wrap(static_cast<long>(iy) - static_cast<long>(h));
            for (std::size_t ix = 0; ix < n_; ++ix) {
                const std::size_t gx = wrap(static_cast<long>(ix) - static_cast<long>(h));
                img[iy * n_ + ix] = grid[gy * g_ + gx] * (apod_[iy] * apod_[ix]);
            }
        }
    }

    /// Interpolates the spectral grid at point p.
    cplx sample(std::span<const cplx> grid, std::size_t p) const
    {
        if (exact_)
            return grid[index_[p]];
        const Taps& t = taps_[p];
        cplx acc{};
        for (int a = 0; a < t.ny; ++a) {
            const cplx* row = grid.data() + t.iy[a] * g_;
            cplx racc{};
            for (int b = 0; b < t.nx; ++b)
                racc += row[t.ix[b]] * t.wx[b];
            acc += racc * t.wy[a];
        }
        return acc;
    }

    /// Adds v spread over point p's footprint into the grid (transpose of sample).
    void spread(std::span<cplx> grid, std::size_t p, cplx v) const
    {
        if (exact_) {
            grid[index_[p]] += v;
            return;
        }
        const Taps& t = taps_[p];
        for (int a = 0; a < t.ny; ++a) {
            cplx* row = grid.data() + t.iy[a] * g_;
            const cplx va = v * t.wy[a];
            for (int b = 0; b < t.nx; ++b)
                row[t.ix[b]] += va * t.wx[b];
        }
    }

    /// Calls f(grid index, weight) for every grid point in p's footprint.
    template <typename F>
    void for_each_tap(std::size_t p, F&& f) const
    {
        if (exact_) {
            f(index_[p], 1.0);
            return;
        }
        const Taps& t = taps_[p];
        for (int a = 0; a < t.ny; ++a)
            for (int b = 0; b < t.nx; ++b)
                f(t.iy[a] * g_ + t.ix[b], t.wy[a] * t.wx[b]);
    }

    /// Full forward transform of one image.
    CVec forward(std::span<const cplx> img) const
    {
        CVec grid(g_ * g_);
        image_to_grid(img, grid);
        CVec y(npts_);
        for (std::size_t p = 0; p < npts_; ++p)
            y[p] = sample(grid, p);
        return y;
    }

    /// Exact adjoint of forward.
    CVec adjoint(std::span<const cplx> y) const
    {
        CVec grid(g_ * g_);
        for (std::size_t p = 0; p < npts_; ++p)
            spread(grid, p, y[p]);
        CVec img(n_ * n_);
        grid_to_image(grid, img);
        return img;
    }

private:
    struct Taps {
        std::size_t iy[kMaxTaps];
        std::size_t ix[kMaxTaps];
        double wy[kMaxTaps];
        double wx[kMaxTaps];
        int ny = 0;
        int nx = 0;
    };

    std::size_t wrap(long i) const
    {
        const long g = static_cast<long>(g_);
        return static_cast<std::size_t>(((i % g) + g) % g);
    }

    void build_exact(std::span<const double> kxy)
    {
        g_ = n_;
        apod_.assign(n_, 1.0);
        index_.resize(npts_);
        for (std::size_t p = 0; p < npts_; ++p) {
            const auto kx = static_cast<long>(std::lround(kxy[2 * p]));
            const auto ky = static_cast<long>(std::lround(kxy[2 * p + 1]));
            index_[p] = wrap(ky) * g_ + wrap(kx);
        }
    }

    void build_gridding(std::span<const double> kxy, double oversampling)
    {
        g_ = static_cast<std::size_t>(std::ceil(oversampling * static_cast<double>(n_)));
        g_ += g_ % 2;
        apod_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            const double r = static_cast<double>(i) - static_cast<double>(n_ / 2);
            apod_[i] = 1.0 / kernel_.transform(r / static_cast<double>(g_));
        }
        const double scale = static_cast<double>(g_) / static_cast<double>(n_);
        const double hw = kernel_.width() / 2.0;
        taps_.resize(npts_);
        auto axis = [&](double kappa, std::size_t* idx, double* w, int& count) {
            const long lo = static_cast<long>(std::ceil(kappa - hw));
            const long hi = static_cast<long>(std::floor(kappa + hw));
            count = 0;
            for (long m = lo; m <= hi; ++m) {
                idx[count] = wrap(m);
                w[count] = kernel_(kappa - static_cast<double>(m));
                ++count;
            }
        };
        for (std::size_t p = 0; p < npts_; ++p) {
            Taps& t = taps_[p];
            axis(kxy[2 * p] * scale, t.ix, t.wx, t.nx);
            axis(kxy[2 * p + 1] * scale, t.iy, t.wy, t.ny);
        }
    }

    std::size_t n_;
    std::size_t npts_ = 0;
    std::size_t g_ = 0;
    bool exact_ = false;
    KaiserBessel kernel_;
    RVec apod_;
    std::vector<Taps> taps_;
    std::vector<std::size_t> index_;
};

} // namespace mrf
