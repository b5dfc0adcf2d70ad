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

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mrf {

using cplx = std::complex<double>;
using CVec = std::vector<cplx>;
using RVec = std::vector<double>;

inline constexpr double kPi = std::numbers::pi;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid user-supplied parameters or configuration (CLI exit code 2).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Array shapes that do not agree with each other.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A numerical iteration produced non-finite values or blew up.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Malformed binary or JSON input.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Training did not reach its required accuracy.
class TrainingError : public Error {
public:
    using Error::Error;
};

namespace detail {
inline std::atomic<int>& thread_count_ref()
{
    static std::atomic<int> n{1};
    return n;
}
} // namespace detail

/// Number of worker threads used by parallel kernels. Defaults to 1.
inline int thread_count() { return detail::thread_count_ref().load(); }

inline void set_thread_count(int n)
{
    if (n < 1)
        throw ParameterError("thread count must be >= 1, got " + std::to_string(n));
    detail::thread_count_ref().store(n);
}

/// Runs fn(i) for i in [0, n). Each index is visited by exactly one thread, so
/// kernels that write disjoint outputs per index stay bit-identical for any
/// thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn)
{
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi)
            break;
        pool.emplace_back([&fn, lo, hi] {
            for (std::size_t i = lo; i < hi; ++i)
                fn(i);
        });
    }
}

inline double norm2(std::span<const cplx> v)
{
    double acc = 0.0;
    for (const auto& z : v)
        acc += std::norm(z);
    return acc;
}

inline double norm(std::span<const cplx> v) { return std::sqrt(norm2(v)); }

inline double norm2(std::span<const double> v)
{
    double acc = 0.0;
    for (double x : v)
        acc += x * x;
    return acc;
}

inline double mean(std::span<const double> v)
{
    if (v.empty())
        throw ParameterError("mean of an empty range");
    double acc = 0.0;
    for (double x : v)
        acc += x;
    return acc / static_cast<double>(v.size());
}

/// <a, b> = sum conj(a) * b
inline cplx dot(std::span<const cplx> a, std::span<const cplx> b)
{
    if (a.size() != b.size())
        throw ShapeError("dot: length mismatch");
    cplx acc{0.0, 0.0};
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += std::conj(a[i]) * b[i];
    return acc;
}

inline bool all_finite(std::span<const cplx> v)
{
    return std::all_of(v.begin(), v.end(), [](const cplx& z) { return std::isfinite(z.real()) && std::isfinite(z.imag()); });
}

inline bool all_finite(std::span<const double> v)
{
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Relative l2 error ||a - b|| / ||b||.
inline double relative_error(std::span<const cplx> a, std::span<const cplx> b)
{
    if (a.size() != b.size())
        throw ShapeError("relative_error: length mismatch");
    double num = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        num += std::norm(a[i] - b[i]);
    const double den = norm2(b);
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

/// n values log-spaced over [lo, hi], endpoints included.
inline RVec logspace(double lo, double hi, std::size_t n)
{
    if (n == 0 || lo <= 0.0 || hi < lo)
        throw ParameterError("logspace: need n >= 1 and 0 < lo <= hi");
    RVec out(n);
    if (n == 1) {
        out[0] = lo;
        return out;
    }
    const double a = std::log(lo), b = std::log(hi);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
    out.front() = lo;
    out.back() = hi;
    return out;
}

} // namespace mrf
