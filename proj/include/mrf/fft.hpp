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

#include "mrf/core.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

namespace mrf {

/// Unnormalised 2-D DFTs on row-major ny x nx complex arrays.
///   forward:  X[m] = sum_r x[r] exp(-2 pi i m.r / n)
///   backward: x[r] = sum_m X[m] exp(+2 pi i m.r / n)
class Fft2d {
public:
    static void forward(cplx* data, std::size_t ny, std::size_t nx) { execute(data, ny, nx, FFTW_FORWARD); }
    static void backward(cplx* data, std::size_t ny, std::size_t nx) { execute(data, ny, nx, FFTW_BACKWARD); }

private:
    using Key = std::tuple<std::size_t, std::size_t, int>;

    struct PlanCache {
        std::mutex mu;
        std::map<Key, fftw_plan> plans;
        ~PlanCache()
        {
            for (auto& [k, p] : plans)
                fftw_destroy_plan(p);
        }
    };

    static PlanCache& cache()
    {
        static PlanCache c;
        return c;
    }

    // Plans are built once per shape under a lock (FFTW planning is not
    // thread-safe); execution with new-array execute is.
    static fftw_plan plan_for(std::size_t ny, std::size_t nx, int sign)
    {
        auto& c = cache();
        std::lock_guard lock(c.mu);
        const Key key{ny, nx, sign};
        if (auto it = c.plans.find(key); it != c.plans.end())
            return it->second;
        std::vector<cplx> scratch(ny * nx);
        auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
        fftw_plan p = fftw_plan_dft_2d(static_cast<int>(ny), static_cast<int>(nx), buf, buf, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
        if (!p)
            throw Error("fftw: could not create plan");
        c.plans.emplace(key, p);
        return p;
    }

    static void execute(cplx* data, std::size_t ny, std::size_t nx, int sign)
    {
        fftw_plan p = plan_for(ny, nx, sign);
        auto* buf = reinterpret_cast<fftw_complex*>(data);
        fftw_execute_dft(p, buf, buf);
    }
};

} // namespace mrf
