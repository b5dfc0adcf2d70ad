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

#include <cstdint>

namespace mrf {

/// Which temporal representation a TSMI carries.
enum class TemporalDomain { subspace, full };

/// Time-series of magnetisation images, stored channel-major:
/// data[c * height * width + y * width + x].
struct TSMI {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    TemporalDomain domain = TemporalDomain::subspace;
    CVec data;

    TSMI() = default;
    TSMI(std::size_t c, std::size_t h, std::size_t w, TemporalDomain d = TemporalDomain::subspace)
        : channels(c), height(h), width(w), domain(d), data(c * h * w)
    {
    }

    std::size_t voxels() const { return height * width; }

    std::span<cplx> channel(std::size_t c) { return {data.data() + c * voxels(), voxels()}; }
    std::span<const cplx> channel(std::size_t c) const { return {data.data() + c * voxels(), voxels()}; }

    cplx& at(std::size_t c, std::size_t v) { return data[c * voxels() + v]; }
    const cplx& at(std::size_t c, std::size_t v) const { return data[c * voxels() + v]; }

    bool same_shape(const TSMI& o) const { return channels == o.channels && height == o.height && width == o.width; }
};

/// Quantitative property maps. Voxels outside the mask hold zeros.
struct QMaps {
    std::size_t height = 0;
    std::size_t width = 0;
    RVec t1_ms;
    RVec t2_ms;
    RVec pd;
    std::vector<std::uint8_t> mask;

    QMaps() = default;
    QMaps(std::size_t h, std::size_t w) : height(h), width(w), t1_ms(h * w), t2_ms(h * w), pd(h * w), mask(h * w, 0) {}

    std::size_t voxels() const { return height * width; }
};

enum class Property { t1, t2, pd };

inline const RVec& property_map(const QMaps& m, Property p)
{
    switch (p) {
    case Property::t1: return m.t1_ms;
    case Property::t2: return m.t2_ms;
    case Property::pd: return m.pd;
    }
    throw ParameterError("unknown property");
}

inline std::string property_name(Property p)
{
    switch (p) {
    case Property::t1: return "T1";
    case Property::t2: return "T2";
    case Property::pd: return "PD";
    }
    return "?";
}

} // namespace mrf
