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

// Run configuration shared by the command-line tools. Every field is optional;
// unknown keys are rejected with their dotted path.

#include "mrf/neural.hpp"
#include "mrf/phantom.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <set>

namespace mrf {

struct RunConfig {
    struct Sequence {
        std::size_t length = 1000;
        double tr_ms = 10.0;
        double te_ms = 1.8;
        double ti_ms = 18.0;
        std::string flip_csv;  ///< degrees, one per line; empty = sinusoidal default
    } sequence;
    struct Grid {
        double t1_min_ms = 100.0, t1_max_ms = 4000.0;
        std::size_t t1_count = 60;
        double t2_min_ms = 10.0, t2_max_ms = 600.0;
        std::size_t t2_count = 50;
    } grid;
    std::size_t s = 10;
    struct Traj {
        std::string kind = "golden_radial";
        std::size_t d = 0;  ///< samples per frame; 0 = matrix size
        std::size_t r = 10;
    } trajectory;
    std::size_t coils = 8;
    struct Phan {
        std::string preset = "default";
        std::size_t matrix = 64;
        bool snap_to_grid = false;
        std::vector<Region> regions;
    } phantom;
    NoiseSpec noise;
    struct Recon {
        std::string method = "dm-pgd";
        std::size_t iterations = 5;
        RVec steps;  ///< empty = 1 / lambda_max for every iteration
        std::size_t power_iterations = 30;
    } recon;
    struct Train {
        std::array<double, 3> beta{1.0, 0.3, 0.6};
        double lambda = 1e-3;
        std::size_t epochs = 500;
        double lr = 1e-3;
        std::uint64_t seed = 0;
        std::size_t samples = 16;
        std::string family = "jittered";  ///< training phantoms: "jittered" or "random"
        std::size_t width = 32;
        bool squeeze_excite = false;
        std::size_t decoder_hidden = 64;
        std::size_t decoder_steps = 4000;
    } train;

    nlohmann::json source = nlohmann::json::object();  ///< the document as given

    SequenceParams sequence_params() const
    {
        SequenceParams p = default_sequence(sequence.length);
        if (!sequence.flip_csv.empty()) {
            p.flip_angles_rad = load_flip_schedule_csv(sequence.flip_csv);
            if (p.flip_angles_rad.size() != sequence.length)
                throw ParameterError("sequence.flip_csv: " + std::to_string(p.flip_angles_rad.size()) + " angles but sequence.length is " +
                                     std::to_string(sequence.length));
        }
        p.tr_ms = sequence.tr_ms;
        p.te_ms = sequence.te_ms;
        p.ti_ms = sequence.ti_ms;
        return p;
    }

    GridSpec grid_spec() const
    {
        return {logspace(grid.t1_min_ms, grid.t1_max_ms, grid.t1_count), logspace(grid.t2_min_ms, grid.t2_max_ms, grid.t2_count)};
    }

    std::size_t samples_per_frame() const { return trajectory.d == 0 ? phantom.matrix : trajectory.d; }

    /// Full-length trajectory truncated to the first L / r frames.
    Trajectory make_trajectory_r() const
    {
        const Trajectory full = make_trajectory(trajectory_kind_from_string(trajectory.kind), phantom.matrix, samples_per_frame(), sequence.length);
        return truncate_acceleration(full, trajectory.r);
    }

    PhantomSpec phantom_spec() const { return {phantom.preset, phantom.regions, phantom.snap_to_grid}; }

    TrainConfig train_config() const
    {
        TrainConfig c;
        c.beta = train.beta;
        c.lambda = train.lambda;
        c.epochs = train.epochs;
        c.lr = train.lr;
        c.seed = train.seed;
        return c;
    }

    EncoderConfig encoder_config() const
    {
        EncoderConfig c;
        c.rank = s;
        c.width = train.width;
        c.squeeze_excite = train.squeeze_excite;
        return c;
    }

    void validate() const;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed)
{
    if (!j.is_object())
        throw ParameterError(where + ": expected a JSON object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k))
            throw ParameterError((where.empty() ? k : where + "." + k) + ": unknown key");
}

template <typename T>
void read_field(const nlohmann::json& j, const std::string& where, const char* key, T& out)
{
    if (!j.contains(key))
        return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParameterError((where.empty() ? std::string(key) : where + "." + key) + ": wrong type");
    }
}

/// Non-negative integers only; JSON -1 would otherwise wrap silently.
inline void read_count(const nlohmann::json& j, const std::string& where, const char* key, std::size_t& out)
{
    if (!j.contains(key))
        return;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ParameterError(where + "." + key + ": expected a non-negative integer");
    out = v.get<std::size_t>();
}

} // namespace detail

inline void RunConfig::validate() const
{
    if (sequence.length < 1)
        throw ParameterError("sequence.length: must be >= 1");
    if (!(sequence.te_ms > 0.0) || !(sequence.tr_ms > sequence.te_ms))
        throw ParameterError("sequence.tr_ms: require tr_ms > te_ms > 0");
    if (!(sequence.ti_ms >= 0.0))
        throw ParameterError("sequence.ti_ms: must be >= 0");
    if (!(grid.t1_min_ms > 0.0) || !(grid.t1_max_ms >= grid.t1_min_ms) || grid.t1_count < 1)
        throw ParameterError("grid.t1: need 0 < t1_min_ms <= t1_max_ms and t1_count >= 1");
    if (!(grid.t2_min_ms > 0.0) || !(grid.t2_max_ms >= grid.t2_min_ms) || grid.t2_count < 1)
        throw ParameterError("grid.t2: need 0 < t2_min_ms <= t2_max_ms and t2_count >= 1");
    if (s < 1 || s > sequence.length)
        throw ParameterError("subspace.s: must lie in [1, sequence.length]");
    trajectory_kind_from_string(trajectory.kind);
    if (trajectory.r < 1 || trajectory.r > sequence.length)
        throw ParameterError("trajectory.r: must lie in [1, sequence.length]");
    if (coils < 1)
        throw ParameterError("coils.C: must be >= 1");
    if (phantom.matrix < 8)
        throw ParameterError("phantom.matrix: must be >= 8");
    if (!(noise.sigma >= 0.0))
        throw ParameterError("noise.sigma: must be >= 0");
    static const std::set<std::string> methods{"dm-pgd", "neural-unrolled", "bp-dm", "bp-neural"};
    if (!methods.count(recon.method))
        throw ParameterError("recon.method: unknown method '" + recon.method + "'");
    if (!recon.steps.empty() && recon.steps.size() != recon.iterations)
        throw ParameterError("recon.steps: need one step size per iteration");
    for (double a : recon.steps)
        if (!(a > 0.0))
            throw ParameterError("recon.steps: step sizes must be positive");
    if (train.family != "jittered" && train.family != "random")
        throw ParameterError("train.family: expected 'jittered' or 'random'");
    if (train.samples < 1)
        throw ParameterError("train.samples: must be >= 1");
    try {
        train_config().validate();
        encoder_config().validate();
    } catch (const ParameterError& e) {
        throw ParameterError(std::string("train: ") + e.what());
    }
}

inline RunConfig parse_run_config(const nlohmann::json& j)
{
    using detail::read_count;
    using detail::read_field;
    RunConfig c;
    c.source = j;
    detail::reject_unknown(j, "", {"sequence", "grid", "subspace", "trajectory", "coils", "phantom", "noise", "recon", "train"});
    if (j.contains("sequence")) {
        const auto& s = j["sequence"];
        detail::reject_unknown(s, "sequence", {"length", "tr_ms", "te_ms", "ti_ms", "flip_csv"});
        read_count(s, "sequence", "length", c.sequence.length);
        read_field(s, "sequence", "tr_ms", c.sequence.tr_ms);
        read_field(s, "sequence", "te_ms", c.sequence.te_ms);
        read_field(s, "sequence", "ti_ms", c.sequence.ti_ms);
        read_field(s, "sequence", "flip_csv", c.sequence.flip_csv);
    }
    if (j.contains("grid")) {
        const auto& g = j["grid"];
        detail::reject_unknown(g, "grid", {"t1_min_ms", "t1_max_ms", "t1_count", "t2_min_ms", "t2_max_ms", "t2_count"});
        read_field(g, "grid", "t1_min_ms", c.grid.t1_min_ms);
        read_field(g, "grid", "t1_max_ms", c.grid.t1_max_ms);
        read_count(g, "grid", "t1_count", c.grid.t1_count);
        read_field(g, "grid", "t2_min_ms", c.grid.t2_min_ms);
        read_field(g, "grid", "t2_max_ms", c.grid.t2_max_ms);
        read_count(g, "grid", "t2_count", c.grid.t2_count);
    }
    if (j.contains("subspace")) {
        detail::reject_unknown(j["subspace"], "subspace", {"s"});
        read_count(j["subspace"], "subspace", "s", c.s);
    }
    if (j.contains("trajectory")) {
        const auto& t = j["trajectory"];
        detail::reject_unknown(t, "trajectory", {"kind", "d", "r"});
        read_field(t, "trajectory", "kind", c.trajectory.kind);
        read_count(t, "trajectory", "d", c.trajectory.d);
        read_count(t, "trajectory", "r", c.trajectory.r);
    }
    if (j.contains("coils")) {
        detail::reject_unknown(j["coils"], "coils", {"C"});
        read_count(j["coils"], "coils", "C", c.coils);
    }
    if (j.contains("phantom")) {
        const auto& p = j["phantom"];
        detail::reject_unknown(p, "phantom", {"preset", "matrix", "snap_to_grid", "regions"});
        read_field(p, "phantom", "preset", c.phantom.preset);
        read_count(p, "phantom", "matrix", c.phantom.matrix);
        read_field(p, "phantom", "snap_to_grid", c.phantom.snap_to_grid);
        if (p.contains("regions")) {
            if (!p["regions"].is_array())
                throw ParameterError("phantom.regions: expected an array");
            for (const auto& r : p["regions"])
                c.phantom.regions.push_back(region_from_json(r));
            if (!p.contains("preset"))
                c.phantom.preset = "custom";
        }
    }
    if (j.contains("noise")) {
        const auto& n = j["noise"];
        detail::reject_unknown(n, "noise", {"sigma", "seed"});
        read_field(n, "noise", "sigma", c.noise.sigma);
        read_field(n, "noise", "seed", c.noise.seed);
    }
    if (j.contains("recon")) {
        const auto& r = j["recon"];
        detail::reject_unknown(r, "recon", {"method", "T", "steps", "power_iterations"});
        read_field(r, "recon", "method", c.recon.method);
        read_count(r, "recon", "T", c.recon.iterations);
        read_field(r, "recon", "steps", c.recon.steps);
        read_count(r, "recon", "power_iterations", c.recon.power_iterations);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        detail::reject_unknown(t, "train", {"beta", "lambda", "epochs", "lr", "seed", "samples", "family", "width", "squeeze_excite",
                                            "decoder_hidden", "decoder_steps"});
        read_field(t, "train", "beta", c.train.beta);
        read_field(t, "train", "lambda", c.train.lambda);
        read_count(t, "train", "epochs", c.train.epochs);
        read_field(t, "train", "lr", c.train.lr);
        read_field(t, "train", "seed", c.train.seed);
        read_count(t, "train", "samples", c.train.samples);
        read_field(t, "train", "family", c.train.family);
        read_count(t, "train", "width", c.train.width);
        read_field(t, "train", "squeeze_excite", c.train.squeeze_excite);
        read_count(t, "train", "decoder_hidden", c.train.decoder_hidden);
        read_count(t, "train", "decoder_steps", c.train.decoder_steps);
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw ParameterError("config: cannot open " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

/// Training phantom i of a run, drawn from the configured family. Seeds are
/// offset from the default preset's so the held-out phantom never recurs.
inline Phantom training_phantom(const RunConfig& c, std::size_t i)
{
    const std::uint64_t seed = 1000 + c.train.seed * 7919 + i;
    return c.train.family == "random" ? random_phantom(c.phantom.matrix, seed) : jittered_phantom(c.phantom.matrix, seed);
}

} // namespace mrf
