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

// End-to-end acceptance checks, one line per criterion. Runs single threaded.
// Usage: acceptance [criterion numbers...]   (default: all ten)

#include "mrf/config.hpp"
#include "mrf/hash.hpp"
#include "mrf/io.hpp"
#include "support.hpp"
#include "tiny_unrolled.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>

using namespace mrf;
using namespace mrf::testing;

namespace {

using clk = std::chrono::steady_clock;

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... v)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, v...);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome adjoint_correctness()
{
    const auto& m = default_model();
    double worst = 0.0;
    std::size_t configs = 0;
    for (std::size_t coils : {1u, 8u})
        for (std::size_t s : {1u, 5u, 10u}) {
            const Subspace sub = compute_subspace(m.dict, s);
            for (TrajectoryKind kind : {TrajectoryKind::golden_radial, TrajectoryKind::cartesian_lines}) {
                const AcquisitionOperator op(simulate_coil_maps(coils, 32), truncate_acceleration(make_trajectory(kind, 32, 32, m.seq.length()), 10), sub);
                for (std::uint64_t seed = 0; seed < 20; ++seed)
                    worst = std::max(worst, dot_test(op, 1000 * configs + seed));
                ++configs;
            }
        }
    return {worst < 1e-6, fmt("worst dot-test mismatch %.2e over %zu configurations x 20 trials", worst, configs)};
}

Outcome nufft_accuracy()
{
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-16.0, 16.0);
    RVec k(1000);
    for (auto& v : k)
        v = u(rng);
    const CVec img = random_cvec(32 * 32, rng);
    const NufftPlan plan(32, k);
    const double err = relative_error(plan.forward(img), direct_dft(img, 32, k));
    return {err < 1e-3 && !plan.exact(), fmt("relative error %.3e vs direct DFT (500 points, W=4, sigma=2)", err)};
}

Outcome epg_correctness()
{
    const SequenceParams seq = default_sequence(100);
    double worst = 0.0;
    for (double t1 : {300.0, 1000.0, 2000.0})
        for (double t2 : {30.0, 100.0, 300.0}) {
            const TissueParams tissue{t1, t2, 1.0};
            worst = std::max(worst, relative_error(simulate_epg(seq, tissue), simulate_isochromat_oracle(seq, tissue, 1000)));
        }
    return {worst < 0.01, fmt("worst NRMSE %.3e over the 3x3 grid, 1000 isochromats", worst)};
}

Outcome exact_recovery()
{
    const auto& m = default_model();
    const Phantom ph = make_phantom({"default", {}, true}, 64);
    // r = 1 and full Cartesian frames: H^H H is a multiple of the identity.
    const AcquisitionOperator op(simulate_coil_maps(2, 64), make_trajectory(TrajectoryKind::cartesian_full, 64, 0, m.seq.length()), m.sub);
    const KSpaceData y = simulate_measurements(ph, m.seq, m.sub, op, {});
    const QMaps est = backprojection_baseline(y, op, m.table);
    std::size_t wrong = 0, in_mask = 0;
    double pd_err = 0.0;
    for (std::size_t v = 0; v < est.voxels(); ++v) {
        if (!ph.truth.mask[v])
            continue;
        ++in_mask;
        wrong += est.t1_ms[v] != ph.truth.t1_ms[v] || est.t2_ms[v] != ph.truth.t2_ms[v];
        pd_err = std::max(pd_err, std::abs(est.pd[v] - ph.truth.pd[v]) / ph.truth.pd[v]);
    }
    return {wrong == 0 && pd_err < 1e-6, fmt("%zu of %zu in-mask voxels mismatched, worst PD relative error %.2e", wrong, in_mask, pd_err)};
}

Outcome pgd_descent()
{
    const auto& m = default_model();
    std::size_t increases = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const AcquisitionOperator op(simulate_coil_maps(8, 32), truncate_acceleration(make_trajectory(TrajectoryKind::golden_radial, 32, 32, 1000), 10), m.sub);
        const Phantom ph = random_phantom(32, seed);
        const KSpaceData y = simulate_measurements(ph, m.seq, m.sub, op, {0.05, seed});
        const PgdResult r = pgd_reconstruct(y, op, IdentityProx(), constant_step_config(10, 1.0 / estimate_operator_norm(op, 30)));
        for (std::size_t t = 1; t < r.trace.fidelity.size(); ++t)
            increases += r.trace.fidelity[t] > r.trace.fidelity[t - 1];
    }
    const Phantom ph = make_phantom({}, 64);
    const AcquisitionOperator op(simulate_coil_maps(8, 64), truncate_acceleration(make_trajectory(TrajectoryKind::golden_radial, 64, 64, 1000), 10), m.sub);
    const KSpaceData y = simulate_measurements(ph, m.seq, m.sub, op, {});
    const double bp = nrmse(backprojection_baseline(y, op, m.table), ph.truth, Property::t1);
    const PgdResult r = pgd_reconstruct(y, op, DictionaryProx(m.table), constant_step_config(5, 1.0 / estimate_operator_norm(op, 30)));
    const double pgd = nrmse(r.maps, ph.truth, Property::t1);
    return {increases == 0 && pgd < bp,
            fmt("%zu fidelity increases over 20 seeds; T1 NRMSE dm-pgd %.4f vs bp-dm %.4f at r=10", increases, pgd, bp)};
}

Outcome autodiff_exactness()
{
    TinyUnrolled t = make_tiny_unrolled();
    const GradientCheck c = check_unrolled_gradients(t);
    return {c.failed == 0, fmt("%zu of %zu gradients outside 1e-4 (h=1e-5); worst %.2e at %s", c.failed, c.checked, c.worst, c.worst_name.c_str())};
}

/// The pretrained decoder is shared with the unrolling experiment.
const BlochDecoderNet& default_decoder(double* seconds = nullptr)
{
    static double took = 0.0;
    static const BlochDecoderNet dec = [] {
        const auto& m = default_model();
        const auto t0 = clk::now();
        BlochDecoderNet d = pretrain_bloch_decoder(m.dict, m.sub, m.seq, {});
        took = seconds_since(t0);
        return d;
    }();
    if (seconds)
        *seconds = took;
    return dec;
}

Outcome bloch_decoder()
{
    const auto& m = default_model();
    double pretrain_s = 0.0;
    const BlochDecoderNet& dec = default_decoder(&pretrain_s);
    const auto t0 = clk::now();
    // Pairs the pretraining never saw: a seed distinct from its own held-out set.
    const auto [t1, t2] = random_relaxation_pairs(500, 4242, dec.bounds());
    const RVec err = decoder_relative_errors(dec, t1, t2, compressed_fingerprints(m.seq, m.sub, t1, t2));
    const double mean_err = mean(err);
    const double eval_s = seconds_since(t0);
    return {mean_err < 0.02 && eval_s < 300.0,
            fmt("mean relative error %.4f on 500 held-out off-grid pairs (pretraining %.0f s, evaluation %.1f s)", mean_err, pretrain_s, eval_s)};
}

// Desk-scale protocol for the unrolling experiment.
struct UnrollProtocol {
    std::size_t matrix = 32;
    std::size_t coils = 8;
    std::size_t r = 10;
    std::size_t train_samples = 16;
    std::size_t pretrain_epochs = 100;  ///< on back-projections, shared by both models
    std::size_t finetune_epochs = 200;  ///< unrolled T = 5; the baseline trains as long again
    double noise_sigma = 0.0;
    std::uint64_t seed = 42;
};

Outcome unrolling_helps()
{
    const auto& m = default_model();
    const UnrollProtocol p;
    const BlochDecoderNet& dec = default_decoder();
    const AcquisitionOperator op(simulate_coil_maps(p.coils, p.matrix),
                                 truncate_acceleration(make_trajectory(TrajectoryKind::golden_radial, p.matrix, p.matrix, m.seq.length()), p.r), m.sub);
    const double lambda_max = estimate_operator_norm(op, 30);
    std::vector<TrainingSample> data;
    for (std::size_t i = 0; i < p.train_samples; ++i) {
        const Phantom ph = jittered_phantom(p.matrix, 1000 + i);
        data.push_back(make_training_sample(simulate_measurements(ph, m.seq, m.sub, op, {p.noise_sigma, 2000 + i}), ph.truth, op));
    }
    const Phantom held = make_phantom({}, p.matrix);
    const KSpaceData y = simulate_measurements(held, m.seq, m.sub, op, {p.noise_sigma, 999});

    const auto t0 = clk::now();
    TrainConfig cfg;
    cfg.seed = p.seed;
    cfg.epochs = p.pretrain_epochs;
    UnrolledModel baseline(EncoderNet({}, p.seed), dec, 0, 1.0);
    train_unrolled(data, op, baseline, cfg);
    UnrolledModel unrolled = baseline.with_iterations(5, 1.0 / lambda_max);
    cfg.epochs = p.finetune_epochs;
    train_unrolled(data, op, unrolled, cfg);
    const double unrolled_s = seconds_since(t0);
    train_unrolled(data, op, baseline, cfg);
    const double total_s = seconds_since(t0);

    const QMaps bp = neural_backprojection_baseline(y, op, baseline);
    const QMaps un = neural_unrolled_reconstruct(y, op, unrolled).maps;
    const double bp1 = nrmse(bp, held.truth, Property::t1), bp2 = nrmse(bp, held.truth, Property::t2);
    const double un1 = nrmse(un, held.truth, Property::t1), un2 = nrmse(un, held.truth, Property::t2);
    const double gain = 1.0 - un1 / bp1;
    return {gain >= 0.10 && un2 < bp2 && total_s <= 1800.0,
            fmt("T1 NRMSE unrolled %.4f vs bp-neural %.4f (%.1f%% better, need 10%%); T2 %.4f vs %.4f; training %.0f s (unrolled %.0f s)", un1, bp1,
                100.0 * gain, un2, bp2, total_s, unrolled_s)};
}

// ---------------------------------------------------------------------------
// CLI-driven criteria

int run_cli(const std::string& args)
{
    const std::string cmd = std::string("\"") + MRF_CLI_PATH + "\" --threads 1 " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

/// sha256 of every file below dir; manifests are hashed without their wall time.
std::map<std::string, std::string> hash_tree(const fs::path& dir)
{
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file())
            continue;
        const std::string rel = fs::relative(e.path(), dir).generic_string();
        if (e.path().filename() == "manifest.json" || rel.ends_with(".manifest.json")) {
            std::ifstream is(e.path());
            nlohmann::json j = nlohmann::json::parse(is);
            j.erase("wall_time_s");
            out[rel] = sha256_hex(j.dump());
        } else {
            out[rel] = sha256_file(e.path());
        }
    }
    return out;
}

void write_small_config(const fs::path& path)
{
    const nlohmann::json c = {{"sequence", {{"length", 200}}},
                              {"grid", {{"t1_count", 20}, {"t2_count", 16}}},
                              {"subspace", {{"s", 6}}},
                              {"coils", {{"C", 2}}},
                              {"phantom", {{"matrix", 16}}},
                              {"noise", {{"sigma", 0.01}, {"seed", 5}}},
                              {"train", {{"samples", 2}, {"epochs", 2}, {"width", 4}, {"decoder_hidden", 32}, {"decoder_steps", 2500}}}};
    std::ofstream(path) << c.dump(2) << "\n";
}

/// The whole pipeline once, into root.
std::vector<std::pair<std::string, int>> run_pipeline(const fs::path& root, const fs::path& cfg)
{
    const std::string c = " --config " + q(cfg);
    const fs::path d = root / "dict", sim = root / "sim";
    std::vector<std::pair<std::string, int>> rc;
    rc.emplace_back("build-dict", run_cli("build-dict" + c + " --out " + q(d)));
    rc.emplace_back("simulate", run_cli("simulate" + c + " --dict " + q(d) + " --out " + q(sim)));
    rc.emplace_back("reconstruct dm-pgd",
                    run_cli("reconstruct" + c + " --dict " + q(d) + " --data " + q(sim) + " --method dm-pgd --out " + q(root / "dm-pgd")));
    rc.emplace_back("reconstruct bp-dm", run_cli("reconstruct" + c + " --dict " + q(d) + " --data " + q(sim) + " --method bp-dm --out " + q(root / "bp-dm")));
    rc.emplace_back("train", run_cli("train" + c + " --dict " + q(d) + " --iterations 2 --out " + q(root / "model")));
    rc.emplace_back("reconstruct neural-unrolled", run_cli("reconstruct" + c + " --dict " + q(d) + " --data " + q(sim) + " --model " +
                                                           q(root / "model") + " --method neural-unrolled --out " + q(root / "unrolled")));
    rc.emplace_back("eval", run_cli("eval --est " + q(root / "dm-pgd") + " --truth " + q(sim / "truth") + " --out " + q(root / "metrics" / "metrics.csv")));
    rc.emplace_back("render", run_cli("render --maps " + q(root / "dm-pgd") + " --out " + q(root / "png")));
    return rc;
}

Outcome determinism()
{
    TempDir tmp("accept9");
    const fs::path cfg = tmp / "config.json";
    write_small_config(cfg);
    const fs::path root = tmp / "run";
    std::map<std::string, std::string> first;
    for (int pass = 0; pass < 2; ++pass) {
        fs::remove_all(root);
        for (const auto& [name, rc] : run_pipeline(root, cfg))
            if (rc != 0)
                return {false, fmt("%s exited with %d", name.c_str(), rc)};
        const auto h = hash_tree(root);
        if (pass == 0) {
            first = h;
            continue;
        }
        std::size_t differing = 0;
        std::string example;
        for (const auto& [k, v] : h)
            if (!first.count(k) || first.at(k) != v) {
                ++differing;
                example = k;
            }
        differing += first.size() != h.size();
        return {differing == 0, fmt("%zu files hashed over 8 commands; %zu differ%s%s", h.size(), differing, differing ? ", e.g. " : "", example.c_str())};
    }
    return {false, "unreachable"};
}

template <typename T>
bool tensor_round_trip(const fs::path& path, const Dims& dims, std::mt19937_64& rng)
{
    std::size_t n = 1;
    for (auto d : dims)
        n *= d;
    std::vector<T> v(n);
    std::normal_distribution<double> g;
    for (auto& x : v) {
        if constexpr (std::is_floating_point_v<T>)
            x = static_cast<T>(g(rng));
        else
            x = T(static_cast<typename T::value_type>(g(rng)), static_cast<typename T::value_type>(g(rng)));
    }
    write_tensor(path, v, dims);
    Dims back;
    const std::vector<T> r = read_tensor<T>(path, &back);
    return back == dims && r.size() == v.size() && (v.empty() || std::memcmp(r.data(), v.data(), v.size() * sizeof(T)) == 0);
}

Outcome format_round_trips()
{
    TempDir tmp("accept10");
    std::mt19937_64 rng(10);
    std::size_t tensors = 0, tensor_fail = 0;
    for (const Dims& dims : {Dims{}, Dims{0}, Dims{7}, Dims{3, 4}, Dims{2, 0, 5}, Dims{2, 3, 4}}) {
        const fs::path p = tmp / "t.mrfb";
        tensor_fail += !tensor_round_trip<float>(p, dims, rng);
        tensor_fail += !tensor_round_trip<double>(p, dims, rng);
        tensor_fail += !tensor_round_trip<std::complex<float>>(p, dims, rng);
        tensor_fail += !tensor_round_trip<std::complex<double>>(p, dims, rng);
        tensors += 4;
    }

    TinyUnrolled t = make_tiny_unrolled(2, true);
    save_checkpoint(tmp / "ckpt", t.model, {{"note", "acceptance"}}, {0.5, 0.25});
    const UnrolledModel back = load_checkpoint(tmp / "ckpt");
    const auto a = t.model.parameters();
    const auto b = back.parameters();
    std::size_t param_fail = a.size() != b.size();
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
        param_fail += a[i]->name != b[i]->name || a[i]->value.data.size() != b[i]->value.data.size() ||
                      std::memcmp(a[i]->value.data.data(), b[i]->value.data.data(), a[i]->value.data.size() * sizeof(double)) != 0 ||
                      a[i]->trainable != b[i]->trainable;

    const fs::path cfg = tmp / "config.json";
    write_small_config(cfg);
    const fs::path d = tmp / "dict", sim = tmp / "sim";
    const std::string c = " --config " + q(cfg);
    int rc = run_cli("build-dict" + c + " --out " + q(d));
    rc |= run_cli("simulate" + c + " --dict " + q(d) + " --out " + q(sim));
    rc |= run_cli("reconstruct" + c + " --dict " + q(d) + " --data " + q(sim) + " --method dm-pgd --out " + q(tmp / "recon"));
    const int rerun_rc = run_cli("rerun --manifest " + q(tmp / "recon" / "manifest.json") + " --out " + q(tmp / "replay"));
    auto without_manifest = [](std::map<std::string, std::string> h) {
        h.erase("manifest.json");
        return h;
    };
    const bool same = rc == 0 && rerun_rc == 0 && without_manifest(hash_tree(tmp / "recon")) == without_manifest(hash_tree(tmp / "replay"));
    return {tensor_fail == 0 && param_fail == 0 && same,
            fmt("%zu/%zu tensor round trips exact; %zu/%zu checkpoint parameters exact; manifest re-run %s (exit %d)", tensors - tensor_fail, tensors,
                a.size() - param_fail, a.size(), same ? "reproduced outputs" : "differed", rerun_rc)};
}

struct Criterion {
    int id;
    const char* name;
    double limit_s;  ///< stated runtime bound, 0 = none
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv)
{
    set_thread_count(1);
    const std::vector<Criterion> all{
        {1, "adjoint correctness", 30.0, adjoint_correctness},
        {2, "NUFFT accuracy", 10.0, nufft_accuracy},
        {3, "EPG correctness", 60.0, epg_correctness},
        {4, "exact recovery", 120.0, exact_recovery},
        {5, "PGD descent", 300.0, pgd_descent},
        {6, "autodiff exactness", 120.0, autodiff_exactness},
        {7, "Bloch decoder surrogate", 0.0, bloch_decoder},
        {8, "unrolling helps", 0.0, unrolling_helps},
        {9, "determinism", 0.0, determinism},
        {10, "format round-trips", 0.0, format_round_trips},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i)
        wanted.insert(std::atoi(argv[i]));
    // Shared fixtures are built before the clocks start.
    default_model();
    int failed = 0;
    for (const Criterion& c : all) {
        if (!wanted.empty() && !wanted.count(c.id))
            continue;
        const auto t0 = clk::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double s = seconds_since(t0);
        if (c.limit_s > 0.0 && s >= c.limit_s) {
            o.pass = false;
            o.detail += fmt("; runtime %.1f s exceeds %.0f s", s, c.limit_s);
        }
        failed += !o.pass;
        std::printf("criterion %2d %-24s %s  %s  [%.1f s]\n", c.id, c.name, o.pass ? "PASS" : "FAIL", o.detail.c_str(), s);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
