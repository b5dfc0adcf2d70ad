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

// mrf: dictionary building, simulation, reconstruction, training, evaluation
// and rendering. Exit codes: 0 ok, 1 runtime failure, 2 configuration error.

#include "mrf/config.hpp"
#include "mrf/hash.hpp"
#include "mrf/io.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>

namespace {

using namespace mrf;
using Args = std::map<std::string, std::string>;
using json = nlohmann::json;

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

/// Options whose values name files or directories; stored absolute.
const std::set<std::string> kPathArgs{"config", "out", "dict", "data", "model", "init", "decoder", "est", "truth", "maps", "manifest"};

struct Context {
    std::string command;
    Args args;
    json config_doc;  ///< null when the command takes no config
    int threads = 1;

    bool has(const std::string& k) const { return args.count(k) && !args.at(k).empty(); }
    const std::string& need(const std::string& k) const
    {
        if (!has(k))
            throw ParameterError("--" + k + " is required");
        return args.at(k);
    }
    fs::path path(const std::string& k) const { return need(k); }
    std::size_t count(const std::string& k) const
    {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(need(k), &used);
            if (v < 0 || used != need(k).size())
                throw std::invalid_argument(k);
            return static_cast<std::size_t>(v);
        } catch (const std::logic_error&) {
            throw ParameterError("--" + k + ": expected a non-negative integer");
        }
    }
    RunConfig config() const { return config_doc.is_null() ? RunConfig{} : parse_run_config(config_doc); }
};

/// Relative path -> sha256 for every file below root (or root itself), manifests excluded.
json hash_outputs(const fs::path& root)
{
    json out = json::object();
    if (fs::is_regular_file(root)) {
        out[root.filename().string()] = sha256_file(root);
        return out;
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
        out[fs::relative(f, root).generic_string()] = sha256_file(f);
    return out;
}

fs::path manifest_path(const fs::path& out)
{
    return fs::is_directory(out) ? out / "manifest.json" : fs::path(out.string() + ".manifest.json");
}

void write_manifest(const Context& ctx, double wall_time_s, const json& extra)
{
    const fs::path out = ctx.path("out");
    json m;
    m["tool"] = "mrf";
    m["version"] = MRF_VERSION;
    m["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION);
    m["command"] = ctx.command;
    m["args"] = ctx.args;
    m["config"] = ctx.config_doc;
    m["threads"] = ctx.threads;
    if (!ctx.config_doc.is_null()) {
        const RunConfig c = ctx.config();
        m["seed"] = {{"noise", c.noise.seed}, {"train", c.train.seed}};
    }
    m["outputs"] = hash_outputs(out);
    m["wall_time_s"] = wall_time_s;
    for (const auto& [k, v] : extra.items())
        m[k] = v;
    std::ofstream(manifest_path(out)) << m.dump(2) << "\n";
}

json read_json(const fs::path& p)
{
    std::ifstream is(p);
    if (!is)
        throw FormatError("cannot open " + p.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Shared setup

struct DictFiles {
    DictionaryGrid dict;
    Subspace sub;
    std::string hash;
};

DictFiles load_dict_dir(const fs::path& dir)
{
    const json side = read_json(dir / "dict.json");
    DictFiles d{load_dictionary(dir), load_subspace(dir), sha256_file(dir / "subspace.mrfb")};
    if (side.value("subspace_hash", std::string{}) != d.hash)
        throw ParameterError("subspace hash mismatch: " + (dir / "subspace.mrfb").string() + " does not match dict.json");
    return d;
}

void check_hash(const std::string& expected, const std::string& actual, const std::string& what)
{
    if (expected != actual)
        throw ParameterError("subspace hash mismatch: " + what + " was produced with subspace " + expected.substr(0, 12) + ", the dictionary has " +
                             actual.substr(0, 12));
}

AcquisitionOperator make_operator(const RunConfig& c, const Subspace& sub)
{
    if (sub.length() != c.sequence.length)
        throw ParameterError("sequence.length: config says " + std::to_string(c.sequence.length) + " but the subspace has " +
                             std::to_string(sub.length()) + " frames");
    if (sub.rank() != c.s)
        throw ParameterError("subspace.s: config says " + std::to_string(c.s) + " but the subspace has rank " + std::to_string(sub.rank()));
    return AcquisitionOperator(simulate_coil_maps(c.coils, c.phantom.matrix), c.make_trajectory_r(), sub);
}

// ---------------------------------------------------------------------------
// Commands

json cmd_build_dict(const Context& ctx)
{
    RunConfig c = ctx.config();
    if (ctx.has("s")) {
        c.s = ctx.count("s");
        c.validate();
    }
    const fs::path out = ctx.path("out");
    const SequenceParams seq = c.sequence_params();
    const DictionaryGrid dict = build_dictionary(seq, c.grid_spec());
    const Subspace sub = compute_subspace(dict, c.s);
    save_dictionary(out, dict);
    save_subspace(out, sub);
    double kept = 0.0, total = 0.0;
    for (std::size_t i = 0; i < sub.singular_values.size(); ++i) {
        const double e = sub.singular_values[i] * sub.singular_values[i];
        total += e;
        if (i < sub.rank())
            kept += e;
    }
    const double residual = total > 0.0 ? 1.0 - kept / total : 0.0;
    const std::string hash = sha256_file(out / "subspace.mrfb");
    json side = {{"n_atoms", dict.size()}, {"length", dict.length()}, {"s", sub.rank()}, {"subspace_hash", hash}, {"energy_residual", residual}};
    std::ofstream(out / "dict.json") << side.dump(2) << "\n";
    std::printf("n_atoms %zu\nsubspace s=%zu residual energy %.3e\n", dict.size(), sub.rank(), residual);
    return {{"subspace_hash", hash}};
}

json cmd_simulate(const Context& ctx)
{
    const RunConfig c = ctx.config();
    const fs::path out = ctx.path("out");
    const DictFiles d = load_dict_dir(ctx.path("dict"));
    const AcquisitionOperator op = make_operator(c, d.sub);
    const Phantom ph = make_phantom(c.phantom_spec(), c.phantom.matrix, c.grid_spec());
    const KSpaceData y = simulate_measurements(ph, c.sequence_params(), d.sub, op, c.noise);
    fs::create_directories(out);
    save_kspace(out / "kspace.mrfb", y);
    save_maps(out / "truth", ph.truth);
    json side = {{"subspace_hash", d.hash}, {"frames", y.frames}, {"coils", y.coils}, {"points", y.points}};
    std::ofstream(out / "data.json") << side.dump(2) << "\n";
    std::printf("k-space %zu frames x %zu coils x %zu points\n", y.frames, y.coils, y.points);
    return {{"subspace_hash", d.hash}};
}

UnrolledModel load_model_checked(const fs::path& dir, const std::string& hash)
{
    json man;
    UnrolledModel m = load_checkpoint(dir, &man);
    check_hash(man.value("subspace_hash", std::string{}), hash, "model " + dir.string());
    return m;
}

json cmd_reconstruct(const Context& ctx)
{
    RunConfig c = ctx.config();
    if (ctx.has("method"))
        c.recon.method = ctx.need("method");
    c.validate();
    const fs::path out = ctx.path("out");
    const DictFiles d = load_dict_dir(ctx.path("dict"));
    const fs::path data = ctx.path("data");
    check_hash(read_json(data / "data.json").value("subspace_hash", std::string{}), d.hash, "data " + data.string());
    const KSpaceData y = load_kspace(data / "kspace.mrfb");
    const AcquisitionOperator op = make_operator(c, d.sub);
    if (!y.same_shape(op.make_kspace()))
        throw ParameterError("data: k-space shape does not match the configured acquisition");
    const std::string& method = c.recon.method;
    QMaps maps;
    ReconTrace trace;
    if (method == "bp-dm") {
        maps = backprojection_baseline(y, op, make_match_table(d.dict, d.sub));
    } else if (method == "dm-pgd") {
        RVec steps = c.recon.steps;
        if (steps.empty())
            steps.assign(c.recon.iterations, 1.0 / estimate_operator_norm(op, c.recon.power_iterations));
        const PgdResult r = pgd_reconstruct(y, op, DictionaryProx(make_match_table(d.dict, d.sub)), {c.recon.iterations, steps, true, false});
        maps = r.maps;
        trace = r.trace;
    } else {
        const UnrolledModel model = load_model_checked(ctx.path("model"), d.hash);
        if (method == "bp-neural") {
            maps = neural_backprojection_baseline(y, op, model);
        } else {
            if (model.iterations() == 0)
                throw ParameterError("--model: neural-unrolled needs a checkpoint trained with iterations >= 1");
            const PgdResult r = neural_unrolled_reconstruct(y, op, model);
            maps = r.maps;
            trace = r.trace;
        }
    }
    save_maps(out, maps);
    if (!trace.fidelity.empty())
        write_trace_csv(out / "trace.csv", trace);
    std::printf("%s reconstruction written to %s\n", method.c_str(), out.string().c_str());
    return {{"method", method}};
}

json cmd_train(const Context& ctx)
{
    RunConfig c = ctx.config();
    if (ctx.has("epochs"))
        c.train.epochs = ctx.count("epochs");
    const std::size_t iterations = ctx.has("iterations") ? ctx.count("iterations") : c.recon.iterations;
    c.validate();
    const fs::path out = ctx.path("out");
    const DictFiles d = load_dict_dir(ctx.path("dict"));
    const SequenceParams seq = c.sequence_params();
    const AcquisitionOperator op = make_operator(c, d.sub);
    const double lambda_max = estimate_operator_norm(op, c.recon.power_iterations);

    BlochDecoderNet decoder;
    EncoderNet encoder(c.encoder_config(), c.train.seed);
    if (ctx.has("init")) {
        const UnrolledModel init = load_model_checked(ctx.path("init"), d.hash);
        encoder = init.encoder();
        decoder = init.decoder();
    } else if (ctx.has("decoder")) {
        decoder = load_model_checked(ctx.path("decoder"), d.hash).decoder();
    } else {
        DecoderPretrainConfig pc;
        pc.hidden = c.train.decoder_hidden;
        pc.steps = c.train.decoder_steps;
        DecoderPretrainReport rep;
        decoder = pretrain_bloch_decoder(d.dict, d.sub, seq, pc, &rep);
        std::printf("decoder pretrained: held-out relative error %.4f\n", rep.holdout_error);
    }
    UnrolledModel model(encoder, decoder, iterations, 1.0 / lambda_max);

    std::vector<TrainingSample> dataset;
    for (std::size_t i = 0; i < c.train.samples; ++i) {
        const Phantom ph = training_phantom(c, i);
        const NoiseSpec noise{c.noise.sigma, c.noise.seed + 1 + i};
        dataset.push_back(make_training_sample(simulate_measurements(ph, seq, d.sub, op, noise), ph.truth, op));
    }
    const TrainHistory h = train_unrolled(dataset, op, model, c.train_config(), [](std::size_t e, double loss) {
        if ((e + 1) % 10 == 0)
            std::printf("epoch %zu loss %.6e\n", e + 1, loss);
    });
    json extra = {{"subspace_hash", d.hash}, {"iterations", iterations}, {"seed", c.train.seed}, {"lambda_max", lambda_max},
                  {"train", c.source.value("train", json::object())}};
    save_checkpoint(out, model, extra, h.epoch_loss);
    std::printf("trained T=%zu for %zu epochs, final loss %.6e\n", iterations, c.train.epochs, h.epoch_loss.back());
    return {{"subspace_hash", d.hash}};
}

json cmd_eval(const Context& ctx)
{
    const QMaps est = load_maps(ctx.path("est"));
    const QMaps truth = load_maps(ctx.path("truth"));
    const fs::path out = ctx.path("out");
    const std::string label = ctx.has("label") ? ctx.need("label") + "/" : "";
    const bool append = ctx.has("append") && fs::exists(out);
    if (!out.parent_path().empty())
        fs::create_directories(out.parent_path());
    std::ofstream os(out, append ? std::ios::app : std::ios::trunc);
    if (!append)
        os << "property,nrmse,mae\n";
    os << std::setprecision(17);
    for (Property p : {Property::t1, Property::t2, Property::pd}) {
        const double n = nrmse(est, truth, p), a = mae(est, truth, p);
        os << label << property_name(p) << "," << n << "," << a << "\n";
        std::printf("%s%s nrmse %.4f mae %.4f\n", label.c_str(), property_name(p).c_str(), n, a);
    }
    if (!os)
        throw Error("eval: failed writing " + out.string());
    return json::object();
}

/// Binary 16-bit PGM, most significant byte first.
void write_pgm16(const fs::path& path, const RVec& v, std::size_t h, std::size_t w, double lo, double hi)
{
    std::ofstream os(path, std::ios::binary);
    os << "P5\n" << w << " " << h << "\n65535\n";
    for (double x : v) {
        const double t = std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
        const auto q = static_cast<std::uint16_t>(std::lround(t * 65535.0));
        const char b[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
        os.write(b, 2);
    }
    if (!os)
        throw Error("render: failed writing " + path.string());
}

json cmd_render(const Context& ctx)
{
    const QMaps m = load_maps(ctx.path("maps"));
    const fs::path out = ctx.path("out");
    fs::create_directories(out);
    // Fixed windows so images from different runs compare directly.
    write_pgm16(out / "t1.pgm", m.t1_ms, m.height, m.width, 0.0, 4000.0);
    write_pgm16(out / "t2.pgm", m.t2_ms, m.height, m.width, 0.0, 600.0);
    write_pgm16(out / "pd.pgm", m.pd, m.height, m.width, 0.0, 1.5);
    if (ctx.has("truth")) {
        const QMaps truth = load_maps(ctx.path("truth"));
        for (Property p : {Property::t1, Property::t2, Property::pd})
            std::printf("%s nrmse %.4f\n", property_name(p).c_str(), nrmse(m, truth, p));
    }
    return json::object();
}

int run(Context ctx);

json cmd_rerun(const Context& ctx)
{
    const json man = read_json(ctx.path("manifest"));
    Context again;
    try {
        again.command = man.at("command").get<std::string>();
        again.args = man.at("args").get<Args>();
        again.config_doc = man.at("config");
        again.threads = man.value("threads", 1);
    } catch (const json::exception& e) {
        throw FormatError("rerun: malformed manifest: " + std::string(e.what()));
    }
    if (again.command == "rerun")
        throw ParameterError("rerun: manifest records another rerun");
    again.args["out"] = fs::absolute(ctx.path("out")).string();
    set_thread_count(again.threads);
    if (const int rc = run(again); rc != 0)
        throw Error("rerun: replayed command exited with code " + std::to_string(rc));
    const json now = hash_outputs(again.path("out"));
    const json& before = man.at("outputs");
    if (now != before) {
        for (const auto& [k, v] : before.items())
            if (!now.contains(k) || now[k] != v)
                std::fprintf(stderr, "rerun: %s differs\n", k.c_str());
        throw Error("rerun: outputs differ from the manifest");
    }
    std::printf("rerun reproduced %zu output files\n", now.size());
    return {{"replayed", again.command}};
}

using Handler = json (*)(const Context&);

const std::map<std::string, Handler>& handlers()
{
    static const std::map<std::string, Handler> h{{"build-dict", cmd_build_dict}, {"simulate", cmd_simulate}, {"reconstruct", cmd_reconstruct},
                                                  {"train", cmd_train},           {"eval", cmd_eval},         {"render", cmd_render},
                                                  {"rerun", cmd_rerun}};
    return h;
}

int run(Context ctx)
{
    const auto t0 = std::chrono::steady_clock::now();
    try {
        for (auto& [k, v] : ctx.args)
            if (kPathArgs.count(k) && !v.empty())
                v = fs::absolute(v).lexically_normal().string();
        if (ctx.config_doc.is_null() && ctx.has("config")) {
            std::ifstream is(ctx.path("config"));
            if (!is)
                throw ParameterError("--config: cannot open " + ctx.need("config"));
            try {
                ctx.config_doc = json::parse(is);
            } catch (const json::exception& e) {
                throw ParameterError("--config: invalid JSON: " + std::string(e.what()));
            }
        }
        if (!ctx.config_doc.is_null())
            parse_run_config(ctx.config_doc);
        const json extra = handlers().at(ctx.command)(ctx);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_manifest(ctx, wall, extra);
        return 0;
    } catch (const ParameterError& e) {
        std::fprintf(stderr, "mrf %s: %s\n", ctx.command.c_str(), e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "mrf %s: %s\n", ctx.command.c_str(), e.what());
        return kExitRuntime;
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Compressive MR fingerprinting with unrolled neural proximal operators"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker threads; 1 is bit-reproducible")->check(CLI::PositiveNumber);

    std::map<std::string, Args> values;
    auto sub = [&](const std::string& name, const std::string& help, std::vector<std::pair<std::string, bool>> opts) {
        CLI::App* s = app.add_subcommand(name, help);
        for (const auto& [opt, required] : opts) {
            auto* o = s->add_option("--" + opt, values[name][opt]);
            if (required)
                o->required();
        }
        return s;
    };
    sub("build-dict", "simulate the dictionary and its subspace", {{"config", false}, {"out", true}, {"s", false}});
    sub("simulate", "simulate phantom k-space", {{"config", false}, {"dict", true}, {"out", true}});
    sub("reconstruct", "estimate T1, T2 and PD maps",
        {{"config", false}, {"dict", true}, {"data", true}, {"method", false}, {"model", false}, {"out", true}});
    sub("train", "train the neural proximal operator",
        {{"config", false}, {"dict", true}, {"out", true}, {"iterations", false}, {"epochs", false}, {"init", false}, {"decoder", false}});
    CLI::App* ev = sub("eval", "write property,nrmse,mae rows", {{"est", true}, {"truth", true}, {"out", true}, {"label", false}});
    bool append = false;
    ev->add_flag("--append", append, "append rows to an existing file");
    sub("render", "write 16-bit PGM images", {{"maps", true}, {"out", true}, {"truth", false}});
    sub("rerun", "replay a manifest and check its outputs", {{"manifest", true}, {"out", true}});

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }
    Context ctx;
    ctx.command = app.get_subcommands().front()->get_name();
    ctx.threads = threads;
    for (const auto& [k, v] : values[ctx.command])
        if (!v.empty())
            ctx.args[k] = v;
    if (append)
        ctx.args["append"] = "1";
    set_thread_count(threads);
    return run(ctx);
}
