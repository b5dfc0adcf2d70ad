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
#include "mrf/neural.hpp"

#include "support.hpp"
#include "tiny_unrolled.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace mrf;
using namespace mrf::testing;

namespace {

std::vector<RVec> snapshot(const UnrolledModel& m)
{
    std::vector<RVec> out;
    for (const auto* p : m.parameters())
        out.push_back(p->value.data);
    return out;
}

std::vector<RVec> decoder_snapshot(const UnrolledModel& m)
{
    std::vector<RVec> out;
    for (const auto* p : m.decoder().parameters())
        out.push_back(p->value.data);
    return out;
}

} // namespace

TEST(Neural, SplitAndMergeAreExactInverses)
{
    std::mt19937_64 rng(1);
    const TSMI x = random_tsmi(3, 5, rng);
    const ad::Tensor t = split_complex(x);
    EXPECT_EQ(t.rows, 6u);
    EXPECT_EQ(t(4, 7), x.at(1, 7).imag());
    EXPECT_EQ(merge_complex(t, 5, 5).data, x.data);
    KSpaceData y(2, 3, 4);
    y.data = random_cvec(24, rng);
    EXPECT_EQ(merge_kspace(split_complex(y), 2, 3, 4).data, y.data);
    EXPECT_THROW(merge_complex(t, 4, 5), ShapeError);
    EXPECT_THROW(merge_kspace(split_complex(y), 2, 3, 5), ShapeError);
}

TEST(Neural, EncoderOutputsRespectBounds)
{
    std::mt19937_64 rng(2);
    for (bool se : {false, true}) {
        EncoderConfig cfg;
        cfg.rank = 2;
        cfg.width = 6;
        cfg.squeeze_excite = se;
        const EncoderNet enc(cfg, 5);
        for (double amp : {1e-3, 1.0, 1e3, 1e6}) {
            ad::Tape tape;
            ad::Tensor g(4, 36);
            std::normal_distribution<double> n(0.0, amp);
            for (auto& v : g.data)
                v = n(rng);
            const ad::Tensor m = enc.forward(tape, tape.constant(g), 6, 6).value();
            for (std::size_t v = 0; v < 36; ++v) {
                EXPECT_GE(m(0, v), 100.0);
                EXPECT_LE(m(0, v), 4000.0);
                EXPECT_GE(m(1, v), 10.0);
                EXPECT_LE(m(1, v), 600.0);
                EXPECT_GE(m(2, v), 0.0);
                EXPECT_LE(m(2, v), 2.0);
            }
        }
    }
}

TEST(Neural, ZeroInputGivesBiasPropagatedConstantMaps)
{
    EncoderConfig cfg;
    cfg.rank = 3;
    cfg.width = 8;
    const EncoderNet enc(cfg, 9);
    auto run = [&] {
        ad::Tape tape;
        return enc.forward(tape, tape.constant(ad::Tensor(6, 49)), 7, 7).value();
    };
    const ad::Tensor a = run();
    // Zero biases propagate zeros; sigmoid(0) = 1/2 lands mid-range.
    for (std::size_t v = 0; v < 49; ++v) {
        EXPECT_EQ(a(0, v), 2050.0);
        EXPECT_EQ(a(1, v), 305.0);
        EXPECT_EQ(a(2, v), 1.0);
    }
    EXPECT_EQ(a.data, run().data);
}

TEST(Neural, ProxEqualsEncoderThenDecoder)
{
    TinyUnrolled t = make_tiny_unrolled();
    std::mt19937_64 rng(3);
    const TSMI g = random_tsmi(3, 8, rng);
    const ProxResult p = neural_prox_apply(t.model, g);

    ad::Tape tape;
    const ad::Tensor m = t.model.encoder().forward(tape, tape.constant(split_complex(g)), 8, 8).value();
    RVec t1(64), t2(64);
    for (std::size_t v = 0; v < 64; ++v) {
        t1[v] = m(0, v);
        t2[v] = m(1, v);
        EXPECT_EQ(p.maps.t1_ms[v], m(0, v));
        EXPECT_EQ(p.maps.pd[v], m(2, v));
    }
    const CMatrix f = t.model.decoder().evaluate(t1, t2);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t v = 0; v < 64; ++v) {
            // PD multiplies outside the net, so the composition is exactly linear in PD.
            const cplx expect = m(2, v) * f(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(c));
            EXPECT_EQ(p.x.at(c, v), expect);
        }
    EXPECT_THROW(neural_prox_apply(t.model, random_tsmi(2, 8, rng)), ShapeError);
    TSMI bad = g;
    bad.data[5] = {std::nan(""), 0.0};
    EXPECT_THROW(neural_prox_apply(t.model, bad), DivergenceError);
}

TEST(Neural, WeightsAreSharedAcrossIterations)
{
    TinyUnrolled t = make_tiny_unrolled();
    const std::size_t base = t.model.with_iterations(0, 1.0).parameters().size();
    for (std::size_t iters : {1u, 2u, 5u, 9u}) {
        UnrolledModel m = t.model.with_iterations(iters, 0.25);
        EXPECT_EQ(m.parameters().size(), base + iters);
        for (double a : m.step_sizes())
            EXPECT_NEAR(a, 0.25, 1e-16);
    }
    EXPECT_THROW(t.model.with_iterations(2, 0.0), ParameterError);
    EXPECT_TRUE(t.model.decoder().frozen());
}

TEST(Neural, UnrolledGradientsMatchFiniteDifferences)
{
    TinyUnrolled t = make_tiny_unrolled();
    const GradientCheck c = check_unrolled_gradients(t);
    EXPECT_EQ(c.failed, 0u) << "worst " << c.worst << " at " << c.worst_name;
    EXPECT_EQ(c.checked, 481u);
}

TEST(Neural, UnrolledGradientsMatchAcrossSeedsAndArchitectures)
{
    // A leaky-rectifier kink inside the stencil, or a gradient near the
    // rounding floor of the loss, can spoil one step size; three steps cover both.
    for (std::uint64_t seed : {4u, 7u, 8u})
        for (bool se : {false, true}) {
            TinyUnrolled t = make_tiny_unrolled(2, se, seed);
            t.cfg.lambda = 0.05;
            const GradientCheck c = check_unrolled_gradients(t, {1e-4, 1e-5, 1e-6});
            EXPECT_EQ(c.failed, 0u) << "seed " << seed << " se " << se << " worst " << c.worst << " at " << c.worst_name;
        }
}

TEST(Neural, FrozenDecoderNeverReceivesGradients)
{
    TinyUnrolled t = make_tiny_unrolled();
    ad::Tape tape;
    const LossTerms lt = unrolled_loss(tape, t.model, *t.op, t.sample, t.cfg);
    const ad::Gradients g1 = tape.backward(lt.total);
    const ad::Gradients g2 = tape.backward(lt.total);
    for (const auto* p : t.model.decoder().parameters())
        EXPECT_EQ(g1.count(p), 0u) << p->name;
    // Every encoder weight and step size does get one, identically on a second pass.
    EXPECT_EQ(g1.size(), t.model.trainable_parameters().size());
    for (const auto& [p, grad] : g1)
        EXPECT_EQ(grad.data, g2.at(p).data);
}

TEST(Neural, TapeMatchesReconstructionPath)
{
    TinyUnrolled t = make_tiny_unrolled();
    const PgdResult r = neural_unrolled_reconstruct(t.sample.y, *t.op, t.model);
    ad::Tape tape;
    const LossTerms lt = unrolled_loss(tape, t.model, *t.op, t.sample, t.cfg);
    // Map loss of the reconstruction path, recomputed by hand.
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < 64; ++v)
        if (t.sample.truth.mask[v]) {
            const double d = (r.maps.t1_ms[v] - t.sample.truth.t1_ms[v]) / 4000.0;
            acc += d * d;
            ++n;
        }
    EXPECT_NEAR(lt.maps[0], acc / static_cast<double>(n), 1e-12 * lt.maps[0]);
    ASSERT_EQ(lt.kspace.size(), 2u);
    ASSERT_EQ(r.trace.fidelity.size(), 3u);
    // k-space terms are fidelities normalised by ||y||^2.
    EXPECT_NEAR(lt.kspace[1], r.trace.fidelity[2] / norm2(t.sample.y.data), 1e-10 * lt.kspace[1]);
}

TEST(Neural, BackprojectionBaselineIsTheZeroIterationModel)
{
    TinyUnrolled t = make_tiny_unrolled();
    const UnrolledModel m0 = t.model.with_iterations(0, 1.0);
    const QMaps a = neural_backprojection_baseline(t.sample.y, *t.op, m0);
    const QMaps b = neural_unrolled_reconstruct(t.sample.y, *t.op, m0).maps;
    EXPECT_EQ(a.t1_ms, b.t1_ms);
    EXPECT_EQ(a.t2_ms, b.t2_ms);
    EXPECT_EQ(a.pd, b.pd);
    ad::Tape tape;
    const ad::Tensor m = t.model.encoder().forward(tape, tape.constant(split_complex(backproject(*t.op, t.sample.y))), 8, 8).value();
    for (std::size_t v = 0; v < 64; ++v)
        EXPECT_EQ(a.t2_ms[v], m(1, v));
}

TEST(Neural, TrainingIsDeterministicAndKeepsDecoderFrozen)
{
    auto train = [] {
        TinyUnrolled t = make_tiny_unrolled();
        std::vector<TrainingSample> data{t.sample};
        const Phantom ph = random_phantom(8, 77);
        data.push_back(make_training_sample(simulate_measurements(ph, t.seq, t.sub, *t.op, {0.01, 5}), ph.truth, *t.op));
        const auto before = decoder_snapshot(t.model);
        t.cfg.epochs = 4;
        t.cfg.seed = 21;
        const TrainHistory h = train_unrolled(data, *t.op, t.model, t.cfg);
        EXPECT_EQ(decoder_snapshot(t.model), before);
        return std::pair{h.epoch_loss, snapshot(t.model)};
    };
    const auto [h1, w1] = train();
    const auto [h2, w2] = train();
    ASSERT_EQ(h1.size(), 4u);
    EXPECT_EQ(h1, h2);
    EXPECT_EQ(w1, w2);
}

TEST(Neural, SupervisedRegressionLossHalves)
{
    // Identity-like H: one coil of ones, fully sampled Cartesian, flat rank-1 basis.
    constexpr std::size_t n = 8;
    const Subspace sub = random_subspace(1, 1, 1);
    const AcquisitionOperator op(CoilMaps::ones(1, n), make_trajectory(TrajectoryKind::cartesian_full, n, n, 1), sub);
    EncoderConfig ec;
    ec.rank = 1;
    ec.width = 8;
    UnrolledModel model(EncoderNet(ec, 4), BlochDecoderNet(1, 8, 5), 1, 1.0 / estimate_operator_norm(op, 20));
    std::vector<TrainingSample> data;
    for (std::uint64_t seed : {31u, 32u}) {
        const Phantom ph = random_phantom(n, seed);
        TSMI x(1, n, n);
        for (std::size_t v = 0; v < n * n; ++v)
            x.data[v] = ph.truth.pd[v] * cplx{std::log(ph.truth.t1_ms[v] + 1.0), std::log(ph.truth.t2_ms[v] + 1.0)};
        data.push_back(make_training_sample(op.forward(x), ph.truth, op));
    }
    TrainConfig cfg;
    cfg.lambda = 0.0;
    cfg.epochs = 200;
    cfg.lr = 1e-2;
    const TrainHistory h = train_unrolled(data, op, model, cfg);
    EXPECT_LE(h.epoch_loss.back(), 0.5 * h.epoch_loss.front()) << h.epoch_loss.front() << " -> " << h.epoch_loss.back();
}

TEST(Neural, TrainConfigDefaultsAndValidation)
{
    const TrainConfig d;
    EXPECT_EQ(d.beta, (std::array<double, 3>{1.0, 0.3, 0.6}));
    EXPECT_EQ(d.lambda, 1e-3);
    EXPECT_EQ(d.lr, 1e-3);
    EXPECT_EQ(d.batch_size, 1u);
    EXPECT_NO_THROW(d.validate());
    TrainConfig c = d;
    c.beta[1] = -0.1;
    EXPECT_THROW(c.validate(), ParameterError);
    c = d;
    c.lambda = std::nan("");
    EXPECT_THROW(c.validate(), ParameterError);
    c = d;
    c.epochs = 0;
    EXPECT_THROW(c.validate(), ParameterError);
    c = d;
    c.batch_size = 4;
    EXPECT_THROW(c.validate(), ParameterError);

    TinyUnrolled t = make_tiny_unrolled();
    EXPECT_THROW(train_unrolled({}, *t.op, t.model, d), ParameterError);
}

TEST(Neural, NonFiniteSampleIsRejected)
{
    TinyUnrolled t = make_tiny_unrolled();
    KSpaceData y = t.sample.y;
    y.data[3] = {std::nan(""), 0.0};
    std::vector<TrainingSample> data{make_training_sample(y, t.sample.truth, *t.op)};
    t.cfg.epochs = 1;
    EXPECT_THROW(train_unrolled(data, *t.op, t.model, t.cfg), DivergenceError);
}

TEST(Neural, DecoderPretrainingFitsEpgOracle)
{
    const SequenceParams seq = default_sequence(200);
    const DictionaryGrid dict = build_dictionary(seq, {logspace(100.0, 4000.0, 20), logspace(10.0, 600.0, 16)});
    const Subspace sub = compute_subspace(dict, 6);
    DecoderPretrainConfig cfg;
    cfg.offgrid_pairs = 300;
    cfg.holdout_pairs = 200;
    cfg.steps = 2500;
    DecoderPretrainReport rep;
    const BlochDecoderNet dec = pretrain_bloch_decoder(dict, sub, seq, cfg, &rep);
    EXPECT_TRUE(dec.frozen());
    EXPECT_LT(rep.holdout_error, 0.02);
    EXPECT_LT(rep.loss_history.back(), rep.loss_history.front());
    // The on-grid pair against EPG followed by compression.
    const CMatrix ref = compressed_fingerprints(seq, sub, {1000.0}, {100.0});
    EXPECT_LT(decoder_relative_errors(dec, {1000.0}, {100.0}, ref)[0], 0.02);

    cfg.steps = 2;
    try {
        pretrain_bloch_decoder(dict, sub, seq, cfg);
        FAIL() << "expected a training failure";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("final loss"), std::string::npos) << e.what();
    }
}

TEST(Neural, CheckpointRoundTripIsBitExact)
{
    TinyUnrolled t = make_tiny_unrolled(3, true);
    TempDir dir("ckpt");
    const nlohmann::json extra = {{"seed", 12}, {"train", {{"lambda", 1e-3}}}};
    save_checkpoint(dir.path(), t.model, extra, {0.5, 0.25, 1.0 / 3.0});
    nlohmann::json man;
    const UnrolledModel back = load_checkpoint(dir.path(), &man);
    EXPECT_EQ(snapshot(back), snapshot(t.model));
    EXPECT_EQ(back.iterations(), 3u);
    EXPECT_TRUE(back.decoder().frozen());
    EXPECT_EQ(man.at("seed"), 12);
    EXPECT_EQ(man.at("architecture").at("squeeze_excite"), true);
    EXPECT_EQ(man.at("parameters").size(), t.model.parameters().size());

    std::ifstream csv(dir / "loss.csv");
    std::stringstream ss;
    ss << csv.rdbuf();
    EXPECT_EQ(ss.str(), "epoch,loss\n0,0.5\n1,0.25\n2,0.33333333333333331\n");

    std::mt19937_64 rng(8);
    const TSMI g = random_tsmi(3, 8, rng);
    EXPECT_EQ(neural_prox_apply(back, g).x.data, neural_prox_apply(t.model, g).x.data);

    write_tensor(dir / "encoder.conv0.weight.mrfb", RVec(3, 0.0), Dims{1, 3});
    EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
    std::filesystem::remove(dir / "encoder.conv0.weight.mrfb");
    EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
    std::ofstream(dir / "model.json") << "{\"architecture\": {}}";
    EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
}
