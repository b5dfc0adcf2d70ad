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

// Learned proximal map x = PD * decoder(T1, T2) with (T1, T2, PD) = encoder(g),
// the unrolled reconstruction built from it, and its trainers.

#include "mrf/autodiff.hpp"
#include "mrf/dictionary.hpp"
#include "mrf/recon.hpp"
#include "mrf/tensor_file.hpp"

#include "json.hpp"

#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace mrf {

/// Output ranges of the encoder's bounded activations, in T1, T2, PD order.
struct MapBounds {
    std::array<double, 3> lo{100.0, 10.0, 0.0};
    std::array<double, 3> hi{4000.0, 600.0, 2.0};
};

// ---------------------------------------------------------------------------
// Real views of complex data. Complex s-channel images become 2s real rows:
// real parts first, then imaginary parts.

inline ad::Tensor split_complex(const TSMI& x)
{
    const std::size_t s = x.channels, d = x.voxels();
    ad::Tensor t(2 * s, d);
    for (std::size_t c = 0; c < s; ++c)
        for (std::size_t v = 0; v < d; ++v) {
            t(c, v) = x.at(c, v).real();
            t(s + c, v) = x.at(c, v).imag();
        }
    return t;
}

inline TSMI merge_complex(const ad::Tensor& t, std::size_t height, std::size_t width)
{
    if (t.rows % 2 != 0 || t.cols != height * width)
        throw ShapeError("merge_complex: tensor " + t.shape_string() + " is not a complex image of " + std::to_string(height) + "x" +
                         std::to_string(width));
    const std::size_t s = t.rows / 2;
    TSMI x(s, height, width, TemporalDomain::subspace);
    for (std::size_t c = 0; c < s; ++c)
        for (std::size_t v = 0; v < x.voxels(); ++v)
            x.at(c, v) = {t(c, v), t(s + c, v)};
    return x;
}

inline ad::Tensor split_complex(const KSpaceData& y)
{
    const std::size_t m = y.data.size();
    ad::Tensor t(2, m);
    for (std::size_t i = 0; i < m; ++i) {
        t(0, i) = y.data[i].real();
        t(1, i) = y.data[i].imag();
    }
    return t;
}

inline KSpaceData merge_kspace(const ad::Tensor& t, std::size_t frames, std::size_t coils, std::size_t points)
{
    KSpaceData y(frames, coils, points);
    if (t.rows != 2 || t.cols != y.data.size())
        throw ShapeError("merge_kspace: tensor " + t.shape_string() + " does not match the k-space layout");
    for (std::size_t i = 0; i < y.data.size(); ++i)
        y.data[i] = {t(0, i), t(1, i)};
    return y;
}

/// H as a real linear map on split images. Its transpose is the split H^H.
inline ad::Var apply_forward(ad::Var x, const AcquisitionOperator& op)
{
    const std::size_t n = op.matrix(), f = op.frames(), c = op.coils(), p = op.points();
    return ad::linear_map(
        x, 2, f * c * p, [&op, n](const ad::Tensor& v) { return split_complex(op.forward(merge_complex(v, n, n))); },
        [&op, f, c, p](const ad::Tensor& g) { return split_complex(op.adjoint(merge_kspace(g, f, c, p))); });
}

inline ad::Var apply_adjoint(ad::Var y, const AcquisitionOperator& op)
{
    const std::size_t n = op.matrix(), f = op.frames(), c = op.coils(), p = op.points();
    return ad::linear_map(
        y, 2 * op.rank(), n * n, [&op, f, c, p](const ad::Tensor& g) { return split_complex(op.adjoint(merge_kspace(g, f, c, p))); },
        [&op, n](const ad::Tensor& v) { return split_complex(op.forward(merge_complex(v, n, n))); });
}

// ---------------------------------------------------------------------------

namespace detail {

inline ad::Parameter uniform_parameter(std::string name, std::size_t rows, std::size_t cols, double limit, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(-limit, limit);
    ad::Parameter p{std::move(name), ad::Tensor(rows, cols), true};
    for (auto& v : p.value.data)
        v = u(rng);
    return p;
}

inline ad::Parameter zero_parameter(std::string name, std::size_t rows, std::size_t cols) { return {std::move(name), ad::Tensor(rows, cols), true}; }

inline void check_layer(const ad::Var& v, const std::string& where, std::size_t layer)
{
    if (!all_finite(v.value().data))
        throw DivergenceError(where + ": non-finite activations at layer " + std::to_string(layer));
}

} // namespace detail

struct EncoderConfig {
    std::size_t rank = 10;  ///< s; the net sees 2s real channels
    std::size_t width = 32;
    std::size_t depth = 3;  ///< number of conv layers
    bool squeeze_excite = false;
    std::size_t se_reduction = 4;
    double leaky_slope = 0.01;
    MapBounds bounds;

    void validate() const
    {
        if (rank < 1)
            throw ParameterError("encoder: rank must be >= 1");
        if (width < 1)
            throw ParameterError("encoder: width must be >= 1");
        if (depth < 2)
            throw ParameterError("encoder: depth must be >= 2");
        if (squeeze_excite && se_reduction < 1)
            throw ParameterError("encoder: se_reduction must be >= 1");
        for (std::size_t j = 0; j < 3; ++j)
            if (!(bounds.hi[j] > bounds.lo[j]))
                throw ParameterError("encoder: empty output range for " + property_name(static_cast<Property>(j)));
    }
};

/// Conv stack 2s -> w -> ... -> w -> 3 with leaky rectifiers, an optional
/// squeeze-excite block after the last hidden layer, and scaled sigmoid outputs.
class EncoderNet {
public:
    EncoderNet() = default;

    EncoderNet(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg)
    {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        std::size_t cin = 2 * cfg_.rank;
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::size_t cout = (l + 1 == cfg_.depth) ? 3 : cfg_.width;
            const std::string tag = "encoder.conv" + std::to_string(l);
            const double fan_in = static_cast<double>(cin * 9);
            // He-uniform for the rectified layers, Glorot-like for the sigmoid head.
            const double limit = (l + 1 == cfg_.depth) ? std::sqrt(3.0 / fan_in) : std::sqrt(6.0 / fan_in);
            conv_.push_back({detail::uniform_parameter(tag + ".weight", cout, cin * 9, limit, rng), detail::zero_parameter(tag + ".bias", cout, 1)});
            cin = cout;
        }
        if (cfg_.squeeze_excite) {
            const std::size_t w = cfg_.width, hidden = std::max<std::size_t>(1, w / cfg_.se_reduction);
            se_.push_back(detail::uniform_parameter("encoder.se0.weight", hidden, w, std::sqrt(6.0 / static_cast<double>(w)), rng));
            se_.push_back(detail::zero_parameter("encoder.se0.bias", hidden, 1));
            se_.push_back(detail::uniform_parameter("encoder.se1.weight", w, hidden, std::sqrt(3.0 / static_cast<double>(hidden)), rng));
            se_.push_back(detail::zero_parameter("encoder.se1.bias", w, 1));
        }
    }

    const EncoderConfig& config() const { return cfg_; }

    /// g is (2s, h*w); returns (3, h*w) rows T1 [ms], T2 [ms], PD.
    ad::Var forward(ad::Tape& tape, ad::Var g, std::size_t h, std::size_t w) const
    {
        if (g.rows() != 2 * cfg_.rank)
            throw ShapeError("encoder: expected " + std::to_string(2 * cfg_.rank) + " input channels, got " + std::to_string(g.rows()));
        ad::Var a = g;
        for (std::size_t l = 0; l < conv_.size(); ++l) {
            a = ad::conv3x3(a, tape.param(conv_[l].first), tape.param(conv_[l].second), h, w);
            detail::check_layer(a, "encoder", l);
            if (l + 1 < conv_.size()) {
                a = ad::leaky_relu(a, cfg_.leaky_slope);
                if (cfg_.squeeze_excite && l + 2 == conv_.size())
                    a = squeeze_excite(tape, a);
            }
        }
        const auto& b = cfg_.bounds;
        return ad::bounded_sigmoid(a, RVec(b.lo.begin(), b.lo.end()), RVec(b.hi.begin(), b.hi.end()));
    }

    std::vector<ad::Parameter*> parameters()
    {
        std::vector<ad::Parameter*> out;
        for (auto& [wt, bs] : conv_) {
            out.push_back(&wt);
            out.push_back(&bs);
        }
        for (auto& p : se_)
            out.push_back(&p);
        return out;
    }

    std::vector<const ad::Parameter*> parameters() const
    {
        std::vector<const ad::Parameter*> out;
        for (auto* p : const_cast<EncoderNet*>(this)->parameters())
            out.push_back(p);
        return out;
    }

private:
    ad::Var squeeze_excite(ad::Tape& tape, ad::Var a) const
    {
        ad::Var z = ad::mean_cols(a);
        z = ad::leaky_relu(ad::linear(z, tape.param(se_[0]), tape.param(se_[1])), cfg_.leaky_slope);
        z = ad::sigmoid(ad::linear(z, tape.param(se_[2]), tape.param(se_[3])));
        return ad::mul_cols(a, z);
    }

    EncoderConfig cfg_;
    std::vector<std::pair<ad::Parameter, ad::Parameter>> conv_;
    std::vector<ad::Parameter> se_;
};

// ---------------------------------------------------------------------------

/// Per-voxel MLP (T1, T2) -> compressed unit-PD fingerprint (2s real outputs).
/// Inputs are log-mapped onto [-1, 1] over the encoder's output ranges.
class BlochDecoderNet {
public:
    BlochDecoderNet() = default;

    BlochDecoderNet(std::size_t rank, std::size_t hidden, std::uint64_t seed, MapBounds bounds = {}) : rank_(rank), hidden_(hidden), bounds_(bounds)
    {
        if (rank < 1 || hidden < 1)
            throw ParameterError("decoder: rank and hidden width must be >= 1");
        std::mt19937_64 rng(seed);
        auto glorot = [](std::size_t a, std::size_t b) { return std::sqrt(6.0 / static_cast<double>(a + b)); };
        layers_.push_back(detail::uniform_parameter("decoder.fc0.weight", hidden, 2, glorot(2, hidden), rng));
        layers_.push_back(detail::zero_parameter("decoder.fc0.bias", hidden, 1));
        layers_.push_back(detail::uniform_parameter("decoder.fc1.weight", hidden, hidden, glorot(hidden, hidden), rng));
        layers_.push_back(detail::zero_parameter("decoder.fc1.bias", hidden, 1));
        layers_.push_back(detail::uniform_parameter("decoder.fc2.weight", 2 * rank, hidden, glorot(hidden, 2 * rank), rng));
        layers_.push_back(detail::zero_parameter("decoder.fc2.bias", 2 * rank, 1));
    }

    std::size_t rank() const { return rank_; }
    std::size_t hidden() const { return hidden_; }
    const MapBounds& bounds() const { return bounds_; }

    /// The log map of T1 and T2 onto [-1, 1].
    ad::Var normalise(ad::Var t1, ad::Var t2) const
    {
        auto map = [](ad::Var t, double lo, double hi) {
            const double a = 2.0 / (std::log(hi) - std::log(lo));
            return ad::affine(ad::log(t), a, -1.0 - a * std::log(lo));
        };
        return ad::concat_rows({map(t1, bounds_.lo[0], bounds_.hi[0]), map(t2, bounds_.lo[1], bounds_.hi[1])});
    }

    /// t1, t2 are (1, n) rows in ms; returns (2s, n).
    ad::Var forward(ad::Tape& tape, ad::Var t1, ad::Var t2) const
    {
        ad::Var a = normalise(t1, t2);
        for (std::size_t l = 0; l < 3; ++l) {
            a = ad::linear(a, tape.param(layers_[2 * l]), tape.param(layers_[2 * l + 1]));
            detail::check_layer(a, "decoder", l);
            if (l < 2)
                a = ad::tanh(a);
        }
        return a;
    }

    /// Compressed fingerprints for given (T1, T2) pairs, off-tape.
    CMatrix evaluate(const RVec& t1_ms, const RVec& t2_ms) const
    {
        ad::Tape tape;
        const ad::Var out = forward(tape, tape.constant(ad::Tensor(1, t1_ms.size(), t1_ms)), tape.constant(ad::Tensor(1, t2_ms.size(), t2_ms)));
        CMatrix f(static_cast<Eigen::Index>(t1_ms.size()), static_cast<Eigen::Index>(rank_));
        for (std::size_t i = 0; i < t1_ms.size(); ++i)
            for (std::size_t c = 0; c < rank_; ++c)
                f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = {out.value()(c, i), out.value()(rank_ + c, i)};
        return f;
    }

    void freeze()
    {
        for (auto& p : layers_)
            p.trainable = false;
    }

    void unfreeze()
    {
        for (auto& p : layers_)
            p.trainable = true;
    }

    bool frozen() const
    {
        return std::none_of(layers_.begin(), layers_.end(), [](const ad::Parameter& p) { return p.trainable; });
    }

    std::vector<ad::Parameter*> parameters()
    {
        std::vector<ad::Parameter*> out;
        for (auto& p : layers_)
            out.push_back(&p);
        return out;
    }

    std::vector<const ad::Parameter*> parameters() const
    {
        std::vector<const ad::Parameter*> out;
        for (const auto& p : layers_)
            out.push_back(&p);
        return out;
    }

private:
    std::size_t rank_ = 0;
    std::size_t hidden_ = 0;
    MapBounds bounds_;
    std::vector<ad::Parameter> layers_;
};

// ---------------------------------------------------------------------------

struct DecoderPretrainConfig {
    std::size_t hidden = 64;
    std::size_t offgrid_pairs = 1500;  ///< random pairs simulated in addition to the atoms
    std::size_t holdout_pairs = 500;
    std::size_t steps = 4000;          ///< full-batch Adam steps
    double lr = 1e-2;
    double final_lr = 1e-4;            ///< learning rate decays geometrically to this
    double target_error = 0.02;
    std::uint64_t seed = 7;
};

/// Random (T1, T2) pairs, both log-uniform, with T2 <= T1, inside the bounds.
inline std::pair<RVec, RVec> random_relaxation_pairs(std::size_t n, std::uint64_t seed, const MapBounds& b = {})
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RVec t1(n), t2(n);
    for (std::size_t i = 0; i < n; ++i) {
        t1[i] = b.lo[0] * std::pow(b.hi[0] / b.lo[0], u(rng));
        const double t2_hi = std::min(b.hi[1], t1[i]);
        t2[i] = b.lo[1] * std::pow(t2_hi / b.lo[1], u(rng));
    }
    return {t1, t2};
}

/// Compressed unit-PD EPG fingerprints, one row per pair.
inline CMatrix compressed_fingerprints(const SequenceParams& seq, const Subspace& sub, const RVec& t1_ms, const RVec& t2_ms, const EpgOptions& epg = {})
{
    if (seq.length() != sub.length())
        throw ShapeError("fingerprints: sequence length " + std::to_string(seq.length()) + " != subspace length " + std::to_string(sub.length()));
    CMatrix out(static_cast<Eigen::Index>(t1_ms.size()), static_cast<Eigen::Index>(sub.rank()));
    parallel_for(t1_ms.size(), [&](std::size_t i) {
        const Fingerprint f = simulate_epg(seq, {t1_ms[i], t2_ms[i], 1.0}, epg);
        const Eigen::Map<const Eigen::RowVectorXcd> row(f.data(), static_cast<Eigen::Index>(f.size()));
        out.row(static_cast<Eigen::Index>(i)) = row * sub.basis.conjugate();
    });
    return out;
}

/// Per-pair ||decoder - reference|| / ||reference||.
inline RVec decoder_relative_errors(const BlochDecoderNet& dec, const RVec& t1_ms, const RVec& t2_ms, const CMatrix& reference)
{
    const CMatrix f = dec.evaluate(t1_ms, t2_ms);
    RVec err(t1_ms.size());
    for (Eigen::Index i = 0; i < f.rows(); ++i)
        err[static_cast<std::size_t>(i)] = (f.row(i) - reference.row(i)).norm() / reference.row(i).norm();
    return err;
}

struct DecoderPretrainReport {
    double final_loss = 0.0;
    double train_error = 0.0;    ///< mean relative error on the fitted pairs
    double holdout_error = 0.0;  ///< mean relative error on unseen off-grid pairs
    RVec loss_history;
};

/// Fits the decoder to compressed EPG fingerprints of every dictionary atom and
/// some random off-grid pairs by minimising the relative squared error. The
/// result comes back frozen. Throws TrainingError if the held-out error misses
/// the target.
inline BlochDecoderNet pretrain_bloch_decoder(const DictionaryGrid& dict, const Subspace& sub, const SequenceParams& seq, const DecoderPretrainConfig& cfg,
                                              DecoderPretrainReport* report = nullptr, const EpgOptions& epg = {})
{
    if (dict.size() == 0)
        throw ParameterError("decoder pretraining: empty dictionary");
    if (cfg.steps < 1 || !(cfg.lr > 0.0) || !(cfg.final_lr > 0.0))
        throw ParameterError("decoder pretraining: steps and learning rates must be positive");
    const std::size_t s = sub.rank();
    BlochDecoderNet dec(s, cfg.hidden, cfg.seed);
    const MapBounds& b = dec.bounds();

    RVec t1, t2;
    for (std::size_t j = 0; j < dict.size(); ++j)
        if (dict.atom_t1_ms[j] >= b.lo[0] && dict.atom_t1_ms[j] <= b.hi[0] && dict.atom_t2_ms[j] >= b.lo[1] && dict.atom_t2_ms[j] <= b.hi[1]) {
            t1.push_back(dict.atom_t1_ms[j]);
            t2.push_back(dict.atom_t2_ms[j]);
        }
    // Compressed atoms at unit PD: the unit atom times its norm, projected.
    CMatrix target(static_cast<Eigen::Index>(t1.size()), static_cast<Eigen::Index>(s));
    {
        std::size_t k = 0;
        for (std::size_t j = 0; j < dict.size(); ++j)
            if (dict.atom_t1_ms[j] >= b.lo[0] && dict.atom_t1_ms[j] <= b.hi[0] && dict.atom_t2_ms[j] >= b.lo[1] && dict.atom_t2_ms[j] <= b.hi[1])
                target.row(static_cast<Eigen::Index>(k++)) = dict.atom_norm[j] * dict.atoms.row(static_cast<Eigen::Index>(j)) * sub.basis.conjugate();
    }
    if (cfg.offgrid_pairs > 0) {
        const auto [r1, r2] = random_relaxation_pairs(cfg.offgrid_pairs, cfg.seed ^ 0x0ff9e1dULL, b);
        const CMatrix extra = compressed_fingerprints(seq, sub, r1, r2, epg);
        CMatrix all(target.rows() + extra.rows(), static_cast<Eigen::Index>(s));
        all << target, extra;
        target = std::move(all);
        t1.insert(t1.end(), r1.begin(), r1.end());
        t2.insert(t2.end(), r2.begin(), r2.end());
    }
    const std::size_t n = t1.size();
    ad::Tensor y(2 * s, n);
    RVec weights(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = target.row(static_cast<Eigen::Index>(i));
        for (std::size_t c = 0; c < s; ++c) {
            y(c, i) = row(static_cast<Eigen::Index>(c)).real();
            y(s + c, i) = row(static_cast<Eigen::Index>(c)).imag();
        }
        weights[i] = 1.0 / row.squaredNorm();
    }

    // The net learns fingerprints divided by their RMS size; the output layer
    // absorbs that scale once training is done.
    double mean_sq = 0.0;
    for (double v : y.data)
        mean_sq += v * v;
    const double out_scale = std::sqrt(mean_sq / static_cast<double>(y.size()));
    for (auto& v : y.data)
        v /= out_scale;

    auto params = dec.parameters();
    ad::Adam opt(params, {cfg.lr});
    const double decay = std::pow(cfg.final_lr / cfg.lr, 1.0 / static_cast<double>(cfg.steps));
    double lr = cfg.lr;
    DecoderPretrainReport rep;
    double loss = 0.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        ad::Tape tape;
        const ad::Var pred = dec.forward(tape, tape.constant(ad::Tensor(1, n, t1)), tape.constant(ad::Tensor(1, n, t2)));
        // Column weights 1/|f|^2 make this the mean relative squared error (up to a constant).
        const ad::Var l = ad::weighted_mse(pred, tape.constant(y), weights);
        loss = l.value().data[0];
        if (!std::isfinite(loss))
            throw TrainingError("decoder pretraining: non-finite loss at step " + std::to_string(step));
        rep.loss_history.push_back(loss);
        opt.step(tape.backward(l));
        lr *= decay;
        opt.set_learning_rate(lr);
    }
    {
        auto w = dec.parameters();
        for (std::size_t k = 4; k < 6; ++k)
            for (auto& v : w[k]->value.data)
                v *= out_scale;
    }
    dec.freeze();

    rep.final_loss = loss;
    rep.train_error = mean(decoder_relative_errors(dec, t1, t2, target));
    const auto [h1, h2] = random_relaxation_pairs(cfg.holdout_pairs, cfg.seed ^ 0x401d0a7ULL, b);
    if (cfg.holdout_pairs > 0)
        rep.holdout_error = mean(decoder_relative_errors(dec, h1, h2, compressed_fingerprints(seq, sub, h1, h2, epg)));
    if (report)
        *report = rep;
    if (cfg.holdout_pairs > 0 && !(rep.holdout_error < cfg.target_error)) {
        std::ostringstream os;
        os << "decoder pretraining: held-out relative error " << rep.holdout_error << " misses target " << cfg.target_error << " (final loss " << loss << ")";
        throw TrainingError(os.str());
    }
    return dec;
}

// ---------------------------------------------------------------------------

/// Encoder shared by every iteration, frozen decoder, and one positive step size per iteration.
class UnrolledModel {
public:
    UnrolledModel() = default;

    /// Step sizes start at alpha_init, typically 1 / lambda_max.
    UnrolledModel(EncoderNet encoder, BlochDecoderNet decoder, std::size_t iterations, double alpha_init)
        : encoder_(std::move(encoder)), decoder_(std::move(decoder))
    {
        if (encoder_.config().rank != decoder_.rank())
            throw ShapeError("unrolled model: encoder rank " + std::to_string(encoder_.config().rank) + " != decoder rank " +
                             std::to_string(decoder_.rank()));
        if (iterations > 0 && !(alpha_init > 0.0 && std::isfinite(alpha_init)))
            throw ParameterError("unrolled model: initial step size must be positive");
        decoder_.freeze();
        for (std::size_t t = 0; t < iterations; ++t)
            log_steps_.push_back({"step.log_alpha" + std::to_string(t), ad::Tensor(1, 1, std::log(alpha_init)), true});
    }

    std::size_t iterations() const { return log_steps_.size(); }
    std::size_t rank() const { return decoder_.rank(); }
    const EncoderNet& encoder() const { return encoder_; }
    EncoderNet& encoder() { return encoder_; }
    const BlochDecoderNet& decoder() const { return decoder_; }
    const std::vector<ad::Parameter>& log_steps() const { return log_steps_; }

    RVec step_sizes() const
    {
        RVec a;
        for (const auto& p : log_steps_)
            a.push_back(std::exp(p.value.data[0]));
        return a;
    }

    /// Same encoder and decoder weights with a different iteration count.
    UnrolledModel with_iterations(std::size_t iterations, double alpha_init) const
    {
        return UnrolledModel(encoder_, decoder_, iterations, alpha_init);
    }

    /// Everything that would be saved, in a fixed order.
    std::vector<ad::Parameter*> parameters()
    {
        auto out = encoder_.parameters();
        for (auto* p : decoder_.parameters())
            out.push_back(p);
        for (auto& p : log_steps_)
            out.push_back(&p);
        return out;
    }

    std::vector<const ad::Parameter*> parameters() const
    {
        std::vector<const ad::Parameter*> out;
        for (auto* p : const_cast<UnrolledModel*>(this)->parameters())
            out.push_back(p);
        return out;
    }

    std::vector<ad::Parameter*> trainable_parameters()
    {
        std::vector<ad::Parameter*> out;
        for (auto* p : parameters())
            if (p->trainable)
                out.push_back(p);
        return out;
    }

private:
    EncoderNet encoder_;
    BlochDecoderNet decoder_;
    std::vector<ad::Parameter> log_steps_;
};

struct ProxGraph {
    ad::Var x;     ///< (2s, D) split image
    ad::Var maps;  ///< (3, D) T1, T2, PD
};

/// Bloch(encoder(g)) on a tape.
inline ProxGraph neural_prox_graph(ad::Tape& tape, const UnrolledModel& model, ad::Var g, std::size_t h, std::size_t w)
{
    const ad::Var m = model.encoder().forward(tape, g, h, w);
    const ad::Var f = model.decoder().forward(tape, ad::slice_rows(m, 0, 1), ad::slice_rows(m, 1, 1));
    return {ad::mul_rows(f, ad::slice_rows(m, 2, 1)), m};
}

inline QMaps maps_from_tensor(const ad::Tensor& m, std::size_t h, std::size_t w)
{
    if (m.rows != 3 || m.cols != h * w)
        throw ShapeError("maps: expected a (3, " + std::to_string(h * w) + ") tensor, got " + m.shape_string());
    QMaps q(h, w);
    for (std::size_t v = 0; v < h * w; ++v) {
        q.t1_ms[v] = m(0, v);
        q.t2_ms[v] = m(1, v);
        q.pd[v] = m(2, v);
        q.mask[v] = 1;
    }
    return q;
}

/// Applies the learned proximal map to a compressed image.
inline ProxResult neural_prox_apply(const UnrolledModel& model, const TSMI& g)
{
    if (g.channels != model.rank())
        throw ShapeError("neural prox: TSMI has " + std::to_string(g.channels) + " channels, model rank is " + std::to_string(model.rank()));
    if (!all_finite(g.data))
        throw DivergenceError("neural prox: non-finite input");
    ad::Tape tape;
    const ProxGraph p = neural_prox_graph(tape, model, tape.constant(split_complex(g)), g.height, g.width);
    return {merge_complex(p.x.value(), g.height, g.width), maps_from_tensor(p.maps.value(), g.height, g.width)};
}

class NeuralProx final : public ProxOperator {
public:
    explicit NeuralProx(const UnrolledModel& model) : model_(&model) {}
    ProxResult apply(const TSMI& g) const override { return neural_prox_apply(*model_, g); }

private:
    const UnrolledModel* model_;
};

/// Encoder applied once to the back-projection; the T = 0 case of the unrolled model.
inline QMaps neural_backprojection_baseline(const KSpaceData& y, const AcquisitionOperator& op, const UnrolledModel& model)
{
    const TSMI x0 = backproject(op, y);
    ad::Tape tape;
    const ad::Var m = model.encoder().forward(tape, tape.constant(split_complex(x0)), x0.height, x0.width);
    return maps_from_tensor(m.value(), x0.height, x0.width);
}

/// Unrolled reconstruction with the model's learned step sizes.
inline PgdResult neural_unrolled_reconstruct(const KSpaceData& y, const AcquisitionOperator& op, const UnrolledModel& model, bool record_maps = false)
{
    if (model.iterations() == 0) {
        PgdResult r;
        r.x = backproject(op, y);
        r.maps = neural_backprojection_baseline(y, op, model);
        r.trace.fidelity.push_back(data_fidelity(op, r.x, y));
        return r;
    }
    PgdConfig cfg{model.iterations(), model.step_sizes(), true, record_maps};
    return pgd_reconstruct(y, op, NeuralProx(model), cfg);
}

// ---------------------------------------------------------------------------

struct TrainConfig {
    std::array<double, 3> beta{1.0, 0.3, 0.6};  ///< T1, T2, PD map-loss weights
    double lambda = 1e-3;                         ///< k-space consistency weight
    std::size_t epochs = 500;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::size_t batch_size = 1;

    void validate() const
    {
        for (std::size_t j = 0; j < 3; ++j)
            if (!(beta[j] >= 0.0) || !std::isfinite(beta[j]))
                throw ParameterError("train: beta weights must be finite and >= 0");
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw ParameterError("train: lambda must be finite and >= 0");
        if (epochs < 1)
            throw ParameterError("train: epochs must be >= 1");
        if (!(lr > 0.0) || !std::isfinite(lr))
            throw ParameterError("train: lr must be positive");
        if (batch_size != 1)
            throw ParameterError("train: only batch_size 1 is supported");
    }
};

/// Map-loss normalisers: T1 and T2 are compared in units of these ms values.
inline constexpr std::array<double, 3> kMapLossScale{4000.0, 600.0, 1.0};

struct TrainingSample {
    KSpaceData y;
    QMaps truth;
    TSMI x0;  ///< back-projection, cached
};

inline TrainingSample make_training_sample(KSpaceData y, QMaps truth, const AcquisitionOperator& op)
{
    if (truth.height != op.matrix() || truth.width != op.matrix())
        throw ShapeError("training sample: maps do not match the operator's matrix");
    TSMI x0 = backproject(op, y);
    return {std::move(y), std::move(truth), std::move(x0)};
}

struct LossTerms {
    ad::Var total;
    std::array<double, 3> maps{};
    RVec kspace;  ///< one per iterate
};

/// Records the unrolled graph for one sample and its training loss:
/// sum_j beta_j l(m_j, m_j^(T)) + lambda sum_t l(y, H x^(t)).
/// T1 and T2 are compared inside the truth mask, PD everywhere. k-space terms
/// are normalised by the mean power of y.
inline LossTerms unrolled_loss(ad::Tape& tape, const UnrolledModel& model, const AcquisitionOperator& op, const TrainingSample& sample, const TrainConfig& cfg)
{
    const std::size_t n = op.matrix(), d = n * n;
    if (!sample.y.same_shape(op.make_kspace()) || sample.x0.channels != model.rank() || sample.truth.voxels() != d)
        throw ShapeError("train: sample does not match operator and model");
    const ad::Var y = tape.constant(split_complex(sample.y));
    double ypow = 0.0;
    for (double v : y.value().data)
        ypow += v * v;
    ypow /= static_cast<double>(y.value().size());
    const double knorm = ypow > 0.0 ? 1.0 / ypow : 1.0;

    std::vector<ad::Var> terms;
    RVec weights;
    LossTerms out;
    ad::Var x = tape.constant(split_complex(sample.x0));
    ad::Var hx = tape.constant(split_complex(op.forward(sample.x0)));
    ad::Var maps = x;
    if (model.iterations() == 0)
        maps = model.encoder().forward(tape, x, n, n);
    for (std::size_t t = 0; t < model.iterations(); ++t) {
        const ad::Var grad = apply_adjoint(ad::sub(y, hx), op);
        const ad::Var alpha = ad::exp(tape.param(model.log_steps()[t]));
        const ProxGraph p = neural_prox_graph(tape, model, ad::add(x, ad::scale(grad, alpha)), n, n);
        x = p.x;
        maps = p.maps;
        hx = apply_forward(x, op);
        const ad::Var lk = ad::weighted_mse(hx, y);
        terms.push_back(lk);
        weights.push_back(cfg.lambda * knorm);
        out.kspace.push_back(lk.value().data[0] * knorm);
    }
    const RVec inside(sample.truth.mask.begin(), sample.truth.mask.end());
    for (std::size_t j = 0; j < 3; ++j) {
        const RVec& truth = property_map(sample.truth, static_cast<Property>(j));
        RVec scaled(d);
        for (std::size_t v = 0; v < d; ++v)
            scaled[v] = truth[v] / kMapLossScale[j];
        const ad::Var est = ad::scale(ad::slice_rows(maps, j, 1), 1.0 / kMapLossScale[j]);
        const ad::Var l = ad::weighted_mse(est, tape.constant(ad::Tensor(1, d, scaled)), j < 2 ? inside : RVec{});
        terms.push_back(l);
        weights.push_back(cfg.beta[j]);
        out.maps[j] = l.value().data[0];
    }
    out.total = ad::weighted_sum(terms, weights);
    return out;
}

struct TrainHistory {
    RVec epoch_loss;  ///< mean loss over the dataset, per epoch
};

/// Adam with batch size 1 over the dataset in a seeded shuffled order. The
/// decoder stays frozen; encoder weights and step sizes are updated.
inline TrainHistory train_unrolled(const std::vector<TrainingSample>& dataset, const AcquisitionOperator& op, UnrolledModel& model, const TrainConfig& cfg,
                                   const std::function<void(std::size_t, double)>& on_epoch = {})
{
    cfg.validate();
    if (dataset.empty())
        throw ParameterError("train: empty dataset");
    if (!model.decoder().frozen())
        throw ParameterError("train: decoder must be frozen");
    auto params = model.trainable_parameters();
    ad::Adam opt(params, {cfg.lr});
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    TrainHistory hist;
    double first = -1.0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double acc = 0.0;
        for (std::size_t i : order) {
            ad::Tape tape;
            const LossTerms lt = unrolled_loss(tape, model, op, dataset[i], cfg);
            const double l = lt.total.value().data[0];
            if (first < 0.0)
                first = l;
            if (!std::isfinite(l) || l > 1e6 * first)
                throw TrainingError("train: loss diverged in epoch " + std::to_string(e) + " (loss " + std::to_string(l) + ")");
            const ad::Gradients g = tape.backward(lt.total);
            for (const auto& [p, t] : g)
                if (!all_finite(t.data))
                    throw TrainingError("train: non-finite gradient for '" + p->name + "' in epoch " + std::to_string(e));
            opt.step(g);
            acc += l;
        }
        hist.epoch_loss.push_back(acc / static_cast<double>(dataset.size()));
        if (on_epoch)
            on_epoch(e, hist.epoch_loss.back());
    }
    return hist;
}

// ---------------------------------------------------------------------------
// Checkpoints: one tensor file per named weight plus model.json and loss.csv.

inline nlohmann::json model_architecture(const UnrolledModel& m)
{
    const EncoderConfig& e = m.encoder().config();
    nlohmann::json b = {{"lo", e.bounds.lo}, {"hi", e.bounds.hi}};
    return {{"rank", e.rank},       {"width", e.width},         {"depth", e.depth}, {"squeeze_excite", e.squeeze_excite}, {"se_reduction", e.se_reduction},
            {"leaky_slope", e.leaky_slope}, {"bounds", b}, {"decoder_hidden", m.decoder().hidden()}, {"iterations", m.iterations()}};
}

inline void save_checkpoint(const std::filesystem::path& dir, const UnrolledModel& model, const nlohmann::json& extra = nlohmann::json::object(),
                            const RVec& loss_history = {})
{
    std::filesystem::create_directories(dir);
    nlohmann::json man = extra;
    man["architecture"] = model_architecture(model);
    nlohmann::json names = nlohmann::json::array();
    for (const ad::Parameter* p : model.parameters()) {
        write_tensor(dir / (p->name + ".mrfb"), p->value.data, Dims{p->value.rows, p->value.cols});
        names.push_back(p->name);
    }
    man["parameters"] = names;
    man["loss_history"] = "loss.csv";
    std::ofstream(dir / "model.json") << man.dump(2) << "\n";
    std::ofstream csv(dir / "loss.csv");
    csv << "epoch,loss\n" << std::setprecision(17);
    for (std::size_t e = 0; e < loss_history.size(); ++e)
        csv << e << "," << loss_history[e] << "\n";
    if (!csv)
        throw Error("checkpoint: failed writing " + (dir / "loss.csv").string());
}

inline UnrolledModel load_checkpoint(const std::filesystem::path& dir, nlohmann::json* manifest = nullptr)
{
    std::ifstream is(dir / "model.json");
    if (!is)
        throw FormatError("checkpoint: cannot open " + (dir / "model.json").string());
    nlohmann::json man;
    try {
        man = nlohmann::json::parse(is);
        const auto& a = man.at("architecture");
        EncoderConfig ec;
        ec.rank = a.at("rank").get<std::size_t>();
        ec.width = a.at("width").get<std::size_t>();
        ec.depth = a.at("depth").get<std::size_t>();
        ec.squeeze_excite = a.at("squeeze_excite").get<bool>();
        ec.se_reduction = a.at("se_reduction").get<std::size_t>();
        ec.leaky_slope = a.at("leaky_slope").get<double>();
        ec.bounds.lo = a.at("bounds").at("lo").get<std::array<double, 3>>();
        ec.bounds.hi = a.at("bounds").at("hi").get<std::array<double, 3>>();
        UnrolledModel model(EncoderNet(ec, 0), BlochDecoderNet(ec.rank, a.at("decoder_hidden").get<std::size_t>(), 0, ec.bounds),
                            a.at("iterations").get<std::size_t>(), 1.0);
        for (ad::Parameter* p : model.parameters()) {
            Dims dims;
            RVec v = read_tensor<double>(dir / (p->name + ".mrfb"), &dims);
            if (dims != Dims{p->value.rows, p->value.cols})
                throw FormatError("checkpoint: '" + p->name + "' has the wrong shape");
            p->value.data = std::move(v);
        }
        if (manifest)
            *manifest = man;
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: malformed model.json: " + std::string(e.what()));
    }
}

} // namespace mrf
