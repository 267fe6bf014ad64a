#pragma once

#include <functional>
#include <memory>
#include <vector>

#include <string>
#include <utility>

#include "fact/autograd.hpp"
#include "fact/fair_objective.hpp"
#include "fact/rng.hpp"

namespace fact::testing {

using Inputs = std::vector<Matrix<double>>;
using ScalarFn = std::function<ag::Var<double>(ag::Tape<double>&, const std::vector<ag::Var<double>>&)>;

// ||analytic - numeric|| / max(||analytic||, ||numeric||) for every input; 0 when both vanish.
inline std::vector<double> gradient_errors(const ScalarFn& f, const Inputs& inputs, double h = 1e-6) {
    ag::Tape<double> tape;
    std::vector<ag::Var<double>> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x, true));
    tape.backward(f(tape, leaves));

    auto eval = [&](const Inputs& xs) {
        ag::Tape<double> t;
        std::vector<ag::Var<double>> ls;
        for (const auto& x : xs) ls.push_back(t.constant(x));
        return f(t, ls).value()(0, 0);
    };

    std::vector<double> errors;
    Inputs work = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Matrix<double> numeric(inputs[i].rows(), inputs[i].cols());
        for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
            const double keep = work[i].data()[k];
            work[i].data()[k] = keep + h;
            const double up = eval(work);
            work[i].data()[k] = keep - h;
            const double down = eval(work);
            work[i].data()[k] = keep;
            numeric.data()[k] = (up - down) / (2 * h);
        }
        Matrix<double> analytic = leaves[i].grad();
        if (analytic.size() == 0) analytic = Matrix<double>::Zero(numeric.rows(), numeric.cols());
        const double scale = std::max(analytic.norm(), numeric.norm());
        errors.push_back(scale < 1e-12 ? 0.0 : (analytic - numeric).norm() / scale);
    }
    return errors;
}

inline Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double sd = 1.0) {
    Rng rng = make_stream(seed, {std::uint64_t(r), std::uint64_t(c)});
    return randn<double>(r, c, rng, sd);
}

// Central differences of total_loss with respect to every entry of the given parameters.
// Returns (name, error) per parameter with the same norm-wise relative error as above.
inline std::vector<std::pair<std::string, double>> model_gradient_errors(FaceAdapterModel<double>& model,
                                                                         const TrainingSample<double>& sample,
                                                                         const LossWeights& weights, AdapterScale alpha,
                                                                         const std::vector<ParamId>& ids,
                                                                         double h = 1e-6) {
    std::vector<Matrix<double>> grads;
    {
        ag::Tape<double> tape;
        Binder<double> b(tape, model.params(), true);
        tape.backward(total_loss(b, model, sample, weights, alpha));
        b.collect(grads);
    }
    auto eval = [&] {
        ag::Tape<double> tape;
        Binder<double> b(tape, model.params(), false);
        return total_loss(b, model, sample, weights, alpha).value()(0, 0);
    };
    std::vector<std::pair<std::string, double>> out;
    for (ParamId id : ids) {
        auto& value = model.params()[id].value;
        Matrix<double> numeric(value.rows(), value.cols());
        for (Eigen::Index k = 0; k < value.size(); ++k) {
            const double keep = value.data()[k];
            value.data()[k] = keep + h;
            const double up = eval();
            value.data()[k] = keep - h;
            const double down = eval();
            value.data()[k] = keep;
            numeric.data()[k] = (up - down) / (2 * h);
        }
        Matrix<double> analytic = id < grads.size() && grads[id].size() ? grads[id] : Matrix<double>::Zero(value.rows(), value.cols());
        const double scale = std::max(analytic.norm(), numeric.norm());
        out.emplace_back(model.params()[id].name, scale < 1e-12 ? 0.0 : (analytic - numeric).norm() / scale);
    }
    return out;
}

// A one-block model small enough for exhaustive finite differences. Every gate and the null
// identity get random non-zero values so that no gradient is trivially zero.
struct GradientCase {
    std::unique_ptr<FaceAdapterModel<double>> model;
    TrainingSample<double> sample;
    RawFaceTokens tokens;
    LossWeights weights;
    AdapterScale alpha;
};

inline GradientCase make_gradient_case(std::uint64_t seed) {
    Rng rng = make_stream(seed, {0x6A});
    ModelConfig mc;
    mc.unet.levels = 1;
    mc.unet.blocks_per_stage = 1;
    mc.unet.d_model = 8;
    mc.unet.heads = seed % 2 ? 2 : 1;
    mc.unet.ffn_mult = 2;
    mc.unet.n_timesteps = 20;
    mc.unet.latent_height = 2;
    mc.unet.latent_width = 2;
    mc.unet.text_tokens = 2;
    mc.unet.captions = 2;
    mc.unet.seed = seed;
    mc.projection.tokens_in = 3;
    mc.projection.width_in = 4;
    mc.projection.tokens_out = 2;
    mc.projection.d_model = 8;
    mc.projection.blocks = 1;
    mc.projection.heads = 1;
    mc.projection.ffn_mult = 2;

    GradientCase c;
    c.model = std::make_unique<FaceAdapterModel<double>>(mc);
    auto& store = c.model->params();
    for (ParamId id : c.model->gsa_parameters(0)) {
        if (store[id].name.find("gamma") != std::string::npos) store[id].value = randn<double>(1, 1, rng, 0.5);
    }
    for (ParamId id : c.model->null_embedding_parameters()) store[id].value = randn<double>(store[id].value.rows(), store[id].value.cols(), rng);

    c.tokens = randn<double>(3, 4, rng);
    auto& s = c.sample;
    s.z0 = randn<double>(4, 4, rng);
    s.eps = randn<double>(4, 4, rng);
    s.t = uniform_int(rng, 0, 19);
    s.caption_id = uniform_int(rng, 0, 2);
    s.identity = seed % 5 == 4 ? IdentityMode::learned_null : IdentityMode::tokens;
    s.face_tokens = &c.tokens;
    MaskGrid face(2, 2);
    face << 1, 0, 1, 0;
    s.loss_mask = seed % 3 == 0 ? MaskGrid::Ones(2, 2) : face;
    s.fair_masks = build_mask_pyramid(face, c.model->blocks());
    c.weights.lambda_fair = 0.01 + 0.5 * uniform01(rng);
    c.weights.norm = seed % 2 ? DiffusionNorm::masked_mean : DiffusionNorm::l2;
    c.alpha = AdapterScale(0.5 + uniform01(rng));
    return c;
}

inline std::vector<ParamId> all_optimized(const FaceAdapterModel<double>& model) {
    auto ids = model.trainable_parameters();
    for (ParamId id : model.null_embedding_parameters()) ids.push_back(id);
    return ids;
}

}  // namespace fact::testing
