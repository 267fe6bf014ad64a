#include "fact/fair_objective.hpp"

#include <algorithm>
#include <cmath>

namespace fact {

void LossWeights::validate() const {
    if (!(lambda_fair >= 0.0)) throw InvalidConfig("loss.lambda_fair must be nonnegative");
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw InvalidConfig("loss.mask_prob must lie in [0, 1]");
}

const char* diffusion_norm_name(DiffusionNorm n) { return n == DiffusionNorm::masked_mean ? "masked_mean" : "l2"; }

DiffusionNorm parse_diffusion_norm(const std::string& s) {
    if (s == "masked_mean") return DiffusionNorm::masked_mean;
    if (s == "l2") return DiffusionNorm::l2;
    throw InvalidConfig("loss.norm must be masked_mean or l2, got '" + s + "'");
}

const char* identity_mode_name(IdentityMode m) {
    switch (m) {
    case IdentityMode::tokens: return "tokens";
    case IdentityMode::learned_null: return "learned_null";
    case IdentityMode::zeros: return "zeros";
    case IdentityMode::bypass: return "bypass";
    }
    return "?";
}

MaskGrid downsample_mask(const MaskGrid& base, GridShape grid) {
    const auto H = base.rows(), W = base.cols();
    if (grid.height <= 0 || grid.width <= 0 || grid.height > H || grid.width > W || H % grid.height != 0 ||
        W % grid.width != 0) {
        throw InvalidConfig("downsample_mask: grid " + std::to_string(grid.height) + "x" + std::to_string(grid.width) +
                            " does not evenly divide " + std::to_string(H) + "x" + std::to_string(W));
    }
    const auto fy = H / grid.height, fx = W / grid.width;
    MaskGrid out(grid.height, grid.width);
    for (int y = 0; y < grid.height; ++y)
        for (int x = 0; x < grid.width; ++x) out(y, x) = base.block(y * fy, x * fx, fy, fx).mean();
    return out;
}

MaskPyramid build_mask_pyramid(const MaskGrid& base, const std::vector<BlockDescriptor>& blocks) {
    MaskPyramid p;
    p.base = base;
    for (const auto& b : blocks) p.per_block[b.index] = downsample_mask(base, b.grid);
    return p;
}

namespace {

// Per-token weight (1 - m) as an (h*w) column.
Vector<double> complement_weights(const MaskGrid& m_x, Eigen::Index tokens) {
    if (m_x.size() != tokens) throw InvalidInput("fair_loss: mask grid does not match token count");
    Vector<double> w(tokens);
    for (Eigen::Index i = 0; i < tokens; ++i) w(i) = 1.0 - m_x.data()[i];
    return w;
}

}  // namespace

template <typename T>
ag::Var<T> fair_loss(const IncrementRecord<T>& record, const MaskGrid& m_x) {
    const auto& inc = record.increment;
    const auto& x = record.input_tokens;
    if (inc.rows() != x.rows() || inc.cols() != x.cols()) throw InvalidInput("fair_loss: increment/input shape mismatch");
    if (!inc.value().allFinite() || !x.value().allFinite()) throw NumericError("fair_loss: non-finite input", record.block_index);
    const Vector<T> w = complement_weights(m_x, inc.rows()).template cast<T>();
    auto& tape = inc.tape();
    Matrix<T> out = Matrix<T>::Zero(1, 1);
    if (w.cwiseAbs().sum() == T(0)) return tape.constant(out);

    const Vector<T> w2 = w.cwiseProduct(w);
    const T num = std::sqrt((inc.value().array().colwise() * w2.array()).cwiseProduct(inc.value().array()).sum());
    const T den_norm = std::sqrt((x.value().array().colwise() * w2.array()).cwiseProduct(x.value().array()).sum());
    // The guard only engages for near-empty regions, so ordinary values stay exactly scale invariant.
    const bool guarded = den_norm < static_cast<T>(kFairDenominatorEps);
    const T den = guarded ? static_cast<T>(kFairDenominatorEps) : den_norm;
    out(0, 0) = num / den;

    auto* pi = inc.node();
    auto* px = x.node();
    return tape.record(std::move(out), pi->requires_grad || px->requires_grad, [pi, px, w2, num, den, guarded](ag::Node<T>& n) {
        const T g = n.grad(0, 0);
        // d||a||/da is taken as 0 at a = 0.
        if (pi->requires_grad && num > T(0)) {
            pi->accumulate((pi->value.array().colwise() * w2.array()).matrix() * (g / (num * den)));
        }
        if (px->requires_grad && !guarded) {
            px->accumulate((px->value.array().colwise() * w2.array()).matrix() * (-g * num / (den * den * den)));
        }
    });
}

double fair_loss(const Matrix<double>& increment, const Matrix<double>& input_tokens, const MaskGrid& m_x) {
    ag::Tape<double> tape;
    IncrementRecord<double> rec;
    rec.increment = tape.constant(increment);
    rec.input_tokens = tape.constant(input_tokens);
    return fair_loss(rec, m_x).value()(0, 0);
}

MaskGrid random_face_mask(const MaskGrid& face_mask, double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("random_face_mask: p must lie in [0, 1]");
    // Always consume one draw so downstream stream positions do not depend on p.
    const bool use_face = uniform01(rng) < p;
    if (use_face) return face_mask;
    return MaskGrid::Ones(face_mask.rows(), face_mask.cols());
}

template <typename T>
ag::Var<T> masked_diffusion_loss(const ag::Var<T>& pred, const Matrix<T>& eps, const MaskGrid& m, DiffusionNorm norm) {
    if (pred.rows() != eps.rows() || pred.cols() != eps.cols()) throw InvalidInput("masked_diffusion_loss: shape mismatch");
    if (m.size() != pred.rows()) throw InvalidInput("masked_diffusion_loss: mask grid does not match latent tokens");
    Vector<T> w(pred.rows());
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = static_cast<T>(m.data()[i]);
    Matrix<T> diff = pred.value() - eps;
    auto& tape = pred.tape();
    auto* pp = pred.node();
    Matrix<T> out(1, 1);

    if (norm == DiffusionNorm::masked_mean) {
        const T mass = w.sum() * T(pred.cols());
        if (mass <= T(0)) return tape.constant(Matrix<T>::Zero(1, 1));
        out(0, 0) = (diff.array().square().colwise() * w.array()).sum() / mass;
        return tape.record(std::move(out), pp->requires_grad, [pp, diff = std::move(diff), w, mass](ag::Node<T>& n) {
            pp->accumulate((diff.array().colwise() * w.array()).matrix() * (T(2) * n.grad(0, 0) / mass));
        });
    }
    const Vector<T> w2 = w.cwiseProduct(w);
    const T nrm = std::sqrt((diff.array().square().colwise() * w2.array()).sum());
    out(0, 0) = nrm;
    return tape.record(std::move(out), pp->requires_grad, [pp, diff = std::move(diff), w2, nrm](ag::Node<T>& n) {
        if (nrm > T(0)) pp->accumulate((diff.array().colwise() * w2.array()).matrix() * (n.grad(0, 0) / nrm));
    });
}

template <typename T>
ag::Var<T> resolve_identity(Binder<T>& params, const FaceAdapterModel<T>& model, IdentityMode mode,
                            const RawFaceTokens* face_tokens) {
    switch (mode) {
    case IdentityMode::tokens:
        if (!face_tokens) throw InvalidInput("identity mode 'tokens' requires face tokens");
        return project_identity(params, model.projection(), model.config().projection,
                                params.tape().constant(face_tokens->template cast<T>()));
    case IdentityMode::learned_null: return params(model.null_identity());
    case IdentityMode::zeros:
        return params.tape().constant(Matrix<T>::Zero(model.config().projection.tokens_out, model.unet().d_model));
    case IdentityMode::bypass: return {};
    }
    return {};
}

template <typename T>
ag::Var<T> total_loss(Binder<T>& params, const FaceAdapterModel<T>& model, const TrainingSample<T>& sample,
                      const LossWeights& weights, AdapterScale alpha, LossDiagnostics* diagnostics) {
    auto& tape = params.tape();
    const auto& sched = model.schedule();
    if (sample.t < 0 || sample.t >= sched.size()) throw InvalidInput("total_loss: timestep out of range");
    auto z_t = tape.constant(add_noise(sample.z0, sample.t, sample.eps, sched));
    auto e_text = tape.constant(model.text_embedding(sample.caption_id));
    auto e_id = resolve_identity(params, model, sample.identity, sample.face_tokens);
    auto pred = predict_noise(params, model, z_t, sample.t, e_text, e_id, alpha);

    auto loss = masked_diffusion_loss(pred.eps, sample.eps, sample.loss_mask, weights.norm);
    if (diagnostics) {
        diagnostics->diffusion = loss.value()(0, 0);
        diagnostics->fair_per_block.clear();
    }
    for (const auto& rec : pred.increments) {
        if (!weights.fair_blocks.empty() &&
            std::find(weights.fair_blocks.begin(), weights.fair_blocks.end(), rec.block_index) == weights.fair_blocks.end()) {
            continue;
        }
        auto it = sample.fair_masks.per_block.find(rec.block_index);
        if (it == sample.fair_masks.per_block.end()) throw InvalidInput("total_loss: no mask for block");
        auto f = fair_loss(rec, it->second);
        if (diagnostics) diagnostics->fair_per_block.emplace_back(rec.block_index, f.value()(0, 0));
        if (weights.lambda_fair != 0.0) loss = ag::add(loss, ag::scale(f, static_cast<T>(weights.lambda_fair)));
    }
    if (diagnostics) diagnostics->total = loss.value()(0, 0);
    if (!std::isfinite(double(loss.value()(0, 0)))) throw NumericError("non-finite training loss");
    return loss;
}

template <typename T>
LossDiagnostics batch_loss(const FaceAdapterModel<T>& model, const std::vector<TrainingSample<T>>& batch,
                           const LossWeights& weights, AdapterScale alpha, std::vector<Matrix<T>>* grads) {
    if (batch.empty()) throw InvalidInput("batch_loss: empty batch");
    LossDiagnostics mean;
    std::map<int, double> fair_sum;
    if (grads) {
        grads->assign(model.params().size(), Matrix<T>());
    }
    const T inv = T(1) / T(batch.size());
    for (const auto& sample : batch) {
        ag::Tape<T> tape;
        Binder<T> p(tape, model.params(), grads != nullptr);
        LossDiagnostics d;
        auto loss = total_loss(p, model, sample, weights, alpha, &d);
        if (grads) {
            tape.backward(ag::scale(loss, inv));
            p.collect(*grads);
        }
        mean.total += d.total / double(batch.size());
        mean.diffusion += d.diffusion / double(batch.size());
        for (const auto& [b, v] : d.fair_per_block) fair_sum[b] += v / double(batch.size());
    }
    for (const auto& [b, v] : fair_sum) mean.fair_per_block.emplace_back(b, v);
    return mean;
}

#define FACT_INSTANTIATE(T)                                                                                          \
    template ag::Var<T> fair_loss<T>(const IncrementRecord<T>&, const MaskGrid&);                                    \
    template ag::Var<T> masked_diffusion_loss<T>(const ag::Var<T>&, const Matrix<T>&, const MaskGrid&, DiffusionNorm); \
    template ag::Var<T> resolve_identity<T>(Binder<T>&, const FaceAdapterModel<T>&, IdentityMode,                    \
                                            const RawFaceTokens*);                                                   \
    template ag::Var<T> total_loss<T>(Binder<T>&, const FaceAdapterModel<T>&, const TrainingSample<T>&,              \
                                      const LossWeights&, AdapterScale, LossDiagnostics*);                           \
    template LossDiagnostics batch_loss<T>(const FaceAdapterModel<T>&, const std::vector<TrainingSample<T>>&,        \
                                           const LossWeights&, AdapterScale, std::vector<Matrix<T>>*);

FACT_INSTANTIATE(float)
FACT_INSTANTIATE(double)
#undef FACT_INSTANTIATE

}  // namespace fact
