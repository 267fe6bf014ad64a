#pragma once

// Face adapting increment regularization and the masked diffusion objective.

#include <map>
#include <string>
#include <vector>

#include "fact/diffusion_backbone.hpp"

namespace fact {

// Real-valued (h, w) mask; row-major order matches the token order of a grid.
using MaskGrid = Matrix<double>;

enum class DiffusionNorm {
    masked_mean,  // sum(m * (pred - eps)^2) / (C * sum(m))
    l2,           // ||(pred - eps) * m||_2
};

struct LossWeights {
    double lambda_fair = 0.01;
    double mask_prob = 0.5;
    DiffusionNorm norm = DiffusionNorm::masked_mean;
    // Blocks whose increments are regularized; empty means every adapter block.
    std::vector<int> fair_blocks;

    void validate() const;
};

inline constexpr double kFairDenominatorEps = 1e-8;

// Area-average pooling of a binary base mask onto a coarser grid.
MaskGrid downsample_mask(const MaskGrid& base, GridShape grid);

struct MaskPyramid {
    MaskGrid base;
    std::map<int, MaskGrid> per_block;
};

MaskPyramid build_mask_pyramid(const MaskGrid& base, const std::vector<BlockDescriptor>& blocks);

// ||inc * (1 - m)|| / max(||x * (1 - m)||, eps), broadcasting m over channels; exactly 0 when 1 - m vanishes.
template <typename T>
ag::Var<T> fair_loss(const IncrementRecord<T>& record, const MaskGrid& m_x);

double fair_loss(const Matrix<double>& increment, const Matrix<double>& input_tokens, const MaskGrid& m_x);

// M_r(p): the face mask with probability p, otherwise all ones. One draw per call.
MaskGrid random_face_mask(const MaskGrid& face_mask, double p, Rng& rng);

// pred and eps are (h*w, c) tokens; m is the (h, w) latent-grid mask.
template <typename T>
ag::Var<T> masked_diffusion_loss(const ag::Var<T>& pred, const Matrix<T>& eps, const MaskGrid& m,
                                 DiffusionNorm norm = DiffusionNorm::masked_mean);

enum class IdentityMode { tokens, learned_null, zeros, bypass };

template <typename T>
struct TrainingSample {
    Matrix<T> z0;  // (h*w, c) clean latent
    int t = 0;
    Matrix<T> eps;
    int caption_id = 0;  // captions == null text
    IdentityMode identity = IdentityMode::tokens;
    const RawFaceTokens* face_tokens = nullptr;  // required for IdentityMode::tokens
    MaskGrid loss_mask;                          // M_r(p) on the latent grid
    MaskPyramid fair_masks;                      // face mask of the target image, per block
};

struct LossDiagnostics {
    double total = 0.0;
    double diffusion = 0.0;
    std::vector<std::pair<int, double>> fair_per_block;
};

// Identity tokens for a sample under its resolved condition; a null Var for bypass.
template <typename T>
ag::Var<T> resolve_identity(Binder<T>& params, const FaceAdapterModel<T>& model, IdentityMode mode,
                            const RawFaceTokens* face_tokens);

// masked_diffusion_loss + lambda_fair * sum over regularized blocks of fair_loss, for one sample.
template <typename T>
ag::Var<T> total_loss(Binder<T>& params, const FaceAdapterModel<T>& model, const TrainingSample<T>& sample,
                      const LossWeights& weights, AdapterScale alpha, LossDiagnostics* diagnostics = nullptr);

// Mean of total_loss over a batch. grads is resized to the parameter count; entries for
// parameters that received no gradient stay empty.
template <typename T>
LossDiagnostics batch_loss(const FaceAdapterModel<T>& model, const std::vector<TrainingSample<T>>& batch,
                           const LossWeights& weights, AdapterScale alpha, std::vector<Matrix<T>>* grads);

const char* diffusion_norm_name(DiffusionNorm n);
DiffusionNorm parse_diffusion_norm(const std::string& s);
const char* identity_mode_name(IdentityMode m);

}  // namespace fact
