#pragma once

// Miniature token U-Net for 8x8x4 latents. Each transformer block runs
//   self-attention -> [face adapter] -> cross-attention over text -> FFN
// and the DDPM forward process that training and sampling share.

#include <cstdint>
#include <optional>
#include <vector>

#include "fact/gsa_adapter.hpp"
#include "fact/identity_encoder.hpp"

namespace fact {

struct UNetConfig {
    // 2: down blocks at full resolution, mid blocks at half, up blocks at full.
    // 1: a single stage at full resolution.
    int levels = 2;
    int blocks_per_stage = 2;
    int d_model = 64;
    int heads = 2;
    int ffn_mult = 4;
    int n_timesteps = 100;
    double beta_start = 1e-3;
    double beta_end = 0.2;
    int latent_channels = 4;
    int latent_height = 8;
    int latent_width = 8;
    int text_tokens = 8;
    int captions = 4;
    // Blocks carrying an adapter; empty means every block.
    std::vector<int> gsa_blocks;
    std::uint64_t seed = 7;

    int block_count() const { return levels == 1 ? blocks_per_stage : 3 * blocks_per_stage; }
    void validate() const;
};

struct BlockDescriptor {
    int index = 0;
    int level = 0;
    GridShape grid;
    bool has_gsa = true;
};

struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alphas_cumprod;

    int size() const { return static_cast<int>(betas.size()); }
};

NoiseSchedule make_linear_schedule(int n_timesteps, double beta_start, double beta_end);

// z_t = sqrt(abar) z0 + sqrt(1 - abar) eps
template <typename T>
Matrix<T> add_noise(const Matrix<T>& z0, const Matrix<T>& eps, double alpha_bar);

template <typename T>
Matrix<T> add_noise(const Matrix<T>& z0, int t, const Matrix<T>& eps, const NoiseSchedule& schedule);

struct ModelConfig {
    UNetConfig unet;
    ProjectionConfig projection;
};

struct TransformerBlockIds {
    NormIds norm_self;
    AttentionIds self_attn;
    std::optional<GsaIds> gsa;
    NormIds norm_cross;
    AttentionIds cross_attn;
    FeedForwardIds ffn;
};

// Backbone (frozen), adapters, identity projection and null identity (trainable), text table (frozen).
template <typename T>
class FaceAdapterModel {
public:
    explicit FaceAdapterModel(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const UNetConfig& unet() const { return config_.unet; }
    const NoiseSchedule& schedule() const { return schedule_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    const std::vector<BlockDescriptor>& blocks() const { return layout_; }
    const std::vector<TransformerBlockIds>& block_ids() const { return block_ids_; }
    const ProjectionIds& projection() const { return projection_; }
    ParamId null_identity() const { return null_identity_; }

    // Adapter groups plus the identity projection.
    std::vector<ParamId> trainable_parameters() const;
    // The learned null identity used for dropped conditions and the CFG unconditional branch.
    std::vector<ParamId> null_embedding_parameters() const;
    std::vector<ParamId> gsa_parameters(int block) const;

    // (text_tokens, d_model) rows for caption_id; caption_id == captions selects the null text.
    Matrix<T> text_embedding(int caption_id) const;
    Matrix<T> null_text_embedding() const { return text_embedding(config_.unet.captions); }

    struct Ids {
        LinearIds in_proj;
        ParamId position = 0;
        LinearIds time_fc1, time_fc2;
        LinearIds time_mid;
        LinearIds down, up, skip;
        NormIds out_norm;
        LinearIds out_proj;
        ParamId text_table = 0;
    };
    const Ids& ids() const { return ids_; }

    // Constant token-pooling (2x2 average) and nearest-upsampling operators between levels.
    const Matrix<T>& pool_matrix() const { return pool_; }
    const Matrix<T>& upsample_matrix() const { return upsample_; }

private:
    ModelConfig config_;
    NoiseSchedule schedule_;
    ParamStore<T> params_;
    std::vector<BlockDescriptor> layout_;
    std::vector<TransformerBlockIds> block_ids_;
    ProjectionIds projection_;
    ParamId null_identity_ = 0;
    Ids ids_;
    Matrix<T> pool_, upsample_;
};

std::vector<BlockDescriptor> block_layout(const UNetConfig& config);

template <typename T>
struct NoisePrediction {
    ag::Var<T> eps;
    std::vector<IncrementRecord<T>> increments;
};

// Sinusoidal timestep features, (1, width).
template <typename T>
Matrix<T> timestep_features(int t, int width);

// e_id may be a null Var, in which case every adapter is bypassed.
template <typename T>
NoisePrediction<T> predict_noise(Binder<T>& params, const FaceAdapterModel<T>& model, const ag::Var<T>& z_t, int t,
                                 const ag::Var<T>& e_text, const ag::Var<T>& e_id, AdapterScale alpha);

// Tape-free convenience wrapper; optionally returns per-block increment values.
template <typename T>
Matrix<T> predict_noise(const FaceAdapterModel<T>& model, const Matrix<T>& z_t, int t, const Matrix<T>& e_text,
                        const Matrix<T>* e_id, AdapterScale alpha,
                        std::vector<std::pair<int, Matrix<T>>>* increments = nullptr);

// Identity tokens from raw face tokens through the model's projection.
template <typename T>
Matrix<T> identity_embedding(const FaceAdapterModel<T>& model, const RawFaceTokens& raw);

}  // namespace fact
