#pragma once

// Face expert encoder interface, the toy stand-in encoder, and the learnable
// projection that turns raw face tokens into identity tokens for the adapter.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fact/image.hpp"
#include "fact/nn.hpp"

namespace fact {

// (N_f, d_f) tokens taken from the encoder layer before its pooling head.
using RawFaceTokens = Matrix<double>;

class FaceEncoder {
public:
    virtual ~FaceEncoder() = default;

    virtual RawFaceTokens encode(const FaceImage& image) const = 0;
    // Unit-norm pooled descriptor. Evaluation only.
    virtual Vector<double> global_embedding(const FaceImage& image) const = 0;
    virtual int embed_dim() const = 0;
    virtual int num_tokens() const = 0;
};

struct EncoderConfig {
    std::string kind = "toy";
    int image_size = 64;
    int channels = 3;
    int patch = 8;
    int width = 32;  // d_f
    int depth = 2;
    int heads = 2;
    int ffn_mult = 2;
    std::uint64_t seed = 1234;
};

// Frozen, seeded patch embedding followed by `depth` pre-norm transformer blocks.
// global_embedding is the L2-normalized mean token.
class ToyEncoder final : public FaceEncoder {
public:
    explicit ToyEncoder(const EncoderConfig& config);

    RawFaceTokens encode(const FaceImage& image) const override;
    Vector<double> global_embedding(const FaceImage& image) const override;
    int embed_dim() const override { return config_.width; }
    int num_tokens() const override;

    // (N_f, patch*patch*C) flattened patches, row-major over the patch grid.
    Matrix<double> patchify(const FaceImage& image) const;
    const ParamStore<double>& params() const { return params_; }
    ParamStore<double>& params() { return params_; }
    const LinearIds& patch_embedding() const { return patch_; }
    ParamId position_bias() const { return position_; }

private:
    EncoderConfig config_;
    ParamStore<double> params_;
    LinearIds patch_;
    ParamId position_ = 0;
    std::vector<EncoderBlockIds> blocks_;
};

std::unique_ptr<FaceEncoder> make_encoder(const EncoderConfig& config);

// encoder.encode(image) with a finiteness check. The image is expected to be face-masked already.
RawFaceTokens extract_penultimate_tokens(const FaceImage& image, const FaceEncoder& encoder);

struct ProjectionConfig {
    int tokens_in = 64;  // N_f
    int width_in = 32;   // d_f
    int tokens_out = 4;  // N_id
    int d_model = 64;
    int blocks = 4;
    int heads = 2;
    int ffn_mult = 4;
};

// in-projection d_f -> d_model, learned token-axis resampling N_f -> N_id, then pre-norm blocks.
struct ProjectionIds {
    LinearIds in;
    ParamId resample = 0;
    ParamId resample_bias = 0;
    std::vector<EncoderBlockIds> blocks;
};

template <typename T>
ProjectionIds make_projection(ParamStore<T>& store, Rng& rng, const ProjectionConfig& config,
                              const std::string& prefix = "proj");

template <typename T>
ag::Var<T> project_identity(Binder<T>& params, const ProjectionIds& ids, const ProjectionConfig& config,
                            const ag::Var<T>& raw);

}  // namespace fact
