#include "fact/identity_encoder.hpp"

namespace fact {

ToyEncoder::ToyEncoder(const EncoderConfig& config) : config_(config) {
    if (config.patch <= 0 || config.image_size % config.patch != 0) {
        throw InvalidConfig("encoder.patch must divide encoder.image_size");
    }
    if (config.width % config.heads != 0) throw InvalidConfig("encoder.width must be divisible by encoder.heads");
    Rng rng = make_stream(config.seed, {0xE7C0DE});
    const int patch_dim = config.patch * config.patch * config.channels;
    patch_ = make_linear(params_, rng, "encoder.patch", patch_dim, config.width, Role::frozen);
    params_[*patch_.bias].value = randn<double>(1, config.width, rng, 0.5);
    position_ = params_.add("encoder.position", randn<double>(num_tokens(), config.width, rng, 0.5), Role::frozen);
    for (int b = 0; b < config.depth; ++b) {
        blocks_.push_back(make_encoder_block(params_, rng, "encoder.blocks." + std::to_string(b), config.width,
                                             config.ffn_mult, Role::frozen));
    }
}

int ToyEncoder::num_tokens() const {
    const int g = config_.image_size / config_.patch;
    return g * g;
}

Matrix<double> ToyEncoder::patchify(const FaceImage& image) const {
    if (image.height != config_.image_size || image.width != config_.image_size || image.channels != config_.channels) {
        throw InvalidInput("encoder input has shape " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                           "x" + std::to_string(image.channels) + ", expected " + std::to_string(config_.image_size) +
                           "x" + std::to_string(config_.image_size) + "x" + std::to_string(config_.channels));
    }
    const int p = config_.patch;
    const int grid = config_.image_size / p;
    Matrix<double> out(grid * grid, p * p * config_.channels);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            int col = 0;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    for (int c = 0; c < config_.channels; ++c) out(gy * grid + gx, col++) = image.at(gy * p + y, gx * p + x, c);
        }
    return out;
}

RawFaceTokens ToyEncoder::encode(const FaceImage& image) const {
    ag::Tape<double> tape;
    Binder<double> p(tape, params_, false);
    auto x = nn::linear(p, patch_, tape.constant(patchify(image)));
    x = ag::add(x, p(position_));
    for (const auto& block : blocks_) x = nn::encoder_block(p, block, x, config_.heads);
    return x.value();
}

Vector<double> ToyEncoder::global_embedding(const FaceImage& image) const {
    Vector<double> mean = encode(image).colwise().mean().transpose();
    const double n = mean.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("global embedding has zero or non-finite norm");
    return mean / n;
}

std::unique_ptr<FaceEncoder> make_encoder(const EncoderConfig& config) {
    if (config.kind == "toy") return std::make_unique<ToyEncoder>(config);
    throw InvalidConfig("unknown encoder.kind '" + config.kind + "' (available: toy)");
}

RawFaceTokens extract_penultimate_tokens(const FaceImage& image, const FaceEncoder& encoder) {
    RawFaceTokens tokens = encoder.encode(image);
    if (!tokens.allFinite()) throw NumericError("face encoder produced non-finite tokens");
    return tokens;
}

template <typename T>
ProjectionIds make_projection(ParamStore<T>& store, Rng& rng, const ProjectionConfig& config, const std::string& prefix) {
    if (config.d_model % config.heads != 0) throw InvalidConfig("projection width must be divisible by heads");
    ProjectionIds ids;
    ids.in = make_linear(store, rng, prefix + ".in", config.width_in, config.d_model, Role::trainable);
    ids.resample = store.add(prefix + ".resample",
                             randn<T>(config.tokens_out, config.tokens_in, rng, 1.0 / std::sqrt(double(config.tokens_in))),
                             Role::trainable);
    ids.resample_bias = store.add(prefix + ".resample_bias", Matrix<T>::Zero(config.tokens_out, config.d_model),
                                  Role::trainable);
    for (int b = 0; b < config.blocks; ++b) {
        ids.blocks.push_back(make_encoder_block(store, rng, prefix + ".blocks." + std::to_string(b), config.d_model,
                                                config.ffn_mult, Role::trainable));
    }
    return ids;
}

template <typename T>
ag::Var<T> project_identity(Binder<T>& params, const ProjectionIds& ids, const ProjectionConfig& config,
                            const ag::Var<T>& raw) {
    if (raw.cols() != config.width_in) {
        throw InvalidConfig("raw face token width " + std::to_string(raw.cols()) + " does not match projection input " +
                            std::to_string(config.width_in));
    }
    if (raw.rows() != config.tokens_in) {
        throw InvalidConfig("raw face token count " + std::to_string(raw.rows()) + " does not match projection input " +
                            std::to_string(config.tokens_in));
    }
    auto h = nn::linear(params, ids.in, raw);
    h = ag::add(ag::matmul(params(ids.resample), h), params(ids.resample_bias));
    for (const auto& block : ids.blocks) h = nn::encoder_block(params, block, h, config.heads);
    return h;
}

template ProjectionIds make_projection<float>(ParamStore<float>&, Rng&, const ProjectionConfig&, const std::string&);
template ProjectionIds make_projection<double>(ParamStore<double>&, Rng&, const ProjectionConfig&, const std::string&);
template ag::Var<float> project_identity<float>(Binder<float>&, const ProjectionIds&, const ProjectionConfig&,
                                                const ag::Var<float>&);
template ag::Var<double> project_identity<double>(Binder<double>&, const ProjectionIds&, const ProjectionConfig&,
                                                  const ag::Var<double>&);

}  // namespace fact
