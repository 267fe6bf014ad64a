#include "fact/diffusion_backbone.hpp"

#include <algorithm>
#include <cmath>

namespace fact {

void UNetConfig::validate() const {
    if (levels != 1 && levels != 2) throw InvalidConfig("model.levels must be 1 or 2");
    if (blocks_per_stage < 1) throw InvalidConfig("model.blocks_per_stage must be >= 1");
    if (d_model <= 0 || heads <= 0 || d_model % heads != 0) {
        throw InvalidConfig("model.d_model must be a positive multiple of model.heads");
    }
    if (n_timesteps < 1) throw InvalidConfig("model.n_timesteps must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
        throw InvalidConfig("betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    if (levels == 2 && (latent_height % 2 != 0 || latent_width % 2 != 0)) {
        throw InvalidConfig("two-level model needs an even latent grid");
    }
    if (captions < 1 || text_tokens < 1) throw InvalidConfig("text vocabulary must be non-empty");
    for (int b : gsa_blocks)
        if (b < 0 || b >= block_count()) throw InvalidConfig("model.gsa_blocks index out of range");
    for (std::size_t i = 1; i < gsa_blocks.size(); ++i)
        if (gsa_blocks[i] <= gsa_blocks[i - 1]) throw InvalidConfig("model.gsa_blocks must be strictly increasing");
}

std::vector<BlockDescriptor> block_layout(const UNetConfig& config) {
    std::vector<BlockDescriptor> out;
    const GridShape full{config.latent_height, config.latent_width};
    const GridShape half{config.latent_height / 2, config.latent_width / 2};
    for (int i = 0; i < config.block_count(); ++i) {
        BlockDescriptor d;
        d.index = i;
        const int stage = i / config.blocks_per_stage;
        d.level = (config.levels == 2 && stage == 1) ? 1 : 0;
        d.grid = d.level == 1 ? half : full;
        d.has_gsa = config.gsa_blocks.empty() ||
                    std::find(config.gsa_blocks.begin(), config.gsa_blocks.end(), i) != config.gsa_blocks.end();
        out.push_back(d);
    }
    return out;
}

NoiseSchedule make_linear_schedule(int n_timesteps, double beta_start, double beta_end) {
    NoiseSchedule s;
    s.betas.resize(n_timesteps);
    s.alphas_cumprod.resize(n_timesteps);
    double prod = 1.0;
    for (int t = 0; t < n_timesteps; ++t) {
        const double frac = n_timesteps == 1 ? 0.0 : double(t) / double(n_timesteps - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - s.betas[t];
        s.alphas_cumprod[t] = prod;
    }
    return s;
}

template <typename T>
Matrix<T> add_noise(const Matrix<T>& z0, const Matrix<T>& eps, double alpha_bar) {
    if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw InvalidInput("add_noise: noise shape mismatch");
    if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw InvalidInput("add_noise: alpha_bar outside [0, 1]");
    return (z0 * static_cast<T>(std::sqrt(alpha_bar)) + eps * static_cast<T>(std::sqrt(1.0 - alpha_bar))).eval();
}

template <typename T>
Matrix<T> add_noise(const Matrix<T>& z0, int t, const Matrix<T>& eps, const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.size()) {
        throw InvalidInput("add_noise: timestep " + std::to_string(t) + " outside [0, " + std::to_string(schedule.size()) +
                           ")");
    }
    return add_noise(z0, eps, schedule.alphas_cumprod[t]);
}

namespace {

template <typename T>
Matrix<T> make_pool(int h, int w) {
    const int hh = h / 2, hw = w / 2;
    Matrix<T> p = Matrix<T>::Zero(hh * hw, h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) p((y / 2) * hw + x / 2, y * w + x) = T(0.25);
    return p;
}

template <typename T>
Matrix<T> make_upsample(int h, int w) {
    const int hw = w / 2;
    Matrix<T> u = Matrix<T>::Zero(h * w, (h / 2) * hw);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) u(y * w + x, (y / 2) * hw + x / 2) = T(1);
    return u;
}

}  // namespace

template <typename T>
FaceAdapterModel<T>::FaceAdapterModel(const ModelConfig& config) : config_(config) {
    const auto& u = config_.unet;
    u.validate();
    if (config_.projection.d_model != u.d_model) throw InvalidConfig("projection width must equal model.d_model");
    schedule_ = make_linear_schedule(u.n_timesteps, u.beta_start, u.beta_end);
    layout_ = block_layout(u);
    const int d = u.d_model;
    const int n_tokens = u.latent_height * u.latent_width;

    // Separate streams so adapter or projection changes never perturb the base weights.
    Rng base = make_stream(u.seed, {0xBA5E});
    Rng proj = make_stream(u.seed, {0x9C0});

    ids_.in_proj = make_linear(params_, base, "unet.in_proj", u.latent_channels, d, Role::frozen);
    ids_.position = params_.add("unet.position", randn<T>(n_tokens, d, base, 0.1), Role::frozen);
    ids_.time_fc1 = make_linear(params_, base, "unet.time.fc1", d, d, Role::frozen);
    ids_.time_fc2 = make_linear(params_, base, "unet.time.fc2", d, d, Role::frozen);
    ids_.time_mid = make_linear(params_, base, "unet.time.mid", d, d, Role::frozen);
    if (u.levels == 2) {
        ids_.down = make_linear(params_, base, "unet.down", d, d, Role::frozen);
        ids_.up = make_linear(params_, base, "unet.up", d, d, Role::frozen);
        ids_.skip = make_linear(params_, base, "unet.skip", d, d, Role::frozen);
        pool_ = make_pool<T>(u.latent_height, u.latent_width);
        upsample_ = make_upsample<T>(u.latent_height, u.latent_width);
    }
    for (const auto& desc : layout_) {
        const std::string name = "unet.blocks." + std::to_string(desc.index);
        TransformerBlockIds b;
        b.norm_self = make_norm(params_, name + ".norm_self", d, Role::frozen);
        b.self_attn = make_attention(params_, base, name + ".self_attn", d, Role::frozen);
        b.norm_cross = make_norm(params_, name + ".norm_cross", d, Role::frozen);
        b.cross_attn = make_attention(params_, base, name + ".cross_attn", d, Role::frozen);
        b.ffn = make_feed_forward(params_, base, name + ".ffn", d, u.ffn_mult, Role::frozen);
        // Adapter init draws come from their own per-block stream.
        Rng block_rng = make_stream(u.seed, {0xADA9, std::uint64_t(desc.index)});
        if (desc.has_gsa) b.gsa = make_gsa(params_, block_rng, name + ".gsa", d);
        block_ids_.push_back(b);
    }
    ids_.out_norm = make_norm(params_, "unet.out_norm", d, Role::frozen);
    ids_.out_proj = make_linear(params_, base, "unet.out_proj", d, u.latent_channels, Role::frozen);
    ids_.text_table = params_.add("text.table", randn<T>((u.captions + 1) * u.text_tokens, d, base, 1.0), Role::frozen);

    projection_ = make_projection(params_, proj, config_.projection, "proj");
    null_identity_ = params_.add("null_identity", Matrix<T>::Zero(config_.projection.tokens_out, d), Role::trainable);
}

template <typename T>
std::vector<ParamId> FaceAdapterModel<T>::gsa_parameters(int block) const {
    const auto& g = block_ids_.at(block).gsa;
    if (!g) return {};
    return {g->gamma, g->norm.gain, g->norm.bias, g->attn.wq, g->attn.wk, g->attn.wv, g->attn.wo, g->attn.bo};
}

template <typename T>
std::vector<ParamId> FaceAdapterModel<T>::trainable_parameters() const {
    std::vector<ParamId> out;
    for (const auto& desc : layout_) {
        auto g = gsa_parameters(desc.index);
        out.insert(out.end(), g.begin(), g.end());
    }
    for (ParamId id = 0; id < params_.size(); ++id)
        if (params_[id].name.rfind("proj.", 0) == 0) out.push_back(id);
    return out;
}

template <typename T>
std::vector<ParamId> FaceAdapterModel<T>::null_embedding_parameters() const {
    return {null_identity_};
}

template <typename T>
Matrix<T> FaceAdapterModel<T>::text_embedding(int caption_id) const {
    const auto& u = config_.unet;
    if (caption_id < 0 || caption_id > u.captions) throw InvalidInput("caption id out of range");
    return params_[ids_.text_table].value.middleRows(caption_id * u.text_tokens, u.text_tokens);
}

template <typename T>
Matrix<T> timestep_features(int t, int width) {
    Matrix<T> f(1, width);
    const int half = width / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        f(0, i) = static_cast<T>(std::sin(t * freq));
        f(0, half + i) = static_cast<T>(std::cos(t * freq));
    }
    if (width % 2) f(0, width - 1) = T(0);
    return f;
}

namespace {

template <typename T>
void check_finite(const ag::Var<T>& v, int block) {
    if (!v.value().allFinite()) throw NumericError("non-finite activations in block " + std::to_string(block), block);
}

}  // namespace

template <typename T>
NoisePrediction<T> predict_noise(Binder<T>& p, const FaceAdapterModel<T>& model, const ag::Var<T>& z_t, int t,
                                 const ag::Var<T>& e_text, const ag::Var<T>& e_id, AdapterScale alpha) {
    const auto& u = model.unet();
    const auto& ids = model.ids();
    auto& tape = p.tape();
    if (z_t.rows() != u.latent_height * u.latent_width || z_t.cols() != u.latent_channels) {
        throw InvalidInput("predict_noise: latent must be (h*w, c) tokens");
    }
    if (t < 0 || t >= u.n_timesteps) throw InvalidInput("predict_noise: timestep out of range");
    if (e_text.cols() != u.d_model) throw InvalidInput("predict_noise: text embedding width mismatch");
    if (e_id && e_id.cols() != u.d_model) throw InvalidInput("predict_noise: identity embedding width mismatch");

    auto temb = tape.constant(timestep_features<T>(t, u.d_model));
    temb = nn::linear(p, ids.time_fc2, ag::silu(nn::linear(p, ids.time_fc1, temb)));

    NoisePrediction<T> out;
    auto run_block = [&](const BlockDescriptor& desc, ag::Var<T> h) {
        const auto& b = model.block_ids()[desc.index];
        auto n = nn::norm(p, b.norm_self, h);
        h = ag::add(h, nn::attend(p, b.self_attn, n, n, u.heads));
        if (e_id && b.gsa) {
            auto rec = gated_self_attention(p, *b.gsa, h, desc.grid, e_id, u.heads, desc.index);
            h = apply_adapter(h, rec, alpha);
            out.increments.push_back(std::move(rec));
        }
        h = ag::add(h, nn::attend(p, b.cross_attn, nn::norm(p, b.norm_cross, h), e_text, u.heads));
        h = ag::add(h, nn::feed_forward(p, b.ffn, h));
        check_finite(h, desc.index);
        return h;
    };

    auto h = ag::add(nn::linear(p, ids.in_proj, z_t), p(ids.position));
    h = ag::add_row(h, temb);
    const auto& layout = model.blocks();
    const int per_stage = u.blocks_per_stage;
    if (u.levels == 1) {
        for (const auto& desc : layout) h = run_block(desc, h);
    } else {
        for (int i = 0; i < per_stage; ++i) h = run_block(layout[i], h);
        auto skip = h;
        h = nn::linear(p, ids.down, ag::matmul(tape.constant(model.pool_matrix()), h));
        h = ag::add_row(h, nn::linear(p, ids.time_mid, temb));
        for (int i = per_stage; i < 2 * per_stage; ++i) h = run_block(layout[i], h);
        h = nn::linear(p, ids.up, ag::matmul(tape.constant(model.upsample_matrix()), h));
        h = ag::add(h, nn::linear(p, ids.skip, skip));
        for (int i = 2 * per_stage; i < 3 * per_stage; ++i) h = run_block(layout[i], h);
    }
    out.eps = nn::linear(p, ids.out_proj, nn::norm(p, ids.out_norm, h));
    return out;
}

template <typename T>
Matrix<T> predict_noise(const FaceAdapterModel<T>& model, const Matrix<T>& z_t, int t, const Matrix<T>& e_text,
                        const Matrix<T>* e_id, AdapterScale alpha, std::vector<std::pair<int, Matrix<T>>>* increments) {
    ag::Tape<T> tape;
    Binder<T> p(tape, model.params(), false);
    auto id = e_id ? tape.constant(*e_id) : ag::Var<T>{};
    auto pred = predict_noise(p, model, tape.constant(z_t), t, tape.constant(e_text), id, alpha);
    if (increments) {
        increments->clear();
        for (const auto& rec : pred.increments) increments->emplace_back(rec.block_index, rec.increment.value());
    }
    return pred.eps.value();
}

template <typename T>
Matrix<T> identity_embedding(const FaceAdapterModel<T>& model, const RawFaceTokens& raw) {
    ag::Tape<T> tape;
    Binder<T> p(tape, model.params(), false);
    return project_identity(p, model.projection(), model.config().projection, tape.constant(raw.cast<T>())).value();
}

#define FACT_INSTANTIATE(T)                                                                                         \
    template class FaceAdapterModel<T>;                                                                             \
    template Matrix<T> add_noise<T>(const Matrix<T>&, const Matrix<T>&, double);                                   \
    template Matrix<T> add_noise<T>(const Matrix<T>&, int, const Matrix<T>&, const NoiseSchedule&);                \
    template Matrix<T> timestep_features<T>(int, int);                                                             \
    template NoisePrediction<T> predict_noise<T>(Binder<T>&, const FaceAdapterModel<T>&, const ag::Var<T>&, int,   \
                                                 const ag::Var<T>&, const ag::Var<T>&, AdapterScale);              \
    template Matrix<T> predict_noise<T>(const FaceAdapterModel<T>&, const Matrix<T>&, int, const Matrix<T>&,       \
                                        const Matrix<T>*, AdapterScale, std::vector<std::pair<int, Matrix<T>>>*); \
    template Matrix<T> identity_embedding<T>(const FaceAdapterModel<T>&, const RawFaceTokens&);

FACT_INSTANTIATE(float)
FACT_INSTANTIATE(double)
#undef FACT_INSTANTIATE

}  // namespace fact
