#include "fact/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace fact {

CfgSpace parse_cfg_space(const std::string& s) {
    if (s == "epsilon") return CfgSpace::epsilon;
    if (s == "latent") return CfgSpace::latent;
    throw InvalidConfig("sampler.cfg_space must be epsilon or latent, got '" + s + "'");
}

const char* cfg_space_name(CfgSpace s) { return s == CfgSpace::epsilon ? "epsilon" : "latent"; }

void SamplerConfig::validate() const {
    if (steps < 0) throw InvalidConfig("sampler.steps must be >= 1 (or 0 for all timesteps)");
    if (!(cfg_scale >= 0.0)) throw InvalidConfig("sampler.cfg_scale must be nonnegative");
    AdapterScale check(alpha);
    (void)check;
}

template <typename T>
Matrix<T> cfg_combine(const Matrix<T>& cond, const Matrix<T>& uncond, double cfg_scale) {
    if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols()) throw InvalidInput("cfg_combine: shape mismatch");
    if (cfg_scale == 0.0) return cond;
    // Written as cond + lambda (cond - uncond) so that cond == uncond returns cond bit-exactly.
    return (cond.array() + static_cast<T>(cfg_scale) * (cond.array() - uncond.array())).matrix();
}

std::vector<int> sampling_timesteps(int n_timesteps, int steps) {
    if (n_timesteps < 1) throw InvalidInput("sampling_timesteps: empty schedule");
    if (steps <= 0 || steps >= n_timesteps) steps = n_timesteps;
    std::vector<int> ts;
    if (steps == 1) return {n_timesteps - 1};
    for (int i = steps - 1; i >= 0; --i) {
        ts.push_back(static_cast<int>(std::lround(double(i) * double(n_timesteps - 1) / double(steps - 1))));
    }
    return ts;
}

template <typename T>
Matrix<T> ddpm_step(const NoiseSchedule& schedule, const Matrix<T>& z_t, int t, int t_prev, const Matrix<T>& eps_hat,
                    const Matrix<T>& noise, bool clip_denoised) {
    const double abar = schedule.alphas_cumprod.at(t);
    const double abar_prev = t_prev >= 0 ? schedule.alphas_cumprod.at(t_prev) : 1.0;
    const double beta = 1.0 - abar / abar_prev;
    Matrix<T> x0 = ((z_t.array() - static_cast<T>(std::sqrt(1.0 - abar)) * eps_hat.array()) / static_cast<T>(std::sqrt(abar))).matrix();
    if (clip_denoised) x0 = x0.cwiseMax(T(-1)).cwiseMin(T(1));
    const T c0 = static_cast<T>(std::sqrt(abar_prev) * beta / (1.0 - abar));
    const T ct = static_cast<T>(std::sqrt(abar / abar_prev) * (1.0 - abar_prev) / (1.0 - abar));
    Matrix<T> out = c0 * x0 + ct * z_t;
    if (t_prev >= 0) {
        const double var = beta * (1.0 - abar_prev) / (1.0 - abar);
        out += static_cast<T>(std::sqrt(var)) * noise;
    }
    return out;
}

namespace {

constexpr std::uint64_t kInitialNoise = 0x1A17;
constexpr std::uint64_t kStepNoise = 0x57E9;
constexpr std::uint64_t kTemplateNoise = 0x7E3A;

template <typename T>
std::optional<Matrix<T>> unconditional_identity(const FaceAdapterModel<T>& model, const Conditioning<T>& cond,
                                                DropMode mode) {
    if (!cond.identity) return std::nullopt;
    switch (mode) {
    case DropMode::learned_null: return null_identity_embedding(model);
    case DropMode::zeros: return Matrix<T>::Zero(cond.identity->rows(), cond.identity->cols());
    case DropMode::bypass: return std::nullopt;
    }
    return std::nullopt;
}

template <typename T>
Matrix<T> blend(const Matrix<T>& generated, const Matrix<T>& keep, const Vector<T>& m) {
    return (generated.array().colwise() * m.array() + keep.array().colwise() * (T(1) - m.array())).matrix();
}

template <typename T>
Matrix<T> run_sampler(const FaceAdapterModel<T>& model, const Conditioning<T>& cond, const SamplerConfig& config,
                      const Matrix<T>* template_latent, const MaskGrid* latent_mask, IncrementProfile* profile) {
    config.validate();
    const auto& u = model.unet();
    const auto& schedule = model.schedule();
    const int tokens = u.latent_height * u.latent_width;
    const Matrix<T> neg_text = cond.negative_text ? *cond.negative_text : model.null_text_embedding();
    const auto uncond_id = unconditional_identity(model, cond, config.drop_mode);
    const AdapterScale alpha(config.alpha);
    const auto ts = sampling_timesteps(u.n_timesteps, config.steps);

    Vector<T> m;
    if (template_latent) {
        if (template_latent->rows() != tokens || template_latent->cols() != u.latent_channels) {
            throw InvalidInput("inpaint: template latent shape mismatch");
        }
        if (latent_mask->size() != tokens) throw InvalidInput("inpaint: mask must be on the latent grid");
        m.resize(tokens);
        for (int i = 0; i < tokens; ++i) m(i) = static_cast<T>(latent_mask->data()[i]);
    }

    Rng init = make_stream(config.seed, {kInitialNoise});
    Matrix<T> z = randn<T>(tokens, u.latent_channels, init);
    if (template_latent) {
        Rng tn = make_stream(config.seed, {kTemplateNoise, std::uint64_t(ts.front())});
        z = blend(z, add_noise(*template_latent, ts.front(), randn<T>(tokens, u.latent_channels, tn), schedule), m);
    }

    std::map<int, Vector<double>> accum;
    std::vector<std::pair<int, Matrix<T>>> increments;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = k + 1 < ts.size() ? ts[k + 1] : -1;
        const Matrix<T>* id = cond.identity ? &*cond.identity : nullptr;
        Matrix<T> eps_c = predict_noise(model, z, t, cond.text, id, alpha, profile ? &increments : nullptr);
        if (profile) {
            for (const auto& [block, inc] : increments) {
                Vector<double> norms = inc.rowwise().norm().template cast<double>();
                auto it = accum.find(block);
                if (it == accum.end()) {
                    accum.emplace(block, norms);
                } else {
                    it->second += norms;
                }
            }
        }
        Rng step_rng = make_stream(config.seed, {kStepNoise, std::uint64_t(t)});
        const Matrix<T> noise = randn<T>(tokens, u.latent_channels, step_rng);
        if (config.cfg_scale == 0.0) {
            z = ddpm_step(schedule, z, t, t_prev, eps_c, noise, config.clip_denoised);
        } else {
            const Matrix<T>* uid = uncond_id ? &*uncond_id : nullptr;
            Matrix<T> eps_u = predict_noise(model, z, t, neg_text, uid, alpha);
            if (config.space == CfgSpace::epsilon) {
                z = ddpm_step(schedule, z, t, t_prev, cfg_combine(eps_c, eps_u, config.cfg_scale), noise, config.clip_denoised);
            } else {
                z = cfg_combine(ddpm_step(schedule, z, t, t_prev, eps_c, noise, config.clip_denoised),
                                ddpm_step(schedule, z, t, t_prev, eps_u, noise, config.clip_denoised), config.cfg_scale);
            }
        }
        if (!z.allFinite()) throw NumericError("sampler diverged at step " + std::to_string(k), static_cast<int>(k));
        if (template_latent) {
            if (t_prev >= 0) {
                Rng tn = make_stream(config.seed, {kTemplateNoise, std::uint64_t(t_prev)});
                z = blend(z, add_noise(*template_latent, t_prev, randn<T>(tokens, u.latent_channels, tn), schedule), m);
            } else {
                z = blend(z, *template_latent, m);
            }
        }
    }

    if (profile) {
        profile->per_block.clear();
        for (const auto& desc : model.blocks()) {
            if (!desc.has_gsa) continue;
            MaskGrid grid = MaskGrid::Zero(desc.grid.height, desc.grid.width);
            auto it = accum.find(desc.index);
            if (it != accum.end()) {
                Vector<double> v = it->second / double(ts.size());
                const double mx = v.maxCoeff();
                if (mx > 0.0) v /= mx;
                for (int i = 0; i < v.size(); ++i) grid.data()[i] = v(i);
            }
            profile->per_block[desc.index] = grid;
        }
    }
    return z;
}

}  // namespace

template <typename T>
Matrix<T> generate(const FaceAdapterModel<T>& model, const Conditioning<T>& cond, const SamplerConfig& config,
                   IncrementProfile* profile) {
    return run_sampler<T>(model, cond, config, nullptr, nullptr, profile);
}

template <typename T>
Matrix<T> inpaint(const FaceAdapterModel<T>& model, const Matrix<T>& template_latent, const MaskGrid& latent_mask,
                  const Conditioning<T>& cond, const SamplerConfig& config, IncrementProfile* profile) {
    return run_sampler<T>(model, cond, config, &template_latent, &latent_mask, profile);
}

template <typename T>
IncrementProfile increment_profile(const FaceAdapterModel<T>& model, const Conditioning<T>& cond,
                                   const SamplerConfig& config) {
    IncrementProfile profile;
    generate(model, cond, config, &profile);
    return profile;
}

std::string profile_to_json(const IncrementProfile& profile) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [block, grid] : profile.per_block) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index y = 0; y < grid.rows(); ++y) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index x = 0; x < grid.cols(); ++x) row.push_back(grid(y, x));
            rows.push_back(row);
        }
        j[std::to_string(block)] = rows;
    }
    return j.dump(2);
}

IncrementProfile profile_from_json(const std::string& text) {
    IncrementProfile p;
    try {
        auto j = nlohmann::json::parse(text);
        for (const auto& [key, rows] : j.items()) {
            const auto h = static_cast<Eigen::Index>(rows.size());
            const auto w = h ? static_cast<Eigen::Index>(rows.at(0).size()) : 0;
            MaskGrid g(h, w);
            for (Eigen::Index y = 0; y < h; ++y)
                for (Eigen::Index x = 0; x < w; ++x) g(y, x) = rows.at(y).at(x).get<double>();
            p.per_block[std::stoi(key)] = g;
        }
    } catch (const std::exception& e) {
        throw LoadError(std::string("bad profile JSON: ") + e.what());
    }
    return p;
}

#define FACT_INSTANTIATE(T)                                                                                          \
    template Matrix<T> cfg_combine<T>(const Matrix<T>&, const Matrix<T>&, double);                                  \
    template Matrix<T> ddpm_step<T>(const NoiseSchedule&, const Matrix<T>&, int, int, const Matrix<T>&,             \
                                    const Matrix<T>&, bool);                                                         \
    template Matrix<T> generate<T>(const FaceAdapterModel<T>&, const Conditioning<T>&, const SamplerConfig&,        \
                                   IncrementProfile*);                                                               \
    template Matrix<T> inpaint<T>(const FaceAdapterModel<T>&, const Matrix<T>&, const MaskGrid&,                    \
                                  const Conditioning<T>&, const SamplerConfig&, IncrementProfile*);                 \
    template IncrementProfile increment_profile<T>(const FaceAdapterModel<T>&, const Conditioning<T>&,              \
                                                   const SamplerConfig&);

FACT_INSTANTIATE(float)
FACT_INSTANTIATE(double)
#undef FACT_INSTANTIATE

}  // namespace fact
