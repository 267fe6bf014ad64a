#pragma once

// Classifier-free guided DDPM sampling, latent-blending inpainting and the
// per-block increment profiler.

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "fact/curriculum.hpp"
#include "fact/diffusion_backbone.hpp"
#include "fact/fair_objective.hpp"

namespace fact {

enum class CfgSpace {
    epsilon,  // guide the noise estimate, then take one scheduler step
    latent,   // take a scheduler step per branch and guide z_{t-1}
};

CfgSpace parse_cfg_space(const std::string& s);
const char* cfg_space_name(CfgSpace s);

struct SamplerConfig {
    double cfg_scale = 7.0;
    int steps = 0;  // 0 means every training timestep
    double alpha = AdapterScale::kInference;
    std::uint64_t seed = 0;
    CfgSpace space = CfgSpace::epsilon;
    bool clip_denoised = true;
    // How the unconditional branch represents a dropped identity; matches training.
    DropMode drop_mode = DropMode::learned_null;

    void validate() const;
};

template <typename T>
struct Conditioning {
    Matrix<T> text;
    std::optional<Matrix<T>> identity;       // none: pure text-to-image
    std::optional<Matrix<T>> negative_text;  // none: the model's null text
};

// Per block: token-wise increment L2 norm averaged over sampling steps, then divided by its max.
struct IncrementProfile {
    std::map<int, MaskGrid> per_block;
};

// (1 + lambda) cond - lambda uncond
template <typename T>
Matrix<T> cfg_combine(const Matrix<T>& cond, const Matrix<T>& uncond, double cfg_scale);

// Descending timesteps visited by a sampler with `steps` steps over a schedule of length n.
std::vector<int> sampling_timesteps(int n_timesteps, int steps);

// One ancestral DDPM step from timestep t to t_prev (t_prev = -1 yields the clean sample).
template <typename T>
Matrix<T> ddpm_step(const NoiseSchedule& schedule, const Matrix<T>& z_t, int t, int t_prev, const Matrix<T>& eps_hat,
                    const Matrix<T>& noise, bool clip_denoised);

template <typename T>
Matrix<T> generate(const FaceAdapterModel<T>& model, const Conditioning<T>& cond, const SamplerConfig& config,
                   IncrementProfile* profile = nullptr);

// Blends template_latent back in outside latent_mask after every step; the output equals
// the template exactly wherever the mask is zero.
template <typename T>
Matrix<T> inpaint(const FaceAdapterModel<T>& model, const Matrix<T>& template_latent, const MaskGrid& latent_mask,
                  const Conditioning<T>& cond, const SamplerConfig& config, IncrementProfile* profile = nullptr);

template <typename T>
IncrementProfile increment_profile(const FaceAdapterModel<T>& model, const Conditioning<T>& cond,
                                   const SamplerConfig& config);

std::string profile_to_json(const IncrementProfile& profile);
IncrementProfile profile_from_json(const std::string& text);

}  // namespace fact
