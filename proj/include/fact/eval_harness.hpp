#pragma once

// Desk-scale stand-ins for identity similarity and adapter locality, and the
// ablation runner that trains and scores config variants side by side.

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fact/trainer.hpp"

namespace fact {

// Cosine of two embeddings; NumericError when either has zero norm.
double cosine_similarity(const Vector<double>& a, const Vector<double>& b);

// Cosine of the encoder's global embeddings. Both images are expected to be face-masked.
double identity_similarity(const FaceImage& generated, const FaceImage& reference, const FaceEncoder& encoder);

using LocalityMap = std::map<int, std::optional<double>>;

// Per block: mean profile over (1 - m) cells / mean over m cells, with m weighting each cell.
// nullopt when the inside mean is zero.
LocalityMap locality_ratio(const IncrementProfile& profile, const MaskPyramid& mask);

std::optional<double> median_locality(const LocalityMap& per_block);

struct IdentityScore {
    int identity = 0;
    int reference_record = 0;
    int other_record = 0;  // reference of the next identity
    double own = 0.0;
    double other = 0.0;
};

struct EvalReport {
    std::string name;
    std::string config_hash;
    double identity_sim = 0.0;  // mean similarity to the own reference
    int identity_wins = 0;      // identities whose own similarity beats the other reference
    std::vector<IdentityScore> per_identity;
    LocalityMap locality;       // per block, averaged over identities
    std::optional<double> locality_median;
    std::vector<std::pair<int, double>> loss_curve;
    double eval_loss_initial = 0.0;
    double eval_loss_final = 0.0;
    std::optional<std::string> error;  // set when the variant failed to train
};

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
std::string render_table(const std::vector<EvalReport>& reports);

// For every identity: generate from its first record (caption and identity tokens), decode,
// and compare the face region under that record's mask with the own reference and with the
// next identity's reference under the same mask. Increment profiles from the same runs give
// the locality ratios.
template <typename T>
EvalReport evaluate(const Trainer<T>& trainer, const SamplerConfig& sampler);

// Applies `image.mask = mask` and zeroes pixels outside it.
FaceImage with_mask(const FaceImage& image, const FaceImage& mask_source);

struct Variant {
    std::string name;
    std::vector<std::string> overrides;  // key=value
};

// fair, nofair, wo_ds, wo_cl, ds_cl
Variant named_variant(const std::string& name);

struct AblationOptions {
    std::optional<std::filesystem::path> out;  // per-variant checkpoints and diagnostics when set
    int sampler_steps = 0;                     // 0 keeps the config's sampler.steps
};

// Each variant trains from the same seed and dataset; failures are recorded in the report.
std::vector<EvalReport> run_ablation(const std::vector<Variant>& variants, const TrainConfig& base, std::uint64_t seed,
                                     const AblationOptions& options = {});

}  // namespace fact
