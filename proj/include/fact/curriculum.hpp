#pragma once

// Identity-grouped synthetic data and per-sample resolution of the identity
// condition (paired / dropped / same-identity shuffle) under a curriculum.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fact/diffusion_backbone.hpp"
#include "fact/fair_objective.hpp"
#include "fact/image.hpp"
#include "fact/rng.hpp"

namespace fact {

struct IdentityRecord {
    FaceImage image;
    int identity_id = 0;
    int caption_id = 0;
};

class IdentityDataset {
public:
    IdentityDataset() = default;

    int add(IdentityRecord record);

    const std::vector<IdentityRecord>& records() const { return records_; }
    const IdentityRecord& record(int i) const { return records_.at(i); }
    int size() const { return static_cast<int>(records_.size()); }
    const std::map<int, std::vector<int>>& index() const { return index_; }
    const std::vector<int>& records_of(int identity_id) const;
    std::vector<int> identities() const;

private:
    std::vector<IdentityRecord> records_;
    std::map<int, std::vector<int>> index_;
};

struct DatasetConfig {
    int identities = 10;
    int per_identity = 10;
    int image_size = 64;
    int captions = 4;
    std::uint64_t seed = 42;
};

// Each identity is a blob face (skin/eye/mouth colors, radii, landmark offsets drawn once);
// each record adds position jitter, a caption-keyed background and a lighting scalar.
IdentityDataset generate_synthetic_identity_dataset(int n_identities, int n_per_identity, int image_size, int captions,
                                                    Rng& rng);
IdentityDataset generate_synthetic_identity_dataset(const DatasetConfig& config);

// Directory of PNGs (image + mask per record) and manifest.json.
void save_dataset(const IdentityDataset& dataset, const std::filesystem::path& dir);
IdentityDataset load_dataset(const std::filesystem::path& dir);

struct CurriculumSchedule {
    double shuffle_start = 0.2;
    double shuffle_end = 0.6;
    double drop_prob = 0.1;
    double text_drop_prob = 0.1;
    int total_steps = 2000;

    void validate() const;
};

// Linear ramp from shuffle_start to shuffle_end over total_steps, clamped.
double schedule_shuffle_prob(int step, const CurriculumSchedule& schedule);

enum class ConditionCase { paired, dropped, shuffled };

struct ConditionPlan {
    ConditionCase kind = ConditionCase::paired;
    std::optional<int> source_record;  // absent when dropped
};

const char* condition_case_name(ConditionCase c);

// Drop first, then shuffle among the other records of the same identity; singletons fall back to paired.
ConditionPlan sample_condition(const IdentityDataset& dataset, int record, int step, const CurriculumSchedule& schedule,
                               Rng& rng);

enum class DropMode { learned_null, zeros, bypass };

DropMode parse_drop_mode(const std::string& s);
const char* drop_mode_name(DropMode m);

// The learned null identity tokens (zero at initialization).
template <typename T>
Matrix<T> null_identity_embedding(const FaceAdapterModel<T>& model) {
    return model.params()[model.null_identity()].value;
}

// Fixed image <-> latent map standing in for a VAE: per-cell mean RGB and luminance, scaled to [-1, 1].
struct LatentCodec {
    int image_size = 64;
    int grid = 8;
    int channels = 4;

    Matrix<double> encode(const FaceImage& image) const;  // (grid*grid, channels)
    FaceImage decode(const Matrix<double>& latent) const;  // RGB, mask all ones
    MaskGrid latent_mask(const FaceImage& image) const;    // area-pooled face mask on the latent grid
};

MaskGrid mask_grid(const FaceImage& image);

}  // namespace fact
