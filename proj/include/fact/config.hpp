#pragma once

// Flat dotted-key configuration shared by the trainer, the CLI and the Python module.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "fact/curriculum.hpp"
#include "fact/fair_objective.hpp"
#include "fact/identity_encoder.hpp"
#include "fact/sampler.hpp"

namespace fact {

struct OptimizerConfig {
    std::string kind = "adam";
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 8;
};

// Optional full-parameter pretraining of the base network, run once before adapter training
// so the frozen backbone is a working denoiser. It sees a separate synthetic population
// (identities = 0 reuses the training set instead).
struct BasePretrainConfig {
    int steps = 2000;
    double lr = 1e-3;
    int batch_size = 8;
    int identities = 40;
    int per_identity = 5;
    std::uint64_t dataset_seed = 1042;
};

struct TrainConfig {
    UNetConfig model;
    int id_tokens = 4;
    int projection_blocks = 4;
    int projection_heads = 2;
    int projection_ffn_mult = 4;
    EncoderConfig encoder;
    DatasetConfig dataset;
    std::string dataset_path;  // load from disk instead of generating when non-empty
    LossWeights loss;
    CurriculumSchedule curriculum;
    DropMode drop_mode = DropMode::learned_null;
    double train_alpha = AdapterScale::kTrain;
    SamplerConfig sampler;
    OptimizerConfig optimizer;
    BasePretrainConfig base;
    int total_steps = 2000;
    std::uint64_t seed = 0;
    int checkpoint_every = 500;
    int precision = 32;

    ModelConfig model_config() const;
    void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
// Keys absent from j keep their current values; unknown keys throw InvalidConfig with a suggestion.
void apply_json(TrainConfig& config, const nlohmann::json& flat);
void apply_override(TrainConfig& config, const std::string& key_equals_value);
TrainConfig load_config_file(const std::filesystem::path& toml_path);
nlohmann::json toml_to_flat_json(const std::string& toml_text);

std::vector<std::string> config_keys();
// Nearest known key by edit distance.
std::string suggest_key(const std::string& unknown);

// Hash over every key that affects the trained parameters.
std::string config_hash(const TrainConfig& config);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace fact
