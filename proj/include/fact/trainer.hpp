#pragma once

// Adapter training loop: per-(step, sample) seeded batch assembly, Adam over the
// trainable parameters, JSON-lines diagnostics and checkpoint/resume.

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fact/checkpoint.hpp"
#include "fact/config.hpp"

namespace fact {

// Everything about a dataset record that training needs, computed once.
struct PreparedRecord {
    Matrix<double> latent;      // (grid*grid, 4)
    MaskGrid latent_mask;       // area-pooled face mask on the latent grid
    MaskPyramid pyramid;        // the same mask at every block resolution
    RawFaceTokens face_tokens;  // encoder tokens of the face-masked image
};

struct StepDiagnostics {
    int step = 0;
    double loss_total = 0.0;
    double loss_diff = 0.0;
    std::vector<std::pair<int, double>> fair_per_block;
    std::optional<double> eval_loss;
};

std::string diagnostics_line(const StepDiagnostics& d);

// Loads config.dataset_path when set, otherwise regenerates the synthetic dataset from its seed.
IdentityDataset dataset_for(const TrainConfig& config);

template <typename T>
class Trainer {
public:
    Trainer(const TrainConfig& config, IdentityDataset dataset);

    const TrainConfig& config() const { return config_; }
    FaceAdapterModel<T>& model() { return *model_; }
    const FaceAdapterModel<T>& model() const { return *model_; }
    const IdentityDataset& dataset() const { return dataset_; }
    const FaceEncoder& encoder() const { return *encoder_; }
    const LatentCodec& codec() const { return codec_; }
    const std::vector<PreparedRecord>& prepared() const { return prepared_; }
    int step() const { return step_; }

    // Parameters the optimizer may touch: adapters, projection and the learned null identity.
    const std::vector<ParamId>& optimized_parameters() const { return optimized_; }

    // Full-network denoising pretraining of the base (identity bypassed); no-op when base.pretrain_steps == 0
    // or when a base has already been adopted.
    void pretrain_base();
    // Frozen tensors by name, and their inverse: install a base pretrained elsewhere.
    std::map<std::string, Matrix<double>> frozen_tensors() const;
    void adopt_base(const std::map<std::string, Matrix<double>>& frozen);

    ConditionPlan plan(int step, int sample) const;
    std::vector<TrainingSample<T>> batch(int step) const;
    LossDiagnostics train_step();

    // Diffusion loss on a fixed held set of (record, t, eps) with paired identities and full masks.
    double evaluation_loss() const;

    void save(const std::filesystem::path& dir) const;
    // Refuses (InvalidConfig with a key diff) when the checkpoint's config hash differs.
    void resume(const std::filesystem::path& dir);

    std::uint64_t digest() const { return parameter_digest(model_->params()); }
    std::map<std::string, AdamSlot> optimizer_state() const;

private:
    struct Slot {
        Matrix<T> m, v;
        std::int64_t steps = 0;
    };

    TrainingSample<T> make_sample(int record, int caption, IdentityMode mode, const RawFaceTokens* tokens, int t,
                                  Matrix<T> eps, MaskGrid loss_mask) const;
    void adam_update(const std::vector<ParamId>& ids, const std::vector<Matrix<T>>& grads, double lr,
                     std::map<ParamId, Slot>& slots);

    TrainConfig config_;
    IdentityDataset dataset_;
    std::unique_ptr<FaceEncoder> encoder_;
    LatentCodec codec_;
    std::unique_ptr<FaceAdapterModel<T>> model_;
    std::vector<PreparedRecord> prepared_;
    std::vector<ParamId> optimized_;
    std::map<ParamId, Slot> slots_;
    int step_ = 0;
    bool base_ready_ = false;
};

// Hash of the settings that determine the pretrained base; equal keys give identical frozen weights.
std::string base_key(const TrainConfig& config);

// The flat config stored in a checkpoint manifest.
TrainConfig config_from_checkpoint(const std::filesystem::path& dir);

// Model with every tensor restored from the checkpoint.
template <typename T>
std::unique_ptr<FaceAdapterModel<T>> load_model(const std::filesystem::path& dir, const TrainConfig& config);

struct RunOptions {
    std::filesystem::path out;             // checkpoints go to out/step_NNNNNN and out/final
    std::optional<int> stop_at;            // stop early (an "interrupt") after this many steps
    std::optional<std::filesystem::path> resume_from;
    std::ostream* diagnostics = nullptr;   // JSON lines
    bool write_checkpoints = true;
    int eval_every = 0;                    // 0: evaluate only at the first and last step
};

struct RunResult {
    int final_step = 0;
    double eval_loss_initial = 0.0;
    double eval_loss_final = 0.0;
    std::vector<std::pair<int, double>> loss_curve;  // (step, training diffusion loss)
    std::uint64_t digest = 0;
    std::optional<std::filesystem::path> final_checkpoint;
};

// Non-finite losses propagate as NumericError after a diagnostics line; earlier checkpoints stay on disk.
template <typename T>
RunResult run_training(Trainer<T>& trainer, const RunOptions& options);

}  // namespace fact
