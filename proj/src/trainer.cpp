#include "fact/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <tuple>

namespace fact {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kBatchStream = 0xBA7C;
constexpr std::uint64_t kBaseStream = 0xBA5E;
constexpr std::uint64_t kEvalStream = 0xE7A1;
constexpr int kEvalSamples = 32;

std::string step_dir(int step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%06d", step);
    return buf;
}

IdentityMode drop_identity_mode(DropMode m) {
    switch (m) {
    case DropMode::learned_null: return IdentityMode::learned_null;
    case DropMode::zeros: return IdentityMode::zeros;
    case DropMode::bypass: return IdentityMode::bypass;
    }
    return IdentityMode::learned_null;
}

}  // namespace

std::string diagnostics_line(const StepDiagnostics& d) {
    json fair = json::object();
    for (const auto& [b, v] : d.fair_per_block) fair[std::to_string(b)] = v;
    json j = {{"step", d.step}, {"loss_total", d.loss_total}, {"loss_diff", d.loss_diff}, {"fair_per_block", fair}};
    if (d.eval_loss) j["eval_loss"] = *d.eval_loss;
    return j.dump();
}

IdentityDataset dataset_for(const TrainConfig& config) {
    if (!config.dataset_path.empty()) return load_dataset(config.dataset_path);
    return generate_synthetic_identity_dataset(config.dataset);
}

template <typename T>
Trainer<T>::Trainer(const TrainConfig& config, IdentityDataset dataset)
    : config_(config), dataset_(std::move(dataset)) {
    config_.validate();
    if (dataset_.size() == 0) throw InvalidConfig("training dataset is empty");
    encoder_ = make_encoder(config_.encoder);
    codec_ = LatentCodec{config_.dataset.image_size, config_.model.latent_height, config_.model.latent_channels};
    model_ = std::make_unique<FaceAdapterModel<T>>(config_.model_config());

    prepared_.reserve(dataset_.size());
    for (const auto& rec : dataset_.records()) {
        if (rec.image.height != codec_.image_size || rec.image.width != codec_.image_size) {
            throw InvalidConfig("dataset image size does not match dataset.image_size");
        }
        if (rec.caption_id < 0 || rec.caption_id >= config_.dataset.captions) {
            throw InvalidConfig("dataset caption id out of range for dataset.captions");
        }
        PreparedRecord p;
        p.latent = codec_.encode(rec.image);
        p.latent_mask = codec_.latent_mask(rec.image);
        p.pyramid = build_mask_pyramid(p.latent_mask, model_->blocks());
        p.face_tokens = extract_penultimate_tokens(mask_face_region(rec.image), *encoder_);
        prepared_.push_back(std::move(p));
    }

    optimized_ = model_->trainable_parameters();
    for (ParamId id : model_->null_embedding_parameters())
        if (std::find(optimized_.begin(), optimized_.end(), id) == optimized_.end()) optimized_.push_back(id);
    std::sort(optimized_.begin(), optimized_.end());
}

template <typename T>
TrainingSample<T> Trainer<T>::make_sample(int record, int caption, IdentityMode mode, const RawFaceTokens* tokens, int t,
                                          Matrix<T> eps, MaskGrid loss_mask) const {
    TrainingSample<T> s;
    s.z0 = prepared_[record].latent.template cast<T>();
    s.t = t;
    s.eps = std::move(eps);
    s.caption_id = caption;
    s.identity = mode;
    s.face_tokens = tokens;
    s.loss_mask = std::move(loss_mask);
    s.fair_masks = prepared_[record].pyramid;
    return s;
}

template <typename T>
ConditionPlan Trainer<T>::plan(int step, int sample) const {
    Rng rng = make_stream(config_.seed, {kBatchStream, std::uint64_t(step), std::uint64_t(sample)});
    const int record = uniform_int(rng, 0, dataset_.size() - 1);
    return sample_condition(dataset_, record, step, config_.curriculum, rng);
}

template <typename T>
std::vector<TrainingSample<T>> Trainer<T>::batch(int step) const {
    const auto& u = model_->unet();
    std::vector<TrainingSample<T>> out;
    out.reserve(config_.optimizer.batch_size);
    for (int i = 0; i < config_.optimizer.batch_size; ++i) {
        // Draw order within a sample's stream: record, condition, text drop, t, eps, loss mask.
        Rng rng = make_stream(config_.seed, {kBatchStream, std::uint64_t(step), std::uint64_t(i)});
        const int record = uniform_int(rng, 0, dataset_.size() - 1);
        const ConditionPlan plan = sample_condition(dataset_, record, step, config_.curriculum, rng);
        const bool drop_text = bernoulli(rng, config_.curriculum.text_drop_prob);
        const int t = uniform_int(rng, 0, u.n_timesteps - 1);
        Matrix<T> eps = randn<T>(u.latent_height * u.latent_width, u.latent_channels, rng);
        MaskGrid loss_mask = random_face_mask(prepared_[record].latent_mask, config_.loss.mask_prob, rng);

        IdentityMode mode = IdentityMode::tokens;
        const RawFaceTokens* tokens = nullptr;
        if (plan.kind == ConditionCase::dropped) {
            mode = drop_identity_mode(config_.drop_mode);
        } else {
            tokens = &prepared_[*plan.source_record].face_tokens;
        }
        const int caption = drop_text ? u.captions : dataset_.record(record).caption_id;
        out.push_back(make_sample(record, caption, mode, tokens, t, std::move(eps), std::move(loss_mask)));
    }
    return out;
}

template <typename T>
void Trainer<T>::adam_update(const std::vector<ParamId>& ids, const std::vector<Matrix<T>>& grads, double lr,
                             std::map<ParamId, Slot>& slots) {
    const auto& o = config_.optimizer;
    auto& params = model_->params();
    for (ParamId id : ids) {
        const auto& g = grads.at(id);
        // Parameters that took no part in this batch keep their value and moments.
        if (g.size() == 0) continue;
        auto& p = params[id].value;
        auto& s = slots[id];
        if (s.m.size() == 0) {
            s.m = Matrix<T>::Zero(p.rows(), p.cols());
            s.v = Matrix<T>::Zero(p.rows(), p.cols());
        }
        ++s.steps;
        const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
        s.m = b1 * s.m + (T(1) - b1) * g;
        s.v = b2 * s.v + (T(1) - b2) * g.cwiseProduct(g);
        const T c1 = static_cast<T>(1.0 - std::pow(o.beta1, double(s.steps)));
        const T c2 = static_cast<T>(1.0 - std::pow(o.beta2, double(s.steps)));
        p.array() -= static_cast<T>(lr) * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + static_cast<T>(o.eps));
        if (!p.allFinite()) throw NumericError("parameter " + params[id].name + " became non-finite");
    }
}

template <typename T>
LossDiagnostics Trainer<T>::train_step() {
    const auto samples = batch(step_);
    std::vector<Matrix<T>> grads;
    auto d = batch_loss(*model_, samples, config_.loss, AdapterScale(config_.train_alpha), &grads);
    for (ParamId id = 0; id < grads.size(); ++id) {
        if (grads[id].size() != 0 && model_->params()[id].role != Role::trainable) {
            throw Error("gradient reached frozen parameter " + model_->params()[id].name);
        }
    }
    adam_update(optimized_, grads, config_.optimizer.lr, slots_);
    ++step_;
    return d;
}

template <typename T>
void Trainer<T>::pretrain_base() {
    const auto& b = config_.base;
    if (b.steps <= 0 || base_ready_) return;
    const auto& u = model_->unet();
    // Latent, caption and mask pyramid of every pretraining image.
    std::vector<std::tuple<Matrix<double>, int, MaskPyramid>> images;
    if (b.identities > 0) {
        Rng rng = make_stream(b.dataset_seed, {0xDA7A});
        const auto population = generate_synthetic_identity_dataset(b.identities, b.per_identity, config_.dataset.image_size,
                                                                    config_.dataset.captions, rng);
        for (const auto& rec : population.records()) {
            images.emplace_back(codec_.encode(rec.image), rec.caption_id,
                                build_mask_pyramid(codec_.latent_mask(rec.image), model_->blocks()));
        }
    } else {
        for (int r = 0; r < dataset_.size(); ++r)
            images.emplace_back(prepared_[r].latent, dataset_.record(r).caption_id, prepared_[r].pyramid);
    }
    std::vector<ParamId> base_ids = model_->params().with_role(Role::frozen);
    std::map<ParamId, Slot> slots;
    LossWeights weights = config_.loss;
    weights.lambda_fair = 0.0;
    const MaskGrid ones = MaskGrid::Ones(u.latent_height, u.latent_width);
    for (int step = 0; step < b.steps; ++step) {
        std::vector<Matrix<T>> grads(model_->params().size());
        for (int i = 0; i < b.batch_size; ++i) {
            Rng rng = make_stream(config_.seed, {kBaseStream, std::uint64_t(step), std::uint64_t(i)});
            const int pick = uniform_int(rng, 0, static_cast<int>(images.size()) - 1);
            const bool drop_text = bernoulli(rng, config_.curriculum.text_drop_prob);
            const auto& [latent, caption, pyramid] = images[pick];
            TrainingSample<T> sample;
            sample.z0 = latent.template cast<T>();
            sample.t = uniform_int(rng, 0, u.n_timesteps - 1);
            sample.eps = randn<T>(u.latent_height * u.latent_width, u.latent_channels, rng);
            sample.caption_id = drop_text ? u.captions : caption;
            sample.identity = IdentityMode::bypass;
            sample.loss_mask = ones;
            sample.fair_masks = pyramid;

            ag::Tape<T> tape;
            Binder<T> p(tape, model_->params(), false, true);
            auto loss = total_loss(p, *model_, sample, weights, AdapterScale(config_.train_alpha));
            tape.backward(ag::scale(loss, T(1) / T(b.batch_size)));
            p.collect(grads);
        }
        adam_update(base_ids, grads, b.lr, slots);
    }
    base_ready_ = true;
}

template <typename T>
std::map<std::string, Matrix<double>> Trainer<T>::frozen_tensors() const {
    std::map<std::string, Matrix<double>> out;
    for (ParamId id : model_->params().with_role(Role::frozen)) {
        out[model_->params()[id].name] = model_->params()[id].value.template cast<double>();
    }
    return out;
}

template <typename T>
void Trainer<T>::adopt_base(const std::map<std::string, Matrix<double>>& frozen) {
    auto& params = model_->params();
    for (ParamId id : params.with_role(Role::frozen)) {
        auto it = frozen.find(params[id].name);
        if (it == frozen.end()) throw InvalidConfig("adopted base lacks tensor " + params[id].name);
        if (it->second.rows() != params[id].value.rows() || it->second.cols() != params[id].value.cols()) {
            throw InvalidConfig("adopted base tensor " + params[id].name + " has the wrong shape");
        }
        params[id].value = it->second.template cast<T>();
    }
    base_ready_ = true;
}

std::string base_key(const TrainConfig& config) {
    const auto flat = to_json(config);
    nlohmann::json relevant = nlohmann::json::object();
    for (const auto& [key, value] : flat.items()) {
        const bool keep = key.rfind("model.", 0) == 0 || key.rfind("base.", 0) == 0 || key == "dataset.image_size" ||
                          key == "dataset.captions" || key == "curriculum.text_drop_prob" || key == "loss.norm" ||
                          key == "adapter.alpha" || key == "train.seed" || key == "train.precision" ||
                          key == "optimizer.beta1" || key == "optimizer.beta2" || key == "optimizer.eps";
        if (keep) relevant[key] = value;
    }
    const std::string text = relevant.dump();
    return hex64(fnv1a(text.data(), text.size()));
}

template <typename T>
double Trainer<T>::evaluation_loss() const {
    const auto& u = model_->unet();
    std::vector<TrainingSample<T>> set;
    const MaskGrid ones = MaskGrid::Ones(u.latent_height, u.latent_width);
    for (int i = 0; i < kEvalSamples; ++i) {
        Rng rng = make_stream(config_.seed, {kEvalStream, std::uint64_t(i)});
        const int record = i % dataset_.size();
        const int t = uniform_int(rng, 0, u.n_timesteps - 1);
        Matrix<T> eps = randn<T>(u.latent_height * u.latent_width, u.latent_channels, rng);
        set.push_back(make_sample(record, dataset_.record(record).caption_id, IdentityMode::tokens,
                                  &prepared_[record].face_tokens, t, std::move(eps), ones));
    }
    LossWeights w = config_.loss;
    w.norm = DiffusionNorm::masked_mean;
    return batch_loss(*model_, set, w, AdapterScale(config_.train_alpha), static_cast<std::vector<Matrix<T>>*>(nullptr)).diffusion;
}

template <typename T>
std::map<std::string, AdamSlot> Trainer<T>::optimizer_state() const {
    std::map<std::string, AdamSlot> out;
    for (const auto& [id, s] : slots_) {
        out[model_->params()[id].name] = AdamSlot{s.m.template cast<double>(), s.v.template cast<double>(), s.steps};
    }
    return out;
}

template <typename T>
void Trainer<T>::save(const fs::path& dir) const {
    CheckpointManifest m;
    m.step = step_;
    m.config_hash = config_hash(config_);
    m.config = to_json(config_);
    m.precision = config_.precision;
    m.seed = config_.seed;
    m.next_step = step_;
    save_checkpoint(dir, model_->params(), optimizer_state(), m);
}

template <typename T>
void Trainer<T>::resume(const fs::path& dir) {
    const auto manifest = read_manifest(dir);
    const auto hash = config_hash(config_);
    if (manifest.config_hash != hash) {
        throw InvalidConfig("checkpoint config hash " + manifest.config_hash + " does not match current config " + hash +
                            ": " + config_diff(manifest.config, to_json(config_)));
    }
    if (manifest.precision != config_.precision) throw InvalidConfig("checkpoint precision differs from train.precision");
    const auto data = load_checkpoint(dir);
    restore_parameters(model_->params(), data);
    slots_.clear();
    for (const auto& [name, slot] : data.optimizer) {
        const ParamId id = model_->params().at(name);
        slots_[id] = Slot{slot.m.template cast<T>(), slot.v.template cast<T>(), slot.steps};
    }
    step_ = manifest.next_step;
}

template <typename T>
RunResult run_training(Trainer<T>& trainer, const RunOptions& options) {
    const auto& cfg = trainer.config();
    if (options.resume_from) {
        trainer.resume(*options.resume_from);
    } else {
        trainer.pretrain_base();
    }
    RunResult result;
    const int end = std::min(cfg.total_steps, options.stop_at.value_or(cfg.total_steps));
    result.eval_loss_initial = trainer.evaluation_loss();
    if (options.write_checkpoints && trainer.step() == 0) trainer.save(options.out / step_dir(0));

    double last_eval = result.eval_loss_initial;
    while (trainer.step() < end) {
        const int step = trainer.step();
        LossDiagnostics d;
        try {
            d = trainer.train_step();
        } catch (const NumericError& e) {
            if (options.diagnostics) *options.diagnostics << json{{"step", step}, {"error", e.what()}}.dump() << "\n";
            throw;
        }
        StepDiagnostics sd{step, d.total, d.diffusion, d.fair_per_block, std::nullopt};
        if (step == 0) sd.eval_loss = result.eval_loss_initial;
        const int done = trainer.step();
        if ((options.eval_every > 0 && done % options.eval_every == 0) || done == end) {
            last_eval = trainer.evaluation_loss();
            if (done == end) sd.eval_loss = last_eval;
        }
        if (options.diagnostics) *options.diagnostics << diagnostics_line(sd) << "\n";
        result.loss_curve.emplace_back(step, d.diffusion);
        if (options.write_checkpoints && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != end) {
            trainer.save(options.out / step_dir(done));
        }
    }
    result.eval_loss_final = last_eval;
    result.final_step = trainer.step();
    result.digest = trainer.digest();
    if (options.write_checkpoints) {
        const fs::path dir = options.out / (result.final_step == cfg.total_steps ? std::string("final") : step_dir(result.final_step));
        trainer.save(dir);
        result.final_checkpoint = dir;
    }
    return result;
}

TrainConfig config_from_checkpoint(const fs::path& dir) {
    TrainConfig c;
    apply_json(c, read_manifest(dir).config);
    return c;
}

template <typename T>
std::unique_ptr<FaceAdapterModel<T>> load_model(const fs::path& dir, const TrainConfig& config) {
    auto model = std::make_unique<FaceAdapterModel<T>>(config.model_config());
    restore_parameters(model->params(), load_checkpoint(dir));
    return model;
}

template class Trainer<float>;
template class Trainer<double>;
template RunResult run_training<float>(Trainer<float>&, const RunOptions&);
template RunResult run_training<double>(Trainer<double>&, const RunOptions&);
template std::unique_ptr<FaceAdapterModel<float>> load_model<float>(const fs::path&, const TrainConfig&);
template std::unique_ptr<FaceAdapterModel<double>> load_model<double>(const fs::path&, const TrainConfig&);

}  // namespace fact
