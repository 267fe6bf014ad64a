#include "fact/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fact {

using nlohmann::json;

double cosine_similarity(const Vector<double>& a, const Vector<double>& b) {
    if (a.size() != b.size()) throw InvalidInput("cosine_similarity: dimension mismatch");
    const double na = a.norm(), nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("identity embedding has zero norm");
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double identity_similarity(const FaceImage& generated, const FaceImage& reference, const FaceEncoder& encoder) {
    return cosine_similarity(encoder.global_embedding(generated), encoder.global_embedding(reference));
}

LocalityMap locality_ratio(const IncrementProfile& profile, const MaskPyramid& mask) {
    LocalityMap out;
    for (const auto& [block, grid] : profile.per_block) {
        auto it = mask.per_block.find(block);
        if (it == mask.per_block.end()) throw InvalidInput("locality_ratio: no mask for block " + std::to_string(block));
        const MaskGrid& m = it->second;
        if (m.rows() != grid.rows() || m.cols() != grid.cols()) throw InvalidInput("locality_ratio: grid mismatch");
        const double w_in = m.sum(), w_out = (1.0 - m.array()).sum();
        const double in = w_in > 0 ? (grid.array() * m.array()).sum() / w_in : 0.0;
        const double outside = w_out > 0 ? (grid.array() * (1.0 - m.array())).sum() / w_out : 0.0;
        if (in > 0.0) {
            out[block] = outside / in;
        } else {
            out[block] = std::nullopt;
        }
    }
    return out;
}

std::optional<double> median_locality(const LocalityMap& per_block) {
    std::vector<double> v;
    for (const auto& [b, r] : per_block)
        if (r) v.push_back(*r);
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

FaceImage with_mask(const FaceImage& image, const FaceImage& mask_source) {
    if (image.height != mask_source.height || image.width != mask_source.width) throw InvalidInput("with_mask: size mismatch");
    FaceImage out = image;
    out.mask = mask_source.mask;
    return mask_face_region(out);
}

template <typename T>
EvalReport evaluate(const Trainer<T>& trainer, const SamplerConfig& sampler) {
    const auto& model = trainer.model();
    const auto& data = trainer.dataset();
    const auto& codec = trainer.codec();
    const auto ids = data.identities();
    if (ids.size() < 2) throw InvalidInput("evaluate: needs at least two identities");

    EvalReport r;
    r.config_hash = config_hash(trainer.config());
    std::map<int, std::pair<double, int>> loc_sum;
    double sim_sum = 0.0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const int ref = data.records_of(ids[k]).front();
        const int other = data.records_of(ids[(k + 1) % ids.size()]).front();
        const auto& ref_image = data.record(ref).image;

        Conditioning<T> cond;
        cond.text = model.text_embedding(data.record(ref).caption_id);
        cond.identity = identity_embedding(model, trainer.prepared()[ref].face_tokens);
        SamplerConfig sc = sampler;
        sc.seed = sampler.seed + k;
        IncrementProfile profile;
        const Matrix<T> z = generate(model, cond, sc, &profile);

        // Everything is compared through the codec and under the reference's mask, so the
        // comparison sees the same region and the same resolution on both sides.
        const FaceImage gen = with_mask(codec.decode(z.template cast<double>()), ref_image);
        const FaceImage own_ref = with_mask(codec.decode(trainer.prepared()[ref].latent), ref_image);
        const FaceImage other_ref = with_mask(codec.decode(trainer.prepared()[other].latent), ref_image);
        IdentityScore s{ids[k], ref, other, identity_similarity(gen, own_ref, trainer.encoder()),
                        identity_similarity(gen, other_ref, trainer.encoder())};
        sim_sum += s.own;
        if (s.own > s.other) ++r.identity_wins;
        r.per_identity.push_back(s);

        for (const auto& [block, ratio] : locality_ratio(profile, trainer.prepared()[ref].pyramid)) {
            if (!ratio) continue;
            loc_sum[block].first += *ratio;
            loc_sum[block].second += 1;
        }
    }
    r.identity_sim = sim_sum / double(ids.size());
    for (const auto& desc : model.blocks()) {
        if (!desc.has_gsa) continue;
        auto it = loc_sum.find(desc.index);
        if (it != loc_sum.end() && it->second.second > 0) {
            r.locality[desc.index] = it->second.first / it->second.second;
        } else {
            r.locality[desc.index] = std::nullopt;
        }
    }
    r.locality_median = median_locality(r.locality);
    return r;
}

json report_to_json(const EvalReport& r) {
    json loc = json::object();
    for (const auto& [b, v] : r.locality) loc[std::to_string(b)] = v ? json(*v) : json(nullptr);
    json per = json::array();
    for (const auto& s : r.per_identity) {
        per.push_back({{"identity", s.identity}, {"reference_record", s.reference_record}, {"other_record", s.other_record},
                       {"own", s.own}, {"other", s.other}});
    }
    json curve = json::array();
    for (const auto& [step, loss] : r.loss_curve) curve.push_back({step, loss});
    json j = {{"name", r.name},
              {"config_hash", r.config_hash},
              {"identity_sim", r.identity_sim},
              {"identity_wins", r.identity_wins},
              {"per_identity", per},
              {"locality_ratio", loc},
              {"locality_median", r.locality_median ? json(*r.locality_median) : json(nullptr)},
              {"loss_curve", curve},
              {"eval_loss_initial", r.eval_loss_initial},
              {"eval_loss_final", r.eval_loss_final}};
    if (r.error) j["error"] = *r.error;
    return j;
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    try {
        r.name = j.value("name", "");
        r.config_hash = j.value("config_hash", "");
        r.identity_sim = j.value("identity_sim", 0.0);
        r.identity_wins = j.value("identity_wins", 0);
        for (const auto& s : j.value("per_identity", json::array())) {
            r.per_identity.push_back({s.at("identity").get<int>(), s.at("reference_record").get<int>(),
                                      s.at("other_record").get<int>(), s.at("own").get<double>(), s.at("other").get<double>()});
        }
        const json loc = j.value("locality_ratio", json::object());
        for (const auto& [b, v] : loc.items()) {
            r.locality[std::stoi(b)] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
        }
        if (j.contains("locality_median") && !j.at("locality_median").is_null()) r.locality_median = j.at("locality_median").get<double>();
        for (const auto& p : j.value("loss_curve", json::array())) r.loss_curve.emplace_back(p.at(0).get<int>(), p.at(1).get<double>());
        r.eval_loss_initial = j.value("eval_loss_initial", 0.0);
        r.eval_loss_final = j.value("eval_loss_final", 0.0);
        if (j.contains("error")) r.error = j.at("error").get<std::string>();
    } catch (const std::exception& e) {
        throw LoadError(std::string("bad report JSON: ") + e.what());
    }
    return r;
}

std::string render_table(const std::vector<EvalReport>& reports) {
    std::ostringstream out;
    out << std::left << std::setw(12) << "variant" << std::setw(18) << "config_hash" << std::right << std::setw(10)
        << "id_sim" << std::setw(8) << "wins" << std::setw(12) << "locality" << std::setw(12) << "loss_0"
        << std::setw(12) << "loss_end" << "\n";
    out << std::fixed << std::setprecision(4);
    for (const auto& r : reports) {
        out << std::left << std::setw(12) << r.name << std::setw(18) << r.config_hash << std::right;
        if (r.error) {
            out << "  failed: " << *r.error << "\n";
            continue;
        }
        out << std::setw(10) << r.identity_sim << std::setw(5) << r.identity_wins << "/" << std::setw(2)
            << r.per_identity.size() << std::setw(12);
        if (r.locality_median) {
            out << *r.locality_median;
        } else {
            out << "-";
        }
        out << std::setw(12) << r.eval_loss_initial << std::setw(12) << r.eval_loss_final << "\n";
    }
    return out.str();
}

Variant named_variant(const std::string& name) {
    if (name == "fair") return {name, {"loss.lambda_fair=0.01"}};
    if (name == "nofair") return {name, {"loss.lambda_fair=0"}};
    if (name == "wo_ds") return {name, {"curriculum.drop_prob=0", "curriculum.shuffle_start=0", "curriculum.shuffle_end=0"}};
    if (name == "wo_cl") return {name, {"curriculum.shuffle_start=0.6", "curriculum.shuffle_end=0.6"}};
    if (name == "ds_cl") return {name, {}};
    throw InvalidConfig("unknown ablation variant '" + name + "'; known: fair, nofair, wo_ds, wo_cl, ds_cl");
}

namespace {

using BaseCache = std::map<std::string, std::map<std::string, Matrix<double>>>;

template <typename T>
EvalReport train_and_evaluate(const TrainConfig& config, const IdentityDataset& dataset, const AblationOptions& options,
                              const std::string& name, BaseCache& bases) {
    Trainer<T> trainer(config, dataset);
    // Variants that agree on every base setting share one pretrained backbone.
    const std::string key = base_key(config);
    if (auto it = bases.find(key); it != bases.end()) {
        trainer.adopt_base(it->second);
    } else {
        trainer.pretrain_base();
        bases[key] = trainer.frozen_tensors();
    }
    RunOptions ro;
    std::ofstream diag;
    if (options.out) {
        ro.out = *options.out / name;
        std::filesystem::create_directories(ro.out);
        diag.open(ro.out / "diagnostics.jsonl");
        ro.diagnostics = &diag;
    } else {
        ro.write_checkpoints = false;
    }
    const auto run = run_training(trainer, ro);
    SamplerConfig sc = config.sampler;
    if (options.sampler_steps > 0) sc.steps = options.sampler_steps;
    EvalReport r = evaluate(trainer, sc);
    r.loss_curve = run.loss_curve;
    r.eval_loss_initial = run.eval_loss_initial;
    r.eval_loss_final = run.eval_loss_final;
    return r;
}

}  // namespace

std::vector<EvalReport> run_ablation(const std::vector<Variant>& variants, const TrainConfig& base, std::uint64_t seed,
                                     const AblationOptions& options) {
    std::vector<EvalReport> reports;
    TrainConfig seeded = base;
    seeded.seed = seed;
    const IdentityDataset dataset = dataset_for(seeded);
    BaseCache bases;
    for (const auto& v : variants) {
        TrainConfig c = seeded;
        for (const auto& o : v.overrides) apply_override(c, o);
        EvalReport r;
        try {
            r = c.precision == 64 ? train_and_evaluate<double>(c, dataset, options, v.name, bases)
                                  : train_and_evaluate<float>(c, dataset, options, v.name, bases);
        } catch (const NumericError& e) {
            r.error = e.what();
        }
        r.name = v.name;
        r.config_hash = config_hash(c);
        reports.push_back(std::move(r));
    }
    return reports;
}

template EvalReport evaluate<float>(const Trainer<float>&, const SamplerConfig&);
template EvalReport evaluate<double>(const Trainer<double>&, const SamplerConfig&);

}  // namespace fact
