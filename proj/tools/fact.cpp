// fact: train | generate | inpaint | profile | ablate | make-dataset | report

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fact/eval_harness.hpp"
#include "fact/trainer.hpp"

namespace fs = std::filesystem;
using namespace fact;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct ConfigArgs {
    std::string config_file;
    std::vector<std::string> overrides;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("-c,--config", a.config_file, "TOML config file");
    cmd->add_option("-s,--set", a.overrides, "override a config key, key=value (repeatable)");
}

TrainConfig resolve_config(const ConfigArgs& a, const TrainConfig& start = {}) {
    TrainConfig c = a.config_file.empty() ? start : load_config_file(a.config_file);
    for (const auto& o : a.overrides) apply_override(c, o);
    c.validate();
    return c;
}

struct ConditionArgs {
    std::string identity_image;
    std::string identity_mask;
    int record = -1;
    int caption = 0;
    bool no_identity = false;
};

void add_condition_args(CLI::App* cmd, ConditionArgs& a) {
    cmd->add_option("--identity", a.identity_image, "reference face image (.png or raw float32 with .json sidecar)");
    cmd->add_option("--identity-mask", a.identity_mask, "face mask PNG for --identity");
    cmd->add_option("--record", a.record, "use this dataset record as the reference face");
    cmd->add_option("--caption", a.caption, "caption id for the text condition");
    cmd->add_flag("--no-identity", a.no_identity, "pure text-to-image");
}

struct Loaded {
    TrainConfig config;
    std::unique_ptr<FaceAdapterModel<double>> model;
};

Loaded load(const std::string& checkpoint, const ConfigArgs& args) {
    if (checkpoint.empty()) throw InvalidConfig("--checkpoint is required");
    Loaded l;
    TrainConfig c = config_from_checkpoint(checkpoint);
    for (const auto& o : args.overrides) apply_override(c, o);
    c.validate();
    l.config = c;
    // Sampling runs in 64-bit regardless of training precision.
    l.model = load_model<double>(checkpoint, c);
    return l;
}

Conditioning<double> conditioning(const Loaded& l, const ConditionArgs& a) {
    Conditioning<double> cond;
    const int captions = l.config.dataset.captions;
    if (a.caption < 0 || a.caption > captions) throw InvalidConfig("--caption must lie in [0, " + std::to_string(captions) + "]");
    cond.text = l.model->text_embedding(a.caption);
    if (a.no_identity) return cond;
    FaceImage face;
    if (!a.identity_image.empty()) {
        face = load_face_image(a.identity_image, a.identity_mask);
    } else if (a.record >= 0) {
        const auto data = dataset_for(l.config);
        if (a.record >= data.size()) throw InvalidConfig("--record out of range");
        face = data.record(a.record).image;
    } else {
        throw InvalidConfig("give --identity, --record or --no-identity");
    }
    const auto encoder = make_encoder(l.config.encoder);
    cond.identity = identity_embedding(*l.model, extract_penultimate_tokens(mask_face_region(face), *encoder));
    return cond;
}

void write_outputs(const Loaded& l, const Matrix<double>& z, const std::string& prefix) {
    const LatentCodec codec{l.config.dataset.image_size, l.config.model.latent_height, l.config.model.latent_channels};
    const auto img = codec.decode(z);
    if (fs::path(prefix).has_parent_path()) fs::create_directories(fs::path(prefix).parent_path());
    write_png(prefix + ".png", img.height, img.width, img.channels, img.pixels);
    std::vector<float> raw(z.data(), z.data() + z.size());
    write_raw_image(prefix + ".latent.f32", int(l.config.model.latent_height), int(l.config.model.latent_width),
                    int(z.cols()), raw);
    std::cout << "wrote " << prefix << ".png and " << prefix << ".latent.f32\n";
}

template <typename T>
int train_with(const TrainConfig& c, const fs::path& out, std::optional<int> stop_at, const std::string& resume) {
    fs::create_directories(out);
    Trainer<T> trainer(c, dataset_for(c));
    std::ofstream diag(out / "diagnostics.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
    std::ofstream(out / "config.json") << to_json(c).dump(2) << "\n";
    RunOptions o;
    o.out = out;
    o.stop_at = stop_at;
    if (!resume.empty()) o.resume_from = fs::path(resume);
    o.diagnostics = &diag;
    const auto r = run_training(trainer, o);
    std::cout << "step " << r.final_step << "  eval loss " << r.eval_loss_initial << " -> " << r.eval_loss_final
              << "  digest " << hex64(r.digest) << "\n";
    if (r.final_checkpoint) std::cout << "checkpoint " << r.final_checkpoint->string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Face adapter training and sampling at desk scale"};
    app.require_subcommand(1);

    ConfigArgs cfg_args;
    ConditionArgs cond_args;
    std::string out, checkpoint, resume, template_path, mask_path, variants = "fair,nofair", in_path;
    int steps = -1, stop_at = -1, sampler_steps = 0;
    std::uint64_t seed = 0;
    bool seed_given = false;

    auto* train = app.add_subcommand("train", "train the face adapter");
    add_config_args(train, cfg_args);
    train->add_option("--steps", steps, "total training steps (train.total_steps)");
    train->add_option("--stop-at", stop_at, "stop after this step and write a checkpoint");
    train->add_option("--resume", resume, "checkpoint directory to continue from");
    train->add_option("-o,--out", out, "run directory")->default_val("runs/train");

    auto* gen = app.add_subcommand("generate", "text(+identity)-to-image sampling");
    auto* inp = app.add_subcommand("inpaint", "regenerate the face region of a template image");
    auto* prof = app.add_subcommand("profile", "per-block adapter increment profile as JSON");
    for (auto* cmd : {gen, inp, prof}) {
        cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
        cmd->add_option("-s,--set", cfg_args.overrides, "override a config key, key=value (repeatable)");
        add_condition_args(cmd, cond_args);
        cmd->add_option("-o,--out", out, cmd == prof ? "output JSON path" : "output path prefix")->required();
    }
    inp->add_option("--template", template_path, "template image (.png or raw)")->required();
    inp->add_option("--mask", mask_path, "face mask PNG for the template")->required();

    auto* abl = app.add_subcommand("ablate", "train and evaluate config variants");
    add_config_args(abl, cfg_args);
    abl->add_option("--variants", variants, "comma-separated: fair, nofair, wo_ds, wo_cl, ds_cl");
    abl->add_option("--seed", seed, "training seed shared by every variant")->each([&](const std::string&) { seed_given = true; });
    abl->add_option("--steps", steps, "total training steps per variant");
    abl->add_option("--sampler-steps", sampler_steps, "sampling steps for evaluation (0: config)");
    abl->add_option("-o,--out", out, "output directory")->default_val("runs/ablate");

    auto* mk = app.add_subcommand("make-dataset", "write the synthetic identity dataset to disk");
    add_config_args(mk, cfg_args);
    mk->add_option("-o,--out", out, "dataset directory")->required();

    auto* rep = app.add_subcommand("report", "render ablation reports as a text table");
    rep->add_option("--in", in_path, "reports.json written by ablate")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*train) {
            TrainConfig c = resolve_config(cfg_args);
            if (steps >= 0) {
                c.total_steps = steps;
                c.curriculum.total_steps = steps;
            }
            const std::optional<int> stop = stop_at >= 0 ? std::optional<int>(stop_at) : std::nullopt;
            return c.precision == 64 ? train_with<double>(c, out, stop, resume) : train_with<float>(c, out, stop, resume);
        }
        if (*gen || *prof) {
            const auto l = load(checkpoint, cfg_args);
            const auto cond = conditioning(l, cond_args);
            if (*gen) {
                write_outputs(l, generate(*l.model, cond, l.config.sampler), out);
            } else {
                const auto p = increment_profile(*l.model, cond, l.config.sampler);
                if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
                std::ofstream(out) << profile_to_json(p) << "\n";
                std::cout << "wrote " << out << "\n";
            }
            return 0;
        }
        if (*inp) {
            const auto l = load(checkpoint, cfg_args);
            const auto cond = conditioning(l, cond_args);
            const FaceImage tmpl = load_face_image(template_path, mask_path);
            const LatentCodec codec{l.config.dataset.image_size, l.config.model.latent_height, l.config.model.latent_channels};
            write_outputs(l, inpaint(*l.model, codec.encode(tmpl), codec.latent_mask(tmpl), cond, l.config.sampler), out);
            return 0;
        }
        if (*abl) {
            TrainConfig c = resolve_config(cfg_args);
            if (steps >= 0) {
                c.total_steps = steps;
                c.curriculum.total_steps = steps;
            }
            std::vector<Variant> vs;
            std::stringstream ss(variants);
            for (std::string name; std::getline(ss, name, ',');)
                if (!name.empty()) vs.push_back(named_variant(name));
            AblationOptions o;
            o.out = fs::path(out);
            o.sampler_steps = sampler_steps;
            fs::create_directories(out);
            const auto reports = run_ablation(vs, c, seed_given ? seed : c.seed, o);
            json j = json::array();
            for (const auto& r : reports) j.push_back(report_to_json(r));
            std::ofstream(fs::path(out) / "reports.json") << j.dump(2) << "\n";
            std::cout << render_table(reports);
            return 0;
        }
        if (*mk) {
            const TrainConfig c = resolve_config(cfg_args);
            const auto data = generate_synthetic_identity_dataset(c.dataset);
            save_dataset(data, out);
            std::cout << "wrote " << data.size() << " records to " << out << "\n";
            return 0;
        }
        if (*rep) {
            std::ifstream in(in_path);
            if (!in) throw InvalidConfig("cannot open " + in_path);
            const json j = json::parse(in);
            std::vector<EvalReport> reports;
            for (const auto& r : j.is_array() ? j : json::array({j})) reports.push_back(report_from_json(r));
            std::cout << render_table(reports);
            return 0;
        }
    } catch (const InvalidConfig& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
