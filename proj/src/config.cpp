#include "fact/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>

#include "toml.hpp"

namespace fact {

ModelConfig TrainConfig::model_config() const {
    ModelConfig mc;
    mc.unet = model;
    mc.unet.captions = dataset.captions;
    mc.projection.tokens_in = (encoder.image_size / encoder.patch) * (encoder.image_size / encoder.patch);
    mc.projection.width_in = encoder.width;
    mc.projection.tokens_out = id_tokens;
    mc.projection.d_model = model.d_model;
    mc.projection.blocks = projection_blocks;
    mc.projection.heads = projection_heads;
    mc.projection.ffn_mult = projection_ffn_mult;
    return mc;
}

void TrainConfig::validate() const {
    model_config().unet.validate();
    loss.validate();
    curriculum.validate();
    sampler.validate();
    AdapterScale check(train_alpha);
    (void)check;
    if (optimizer.kind != "adam") throw InvalidConfig("optimizer.kind must be adam");
    if (!(optimizer.lr > 0.0)) throw InvalidConfig("optimizer.lr must be positive");
    if (optimizer.batch_size < 1) throw InvalidConfig("optimizer.batch_size must be >= 1");
    if (base.steps < 0 || base.batch_size < 1 || !(base.lr > 0.0) || base.identities < 0 ||
        (base.identities > 0 && (base.identities < 2 || base.per_identity < 2))) throw InvalidConfig("invalid base pretraining settings");
    if (total_steps < 0) throw InvalidConfig("train.total_steps must be nonnegative");
    if (checkpoint_every < 0) throw InvalidConfig("train.checkpoint_every must be nonnegative");
    if (precision != 32 && precision != 64) throw InvalidConfig("train.precision must be 32 or 64");
    if (id_tokens < 1 || projection_blocks < 0) throw InvalidConfig("projection settings out of range");
    if (encoder.image_size != dataset.image_size) throw InvalidConfig("encoder.image_size must equal dataset.image_size");
    if (dataset.image_size % model.latent_height != 0 || model.latent_height != model.latent_width) {
        throw InvalidConfig("latent grid must evenly divide the image");
    }
    if (model.latent_channels != 4) throw InvalidConfig("the latent codec produces 4 channels");
    for (int b : loss.fair_blocks)
        if (b < 0 || b >= model.block_count()) throw InvalidConfig("loss.fair_blocks index out of range");
}

namespace {

using nlohmann::json;

struct Field {
    std::string key;
    std::function<json(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const json&)> set;
    bool hashed = true;
};

template <typename V>
V convert(const json& v, const std::string& key) {
    try {
        if constexpr (std::is_same_v<V, double>) {
            if (!v.is_number()) throw std::runtime_error("expected a number");
        } else if constexpr (std::is_integral_v<V> && !std::is_same_v<V, bool>) {
            if (v.is_number_float()) {
                const double d = v.get<double>();
                if (d != static_cast<double>(static_cast<long long>(d))) throw std::runtime_error("expected an integer");
                return static_cast<V>(d);
            }
            if (!v.is_number_integer()) throw std::runtime_error("expected an integer");
        }
        return v.get<V>();
    } catch (const std::exception& e) {
        throw InvalidConfig("config key '" + key + "': " + e.what() + " (got " + v.dump() + ")");
    }
}

template <typename Access>
Field make_field(std::string key, Access access, bool hashed = true) {
    Field f;
    f.key = key;
    f.hashed = hashed;
    f.get = [access](const TrainConfig& c) { return json(access(const_cast<TrainConfig&>(c))); };
    f.set = [access, key](TrainConfig& c, const json& v) {
        using V = std::decay_t<decltype(access(c))>;
        access(c) = convert<V>(v, key);
    };
    return f;
}

template <typename E>
Field enum_field(std::string key, E TrainConfig::*, std::function<E&(TrainConfig&)> access, const char* (*name)(E),
                 E (*parse)(const std::string&)) {
    Field f;
    f.key = key;
    f.get = [access, name](const TrainConfig& c) { return json(name(access(const_cast<TrainConfig&>(c)))); };
    f.set = [access, parse, key](TrainConfig& c, const json& v) { access(c) = parse(convert<std::string>(v, key)); };
    return f;
}

#define FIELD(key, member) make_field(key, [](TrainConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> t = {
            FIELD("model.levels", model.levels),
            FIELD("model.blocks_per_stage", model.blocks_per_stage),
            FIELD("model.d_model", model.d_model),
            FIELD("model.heads", model.heads),
            FIELD("model.ffn_mult", model.ffn_mult),
            FIELD("model.n_timesteps", model.n_timesteps),
            FIELD("model.beta_start", model.beta_start),
            FIELD("model.beta_end", model.beta_end),
            FIELD("model.latent_size", model.latent_height),
            FIELD("model.text_tokens", model.text_tokens),
            FIELD("model.gsa_blocks", model.gsa_blocks),
            FIELD("model.seed", model.seed),
            FIELD("projection.id_tokens", id_tokens),
            FIELD("projection.blocks", projection_blocks),
            FIELD("projection.heads", projection_heads),
            FIELD("projection.ffn_mult", projection_ffn_mult),
            FIELD("encoder.kind", encoder.kind),
            FIELD("encoder.patch", encoder.patch),
            FIELD("encoder.width", encoder.width),
            FIELD("encoder.depth", encoder.depth),
            FIELD("encoder.heads", encoder.heads),
            FIELD("encoder.ffn_mult", encoder.ffn_mult),
            FIELD("encoder.seed", encoder.seed),
            FIELD("dataset.identities", dataset.identities),
            FIELD("dataset.per_identity", dataset.per_identity),
            FIELD("dataset.image_size", dataset.image_size),
            FIELD("dataset.captions", dataset.captions),
            FIELD("dataset.seed", dataset.seed),
            FIELD("dataset.path", dataset_path),
            FIELD("loss.lambda_fair", loss.lambda_fair),
            FIELD("loss.mask_prob", loss.mask_prob),
            FIELD("loss.fair_blocks", loss.fair_blocks),
            FIELD("curriculum.shuffle_start", curriculum.shuffle_start),
            FIELD("curriculum.shuffle_end", curriculum.shuffle_end),
            FIELD("curriculum.drop_prob", curriculum.drop_prob),
            FIELD("curriculum.text_drop_prob", curriculum.text_drop_prob),
            FIELD("adapter.alpha", train_alpha),
            FIELD("sampler.cfg_scale", sampler.cfg_scale),
            FIELD("sampler.steps", sampler.steps),
            FIELD("sampler.alpha", sampler.alpha),
            FIELD("sampler.seed", sampler.seed),
            FIELD("sampler.clip_denoised", sampler.clip_denoised),
            FIELD("optimizer.kind", optimizer.kind),
            FIELD("optimizer.lr", optimizer.lr),
            FIELD("optimizer.beta1", optimizer.beta1),
            FIELD("optimizer.beta2", optimizer.beta2),
            FIELD("optimizer.eps", optimizer.eps),
            FIELD("optimizer.batch_size", optimizer.batch_size),
            FIELD("base.pretrain_steps", base.steps),
            FIELD("base.lr", base.lr),
            FIELD("base.batch_size", base.batch_size),
            FIELD("base.identities", base.identities),
            FIELD("base.per_identity", base.per_identity),
            FIELD("base.dataset_seed", base.dataset_seed),
            FIELD("train.total_steps", total_steps),
            FIELD("train.seed", seed),
            FIELD("train.precision", precision),
        };
        t.push_back(enum_field<DiffusionNorm>(
            "loss.norm", nullptr, [](TrainConfig& c) -> DiffusionNorm& { return c.loss.norm; }, diffusion_norm_name,
            parse_diffusion_norm));
        t.push_back(enum_field<DropMode>(
            "drop.mode", nullptr, [](TrainConfig& c) -> DropMode& { return c.drop_mode; }, drop_mode_name,
            parse_drop_mode));
        t.push_back(enum_field<CfgSpace>(
            "cfg.space", nullptr, [](TrainConfig& c) -> CfgSpace& { return c.sampler.space; }, cfg_space_name,
            parse_cfg_space));
        t.push_back(make_field("train.checkpoint_every", [](TrainConfig& c) -> auto& { return c.checkpoint_every; }, false));
        // Sampling settings never touch trained values.
        for (auto& f : t)
            if (f.key.rfind("sampler.", 0) == 0 || f.key.rfind("cfg.", 0) == 0) f.hashed = false;
        return t;
    }();
    return table;
}

#undef FIELD

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Mirrors the latent grid into both axes; the codec only supports square grids.
void sync_derived(TrainConfig& c) {
    c.model.latent_width = c.model.latent_height;
    c.encoder.image_size = c.dataset.image_size;
    c.model.captions = c.dataset.captions;
    c.sampler.drop_mode = c.drop_mode;
    c.curriculum.total_steps = c.total_steps;
}

json toml_value(const toml::node& node) {
    if (auto v = node.as_integer()) return json(v->get());
    if (auto v = node.as_floating_point()) return json(v->get());
    if (auto v = node.as_boolean()) return json(v->get());
    if (auto v = node.as_string()) return json(v->get());
    if (auto arr = node.as_array()) {
        json out = json::array();
        for (const auto& e : *arr) out.push_back(toml_value(e));
        return out;
    }
    throw InvalidConfig("unsupported TOML value type");
}

void flatten(const toml::table& table, const std::string& prefix, json& out) {
    for (const auto& [k, node] : table) {
        const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
        if (auto sub = node.as_table()) {
            flatten(*sub, key, out);
        } else {
            out[key] = toml_value(node);
        }
    }
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.push_back(f.key);
    return keys;
}

std::string suggest_key(const std::string& unknown) {
    std::string best;
    std::size_t best_d = std::string::npos;
    for (const auto& f : fields()) {
        const auto d = edit_distance(unknown, f.key);
        if (d < best_d) {
            best_d = d;
            best = f.key;
        }
    }
    return best;
}

nlohmann::json to_json(const TrainConfig& config) {
    json j = json::object();
    for (const auto& f : fields()) j[f.key] = f.get(config);
    return j;
}

void apply_json(TrainConfig& config, const nlohmann::json& flat) {
    if (!flat.is_object()) throw InvalidConfig("config must be an object of dotted keys");
    for (const auto& [key, value] : flat.items()) {
        auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) { return f.key == key; });
        if (it == fields().end()) {
            throw InvalidConfig("unknown config key '" + key + "'; did you mean '" + suggest_key(key) + "'?");
        }
        it->set(config, value);
    }
    sync_derived(config);
}

void apply_override(TrainConfig& config, const std::string& key_equals_value) {
    const auto eq = key_equals_value.find('=');
    if (eq == std::string::npos) throw InvalidConfig("override must look like key=value, got '" + key_equals_value + "'");
    const std::string key = key_equals_value.substr(0, eq);
    const std::string raw = key_equals_value.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    apply_json(config, json{{key, value}});
}

nlohmann::json toml_to_flat_json(const std::string& toml_text) {
    toml::table table;
    try {
        table = toml::parse(toml_text);
    } catch (const toml::parse_error& e) {
        throw InvalidConfig(std::string("TOML parse error: ") + std::string(e.description()));
    }
    json out = json::object();
    flatten(table, "", out);
    return out;
}

TrainConfig load_config_file(const std::filesystem::path& toml_path) {
    std::ifstream in(toml_path);
    if (!in) throw InvalidConfig("cannot open config file " + toml_path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    TrainConfig config;
    apply_json(config, toml_to_flat_json(ss.str()));
    return config;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
    return s;
}

std::string config_hash(const TrainConfig& config) {
    json j = json::object();
    for (const auto& f : fields())
        if (f.hashed) j[f.key] = f.get(config);
    const std::string s = j.dump();
    return hex64(fnv1a(s.data(), s.size()));
}

}  // namespace fact
