#include "fact/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "fact/config.hpp"

namespace fact {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::vector<char> read_bytes(const fs::path& path, const std::string& tensor) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("tensor '" + tensor + "': cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw Error("cannot write " + path.string());
}

template <typename S>
std::vector<S> narrow(const Matrix<double>& values) {
    std::vector<S> buf(values.size());
    for (Eigen::Index i = 0; i < values.size(); ++i) buf[i] = static_cast<S>(values.data()[i]);
    return buf;
}

template <typename S>
std::uint64_t write_tensor(const fs::path& path, const Matrix<double>& values) {
    const auto buf = narrow<S>(values);
    write_bytes(path, buf.data(), buf.size() * sizeof(S));
    return fnv1a(buf.data(), buf.size() * sizeof(S));
}

template <typename S>
Matrix<double> read_tensor(const fs::path& path, int rows, int cols, const std::string& tensor, std::uint64_t digest) {
    const auto bytes = read_bytes(path, tensor);
    const std::size_t expected = std::size_t(rows) * std::size_t(cols) * sizeof(S);
    if (bytes.size() != expected) {
        throw LoadError("tensor '" + tensor + "': expected " + std::to_string(expected) + " bytes in " +
                        path.filename().string() + ", found " + std::to_string(bytes.size()));
    }
    if (digest != 0 && fnv1a(bytes.data(), bytes.size()) != digest) {
        throw LoadError("tensor '" + tensor + "': contents do not match the manifest digest (" + path.filename().string() + ")");
    }
    std::vector<S> buf(std::size_t(rows) * std::size_t(cols));
    std::memcpy(buf.data(), bytes.data(), bytes.size());
    Matrix<double> out(rows, cols);
    for (std::size_t i = 0; i < buf.size(); ++i) out.data()[i] = static_cast<double>(buf[i]);
    if (!out.allFinite()) throw LoadError("tensor '" + tensor + "': non-finite values");
    return out;
}

template <typename T>
std::uint64_t digest_of(const ParamStore<T>& store, const Role* only) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : store) {
        if (only && p.role != *only) continue;
        h = fnv1a(p.name.data(), p.name.size(), h);
        const std::int64_t shape[2] = {p.value.rows(), p.value.cols()};
        h = fnv1a(shape, sizeof(shape), h);
        h = fnv1a(p.value.data(), sizeof(T) * std::size_t(p.value.size()), h);
    }
    return h;
}

std::uint64_t parse_hex(const json& j) { return std::stoull(j.get<std::string>(), nullptr, 16); }

}  // namespace

template <typename T>
std::uint64_t parameter_digest(const ParamStore<T>& store) {
    return digest_of(store, nullptr);
}

template <typename T>
std::uint64_t role_digest(const ParamStore<T>& store, Role role) {
    return digest_of(store, &role);
}

void write_f32(const fs::path& path, const Matrix<double>& values) { write_tensor<float>(path, values); }

Matrix<double> read_f32(const fs::path& path, int rows, int cols, const std::string& tensor) {
    return read_tensor<float>(path, rows, cols, tensor, 0);
}

template <typename T>
void save_checkpoint(const fs::path& dir, const ParamStore<T>& store, const std::map<std::string, AdamSlot>& optimizer,
                     CheckpointManifest manifest) {
    const bool wide = manifest.precision == 64;
    const fs::path tmp = dir.string() + ".partial";
    fs::remove_all(tmp);
    fs::create_directories(tmp / "tensors");
    fs::create_directories(tmp / "optim");

    json tensors = json::array();
    manifest.tensors.clear();
    for (const auto& p : store) {
        const Matrix<double> v = p.value.template cast<double>();
        TensorEntry e{p.name, {int(v.rows()), int(v.cols())}, p.role, "tensors/" + p.name + ".f32", 0, 0};
        e.digest = write_tensor<float>(tmp / e.file, v);
        if (wide) e.digest_f64 = write_tensor<double>(tmp / (e.file + ".f64"), v);
        json t = {{"name", e.name}, {"shape", e.shape}, {"role", role_name(e.role)}, {"file", e.file},
                  {"dtype", "float32"}, {"digest", hex64(e.digest)}};
        if (wide) t["digest_f64"] = hex64(e.digest_f64);
        tensors.push_back(t);
        manifest.tensors.push_back(e);
    }

    json optim = json::array();
    for (const auto& [name, slot] : optimizer) {
        json o = {{"name", name}, {"steps", slot.steps}, {"shape", {slot.m.rows(), slot.m.cols()}}};
        for (const char* which : {"m", "v"}) {
            const auto& values = which[0] == 'm' ? slot.m : slot.v;
            const std::string file = "optim/" + name + "." + which + ".f32";
            o[std::string(which) + "_file"] = file;
            o[std::string(which) + "_digest"] = hex64(write_tensor<float>(tmp / file, values));
            if (wide) o[std::string(which) + "_digest_f64"] = hex64(write_tensor<double>(tmp / (file + ".f64"), values));
        }
        optim.push_back(o);
    }

    manifest.parameter_digest = parameter_digest(store);
    manifest.frozen_digest = role_digest(store, Role::frozen);
    json j = {
        {"format", "fact-checkpoint"},
        {"version", 1},
        {"step", manifest.step},
        {"config_hash", manifest.config_hash},
        {"precision", manifest.precision},
        {"rng", {{"seed", manifest.seed}, {"next_step", manifest.next_step}}},
        {"parameter_digest", hex64(manifest.parameter_digest)},
        {"frozen_digest", hex64(manifest.frozen_digest)},
        {"tensors", tensors},
        {"optimizer", {{"kind", "adam"}, {"slots", optim}}},
        {"config", manifest.config},
    };
    std::ofstream(tmp / "manifest.json") << j.dump(2) << "\n";
    // Replace atomically enough for a single writer: the old directory survives until the new one is complete.
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

CheckpointManifest read_manifest(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw LoadError("no manifest.json in " + dir.string());
    CheckpointManifest m;
    try {
        json j = json::parse(in);
        m.step = j.at("step").get<int>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.config = j.value("config", json::object());
        m.precision = j.value("precision", 32);
        m.seed = j.at("rng").at("seed").get<std::uint64_t>();
        m.next_step = j.at("rng").at("next_step").get<int>();
        m.parameter_digest = parse_hex(j.at("parameter_digest"));
        m.frozen_digest = parse_hex(j.at("frozen_digest"));
        for (const auto& t : j.at("tensors")) {
            TensorEntry e;
            e.name = t.at("name").get<std::string>();
            e.shape = t.at("shape").get<std::vector<int>>();
            e.role = t.at("role").get<std::string>() == "trainable" ? Role::trainable : Role::frozen;
            e.file = t.at("file").get<std::string>();
            e.digest = parse_hex(t.at("digest"));
            if (t.contains("digest_f64")) e.digest_f64 = parse_hex(t.at("digest_f64"));
            if (e.shape.size() != 2) throw LoadError("tensor '" + e.name + "': shape must have two entries");
            m.tensors.push_back(e);
        }
    } catch (const LoadError&) {
        throw;
    } catch (const std::exception& e) {
        throw LoadError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    return m;
}

CheckpointData load_checkpoint(const fs::path& dir) {
    CheckpointData data;
    data.manifest = read_manifest(dir);
    const bool wide = data.manifest.precision == 64;
    for (const auto& e : data.manifest.tensors) {
        data.tensors[e.name] = wide ? read_tensor<double>(dir / (e.file + ".f64"), e.shape[0], e.shape[1], e.name, e.digest_f64)
                                    : read_tensor<float>(dir / e.file, e.shape[0], e.shape[1], e.name, e.digest);
    }
    std::ifstream in(dir / "manifest.json");
    const json j = json::parse(in);
    if (j.contains("optimizer")) {
        for (const auto& o : j.at("optimizer").at("slots")) {
            const auto name = o.at("name").get<std::string>();
            const auto shape = o.at("shape").get<std::vector<int>>();
            AdamSlot slot;
            slot.steps = o.at("steps").get<std::int64_t>();
            for (const char* which : {"m", "v"}) {
                const std::string w(which);
                const std::string label = name + " (adam " + w + ")";
                const std::string file = o.at(w + "_file").get<std::string>();
                auto values = wide ? read_tensor<double>(dir / (file + ".f64"), shape[0], shape[1], label,
                                                         parse_hex(o.at(w + "_digest_f64")))
                                   : read_tensor<float>(dir / file, shape[0], shape[1], label, parse_hex(o.at(w + "_digest")));
                (w == "m" ? slot.m : slot.v) = std::move(values);
            }
            data.optimizer[name] = std::move(slot);
        }
    }
    return data;
}

template <typename T>
void restore_parameters(ParamStore<T>& store, const CheckpointData& data) {
    for (ParamId i = 0; i < store.size(); ++i) {
        auto& p = store[i];
        auto it = data.tensors.find(p.name);
        if (it == data.tensors.end()) throw LoadError("tensor '" + p.name + "' missing from checkpoint");
        if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
            throw LoadError("tensor '" + p.name + "': shape mismatch with the configured model");
        }
        p.value = it->second.template cast<T>();
    }
    for (const auto& e : data.manifest.tensors) {
        if (!store.find(e.name)) throw LoadError("tensor '" + e.name + "' is not part of the configured model");
    }
}

std::string config_diff(const json& a, const json& b) {
    std::set<std::string> keys;
    for (const auto& [k, v] : a.items()) keys.insert(k);
    for (const auto& [k, v] : b.items()) keys.insert(k);
    std::ostringstream out;
    int n = 0;
    for (const auto& k : keys) {
        const json va = a.contains(k) ? a.at(k) : json();
        const json vb = b.contains(k) ? b.at(k) : json();
        if (va == vb) continue;
        out << (n++ ? "; " : "") << k << ": " << va.dump() << " -> " << vb.dump();
    }
    return n ? out.str() : std::string("(no key differences)");
}

#define FACT_INSTANTIATE(T)                                                                                          \
    template std::uint64_t parameter_digest<T>(const ParamStore<T>&);                                               \
    template std::uint64_t role_digest<T>(const ParamStore<T>&, Role);                                              \
    template void save_checkpoint<T>(const fs::path&, const ParamStore<T>&, const std::map<std::string, AdamSlot>&, \
                                     CheckpointManifest);                                                            \
    template void restore_parameters<T>(ParamStore<T>&, const CheckpointData&);

FACT_INSTANTIATE(float)
FACT_INSTANTIATE(double)
#undef FACT_INSTANTIATE

}  // namespace fact
