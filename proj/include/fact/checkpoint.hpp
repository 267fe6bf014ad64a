#pragma once

// Checkpoint directories: one little-endian float32 file per tensor plus manifest.json.
//
//   <dir>/manifest.json
//   <dir>/tensors/<name>.f32          parameters
//   <dir>/optim/<name>.{m,v}.f32      Adam moments of trained parameters
//
// 64-bit runs additionally write <file>.f64 next to every tensor so that resuming
// is exact; readers that only understand the float32 files ignore them.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "fact/nn.hpp"

namespace fact {

struct AdamSlot {
    Matrix<double> m, v;
    std::int64_t steps = 0;
};

struct TensorEntry {
    std::string name;
    std::vector<int> shape;
    Role role = Role::frozen;
    std::string file;
    std::uint64_t digest = 0;      // of the float32 file
    std::uint64_t digest_f64 = 0;  // of the float64 sidecar, 64-bit runs only
};

struct CheckpointManifest {
    int step = 0;
    std::string config_hash;
    nlohmann::json config;  // flat dotted keys, used for mismatch reports
    int precision = 32;
    std::uint64_t seed = 0;
    int next_step = 0;
    std::vector<TensorEntry> tensors;
    std::uint64_t parameter_digest = 0;
    std::uint64_t frozen_digest = 0;
};

struct CheckpointData {
    CheckpointManifest manifest;
    std::map<std::string, Matrix<double>> tensors;
    std::map<std::string, AdamSlot> optimizer;
};

template <typename T>
std::uint64_t parameter_digest(const ParamStore<T>& store);
template <typename T>
std::uint64_t role_digest(const ParamStore<T>& store, Role role);

void write_f32(const std::filesystem::path& path, const Matrix<double>& values);
Matrix<double> read_f32(const std::filesystem::path& path, int rows, int cols, const std::string& tensor);

// Values are written at the manifest's precision (float32 files always; float64 sidecars when 64).
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<T>& store,
                     const std::map<std::string, AdamSlot>& optimizer, CheckpointManifest manifest);

// Throws LoadError naming the tensor when a file is missing, truncated or its digest disagrees.
CheckpointData load_checkpoint(const std::filesystem::path& dir);
CheckpointManifest read_manifest(const std::filesystem::path& dir);

// Copies tensors into store by name; every store entry must be present with a matching shape.
template <typename T>
void restore_parameters(ParamStore<T>& store, const CheckpointData& data);

// Human-readable list of keys whose values differ.
std::string config_diff(const nlohmann::json& a, const nlohmann::json& b);

}  // namespace fact
