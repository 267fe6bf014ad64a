#pragma once

// Sequential face adapter with gated self-attention:
//   x <- x + alpha * GSA(x),  GSA(x) = tanh(gamma) * TS(SelfAttn([x; e_id]))
// TS keeps the visual rows, which occupy the prefix of the concatenation.

#include <string>
#include <utility>

#include "fact/nn.hpp"

namespace fact {

struct GsaIds {
    ParamId gamma = 0;  // 1x1, zero at init
    NormIds norm;       // pre-norm over the concatenated sequence
    AttentionIds attn;
};

// Number of tensors in one adapter's parameter group.
inline constexpr std::size_t kGsaTensorCount = 8;

template <typename T>
GsaIds make_gsa(ParamStore<T>& store, Rng& rng, const std::string& prefix, int d_model);

// Visual token grid (h, w) carried next to the (N_x, d_model) token matrix.
struct GridShape {
    int height = 0;
    int width = 0;
    int tokens() const { return height * width; }
    bool operator==(const GridShape&) const = default;
};

template <typename T>
struct IncrementRecord {
    int block_index = -1;
    ag::Var<T> increment;     // GSA(x)
    ag::Var<T> input_tokens;  // x, before the residual update
    GridShape grid;
};

struct AdapterScale {
    double alpha = 1.0;

    static constexpr double kTrain = 1.0;
    static constexpr double kInference = 0.5;

    explicit AdapterScale(double a = kTrain);
};

template <typename T>
ag::Var<T> token_select(const ag::Var<T>& concat, Eigen::Index n_visual);

template <typename T>
IncrementRecord<T> gated_self_attention(Binder<T>& params, const GsaIds& ids, const ag::Var<T>& x, GridShape grid,
                                        const ag::Var<T>& e_id, int heads, int block_index = -1);

template <typename T>
ag::Var<T> apply_adapter(const ag::Var<T>& x, const IncrementRecord<T>& record, AdapterScale scale);

}  // namespace fact
