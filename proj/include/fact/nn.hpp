#pragma once

// Parameter storage and the small set of layers shared by the encoder,
// projection head and backbone.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fact/autograd.hpp"
#include "fact/rng.hpp"

namespace fact {

enum class Role { frozen, trainable };

inline const char* role_name(Role r) { return r == Role::frozen ? "frozen" : "trainable"; }

using ParamId = std::size_t;

template <typename T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Role role;
};

template <typename T>
class ParamStore {
public:
    ParamId add(std::string name, Matrix<T> value, Role role) {
        if (index_.count(name)) throw InvalidConfig("duplicate parameter name: " + name);
        index_.emplace(name, params_.size());
        params_.push_back({std::move(name), std::move(value), role});
        return params_.size() - 1;
    }

    Parameter<T>& operator[](ParamId id) { return params_.at(id); }
    const Parameter<T>& operator[](ParamId id) const { return params_.at(id); }

    std::optional<ParamId> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    ParamId at(const std::string& name) const {
        auto id = find(name);
        if (!id) throw InvalidInput("no parameter named " + name);
        return *id;
    }

    std::size_t size() const { return params_.size(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::vector<ParamId> with_role(Role role) const {
        std::vector<ParamId> out;
        for (ParamId i = 0; i < params_.size(); ++i)
            if (params_[i].role == role) out.push_back(i);
        return out;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.role);
        return out;
    }

private:
    std::vector<Parameter<T>> params_;
    std::map<std::string, ParamId> index_;
};

// Binds parameters into a tape as leaves, once per parameter.
template <typename T>
class Binder {
public:
    // track_frozen additionally tracks frozen parameters (used only by base pretraining).
    Binder(ag::Tape<T>& tape, const ParamStore<T>& store, bool track_trainable, bool track_frozen = false)
        : tape_(tape), store_(store), track_(track_trainable), track_frozen_(track_frozen), leaves_(store.size(), nullptr) {}

    ag::Var<T> operator()(ParamId id) {
        if (!leaves_.at(id)) {
            const auto& p = store_[id];
            auto v = tape_.leaf(p.value, p.role == Role::trainable ? track_ : track_frozen_);
            leaves_[id] = v.node();
            return v;
        }
        return ag::Var<T>(leaves_[id], &tape_);
    }

    ag::Tape<T>& tape() { return tape_; }
    const ParamStore<T>& store() const { return store_; }

    // Adds the gradient of every tracked parameter that received one into grads[id].
    void collect(std::vector<Matrix<T>>& grads) const {
        grads.resize(store_.size());
        for (ParamId i = 0; i < leaves_.size(); ++i) {
            const auto* n = leaves_[i];
            if (!n || !n->requires_grad || n->grad.size() == 0) continue;
            if (grads[i].size() == 0) {
                grads[i] = n->grad;
            } else {
                grads[i] += n->grad;
            }
        }
    }

private:
    ag::Tape<T>& tape_;
    const ParamStore<T>& store_;
    bool track_;
    bool track_frozen_;
    std::vector<ag::Node<T>*> leaves_;
};

struct LinearIds {
    ParamId weight = 0;
    std::optional<ParamId> bias;
};

struct NormIds {
    ParamId gain = 0;
    ParamId bias = 0;
};

struct AttentionIds {
    ParamId wq = 0, wk = 0, wv = 0, wo = 0, bo = 0;
};

struct FeedForwardIds {
    NormIds norm;
    LinearIds fc1, fc2;
};

// Pre-norm transformer encoder block: x + attn(norm(x)), then x + ffn(x).
struct EncoderBlockIds {
    NormIds norm;
    AttentionIds attn;
    FeedForwardIds ffn;
};

template <typename T>
LinearIds make_linear(ParamStore<T>& store, Rng& rng, const std::string& name, int in, int out, Role role,
                      bool with_bias = true, double gain = 1.0) {
    LinearIds ids;
    ids.weight = store.add(name + ".weight", randn<T>(in, out, rng, gain / std::sqrt(double(in))), role);
    if (with_bias) ids.bias = store.add(name + ".bias", Matrix<T>::Zero(1, out), role);
    return ids;
}

template <typename T>
NormIds make_norm(ParamStore<T>& store, const std::string& name, int width, Role role) {
    return {store.add(name + ".gain", Matrix<T>::Ones(1, width), role),
            store.add(name + ".bias", Matrix<T>::Zero(1, width), role)};
}

template <typename T>
AttentionIds make_attention(ParamStore<T>& store, Rng& rng, const std::string& name, int width, Role role) {
    const double s = 1.0 / std::sqrt(double(width));
    AttentionIds ids;
    ids.wq = store.add(name + ".wq", randn<T>(width, width, rng, s), role);
    ids.wk = store.add(name + ".wk", randn<T>(width, width, rng, s), role);
    ids.wv = store.add(name + ".wv", randn<T>(width, width, rng, s), role);
    ids.wo = store.add(name + ".wo", randn<T>(width, width, rng, s), role);
    ids.bo = store.add(name + ".bo", Matrix<T>::Zero(1, width), role);
    return ids;
}

template <typename T>
FeedForwardIds make_feed_forward(ParamStore<T>& store, Rng& rng, const std::string& name, int width, int mult,
                                 Role role) {
    FeedForwardIds ids;
    ids.norm = make_norm(store, name + ".norm", width, role);
    ids.fc1 = make_linear(store, rng, name + ".fc1", width, width * mult, role);
    ids.fc2 = make_linear(store, rng, name + ".fc2", width * mult, width, role);
    return ids;
}

template <typename T>
EncoderBlockIds make_encoder_block(ParamStore<T>& store, Rng& rng, const std::string& name, int width, int ffn_mult,
                                   Role role) {
    EncoderBlockIds ids;
    ids.norm = make_norm(store, name + ".norm", width, role);
    ids.attn = make_attention(store, rng, name + ".attn", width, role);
    ids.ffn = make_feed_forward(store, rng, name + ".ffn", width, ffn_mult, role);
    return ids;
}

namespace nn {

template <typename T>
ag::Var<T> linear(Binder<T>& p, const LinearIds& ids, const ag::Var<T>& x) {
    return ag::linear(x, p(ids.weight), ids.bias ? p(*ids.bias) : ag::Var<T>{});
}

template <typename T>
ag::Var<T> norm(Binder<T>& p, const NormIds& ids, const ag::Var<T>& x) {
    return ag::layer_norm(x, p(ids.gain), p(ids.bias));
}

// Attention of queries from x over keys/values from context.
template <typename T>
ag::Var<T> attend(Binder<T>& p, const AttentionIds& ids, const ag::Var<T>& x, const ag::Var<T>& context, int heads) {
    auto q = ag::matmul(x, p(ids.wq));
    auto k = ag::matmul(context, p(ids.wk));
    auto v = ag::matmul(context, p(ids.wv));
    return ag::linear(ag::attention(q, k, v, heads), p(ids.wo), p(ids.bo));
}

template <typename T>
ag::Var<T> feed_forward(Binder<T>& p, const FeedForwardIds& ids, const ag::Var<T>& x) {
    return linear(p, ids.fc2, ag::gelu(linear(p, ids.fc1, norm(p, ids.norm, x))));
}

template <typename T>
ag::Var<T> encoder_block(Binder<T>& p, const EncoderBlockIds& ids, const ag::Var<T>& x, int heads) {
    auto h = norm(p, ids.norm, x);
    auto y = ag::add(x, attend(p, ids.attn, h, h, heads));
    return ag::add(y, feed_forward(p, ids.ffn, y));
}

}  // namespace nn
}  // namespace fact
