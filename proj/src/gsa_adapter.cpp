#include "fact/gsa_adapter.hpp"

namespace fact {

AdapterScale::AdapterScale(double a) : alpha(a) {
    if (!(a >= 0.0 && a <= 2.0)) throw InvalidConfig("adapter scale alpha must lie in [0, 2]");
}

template <typename T>
GsaIds make_gsa(ParamStore<T>& store, Rng& rng, const std::string& prefix, int d_model) {
    GsaIds ids;
    ids.gamma = store.add(prefix + ".gamma", Matrix<T>::Zero(1, 1), Role::trainable);
    ids.norm = make_norm(store, prefix + ".norm", d_model, Role::trainable);
    ids.attn = make_attention(store, rng, prefix + ".attn", d_model, Role::trainable);
    return ids;
}

template <typename T>
ag::Var<T> token_select(const ag::Var<T>& concat, Eigen::Index n_visual) {
    if (n_visual < 0 || n_visual > concat.rows()) {
        throw InvalidInput("token_select: n_visual " + std::to_string(n_visual) + " exceeds sequence length " +
                           std::to_string(concat.rows()));
    }
    return ag::slice_rows(concat, 0, n_visual);
}

template <typename T>
IncrementRecord<T> gated_self_attention(Binder<T>& params, const GsaIds& ids, const ag::Var<T>& x, GridShape grid,
                                        const ag::Var<T>& e_id, int heads, int block_index) {
    if (x.cols() != e_id.cols()) {
        throw InvalidInput("gated_self_attention: visual width " + std::to_string(x.cols()) +
                           " differs from identity width " + std::to_string(e_id.cols()));
    }
    if (grid.tokens() != x.rows()) throw InvalidInput("gated_self_attention: grid does not match token count");
    auto h = nn::norm(params, ids.norm, ag::concat_rows(x, e_id));
    auto attended = nn::attend(params, ids.attn, h, h, heads);
    auto selected = token_select(attended, x.rows());
    auto increment = ag::scale_by(selected, ag::tanh(params(ids.gamma)));
    return {block_index, increment, x, grid};
}

template <typename T>
ag::Var<T> apply_adapter(const ag::Var<T>& x, const IncrementRecord<T>& record, AdapterScale scale) {
    if (record.increment.rows() != x.rows() || record.increment.cols() != x.cols()) {
        throw InvalidInput("apply_adapter: increment shape does not match tokens");
    }
    if (scale.alpha == 0.0) return x;
    return ag::add(x, ag::scale(record.increment, static_cast<T>(scale.alpha)));
}

#define FACT_INSTANTIATE(T)                                                                                      \
    template GsaIds make_gsa<T>(ParamStore<T>&, Rng&, const std::string&, int);                                \
    template ag::Var<T> token_select<T>(const ag::Var<T>&, Eigen::Index);                                     \
    template IncrementRecord<T> gated_self_attention<T>(Binder<T>&, const GsaIds&, const ag::Var<T>&, GridShape, \
                                                        const ag::Var<T>&, int, int);                          \
    template ag::Var<T> apply_adapter<T>(const ag::Var<T>&, const IncrementRecord<T>&, AdapterScale);

FACT_INSTANTIATE(float)
FACT_INSTANTIATE(double)
#undef FACT_INSTANTIATE

}  // namespace fact
