#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "conv.hpp"
#include "linalg.hpp"

namespace structinit {

/// Query/key projections of one head (D×K each) and the logit scale σ = 1/√K.
struct AttentionHeadParams {
    DenseMatrix q;
    DenseMatrix k;
    double scale = 1.0;

    AttentionHeadParams() = default;
    AttentionHeadParams(DenseMatrix q_, DenseMatrix k_) : q(std::move(q_)), k(std::move(k_)) {
        if (q.rows() != k.rows() || q.cols() != k.cols()) {
            throw DimensionError("AttentionHeadParams: q " + q.shape() + " and k " + k.shape() + " differ");
        }
        if (q.cols() == 0) throw DimensionError("AttentionHeadParams: head dimension is zero");
        scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    }
};

/// Head width K = D / heads; D must split evenly.
inline std::size_t head_dim(std::size_t dim, std::size_t heads) {
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("embedding dim " + std::to_string(dim) + " is not divisible by " +
                                    std::to_string(heads) + " heads");
    }
    return dim / heads;
}

struct AttentionMap {
    DenseMatrix matrix;
};

inline void require_compatible(const DenseMatrix& x_tilde, const AttentionHeadParams& p) {
    if (x_tilde.cols() != p.q.rows()) {
        throw DimensionError("attention: input " + x_tilde.shape() + " does not match projection " + p.q.shape());
    }
}

/// σ · X̃ Q Kᵀ X̃ᵀ.
inline DenseMatrix attention_logits(const DenseMatrix& x_tilde, const AttentionHeadParams& p) {
    require_compatible(x_tilde, p);
    return scaled(matmul_nt(matmul(x_tilde, p.q), matmul(x_tilde, p.k)), p.scale);
}

/// softmax(σ · X̃ Q Kᵀ X̃ᵀ), row-wise.
inline AttentionMap attention_map(const DenseMatrix& x_tilde, const AttentionHeadParams& p) {
    return {softmax_rows(attention_logits(x_tilde, p))};
}

/// M · X: mixes the N positions of every channel.
inline DenseMatrix spatial_mix(const DenseMatrix& m, const DenseMatrix& x) {
    if (m.rows() != m.cols() || m.cols() != x.rows()) {
        throw DimensionError("spatial_mix: mixing matrix " + m.shape() + " cannot act on " + x.shape());
    }
    return matmul(m, x);
}

inline DenseMatrix spatial_mix(const AttentionMap& m, const DenseMatrix& x) { return spatial_mix(m.matrix, x); }
inline DenseMatrix spatial_mix(const ConvMatrix& m, const DenseMatrix& x) { return spatial_mix(m.matrix, x); }

}  // namespace structinit
