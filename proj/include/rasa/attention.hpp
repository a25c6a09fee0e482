#pragma once
#include <cmath>
#include <vector>

#include "rasa/tensor.hpp"

namespace rasa {

// Q/K/V/output projection weights of one multi-head attention module.
struct AttentionParams {
    Tensor wq, bq;  // d x d, 1 x d
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo;
    int n_heads = 1;
};

// Scaled dot-product attention over unordered bags: no positional encodings,
// per-head projections, concatenated heads through an output projection.
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                                   const AttentionParams& p) {
    const int d = q_in.cols();
    if (k_in.cols() != d || v_in.cols() != d)
        throw ShapeError("multi_head_attention: feature dims disagree, q " + q_in.shape_str() +
                         " k " + k_in.shape_str() + " v " + v_in.shape_str());
    if (k_in.rows() != v_in.rows())
        throw ShapeError("multi_head_attention: key/value row counts disagree");
    if (k_in.rows() < 1) throw ShapeError("multi_head_attention: empty key set");
    if (p.n_heads < 1 || d % p.n_heads != 0)
        throw ConfigError("multi_head_attention: model dim " + std::to_string(d) +
                          " not divisible by " + std::to_string(p.n_heads) + " heads");

    Tensor q = add_rowvec(matmul(q_in, p.wq), p.bq);
    Tensor k = add_rowvec(matmul(k_in, p.wk), p.bk);
    Tensor v = add_rowvec(matmul(v_in, p.wv), p.bv);

    const int dh = d / p.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(p.n_heads);
    for (int h = 0; h < p.n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor weights = softmax_rows(scores);
        head_outputs.push_back(matmul(weights, vh));
    }
    Tensor merged = p.n_heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return add_rowvec(matmul(merged, p.wo), p.bo);
}

}  // namespace rasa
