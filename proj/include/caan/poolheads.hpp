#pragma once

#include <cmath>
#include <string>

#include "caan/errors.hpp"
#include "caan/tensor.hpp"

// Global summarization heads: reduce an H x P x Q feature map to class
// scores. max/avg/roi feed a softmax classifier; the attention head scores
// classes directly from per-bin class probabilities weighted by a normalized
// attention mask.

namespace caan::heads {

enum class HeadKind { flatten, max, avg, roi, att, roi_att };

constexpr std::size_t kRoiBlock = 16;

HeadKind head_from_string(const std::string& s);
std::string head_to_string(HeadKind k);
bool head_uses_attention(HeadKind k);

template <class S>
struct AttentionHeadT {
    caan::TensorT<S> cls_weight;  // K x H x 1 x 1
    caan::TensorT<S> cls_bias;    // K
    caan::TensorT<S> att_weight;  // K x H x 1 x 1
    caan::TensorT<S> att_bias;    // K
};

template <class S>
caan::TensorT<S> global_max(caan::Tape<S>* tape, caan::TensorT<S> m) {
    return caan::ops::global_max(tape, m);
}

template <class S>
caan::TensorT<S> global_avg(caan::Tape<S>* tape, caan::TensorT<S> m) {
    return caan::ops::global_avg(tape, m);
}

// Blockwise max over 16x16 sub-areas; P and Q must divide evenly.
template <class S>
caan::TensorT<S> roi_pool(caan::Tape<S>* tape, caan::TensorT<S> m) {
    return caan::ops::maxpool2d(tape, m, kRoiBlock, kRoiBlock);
}

template <class S>
struct AttentionResult {
    caan::TensorT<S> scores;     // K, each in (0,1)
    caan::TensorT<S> attention;  // K x P x Q, per-class spatial sums equal 1
};

template <class S>
AttentionResult<S> attention_pool(caan::Tape<S>* tape, caan::TensorT<S> m,
                                  const AttentionHeadT<S>& head) {
    caan::TensorT<S> none;
    auto cls = caan::ops::conv2d(tape, m, head.cls_weight, head.cls_bias, 1, Padding::same);
    auto c = caan::ops::softmax(tape, cls, 0);  // classes compete per bin
    auto att = caan::ops::conv2d(tape, m, head.att_weight, head.att_bias, 1, Padding::same);
    auto a = caan::ops::sigmoid(tape, att);
    auto sums = caan::ops::spatial_sum(tape, a);
    auto a_norm = caan::ops::div_rows(tape, a, sums);
    auto y = caan::ops::spatial_sum(tape, caan::ops::mul(tape, a_norm, c));

    const std::size_t K = a_norm.dim(0), PQ = a_norm.dim(1) * a_norm.dim(2);
    for (std::size_t k = 0; k < K; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < PQ; ++i) s += static_cast<double>(a_norm.data()[k * PQ + i]);
        if (std::abs(s - 1.0) > 1e-5)
            throw numeric_error("attention normalization drifted: class sum " + std::to_string(s));
    }
    return {y, a_norm};
}

// softmax(W R + b); accepts a pooled vector or a flattened map.
template <class S>
caan::TensorT<S> classify_from_pooled(caan::Tape<S>* tape, caan::TensorT<S> pooled,
                                      caan::TensorT<S> weight, caan::TensorT<S> bias) {
    return caan::ops::softmax(tape, caan::ops::affine(tape, weight, pooled, bias), 0);
}

}  // namespace caan::heads
