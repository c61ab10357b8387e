#pragma once

#include <cstddef>

#include "caan/errors.hpp"
#include "caan/tensor.hpp"

// Device conditioning: one-hot expansion to a constant-plane mask, a 1x1
// transformation of the mask, and additive injection into a convolutional
// layer before its activation.

namespace caan::cond {

template <class S>
caan::TensorT<S> make_onehot(std::size_t index, std::size_t n) {
    if (index >= n) throw contract_error("one-hot index out of range");
    auto t = caan::TensorT<S>::zeros({n});
    t.data()[index] = S(1);
    return t;
}

// Index of the single active component; malformed vectors are rejected.
template <class S>
std::size_t onehot_index(const caan::TensorT<S>& onehot) {
    if (onehot.rank() != 1) throw contract_error("one-hot must be a vector");
    std::size_t active = onehot.dim(0);
    for (std::size_t i = 0; i < onehot.dim(0); ++i) {
        const S v = onehot.data()[i];
        if (v == S(1)) {
            if (active != onehot.dim(0)) throw contract_error("one-hot has multiple active components");
            active = i;
        } else if (v != S(0)) {
            throw contract_error("one-hot has a component that is neither 0 nor 1");
        }
    }
    if (active == onehot.dim(0)) throw contract_error("one-hot has no active component");
    return active;
}

// Expand an N-vector one-hot to N constant planes of size U_w x U_l.
template <class S>
caan::TensorT<S> expand_onehot(const caan::TensorT<S>& onehot, std::size_t u_w, std::size_t u_l) {
    if (u_w == 0 || u_l == 0) throw contract_error("mask dims must be positive");
    const std::size_t n = onehot.dim(0);
    const std::size_t active = onehot_index(onehot);
    auto mask = caan::TensorT<S>::zeros({n, u_w, u_l});
    S* plane = mask.data() + active * u_w * u_l;
    for (std::size_t i = 0; i < u_w * u_l; ++i) plane[i] = S(1);
    return mask;
}

// Hard argmax one-hot from device logits; ties break toward the lowest
// index and no gradient flows through the conversion.
template <class S>
caan::TensorT<S> predicted_onehot(const caan::TensorT<S>& logits) {
    if (logits.rank() != 1) throw contract_error("device logits must be a vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.dim(0); ++i)
        if (logits.data()[i] > logits.data()[best]) best = i;
    return make_onehot<S>(best, logits.dim(0));
}

// One conditioned layer step: relu(conv(W, M) + conv1x1(V, E)).
template <class S>
caan::TensorT<S> inject(caan::Tape<S>* tape, caan::TensorT<S> features, caan::TensorT<S> mask,
                        caan::TensorT<S> layer_weight, caan::TensorT<S> layer_bias,
                        caan::TensorT<S> inject_weight, caan::TensorT<S> inject_bias,
                        std::size_t dilation) {
    auto z = caan::ops::conv2d(tape, features, layer_weight, layer_bias, dilation, Padding::same);
    auto e = caan::ops::conv2d(tape, mask, inject_weight, inject_bias, 1, Padding::same);
    return caan::ops::relu(tape, caan::ops::add(tape, z, e));
}

}  // namespace caan::cond
