#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "caan/errors.hpp"

// Dense tensor engine with reverse-mode differentiation. Tensors are shared
// handles over row-major value buffers; operations optionally record a
// backward closure on a Tape. The scalar type is a template parameter:
// float for training, double for verification oracles and gradient checks.

namespace caan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <class S>
struct TensorData {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // same length as values once touched by backward
    bool requires_grad = false;
};

template <class S>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        TensorT t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = std::move(shape);
        t.d_->values.assign(shape_numel(t.d_->shape), S(0));
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static TensorT from_values(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw shape_error("tensor " + shape_str(shape) + " cannot hold " +
                              std::to_string(values.size()) + " values");
        TensorT t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static TensorT scalar(S v) { return from_values({}, {v}); }

    bool valid() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->values.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

    std::vector<S>& values() { return d_->values; }
    const std::vector<S>& values() const { return d_->values; }
    S* data() { return d_->values.data(); }
    const S* data() const { return d_->values.data(); }

    S item() const {
        if (numel() != 1) throw contract_error("item() on tensor " + shape_str(shape()));
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<S>& grad() {
        ensure_grad();
        return d_->grad;
    }
    const std::vector<S>& grad() const { return d_->grad; }
    void ensure_grad() {
        if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), S(0));
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
    }
    void clear_grad() { d_->grad.clear(); }

    // Identity of the underlying buffer, used by optimizers to key state.
    const void* id() const { return d_.get(); }

    bool same_shape(const TensorT& o) const { return d_->shape == o.d_->shape; }

    bool all_finite() const {
        for (S v : d_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::shared_ptr<TensorData<S>> d_;
};

// Tape of recorded operations in execution order. Execution order is a
// topological order of the data flow, so replaying entries in reverse
// visits each operation exactly once with its output gradient complete.
template <class S>
class Tape {
public:
    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return entries_.size(); }

    void backward(TensorT<S> loss) {
        if (loss.numel() != 1) throw contract_error("backward requires a scalar loss, got " + shape_str(loss.shape()));
        loss.ensure_grad();
        loss.grad()[0] = S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

    void clear() { entries_.clear(); }

private:
    std::vector<std::function<void()>> entries_;
};

enum class Padding { same, valid };

namespace ops {

template <class S>
void check_rank(const TensorT<S>& t, std::size_t r, const char* what) {
    if (t.rank() != r)
        throw shape_error(std::string(what) + " expects rank-" + std::to_string(r) + " tensor, got " +
                          shape_str(t.shape()));
}

template <class S>
TensorT<S> add(Tape<S>* tape, TensorT<S> a, TensorT<S> b) {
    if (!a.same_shape(b))
        throw shape_error("add of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    auto out = TensorT<S>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (tape)
        tape->record([a, b, out]() mutable {
            const std::size_t n = out.numel();
            const S* g = out.grad().data();
            S* ga = a.grad().data();
            S* gb = b.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
        });
    return out;
}

template <class S>
TensorT<S> mul(Tape<S>* tape, TensorT<S> a, TensorT<S> b) {
    if (!a.same_shape(b))
        throw shape_error("mul of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    auto out = TensorT<S>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (tape)
        tape->record([a, b, out]() mutable {
            const std::size_t n = out.numel();
            const S* g = out.grad().data();
            S* ga = a.grad().data();
            S* gb = b.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                ga[i] += g[i] * b.data()[i];
                gb[i] += g[i] * a.data()[i];
            }
        });
    return out;
}

template <class S>
TensorT<S> scale(Tape<S>* tape, TensorT<S> a, S c) {
    auto out = TensorT<S>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = c * a.data()[i];
    if (tape)
        tape->record([a, out, c]() mutable {
            const std::size_t n = out.numel();
            const S* g = out.grad().data();
            S* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += c * g[i];
        });
    return out;
}

template <class S>
TensorT<S> relu(Tape<S>* tape, TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
    if (tape)
        tape->record([a, out]() mutable {
            // subgradient at 0 is 0
            const std::size_t n = out.numel();
            const S* g = out.grad().data();
            S* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i)
                if (a.data()[i] > S(0)) ga[i] += g[i];
        });
    return out;
}

template <class S>
TensorT<S> sigmoid(Tape<S>* tape, TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    const std::size_t n = a.numel();
    // clamped into the open interval so saturated outputs never collapse to
    // exactly 0 or 1 (attention normalization divides by sums of these)
    const S hi = S(1) - std::numeric_limits<S>::epsilon() / S(2);
    const S lo = std::numeric_limits<S>::min();
    for (std::size_t i = 0; i < n; ++i) {
        const S x = a.data()[i];
        const S y = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                              : std::exp(x) / (S(1) + std::exp(x));
        out.data()[i] = std::min(hi, std::max(lo, y));
    }
    if (tape)
        tape->record([a, out]() mutable {
            const std::size_t n = out.numel();
            const S* g = out.grad().data();
            S* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                const S y = out.data()[i];
                ga[i] += g[i] * y * (S(1) - y);
            }
        });
    return out;
}

// Softmax along one axis; each 1-d slice along `axis` is normalized
// independently (max-subtracted for stability).
template <class S>
TensorT<S> softmax(Tape<S>* tape, TensorT<S> a, std::size_t axis) {
    if (axis >= a.rank()) throw contract_error("softmax axis " + std::to_string(axis) +
                                               " out of range for " + shape_str(a.shape()));
    const Shape& sh = a.shape();
    const std::size_t len = sh[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];

    auto out = TensorT<S>::zeros(sh);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            S mx = a.data()[base];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, a.data()[base + k * inner]);
            double denom = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                const S e = std::exp(a.data()[base + k * inner] - mx);
                out.data()[base + k * inner] = e;
                denom += static_cast<double>(e);
            }
            for (std::size_t k = 0; k < len; ++k)
                out.data()[base + k * inner] = static_cast<S>(out.data()[base + k * inner] / denom);
        }
    }
    if (tape)
        tape->record([a, out, len, inner, outer]() mutable {
            S* ga = a.grad().data();
            const S* g = out.grad().data();
            const S* y = out.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < len; ++k)
                        dot += static_cast<double>(g[base + k * inner]) * y[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k) {
                        const std::size_t idx = base + k * inner;
                        ga[idx] += y[idx] * (g[idx] - static_cast<S>(dot));
                    }
                }
            }
        });
    return out;
}

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t dilation, Padding pad) {
    if (pad == Padding::same) return in;
    const std::size_t span = dilation * (k - 1);
    if (in <= span) throw shape_error("valid conv output dim would be non-positive: input " +
                                      std::to_string(in) + ", span " + std::to_string(span));
    return in - span;
}

// Dilated 2-d cross-correlation, stride 1. Zero padding for `same` keeps the
// spatial dims (odd kernels only); `valid` shrinks by dilation*(k-1).
template <class S>
TensorT<S> conv2d(Tape<S>* tape, TensorT<S> input, TensorT<S> kernel, TensorT<S> bias,
                  std::size_t dilation, Padding pad) {
    check_rank(input, 3, "conv2d input");
    check_rank(kernel, 4, "conv2d kernel");
    if (dilation < 1) throw contract_error("conv2d dilation must be >= 1");
    const std::size_t c_in = input.dim(0), P = input.dim(1), Q = input.dim(2);
    const std::size_t c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != c_in)
        throw shape_error("conv2d kernel expects " + std::to_string(kernel.dim(1)) +
                          " input channels, input has " + std::to_string(c_in));
    if (pad == Padding::same && (kh % 2 == 0 || kw % 2 == 0))
        throw contract_error("same padding requires odd kernel dims");
    if (bias.valid() && (bias.rank() != 1 || bias.dim(0) != c_out))
        throw shape_error("conv2d bias must be a length-" + std::to_string(c_out) + " vector");

    const std::size_t Po = conv_out_dim(P, kh, dilation, pad);
    const std::size_t Qo = conv_out_dim(Q, kw, dilation, pad);
    const long pad_h = pad == Padding::same ? static_cast<long>(dilation * (kh - 1) / 2) : 0;
    const long pad_w = pad == Padding::same ? static_cast<long>(dilation * (kw - 1) / 2) : 0;

    // For output index p the tap reads input row p + dp; the p range where
    // that stays in [0, P) is an interval, so the inner loops are branch-free.
    auto tap_range = [](long d, std::size_t out_n, std::size_t in_n, std::size_t& lo, std::size_t& hi) {
        const long l = d < 0 ? -d : 0;
        const long h = std::min<long>(static_cast<long>(out_n), static_cast<long>(in_n) - d);
        lo = static_cast<std::size_t>(l);
        hi = h > l ? static_cast<std::size_t>(h) : lo;
    };

    auto out = TensorT<S>::zeros({c_out, Po, Qo});
    for (std::size_t co = 0; co < c_out; ++co) {
        S* outc = out.data() + co * Po * Qo;
        if (bias.valid()) {
            const S b = bias.data()[co];
            for (std::size_t i = 0; i < Po * Qo; ++i) outc[i] = b;
        }
        for (std::size_t ci = 0; ci < c_in; ++ci) {
            const S* inc = input.data() + ci * P * Q;
            const S* wrow = kernel.data() + (co * c_in + ci) * kh * kw;
            for (std::size_t ih = 0; ih < kh; ++ih) {
                const long dp = static_cast<long>(dilation * ih) - pad_h;
                std::size_t p_lo, p_hi;
                tap_range(dp, Po, P, p_lo, p_hi);
                for (std::size_t p = p_lo; p < p_hi; ++p) {
                    S* orow = outc + p * Qo;
                    const S* irow = inc + static_cast<std::size_t>(static_cast<long>(p) + dp) * Q;
                    // all kw taps in one pass over the row
                    for (std::size_t iw = 0; iw < kw; ++iw) {
                        const long dq = static_cast<long>(dilation * iw) - pad_w;
                        std::size_t q_lo, q_hi;
                        tap_range(dq, Qo, Q, q_lo, q_hi);
                        if (q_hi <= q_lo) continue;
                        const S w = wrow[ih * kw + iw];
                        const std::size_t n = q_hi - q_lo;
                        S* __restrict o = orow + q_lo;
                        const S* __restrict ir = irow + static_cast<std::size_t>(static_cast<long>(q_lo) + dq);
#pragma omp simd
                        for (std::size_t q = 0; q < n; ++q) o[q] += w * ir[q];
                    }
                }
            }
        }
    }

    if (tape)
        tape->record([input, kernel, bias, out, dilation, pad_h, pad_w, tap_range]() mutable {
            const std::size_t c_in = input.dim(0), P = input.dim(1), Q = input.dim(2);
            const std::size_t c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
            const std::size_t Po = out.dim(1), Qo = out.dim(2);
            const S* g = out.grad().data();
            S* gin = input.grad().data();
            S* gk = kernel.grad().data();
            for (std::size_t co = 0; co < c_out; ++co) {
                const S* gc = g + co * Po * Qo;
                for (std::size_t ci = 0; ci < c_in; ++ci) {
                    const S* inc = input.data() + ci * P * Q;
                    S* ginc = gin + ci * P * Q;
                    for (std::size_t ih = 0; ih < kh; ++ih) {
                        const long dp = static_cast<long>(dilation * ih) - pad_h;
                        std::size_t p_lo, p_hi;
                        tap_range(dp, Po, P, p_lo, p_hi);
                        for (std::size_t iw = 0; iw < kw; ++iw) {
                            const long dq = static_cast<long>(dilation * iw) - pad_w;
                            std::size_t q_lo, q_hi;
                            tap_range(dq, Qo, Q, q_lo, q_hi);
                            const S w = kernel.data()[((co * c_in + ci) * kh + ih) * kw + iw];
                            if (q_hi <= q_lo) continue;
                            const std::size_t n = q_hi - q_lo;
                            const std::size_t qd = static_cast<std::size_t>(static_cast<long>(q_lo) + dq);
                            S wacc = S(0);
                            for (std::size_t p = p_lo; p < p_hi; ++p) {
                                const std::size_t row = static_cast<std::size_t>(static_cast<long>(p) + dp) * Q;
                                const S* __restrict grow = gc + p * Qo + q_lo;
                                const S* __restrict irow = inc + row + qd;
                                S* __restrict girow = ginc + row + qd;
                                // rows sit in distinct buffers; two separate
                                // passes keep both loops vector-friendly
                                S acc = S(0);
#pragma omp simd reduction(+ : acc)
                                for (std::size_t q = 0; q < n; ++q) acc += grow[q] * irow[q];
#pragma omp simd
                                for (std::size_t q = 0; q < n; ++q) girow[q] += w * grow[q];
                                wacc += acc;
                            }
                            gk[((co * c_in + ci) * kh + ih) * kw + iw] += wacc;
                        }
                    }
                }
                if (bias.valid()) {
                    S acc = S(0);
#pragma omp simd reduction(+ : acc)
                    for (std::size_t i = 0; i < Po * Qo; ++i) acc += gc[i];
                    bias.grad()[co] += acc;
                }
            }
        });
    return out;
}

// Non-overlapping max pooling: window == stride, dims must divide evenly.
template <class S>
TensorT<S> maxpool2d(Tape<S>* tape, TensorT<S> input, std::size_t win_h, std::size_t win_w) {
    check_rank(input, 3, "maxpool2d input");
    const std::size_t C = input.dim(0), P = input.dim(1), Q = input.dim(2);
    if (win_h == 0 || win_w == 0) throw contract_error("maxpool2d window must be positive");
    if (P % win_h != 0 || Q % win_w != 0)
        throw shape_error("maxpool2d " + std::to_string(win_h) + "x" + std::to_string(win_w) +
                          " does not divide spatial dims of " + shape_str(input.shape()));
    const std::size_t Po = P / win_h, Qo = Q / win_w;
    auto out = TensorT<S>::zeros({C, Po, Qo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(C * Po * Qo);
    for (std::size_t c = 0; c < C; ++c) {
        const S* inc = input.data() + c * P * Q;
        for (std::size_t po = 0; po < Po; ++po) {
            for (std::size_t qo = 0; qo < Qo; ++qo) {
                std::size_t best = (po * win_h) * Q + qo * win_w;
                S bv = inc[best];
                for (std::size_t dh = 0; dh < win_h; ++dh) {
                    const std::size_t row = (po * win_h + dh) * Q + qo * win_w;
                    for (std::size_t dw = 0; dw < win_w; ++dw) {
                        if (inc[row + dw] > bv) {
                            bv = inc[row + dw];
                            best = row + dw;
                        }
                    }
                }
                out.data()[(c * Po + po) * Qo + qo] = bv;
                (*argmax)[(c * Po + po) * Qo + qo] = c * P * Q + best;
            }
        }
    }
    if (tape)
        tape->record([input, out, argmax]() mutable {
            S* gin = input.grad().data();
            const S* g = out.grad().data();
            for (std::size_t i = 0; i < out.numel(); ++i) gin[(*argmax)[i]] += g[i];
        });
    return out;
}

template <class S>
TensorT<S> global_max(Tape<S>* tape, TensorT<S> input) {
    check_rank(input, 3, "global_max input");
    const std::size_t H = input.dim(0), PQ = input.dim(1) * input.dim(2);
    auto out = TensorT<S>::zeros({H});
    auto argmax = std::make_shared<std::vector<std::size_t>>(H);
    for (std::size_t h = 0; h < H; ++h) {
        const S* m = input.data() + h * PQ;
        std::size_t best = 0;
        for (std::size_t i = 1; i < PQ; ++i)
            if (m[i] > m[best]) best = i;
        out.data()[h] = m[best];
        (*argmax)[h] = h * PQ + best;
    }
    if (tape)
        tape->record([input, out, argmax]() mutable {
            S* gin = input.grad().data();
            const S* g = out.grad().data();
            for (std::size_t h = 0; h < out.numel(); ++h) gin[(*argmax)[h]] += g[h];
        });
    return out;
}

template <class S>
TensorT<S> global_avg(Tape<S>* tape, TensorT<S> input) {
    check_rank(input, 3, "global_avg input");
    const std::size_t H = input.dim(0), PQ = input.dim(1) * input.dim(2);
    auto out = TensorT<S>::zeros({H});
    for (std::size_t h = 0; h < H; ++h) {
        const S* m = input.data() + h * PQ;
        double acc = 0.0;
        for (std::size_t i = 0; i < PQ; ++i) acc += static_cast<double>(m[i]);
        out.data()[h] = static_cast<S>(acc / static_cast<double>(PQ));
    }
    if (tape)
        tape->record([input, out, PQ]() mutable {
            S* gin = input.grad().data();
            const S* g = out.grad().data();
            const S inv = S(1) / static_cast<S>(PQ);
            for (std::size_t h = 0; h < out.numel(); ++h) {
                const S gh = g[h] * inv;
                S* row = gin + h * PQ;
                for (std::size_t i = 0; i < PQ; ++i) row[i] += gh;
            }
        });
    return out;
}

// Sum over the two spatial axes of a rank-3 tensor.
template <class S>
TensorT<S> spatial_sum(Tape<S>* tape, TensorT<S> input) {
    check_rank(input, 3, "spatial_sum input");
    const std::size_t K = input.dim(0), PQ = input.dim(1) * input.dim(2);
    auto out = TensorT<S>::zeros({K});
    for (std::size_t k = 0; k < K; ++k) {
        const S* m = input.data() + k * PQ;
        double acc = 0.0;
        for (std::size_t i = 0; i < PQ; ++i) acc += static_cast<double>(m[i]);
        out.data()[k] = static_cast<S>(acc);
    }
    if (tape)
        tape->record([input, out, PQ]() mutable {
            S* gin = input.grad().data();
            const S* g = out.grad().data();
            for (std::size_t k = 0; k < out.numel(); ++k) {
                S* row = gin + k * PQ;
                for (std::size_t i = 0; i < PQ; ++i) row[i] += g[k];
            }
        });
    return out;
}

// out[k,p,q] = a[k,p,q] / s[k]
template <class S>
TensorT<S> div_rows(Tape<S>* tape, TensorT<S> a, TensorT<S> s) {
    check_rank(a, 3, "div_rows numerator");
    check_rank(s, 1, "div_rows denominator");
    if (a.dim(0) != s.dim(0))
        throw shape_error("div_rows " + shape_str(a.shape()) + " / " + shape_str(s.shape()));
    const std::size_t K = a.dim(0), PQ = a.dim(1) * a.dim(2);
    auto out = TensorT<S>::zeros(a.shape());
    for (std::size_t k = 0; k < K; ++k) {
        const S inv = S(1) / s.data()[k];
        const S* row = a.data() + k * PQ;
        S* orow = out.data() + k * PQ;
        for (std::size_t i = 0; i < PQ; ++i) orow[i] = row[i] * inv;
    }
    if (tape)
        tape->record([a, s, out, PQ]() mutable {
            S* ga = a.grad().data();
            S* gs = s.grad().data();
            const S* g = out.grad().data();
            for (std::size_t k = 0; k < s.numel(); ++k) {
                const S sv = s.data()[k];
                const S inv = S(1) / sv;
                const S* arow = a.data() + k * PQ;
                const S* grow = g + k * PQ;
                S* garow = ga + k * PQ;
                double acc = 0.0;
                for (std::size_t i = 0; i < PQ; ++i) {
                    garow[i] += grow[i] * inv;
                    acc += static_cast<double>(grow[i]) * arow[i];
                }
                gs[k] -= static_cast<S>(acc) * inv * inv;
            }
        });
    return out;
}

// out = a / s where s is a scalar tensor
template <class S>
TensorT<S> div_all(Tape<S>* tape, TensorT<S> a, TensorT<S> s) {
    if (s.numel() != 1) throw shape_error("div_all denominator must be scalar");
    const S sv = s.data()[0];
    auto out = TensorT<S>::zeros(a.shape());
    const S inv = S(1) / sv;
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * inv;
    if (tape)
        tape->record([a, s, out]() mutable {
            const S sv = s.data()[0];
            const S inv = S(1) / sv;
            S* ga = a.grad().data();
            const S* g = out.grad().data();
            double acc = 0.0;
            for (std::size_t i = 0; i < a.numel(); ++i) {
                ga[i] += g[i] * inv;
                acc += static_cast<double>(g[i]) * a.data()[i];
            }
            s.grad()[0] -= static_cast<S>(acc) * inv * inv;
        });
    return out;
}

template <class S>
TensorT<S> sum_all(Tape<S>* tape, TensorT<S> a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.data()[i]);
    auto out = TensorT<S>::scalar(static_cast<S>(acc));
    if (tape)
        tape->record([a, out]() mutable {
            const S g = out.grad()[0];
            S* ga = a.grad().data();
            for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g;
        });
    return out;
}

// W[out,in] * x[in] + b[out]
template <class S>
TensorT<S> affine(Tape<S>* tape, TensorT<S> W, TensorT<S> x, TensorT<S> b) {
    check_rank(W, 2, "affine weights");
    check_rank(x, 1, "affine input");
    const std::size_t n_out = W.dim(0), n_in = W.dim(1);
    if (x.dim(0) != n_in)
        throw shape_error("affine weights " + shape_str(W.shape()) + " applied to " + shape_str(x.shape()));
    if (b.rank() != 1 || b.dim(0) != n_out)
        throw shape_error("affine bias must be a length-" + std::to_string(n_out) + " vector");
    auto out = TensorT<S>::zeros({n_out});
    for (std::size_t o = 0; o < n_out; ++o) {
        const S* wr = W.data() + o * n_in;
        double acc = static_cast<double>(b.data()[o]);
        for (std::size_t i = 0; i < n_in; ++i) acc += static_cast<double>(wr[i]) * x.data()[i];
        out.data()[o] = static_cast<S>(acc);
    }
    if (tape)
        tape->record([W, x, b, out]() mutable {
            const std::size_t n_out = W.dim(0), n_in = W.dim(1);
            const S* g = out.grad().data();
            S* gW = W.grad().data();
            S* gx = x.grad().data();
            S* gb = b.grad().data();
            for (std::size_t o = 0; o < n_out; ++o) {
                const S go = g[o];
                const S* wr = W.data() + o * n_in;
                S* gwr = gW + o * n_in;
                for (std::size_t i = 0; i < n_in; ++i) {
                    gwr[i] += go * x.data()[i];
                    gx[i] += go * wr[i];
                }
                gb[o] += go;
            }
        });
    return out;
}

template <class S>
TensorT<S> flatten(Tape<S>* tape, TensorT<S> a) {
    auto out = TensorT<S>::from_values({a.numel()}, a.values());
    if (tape)
        tape->record([a, out]() mutable {
            S* ga = a.grad().data();
            const S* g = out.grad().data();
            for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
        });
    return out;
}

// Natural log; caller guarantees strictly positive input (clamp first).
template <class S>
TensorT<S> log(Tape<S>* tape, TensorT<S> a) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::log(a.data()[i]);
    if (tape)
        tape->record([a, out]() mutable {
            S* ga = a.grad().data();
            const S* g = out.grad().data();
            for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[i] / a.data()[i];
        });
    return out;
}

template <class S>
TensorT<S> clamp_min(Tape<S>* tape, TensorT<S> a, S lo) {
    auto out = TensorT<S>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::max(a.data()[i], lo);
    if (tape)
        tape->record([a, out, lo]() mutable {
            S* ga = a.grad().data();
            const S* g = out.grad().data();
            for (std::size_t i = 0; i < a.numel(); ++i)
                if (a.data()[i] >= lo) ga[i] += g[i];
        });
    return out;
}

template <class S>
TensorT<S> pick(Tape<S>* tape, TensorT<S> a, std::size_t index) {
    check_rank(a, 1, "pick input");
    if (index >= a.dim(0)) throw contract_error("pick index " + std::to_string(index) +
                                                " out of range for " + shape_str(a.shape()));
    auto out = TensorT<S>::scalar(a.data()[index]);
    if (tape)
        tape->record([a, out, index]() mutable { a.grad()[index] += out.grad()[0]; });
    return out;
}

}  // namespace ops

// Zero-upsample a rank-4 kernel by dilation factor d: taps spaced d apart,
// holes filled with zeros. conv2d(x, K, d) == conv2d(x, upsample_zeros(K, d), 1).
template <class S>
TensorT<S> upsample_zeros(const TensorT<S>& kernel, std::size_t d) {
    const std::size_t co = kernel.dim(0), ci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    const std::size_t uh = d * (kh - 1) + 1, uw = d * (kw - 1) + 1;
    auto up = TensorT<S>::zeros({co, ci, uh, uw});
    for (std::size_t a = 0; a < co; ++a)
        for (std::size_t b = 0; b < ci; ++b)
            for (std::size_t h = 0; h < kh; ++h)
                for (std::size_t w = 0; w < kw; ++w)
                    up.data()[((a * ci + b) * uh + h * d) * uw + w * d] =
                        kernel.data()[((a * ci + b) * kh + h) * kw + w];
    return up;
}

// Adam with bias correction, bound to a fixed parameter list.
template <class S>
class AdamT {
public:
    AdamT(std::vector<TensorT<S>> params, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) slots_.push_back(Slot{std::vector<S>(p.numel(), S(0)),
                                                             std::vector<S>(p.numel(), S(0))});
    }

    long step_count() const { return t_; }

    void step(S lr) {
        if (lr <= S(0)) throw contract_error("adam learning rate must be positive");
        for (auto& p : params_) {
            if (!p.has_grad()) p.ensure_grad();
            for (S g : p.grad())
                if (!std::isfinite(g)) throw numeric_error("non-finite gradient in adam step");
        }
        ++t_;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), t_));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), t_));
        for (std::size_t j = 0; j < params_.size(); ++j) {
            auto& p = params_[j];
            auto& m = slots_[j].m;
            auto& v = slots_[j].v;
            const std::vector<S>& g = p.grad();
            S* w = p.data();
            for (std::size_t i = 0; i < p.numel(); ++i) {
                m[i] = beta1_ * m[i] + (S(1) - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (S(1) - beta2_) * g[i] * g[i];
                const S mhat = m[i] / bc1;
                const S vhat = v[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    const std::vector<TensorT<S>>& params() const { return params_; }

private:
    struct Slot {
        std::vector<S> m, v;
    };
    std::vector<TensorT<S>> params_;
    std::vector<Slot> slots_;
    S beta1_, beta2_, eps_;
    long t_ = 0;
};

using Tensor = TensorT<float>;

}  // namespace caan
