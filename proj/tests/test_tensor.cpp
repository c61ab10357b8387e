#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "caan/tensor.hpp"
#include "testutil.hpp"

using namespace caan;
using testutil::random_tensor;

namespace {

// Nested-loop dilated cross-correlation reference, independent of the
// implementation's loop order tricks.
template <class S>
TensorT<S> conv2d_oracle(const TensorT<S>& in, const TensorT<S>& k, const TensorT<S>& b,
                         std::size_t dil, Padding pad) {
    const std::size_t ci_n = in.dim(0), P = in.dim(1), Q = in.dim(2);
    const std::size_t co_n = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const std::size_t Po = ops::conv_out_dim(P, kh, dil, pad);
    const std::size_t Qo = ops::conv_out_dim(Q, kw, dil, pad);
    const long ph = pad == Padding::same ? static_cast<long>(dil * (kh - 1) / 2) : 0;
    const long pw = pad == Padding::same ? static_cast<long>(dil * (kw - 1) / 2) : 0;
    auto out = TensorT<S>::zeros({co_n, Po, Qo});
    for (std::size_t co = 0; co < co_n; ++co)
        for (std::size_t p = 0; p < Po; ++p)
            for (std::size_t q = 0; q < Qo; ++q) {
                double acc = b.valid() ? static_cast<double>(b.data()[co]) : 0.0;
                for (std::size_t ci = 0; ci < ci_n; ++ci)
                    for (std::size_t ih = 0; ih < kh; ++ih)
                        for (std::size_t iw = 0; iw < kw; ++iw) {
                            const long ip = static_cast<long>(p) + static_cast<long>(dil * ih) - ph;
                            const long iq = static_cast<long>(q) + static_cast<long>(dil * iw) - pw;
                            if (ip < 0 || iq < 0 || ip >= static_cast<long>(P) || iq >= static_cast<long>(Q))
                                continue;
                            acc += static_cast<double>(k.data()[((co * ci_n + ci) * kh + ih) * kw + iw]) *
                                   in.data()[(ci * P + static_cast<std::size_t>(ip)) * Q + static_cast<std::size_t>(iq)];
                        }
                out.data()[(co * Po + p) * Qo + q] = static_cast<S>(acc);
            }
    return out;
}

}  // namespace

TEST_CASE("conv2d identity kernel passes input through") {
    auto in = TensorT<float>::from_values({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto k = TensorT<float>::from_values({1, 1, 1, 1}, {1.0f});
    auto b = TensorT<float>::from_values({1}, {0.0f});
    auto out = ops::conv2d<float>(nullptr, in, k, b, 1, Padding::same);
    REQUIRE(out.shape() == Shape{1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(out.data()[i] == in.data()[i]);
}

TEST_CASE("conv2d matches nested-loop oracle") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t ci = 1 + trial % 3, co = 1 + (trial / 2) % 3;
        auto in = random_tensor<double>({ci, 8, 11}, rng);
        auto k = random_tensor<double>({co, ci, 3, 3}, rng);
        auto b = random_tensor<double>({co}, rng);
        for (auto pad : {Padding::same, Padding::valid}) {
            for (std::size_t dil : {1u, 2u, 3u}) {
                if (pad == Padding::valid && dil * 2 >= 8) continue;
                auto got = ops::conv2d<double>(nullptr, in, k, b, dil, pad);
                auto want = conv2d_oracle(in, k, b, dil, pad);
                REQUIRE(got.shape() == want.shape());
                for (std::size_t i = 0; i < got.numel(); ++i)
                    CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("dilated kernel equals zero-upsampled kernel at dilation 1") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        auto in = random_tensor<float>({2, 7, 9}, rng);
        auto k = random_tensor<float>({2, 2, 3, 3}, rng);
        auto b = random_tensor<float>({2}, rng);
        for (std::size_t dil : {2u, 3u}) {
            auto a = ops::conv2d<float>(nullptr, in, k, b, dil, Padding::same);
            auto up = upsample_zeros(k, dil);
            auto c = ops::conv2d<float>(nullptr, in, up, b, 1, Padding::same);
            REQUIRE(a.shape() == c.shape());
            for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == c.data()[i]);
        }
    }
}

TEST_CASE("same padding preserves spatial dims for odd kernels and any dilation") {
    std::mt19937 rng(3);
    auto in = random_tensor<float>({1, 64, 320}, rng);
    auto k = random_tensor<float>({1, 1, 3, 3}, rng);
    auto b = TensorT<float>::zeros({1});
    for (std::size_t dil : {1u, 2u, 4u, 8u}) {
        auto out = ops::conv2d<float>(nullptr, in, k, b, dil, Padding::same);
        CHECK(out.dim(1) == 64);
        CHECK(out.dim(2) == 320);
    }
    auto k5 = random_tensor<float>({1, 1, 5, 5}, rng);
    auto out5 = ops::conv2d<float>(nullptr, in, k5, b, 3, Padding::same);
    CHECK(out5.dim(1) == 64);
    CHECK(out5.dim(2) == 320);
}

TEST_CASE("conv2d rejects bad shapes") {
    auto in = TensorT<float>::zeros({2, 4, 4});
    auto k = TensorT<float>::zeros({1, 3, 3, 3});  // wrong input channels
    auto b = TensorT<float>::zeros({1});
    CHECK_THROWS_AS(ops::conv2d<float>(nullptr, in, k, b, 1, Padding::same), shape_error);
    auto k2 = TensorT<float>::zeros({1, 2, 3, 3});
    CHECK_THROWS_AS(ops::conv2d<float>(nullptr, in, k2, b, 2, Padding::valid), shape_error);
}

TEST_CASE("maxpool2d 2x2") {
    auto in = TensorT<float>::from_values({1, 2, 2}, {1, 2, 3, 0});
    auto out = ops::maxpool2d<float>(nullptr, in, 2, 2);
    REQUIRE(out.shape() == Shape{1, 1, 1});
    CHECK(out.data()[0] == 3.0f);

    auto c = TensorT<float>::from_values({1, 4, 4}, std::vector<float>(16, 2.5f));
    auto pc = ops::maxpool2d<float>(nullptr, c, 2, 2);
    for (std::size_t i = 0; i < pc.numel(); ++i) CHECK(pc.data()[i] == 2.5f);

    std::mt19937 rng(5);
    auto r = random_tensor<float>({2, 8, 8}, rng);
    auto pr = ops::maxpool2d<float>(nullptr, r, 2, 2);
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t p = 0; p < 4; ++p)
            for (std::size_t q = 0; q < 4; ++q) {
                float want = -1e30f;
                for (std::size_t a = 0; a < 2; ++a)
                    for (std::size_t bq = 0; bq < 2; ++bq)
                        want = std::max(want, r.data()[(ch * 8 + 2 * p + a) * 8 + 2 * q + bq]);
                CHECK(pr.data()[(ch * 4 + p) * 4 + q] == want);
            }

    auto odd = TensorT<float>::zeros({1, 3, 4});
    CHECK_THROWS_AS(ops::maxpool2d<float>(nullptr, odd, 2, 2), shape_error);
}

TEST_CASE("activations") {
    auto x = TensorT<float>::from_values({3}, {-1, 0, 2});
    auto r = ops::relu<float>(nullptr, x);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 0.0f);
    CHECK(r.data()[2] == 2.0f);

    auto s = ops::sigmoid<float>(nullptr, TensorT<float>::from_values({1}, {0.0f}));
    CHECK(s.data()[0] == doctest::Approx(0.5));

    std::mt19937 rng(17);
    auto v = random_tensor<double>({10}, rng, -3.0, 3.0);
    auto sm = ops::softmax<double>(nullptr, v, 0);
    double sum = 0, mx = v.data()[0];
    for (std::size_t i = 1; i < 10; ++i) mx = std::max(mx, v.data()[i]);
    double denom = 0;
    for (std::size_t i = 0; i < 10; ++i) denom += std::exp(v.data()[i] - mx);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(sm.data()[i] == doctest::Approx(std::exp(v.data()[i] - mx) / denom).epsilon(1e-9));
        sum += sm.data()[i];
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);

    // sigmoid stays in the open interval even for extreme inputs
    auto ext = ops::sigmoid<float>(nullptr, TensorT<float>::from_values({2}, {-100.0f, 100.0f}));
    CHECK(ext.data()[0] > 0.0f);
    CHECK(ext.data()[1] < 1.0f);
}

TEST_CASE("softmax over class axis of a rank-3 tensor normalizes each bin") {
    std::mt19937 rng(23);
    auto m = random_tensor<double>({4, 5, 6}, rng, -2.0, 2.0);
    auto sm = ops::softmax<double>(nullptr, m, 0);
    for (std::size_t p = 0; p < 5; ++p)
        for (std::size_t q = 0; q < 6; ++q) {
            double sum = 0;
            for (std::size_t k = 0; k < 4; ++k) sum += sm.data()[(k * 5 + p) * 6 + q];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
}

TEST_CASE("backward of sum is all ones; relu subgradient at negatives is zero") {
    Tape<double> tape;
    auto x = TensorT<double>::from_values({2}, {-1.0, 2.0}, true);
    auto loss = ops::sum_all(&tape, ops::relu(&tape, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);

    Tape<double> t2;
    auto y = TensorT<double>::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto l2 = ops::sum_all(&t2, y);
    t2.backward(l2);
    for (double g : y.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape<float> tape;
    auto x = TensorT<float>::from_values({2}, {1, 2}, true);
    auto y = ops::relu(&tape, x);
    CHECK_THROWS_AS(tape.backward(y), contract_error);
}

TEST_CASE("conv2d + sigmoid + sum gradients match finite differences") {
    std::mt19937 rng(41);
    auto in = random_tensor<double>({1, 5, 5}, rng, -1.0, 1.0, true);
    auto k = random_tensor<double>({2, 1, 3, 3}, rng, -0.5, 0.5, true);
    auto b = random_tensor<double>({2}, rng, -0.1, 0.1, true);
    auto make_loss = [&](Tape<double>* tape) {
        return ops::sum_all(tape, ops::sigmoid(tape, ops::conv2d(tape, in, k, b, 1, Padding::same)));
    };
    auto res = testutil::check_gradients({in, k, b}, make_loss, rng);
    CHECK(res.checked == 25 + 18 + 2);
    CHECK(res.max_rel < 1e-4);
}

TEST_CASE("every op passes randomized finite-difference checks over 20 seeds") {
    for (unsigned seed = 1; seed <= 20; ++seed) {
        std::mt19937 rng(seed);
        double worst = 0;

        {  // conv2d with dilation, both paddings
            auto in = random_tensor<double>({2, 6, 7}, rng, -1.0, 1.0, true);
            auto k = random_tensor<double>({2, 2, 3, 3}, rng, -0.5, 0.5, true);
            auto b = random_tensor<double>({2}, rng, -0.2, 0.2, true);
            const std::size_t dil = 1 + seed % 2;
            const Padding pad = seed % 3 == 0 ? Padding::valid : Padding::same;
            auto ml = [&](Tape<double>* t) {
                return ops::sum_all(t, ops::sigmoid(t, ops::conv2d(t, in, k, b, dil, pad)));
            };
            worst = std::max(worst, testutil::check_gradients({in, k, b}, ml, rng, 12).max_rel);
        }
        {  // maxpool on well-separated values so the argmax is h-stable
            std::vector<double> vals(2 * 4 * 6);
            for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05 * static_cast<double>(i);
            std::shuffle(vals.begin(), vals.end(), rng);
            auto in = TensorT<double>::from_values({2, 4, 6}, vals, true);
            auto ml = [&](Tape<double>* t) {
                return ops::sum_all(t, ops::sigmoid(t, ops::maxpool2d(t, in, 2, 2)));
            };
            worst = std::max(worst, testutil::check_gradients({in}, ml, rng).max_rel);
        }
        {  // relu (shifted away from the kink), softmax, mul, add, scale
            auto a = random_tensor<double>({3, 4}, rng, 0.1, 1.0, true);
            auto b = random_tensor<double>({3, 4}, rng, -1.0, -0.1, true);
            auto ml = [&](Tape<double>* t) {
                auto m = ops::mul(t, ops::relu(t, a), ops::sigmoid(t, b));
                auto sm = ops::softmax(t, ops::add(t, m, ops::scale(t, b, 0.3)), 1);
                return ops::sum_all(t, ops::mul(t, sm, sm));
            };
            worst = std::max(worst, testutil::check_gradients({a, b}, ml, rng).max_rel);
        }
        {  // global pools, spatial_sum, div_rows; separated values for the max
            std::vector<double> vals(3 * 4 * 5);
            for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.5 + 0.04 * static_cast<double>(i);
            std::shuffle(vals.begin(), vals.end(), rng);
            auto m = TensorT<double>::from_values({3, 4, 5}, vals, true);
            auto ml = [&](Tape<double>* t) {
                auto d = ops::div_rows(t, m, ops::spatial_sum(t, m));
                auto g1 = ops::sum_all(t, ops::mul(t, d, d));
                auto g2 = ops::sum_all(t, ops::global_max(t, m));
                auto g3 = ops::sum_all(t, ops::global_avg(t, m));
                return ops::add(t, g1, ops::add(t, g2, g3));
            };
            worst = std::max(worst, testutil::check_gradients({m}, ml, rng).max_rel);
        }
        {  // affine, flatten, log, clamp, pick, div_all
            auto W = random_tensor<double>({3, 8}, rng, -0.7, 0.7, true);
            auto x = random_tensor<double>({2, 2, 2}, rng, 0.2, 1.0, true);
            auto b = random_tensor<double>({3}, rng, -0.2, 0.2, true);
            auto ml = [&](Tape<double>* t) {
                auto v = ops::affine(t, W, ops::flatten(t, x), b);
                auto p = ops::softmax(t, v, 0);
                auto n = ops::div_all(t, p, ops::sum_all(t, p));
                auto lp = ops::log(t, ops::clamp_min(t, n, 1e-7));
                return ops::scale(t, ops::pick(t, lp, 1), -1.0);
            };
            worst = std::max(worst, testutil::check_gradients({W, x, b}, ml, rng).max_rel);
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged and bumps the step") {
    auto p = TensorT<float>::from_values({3}, {1.0f, -2.0f, 0.5f}, true);
    p.ensure_grad();
    AdamT<float> opt({p});
    opt.step(0.001f);
    CHECK(opt.step_count() == 1);
    CHECK(p.data()[0] == 1.0f);
    CHECK(p.data()[1] == -2.0f);
    CHECK(p.data()[2] == 0.5f);
}

TEST_CASE("adam first step moves by about -lr*sign(g)") {
    auto p = TensorT<double>::from_values({2}, {0.3, -0.7}, true);
    p.ensure_grad();
    p.grad()[0] = 0.04;
    p.grad()[1] = -2.5;
    AdamT<double> opt({p});
    const double lr = 0.001;
    opt.step(lr);
    CHECK(std::abs(p.data()[0] - (0.3 - lr)) < 1e-6);
    CHECK(std::abs(p.data()[1] - (-0.7 + lr)) < 1e-6);
}

TEST_CASE("adam rejects non-finite gradients") {
    auto p = TensorT<float>::from_values({1}, {1.0f}, true);
    p.ensure_grad();
    p.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    AdamT<float> opt({p});
    CHECK_THROWS_AS(opt.step(0.001f), numeric_error);
    CHECK(opt.step_count() == 0);
}

TEST_CASE("identical seeds give bit-identical forward values") {
    auto run = [](unsigned seed) {
        std::mt19937 rng(seed);
        auto in = random_tensor<float>({2, 6, 8}, rng);
        auto k = random_tensor<float>({3, 2, 3, 3}, rng);
        auto b = random_tensor<float>({3}, rng);
        auto out = ops::sigmoid<float>(nullptr, ops::conv2d<float>(nullptr, in, k, b, 2, Padding::same));
        return out.values();
    };
    auto a = run(99), b = run(99), c = run(100);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("forward ops keep finite values on finite inputs") {
    std::mt19937 rng(31);
    auto in = random_tensor<float>({2, 6, 6}, rng, -50.0f, 50.0f);
    auto k = random_tensor<float>({3, 2, 3, 3}, rng, -5.0f, 5.0f);
    auto b = random_tensor<float>({3}, rng);
    auto c = ops::conv2d<float>(nullptr, in, k, b, 1, Padding::same);
    CHECK(c.all_finite());
    CHECK(ops::softmax<float>(nullptr, ops::scale<float>(nullptr, c, 100.0f), 0).all_finite());
    CHECK(ops::sigmoid<float>(nullptr, ops::scale<float>(nullptr, c, 100.0f)).all_finite());
}
