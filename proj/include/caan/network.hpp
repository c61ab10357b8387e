#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "caan/condition.hpp"
#include "caan/errors.hpp"
#include "caan/poolheads.hpp"
#include "caan/serialize.hpp"
#include "caan/tensor.hpp"

// The two CNN branches: a four-layer scene classifier in three topologies
// (local pooling, no pooling, dilated) and a two-layer device classifier.

namespace caan::net {

enum class TopologyKind { with_pool, no_pool, atrous };

TopologyKind topology_from_string(const std::string& s);
std::string topology_to_string(TopologyKind k);

constexpr std::size_t kSceneLayers = 4;

struct Topology {
    TopologyKind kind = TopologyKind::atrous;
    std::array<std::size_t, kSceneLayers> channels{64, 128, 256, 512};
    std::array<std::size_t, kSceneLayers> dilations{1, 2, 4, 8};
    std::array<bool, kSceneLayers> pool{false, false, false, false};
    std::size_t kernel = 3;

    static Topology make(TopologyKind kind,
                         std::array<std::size_t, kSceneLayers> channels = {64, 128, 256, 512},
                         std::size_t kernel = 3);
};

template <class S>
struct ConvLayer {
    caan::TensorT<S> weight;  // C_out x C_in x k x k
    caan::TensorT<S> bias;    // C_out
};

namespace detail {

template <class S>
caan::TensorT<S> glorot_uniform(caan::Shape shape, std::size_t fan_in, std::size_t fan_out,
                                std::mt19937& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<S> vals(caan::shape_numel(shape));
    for (auto& v : vals) v = static_cast<S>(dist(rng));
    return caan::TensorT<S>::from_values(std::move(shape), std::move(vals), true);
}

template <class S>
caan::TensorT<S> zero_param(caan::Shape shape) {
    auto t = caan::TensorT<S>::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail

template <class S>
struct SceneNetT {
    Topology topo;
    heads::HeadKind head = heads::HeadKind::att;
    std::size_t num_classes = 10;
    std::size_t num_devices = 3;
    std::size_t input_bins = 64;
    std::size_t input_frames = 320;
    int condition_layer = 0;  // 0 = unconditioned, else 1..4

    std::array<ConvLayer<S>, kSceneLayers> layers;
    heads::AttentionHeadT<S> att;              // att / roi_att heads
    caan::TensorT<S> fc_weight, fc_bias;       // flatten / max / avg / roi heads
    caan::TensorT<S> inject_weight, inject_bias;

    // Spatial size of the conv output at 1-based layer index (before its pool).
    std::pair<std::size_t, std::size_t> layer_spatial(int layer) const {
        std::size_t p = input_bins, q = input_frames;
        for (int i = 1; i < layer; ++i)
            if (topo.pool[static_cast<std::size_t>(i - 1)]) {
                p /= 2;
                q /= 2;
            }
        return {p, q};
    }

    std::pair<std::size_t, std::size_t> final_spatial() const {
        auto [p, q] = layer_spatial(kSceneLayers);
        if (topo.pool[kSceneLayers - 1]) {
            p /= 2;
            q /= 2;
        }
        return {p, q};
    }

    // Shape of the conditioning mask this net expects.
    caan::Shape mask_shape() const {
        if (condition_layer == 0) throw contract_error("net has no conditioning injector");
        auto [p, q] = layer_spatial(condition_layer);
        return {num_devices, p, q};
    }

    std::vector<std::pair<std::string, caan::TensorT<S>>> named_parameters() {
        std::vector<std::pair<std::string, caan::TensorT<S>>> out;
        for (std::size_t i = 0; i < kSceneLayers; ++i) {
            const std::string base = "scene.conv" + std::to_string(i + 1);
            out.emplace_back(base + ".weight", layers[i].weight);
            out.emplace_back(base + ".bias", layers[i].bias);
        }
        if (heads::head_uses_attention(head)) {
            out.emplace_back("scene.head.cls.weight", att.cls_weight);
            out.emplace_back("scene.head.cls.bias", att.cls_bias);
            out.emplace_back("scene.head.att.weight", att.att_weight);
            out.emplace_back("scene.head.att.bias", att.att_bias);
        } else {
            out.emplace_back("scene.head.fc.weight", fc_weight);
            out.emplace_back("scene.head.fc.bias", fc_bias);
        }
        if (condition_layer > 0) {
            out.emplace_back("scene.inject.weight", inject_weight);
            if (inject_bias.valid()) out.emplace_back("scene.inject.bias", inject_bias);
        }
        return out;
    }

    std::vector<caan::TensorT<S>> parameters() {
        std::vector<caan::TensorT<S>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }
};

template <class S>
struct DeviceNetT {
    std::size_t num_devices = 3;
    std::array<std::size_t, 2> channels{64, 128};
    std::size_t kernel = 3;
    std::array<ConvLayer<S>, 2> layers;
    caan::TensorT<S> fc_weight, fc_bias;

    std::vector<std::pair<std::string, caan::TensorT<S>>> named_parameters() {
        std::vector<std::pair<std::string, caan::TensorT<S>>> out;
        for (std::size_t i = 0; i < 2; ++i) {
            const std::string base = "device.conv" + std::to_string(i + 1);
            out.emplace_back(base + ".weight", layers[i].weight);
            out.emplace_back(base + ".bias", layers[i].bias);
        }
        out.emplace_back("device.fc.weight", fc_weight);
        out.emplace_back("device.fc.bias", fc_bias);
        return out;
    }

    std::vector<caan::TensorT<S>> parameters() {
        std::vector<caan::TensorT<S>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }
};

// Parameters are drawn in a fixed order (conv layers, head, injector last)
// so nets sharing a seed share every common parameter regardless of
// conditioning.
template <class S>
SceneNetT<S> build_scene_net(const Topology& topo, heads::HeadKind head, int condition_layer,
                             std::size_t num_classes, std::size_t num_devices, unsigned seed,
                             std::size_t input_bins = 64, std::size_t input_frames = 320,
                             bool inject_has_bias = true) {
    if (condition_layer < 0 || condition_layer > static_cast<int>(kSceneLayers))
        throw config_error("condition layer must be in 1..4 (0 for none)");
    if (num_classes == 0 || num_devices == 0) throw config_error("class and device counts must be positive");

    SceneNetT<S> net;
    net.topo = topo;
    net.head = head;
    net.num_classes = num_classes;
    net.num_devices = num_devices;
    net.input_bins = input_bins;
    net.input_frames = input_frames;
    net.condition_layer = condition_layer;

    std::mt19937 rng(seed);
    const std::size_t k = topo.kernel;
    std::size_t c_in = 1;
    for (std::size_t i = 0; i < kSceneLayers; ++i) {
        const std::size_t c_out = topo.channels[i];
        net.layers[i].weight = detail::glorot_uniform<S>({c_out, c_in, k, k}, c_in * k * k,
                                                         c_out * k * k, rng);
        net.layers[i].bias = detail::zero_param<S>({c_out});
        c_in = c_out;
    }

    const std::size_t h_final = topo.channels[kSceneLayers - 1];
    auto [pf, qf] = net.final_spatial();
    if (heads::head_uses_attention(head)) {
        net.att.cls_weight = detail::glorot_uniform<S>({num_classes, h_final, 1, 1}, h_final,
                                                       num_classes, rng);
        net.att.cls_bias = detail::zero_param<S>({num_classes});
        net.att.att_weight = detail::glorot_uniform<S>({num_classes, h_final, 1, 1}, h_final,
                                                       num_classes, rng);
        net.att.att_bias = detail::zero_param<S>({num_classes});
    } else {
        std::size_t in_dim = h_final;
        if (head == heads::HeadKind::flatten) in_dim = h_final * pf * qf;
        if (head == heads::HeadKind::roi)
            in_dim = h_final * (pf / heads::kRoiBlock) * (qf / heads::kRoiBlock);
        net.fc_weight = detail::glorot_uniform<S>({num_classes, in_dim}, in_dim, num_classes, rng);
        net.fc_bias = detail::zero_param<S>({num_classes});
    }

    if (condition_layer > 0) {
        const std::size_t c_layer = topo.channels[static_cast<std::size_t>(condition_layer - 1)];
        net.inject_weight = detail::glorot_uniform<S>({c_layer, num_devices, 1, 1}, num_devices,
                                                      c_layer, rng);
        if (inject_has_bias) net.inject_bias = detail::zero_param<S>({c_layer});
    }
    return net;
}

template <class S>
DeviceNetT<S> build_device_net(std::size_t num_devices, unsigned seed,
                               std::array<std::size_t, 2> channels = {64, 128},
                               std::size_t kernel = 3) {
    DeviceNetT<S> net;
    net.num_devices = num_devices;
    net.channels = channels;
    net.kernel = kernel;
    std::mt19937 rng(seed);
    std::size_t c_in = 1;
    for (std::size_t i = 0; i < 2; ++i) {
        const std::size_t c_out = channels[i];
        net.layers[i].weight = detail::glorot_uniform<S>({c_out, c_in, kernel, kernel},
                                                         c_in * kernel * kernel,
                                                         c_out * kernel * kernel, rng);
        net.layers[i].bias = detail::zero_param<S>({c_out});
        c_in = c_out;
    }
    net.fc_weight = detail::glorot_uniform<S>({num_devices, channels[1]}, channels[1], num_devices, rng);
    net.fc_bias = detail::zero_param<S>({num_devices});
    return net;
}

template <class S>
struct SceneForward {
    caan::TensorT<S> scores;     // K-vector
    caan::TensorT<S> attention;  // K x P x Q for attention heads, invalid otherwise
    caan::TensorT<S> final_map;  // H x P x Q
};

// mask must be present exactly when the net has an injector; its planes are
// combined into the conditioned layer before that layer's activation.
template <class S>
SceneForward<S> forward_scene(caan::Tape<S>* tape, SceneNetT<S>& net, caan::TensorT<S> input,
                              caan::TensorT<S> mask = {}) {
    if (input.rank() != 3 || input.dim(0) != 1)
        throw shape_error("scene input must be 1 x F x T, got " + caan::shape_str(input.shape()));
    if (input.dim(1) != net.input_bins)
        throw shape_error("scene input has " + std::to_string(input.dim(1)) + " bins, net expects " +
                          std::to_string(net.input_bins));
    if ((net.condition_layer > 0) != mask.valid())
        throw contract_error(net.condition_layer > 0 ? "conditioned net called without a mask"
                                                     : "unconditioned net called with a mask");

    auto cur = input;
    for (std::size_t i = 0; i < kSceneLayers; ++i) {
        auto z = caan::ops::conv2d(tape, cur, net.layers[i].weight, net.layers[i].bias,
                                   net.topo.dilations[i], Padding::same);
        if (net.condition_layer == static_cast<int>(i) + 1) {
            auto e = caan::ops::conv2d(tape, mask, net.inject_weight, net.inject_bias, 1,
                                       Padding::same);
            z = caan::ops::add(tape, z, e);
        }
        cur = caan::ops::relu(tape, z);
        if (net.topo.pool[i]) cur = caan::ops::maxpool2d(tape, cur, 2, 2);
    }

    SceneForward<S> out;
    out.final_map = cur;
    switch (net.head) {
        case heads::HeadKind::flatten:
            out.scores = heads::classify_from_pooled(tape, caan::ops::flatten(tape, cur),
                                                     net.fc_weight, net.fc_bias);
            break;
        case heads::HeadKind::max:
            out.scores = heads::classify_from_pooled(tape, heads::global_max(tape, cur),
                                                     net.fc_weight, net.fc_bias);
            break;
        case heads::HeadKind::avg:
            out.scores = heads::classify_from_pooled(tape, heads::global_avg(tape, cur),
                                                     net.fc_weight, net.fc_bias);
            break;
        case heads::HeadKind::roi:
            out.scores = heads::classify_from_pooled(
                tape, caan::ops::flatten(tape, heads::roi_pool(tape, cur)), net.fc_weight,
                net.fc_bias);
            break;
        case heads::HeadKind::att: {
            auto res = heads::attention_pool(tape, cur, net.att);
            out.scores = res.scores;
            out.attention = res.attention;
            break;
        }
        case heads::HeadKind::roi_att: {
            auto res = heads::attention_pool(tape, heads::roi_pool(tape, cur), net.att);
            out.scores = res.scores;
            out.attention = res.attention;
            break;
        }
    }
    return out;
}

template <class S>
caan::TensorT<S> forward_device(caan::Tape<S>* tape, DeviceNetT<S>& net, caan::TensorT<S> input) {
    if (input.rank() != 3 || input.dim(0) != 1)
        throw shape_error("device input must be 1 x F x T, got " + caan::shape_str(input.shape()));
    auto cur = input;
    for (std::size_t i = 0; i < 2; ++i) {
        cur = caan::ops::relu(tape, caan::ops::conv2d(tape, cur, net.layers[i].weight,
                                                      net.layers[i].bias, 1, Padding::same));
        cur = caan::ops::maxpool2d(tape, cur, 2, 2);
    }
    auto pooled = caan::ops::global_max(tape, cur);
    return caan::ops::affine(tape, net.fc_weight, pooled, net.fc_bias);
}

using SceneNet = SceneNetT<float>;
using DeviceNet = DeviceNetT<float>;

// Model files carry the architecture besides the parameters so evaluation
// can rebuild a net without extra flags.
struct ModelBundle {
    SceneNet scene;
    std::optional<DeviceNet> device;
    float norm_mean = 0.0f;
    float norm_std = 1.0f;
};

void save_model(const std::string& path, SceneNet& scene, DeviceNet* device, float norm_mean,
                float norm_std);
ModelBundle load_model(const std::string& path);

}  // namespace caan::net
