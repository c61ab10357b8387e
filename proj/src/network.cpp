#include "caan/network.hpp"

namespace caan::net {

TopologyKind topology_from_string(const std::string& s) {
    if (s == "with_pool") return TopologyKind::with_pool;
    if (s == "no_pool") return TopologyKind::no_pool;
    if (s == "atrous") return TopologyKind::atrous;
    throw config_error("unknown topology '" + s + "' (with_pool|no_pool|atrous)");
}

std::string topology_to_string(TopologyKind k) {
    switch (k) {
        case TopologyKind::with_pool: return "with_pool";
        case TopologyKind::no_pool: return "no_pool";
        case TopologyKind::atrous: return "atrous";
    }
    return "?";
}

Topology Topology::make(TopologyKind kind, std::array<std::size_t, kSceneLayers> channels,
                        std::size_t kernel) {
    if (kernel % 2 == 0) throw config_error("kernel size must be odd");
    Topology t;
    t.kind = kind;
    t.channels = channels;
    t.kernel = kernel;
    switch (kind) {
        case TopologyKind::with_pool:
            t.dilations = {1, 1, 1, 1};
            t.pool = {true, true, true, true};
            break;
        case TopologyKind::no_pool:
            t.dilations = {1, 1, 1, 1};
            t.pool = {false, false, false, false};
            break;
        case TopologyKind::atrous:
            t.dilations = {1, 2, 4, 8};
            t.pool = {false, false, false, false};
            break;
    }
    return t;
}

namespace {

std::vector<float> tensor_values(caan::Tensor& t) { return t.values(); }

void load_into(caan::Tensor& t, const ParamRecord& rec) {
    if (t.shape() != rec.shape)
        throw validation_error("parameter " + rec.name + " has shape " + shape_str(rec.shape) +
                               ", expected " + shape_str(t.shape()));
    t.values() = rec.values;
}

}  // namespace

void save_model(const std::string& path, SceneNet& scene, DeviceNet* device, float norm_mean,
                float norm_std) {
    ParamFile file;
    file.push_back(meta_record(
        "meta.arch",
        {static_cast<float>(static_cast<int>(scene.topo.kind)),
         static_cast<float>(static_cast<int>(scene.head)),
         static_cast<float>(scene.condition_layer), static_cast<float>(scene.num_classes),
         static_cast<float>(scene.num_devices), static_cast<float>(scene.topo.kernel),
         static_cast<float>(scene.input_bins), static_cast<float>(scene.input_frames),
         scene.inject_bias.valid() ? 1.0f : 0.0f, device ? 1.0f : 0.0f}));
    file.push_back(meta_record("meta.scene_channels",
                               {static_cast<float>(scene.topo.channels[0]),
                                static_cast<float>(scene.topo.channels[1]),
                                static_cast<float>(scene.topo.channels[2]),
                                static_cast<float>(scene.topo.channels[3])}));
    file.push_back(meta_record("meta.norm", {norm_mean, norm_std}));
    if (device) {
        file.push_back(meta_record("meta.device_channels",
                                   {static_cast<float>(device->channels[0]),
                                    static_cast<float>(device->channels[1]),
                                    static_cast<float>(device->kernel)}));
    }
    for (auto& [name, t] : scene.named_parameters())
        file.push_back(ParamRecord{name, t.shape(), tensor_values(t)});
    if (device)
        for (auto& [name, t] : device->named_parameters())
            file.push_back(ParamRecord{name, t.shape(), tensor_values(t)});
    write_params(file, path);
}

ModelBundle load_model(const std::string& path) {
    const ParamFile file = read_params(path);
    const auto& arch = find_param(file, "meta.arch");
    if (arch.values.size() != 10) throw validation_error("meta.arch record has wrong size");
    const auto& ch = find_param(file, "meta.scene_channels");
    if (ch.values.size() != 4) throw validation_error("meta.scene_channels record has wrong size");
    const auto& norm = find_param(file, "meta.norm");
    if (norm.values.size() != 2) throw validation_error("meta.norm record has wrong size");

    const auto kind = static_cast<TopologyKind>(static_cast<int>(arch.values[0]));
    const auto head = static_cast<heads::HeadKind>(static_cast<int>(arch.values[1]));
    const int condition_layer = static_cast<int>(arch.values[2]);
    const auto K = static_cast<std::size_t>(arch.values[3]);
    const auto N = static_cast<std::size_t>(arch.values[4]);
    const auto kernel = static_cast<std::size_t>(arch.values[5]);
    const auto bins = static_cast<std::size_t>(arch.values[6]);
    const auto frames = static_cast<std::size_t>(arch.values[7]);
    const bool inject_has_bias = arch.values[8] != 0.0f;
    const bool has_device = arch.values[9] != 0.0f;

    const Topology topo = Topology::make(
        kind,
        {static_cast<std::size_t>(ch.values[0]), static_cast<std::size_t>(ch.values[1]),
         static_cast<std::size_t>(ch.values[2]), static_cast<std::size_t>(ch.values[3])},
        kernel);

    ModelBundle bundle;
    bundle.scene = build_scene_net<float>(topo, head, condition_layer, K, N, 0, bins, frames,
                                          inject_has_bias);
    for (auto& [name, t] : bundle.scene.named_parameters()) load_into(t, find_param(file, name));

    if (has_device) {
        const auto& dch = find_param(file, "meta.device_channels");
        if (dch.values.size() != 3) throw validation_error("meta.device_channels record has wrong size");
        bundle.device = build_device_net<float>(
            N, 0,
            {static_cast<std::size_t>(dch.values[0]), static_cast<std::size_t>(dch.values[1])},
            static_cast<std::size_t>(dch.values[2]));
        for (auto& [name, t] : bundle.device->named_parameters()) load_into(t, find_param(file, name));
    }
    bundle.norm_mean = norm.values[0];
    bundle.norm_std = norm.values[1];
    return bundle;
}

}  // namespace caan::net
