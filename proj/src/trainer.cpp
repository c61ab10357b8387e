#include "caan/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace caan::train {

Strategy strategy_from_string(const std::string& s) {
    if (s == "single_device") return Strategy::single_device;
    if (s == "joint") return Strategy::joint;
    if (s == "teacher_forcing") return Strategy::teacher_forcing;
    if (s == "multi_task") return Strategy::multi_task;
    throw config_error("unknown strategy '" + s +
                       "' (single_device|joint|teacher_forcing|multi_task)");
}

std::string strategy_to_string(Strategy s) {
    switch (s) {
        case Strategy::single_device: return "single_device";
        case Strategy::joint: return "joint";
        case Strategy::teacher_forcing: return "teacher_forcing";
        case Strategy::multi_task: return "multi_task";
    }
    return "?";
}

bool strategy_is_conditional(Strategy s) {
    return s == Strategy::teacher_forcing || s == Strategy::multi_task;
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <std::size_t N>
std::array<std::size_t, N> parse_channel_list(const std::string& value, const std::string& key) {
    std::array<std::size_t, N> out{};
    std::stringstream ss(value);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= N) throw config_error(key + " expects " + std::to_string(N) + " values");
        try {
            out[i++] = std::stoul(trim(item));
        } catch (const std::exception&) {
            throw config_error(key + " expects positive integers");
        }
    }
    if (i != N) throw config_error(key + " expects " + std::to_string(N) + " values");
    return out;
}

double parse_double(const std::string& value, const std::string& key) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw config_error("");
        return v;
    } catch (const std::exception&) {
        throw config_error(key + " expects a number, got '" + value + "'");
    }
}

long parse_long(const std::string& value, const std::string& key) {
    try {
        std::size_t used = 0;
        const long v = std::stol(value, &used);
        if (used != value.size()) throw config_error("");
        return v;
    } catch (const std::exception&) {
        throw config_error(key + " expects an integer, got '" + value + "'");
    }
}

}  // namespace

void apply_config_kv(TrainConfig& config, const std::string& key, const std::string& value) {
    if (key == "strategy") config.strategy = strategy_from_string(value);
    else if (key == "topology") config.topology = net::topology_from_string(value);
    else if (key == "head") config.head = heads::head_from_string(value);
    else if (key == "condition_layer") config.condition_layer = static_cast<int>(parse_long(value, key));
    else if (key == "lr") config.lr0 = parse_double(value, key);
    else if (key == "lr_decay") config.lr_decay = parse_double(value, key);
    else if (key == "lr_period") config.lr_period = static_cast<std::size_t>(parse_long(value, key));
    else if (key == "max_iterations") config.max_iterations = static_cast<std::size_t>(parse_long(value, key));
    else if (key == "batch_size") config.batch_size = static_cast<std::size_t>(parse_long(value, key));
    else if (key == "seed") config.seed = static_cast<unsigned>(parse_long(value, key));
    else if (key == "lambda_high") config.lambda_high = parse_double(value, key);
    else if (key == "lambda_low") config.lambda_low = parse_double(value, key);
    else if (key == "lambda_threshold") config.lambda_threshold = parse_double(value, key);
    else if (key == "eval_interval") config.eval_interval = static_cast<std::size_t>(parse_long(value, key));
    else if (key == "kernel") config.kernel = static_cast<std::size_t>(parse_long(value, key));
    else if (key == "scene_channels") config.scene_channels = parse_channel_list<4>(value, key);
    else if (key == "device_channels") config.device_channels = parse_channel_list<2>(value, key);
    else if (key == "device_filter") config.device_filter = static_cast<int>(parse_long(value, key));
    else if (key == "inject_bias") {
        if (value == "true") config.inject_bias = true;
        else if (value == "false") config.inject_bias = false;
        else throw config_error("inject_bias expects true or false");
    } else {
        throw config_error("unknown config key '" + key + "'");
    }
}

TrainConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    TrainConfig config;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error(path + " line " + std::to_string(line_no) + ": expected key = value");
        apply_config_kv(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return config;
}

void validate_config(const TrainConfig& config) {
    if (config.lr0 <= 0 || config.lr_decay <= 0 || config.lr_period == 0)
        throw config_error("learning-rate schedule values must be positive");
    if (config.batch_size == 0) throw config_error("batch size must be positive");
    if (config.max_iterations == 0) throw config_error("max iterations must be positive");
    if (config.lambda_threshold <= 0.0 || config.lambda_threshold > 1.0)
        throw config_error("lambda threshold must lie in (0,1]");
    if (config.eval_interval == 0) throw config_error("eval interval must be positive");
    if (strategy_is_conditional(config.strategy) &&
        (config.condition_layer < 1 || config.condition_layer > 4))
        throw config_error("conditional strategies need condition_layer in 1..4");
    if (!strategy_is_conditional(config.strategy) && config.condition_layer != 0)
        throw config_error("condition_layer is only valid for conditional strategies");
    if (config.strategy == Strategy::single_device && config.device_filter < 0)
        throw config_error("single_device needs device_filter");
}

double lr_at(std::size_t iteration, double lr0, double decay, std::size_t period) {
    if (period == 0) throw contract_error("lr period must be positive");
    return lr0 * std::pow(decay, static_cast<double>(iteration / period));
}

double multitask_loss(double loss_s, double loss_d, double lambda) {
    return loss_s + lambda * loss_d;
}

caan::TensorT<float> scene_loss(caan::Tape<float>* tape, caan::TensorT<float> scores,
                                std::size_t true_class) {
    if (true_class >= scores.dim(0)) throw contract_error("scene class out of range");
    auto norm = ops::div_all(tape, scores, ops::sum_all(tape, scores));
    auto p = ops::clamp_min(tape, ops::pick(tape, norm, true_class), 1e-7f);
    return ops::scale(tape, ops::log(tape, p), -1.0f);
}

caan::TensorT<float> device_loss(caan::Tape<float>* tape, caan::TensorT<float> logits,
                                 std::size_t true_device) {
    if (true_device >= logits.dim(0)) throw contract_error("device label out of range");
    auto p = ops::clamp_min(tape, ops::pick(tape, ops::softmax(tape, logits, 0), true_device), 1e-7f);
    return ops::scale(tape, ops::log(tape, p), -1.0f);
}

std::pair<float, float> normalization_stats(const data::DatasetManifest& manifest) {
    if (manifest.records.empty()) throw contract_error("cannot normalize an empty split");
    double sum = 0.0, sum_sq = 0.0;
    std::size_t count = 0;
    for (const auto& rec : manifest.records) {
        const auto spec = data::read_spectrogram(rec.path);
        for (float v : spec.values) {
            sum += v;
            sum_sq += static_cast<double>(v) * v;
        }
        count += spec.values.size();
    }
    const double mean = sum / static_cast<double>(count);
    const double var = std::max(sum_sq / static_cast<double>(count) - mean * mean, 0.0);
    const double stddev = std::sqrt(var);
    return {static_cast<float>(mean), stddev < 1e-6 ? 1.0f : static_cast<float>(stddev)};
}

LoadedDataset load_clips(const data::DatasetManifest& manifest, float norm_mean, float norm_std) {
    LoadedDataset out;
    out.num_scenes = manifest.num_scenes;
    out.num_devices = manifest.num_devices;
    const float inv = 1.0f / norm_std;
    for (const auto& rec : manifest.records) {
        const auto spec = data::read_spectrogram(rec.path);
        std::vector<float> vals(spec.values.size());
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = (spec.values[i] - norm_mean) * inv;
        LoadedClip clip;
        clip.input = caan::Tensor::from_values({1, spec.bins, spec.frames}, std::move(vals));
        clip.scene = rec.scene;
        clip.device = rec.device;
        out.clips.push_back(std::move(clip));
    }
    return out;
}

namespace {

caan::Tensor mask_for(net::SceneNet& scene, std::size_t device_index) {
    const auto shape = scene.mask_shape();
    return cond::expand_onehot(cond::make_onehot<float>(device_index, shape[0]), shape[1], shape[2]);
}

std::size_t argmax_of(const caan::Tensor& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.numel(); ++i)
        if (v.data()[i] > v.data()[best]) best = i;
    return best;
}

double device_accuracy(net::DeviceNet& device_net, const LoadedDataset& set) {
    if (set.clips.empty()) throw contract_error("device accuracy over an empty split");
    std::size_t correct = 0;
    for (const auto& clip : set.clips) {
        auto input = clip.input;
        auto logits = net::forward_device<float>(nullptr, device_net, input);
        if (argmax_of(logits) == clip.device) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(set.clips.size());
}

}  // namespace

std::vector<double> evaluate_scene_accuracy(net::SceneNet& scene, net::DeviceNet* device,
                                            Strategy strategy, const LoadedDataset& set) {
    std::vector<std::size_t> correct(set.num_devices, 0), total(set.num_devices, 0);
    for (const auto& clip : set.clips) {
        auto input = clip.input;
        caan::Tensor mask;
        if (strategy == Strategy::teacher_forcing) {
            mask = mask_for(scene, clip.device);
        } else if (strategy == Strategy::multi_task) {
            auto logits = net::forward_device<float>(nullptr, *device, input);
            const auto shape = scene.mask_shape();
            mask = cond::expand_onehot(cond::predicted_onehot(logits), shape[1], shape[2]);
        }
        auto out = net::forward_scene<float>(nullptr, scene, input, mask);
        total[clip.device]++;
        if (argmax_of(out.scores) == clip.scene) correct[clip.device]++;
    }
    std::vector<double> acc(set.num_devices, 0.0);
    for (std::size_t d = 0; d < set.num_devices; ++d)
        acc[d] = total[d] ? static_cast<double>(correct[d]) / static_cast<double>(total[d]) : 0.0;
    return acc;
}

TrainResult train(const TrainConfig& config, const data::DatasetManifest& train_manifest,
                  const data::DatasetManifest& validation_manifest) {
    validate_config(config);
    const auto t0 = std::chrono::steady_clock::now();

    data::DatasetManifest train_set = train_manifest;
    data::DatasetManifest val_set = validation_manifest;
    if (config.strategy == Strategy::single_device) {
        train_set = data::filter_by_device(train_set, static_cast<std::size_t>(config.device_filter));
        val_set = data::filter_by_device(val_set, static_cast<std::size_t>(config.device_filter));
    }
    if (train_set.records.empty()) throw contract_error("training split is empty");
    if (val_set.records.empty()) throw contract_error("validation split is empty");

    const auto [norm_mean, norm_std] = normalization_stats(train_set);
    auto train_clips = load_clips(train_set, norm_mean, norm_std);
    auto val_clips = load_clips(val_set, norm_mean, norm_std);

    const std::size_t F = train_clips.clips.front().input.dim(1);
    const std::size_t T = train_clips.clips.front().input.dim(2);

    TrainResult result;
    result.norm_mean = norm_mean;
    result.norm_std = norm_std;
    result.scene = net::build_scene_net<float>(
        net::Topology::make(config.topology, config.scene_channels, config.kernel), config.head,
        strategy_is_conditional(config.strategy) ? config.condition_layer : 0,
        train_set.num_scenes, train_set.num_devices, config.seed, F, T, config.inject_bias);

    std::vector<caan::Tensor> params = result.scene.parameters();
    if (config.strategy == Strategy::multi_task) {
        result.device = net::build_device_net<float>(train_set.num_devices, config.seed + 1,
                                                     config.device_channels, config.kernel);
        for (auto& p : result.device->parameters()) params.push_back(p);
    }
    caan::AdamT<float> adam(params);
    LambdaSchedule lambda(config.lambda_high, config.lambda_low, config.lambda_threshold);

    std::mt19937 rng(config.seed);
    std::vector<std::size_t> order(train_clips.clips.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    TrainReport& report = result.report;
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
        const double lr = lr_at(it, config.lr0, config.lr_decay, config.lr_period);

        caan::Tape<float> tape;
        for (auto& p : params) {
            p.ensure_grad();
            p.zero_grad();
        }

        caan::Tensor loss_s_sum, loss_d_sum;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const LoadedClip& clip = train_clips.clips[order[cursor++]];
            auto input = clip.input;

            caan::Tensor mask;
            caan::Tensor device_logits;
            if (config.strategy == Strategy::teacher_forcing) {
                mask = mask_for(result.scene, clip.device);
            } else if (config.strategy == Strategy::multi_task) {
                device_logits = net::forward_device(&tape, *result.device, input);
                const auto shape = result.scene.mask_shape();
                // hard one-hot from the logits' values: a stop-gradient step
                mask = cond::expand_onehot(cond::predicted_onehot(device_logits), shape[1], shape[2]);
            }

            auto out = net::forward_scene(&tape, result.scene, input, mask);
            auto ls = scene_loss(&tape, out.scores, clip.scene);
            loss_s_sum = loss_s_sum.valid() ? ops::add(&tape, loss_s_sum, ls) : ls;
            if (config.strategy == Strategy::multi_task) {
                auto ld = device_loss(&tape, device_logits, clip.device);
                loss_d_sum = loss_d_sum.valid() ? ops::add(&tape, loss_d_sum, ld) : ld;
            }
        }

        const float inv_batch = 1.0f / static_cast<float>(config.batch_size);
        auto loss_s = ops::scale(&tape, loss_s_sum, inv_batch);
        caan::Tensor total = loss_s;
        double loss_d_value = 0.0;
        if (config.strategy == Strategy::multi_task) {
            auto loss_d = ops::scale(&tape, loss_d_sum, inv_batch);
            loss_d_value = loss_d.item();
            total = ops::add(&tape, loss_s,
                             ops::scale(&tape, loss_d, static_cast<float>(lambda.current())));
        }
        if (!std::isfinite(total.item()))
            throw numeric_error("non-finite loss at iteration " + std::to_string(it));

        tape.backward(total);
        adam.step(static_cast<float>(lr));

        report.loss_scene.push_back(loss_s.item());
        report.loss_device.push_back(loss_d_value);
        report.loss_total.push_back(total.item());
        report.lr.push_back(lr);
        report.lambda.push_back(lambda.current());

        if ((it + 1) % config.eval_interval == 0 || it + 1 == config.max_iterations) {
            report.eval_iterations.push_back(it + 1);
            report.eval_scene_accuracy.push_back(evaluate_scene_accuracy(
                result.scene, result.device ? &*result.device : nullptr, config.strategy,
                val_clips));
            if (config.strategy == Strategy::multi_task) {
                const double acc = device_accuracy(*result.device, val_clips);
                report.eval_device_accuracy.push_back(acc);
                lambda.update(acc);
            }
        }
    }

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

std::string TrainReport::to_json(const TrainConfig& config) const {
    nlohmann::json j;
    j["config"] = {
        {"strategy", strategy_to_string(config.strategy)},
        {"topology", net::topology_to_string(config.topology)},
        {"head", heads::head_to_string(config.head)},
        {"condition_layer", config.condition_layer},
        {"lr", config.lr0},
        {"lr_decay", config.lr_decay},
        {"lr_period", config.lr_period},
        {"max_iterations", config.max_iterations},
        {"batch_size", config.batch_size},
        {"seed", config.seed},
        {"lambda_high", config.lambda_high},
        {"lambda_low", config.lambda_low},
        {"lambda_threshold", config.lambda_threshold},
        {"scene_channels", config.scene_channels},
        {"device_channels", config.device_channels},
        {"device_filter", config.device_filter},
    };
    j["traces"] = {
        {"loss_scene", loss_scene}, {"loss_device", loss_device}, {"loss_total", loss_total},
        {"lr", lr},                 {"lambda", lambda},
    };
    j["eval"] = {
        {"iterations", eval_iterations},
        {"scene_accuracy_per_device", eval_scene_accuracy},
        {"device_accuracy", eval_device_accuracy},
    };
    j["wall_seconds"] = wall_seconds;
    return j.dump(2);
}

}  // namespace caan::train
