#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "caan/dataset.hpp"
#include "caan/errors.hpp"
#include "caan/network.hpp"

// Training: the four strategies (single-device, joint, teacher-forcing
// conditional, multi-task conditional), the weighted two-branch loss, the
// step-decay learning-rate schedule and the latching lambda switch.

namespace caan::train {

enum class Strategy { single_device, joint, teacher_forcing, multi_task };

Strategy strategy_from_string(const std::string& s);
std::string strategy_to_string(Strategy s);
bool strategy_is_conditional(Strategy s);

struct TrainConfig {
    Strategy strategy = Strategy::joint;
    net::TopologyKind topology = net::TopologyKind::atrous;
    heads::HeadKind head = heads::HeadKind::att;
    int condition_layer = 0;  // 1..4 for conditional strategies
    double lr0 = 0.001;
    double lr_decay = 0.9;
    std::size_t lr_period = 200;
    std::size_t max_iterations = 2000;  // desk-scale default; 15000 reproduces the reference run
    std::size_t batch_size = 16;
    unsigned seed = 1;
    double lambda_high = 1.0;
    double lambda_low = 0.0001;
    double lambda_threshold = 0.98;
    std::size_t eval_interval = 50;
    std::size_t kernel = 3;
    std::array<std::size_t, 4> scene_channels{64, 128, 256, 512};
    std::array<std::size_t, 2> device_channels{64, 128};
    int device_filter = -1;  // single_device trains on this device only
    bool inject_bias = true;
};

// Line-oriented `key = value` file with '#' comments; unknown keys are
// rejected.
TrainConfig load_config(const std::string& path);
void apply_config_kv(TrainConfig& config, const std::string& key, const std::string& value);
void validate_config(const TrainConfig& config);

double lr_at(std::size_t iteration, double lr0, double decay, std::size_t period);

double multitask_loss(double loss_s, double loss_d, double lambda);

// Latches to the low value once the monitored accuracy reaches the
// threshold and never reverts.
class LambdaSchedule {
public:
    LambdaSchedule(double high, double low, double threshold)
        : high_(high), low_(low), threshold_(threshold) {}

    double update(double device_val_accuracy) {
        if (device_val_accuracy < 0.0 || device_val_accuracy > 1.0)
            throw contract_error("accuracy must lie in [0,1]");
        if (device_val_accuracy >= threshold_) latched_ = true;
        return current();
    }

    double current() const { return latched_ ? low_ : high_; }
    bool latched() const { return latched_; }

private:
    double high_, low_, threshold_;
    bool latched_ = false;
};

// Negative log of the renormalized, clamped probability of the true class.
caan::TensorT<float> scene_loss(caan::Tape<float>* tape, caan::TensorT<float> scores,
                                std::size_t true_class);
caan::TensorT<float> device_loss(caan::Tape<float>* tape, caan::TensorT<float> logits,
                                 std::size_t true_device);

struct TrainReport {
    std::vector<double> loss_scene, loss_device, loss_total, lr, lambda;  // one entry per iteration
    std::vector<std::size_t> eval_iterations;
    std::vector<std::vector<double>> eval_scene_accuracy;  // rows aligned with eval_iterations
    std::vector<double> eval_device_accuracy;              // multi_task only
    double wall_seconds = 0.0;
    std::string to_json(const TrainConfig& config) const;
};

struct TrainResult {
    net::SceneNet scene;
    std::optional<net::DeviceNet> device;
    float norm_mean = 0.0f;
    float norm_std = 1.0f;
    TrainReport report;
};

// Clips resident in memory, already normalized.
struct LoadedClip {
    caan::Tensor input;  // 1 x F x T
    std::size_t scene = 0;
    std::size_t device = 0;
};

struct LoadedDataset {
    std::vector<LoadedClip> clips;
    std::size_t num_scenes = 0;
    std::size_t num_devices = 0;
};

LoadedDataset load_clips(const data::DatasetManifest& manifest, float norm_mean, float norm_std);
std::pair<float, float> normalization_stats(const data::DatasetManifest& manifest);

TrainResult train(const TrainConfig& config, const data::DatasetManifest& train_manifest,
                  const data::DatasetManifest& validation_manifest);

// Per-device scene accuracy of a trained model over a loaded set.
std::vector<double> evaluate_scene_accuracy(net::SceneNet& scene, net::DeviceNet* device,
                                            Strategy strategy, const LoadedDataset& set);

}  // namespace caan::train
