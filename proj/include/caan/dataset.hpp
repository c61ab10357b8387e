#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "caan/audiofront.hpp"
#include "caan/errors.hpp"

// Dataset handling: CSV manifests, LMSP spectrogram files, deterministic
// stratified splits and a synthetic multi-device scene generator that
// synthesizes directly in log-mel space.

namespace caan::data {

struct ClipRecord {
    std::string clip_id;
    std::size_t scene = 0;
    std::size_t device = 0;
    std::string path;
};

struct DatasetManifest {
    std::vector<ClipRecord> records;
    std::size_t num_scenes = 10;
    std::size_t num_devices = 3;
    std::string split;  // train | validation | test

    std::vector<std::string> scene_names() const;
    std::vector<std::string> device_names() const;
};

// LMSP: magic "LMSP", version u32 LE, F u32, T u32, then F*T f32 LE
// row-major (frequency-major).
void write_spectrogram(const audio::Spectrogram& spec, const std::string& path);
audio::Spectrogram read_spectrogram(const std::string& path);

void write_manifest(const DatasetManifest& manifest, const std::string& path);

// Paths inside the CSV are resolved against the manifest's directory; every
// referenced file must exist.
DatasetManifest load_manifest(const std::string& path, std::size_t num_scenes = 10,
                              std::size_t num_devices = 3);

struct SplitFractions {
    double train = 1.0;
    double validation = 0.0;
    double test = 0.0;
};

struct SplitResult {
    DatasetManifest train, validation, test;
};

// Stratified by (scene, device), deterministic under the seed, disjoint.
SplitResult split(const DatasetManifest& manifest, SplitFractions fractions, unsigned seed);

struct DeviceProfile {
    double gain = 1.0;
    std::vector<double> tilt;         // per-mel-bin multiplicative response
    std::vector<double> noise_floor;  // per-mel-bin additive power
};

struct SceneProto {
    std::vector<double> band_center;  // mel bin index per active band
    std::vector<double> band_width;
    std::vector<double> band_power;
    double mod_rate = 1.0;   // cycles over the clip
    double mod_depth = 0.3;
    double ambient = 0.02;   // broadband power level
};

struct GenOptions {
    std::size_t frames = 320;
    double clip_gain_sigma = 0.35;   // lognormal whole-clip gain jitter
    double bin_noise_sigma = 0.55;   // lognormal per-bin power jitter
    double phase_jitter = 1.0;       // modulation phase spread, fraction of a cycle
    double band_jitter = 1.5;        // per-clip band-center drift, mel bins
    double floor_jitter_sigma = 0.5; // lognormal noise-floor jitter
    std::vector<DeviceProfile> profiles;  // empty selects the defaults
};

std::vector<DeviceProfile> default_device_profiles(std::size_t num_devices);
std::vector<SceneProto> make_scene_protos(std::size_t num_scenes, unsigned seed);

// Deterministic scene template: the clip a zero-noise generator emits.
audio::Spectrogram scene_template(const SceneProto& proto, const DeviceProfile& profile,
                                  std::size_t frames = 320);

struct SyntheticClip {
    ClipRecord record;
    audio::Spectrogram spec;
};

// Balanced K x N x clips_per_cell set, byte-identical for identical seeds.
std::vector<SyntheticClip> synthesize(std::size_t num_scenes, std::size_t num_devices,
                                      std::size_t clips_per_cell, unsigned seed,
                                      const GenOptions& options = {});

// Emits <root>/<split>/<clip_id>.lmsp plus <root>/<split>.csv for each
// non-empty split and returns the three manifests.
SplitResult generate_synthetic(std::size_t num_scenes, std::size_t num_devices,
                               std::size_t clips_per_cell, unsigned seed, const std::string& root,
                               SplitFractions fractions = {1.0, 0.0, 0.0},
                               const GenOptions& options = {});

DatasetManifest filter_by_device(const DatasetManifest& manifest, std::size_t device);

}  // namespace caan::data
