#include "caan/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace caan::data {

namespace fs = std::filesystem;

std::vector<std::string> DatasetManifest::scene_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < num_scenes; ++i) names.push_back("scene_" + std::to_string(i));
    return names;
}

std::vector<std::string> DatasetManifest::device_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < num_devices; ++i) names.push_back(std::string(1, static_cast<char>('A' + i)));
    return names;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

constexpr std::uint32_t kLmspVersion = 1;
constexpr std::size_t kMaxSpectrogramCells = std::size_t{1} << 28;

}  // namespace

void write_spectrogram(const audio::Spectrogram& spec, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os.write("LMSP", 4);
    put_u32(os, kLmspVersion);
    put_u32(os, static_cast<std::uint32_t>(spec.bins));
    put_u32(os, static_cast<std::uint32_t>(spec.frames));
    for (float f : spec.values) {
        std::uint32_t v;
        std::memcpy(&v, &f, 4);
        put_u32(os, v);
    }
    if (!os) throw io_error("write failed for " + path);
}

audio::Spectrogram read_spectrogram(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "LMSP", 4) != 0)
        throw format_error("bad magic in " + path);
    std::uint32_t version, f, t;
    if (!get_u32(is, version) || !get_u32(is, f) || !get_u32(is, t))
        throw format_error("truncated header in " + path);
    if (version != kLmspVersion)
        throw format_error("unsupported spectrogram version " + std::to_string(version));
    if (f == 0 || t == 0) throw format_error("zero dimension in " + path);
    if (static_cast<std::size_t>(f) * t > kMaxSpectrogramCells)
        throw format_error("dimension overflow in " + path);

    audio::Spectrogram spec;
    spec.bins = f;
    spec.frames = t;
    spec.values.resize(static_cast<std::size_t>(f) * t);
    for (auto& v : spec.values) {
        std::uint32_t raw;
        if (!get_u32(is, raw)) throw format_error("truncated payload in " + path);
        std::memcpy(&v, &raw, 4);
    }
    return spec;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << "clip_id,scene,device,path\n";
    for (const auto& rec : manifest.records) {
        if (rec.clip_id.find(',') != std::string::npos || rec.path.find(',') != std::string::npos)
            throw contract_error("manifest fields must not contain commas: " + rec.clip_id);
        os << rec.clip_id << ',' << rec.scene << ',' << rec.device << ',' << rec.path << '\n';
    }
    if (!os) throw io_error("write failed for " + path);
}

DatasetManifest load_manifest(const std::string& path, std::size_t num_scenes,
                              std::size_t num_devices) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    const fs::path base = fs::path(path).parent_path();

    std::string line;
    if (!std::getline(is, line)) throw validation_error("manifest " + path + " is empty");
    if (line == "clip_id,scene,device,path\r") line.pop_back();
    if (line != "clip_id,scene,device,path")
        throw parse_error(path + " line 1: expected header clip_id,scene,device,path");

    DatasetManifest manifest;
    manifest.num_scenes = num_scenes;
    manifest.num_devices = num_devices;
    std::set<std::string> seen_ids;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 4)
            throw parse_error(path + " line " + std::to_string(line_no) + ": expected 4 fields, got " +
                              std::to_string(fields.size()));
        ClipRecord rec;
        rec.clip_id = fields[0];
        try {
            rec.scene = std::stoul(fields[1]);
            rec.device = std::stoul(fields[2]);
        } catch (const std::exception&) {
            throw parse_error(path + " line " + std::to_string(line_no) + ": labels must be integers");
        }
        if (rec.scene >= num_scenes)
            throw validation_error(path + " line " + std::to_string(line_no) + ": scene label " +
                                   fields[1] + " out of range");
        if (rec.device >= num_devices)
            throw validation_error(path + " line " + std::to_string(line_no) + ": device label " +
                                   fields[2] + " out of range");
        if (!seen_ids.insert(rec.clip_id).second)
            throw validation_error("duplicate clip id " + rec.clip_id + " in " + path);
        rec.path = (base / fields[3]).string();
        if (!fs::exists(rec.path))
            throw validation_error(path + " line " + std::to_string(line_no) +
                                   ": spectrogram file missing: " + rec.path);
        manifest.records.push_back(std::move(rec));
    }
    if (manifest.records.empty()) throw validation_error("manifest " + path + " has no records");
    return manifest;
}

SplitResult split(const DatasetManifest& manifest, SplitFractions fractions, unsigned seed) {
    const double fr[3] = {fractions.train, fractions.validation, fractions.test};
    double total = 0.0;
    for (double f : fr) {
        if (f < 0.0) throw contract_error("split fractions must be non-negative");
        total += f;
    }
    if (total > 1.0 + 1e-9) throw contract_error("split fractions must sum to at most 1");
    const bool exhaustive = total > 1.0 - 1e-9;

    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& r = manifest.records[i];
        cells[{r.scene, r.device}].push_back(i);
    }

    std::mt19937 rng(seed);
    SplitResult out;
    DatasetManifest* parts[3] = {&out.train, &out.validation, &out.test};
    const char* names[3] = {"train", "validation", "test"};
    for (int s = 0; s < 3; ++s) {
        parts[s]->num_scenes = manifest.num_scenes;
        parts[s]->num_devices = manifest.num_devices;
        parts[s]->split = names[s];
    }

    for (auto& [cell, idx] : cells) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t n = idx.size();
        std::size_t counts[3];
        std::size_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            counts[s] = static_cast<std::size_t>(fr[s] * static_cast<double>(n) + 1e-9);
            assigned += counts[s];
        }
        if (exhaustive) {
            std::size_t leftover = n - assigned;
            for (int s = 0; s < 3 && leftover > 0; ++s)
                if (fr[s] > 0.0) {
                    ++counts[s];
                    --leftover;
                }
        }
        for (int s = 0; s < 3; ++s)
            if (fr[s] > 0.0 && counts[s] == 0)
                throw validation_error("cell (scene " + std::to_string(cell.first) + ", device " +
                                       std::to_string(cell.second) + ") with " + std::to_string(n) +
                                       " records is too small to stratify");
        std::size_t pos = 0;
        for (int s = 0; s < 3; ++s)
            for (std::size_t i = 0; i < counts[s]; ++i)
                parts[s]->records.push_back(manifest.records[idx[pos++]]);
    }
    return out;
}

std::vector<DeviceProfile> default_device_profiles(std::size_t num_devices) {
    std::vector<DeviceProfile> profiles(num_devices);
    const std::size_t F = audio::kMelBins;
    for (std::size_t d = 0; d < num_devices; ++d) {
        auto& p = profiles[d];
        p.tilt.assign(F, 1.0);
        p.noise_floor.assign(F, 0.005);
        if (d == 0) {
            p.gain = 1.0;  // reference device: flat
            p.noise_floor.assign(F, 0.004);
        } else if (d % 3 == 1) {
            // mobile-like: quieter, high bins rolled off, more noise
            p.gain = 0.8;
            for (std::size_t f = 0; f < F; ++f)
                p.tilt[f] = 1.0 - 0.3 * static_cast<double>(f) / static_cast<double>(F - 1);
            p.noise_floor.assign(F, 0.04);
        } else {
            // mobile-like: hotter, low bins rolled off, highest noise floor
            p.gain = 1.1;
            for (std::size_t f = 0; f < F; ++f)
                p.tilt[f] = 0.7 + 0.3 * static_cast<double>(f) / static_cast<double>(F - 1);
            p.noise_floor.assign(F, 0.055);
        }
    }
    return profiles;
}

std::vector<SceneProto> make_scene_protos(std::size_t num_scenes, unsigned seed) {
    std::mt19937 rng(seed ^ 0x5ce9e5u);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<SceneProto> protos(num_scenes);
    const double F = static_cast<double>(audio::kMelBins);
    for (std::size_t k = 0; k < num_scenes; ++k) {
        auto& p = protos[k];
        // spread primary bands over the mel axis so templates stay distinct,
        // with band power low enough that device response shifts matter
        const double primary = 6.0 + (F - 16.0) * static_cast<double>(k) / std::max<double>(1.0, static_cast<double>(num_scenes));
        p.band_center = {primary, std::fmod(primary + F / 2.3 + 3.0 * unit(rng), F - 8.0) + 4.0};
        p.band_width = {2.0 + 2.5 * unit(rng), 1.5 + 2.0 * unit(rng)};
        p.band_power = {0.12 + 0.12 * unit(rng), 0.05 + 0.06 * unit(rng)};
        p.mod_rate = 0.5 + 3.5 * unit(rng);
        p.mod_depth = 0.25 + 0.35 * unit(rng);
        p.ambient = 0.015 + 0.01 * unit(rng);
    }
    return protos;
}

namespace {

// Scene power at (f, t) before any noise: ambient plus modulated bands.
double scene_power(const SceneProto& proto, std::size_t f, std::size_t t, std::size_t frames,
                   double phase, const std::vector<double>& band_shift) {
    double power = proto.ambient;
    const double tt = static_cast<double>(t) / static_cast<double>(frames);
    const double mod = 1.0 + proto.mod_depth *
                                 std::sin(2.0 * std::numbers::pi * (proto.mod_rate * tt + phase));
    for (std::size_t b = 0; b < proto.band_center.size(); ++b) {
        const double center = proto.band_center[b] + (band_shift.empty() ? 0.0 : band_shift[b]);
        const double df = (static_cast<double>(f) - center) / proto.band_width[b];
        power += proto.band_power[b] * std::exp(-0.5 * df * df) * mod;
    }
    return power;
}

audio::Spectrogram render_clip(const SceneProto& proto, const DeviceProfile& profile,
                               const GenOptions& opt, std::mt19937& rng) {
    const std::size_t F = audio::kMelBins, T = opt.frames;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const double phase = opt.phase_jitter * unit(rng);
    const double clip_gain = std::exp(opt.clip_gain_sigma * normal(rng));
    std::vector<double> band_shift(proto.band_center.size(), 0.0);
    for (auto& b : band_shift) b = opt.band_jitter * (2.0 * unit(rng) - 1.0);

    audio::Spectrogram spec;
    spec.bins = F;
    spec.frames = T;
    spec.values.resize(F * T);
    for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t t = 0; t < T; ++t) {
            double power = clip_gain * scene_power(proto, f, t, T, phase, band_shift);
            if (opt.bin_noise_sigma > 0.0) power *= std::exp(opt.bin_noise_sigma * normal(rng));
            power = profile.gain * profile.tilt[f] * power;
            double floor = profile.noise_floor[f];
            if (opt.floor_jitter_sigma > 0.0) floor *= std::exp(opt.floor_jitter_sigma * normal(rng));
            power += floor;
            spec.values[f * T + t] = static_cast<float>(std::log(std::max(power, audio::kPowerFloor)));
        }
    }
    return spec;
}

std::string clip_name(std::size_t scene, std::size_t device, std::size_t index) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "s%02u_d%u_c%03u", static_cast<unsigned>(scene),
                  static_cast<unsigned>(device), static_cast<unsigned>(index));
    return buf;
}

}  // namespace

audio::Spectrogram scene_template(const SceneProto& proto, const DeviceProfile& profile,
                                  std::size_t frames) {
    GenOptions opt;
    opt.frames = frames;
    opt.clip_gain_sigma = 0.0;
    opt.bin_noise_sigma = 0.0;
    opt.phase_jitter = 0.0;
    opt.band_jitter = 0.0;
    opt.floor_jitter_sigma = 0.0;
    std::mt19937 rng(0);
    return render_clip(proto, profile, opt, rng);
}

std::vector<SyntheticClip> synthesize(std::size_t num_scenes, std::size_t num_devices,
                                      std::size_t clips_per_cell, unsigned seed,
                                      const GenOptions& options) {
    if (num_scenes == 0 || num_devices == 0 || clips_per_cell == 0)
        throw contract_error("scene, device and clip counts must be positive");
    GenOptions opt = options;
    if (opt.profiles.empty()) opt.profiles = default_device_profiles(num_devices);
    if (opt.profiles.size() != num_devices)
        throw contract_error("need one device profile per device");

    const auto protos = make_scene_protos(num_scenes, seed);
    std::vector<SyntheticClip> clips;
    clips.reserve(num_scenes * num_devices * clips_per_cell);
    for (std::size_t s = 0; s < num_scenes; ++s)
        for (std::size_t d = 0; d < num_devices; ++d)
            for (std::size_t i = 0; i < clips_per_cell; ++i) {
                // per-clip child seed keeps clips stable under count changes
                std::mt19937 rng(static_cast<unsigned>(
                    (static_cast<std::uint64_t>(seed) * 2654435761u) ^ (s * 1000003u) ^
                    (d * 7919u) ^ (i * 104729u)));
                SyntheticClip clip;
                clip.record.clip_id = clip_name(s, d, i);
                clip.record.scene = s;
                clip.record.device = d;
                clip.spec = render_clip(protos[s], opt.profiles[d], opt, rng);
                clips.push_back(std::move(clip));
            }
    return clips;
}

SplitResult generate_synthetic(std::size_t num_scenes, std::size_t num_devices,
                               std::size_t clips_per_cell, unsigned seed, const std::string& root,
                               SplitFractions fractions, const GenOptions& options) {
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw io_error("cannot create " + root + ": " + ec.message());

    auto clips = synthesize(num_scenes, num_devices, clips_per_cell, seed, options);

    DatasetManifest all;
    all.num_scenes = num_scenes;
    all.num_devices = num_devices;
    for (auto& c : clips) all.records.push_back(c.record);
    SplitResult parts = split(all, fractions, seed);

    std::map<std::string, const audio::Spectrogram*> by_id;
    for (const auto& c : clips) by_id[c.record.clip_id] = &c.spec;

    DatasetManifest* manifests[3] = {&parts.train, &parts.validation, &parts.test};
    for (auto* manifest : manifests) {
        if (manifest->records.empty()) continue;
        const fs::path dir = fs::path(root) / manifest->split;
        fs::create_directories(dir, ec);
        if (ec) throw io_error("cannot create " + dir.string() + ": " + ec.message());
        // keep records ordered for reproducible manifests
        std::sort(manifest->records.begin(), manifest->records.end(),
                  [](const ClipRecord& a, const ClipRecord& b) { return a.clip_id < b.clip_id; });
        for (auto& rec : manifest->records) {
            const std::string rel = manifest->split + "/" + rec.clip_id + ".lmsp";
            write_spectrogram(*by_id.at(rec.clip_id), (fs::path(root) / rel).string());
            rec.path = rel;
        }
        write_manifest(*manifest, (fs::path(root) / (manifest->split + ".csv")).string());
        // switch to resolved paths for immediate use
        for (auto& rec : manifest->records) rec.path = (fs::path(root) / rec.path).string();
    }
    return parts;
}

DatasetManifest filter_by_device(const DatasetManifest& manifest, std::size_t device) {
    if (device >= manifest.num_devices) throw contract_error("device filter out of range");
    DatasetManifest out = manifest;
    out.records.clear();
    for (const auto& rec : manifest.records)
        if (rec.device == device) out.records.push_back(rec);
    return out;
}

}  // namespace caan::data
