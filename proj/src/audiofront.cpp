#include "caan/audiofront.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>

namespace caan::audio {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank make_mel_filterbank(std::size_t sample_rate, std::size_t nfft, std::size_t n_mels) {
    const std::size_t n_bins = nfft / 2 + 1;
    MelFilterbank fb;
    fb.sample_rate = sample_rate;
    fb.nfft = nfft;
    fb.n_mels = n_mels;
    fb.weights.assign(n_mels * n_bins, 0.0);
    fb.center_hz.resize(n_mels);

    // band edges equally spaced on the mel scale from 0 Hz to Nyquist
    const double mel_max = hz_to_mel(static_cast<double>(sample_rate) / 2.0);
    std::vector<double> edge_hz(n_mels + 2);
    for (std::size_t i = 0; i < n_mels + 2; ++i)
        edge_hz[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));

    for (std::size_t m = 0; m < n_mels; ++m) {
        const double f_lo = edge_hz[m], f_c = edge_hz[m + 1], f_hi = edge_hz[m + 2];
        fb.center_hz[m] = f_c;
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * static_cast<double>(sample_rate) /
                             static_cast<double>(nfft);
            double w = 0.0;
            if (f > f_lo && f < f_c)
                w = (f - f_lo) / (f_c - f_lo);
            else if (f >= f_c && f < f_hi)
                w = (f_hi - f) / (f_hi - f_c);
            fb.weights[m * n_bins + k] = w;
        }
    }
    return fb;
}

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    const std::size_t n = re.size();
    if (n == 0 || (n & (n - 1)) != 0) throw contract_error("fft size must be a power of two");
    // bit-reversal permutation
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::size_t a = i + j, b = i + j + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

std::vector<double> power_spectrum(const std::vector<double>& frame) {
    std::vector<double> re = frame, im(frame.size(), 0.0);
    fft_radix2(re, im);
    std::vector<double> power(frame.size() / 2 + 1);
    for (std::size_t k = 0; k < power.size(); ++k) power[k] = re[k] * re[k] + im[k] * im[k];
    return power;
}

std::size_t frame_count(std::size_t samples, std::size_t window, std::size_t hop) {
    if (samples < window) throw contract_error("clip shorter than one analysis window");
    return (samples - window) / hop + 1;
}

WaveClip resample_linear(const WaveClip& clip, std::size_t target_rate) {
    if (clip.samples.empty()) throw contract_error("resample of empty clip");
    if (target_rate == 0) throw contract_error("target rate must be positive");
    if (target_rate == clip.sample_rate) return clip;

    const std::size_t n_in = clip.samples.size();
    const std::size_t n_out = static_cast<std::size_t>(
        static_cast<double>(n_in) * static_cast<double>(target_rate) /
        static_cast<double>(clip.sample_rate));
    WaveClip out;
    out.sample_rate = target_rate;
    out.samples.resize(n_out);
    const double step = static_cast<double>(clip.sample_rate) / static_cast<double>(target_rate);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = static_cast<double>(i) * step;
        std::size_t j = static_cast<std::size_t>(pos);
        double frac = pos - static_cast<double>(j);
        if (j >= n_in - 1) {  // clamp to the last sample
            j = n_in - 1;
            frac = 0.0;
        }
        const double a = clip.samples[j];
        const double b = clip.samples[std::min(j + 1, n_in - 1)];
        out.samples[i] = a + frac * (b - a);
    }
    return out;
}

Spectrogram log_mel(const WaveClip& clip, std::size_t window, std::size_t overlap,
                    std::size_t mel_bins, double power_floor) {
    if (clip.sample_rate != kSampleRate)
        throw contract_error("log_mel expects " + std::to_string(kSampleRate) + " Hz input, got " +
                             std::to_string(clip.sample_rate));
    if (overlap >= window) throw contract_error("overlap must be smaller than the window");
    const std::size_t hop = window - overlap;
    const std::size_t T = frame_count(clip.samples.size(), window, hop);

    std::vector<double> hamming(window);
    for (std::size_t i = 0; i < window; ++i)
        hamming[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                            static_cast<double>(window - 1));

    const MelFilterbank fb = make_mel_filterbank(clip.sample_rate, window, mel_bins);
    const std::size_t n_bins = window / 2 + 1;

    Spectrogram spec;
    spec.bins = mel_bins;
    spec.frames = T;
    spec.values.resize(mel_bins * T);

    std::vector<double> frame(window);
    for (std::size_t t = 0; t < T; ++t) {
        const double* src = clip.samples.data() + t * hop;
        for (std::size_t i = 0; i < window; ++i) frame[i] = src[i] * hamming[i];
        const std::vector<double> power = power_spectrum(frame);
        for (std::size_t m = 0; m < mel_bins; ++m) {
            const double* w = fb.weights.data() + m * n_bins;
            double acc = 0.0;
            for (std::size_t k = 0; k < n_bins; ++k) acc += w[k] * power[k];
            spec.values[m * T + t] = static_cast<float>(std::log(std::max(acc, power_floor)));
        }
    }
    return spec;
}

namespace {

std::uint32_t rd_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw format_error("truncated WAV header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t rd_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (is.gcount() != 2) throw format_error("truncated WAV header");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void wr_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void wr_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

WaveClip read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    char tag[4];
    is.read(tag, 4);
    if (is.gcount() != 4 || std::memcmp(tag, "RIFF", 4) != 0) throw format_error("not a RIFF file: " + path);
    rd_u32(is);  // overall size
    is.read(tag, 4);
    if (is.gcount() != 4 || std::memcmp(tag, "WAVE", 4) != 0) throw format_error("not a WAVE file: " + path);

    std::uint16_t channels = 0, bits = 0, fmt = 0;
    std::uint32_t rate = 0;
    std::vector<double> samples;
    bool have_fmt = false, have_data = false;

    while (is.read(tag, 4) && is.gcount() == 4) {
        const std::uint32_t chunk_size = rd_u32(is);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            fmt = rd_u16(is);
            channels = rd_u16(is);
            rate = rd_u32(is);
            rd_u32(is);  // byte rate
            rd_u16(is);  // block align
            bits = rd_u16(is);
            if (chunk_size > 16) is.seekg(chunk_size - 16, std::ios::cur);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt) throw format_error("WAV data chunk before fmt chunk: " + path);
            if (fmt != 1 || bits != 16) throw format_error("only 16-bit PCM WAV is supported: " + path);
            if (channels == 0 || channels > 2) throw format_error("unsupported channel count: " + path);
            const std::size_t n_frames = chunk_size / (2 * channels);
            samples.resize(n_frames);
            std::vector<char> raw(chunk_size);
            is.read(raw.data(), static_cast<std::streamsize>(chunk_size));
            if (is.gcount() != static_cast<std::streamsize>(chunk_size))
                throw format_error("truncated WAV data chunk: " + path);
            for (std::size_t i = 0; i < n_frames; ++i) {
                double acc = 0.0;
                for (std::size_t c = 0; c < channels; ++c) {
                    std::int16_t s;
                    std::memcpy(&s, raw.data() + 2 * (i * channels + c), 2);
                    acc += static_cast<double>(s) / 32768.0;
                }
                samples[i] = acc / static_cast<double>(channels);
            }
            have_data = true;
        } else {
            is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
        }
    }
    if (!have_data) throw format_error("WAV file has no data chunk: " + path);
    if (samples.empty()) throw format_error("WAV file has no samples: " + path);
    WaveClip clip;
    clip.samples = std::move(samples);
    clip.sample_rate = rate;
    return clip;
}

void write_wav(const std::string& path, const WaveClip& clip) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path + " for writing");
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
    os.write("RIFF", 4);
    wr_u32(os, 36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    wr_u32(os, 16);
    wr_u16(os, 1);  // PCM
    wr_u16(os, 1);  // mono
    wr_u32(os, static_cast<std::uint32_t>(clip.sample_rate));
    wr_u32(os, static_cast<std::uint32_t>(clip.sample_rate * 2));
    wr_u16(os, 2);
    wr_u16(os, 16);
    os.write("data", 4);
    wr_u32(os, data_bytes);
    for (double s : clip.samples) {
        const double clamped = std::clamp(s, -1.0, 32767.0 / 32768.0);
        const std::int16_t v = static_cast<std::int16_t>(std::lround(clamped * 32768.0));
        wr_u16(os, static_cast<std::uint16_t>(v));
    }
    if (!os) throw io_error("write failed for " + path);
}

}  // namespace caan::audio
