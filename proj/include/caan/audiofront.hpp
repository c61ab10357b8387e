#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "caan/errors.hpp"

// Audio frontend: WAV input, linear resampling and log-mel spectrogram
// extraction with fixed, reproducible parameters (44.1 kHz, 2048-sample
// Hamming window, 672-sample overlap, 64 mel bins).

namespace caan::audio {

constexpr std::size_t kSampleRate = 44100;
constexpr std::size_t kWindow = 2048;
constexpr std::size_t kOverlap = 672;
constexpr std::size_t kHop = kWindow - kOverlap;  // 1376
constexpr std::size_t kMelBins = 64;
constexpr double kPowerFloor = 1e-10;

struct WaveClip {
    std::vector<double> samples;
    std::size_t sample_rate = kSampleRate;
};

// Log-mel matrix, frequency-major: values[f * frames + t].
struct Spectrogram {
    std::size_t bins = kMelBins;
    std::size_t frames = 0;
    std::vector<float> values;

    float& at(std::size_t f, std::size_t t) { return values[f * frames + t]; }
    float at(std::size_t f, std::size_t t) const { return values[f * frames + t]; }
};

struct MelFilterbank {
    std::size_t sample_rate = 0;
    std::size_t nfft = 0;
    std::size_t n_mels = 0;
    std::vector<double> center_hz;         // one per mel band
    std::vector<double> weights;           // n_mels x (nfft/2+1), row-major

    double weight(std::size_t m, std::size_t k) const { return weights[m * (nfft / 2 + 1) + k]; }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

MelFilterbank make_mel_filterbank(std::size_t sample_rate, std::size_t nfft, std::size_t n_mels);

// In-place radix-2 FFT over interleaved complex data; n must be a power of 2.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

// Power spectrum (|X_k|^2 for k = 0..n/2) of a real frame.
std::vector<double> power_spectrum(const std::vector<double>& frame);

std::size_t frame_count(std::size_t samples, std::size_t window = kWindow, std::size_t hop = kHop);

WaveClip resample_linear(const WaveClip& clip, std::size_t target_rate);

Spectrogram log_mel(const WaveClip& clip, std::size_t window = kWindow,
                    std::size_t overlap = kOverlap, std::size_t mel_bins = kMelBins,
                    double power_floor = kPowerFloor);

// PCM WAV, 16-bit signed; stereo is averaged to mono.
WaveClip read_wav(const std::string& path);
void write_wav(const std::string& path, const WaveClip& clip);

}  // namespace caan::audio
