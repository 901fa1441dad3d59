#pragma once

#include "tokstd/audio.hpp"
#include "tokstd/matrix.hpp"

#include <filesystem>
#include <string>

namespace tokstd {

struct FeatureConfig {
    int sample_rate = 16000;
    int n_mfcc = 16;
    double win_ms = 25.0;
    double hop_ms = 10.0;
    int n_fft = 512;
    int n_mels = 26;
    double preemphasis = 0.97;
    double log_floor = 1e-10;
    double low_hz = 0.0;
    double high_hz = 0.0; // 0 means Nyquist

    std::size_t window_samples() const;
    std::size_t hop_samples() const;
    std::size_t feature_dim() const { return 3 * static_cast<std::size_t>(n_mfcc); }
    void validate() const;
};

/// MFCC frames (statics, deltas, delta-deltas) with timing metadata.
struct FeatureSequence {
    Matrix<float> frames; // T x 3*n_mfcc
    double frame_hop = 0.01;
    double window_len = 0.025;
    std::string source_id;
    IndexRange valid; // non-padding frames

    std::size_t length() const noexcept { return frames.rows(); }
    std::size_t dim() const noexcept { return frames.cols(); }
};

/// Number of analysis frames for n samples: 1 + floor((n - win) / hop).
std::size_t frame_count(std::size_t n_samples, const FeatureConfig& cfg);

/// Maps a sample span to the frames whose window centre lies inside it.
IndexRange frames_for_samples(IndexRange samples, std::size_t n_frames, const FeatureConfig& cfg);

/// Pre-emphasis, Hamming window, power spectrum, mel filterbank, log, DCT-II,
/// then +-2 frame regression deltas. Throws ErrorKind::TooShort when the clip
/// is shorter than one window. The clip's rate must equal cfg.sample_rate.
FeatureSequence compute_mfcc(const AudioClip& clip, const FeatureConfig& cfg);

/// Regression deltas over +-2 frames with edge replication.
Matrix<float> deltas(const Matrix<float>& x);

/// Writes `<base>.feat` (little-endian f32, row-major) and `<base>.feat.json`.
void write_features(const std::filesystem::path& base, const FeatureSequence& seq);

/// Reads the pair written by write_features; `base` is the path without the
/// `.feat` suffix.
FeatureSequence read_features(const std::filesystem::path& base);

} // namespace tokstd
