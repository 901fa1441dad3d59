#pragma once

#include "tokstd/audio.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace tokstd {

/// SNR grid used for evaluation conditions, in dB.
inline constexpr std::array<double, 6> kEvaluationSnrGrid{-5.0, 0.0, 5.0, 10.0, 15.0, 20.0};

struct AugmentSpec {
    double snr_db_low = 0.0;
    double snr_db_high = 10.0;
    double reverb_prob = 0.5;
    std::vector<AudioClip> noise_bank;
    std::vector<AudioClip> rir_bank;
    std::uint64_t rng_seed = 0;

    /// Noise is always mixed, so noise_bank must be non-empty; rir_bank only
    /// needs entries when reverb_prob > 0.
    void validate() const;
};

struct MixResult {
    AudioClip audio;
    double noise_gain = 0.0; // applied to the (loop-extended) noise
    double peak_scale = 1.0; // applied to the whole mixture to avoid clipping
};

/// Mixes noise into speech at snr_db, measuring both powers over `valid`
/// (the spoken term). Noise shorter than speech is looped. If any mixed
/// sample exceeds 1 in magnitude the mixture is scaled down to peak 1.
MixResult mix_at_snr(const AudioClip& speech, const AudioClip& noise, double snr_db,
                     IndexRange valid);

/// Convolves with the RIR, aligns the RIR's largest tap to lag 0, truncates to
/// the input length and rescales to the input RMS.
AudioClip apply_rir(const AudioClip& speech, const AudioClip& rir);

struct DistortionDraw {
    double snr_db = 0.0;
    std::size_t noise_index = 0;
    bool reverberated = false;
    std::size_t rir_index = 0;
};

struct DistortionResult {
    AudioClip audio;
    DistortionDraw draw;
};

/// Random reverb (with probability reverb_prob) followed by noise at a uniform
/// SNR from the configured range. Draws depend only on spec.rng_seed and
/// `ordinal`, so calls can be replayed or run out of order.
DistortionResult sample_distortion(const AudioClip& clip, const AugmentSpec& spec, IndexRange valid,
                                   std::uint64_t ordinal);

} // namespace tokstd
