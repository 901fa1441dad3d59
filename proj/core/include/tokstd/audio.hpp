#pragma once

#include "tokstd/matrix.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace tokstd {

/// Mono PCM audio with samples in [-1, 1].
struct AudioClip {
    std::vector<float> samples;
    int sample_rate = 16000;

    double duration() const noexcept {
        return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
    }
    std::size_t size() const noexcept { return samples.size(); }
};

/// Throws ErrorKind::Input if the clip breaks the AudioClip invariants
/// (positive rate, non-empty, finite samples).
void validate(const AudioClip& clip);

enum class WavEncoding { Pcm8, Pcm16, Pcm32, Float32 };

/// Reads 8/16/32-bit integer PCM or 32-bit float WAV. Multi-channel input is
/// averaged to mono. Integers are scaled by 2^(bits-1).
AudioClip load_wav(const std::filesystem::path& path);

void write_wav(const std::filesystem::path& path, const AudioClip& clip,
               WavEncoding encoding = WavEncoding::Float32);

/// Integer-factor decimation with a boxcar pre-filter. Rates that are not an
/// integer multiple of target_rate are rejected as unsupported.
AudioClip decimate(const AudioClip& clip, int target_rate);

/// Root mean square over [range.begin, range.end).
double rms(const AudioClip& clip, IndexRange range);
double rms(const AudioClip& clip);

/// Where a term sits inside a longer recording, for contextual padding.
struct PaddingContext {
    const AudioClip* audio = nullptr;
    std::size_t term_offset = 0; // sample index of the term's first sample
};

struct PaddedClip {
    AudioClip clip;
    IndexRange valid; // sample span occupied by the term
};

/// Centres `term` in a clip of exactly `target_seconds`. Padding comes from the
/// surrounding context audio when given (zeros where the context runs out),
/// otherwise zeros. Throws ErrorKind::Truncation when the term is longer than
/// the target.
PaddedClip pad_to_fixed(const AudioClip& term, std::optional<PaddingContext> context,
                        double target_seconds);

} // namespace tokstd
