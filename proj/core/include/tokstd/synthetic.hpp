#pragma once

#include "tokstd/audio.hpp"
#include "tokstd/quantizer.hpp"
#include "tokstd/training.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tokstd {

/// Toy terms made of 2-D Gaussian-mixture frames. Each term is a fixed
/// sequence of mixture components, dealt from shuffled decks so every
/// component is used equally often; utterances vary the hold time of every
/// component and add isotropic noise.
struct MixtureCorpusSpec {
    std::size_t terms = 16;
    std::size_t utterances_per_term = 6;
    std::size_t components = 16; // laid out on a square grid
    std::size_t segments_min = 4;
    std::size_t segments_max = 4;
    std::size_t hold_min = 2;
    std::size_t hold_max = 4;
    double spacing = 1.0;
    double sigma = 0.15;
    std::uint64_t seed = 0;
};

std::vector<LabeledFeatures> mixture_corpus(const MixtureCorpusSpec& spec);

/// Tone-synthesised "words": sequences of phone-like formant pairs on a
/// harmonic source. Speakers shift pitch, formants and tempo.
struct ToneCorpusSpec {
    std::size_t terms = 8;
    std::size_t utterances_per_term = 6;
    std::size_t speakers = 4;
    std::size_t phones = 10;          // inventory size
    std::size_t phones_per_term = 3;
    double phone_seconds = 0.12;
    int sample_rate = 16000;
    std::uint64_t seed = 0;
};

std::vector<LabeledClip> tone_corpus(const ToneCorpusSpec& spec);

/// Renders one utterance of a phone sequence. Exposed so tracks and queries
/// can share the generator.
AudioClip render_phones(std::span<const std::uint32_t> phones, std::size_t inventory, double phone_seconds,
                        double pitch, double formant_scale, double tempo, double amplitude, int sample_rate,
                        Rng& rng);

/// Unit-variance white noise.
AudioClip white_noise(std::size_t samples, int sample_rate, std::uint64_t seed);

/// Random token sequences with lengths in [min_len, max_len] over `vocab`.
std::vector<TokenSequence> token_corpus(std::size_t count, std::size_t vocab, std::size_t min_len,
                                        std::size_t max_len, std::uint64_t seed);

} // namespace tokstd
