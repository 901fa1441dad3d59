#include "tokstd/synthetic.hpp"

#include "tokstd/error.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace tokstd {

std::vector<LabeledFeatures> mixture_corpus(const MixtureCorpusSpec& spec) {
    require(spec.terms >= 2 && spec.utterances_per_term >= 2, ErrorKind::Parameter,
            "mixture corpus needs two terms with two utterances");
    require(spec.components >= 2 && spec.segments_min >= 1 && spec.segments_min <= spec.segments_max &&
                spec.hold_min >= 1 && spec.hold_min <= spec.hold_max,
            ErrorKind::Parameter, "invalid mixture corpus ranges");

    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.components))));
    std::vector<std::array<double, 2>> means(spec.components);
    for (std::size_t c = 0; c < spec.components; ++c) {
        const double half = 0.5 * static_cast<double>(side - 1);
        means[c] = {(static_cast<double>(c % side) - half) * spec.spacing,
                    (static_cast<double>(c / side) - half) * spec.spacing};
    }

    Rng rng(derive_seed(spec.seed, {0x6d6978}));
    std::vector<LabeledFeatures> out;
    std::vector<std::size_t> deck; // components are dealt evenly across terms
    for (std::size_t term = 0; term < spec.terms; ++term) {
        const std::size_t segments = spec.segments_min + rng.below(spec.segments_max - spec.segments_min + 1);
        std::vector<std::size_t> pattern(segments);
        for (std::size_t s = 0; s < segments; ++s) {
            if (deck.empty()) {
                deck.resize(spec.components);
                std::iota(deck.begin(), deck.end(), std::size_t{0});
                rng.shuffle(deck.begin(), deck.end());
            }
            std::size_t pick = deck.size() - 1;
            if (s > 0 && deck[pick] == pattern[s - 1] && deck.size() > 1) {
                --pick;
            }
            pattern[s] = deck[pick];
            deck.erase(deck.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        for (std::size_t u = 0; u < spec.utterances_per_term; ++u) {
            std::vector<float> rows;
            for (std::size_t c : pattern) {
                const std::size_t hold = spec.hold_min + rng.below(spec.hold_max - spec.hold_min + 1);
                for (std::size_t h = 0; h < hold; ++h) {
                    rows.push_back(static_cast<float>(means[c][0] + spec.sigma * rng.normal()));
                    rows.push_back(static_cast<float>(means[c][1] + spec.sigma * rng.normal()));
                }
            }
            LabeledFeatures item;
            item.term = "term" + std::to_string(term);
            item.speaker = "spk" + std::to_string(u);
            const std::size_t n = rows.size() / 2;
            item.features.frames = Matrix<float>(n, 2, std::move(rows));
            item.features.valid = {0, n};
            item.features.frame_hop = 1;
            item.features.window_len = 1;
            item.features.source_id = item.term + "/" + item.speaker;
            out.push_back(std::move(item));
        }
    }
    return out;
}

AudioClip render_phones(std::span<const std::uint32_t> phones, std::size_t inventory, double phone_seconds,
                        double pitch, double formant_scale, double tempo, double amplitude, int sample_rate,
                        Rng& rng) {
    require(inventory >= 1 && phone_seconds > 0.0 && tempo > 0.0, ErrorKind::Parameter,
            "invalid phone rendering parameters");
    const double fs = static_cast<double>(sample_rate);
    const auto phone_len = static_cast<std::size_t>(std::llround(phone_seconds * tempo * fs));
    const auto ramp = std::min<std::size_t>(phone_len / 4, static_cast<std::size_t>(0.01 * fs));
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.assign(phone_len * phones.size(), 0.0f);

    double phase = rng.uniform() * 2.0 * std::numbers::pi;
    for (std::size_t p = 0; p < phones.size(); ++p) {
        // Formants spread over the inventory: F1 in [300, 900] Hz, F2 in [900, 2700] Hz.
        const double pos = (static_cast<double>(phones[p]) + 0.5) / static_cast<double>(inventory);
        const double f1 = formant_scale * (300.0 + 600.0 * std::fmod(pos * 3.0, 1.0));
        const double f2 = formant_scale * (900.0 + 1800.0 * pos);
        for (std::size_t i = 0; i < phone_len; ++i) {
            phase += 2.0 * std::numbers::pi * pitch / fs;
            double v = 0.0;
            for (int h = 1; pitch * h < 4000.0; ++h) {
                const double f = pitch * h;
                const double w1 = std::exp(-0.5 * std::pow((f - f1) / 90.0, 2.0));
                const double w2 = 0.7 * std::exp(-0.5 * std::pow((f - f2) / 120.0, 2.0));
                v += (w1 + w2 + 0.02) * std::sin(phase * h);
            }
            double env = 1.0;
            if (i < ramp) {
                env = static_cast<double>(i) / static_cast<double>(ramp);
            } else if (phone_len - i <= ramp) {
                env = static_cast<double>(phone_len - i) / static_cast<double>(ramp);
            }
            clip.samples[p * phone_len + i] = static_cast<float>(v * env);
        }
    }
    float peak = 0.0f;
    for (float s : clip.samples) {
        peak = std::max(peak, std::abs(s));
    }
    if (peak > 0.0f) {
        for (float& s : clip.samples) {
            s = static_cast<float>(s / peak * amplitude);
        }
    }
    return clip;
}

std::vector<LabeledClip> tone_corpus(const ToneCorpusSpec& spec) {
    require(spec.terms >= 2 && spec.utterances_per_term >= 2 && spec.speakers >= 1, ErrorKind::Parameter,
            "tone corpus needs two terms with two utterances");
    require(spec.phones >= 2 && spec.phones_per_term >= 1, ErrorKind::Parameter, "invalid phone inventory");

    Rng rng(derive_seed(spec.seed, {0x746f6e65}));
    struct Speaker {
        double pitch;
        double formant;
        double tempo;
    };
    std::vector<Speaker> speakers(spec.speakers);
    for (auto& s : speakers) {
        s = {rng.uniform(100.0, 220.0), rng.uniform(0.93, 1.07), rng.uniform(0.85, 1.15)};
    }

    std::vector<std::vector<std::uint32_t>> words;
    while (words.size() < spec.terms) {
        std::vector<std::uint32_t> w(spec.phones_per_term);
        for (std::size_t p = 0; p < w.size(); ++p) {
            do {
                w[p] = static_cast<std::uint32_t>(rng.below(spec.phones));
            } while (p > 0 && w[p] == w[p - 1]);
        }
        if (std::find(words.begin(), words.end(), w) == words.end()) {
            words.push_back(std::move(w));
        }
    }

    std::vector<LabeledClip> out;
    for (std::size_t t = 0; t < spec.terms; ++t) {
        for (std::size_t u = 0; u < spec.utterances_per_term; ++u) {
            const std::size_t sid = (t + u) % spec.speakers;
            const Speaker& s = speakers[sid];
            LabeledClip clip;
            clip.term = "word" + std::to_string(t);
            clip.speaker = "spk" + std::to_string(sid);
            clip.audio = render_phones(words[t], spec.phones, spec.phone_seconds, s.pitch * rng.uniform(0.97, 1.03),
                                       s.formant, s.tempo * rng.uniform(0.92, 1.08), rng.uniform(0.3, 0.6),
                                       spec.sample_rate, rng);
            out.push_back(std::move(clip));
        }
    }
    return out;
}

AudioClip white_noise(std::size_t samples, int sample_rate, std::uint64_t seed) {
    Rng rng(seed);
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.resize(samples);
    for (float& s : clip.samples) {
        s = static_cast<float>(rng.normal());
    }
    return clip;
}

std::vector<TokenSequence> token_corpus(std::size_t count, std::size_t vocab, std::size_t min_len,
                                        std::size_t max_len, std::uint64_t seed) {
    require(vocab >= 1 && min_len >= 1 && min_len <= max_len, ErrorKind::Parameter, "invalid token corpus spec");
    Rng rng(seed);
    std::vector<TokenSequence> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t len = min_len + rng.below(max_len - min_len + 1);
        out[i].tokens.resize(len);
        for (auto& t : out[i].tokens) {
            t = static_cast<std::uint32_t>(rng.below(vocab));
        }
        out[i].segment_id = "seg" + std::to_string(i);
        out[i].frames = {0, len};
    }
    return out;
}

} // namespace tokstd
