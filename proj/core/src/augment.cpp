#include "tokstd/augment.hpp"

#include "fft.hpp"
#include "tokstd/error.hpp"
#include "tokstd/rng.hpp"

#include <cmath>

namespace tokstd {

void AugmentSpec::validate() const {
    require(std::isfinite(snr_db_low) && std::isfinite(snr_db_high) && snr_db_low <= snr_db_high,
            ErrorKind::Parameter, "snr range must satisfy low <= high");
    require(reverb_prob >= 0.0 && reverb_prob <= 1.0, ErrorKind::Parameter,
            "reverb_prob must lie in [0, 1]");
    require(!noise_bank.empty(), ErrorKind::Parameter, "noise bank is empty");
    require(reverb_prob == 0.0 || !rir_bank.empty(), ErrorKind::Parameter,
            "reverb enabled but RIR bank is empty");
}

MixResult mix_at_snr(const AudioClip& speech, const AudioClip& noise, double snr_db,
                     IndexRange valid) {
    require(speech.sample_rate == noise.sample_rate, ErrorKind::Input,
            "speech and noise sample rates differ");
    require(std::isfinite(snr_db), ErrorKind::Parameter, "snr must be finite");
    require(!noise.samples.empty(), ErrorKind::DegenerateSignal, "noise clip is empty");
    valid.end = std::min(valid.end, speech.samples.size());
    require(!valid.empty(), ErrorKind::DegenerateSignal, "empty speech range");

    const std::size_t n = speech.samples.size();
    std::vector<double> looped(n);
    for (std::size_t i = 0; i < n; ++i) {
        looped[i] = noise.samples[i % noise.samples.size()];
    }

    double p_speech = 0.0;
    double p_noise = 0.0;
    for (std::size_t i = valid.begin; i < valid.end; ++i) {
        p_speech += static_cast<double>(speech.samples[i]) * speech.samples[i];
        p_noise += looped[i] * looped[i];
    }
    p_speech /= static_cast<double>(valid.size());
    p_noise /= static_cast<double>(valid.size());
    require(p_speech > 0.0, ErrorKind::DegenerateSignal, "speech has zero power over the term");
    require(p_noise > 0.0, ErrorKind::DegenerateSignal, "noise has zero power over the term");

    MixResult result;
    result.noise_gain = std::sqrt(p_speech / (p_noise * std::pow(10.0, snr_db / 10.0)));

    std::vector<double> mixed(n);
    double peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mixed[i] = speech.samples[i] + result.noise_gain * looped[i];
        peak = std::max(peak, std::abs(mixed[i]));
    }
    result.peak_scale = peak > 1.0 ? 1.0 / peak : 1.0;

    result.audio.sample_rate = speech.sample_rate;
    result.audio.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        result.audio.samples[i] = static_cast<float>(mixed[i] * result.peak_scale);
    }
    return result;
}

AudioClip apply_rir(const AudioClip& speech, const AudioClip& rir) {
    require(speech.sample_rate == rir.sample_rate, ErrorKind::Input,
            "speech and RIR sample rates differ");
    require(!rir.samples.empty(), ErrorKind::DegenerateSignal, "RIR is empty");

    std::size_t peak = 0;
    float peak_abs = 0.0F;
    for (std::size_t i = 0; i < rir.samples.size(); ++i) {
        if (std::abs(rir.samples[i]) > peak_abs) {
            peak_abs = std::abs(rir.samples[i]);
            peak = i;
        }
    }
    require(peak_abs > 0.0F, ErrorKind::DegenerateSignal, "RIR is all zeros");

    const std::vector<double> x(speech.samples.begin(), speech.samples.end());
    const std::vector<double> h(rir.samples.begin(), rir.samples.end());
    const std::vector<double> full = detail::convolve(x, h);

    const std::size_t n = speech.samples.size();
    std::vector<double> y(n);
    double energy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = full[i + peak];
        energy += y[i] * y[i];
    }
    const double in_rms = rms(speech);
    const double out_rms = std::sqrt(energy / static_cast<double>(n));
    const double scale = out_rms > 0.0 ? in_rms / out_rms : 0.0;

    AudioClip out;
    out.sample_rate = speech.sample_rate;
    out.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.samples[i] = static_cast<float>(y[i] * scale);
    }
    return out;
}

DistortionResult sample_distortion(const AudioClip& clip, const AugmentSpec& spec, IndexRange valid,
                                   std::uint64_t ordinal) {
    spec.validate();
    Rng rng(derive_seed(spec.rng_seed, {ordinal}));

    DistortionResult result;
    // Fixed draw order keeps outputs stable when the spec changes elsewhere.
    result.draw.reverberated = rng.bernoulli(spec.reverb_prob);
    result.draw.rir_index = spec.rir_bank.empty() ? 0 : rng.below(spec.rir_bank.size());
    result.draw.snr_db = rng.uniform(spec.snr_db_low, spec.snr_db_high);
    result.draw.noise_index = rng.below(spec.noise_bank.size());

    AudioClip source = result.draw.reverberated
                           ? apply_rir(clip, spec.rir_bank[result.draw.rir_index])
                           : clip;
    result.audio =
        mix_at_snr(source, spec.noise_bank[result.draw.noise_index], result.draw.snr_db, valid).audio;
    return result;
}

} // namespace tokstd
