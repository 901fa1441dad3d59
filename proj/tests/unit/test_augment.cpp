#include "oracles.hpp"
#include "tokstd/augment.hpp"
#include "tokstd/error.hpp"
#include "tokstd/rng.hpp"
#include "tokstd/synthetic.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tokstd;

namespace {

AudioClip noise(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    AudioClip c = white_noise(n, 16000, seed);
    for (float& s : c.samples) {
        s = static_cast<float>(s * scale);
    }
    return c;
}

} // namespace

TEST(MixAtSnr, HitsTargetOverValidRange) {
    const AudioClip speech = noise(8000, 1, 0.1);
    const AudioClip n = noise(8000, 2);
    for (double snr : {-5.0, 0.0, 7.5, 20.0}) {
        const IndexRange valid{1000, 6000};
        const MixResult m = mix_at_snr(speech, n, snr, valid);
        EXPECT_NEAR(oracle::measured_snr_db(speech.samples, m.audio.samples, m.peak_scale, valid), snr, 1e-3);
    }
}

TEST(MixAtSnr, ShortNoiseIsLooped) {
    const AudioClip speech = noise(5000, 3, 0.1);
    const AudioClip n = noise(700, 4);
    const MixResult m = mix_at_snr(speech, n, 5.0, {0, 5000});
    ASSERT_EQ(m.audio.size(), 5000u);
    // Residual at i and i + 700 comes from the same noise sample.
    for (std::size_t i : {0u, 123u, 3000u}) {
        const double r0 = m.audio.samples[i] - m.peak_scale * speech.samples[i];
        const double r1 = m.audio.samples[i + 700] - m.peak_scale * speech.samples[i + 700];
        EXPECT_NEAR(r0, r1, 1e-6);
    }
}

TEST(MixAtSnr, ClippingRenormalisesPeakAndKeepsSnr) {
    const AudioClip speech = noise(4000, 5, 0.6);
    const AudioClip n = noise(4000, 6);
    const MixResult m = mix_at_snr(speech, n, -5.0, {0, 4000});
    EXPECT_LT(m.peak_scale, 1.0);
    float peak = 0.0f;
    for (float s : m.audio.samples) {
        peak = std::max(peak, std::abs(s));
    }
    EXPECT_NEAR(peak, 1.0f, 1e-6);
    EXPECT_NEAR(oracle::measured_snr_db(speech.samples, m.audio.samples, m.peak_scale, {0, 4000}), -5.0, 1e-3);
}

TEST(MixAtSnr, SilentInputsAreDegenerate) {
    AudioClip silent;
    silent.samples.assign(1000, 0.0f);
    const AudioClip n = noise(1000, 7);
    for (const auto& [s, nn] : {std::pair{silent, n}, std::pair{n, silent}}) {
        try {
            mix_at_snr(s, nn, 0.0, {0, 1000});
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::DegenerateSignal);
        }
    }
}

TEST(Rir, UnitImpulseIsIdentity) {
    const AudioClip speech = noise(2000, 8, 0.2);
    AudioClip rir;
    rir.samples = {0.0f, 0.0f, 1.0f, 0.0f};
    const AudioClip out = apply_rir(speech, rir);
    ASSERT_EQ(out.size(), speech.size());
    for (std::size_t i = 0; i < speech.size(); ++i) {
        EXPECT_NEAR(out.samples[i], speech.samples[i], 1e-6);
    }
}

TEST(Rir, OutputKeepsInputRms) {
    const AudioClip speech = noise(3000, 9, 0.3);
    AudioClip rir = noise(400, 10);
    for (std::size_t i = 0; i < rir.size(); ++i) {
        rir.samples[i] = static_cast<float>(rir.samples[i] * std::exp(-double(i) / 80.0));
    }
    const AudioClip out = apply_rir(speech, rir);
    EXPECT_NEAR(rms(out), rms(speech), 1e-5);
}

TEST(Rir, AllZeroIsDegenerate) {
    AudioClip rir;
    rir.samples.assign(16, 0.0f);
    try {
        apply_rir(noise(100, 1), rir);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DegenerateSignal);
    }
}

TEST(Distortion, ReplaysFromSeedAndOrdinal) {
    AugmentSpec spec;
    spec.noise_bank = {noise(3000, 11), noise(2000, 12)};
    spec.rir_bank = {noise(64, 13)};
    spec.rng_seed = 99;
    const AudioClip speech = noise(4000, 14, 0.2);
    const auto a = sample_distortion(speech, spec, {0, 4000}, 5);
    const auto b = sample_distortion(speech, spec, {0, 4000}, 5);
    const auto c = sample_distortion(speech, spec, {0, 4000}, 6);
    EXPECT_EQ(a.audio.samples, b.audio.samples);
    EXPECT_EQ(a.draw.snr_db, b.draw.snr_db);
    EXPECT_NE(a.draw.snr_db, c.draw.snr_db);
}

TEST(Distortion, DrawsStayInRange) {
    AugmentSpec spec;
    spec.noise_bank = {noise(3000, 15)};
    spec.rir_bank = {noise(64, 16)};
    spec.reverb_prob = 0.5;
    const AudioClip speech = noise(2000, 17, 0.2);
    int reverbs = 0;
    for (std::uint64_t k = 0; k < 200; ++k) {
        const auto d = sample_distortion(speech, spec, {0, 2000}, k);
        EXPECT_GE(d.draw.snr_db, 0.0);
        EXPECT_LE(d.draw.snr_db, 10.0);
        reverbs += d.draw.reverberated ? 1 : 0;
    }
    EXPECT_GT(reverbs, 60);
    EXPECT_LT(reverbs, 140);
}

TEST(Distortion, SpecValidation) {
    AugmentSpec spec;
    EXPECT_THROW(spec.validate(), Error);
    spec.noise_bank = {noise(100, 1)};
    spec.reverb_prob = 0.0;
    EXPECT_NO_THROW(spec.validate());
    spec.snr_db_low = 12.0;
    EXPECT_THROW(spec.validate(), Error);
}

TEST(MixAtSnr, SixtyDbLeavesSpeechAlmostUntouched) {
    const AudioClip speech = noise(4000, 21, 0.2);
    const MixResult m = mix_at_snr(speech, noise(4000, 22), 60.0, {0, 4000});
    AudioClip diff = speech;
    for (std::size_t i = 0; i < diff.size(); ++i) {
        diff.samples[i] = m.audio.samples[i] - speech.samples[i];
    }
    EXPECT_LT(rms(diff), 1e-3);
}

TEST(MixAtSnr, EqualPowerAtZeroDbHasUnitGain) {
    AudioClip a;
    AudioClip b;
    a.samples = {0.5f, -0.5f, 0.5f, -0.5f};
    b.samples = {-0.5f, -0.5f, 0.5f, 0.5f};
    const MixResult m = mix_at_snr(a, b, 0.0, {0, 4});
    EXPECT_DOUBLE_EQ(m.noise_gain, 1.0);
}

TEST(Rir, DelayedImpulseIsCompensated) {
    const AudioClip speech = noise(1500, 23, 0.2);
    AudioClip rir;
    rir.samples.assign(101, 0.0f);
    rir.samples[100] = 1.0f;
    const AudioClip out = apply_rir(speech, rir);
    for (std::size_t i = 0; i < speech.size(); ++i) {
        EXPECT_NEAR(out.samples[i], speech.samples[i], 1e-6);
    }
}

TEST(Rir, TwoTapOnRampMatchesDirectConvolution) {
    AudioClip ramp;
    for (int i = 1; i <= 6; ++i) {
        ramp.samples.push_back(0.1f * static_cast<float>(i));
    }
    AudioClip rir;
    rir.samples = {1.0f, 0.5f};
    // y[i] = x[i] + 0.5 x[i-1]: 0.1, 0.25, 0.4, 0.55, 0.7, 0.85, then RMS-matched.
    const std::vector<double> y{0.1, 0.25, 0.4, 0.55, 0.7, 0.85};
    double ey = 0.0;
    for (double v : y) {
        ey += v * v;
    }
    const double scale = rms(ramp) / std::sqrt(ey / 6.0);
    const AudioClip out = apply_rir(ramp, rir);
    for (std::size_t i = 0; i < y.size(); ++i) {
        EXPECT_NEAR(out.samples[i], y[i] * scale, 1e-6);
    }
}

TEST(Distortion, DegenerateRangeEqualsPlainMix) {
    AugmentSpec spec;
    spec.noise_bank = {noise(3000, 24)};
    spec.reverb_prob = 0.0;
    spec.snr_db_low = spec.snr_db_high = 10.0;
    const AudioClip speech = noise(3000, 25, 0.2);
    const auto d = sample_distortion(speech, spec, {0, 3000}, 0);
    EXPECT_EQ(d.audio.samples, mix_at_snr(speech, spec.noise_bank[0], 10.0, {0, 3000}).audio.samples);
}

TEST(Distortion, MonteCarloSnrMean) {
    AugmentSpec spec;
    spec.noise_bank = {noise(500, 26)};
    spec.reverb_prob = 0.0;
    spec.rng_seed = 31;
    const AudioClip speech = noise(500, 27, 0.2);
    double acc = 0.0;
    for (std::uint64_t k = 0; k < 1000; ++k) {
        acc += sample_distortion(speech, spec, {0, 500}, k).draw.snr_db;
    }
    EXPECT_NEAR(acc / 1000.0, 5.0, 0.3);
}
