#include "tokstd/audio.hpp"
#include "tokstd/error.hpp"
#include "tokstd/features.hpp"
#include "tokstd/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace fs = std::filesystem;
using namespace tokstd;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "tokstd_audio_tests";
    fs::create_directories(dir);
    return dir / name;
}

AudioClip sine(double hz, double seconds, int rate = 16000, double amp = 0.5) {
    AudioClip c;
    c.sample_rate = rate;
    c.samples.resize(static_cast<std::size_t>(seconds * rate));
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        c.samples[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * hz * i / rate));
    }
    return c;
}

template <typename T>
void put(std::string& s, T v) {
    s.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

std::string wav_header(std::uint16_t format, std::uint16_t channels, std::uint32_t rate, std::uint16_t bits,
                       std::uint32_t data_bytes) {
    std::string h = "RIFF";
    put<std::uint32_t>(h, 36 + data_bytes);
    h += "WAVEfmt ";
    put<std::uint32_t>(h, 16);
    put<std::uint16_t>(h, format);
    put<std::uint16_t>(h, channels);
    put<std::uint32_t>(h, rate);
    put<std::uint32_t>(h, rate * channels * bits / 8);
    put<std::uint16_t>(h, static_cast<std::uint16_t>(channels * bits / 8));
    put<std::uint16_t>(h, bits);
    h += "data";
    put<std::uint32_t>(h, data_bytes);
    return h;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Direct-DFT MFCC of one frame, written from the textbook definitions.
std::vector<double> naive_mfcc_frame(const std::vector<float>& x, std::size_t offset, const FeatureConfig& cfg) {
    const std::size_t win = cfg.window_samples();
    const std::size_t nfft = static_cast<std::size_t>(cfg.n_fft);
    std::vector<double> buf(nfft, 0.0);
    for (std::size_t i = 0; i < win; ++i) {
        const double prev = i == 0 ? x[offset] : x[offset + i - 1];
        const double ham = 0.54 - 0.46 * std::cos(2 * std::numbers::pi * i / (win - 1.0));
        buf[i] = (x[offset + i] - cfg.preemphasis * prev) * ham;
    }
    std::vector<double> power(nfft / 2 + 1);
    for (std::size_t k = 0; k < power.size(); ++k) {
        std::complex<double> acc = 0.0;
        for (std::size_t n = 0; n < nfft; ++n) {
            acc += buf[n] * std::polar(1.0, -2 * std::numbers::pi * double(k * n) / double(nfft));
        }
        power[k] = std::norm(acc);
    }
    auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
    auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    const double top = mel(cfg.sample_rate / 2.0);
    std::vector<double> logmel(cfg.n_mels);
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double l = hz(top * m / (cfg.n_mels + 1.0));
        const double c = hz(top * (m + 1) / (cfg.n_mels + 1.0));
        const double r = hz(top * (m + 2) / (cfg.n_mels + 1.0));
        double e = 0.0;
        for (std::size_t k = 0; k < power.size(); ++k) {
            const double f = k * double(cfg.sample_rate) / nfft;
            const double w = f > l && f <= c ? (f - l) / (c - l) : (f > c && f < r ? (r - f) / (r - c) : 0.0);
            e += w * power[k];
        }
        logmel[m] = std::log(std::max(e, cfg.log_floor));
    }
    std::vector<double> out(cfg.n_mfcc);
    for (int k = 0; k < cfg.n_mfcc; ++k) {
        double acc = 0.0;
        for (int m = 0; m < cfg.n_mels; ++m) {
            acc += logmel[m] * std::cos(std::numbers::pi * k * (m + 0.5) / cfg.n_mels);
        }
        out[k] = acc * std::sqrt((k == 0 ? 1.0 : 2.0) / cfg.n_mels);
    }
    return out;
}

} // namespace

TEST(Wav, Float32RoundTripIsExact) {
    const AudioClip c = sine(440, 0.1);
    const auto p = scratch("f32.wav");
    write_wav(p, c, WavEncoding::Float32);
    const AudioClip back = load_wav(p);
    EXPECT_EQ(back.sample_rate, 16000);
    EXPECT_EQ(back.samples, c.samples);
}

TEST(Wav, Pcm16RoundTripWithinQuantisation) {
    const AudioClip c = sine(300, 0.05);
    const auto p = scratch("pcm16.wav");
    write_wav(p, c, WavEncoding::Pcm16);
    const AudioClip back = load_wav(p);
    ASSERT_EQ(back.size(), c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_NEAR(back.samples[i], c.samples[i], 1.0 / 32768.0);
    }
}

TEST(Wav, Pcm16FullScaleMapsToMinusOne) {
    std::string bytes = wav_header(1, 1, 16000, 16, 4);
    put<std::int16_t>(bytes, -32768);
    put<std::int16_t>(bytes, 16384);
    const auto p = scratch("scale.wav");
    write_bytes(p, bytes);
    const AudioClip c = load_wav(p);
    ASSERT_EQ(c.size(), 2u);
    EXPECT_FLOAT_EQ(c.samples[0], -1.0f);
    EXPECT_FLOAT_EQ(c.samples[1], 0.5f);
}

TEST(Wav, StereoIsAveraged) {
    std::string bytes = wav_header(1, 2, 8000, 16, 8);
    put<std::int16_t>(bytes, 16384);
    put<std::int16_t>(bytes, 0);
    put<std::int16_t>(bytes, -16384);
    put<std::int16_t>(bytes, -16384);
    const auto p = scratch("stereo.wav");
    write_bytes(p, bytes);
    const AudioClip c = load_wav(p);
    ASSERT_EQ(c.size(), 2u);
    EXPECT_EQ(c.sample_rate, 8000);
    EXPECT_FLOAT_EQ(c.samples[0], 0.25f);
    EXPECT_FLOAT_EQ(c.samples[1], -0.5f);
}

TEST(Wav, MalformedHeaderIsFormatError) {
    const auto p = scratch("bad.wav");
    write_bytes(p, "RIFX0000WAVE");
    try {
        load_wav(p);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Format);
    }
}

TEST(Wav, UnsupportedEncodingIsReported) {
    std::string bytes = wav_header(2, 1, 16000, 4, 4); // ADPCM
    bytes += std::string(4, '\0');
    const auto p = scratch("adpcm.wav");
    write_bytes(p, bytes);
    try {
        load_wav(p);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Unsupported);
    }
}

TEST(Audio, DecimateAveragesBlocks) {
    AudioClip c;
    c.sample_rate = 48000;
    c.samples = {0, 3, 6, 3, 3, 3};
    const AudioClip d = decimate(c, 16000);
    EXPECT_EQ(d.sample_rate, 16000);
    ASSERT_EQ(d.size(), 2u);
    EXPECT_FLOAT_EQ(d.samples[0], 3.0f);
    EXPECT_FLOAT_EQ(d.samples[1], 3.0f);
    EXPECT_THROW(decimate(c, 7000), Error);
}

TEST(Padding, CentresTermWithZeros) {
    AudioClip term;
    term.samples.assign(6, 1.0f);
    const PaddedClip p = pad_to_fixed(term, std::nullopt, 10.0 / 16000.0);
    ASSERT_EQ(p.clip.size(), 10u);
    EXPECT_EQ(p.valid.begin, 2u);
    EXPECT_EQ(p.valid.end, 8u);
    EXPECT_EQ(p.clip.samples[1], 0.0f);
    EXPECT_EQ(p.clip.samples[2], 1.0f);
    EXPECT_EQ(p.clip.samples[8], 0.0f);
}

TEST(Padding, ContextFillsSurroundingAudioAndZerosBeyond) {
    AudioClip ctx;
    ctx.samples = {10, 11, 12, 13, 14, 15, 16};
    AudioClip term;
    term.samples = {12, 13};
    // Term starts at sample 2 of the context; target 8 puts 3 pad samples left.
    const PaddedClip p = pad_to_fixed(term, PaddingContext{&ctx, 2}, 8.0 / 16000.0);
    const std::vector<float> expected{0, 10, 11, 12, 13, 14, 15, 16};
    EXPECT_EQ(p.clip.samples, expected);
    EXPECT_EQ(p.valid.begin, 3u);
}

TEST(Padding, LongTermIsTruncationError) {
    AudioClip term;
    term.samples.assign(20, 0.1f);
    try {
        pad_to_fixed(term, std::nullopt, 10.0 / 16000.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Truncation);
    }
}

TEST(Features, FrameCountForOneSecond) {
    FeatureConfig cfg;
    EXPECT_EQ(cfg.window_samples(), 400u);
    EXPECT_EQ(cfg.hop_samples(), 160u);
    EXPECT_EQ(frame_count(16000, cfg), 98u);
    EXPECT_EQ(frame_count(400, cfg), 1u);
    EXPECT_EQ(frame_count(399, cfg), 0u);
}

TEST(Features, ShapeAndMetadata) {
    const FeatureSequence f = compute_mfcc(sine(500, 1.0), {});
    EXPECT_EQ(f.length(), 98u);
    EXPECT_EQ(f.dim(), 48u);
    EXPECT_DOUBLE_EQ(f.frame_hop, 0.01);
    EXPECT_DOUBLE_EQ(f.window_len, 0.025);
}

TEST(Features, ShortClipIsTooShort) {
    try {
        compute_mfcc(sine(500, 0.01), {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::TooShort);
    }
}

TEST(Features, StaticsMatchDirectDftReference) {
    Rng rng(4);
    AudioClip c = sine(700, 0.1);
    for (float& s : c.samples) {
        s += static_cast<float>(0.05 * rng.normal());
    }
    FeatureConfig cfg;
    const FeatureSequence f = compute_mfcc(c, cfg);
    for (std::size_t t : {0u, 3u, 7u}) {
        const auto ref = naive_mfcc_frame(c.samples, t * cfg.hop_samples(), cfg);
        for (int k = 0; k < cfg.n_mfcc; ++k) {
            EXPECT_NEAR(f.frames(t, k), ref[k], 1e-3 * std::max(1.0, std::abs(ref[k]))) << "t=" << t << " k=" << k;
        }
    }
}

TEST(Features, SilenceHitsLogFloor) {
    AudioClip c;
    c.samples.assign(1600, 0.0f);
    const FeatureSequence f = compute_mfcc(c, {});
    // All log-mel values equal log(1e-10): only c0 is non-zero.
    const double c0 = std::log(1e-10) * std::sqrt(26.0);
    EXPECT_NEAR(f.frames(0, 0), c0, 1e-3);
    for (std::size_t k = 1; k < 48; ++k) {
        EXPECT_NEAR(f.frames(0, k), 0.0, 1e-4);
    }
}

TEST(Deltas, LinearRampHasConstantSlopeInside) {
    Matrix<float> x(8, 1);
    for (std::size_t t = 0; t < 8; ++t) {
        x(t, 0) = static_cast<float>(2 * t);
    }
    const Matrix<float> d = deltas(x);
    for (std::size_t t = 2; t < 6; ++t) {
        EXPECT_FLOAT_EQ(d(t, 0), 2.0f);
    }
    // Edge replication: at t=0 the window is {0,0,0,2,4} -> (1*2 + 2*4)/10.
    EXPECT_FLOAT_EQ(d(0, 0), 1.0f);
    EXPECT_FLOAT_EQ(d(7, 0), 1.0f);
}

TEST(Features, ValidFramesFollowSampleCentres) {
    FeatureConfig cfg;
    // Frame f centre = 160 f + 200. Samples [4000, 12000) -> frames 24..73.
    const IndexRange r = frames_for_samples({4000, 12000}, 98, cfg);
    EXPECT_EQ(r.begin, 24u);
    EXPECT_EQ(r.end, 74u);
}

TEST(Features, FileRoundTrip) {
    FeatureSequence f = compute_mfcc(sine(250, 0.2), {});
    f.valid = {2, 10};
    f.source_id = "utt-7";
    const auto base = scratch("utt7");
    write_features(base, f);
    const FeatureSequence back = read_features(base);
    EXPECT_EQ(back.frames, f.frames);
    EXPECT_EQ(back.valid.begin, 2u);
    EXPECT_EQ(back.valid.end, 10u);
    EXPECT_EQ(back.source_id, "utt-7");
}
