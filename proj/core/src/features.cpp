#include "tokstd/features.hpp"

#include "fft.hpp"
#include "tokstd/error.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace tokstd {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters on the HTK mel scale; rows are filters, columns FFT bins.
Matrix<double> mel_filterbank(const FeatureConfig& cfg) {
    const std::size_t n_bins = static_cast<std::size_t>(cfg.n_fft) / 2 + 1;
    const double high = cfg.high_hz > 0.0 ? cfg.high_hz : cfg.sample_rate / 2.0;
    const double mel_lo = hz_to_mel(cfg.low_hz);
    const double mel_hi = hz_to_mel(high);
    const auto n_mels = static_cast<std::size_t>(cfg.n_mels);

    std::vector<double> edges(n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                          static_cast<double>(n_mels + 1));
    }

    Matrix<double> fb(n_mels, n_bins, 0.0);
    const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.n_fft;
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double left = edges[m];
        const double centre = edges[m + 1];
        const double right = edges[m + 2];
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * bin_hz;
            double w = 0.0;
            if (f > left && f <= centre) {
                w = (f - left) / (centre - left);
            } else if (f > centre && f < right) {
                w = (right - f) / (right - centre);
            }
            fb(m, k) = w;
        }
    }
    return fb;
}

/// Orthonormal DCT-II basis, n_out x n_in.
Matrix<double> dct_matrix(std::size_t n_out, std::size_t n_in) {
    Matrix<double> d(n_out, n_in);
    const double n = static_cast<double>(n_in);
    for (std::size_t k = 0; k < n_out; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (std::size_t i = 0; i < n_in; ++i) {
            d(k, i) = scale * std::cos(std::numbers::pi * static_cast<double>(k) *
                                       (static_cast<double>(i) + 0.5) / n);
        }
    }
    return d;
}

} // namespace

std::size_t FeatureConfig::window_samples() const {
    return static_cast<std::size_t>(std::llround(win_ms * 1e-3 * sample_rate));
}

std::size_t FeatureConfig::hop_samples() const {
    return static_cast<std::size_t>(std::llround(hop_ms * 1e-3 * sample_rate));
}

void FeatureConfig::validate() const {
    require(sample_rate > 0, ErrorKind::Parameter, "sample_rate must be positive");
    require(n_mfcc > 0, ErrorKind::Parameter, "n_mfcc must be positive");
    require(n_mels >= n_mfcc, ErrorKind::Parameter, "n_mels must be >= n_mfcc");
    require(win_ms > 0.0 && hop_ms > 0.0, ErrorKind::Parameter, "window and hop must be positive");
    require(n_fft > 0 && std::has_single_bit(static_cast<unsigned>(n_fft)), ErrorKind::Parameter,
            "n_fft must be a power of two");
    require(window_samples() >= 1 && hop_samples() >= 1, ErrorKind::Parameter,
            "window and hop must span at least one sample");
    require(window_samples() <= static_cast<std::size_t>(n_fft), ErrorKind::Parameter,
            "window longer than n_fft");
    require(preemphasis >= 0.0 && preemphasis < 1.0, ErrorKind::Parameter,
            "preemphasis must lie in [0, 1)");
    require(log_floor > 0.0, ErrorKind::Parameter, "log_floor must be positive");
}

std::size_t frame_count(std::size_t n_samples, const FeatureConfig& cfg) {
    const std::size_t win = cfg.window_samples();
    if (n_samples < win) {
        return 0;
    }
    return 1 + (n_samples - win) / cfg.hop_samples();
}

IndexRange frames_for_samples(IndexRange samples, std::size_t n_frames, const FeatureConfig& cfg) {
    // Frame f is centred at f*hop + win/2; keep frames whose centre lies in
    // [samples.begin, samples.end).
    const double hop = static_cast<double>(cfg.hop_samples());
    const double half = static_cast<double>(cfg.window_samples()) / 2.0;
    auto first_at_or_after = [&](double sample) -> std::size_t {
        const double f = std::ceil((sample - half) / hop);
        return f <= 0.0 ? 0 : std::min(static_cast<std::size_t>(f), n_frames);
    };
    IndexRange r{first_at_or_after(static_cast<double>(samples.begin)),
                 first_at_or_after(static_cast<double>(samples.end))};
    r.end = std::max(r.end, r.begin);
    return r;
}

Matrix<float> deltas(const Matrix<float>& x) {
    const std::size_t t_len = x.rows();
    const std::size_t dim = x.cols();
    Matrix<float> d(t_len, dim, 0.0F);
    if (t_len == 0) {
        return d;
    }
    const auto clamp_row = [t_len](std::ptrdiff_t t) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(t, 0, static_cast<std::ptrdiff_t>(t_len) - 1));
    };
    constexpr double kDenominator = 2.0 * (1.0 + 4.0);
    for (std::size_t t = 0; t < t_len; ++t) {
        const auto ti = static_cast<std::ptrdiff_t>(t);
        for (std::size_t j = 0; j < dim; ++j) {
            double acc = 0.0;
            for (int n = 1; n <= 2; ++n) {
                acc += n * (static_cast<double>(x(clamp_row(ti + n), j)) -
                            static_cast<double>(x(clamp_row(ti - n), j)));
            }
            d(t, j) = static_cast<float>(acc / kDenominator);
        }
    }
    return d;
}

FeatureSequence compute_mfcc(const AudioClip& clip, const FeatureConfig& cfg) {
    cfg.validate();
    validate(clip);
    require(clip.sample_rate == cfg.sample_rate, ErrorKind::Input,
            "clip rate " + std::to_string(clip.sample_rate) + " differs from feature rate " +
                std::to_string(cfg.sample_rate));

    const std::size_t win = cfg.window_samples();
    const std::size_t hop = cfg.hop_samples();
    if (clip.samples.size() < win) {
        fail(ErrorKind::TooShort, "clip of " + std::to_string(clip.samples.size()) +
                                      " samples is shorter than one window (" +
                                      std::to_string(win) + ")");
    }
    const std::size_t t_len = frame_count(clip.samples.size(), cfg);
    const auto n_mfcc = static_cast<std::size_t>(cfg.n_mfcc);

    const Matrix<double> fb = mel_filterbank(cfg);
    const Matrix<double> dct = dct_matrix(n_mfcc, static_cast<std::size_t>(cfg.n_mels));
    std::vector<double> window(win);
    for (std::size_t i = 0; i < win; ++i) {
        window[i] = win == 1 ? 1.0
                             : 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                                      static_cast<double>(win - 1));
    }

    detail::RealFft fft(static_cast<std::size_t>(cfg.n_fft));
    std::vector<double> frame(win);
    std::vector<std::complex<double>> spectrum;
    std::vector<double> power(static_cast<std::size_t>(cfg.n_fft) / 2 + 1);
    std::vector<double> log_mel(static_cast<std::size_t>(cfg.n_mels));
    Matrix<float> statics(t_len, n_mfcc);

    for (std::size_t t = 0; t < t_len; ++t) {
        const float* src = clip.samples.data() + t * hop;
        // Frame-local pre-emphasis: the first sample is differenced with itself.
        for (std::size_t i = 0; i < win; ++i) {
            const double prev = i == 0 ? src[0] : src[i - 1];
            frame[i] = (static_cast<double>(src[i]) - cfg.preemphasis * prev) * window[i];
        }
        fft.forward(frame, spectrum);
        for (std::size_t k = 0; k < power.size(); ++k) {
            power[k] = std::norm(spectrum[k]);
        }
        for (std::size_t m = 0; m < log_mel.size(); ++m) {
            double e = 0.0;
            const auto fb_row = fb.row(m);
            for (std::size_t k = 0; k < power.size(); ++k) {
                e += fb_row[k] * power[k];
            }
            log_mel[m] = std::log(std::max(e, cfg.log_floor));
        }
        for (std::size_t c = 0; c < n_mfcc; ++c) {
            double acc = 0.0;
            const auto dct_row = dct.row(c);
            for (std::size_t m = 0; m < log_mel.size(); ++m) {
                acc += dct_row[m] * log_mel[m];
            }
            statics(t, c) = static_cast<float>(acc);
        }
    }

    const Matrix<float> d1 = deltas(statics);
    const Matrix<float> d2 = deltas(d1);

    FeatureSequence seq;
    seq.frames = Matrix<float>(t_len, 3 * n_mfcc);
    for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t c = 0; c < n_mfcc; ++c) {
            seq.frames(t, c) = statics(t, c);
            seq.frames(t, n_mfcc + c) = d1(t, c);
            seq.frames(t, 2 * n_mfcc + c) = d2(t, c);
        }
    }
    seq.frame_hop = static_cast<double>(hop) / cfg.sample_rate;
    seq.window_len = static_cast<double>(win) / cfg.sample_rate;
    seq.valid = {0, t_len};
    return seq;
}

void write_features(const std::filesystem::path& base, const FeatureSequence& seq) {
    static_assert(std::endian::native == std::endian::little, "feature files are little-endian");
    const std::filesystem::path feat = base.string() + ".feat";
    const std::filesystem::path header = base.string() + ".feat.json";
    {
        std::ofstream out(feat, std::ios::binary);
        require(out.good(), ErrorKind::Io, "cannot write " + feat.string());
        out.write(reinterpret_cast<const char*>(seq.frames.storage().data()),
                  static_cast<std::streamsize>(seq.frames.size() * sizeof(float)));
    }
    nlohmann::json j = {
        {"rows", seq.frames.rows()},
        {"cols", seq.frames.cols()},
        {"dtype", "f32le"},
        {"frame_hop", seq.frame_hop},
        {"window_len", seq.window_len},
        {"valid_range", {seq.valid.begin, seq.valid.end}},
        {"source_id", seq.source_id},
    };
    std::ofstream out(header);
    require(out.good(), ErrorKind::Io, "cannot write " + header.string());
    out << j.dump(2) << '\n';
}

FeatureSequence read_features(const std::filesystem::path& base) {
    const std::filesystem::path feat = base.string() + ".feat";
    const std::filesystem::path header = base.string() + ".feat.json";
    std::ifstream hin(header);
    require(hin.good(), ErrorKind::Io, "cannot open " + header.string());
    nlohmann::json j;
    try {
        hin >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, header.string() + ": " + e.what());
    }

    FeatureSequence seq;
    std::size_t rows = 0;
    std::size_t cols = 0;
    try {
        rows = j.at("rows").get<std::size_t>();
        cols = j.at("cols").get<std::size_t>();
        seq.frame_hop = j.at("frame_hop").get<double>();
        seq.window_len = j.at("window_len").get<double>();
        seq.valid = {j.at("valid_range").at(0).get<std::size_t>(),
                     j.at("valid_range").at(1).get<std::size_t>()};
        seq.source_id = j.value("source_id", std::string{});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, header.string() + ": " + e.what());
    }
    require(seq.valid.begin <= seq.valid.end && seq.valid.end <= rows, ErrorKind::Format,
            header.string() + ": valid_range out of bounds");

    std::ifstream in(feat, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + feat.string());
    std::vector<float> data(rows * cols);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    require(static_cast<std::size_t>(in.gcount()) == data.size() * sizeof(float), ErrorKind::Format,
            feat.string() + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) + " floats");
    seq.frames = Matrix<float>(rows, cols, std::move(data));
    return seq;
}

} // namespace tokstd
