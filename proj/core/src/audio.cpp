#include "tokstd/audio.hpp"

#include "tokstd/error.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace tokstd {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint16_t read_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t read_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }
}

float decode_sample(const std::uint8_t* p, std::uint16_t format, std::uint16_t bits) {
    if (format == kFormatFloat) {
        float v;
        std::uint32_t raw = read_u32(p);
        std::memcpy(&v, &raw, sizeof v);
        return v;
    }
    switch (bits) {
    case 8: return (static_cast<float>(p[0]) - 128.0F) / 128.0F;
    case 16: return static_cast<float>(static_cast<std::int16_t>(read_u16(p))) / 32768.0F;
    case 32:
        return static_cast<float>(static_cast<double>(static_cast<std::int32_t>(read_u32(p))) /
                                  2147483648.0);
    default: break;
    }
    fail(ErrorKind::Unsupported, "PCM bit depth " + std::to_string(bits));
}

} // namespace

void validate(const AudioClip& clip) {
    require(clip.sample_rate > 0, ErrorKind::Input, "sample rate must be positive");
    require(!clip.samples.empty(), ErrorKind::Input, "audio clip is empty");
    for (float s : clip.samples) {
        require(std::isfinite(s), ErrorKind::Input, "audio clip contains non-finite samples");
    }
}

AudioClip load_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());

    const std::string name = path.string();
    require(bytes.size() >= 12, ErrorKind::Format, name + ": file too small for RIFF header");
    require(std::memcmp(bytes.data(), "RIFF", 4) == 0 && std::memcmp(bytes.data() + 8, "WAVE", 4) == 0,
            ErrorKind::Format, name + ": missing RIFF/WAVE signature");

    std::uint16_t format = 0;
    std::uint16_t channels = 0;
    std::uint32_t rate = 0;
    std::uint16_t bits = 0;
    bool have_fmt = false;
    const std::uint8_t* data = nullptr;
    std::size_t data_len = 0;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const std::uint8_t* chunk = bytes.data() + pos;
        const std::uint32_t len = read_u32(chunk + 4);
        const std::size_t body = pos + 8;
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            require(len >= 16 && body + len <= bytes.size(), ErrorKind::Format,
                    name + ": truncated fmt chunk");
            format = read_u16(bytes.data() + body);
            channels = read_u16(bytes.data() + body + 2);
            rate = read_u32(bytes.data() + body + 4);
            bits = read_u16(bytes.data() + body + 14);
            if (format == kFormatExtensible) {
                require(len >= 26, ErrorKind::Format, name + ": truncated extensible fmt chunk");
                format = read_u16(bytes.data() + body + 24);
            }
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = bytes.data() + body;
            // Streaming writers sometimes leave the size unset; clamp to the file.
            data_len = std::min<std::size_t>(len, bytes.size() - body);
            break;
        }
        pos = body + len + (len & 1U);
    }

    require(have_fmt, ErrorKind::Format, name + ": no fmt chunk");
    require(data != nullptr, ErrorKind::Format, name + ": no data chunk");
    require(channels > 0 && rate > 0, ErrorKind::Format, name + ": invalid channel count or rate");

    const bool int_ok = format == kFormatPcm && (bits == 8 || bits == 16 || bits == 32);
    const bool float_ok = format == kFormatFloat && bits == 32;
    if (!int_ok && !float_ok) {
        fail(ErrorKind::Unsupported, name + ": format tag " + std::to_string(format) + " with " +
                                         std::to_string(bits) + " bits");
    }

    const std::size_t bytes_per_sample = bits / 8U;
    const std::size_t frame_bytes = bytes_per_sample * channels;
    const std::size_t n_frames = data_len / frame_bytes;

    AudioClip clip;
    clip.sample_rate = static_cast<int>(rate);
    clip.samples.resize(n_frames);
    for (std::size_t i = 0; i < n_frames; ++i) {
        const std::uint8_t* frame = data + i * frame_bytes;
        if (channels == 1) {
            clip.samples[i] = decode_sample(frame, format, bits);
        } else {
            double acc = 0.0;
            for (std::uint16_t c = 0; c < channels; ++c) {
                acc += decode_sample(frame + c * bytes_per_sample, format, bits);
            }
            clip.samples[i] = static_cast<float>(acc / channels);
        }
    }
    return clip;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip, WavEncoding encoding) {
    std::uint16_t format = kFormatPcm;
    std::uint16_t bits = 16;
    switch (encoding) {
    case WavEncoding::Pcm8: bits = 8; break;
    case WavEncoding::Pcm16: bits = 16; break;
    case WavEncoding::Pcm32: bits = 32; break;
    case WavEncoding::Float32:
        bits = 32;
        format = kFormatFloat;
        break;
    }
    const std::uint32_t bytes_per_sample = bits / 8U;
    const auto data_len = static_cast<std::uint32_t>(clip.samples.size() * bytes_per_sample);

    std::vector<std::uint8_t> out;
    out.reserve(44 + data_len);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    put_u32(out, 36 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put_u32(out, 16);
    put_u16(out, format);
    put_u16(out, 1);
    put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
    put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * bytes_per_sample);
    put_u16(out, static_cast<std::uint16_t>(bytes_per_sample));
    put_u16(out, bits);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    put_u32(out, data_len);

    for (float s : clip.samples) {
        const double c = std::clamp(static_cast<double>(s), -1.0, 1.0);
        switch (encoding) {
        case WavEncoding::Pcm8:
            out.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(c * 128.0) + 128, 0L, 255L)));
            break;
        case WavEncoding::Pcm16:
            put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(
                             std::clamp(std::lround(c * 32768.0), -32768L, 32767L))));
            break;
        case WavEncoding::Pcm32:
            put_u32(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(std::clamp(
                             std::llround(c * 2147483648.0), -2147483648LL, 2147483647LL))));
            break;
        case WavEncoding::Float32: {
            std::uint32_t raw;
            std::memcpy(&raw, &s, sizeof raw);
            put_u32(out, raw);
            break;
        }
        }
    }

    std::ofstream file(path, std::ios::binary);
    require(file.good(), ErrorKind::Io, "cannot write " + path.string());
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

AudioClip decimate(const AudioClip& clip, int target_rate) {
    require(target_rate > 0, ErrorKind::Parameter, "target rate must be positive");
    if (clip.sample_rate == target_rate) {
        return clip;
    }
    if (clip.sample_rate % target_rate != 0) {
        fail(ErrorKind::Unsupported, "cannot decimate " + std::to_string(clip.sample_rate) +
                                         " Hz to " + std::to_string(target_rate) + " Hz");
    }
    const auto factor = static_cast<std::size_t>(clip.sample_rate / target_rate);
    AudioClip out;
    out.sample_rate = target_rate;
    out.samples.resize(clip.samples.size() / factor);
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < factor; ++k) {
            acc += clip.samples[i * factor + k];
        }
        out.samples[i] = static_cast<float>(acc / static_cast<double>(factor));
    }
    return out;
}

double rms(const AudioClip& clip, IndexRange range) {
    range.end = std::min(range.end, clip.samples.size());
    if (range.empty()) {
        return 0.0;
    }
    double acc = 0.0;
    for (std::size_t i = range.begin; i < range.end; ++i) {
        acc += static_cast<double>(clip.samples[i]) * clip.samples[i];
    }
    return std::sqrt(acc / static_cast<double>(range.size()));
}

double rms(const AudioClip& clip) { return rms(clip, {0, clip.samples.size()}); }

PaddedClip pad_to_fixed(const AudioClip& term, std::optional<PaddingContext> context,
                        double target_seconds) {
    require(term.sample_rate > 0, ErrorKind::Input, "sample rate must be positive");
    require(target_seconds > 0.0, ErrorKind::Parameter, "target length must be positive");
    const auto target =
        static_cast<std::size_t>(std::llround(target_seconds * term.sample_rate));
    if (term.samples.size() > target) {
        fail(ErrorKind::Truncation, "term of " + std::to_string(term.samples.size()) +
                                        " samples exceeds target of " + std::to_string(target));
    }
    if (context) {
        require(context->audio != nullptr, ErrorKind::Input, "padding context has no audio");
        require(context->audio->sample_rate == term.sample_rate, ErrorKind::Input,
                "padding context sample rate differs from term");
    }

    const std::size_t left = (target - term.samples.size()) / 2;
    PaddedClip out;
    out.clip.sample_rate = term.sample_rate;
    out.clip.samples.assign(target, 0.0F);
    out.valid = {left, left + term.samples.size()};

    if (context) {
        const auto& ctx = context->audio->samples;
        // Output index i maps to context index term_offset - left + i.
        const auto shift = static_cast<std::ptrdiff_t>(context->term_offset) -
                           static_cast<std::ptrdiff_t>(left);
        for (std::size_t i = 0; i < target; ++i) {
            if (out.valid.contains(i)) {
                continue;
            }
            const std::ptrdiff_t src = shift + static_cast<std::ptrdiff_t>(i);
            if (src >= 0 && static_cast<std::size_t>(src) < ctx.size()) {
                out.clip.samples[i] = ctx[static_cast<std::size_t>(src)];
            }
        }
    }
    std::copy(term.samples.begin(), term.samples.end(),
              out.clip.samples.begin() + static_cast<std::ptrdiff_t>(left));
    return out;
}

} // namespace tokstd
