#pragma once

#include "tokstd/features.hpp"
#include "tokstd/matrix.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace tokstd {

struct EncoderShape {
    std::size_t input_dim = 48;
    std::size_t hidden = 64;
    std::size_t output_dim = 32;
    std::size_t layers = 2;

    friend bool operator==(const EncoderShape&, const EncoderShape&) = default;
};

/// Offsets of each parameter block inside the flat parameter vector.
///
/// Per layer and direction the block holds an input projection (in_w, in_b),
/// a decay logit vector (a = sigmoid(logit)), a gate projection
/// (gate_w, gate_b) and an output projection (out_w). Matrices are row-major
/// (out x in).
struct EncoderLayout {
    struct Direction {
        std::size_t in_w, in_b, decay, gate_w, gate_b, out_w;
    };

    std::size_t stem_w = 0;
    std::size_t stem_b = 0;
    std::vector<std::array<Direction, 2>> layers; // [layer][0=forward, 1=backward]
    std::size_t final_w = 0;
    std::size_t total = 0;

    explicit EncoderLayout(const EncoderShape& shape);
};

template <typename T>
struct EncoderParams {
    EncoderShape shape;
    std::vector<T> values;

    std::size_t size() const noexcept { return values.size(); }

    template <typename U>
    EncoderParams<U> cast() const {
        return {shape, std::vector<U>(values.begin(), values.end())};
    }
};

/// Uniform(+-1/sqrt(fan_in)) projections, zero biases, decay in [0.8, 0.99].
template <typename T>
EncoderParams<T> init_encoder(const EncoderShape& shape, std::uint64_t seed);

/// Exchanges forward and backward direction blocks in every layer.
template <typename T>
EncoderParams<T> swap_directions(const EncoderParams<T>& params);

/// Unit-norm embeddings. Frames whose pre-normalisation vector vanishes get
/// the first basis vector and are flagged in `degenerate`.
template <typename T>
struct EmbeddingSequence {
    Matrix<T> embeddings; // T x d
    IndexRange valid;
    std::vector<std::uint8_t> degenerate;

    std::size_t length() const noexcept { return embeddings.rows(); }
};

/// Activations retained by encode() for encode_backward().
template <typename T>
struct EncoderCache {
    bool filled = false;
    Matrix<T> input;
    std::vector<Matrix<T>> residual;  // L+1 entries: stream entering each layer, then final
    std::vector<std::vector<T>> rms;  // per layer + final: per-frame RMS
    std::vector<Matrix<T>> normed;    // per layer + final: RMS-normalised stream
    struct Direction {
        Matrix<T> state; // h
        Matrix<T> gate;  // sigmoid(gate pre-activation)
        Matrix<T> value; // projected input v
    };
    std::vector<std::array<Direction, 2>> directions;
    Matrix<T> projected; // pre-normalisation output e
    std::vector<T> norms;
    Matrix<T> output;
    std::vector<std::uint8_t> degenerate;
};

template <typename T>
struct EncoderGradients {
    std::vector<T> params; // same layout as EncoderParams::values
    Matrix<T> input;       // d loss / d x
};

/// Stem projection, L pre-norm residual blocks of bidirectional gated linear
/// recurrences (h_t = a*h_{t-1} + (1-a)*v_t, mirrored backward, directions
/// summed), final RMS norm, projection to d and row-wise L2 normalisation.
/// Throws ErrorKind::Shape when x.cols() != input_dim.
template <typename T>
EmbeddingSequence<T> encode(const Matrix<T>& x, IndexRange valid, const EncoderParams<T>& params,
                            EncoderCache<T>* cache = nullptr);

template <typename T>
EmbeddingSequence<T> encode(const FeatureSequence& features, const EncoderParams<T>& params,
                            EncoderCache<T>* cache = nullptr);

/// Reverse-mode gradients of sum(upstream .* output) through the cached
/// forward pass. Throws ErrorKind::State if the cache was never filled.
template <typename T>
EncoderGradients<T> encode_backward(const EncoderCache<T>& cache, const EncoderParams<T>& params,
                                    const Matrix<T>& upstream);

struct CheckpointInfo {
    std::uint64_t step = 0;
    std::map<std::string, double> hyperparameters;
};

/// `<base>.json` manifest plus `<base>.bin` little-endian f32 parameters.
void save_encoder(const std::filesystem::path& base, const EncoderParams<double>& params,
                  const CheckpointInfo& info);
EncoderParams<double> load_encoder(const std::filesystem::path& base, CheckpointInfo* info = nullptr);

} // namespace tokstd
