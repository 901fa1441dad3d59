#include "tokstd/encoder.hpp"

#include "tokstd/error.hpp"
#include "tokstd/rng.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <fstream>

namespace tokstd {

namespace {

constexpr double kRmsEpsilon = 1e-6;
constexpr double kDegenerateNorm = 1e-12;

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

/// out = W x (+ b), W row-major rows x cols at `w`.
template <typename T>
void matvec(const T* w, const T* b, std::span<const T> x, std::size_t rows, std::span<T> out) {
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* wr = w + r * cols;
        T acc = b ? b[r] : T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            acc += wr[c] * x[c];
        }
        out[r] = acc;
    }
}

/// dx += W^T dy; dW += dy x^T; db += dy.
template <typename T>
void matvec_backward(const T* w, T* dw, T* db, std::span<const T> x, std::span<const T> dy,
                     std::span<T> dx) {
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < dy.size(); ++r) {
        const T g = dy[r];
        if (db) {
            db[r] += g;
        }
        const T* wr = w + r * cols;
        T* dwr = dw + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            dwr[c] += g * x[c];
            if (!dx.empty()) {
                dx[c] += g * wr[c];
            }
        }
    }
}

template <typename T>
void rms_normalise(const Matrix<T>& in, Matrix<T>& out, std::vector<T>& rms) {
    out = Matrix<T>(in.rows(), in.cols());
    rms.assign(in.rows(), T(0));
    for (std::size_t t = 0; t < in.rows(); ++t) {
        const auto row = in.row(t);
        T ms = 0;
        for (T v : row) {
            ms += v * v;
        }
        ms /= static_cast<T>(in.cols());
        const T r = std::sqrt(ms + static_cast<T>(kRmsEpsilon));
        rms[t] = r;
        auto o = out.row(t);
        for (std::size_t j = 0; j < row.size(); ++j) {
            o[j] = row[j] / r;
        }
    }
}

/// Given d/d(normed), accumulate d/d(input) for x_hat = u / rms(u).
template <typename T>
void rms_backward(const Matrix<T>& normed, const std::vector<T>& rms, const Matrix<T>& d_normed,
                  Matrix<T>& d_input) {
    const T h = static_cast<T>(normed.cols());
    for (std::size_t t = 0; t < normed.rows(); ++t) {
        const auto xh = normed.row(t);
        const auto g = d_normed.row(t);
        T proj = 0;
        for (std::size_t j = 0; j < xh.size(); ++j) {
            proj += g[j] * xh[j];
        }
        proj /= h;
        auto out = d_input.row(t);
        for (std::size_t j = 0; j < xh.size(); ++j) {
            out[j] += (g[j] - xh[j] * proj) / rms[t];
        }
    }
}

} // namespace

EncoderLayout::EncoderLayout(const EncoderShape& shape) {
    const std::size_t h = shape.hidden;
    std::size_t at = 0;
    auto take = [&at](std::size_t n) {
        const std::size_t o = at;
        at += n;
        return o;
    };
    stem_w = take(h * shape.input_dim);
    stem_b = take(h);
    layers.resize(shape.layers);
    for (auto& layer : layers) {
        for (auto& dir : layer) {
            dir.in_w = take(h * h);
            dir.in_b = take(h);
            dir.decay = take(h);
            dir.gate_w = take(h * h);
            dir.gate_b = take(h);
            dir.out_w = take(h * h);
        }
    }
    final_w = take(shape.output_dim * h);
    total = at;
}

template <typename T>
EncoderParams<T> init_encoder(const EncoderShape& shape, std::uint64_t seed) {
    require(shape.input_dim > 0 && shape.hidden > 0 && shape.output_dim > 0, ErrorKind::Parameter,
            "encoder dimensions must be positive");
    const EncoderLayout layout(shape);
    EncoderParams<T> p{shape, std::vector<T>(layout.total, T(0))};
    Rng rng(derive_seed(seed, {0x656e63ULL}));

    auto fill_uniform = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < count; ++i) {
            p.values[offset + i] = static_cast<T>(rng.uniform(-bound, bound));
        }
    };
    const std::size_t h = shape.hidden;
    fill_uniform(layout.stem_w, h * shape.input_dim, shape.input_dim);
    for (const auto& layer : layout.layers) {
        for (const auto& dir : layer) {
            fill_uniform(dir.in_w, h * h, h);
            fill_uniform(dir.gate_w, h * h, h);
            fill_uniform(dir.out_w, h * h, h);
            for (std::size_t j = 0; j < h; ++j) {
                const double a = rng.uniform(0.8, 0.99);
                p.values[dir.decay + j] = static_cast<T>(std::log(a / (1.0 - a)));
            }
        }
    }
    fill_uniform(layout.final_w, shape.output_dim * h, h);
    return p;
}

template <typename T>
EncoderParams<T> swap_directions(const EncoderParams<T>& params) {
    const EncoderLayout layout(params.shape);
    EncoderParams<T> out = params;
    const std::size_t block = layout.layers.empty()
                                  ? 0
                                  : layout.layers[0][1].in_w - layout.layers[0][0].in_w;
    for (const auto& layer : layout.layers) {
        std::copy_n(params.values.begin() + static_cast<std::ptrdiff_t>(layer[1].in_w), block,
                    out.values.begin() + static_cast<std::ptrdiff_t>(layer[0].in_w));
        std::copy_n(params.values.begin() + static_cast<std::ptrdiff_t>(layer[0].in_w), block,
                    out.values.begin() + static_cast<std::ptrdiff_t>(layer[1].in_w));
    }
    return out;
}

template <typename T>
EmbeddingSequence<T> encode(const Matrix<T>& x, IndexRange valid, const EncoderParams<T>& params,
                            EncoderCache<T>* cache) {
    const EncoderShape& shape = params.shape;
    const EncoderLayout layout(shape);
    require(params.values.size() == layout.total, ErrorKind::Shape, "parameter count mismatch");
    require(x.cols() == shape.input_dim, ErrorKind::Shape,
            "input width " + std::to_string(x.cols()) + " != encoder input " +
                std::to_string(shape.input_dim));
    require(valid.end <= x.rows(), ErrorKind::Input, "valid range exceeds input length");

    const std::size_t len = x.rows();
    const std::size_t h = shape.hidden;
    const T* w = params.values.data();

    EncoderCache<T> local;
    EncoderCache<T>& c = cache ? *cache : local;
    c = EncoderCache<T>{};
    c.input = x;
    c.residual.resize(shape.layers + 1);
    c.rms.resize(shape.layers + 1);
    c.normed.resize(shape.layers + 1);
    c.directions.resize(shape.layers);

    Matrix<T>& stem = c.residual[0];
    stem = Matrix<T>(len, h);
    for (std::size_t t = 0; t < len; ++t) {
        matvec<T>(w + layout.stem_w, w + layout.stem_b, x.row(t), h, stem.row(t));
    }

    for (std::size_t l = 0; l < shape.layers; ++l) {
        rms_normalise(c.residual[l], c.normed[l], c.rms[l]);
        const Matrix<T>& xn = c.normed[l];
        std::array<Matrix<T>, 2> outputs;
        for (std::size_t d = 0; d < 2; ++d) {
            const auto& blk = layout.layers[l][d];
            auto& dir = c.directions[l][d];
            dir.value = Matrix<T>(len, h);
            dir.state = Matrix<T>(len, h);
            dir.gate = Matrix<T>(len, h);
            for (std::size_t t = 0; t < len; ++t) {
                matvec<T>(w + blk.in_w, w + blk.in_b, xn.row(t), h, dir.value.row(t));
                matvec<T>(w + blk.gate_w, w + blk.gate_b, xn.row(t), h, dir.gate.row(t));
                for (T& g : dir.gate.row(t)) {
                    g = sigmoid(g);
                }
            }
            std::vector<T> a(h);
            for (std::size_t j = 0; j < h; ++j) {
                a[j] = sigmoid(w[blk.decay + j]);
            }
            for (std::size_t step = 0; step < len; ++step) {
                const std::size_t t = d == 0 ? step : len - 1 - step;
                const auto v = dir.value.row(t);
                auto st = dir.state.row(t);
                const bool first = step == 0;
                const std::size_t prev = d == 0 ? t - 1 : t + 1;
                for (std::size_t j = 0; j < h; ++j) {
                    const T carried = first ? T(0) : dir.state(prev, j);
                    st[j] = a[j] * carried + (T(1) - a[j]) * v[j];
                }
            }
            Matrix<T>& y = outputs[d];
            y = Matrix<T>(len, h);
            std::vector<T> gated(h);
            for (std::size_t t = 0; t < len; ++t) {
                for (std::size_t j = 0; j < h; ++j) {
                    gated[j] = dir.state(t, j) * dir.gate(t, j);
                }
                matvec<T>(w + blk.out_w, nullptr, std::span<const T>(gated), h, y.row(t));
            }
        }
        Matrix<T>& next = c.residual[l + 1];
        next = c.residual[l];
        for (std::size_t i = 0; i < next.size(); ++i) {
            // Sum the two directions first so swapping them is exact.
            next.storage()[i] += outputs[0].storage()[i] + outputs[1].storage()[i];
        }
    }

    const std::size_t last = shape.layers;
    rms_normalise(c.residual[last], c.normed[last], c.rms[last]);
    c.projected = Matrix<T>(len, shape.output_dim);
    c.output = Matrix<T>(len, shape.output_dim);
    c.norms.assign(len, T(0));
    c.degenerate.assign(len, 0);
    for (std::size_t t = 0; t < len; ++t) {
        matvec<T>(w + layout.final_w, nullptr, c.normed[last].row(t), shape.output_dim,
                  c.projected.row(t));
        const auto e = c.projected.row(t);
        T sq = 0;
        for (T v : e) {
            sq += v * v;
        }
        const T norm = std::sqrt(sq);
        c.norms[t] = norm;
        auto z = c.output.row(t);
        if (!(norm > static_cast<T>(kDegenerateNorm))) {
            std::fill(z.begin(), z.end(), T(0));
            z[0] = T(1);
            c.degenerate[t] = 1;
        } else {
            for (std::size_t j = 0; j < e.size(); ++j) {
                z[j] = e[j] / norm;
            }
        }
    }
    c.filled = true;

    EmbeddingSequence<T> out{c.output, valid, c.degenerate};
    return out;
}

template <typename T>
EmbeddingSequence<T> encode(const FeatureSequence& features, const EncoderParams<T>& params,
                            EncoderCache<T>* cache) {
    return encode(features.frames.template cast<T>(), features.valid, params, cache);
}

template <typename T>
EncoderGradients<T> encode_backward(const EncoderCache<T>& c, const EncoderParams<T>& params,
                                    const Matrix<T>& upstream) {
    require(c.filled, ErrorKind::State, "encode_backward called without a forward cache");
    const EncoderShape& shape = params.shape;
    const EncoderLayout layout(shape);
    require(upstream.rows() == c.output.rows() && upstream.cols() == c.output.cols(), ErrorKind::Shape,
            "upstream gradient shape does not match encoder output");

    const std::size_t len = c.output.rows();
    const std::size_t h = shape.hidden;
    const T* w = params.values.data();
    EncoderGradients<T> g{std::vector<T>(layout.total, T(0)), Matrix<T>(len, shape.input_dim, T(0))};
    T* gw = g.params.data();

    // L2 normalisation: dz -> de = (dz - z (z . dz)) / ||e||.
    Matrix<T> d_proj(len, shape.output_dim, T(0));
    for (std::size_t t = 0; t < len; ++t) {
        if (c.degenerate[t]) {
            continue;
        }
        const auto z = c.output.row(t);
        const auto dz = upstream.row(t);
        T zdz = 0;
        for (std::size_t j = 0; j < z.size(); ++j) {
            zdz += z[j] * dz[j];
        }
        auto de = d_proj.row(t);
        for (std::size_t j = 0; j < z.size(); ++j) {
            de[j] = (dz[j] - z[j] * zdz) / c.norms[t];
        }
    }

    const std::size_t last = shape.layers;
    Matrix<T> d_normed(len, h, T(0));
    for (std::size_t t = 0; t < len; ++t) {
        matvec_backward<T>(w + layout.final_w, gw + layout.final_w, nullptr, c.normed[last].row(t),
                           d_proj.row(t), d_normed.row(t));
    }
    Matrix<T> d_stream(len, h, T(0));
    rms_backward(c.normed[last], c.rms[last], d_normed, d_stream);

    for (std::size_t l = shape.layers; l-- > 0;) {
        // d_stream holds d/d(residual[l+1]); the skip path passes it through.
        Matrix<T> d_xn(len, h, T(0));
        for (std::size_t d = 0; d < 2; ++d) {
            const auto& blk = layout.layers[l][d];
            const auto& dir = c.directions[l][d];
            std::vector<T> a(h);
            for (std::size_t j = 0; j < h; ++j) {
                a[j] = sigmoid(w[blk.decay + j]);
            }

            Matrix<T> d_state(len, h, T(0));
            std::vector<T> gated(h);
            std::vector<T> d_gated(h);
            std::vector<T> d_gate_pre(h);
            for (std::size_t t = 0; t < len; ++t) {
                for (std::size_t j = 0; j < h; ++j) {
                    gated[j] = dir.state(t, j) * dir.gate(t, j);
                }
                std::fill(d_gated.begin(), d_gated.end(), T(0));
                matvec_backward<T>(w + blk.out_w, gw + blk.out_w, nullptr, std::span<const T>(gated),
                                   d_stream.row(t), std::span<T>(d_gated));
                for (std::size_t j = 0; j < h; ++j) {
                    const T gv = dir.gate(t, j);
                    d_state(t, j) = d_gated[j] * gv;
                    d_gate_pre[j] = d_gated[j] * dir.state(t, j) * gv * (T(1) - gv);
                }
                matvec_backward<T>(w + blk.gate_w, gw + blk.gate_w, gw + blk.gate_b, c.normed[l].row(t),
                                   std::span<const T>(d_gate_pre), d_xn.row(t));
            }

            // Reverse scan through h_t = a*h_prev + (1-a)*v_t.
            std::vector<T> carry(h, T(0));
            std::vector<T> d_a(h, T(0));
            std::vector<T> d_value(h);
            for (std::size_t step = 0; step < len; ++step) {
                const std::size_t t = d == 0 ? len - 1 - step : step;
                const bool has_prev = d == 0 ? t > 0 : t + 1 < len;
                const std::size_t prev = d == 0 ? t - 1 : t + 1;
                for (std::size_t j = 0; j < h; ++j) {
                    const T total = d_state(t, j) + a[j] * carry[j];
                    const T h_prev = has_prev ? dir.state(prev, j) : T(0);
                    d_a[j] += total * (h_prev - dir.value(t, j));
                    d_value[j] = total * (T(1) - a[j]);
                    carry[j] = total;
                }
                matvec_backward<T>(w + blk.in_w, gw + blk.in_w, gw + blk.in_b, c.normed[l].row(t),
                                   std::span<const T>(d_value), d_xn.row(t));
            }
            for (std::size_t j = 0; j < h; ++j) {
                gw[blk.decay + j] += d_a[j] * a[j] * (T(1) - a[j]);
            }
        }
        rms_backward(c.normed[l], c.rms[l], d_xn, d_stream);
    }

    for (std::size_t t = 0; t < len; ++t) {
        matvec_backward<T>(w + layout.stem_w, gw + layout.stem_w, gw + layout.stem_b, c.input.row(t),
                           d_stream.row(t), g.input.row(t));
    }
    return g;
}

void save_encoder(const std::filesystem::path& base, const EncoderParams<double>& params,
                  const CheckpointInfo& info) {
    static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
    const std::filesystem::path blob = base.string() + ".bin";
    const std::filesystem::path manifest = base.string() + ".json";
    std::vector<float> data(params.values.begin(), params.values.end());
    {
        std::ofstream out(blob, std::ios::binary);
        require(out.good(), ErrorKind::Io, "cannot write " + blob.string());
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    nlohmann::json j = {
        {"kind", "tokstd.encoder"},
        {"dtype", "f32le"},
        {"step", info.step},
        {"param_count", params.values.size()},
        {"shape",
         {{"input_dim", params.shape.input_dim},
          {"hidden", params.shape.hidden},
          {"output_dim", params.shape.output_dim},
          {"layers", params.shape.layers}}},
        {"hyperparameters", info.hyperparameters},
        {"blob", blob.filename().string()},
    };
    std::ofstream out(manifest);
    require(out.good(), ErrorKind::Io, "cannot write " + manifest.string());
    out << j.dump(2) << '\n';
}

EncoderParams<double> load_encoder(const std::filesystem::path& base, CheckpointInfo* info) {
    const std::filesystem::path manifest = base.string() + ".json";
    std::ifstream in(manifest);
    require(in.good(), ErrorKind::Io, "cannot open " + manifest.string());
    EncoderParams<double> params;
    std::size_t count = 0;
    std::filesystem::path blob;
    try {
        nlohmann::json j;
        in >> j;
        require(j.at("kind").get<std::string>() == "tokstd.encoder", ErrorKind::Format,
                manifest.string() + ": not an encoder checkpoint");
        const auto& s = j.at("shape");
        params.shape = {s.at("input_dim").get<std::size_t>(), s.at("hidden").get<std::size_t>(),
                        s.at("output_dim").get<std::size_t>(), s.at("layers").get<std::size_t>()};
        count = j.at("param_count").get<std::size_t>();
        blob = manifest.parent_path() / j.at("blob").get<std::string>();
        if (info) {
            info->step = j.at("step").get<std::uint64_t>();
            info->hyperparameters = j.value("hyperparameters", std::map<std::string, double>{});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, manifest.string() + ": " + e.what());
    }
    require(EncoderLayout(params.shape).total == count, ErrorKind::Format,
            manifest.string() + ": parameter count does not match shape");

    std::ifstream bin(blob, std::ios::binary);
    require(bin.good(), ErrorKind::Io, "cannot open " + blob.string());
    std::vector<float> data(count);
    bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(float)));
    require(static_cast<std::size_t>(bin.gcount()) == count * sizeof(float), ErrorKind::Format,
            blob.string() + ": truncated parameter blob");
    params.values.assign(data.begin(), data.end());
    return params;
}

template EncoderParams<float> init_encoder<float>(const EncoderShape&, std::uint64_t);
template EncoderParams<double> init_encoder<double>(const EncoderShape&, std::uint64_t);
template EncoderParams<float> swap_directions<float>(const EncoderParams<float>&);
template EncoderParams<double> swap_directions<double>(const EncoderParams<double>&);
template EmbeddingSequence<float> encode<float>(const Matrix<float>&, IndexRange, const EncoderParams<float>&,
                                                EncoderCache<float>*);
template EmbeddingSequence<double> encode<double>(const Matrix<double>&, IndexRange,
                                                  const EncoderParams<double>&, EncoderCache<double>*);
template EmbeddingSequence<float> encode<float>(const FeatureSequence&, const EncoderParams<float>&,
                                                EncoderCache<float>*);
template EmbeddingSequence<double> encode<double>(const FeatureSequence&, const EncoderParams<double>&,
                                                  EncoderCache<double>*);
template EncoderGradients<float> encode_backward<float>(const EncoderCache<float>&,
                                                        const EncoderParams<float>&, const Matrix<float>&);
template EncoderGradients<double> encode_backward<double>(const EncoderCache<double>&,
                                                          const EncoderParams<double>&,
                                                          const Matrix<double>&);

} // namespace tokstd
