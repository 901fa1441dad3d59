#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace tokstd::oracle {

namespace {

double euclid(std::span<const float> x, std::span<const float> y) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double d = static_cast<double>(x[k]) - static_cast<double>(y[k]);
        s += d * d;
    }
    return std::sqrt(s);
}

void walk(const Matrix<float>& a, IndexRange va, const Matrix<float>& b, IndexRange vb, std::size_t i, std::size_t j,
          double so_far, double& best) {
    const double here = so_far + euclid(a.row(va.begin + i), b.row(vb.begin + j));
    const std::size_t n = va.size();
    const std::size_t m = vb.size();
    if (i + 1 == n && j + 1 == m) {
        best = std::min(best, here);
        return;
    }
    if (i + 1 < n) {
        walk(a, va, b, vb, i + 1, j, here, best);
    }
    if (j + 1 < m) {
        walk(a, va, b, vb, i, j + 1, here, best);
    }
    if (i + 1 < n && j + 1 < m) {
        walk(a, va, b, vb, i + 1, j + 1, here, best);
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> affine(const std::vector<double>& w, std::size_t w_off, const std::vector<double>* b,
                           std::size_t b_off, std::span<const double> x, std::size_t rows) {
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = b ? (*b)[b_off + r] : 0.0;
        for (std::size_t c = 0; c < x.size(); ++c) {
            acc += w[w_off + r * x.size() + c] * x[c];
        }
        out[r] = acc;
    }
    return out;
}

std::vector<double> rms_norm(std::span<const double> x) {
    double ms = 0.0;
    for (double v : x) {
        ms += v * v;
    }
    const double r = std::sqrt(ms / static_cast<double>(x.size()) + 1e-6);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] / r;
    }
    return out;
}

} // namespace

double dtw_cost_bruteforce(const Matrix<float>& a, IndexRange va, const Matrix<float>& b, IndexRange vb) {
    double best = std::numeric_limits<double>::infinity();
    walk(a, va, b, vb, 0, 0, 0.0, best);
    return best;
}

std::size_t levenshtein_recursive(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    if (a.empty()) {
        return b.size();
    }
    if (b.empty()) {
        return a.size();
    }
    const std::size_t cost = a.back() == b.back() ? 0 : 1;
    const auto a1 = a.first(a.size() - 1);
    const auto b1 = b.first(b.size() - 1);
    return std::min({levenshtein_recursive(a1, b) + 1, levenshtein_recursive(a, b1) + 1,
                     levenshtein_recursive(a1, b1) + cost});
}

Matrix<double> sinkhorn_log_dense(const Matrix<double>& scores, double epsilon, int iterations) {
    const std::size_t n = scores.rows();
    const std::size_t k = scores.cols();
    const double log_r = -std::log(static_cast<double>(n));
    const double log_c = -std::log(static_cast<double>(k));
    std::vector<double> f(n, 0.0);
    std::vector<double> g(k, 0.0);
    auto lse = [](const std::vector<double>& v) {
        const double m = *std::max_element(v.begin(), v.end());
        double s = 0.0;
        for (double x : v) {
            s += std::exp(x - m);
        }
        return m + std::log(s);
    };
    std::vector<double> buf;
    for (int it = 0; it < iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            buf.assign(k, 0.0);
            for (std::size_t j = 0; j < k; ++j) {
                buf[j] = scores(i, j) / epsilon + g[j];
            }
            f[i] = log_r - lse(buf);
        }
        for (std::size_t j = 0; j < k; ++j) {
            buf.assign(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                buf[i] = scores(i, j) / epsilon + f[i];
            }
            g[j] = log_c - lse(buf);
        }
    }
    Matrix<double> out(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            out(i, j) = static_cast<double>(n) * std::exp(scores(i, j) / epsilon + f[i] + g[j]);
        }
    }
    return out;
}

std::pair<std::vector<double>, std::vector<double>> marginals(const Matrix<double>& probs) {
    std::vector<double> rows(probs.rows(), 0.0);
    std::vector<double> cols(probs.cols(), 0.0);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        for (std::size_t j = 0; j < probs.cols(); ++j) {
            rows[i] += probs(i, j);
            cols[j] += probs(i, j);
        }
    }
    return {rows, cols};
}

Matrix<double> encoder_forward_reference(const Matrix<double>& x, const EncoderParams<double>& params) {
    const EncoderShape& s = params.shape;
    const EncoderLayout lay(s);
    const auto& w = params.values;
    const std::size_t len = x.rows();
    const std::size_t h = s.hidden;

    std::vector<std::vector<double>> u(len);
    for (std::size_t t = 0; t < len; ++t) {
        u[t] = affine(w, lay.stem_w, &w, lay.stem_b, x.row(t), h);
    }
    for (std::size_t l = 0; l < s.layers; ++l) {
        std::vector<std::vector<double>> xn(len);
        for (std::size_t t = 0; t < len; ++t) {
            xn[t] = rms_norm(u[t]);
        }
        std::vector<std::vector<double>> sum(len, std::vector<double>(h, 0.0));
        for (int dir = 0; dir < 2; ++dir) {
            const auto& p = lay.layers[l][static_cast<std::size_t>(dir)];
            std::vector<double> state(h, 0.0);
            for (std::size_t step = 0; step < len; ++step) {
                const std::size_t t = dir == 0 ? step : len - 1 - step;
                const auto v = affine(w, p.in_w, &w, p.in_b, xn[t], h);
                const auto gpre = affine(w, p.gate_w, &w, p.gate_b, xn[t], h);
                std::vector<double> gated(h);
                for (std::size_t j = 0; j < h; ++j) {
                    const double a = sigmoid(w[p.decay + j]);
                    state[j] = a * state[j] + (1.0 - a) * v[j];
                    gated[j] = state[j] * sigmoid(gpre[j]);
                }
                const auto y = affine(w, p.out_w, nullptr, 0, gated, h);
                for (std::size_t j = 0; j < h; ++j) {
                    sum[t][j] += y[j];
                }
            }
        }
        for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t j = 0; j < h; ++j) {
                u[t][j] += sum[t][j];
            }
        }
    }
    Matrix<double> out(len, s.output_dim);
    for (std::size_t t = 0; t < len; ++t) {
        const auto e = affine(w, lay.final_w, nullptr, 0, rms_norm(u[t]), s.output_dim);
        double sq = 0.0;
        for (double v : e) {
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        for (std::size_t j = 0; j < e.size(); ++j) {
            out(t, j) = norm > 1e-12 ? e[j] / norm : (j == 0 ? 1.0 : 0.0);
        }
    }
    return out;
}

std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> x, double step) {
    std::vector<double> probe(x.begin(), x.end());
    std::vector<double> grad(x.size());
    auto five_point = [&](std::size_t i, double h) {
        const double keep = probe[i];
        auto at = [&](double offset) {
            probe[i] = keep + offset;
            return f(probe);
        };
        const double d = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        probe[i] = keep;
        return d;
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double coarse = five_point(i, step);
        const double fine = five_point(i, 0.5 * step);
        grad[i] = (16.0 * fine - coarse) / 15.0;
    }
    return grad;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
    }
    return worst;
}

std::vector<std::pair<std::uint32_t, double>> tfidf_scan(const std::vector<std::vector<std::uint32_t>>& corpus,
                                                         std::span<const std::uint32_t> query, std::size_t vocab,
                                                         std::size_t k) {
    const double n = static_cast<double>(corpus.size());
    std::vector<double> idf(vocab);
    for (std::size_t t = 0; t < vocab; ++t) {
        std::size_t df = 0;
        for (const auto& doc : corpus) {
            df += std::find(doc.begin(), doc.end(), t) != doc.end() ? 1 : 0;
        }
        idf[t] = std::log((1.0 + n) / (1.0 + static_cast<double>(df))) + 1.0;
    }
    auto vec = [&](std::span<const std::uint32_t> doc) {
        std::map<std::uint32_t, double> w;
        for (auto t : doc) {
            w[t] += 1.0 / static_cast<double>(doc.size());
        }
        double sq = 0.0;
        for (auto& [t, v] : w) {
            v *= idf[t];
            sq += v * v;
        }
        for (auto& [t, v] : w) {
            v /= std::sqrt(sq);
        }
        return w;
    };
    const auto q = vec(query);
    std::vector<std::pair<std::uint32_t, double>> scored;
    for (std::size_t d = 0; d < corpus.size(); ++d) {
        double s = 0.0;
        for (const auto& [t, v] : vec(corpus[d])) {
            if (auto it = q.find(t); it != q.end()) {
                s += v * it->second;
            }
        }
        scored.emplace_back(static_cast<std::uint32_t>(d), s);
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    scored.resize(std::min(k, scored.size()));
    return scored;
}

std::vector<double> segment_starts(double duration, double l, double h) {
    std::vector<double> out;
    for (int i = 0;; ++i) {
        const double start = i * h;
        const double covered = std::min(l, duration - start);
        if (i > 0 && (covered < l / 2 - 1e-9 || start >= duration - 1e-9)) {
            break;
        }
        out.push_back(start);
        if (start + l >= duration - 1e-9 && covered < l) {
            break;
        }
    }
    return out;
}

double measured_snr_db(std::span<const float> speech, std::span<const float> mixed, double speech_scale,
                       IndexRange range) {
    double ps = 0.0;
    double pn = 0.0;
    for (std::size_t i = range.begin; i < range.end; ++i) {
        const double s = speech_scale * speech[i];
        const double r = static_cast<double>(mixed[i]) - s;
        ps += s * s;
        pn += r * r;
    }
    return 10.0 * std::log10(ps / pn);
}

} // namespace tokstd::oracle
