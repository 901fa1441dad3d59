#include "tokstd/quantizer.hpp"

#include "tokstd/error.hpp"
#include "tokstd/rng.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace tokstd {

namespace {

template <typename T>
T row_norm(std::span<const T> v) {
    T acc = 0;
    for (T x : v) {
        acc += x * x;
    }
    return std::sqrt(acc);
}

template <typename T>
std::vector<T> codeword_norms(const Codebook<T>& cb) {
    std::vector<T> norms(cb.size());
    for (std::size_t k = 0; k < cb.size(); ++k) {
        norms[k] = row_norm(cb.codewords.row(k));
        require(norms[k] > T(0) && std::isfinite(norms[k]), ErrorKind::DegenerateCodeword,
                "codeword " + std::to_string(k) + " has zero or non-finite norm");
    }
    return norms;
}

template <typename T>
void random_unit(Rng& rng, std::span<T> out) {
    double sq = 0.0;
    do {
        sq = 0.0;
        for (T& v : out) {
            const double x = rng.normal();
            v = static_cast<T>(x);
            sq += x * x;
        }
    } while (sq == 0.0);
    const double inv = 1.0 / std::sqrt(sq);
    for (T& v : out) {
        v = static_cast<T>(v * inv);
    }
}

} // namespace

template <typename T>
std::uint64_t Codebook<T>::total_usage() const noexcept {
    return std::accumulate(usage.begin(), usage.end(), std::uint64_t{0});
}

template <typename T>
Codebook<T> init_codebook_random(std::size_t size, std::size_t dim, std::uint64_t seed) {
    require(size >= 2, ErrorKind::Parameter, "codebook needs at least two codewords");
    require(dim >= 1, ErrorKind::Parameter, "codeword dimension must be positive");
    Codebook<T> cb{Matrix<T>(size, dim), std::vector<std::uint64_t>(size, 0)};
    Rng rng(derive_seed(seed, {0x636257ULL}));
    for (std::size_t k = 0; k < size; ++k) {
        random_unit(rng, cb.codewords.row(k));
    }
    return cb;
}

template <typename T>
Codebook<T> init_codebook_kmeans(const Matrix<T>& embeddings, std::size_t size, std::uint64_t seed,
                                 int iterations) {
    Codebook<T> cb = init_codebook_random<T>(size, embeddings.cols(), seed);
    const std::size_t n = embeddings.rows();
    if (n == 0) {
        return cb;
    }
    Rng rng(derive_seed(seed, {0x6b6d65616e73ULL}));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t k = 0; k < std::min(size, n); ++k) {
        const auto src = embeddings.row(order[k]);
        std::copy(src.begin(), src.end(), cb.codewords.row(k).begin());
    }
    for (int it = 0; it < iterations; ++it) {
        const auto assign = nearest_codewords(embeddings, cb);
        Matrix<T> sums(size, embeddings.cols(), T(0));
        std::vector<std::size_t> counts(size, 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto s = sums.row(assign[i]);
            const auto e = embeddings.row(i);
            for (std::size_t j = 0; j < s.size(); ++j) {
                s[j] += e[j];
            }
            ++counts[assign[i]];
        }
        for (std::size_t k = 0; k < size; ++k) {
            const T norm = row_norm<T>(sums.row(k));
            if (counts[k] == 0 || norm == T(0)) {
                continue;
            }
            auto c = cb.codewords.row(k);
            const auto s = sums.row(k);
            for (std::size_t j = 0; j < c.size(); ++j) {
                c[j] = s[j] / norm;
            }
        }
    }
    return cb;
}

template <typename T>
std::vector<T> codeword_similarities(std::span<const T> z, const Codebook<T>& codebook) {
    require(z.size() == codebook.dim(), ErrorKind::Shape, "embedding and codeword dims differ");
    const auto norms = codeword_norms(codebook);
    std::vector<T> scores(codebook.size());
    for (std::size_t k = 0; k < codebook.size(); ++k) {
        scores[k] = dot<T>(z, codebook.codewords.row(k)) / norms[k];
    }
    return scores;
}

template <typename T>
std::vector<std::uint32_t> nearest_codewords(const Matrix<T>& z, const Codebook<T>& codebook) {
    require(z.rows() == 0 || z.cols() == codebook.dim(), ErrorKind::Shape,
            "embedding and codeword dims differ");
    std::vector<std::uint32_t> out(z.rows());
    if (z.rows() == 0) {
        return out;
    }
    const auto norms = codeword_norms(codebook);
    for (std::size_t t = 0; t < z.rows(); ++t) {
        const auto row = z.row(t);
        std::uint32_t best = 0;
        T best_score = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < codebook.size(); ++k) {
            const T s = dot<T>(row, codebook.codewords.row(k)) / norms[k];
            if (s > best_score) {
                best_score = s;
                best = static_cast<std::uint32_t>(k);
            }
        }
        out[t] = best;
    }
    return out;
}

template <typename T>
TokenSequence quantize(const EmbeddingSequence<T>& z, Codebook<T>& codebook) {
    TokenSequence seq;
    seq.tokens = nearest_codewords(z.embeddings, codebook);
    seq.frames = {0, z.length()};
    if (codebook.usage.size() != codebook.size()) {
        codebook.usage.assign(codebook.size(), 0);
    }
    for (auto k : seq.tokens) {
        ++codebook.usage[k];
    }
    return seq;
}

template <typename T>
TokenSequence tokenize(const EmbeddingSequence<T>& z, const Codebook<T>& codebook) {
    const auto all = nearest_codewords(z.embeddings, codebook);
    TokenSequence seq;
    seq.frames = z.valid;
    seq.tokens.assign(all.begin() + static_cast<std::ptrdiff_t>(z.valid.begin),
                      all.begin() + static_cast<std::ptrdiff_t>(z.valid.end));
    return seq;
}

template <typename T>
Matrix<double> similarity_matrix(const Matrix<T>& z, const Codebook<T>& codebook) {
    require(z.rows() == 0 || z.cols() == codebook.dim(), ErrorKind::Shape,
            "embedding and codeword dims differ");
    const auto norms = codeword_norms(codebook);
    Matrix<double> s(z.rows(), codebook.size());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t k = 0; k < codebook.size(); ++k) {
            s(i, k) = static_cast<double>(dot<T>(z.row(i), codebook.codewords.row(k)) / norms[k]);
        }
    }
    return s;
}

AssignmentPlan sinkhorn_balance(const Matrix<double>& scores, const SinkhornOptions& options) {
    require(options.epsilon > 0.0, ErrorKind::Parameter, "sinkhorn epsilon must be positive");
    require(options.max_iter >= 1, ErrorKind::Parameter, "sinkhorn max_iter must be >= 1");
    const std::size_t n = scores.rows();
    const std::size_t k = scores.cols();
    require(n >= 1 && k >= 1, ErrorKind::Parameter, "score matrix is empty");
    for (double s : scores.storage()) {
        require(std::isfinite(s), ErrorKind::Input, "score matrix has non-finite entries");
    }

    const double eps = options.epsilon;
    const double row_mass = 1.0 / static_cast<double>(n);
    const double col_mass = 1.0 / static_cast<double>(k);
    const double col_target = static_cast<double>(n) / static_cast<double>(k);

    // Potentials alpha, beta (in score units) absorb the scalings u, v:
    // P_ij = u_i v_j exp((S_ij + alpha_i + beta_j) / eps).
    std::vector<double> alpha(n);
    std::vector<double> beta(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = scores.row(i);
        alpha[i] = -*std::max_element(row.begin(), row.end());
    }
    Matrix<double> kernel(n, k);
    auto rebuild_kernel = [&] {
        for (std::size_t i = 0; i < n; ++i) {
            const auto s = scores.row(i);
            auto kr = kernel.row(i);
            for (std::size_t j = 0; j < k; ++j) {
                kr[j] = std::exp((s[j] + alpha[i] + beta[j]) / eps);
            }
        }
    };
    rebuild_kernel();

    std::vector<double> u(n, 1.0);
    std::vector<double> v(k, 1.0);
    std::vector<double> kv(n);
    std::vector<double> ktu(k);

    constexpr double kAbsorbAbove = 1e100;
    constexpr double kAbsorbBelow = 1e-100;
    auto absorb = [&] {
        for (std::size_t i = 0; i < n; ++i) {
            alpha[i] += eps * std::log(u[i]);
            u[i] = 1.0;
        }
        for (std::size_t j = 0; j < k; ++j) {
            beta[j] += eps * std::log(v[j]);
            v[j] = 1.0;
        }
        rebuild_kernel();
    };
    auto needs_absorb = [&](const std::vector<double>& x) {
        for (double e : x) {
            if (!(e < kAbsorbAbove && e > kAbsorbBelow)) {
                return true;
            }
        }
        return false;
    };
    auto compute_kv = [&] {
        for (std::size_t i = 0; i < n; ++i) {
            const auto kr = kernel.row(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                acc += kr[j] * v[j];
            }
            kv[i] = acc;
        }
    };

    struct Snapshot {
        std::vector<double> alpha, beta, u, v;
        double violation = std::numeric_limits<double>::infinity();
    } best;

    AssignmentPlan plan;
    double col_violation = 0.0;
    for (int it = 1; it <= options.max_iter; ++it) {
        compute_kv();
        if (it > 1) {
            double violation = col_violation;
            for (std::size_t i = 0; i < n; ++i) {
                violation = std::max(violation, std::abs(static_cast<double>(n) * u[i] * kv[i] - 1.0));
            }
            if (violation < best.violation) {
                best = {alpha, beta, u, v, violation};
            }
            plan.iterations = it - 1;
            if (violation < options.tol) {
                plan.converged = true;
                break;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            u[i] = row_mass / kv[i];
        }
        if (needs_absorb(u)) {
            absorb();
            compute_kv();
            for (std::size_t i = 0; i < n; ++i) {
                u[i] = row_mass / kv[i];
            }
        }
        std::fill(ktu.begin(), ktu.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto kr = kernel.row(i);
            const double ui = u[i];
            for (std::size_t j = 0; j < k; ++j) {
                ktu[j] += kr[j] * ui;
            }
        }
        col_violation = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            v[j] = col_mass / ktu[j];
        }
        if (needs_absorb(v)) {
            absorb();
        }
        for (std::size_t j = 0; j < k; ++j) {
            col_violation = std::max(
                col_violation, std::abs(static_cast<double>(n) * v[j] * ktu[j] - col_target) / col_target);
        }
        plan.iterations = it;
    }
    if (!plan.converged && best.u.empty()) {
        best = {alpha, beta, u, v, std::numeric_limits<double>::infinity()};
    }

    plan.probs = Matrix<double>(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = scores.row(i);
        auto p = plan.probs.row(i);
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = static_cast<double>(n) * best.u[i] * best.v[j] *
                   std::exp((s[j] + best.alpha[i] + best.beta[j]) / eps);
        }
    }

    // Report the violation of the plan actually returned.
    double violation = 0.0;
    std::vector<double> col(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto p = plan.probs.row(i);
        double r = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            r += p[j];
            col[j] += p[j];
        }
        violation = std::max(violation, std::abs(r - 1.0));
    }
    for (std::size_t j = 0; j < k; ++j) {
        violation = std::max(violation, std::abs(col[j] - col_target) / col_target);
    }
    plan.violation = violation;
    for (double p : plan.probs.storage()) {
        if (!std::isfinite(p)) {
            plan.converged = false;
            break;
        }
    }
    return plan;
}

template <typename T>
RobustLoss<T> robust_consistency_loss(const Matrix<T>& a, const Matrix<T>& b,
                                      std::span<const FramePair> pairs, const Matrix<T>& targets_a,
                                      const Matrix<T>& targets_b, const Matrix<T>& codewords,
                                      T tau_prime) {
    require(tau_prime > T(0), ErrorKind::Parameter, "tau' must be positive");
    require(!pairs.empty(), ErrorKind::EmptyInput, "robust loss needs at least one pair");
    const std::size_t k = codewords.rows();
    const std::size_t d = codewords.cols();
    require(a.cols() == d && b.cols() == d, ErrorKind::Shape, "embedding and codeword dims differ");
    require(targets_a.rows() == a.rows() && targets_a.cols() == k && targets_b.rows() == b.rows() &&
                targets_b.cols() == k,
            ErrorKind::Shape, "target plan shape mismatch");

    RobustLoss<T> out{T(0), Matrix<T>(a.rows(), d, T(0)), Matrix<T>(b.rows(), d, T(0)),
                      Matrix<T>(k, d, T(0))};
    const T inv_tau = T(1) / tau_prime;
    const T weight = T(1) / static_cast<T>(pairs.size());
    std::vector<T> logits(k);
    std::vector<T> d_logits(k);

    // One direction: targets from `src` row, softmax over `pred` row.
    auto term = [&](std::span<const T> target, std::span<const T> pred, std::span<T> d_pred) {
        T max_logit = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            logits[c] = dot<T>(pred, codewords.row(c)) * inv_tau;
            max_logit = std::max(max_logit, logits[c]);
        }
        T sum_exp = 0;
        for (std::size_t c = 0; c < k; ++c) {
            sum_exp += std::exp(logits[c] - max_logit);
        }
        const T lse = max_logit + std::log(sum_exp);
        T mass = 0;
        T loss = 0;
        for (std::size_t c = 0; c < k; ++c) {
            loss -= target[c] * (logits[c] - lse);
            mass += target[c];
        }
        for (std::size_t c = 0; c < k; ++c) {
            const T q = std::exp(logits[c] - lse);
            d_logits[c] = weight * (q * mass - target[c]) * inv_tau;
        }
        for (std::size_t c = 0; c < k; ++c) {
            const auto cw = codewords.row(c);
            auto gc = out.grad_codewords.row(c);
            for (std::size_t j = 0; j < d; ++j) {
                d_pred[j] += d_logits[c] * cw[j];
                gc[j] += d_logits[c] * pred[j];
            }
        }
        return loss;
    };

    T total = 0;
    for (const auto& [t, u] : pairs) {
        require(t < a.rows() && u < b.rows(), ErrorKind::Input, "pair index out of range");
        total += term(targets_a.row(t), b.row(u), out.grad_b.row(u));
        total += term(targets_b.row(u), a.row(t), out.grad_a.row(t));
    }
    out.loss = total * weight;
    return out;
}

double normalized_entropy(std::span<const std::uint64_t> usage) {
    require(usage.size() >= 2, ErrorKind::Parameter, "entropy needs at least two codewords");
    const double total = static_cast<double>(std::accumulate(usage.begin(), usage.end(), std::uint64_t{0}));
    require(total > 0.0, ErrorKind::UndefinedEntropy, "codebook usage is empty");
    double h = 0.0;
    for (auto c : usage) {
        if (c == 0) {
            continue;
        }
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return std::clamp(h / std::log(static_cast<double>(usage.size())), 0.0, 1.0);
}

void save_codebook(const std::filesystem::path& base, const Codebook<double>& codebook,
                   std::uint64_t step) {
    static_assert(std::endian::native == std::endian::little, "codebooks are little-endian");
    const std::filesystem::path blob = base.string() + ".f32";
    const std::filesystem::path manifest = base.string() + ".json";
    const auto& src = codebook.codewords.storage();
    std::vector<float> data(src.begin(), src.end());
    {
        std::ofstream out(blob, std::ios::binary);
        require(out.good(), ErrorKind::Io, "cannot write " + blob.string());
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    nlohmann::json j = {{"kind", "tokstd.codebook"}, {"dtype", "f32le"},
                        {"K", codebook.size()},      {"d", codebook.dim()},
                        {"step", step},              {"usage", codebook.usage},
                        {"blob", blob.filename().string()}};
    std::ofstream out(manifest);
    require(out.good(), ErrorKind::Io, "cannot write " + manifest.string());
    out << j.dump(2) << '\n';
}

Codebook<double> load_codebook(const std::filesystem::path& base, std::uint64_t* step) {
    const std::filesystem::path manifest = base.string() + ".json";
    std::ifstream in(manifest);
    require(in.good(), ErrorKind::Io, "cannot open " + manifest.string());
    std::size_t k = 0;
    std::size_t d = 0;
    std::vector<std::uint64_t> usage;
    std::filesystem::path blob;
    try {
        nlohmann::json j;
        in >> j;
        require(j.at("kind").get<std::string>() == "tokstd.codebook", ErrorKind::Format,
                manifest.string() + ": not a codebook");
        k = j.at("K").get<std::size_t>();
        d = j.at("d").get<std::size_t>();
        usage = j.value("usage", std::vector<std::uint64_t>(k, 0));
        blob = manifest.parent_path() / j.at("blob").get<std::string>();
        if (step) {
            *step = j.value("step", std::uint64_t{0});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, manifest.string() + ": " + e.what());
    }
    require(k >= 2 && d >= 1 && usage.size() == k, ErrorKind::Format, manifest.string() + ": bad shape");
    std::ifstream bin(blob, std::ios::binary);
    require(bin.good(), ErrorKind::Io, "cannot open " + blob.string());
    std::vector<float> data(k * d);
    bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    require(static_cast<std::size_t>(bin.gcount()) == data.size() * sizeof(float), ErrorKind::Format,
            blob.string() + ": truncated codebook");
    return {Matrix<double>(k, d, std::vector<double>(data.begin(), data.end())), std::move(usage)};
}

std::string usage_report_json(std::span<const std::uint64_t> usage) {
    const std::uint64_t total = std::accumulate(usage.begin(), usage.end(), std::uint64_t{0});
    nlohmann::json j = {{"K", usage.size()},
                        {"total", total},
                        {"usage", std::vector<std::uint64_t>(usage.begin(), usage.end())}};
    j["normalized_entropy"] = total > 0 && usage.size() >= 2 ? nlohmann::json(normalized_entropy(usage))
                                                             : nlohmann::json(nullptr);
    return j.dump(2);
}

#define TOKSTD_INSTANTIATE(T)                                                                        \
    template struct Codebook<T>;                                                                     \
    template Codebook<T> init_codebook_random<T>(std::size_t, std::size_t, std::uint64_t);           \
    template Codebook<T> init_codebook_kmeans<T>(const Matrix<T>&, std::size_t, std::uint64_t, int); \
    template std::vector<T> codeword_similarities<T>(std::span<const T>, const Codebook<T>&);        \
    template std::vector<std::uint32_t> nearest_codewords<T>(const Matrix<T>&, const Codebook<T>&);  \
    template TokenSequence quantize<T>(const EmbeddingSequence<T>&, Codebook<T>&);                   \
    template TokenSequence tokenize<T>(const EmbeddingSequence<T>&, const Codebook<T>&);             \
    template Matrix<double> similarity_matrix<T>(const Matrix<T>&, const Codebook<T>&);              \
    template RobustLoss<T> robust_consistency_loss<T>(const Matrix<T>&, const Matrix<T>&,            \
                                                      std::span<const FramePair>, const Matrix<T>&,  \
                                                      const Matrix<T>&, const Matrix<T>&, T);

TOKSTD_INSTANTIATE(float)
TOKSTD_INSTANTIATE(double)
#undef TOKSTD_INSTANTIATE

} // namespace tokstd
