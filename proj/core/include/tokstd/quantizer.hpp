#pragma once

#include "tokstd/alignment.hpp"
#include "tokstd/encoder.hpp"
#include "tokstd/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tokstd {

template <typename T>
struct Codebook {
    Matrix<T> codewords;                // K x d, not necessarily unit norm
    std::vector<std::uint64_t> usage;   // frames assigned to each codeword

    std::size_t size() const noexcept { return codewords.rows(); }
    std::size_t dim() const noexcept { return codewords.cols(); }
    std::uint64_t total_usage() const noexcept;

    template <typename U>
    Codebook<U> cast() const {
        return {codewords.template cast<U>(), usage};
    }
};

/// Random unit codewords.
template <typename T>
Codebook<T> init_codebook_random(std::size_t size, std::size_t dim, std::uint64_t seed);

/// Spherical k-means over the given embeddings (rows), seeded with distinct
/// random rows. Falls back to random unit vectors for unfilled clusters.
template <typename T>
Codebook<T> init_codebook_kmeans(const Matrix<T>& embeddings, std::size_t size, std::uint64_t seed,
                                 int iterations = 10);

struct TokenSequence {
    std::vector<std::uint32_t> tokens;
    std::string segment_id;
    IndexRange frames;

    std::size_t size() const noexcept { return tokens.size(); }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Cosine scores z . c_k / ||c_k||. Throws ErrorKind::DegenerateCodeword for
/// a zero-norm codeword.
template <typename T>
std::vector<T> codeword_similarities(std::span<const T> z, const Codebook<T>& codebook);

/// Index of the highest cosine score per row; ties go to the lowest index.
/// Leaves usage counts untouched.
template <typename T>
std::vector<std::uint32_t> nearest_codewords(const Matrix<T>& z, const Codebook<T>& codebook);

/// nearest_codewords over every frame of z, recording usage.
template <typename T>
TokenSequence quantize(const EmbeddingSequence<T>& z, Codebook<T>& codebook);

/// Tokens for the valid frames only, without recording usage.
template <typename T>
TokenSequence tokenize(const EmbeddingSequence<T>& z, const Codebook<T>& codebook);

/// Row-stochastic balanced assignment. probs = N * P where P is the entropic
/// transport plan with uniform marginals 1/N and 1/K.
struct AssignmentPlan {
    Matrix<double> probs;
    bool converged = false;
    double violation = 0.0; // max(|row sum - 1|, |col sum - N/K| / (N/K))
    int iterations = 0;
};

struct SinkhornOptions {
    double epsilon = 0.05;
    int max_iter = 100;
    double tol = 1e-6;
};

/// Entropic OT maximising sum P.S. Scaling iterations run on a kernel
/// exp((S - rowmax)/eps) with the scalings folded back into log potentials
/// whenever they leave a safe range, which keeps the arithmetic equivalent to
/// the log-domain updates without per-entry exp/log in the loop.
/// Throws ErrorKind::Input for non-finite scores, ErrorKind::Parameter for
/// eps <= 0 or an empty matrix. On non-convergence returns the plan with the
/// smallest violation seen and converged = false.
AssignmentPlan sinkhorn_balance(const Matrix<double>& scores, const SinkhornOptions& options = {});

/// Cosine score matrix for all rows of z against the codebook.
template <typename T>
Matrix<double> similarity_matrix(const Matrix<T>& z, const Codebook<T>& codebook);

template <typename T>
struct RobustLoss {
    T loss = 0;
    Matrix<T> grad_a;
    Matrix<T> grad_b;
    Matrix<T> grad_codewords;
};

/// Symmetric soft-target cross entropy over aligned frame pairs:
///   mean over (t, u) of  -sum_k P_a(t,k) log softmax_k(b_u . c_k / tau')
///                      + -sum_k P_b(u,k) log softmax_k(a_t . c_k / tau')
/// `targets_a`/`targets_b` hold one plan row per frame of a/b and are treated
/// as constants. Throws ErrorKind::Parameter for tau' <= 0 and
/// ErrorKind::EmptyInput for an empty pair list.
template <typename T>
RobustLoss<T> robust_consistency_loss(const Matrix<T>& a, const Matrix<T>& b,
                                      std::span<const FramePair> pairs, const Matrix<T>& targets_a,
                                      const Matrix<T>& targets_b, const Matrix<T>& codewords,
                                      T tau_prime);

/// -(1/log K) sum p_k log p_k over usage frequencies. Throws
/// ErrorKind::UndefinedEntropy when usage sums to zero.
double normalized_entropy(std::span<const std::uint64_t> usage);

template <typename T>
double normalized_entropy(const Codebook<T>& codebook) {
    return normalized_entropy(codebook.usage);
}

/// `<base>.json` (K, d, step) plus `<base>.f32` codewords; usage goes to the
/// manifest as a histogram.
void save_codebook(const std::filesystem::path& base, const Codebook<double>& codebook,
                   std::uint64_t step);
Codebook<double> load_codebook(const std::filesystem::path& base, std::uint64_t* step = nullptr);

/// Usage histogram with entropy, as JSON text.
std::string usage_report_json(std::span<const std::uint64_t> usage);

} // namespace tokstd
