#pragma once

#include "tokstd/alignment.hpp"
#include "tokstd/augment.hpp"
#include "tokstd/encoder.hpp"
#include "tokstd/features.hpp"
#include "tokstd/quantizer.hpp"
#include "tokstd/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tokstd {

/// Where the soft targets of the robust consistency loss come from.
enum class TargetMode {
    OptimalTransport, // balanced Sinkhorn plan over the batch
    ArgmaxOneHot,     // hard nearest-codeword targets (collapse-prone ablation)
};

enum class CodebookInit { Random, KMeans };

struct TrainingConfig {
    double tau = 0.1;
    double tau_prime = 0.1;
    double lambda1 = 1.0;  // robust consistency weight
    double lambda2 = 10.0; // commitment weight
    std::size_t k_neg = 16;
    std::size_t batch_size = 8;
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;

    EncoderShape encoder{};
    std::size_t codebook_size = 64;
    CodebookInit codebook_init = CodebookInit::Random;
    TargetMode targets = TargetMode::OptimalTransport;
    SinkhornOptions sinkhorn{};
    bool one_to_one = false;

    std::size_t checkpoint_every = 0; // 0 disables periodic checkpoints

    void validate() const;
};

/// One utterance pair of the same term. `clean` holds X; `partner` holds the
/// distorted partner features; `path` aligns X with the clean partner.
struct PairItem {
    FeatureSequence clean;
    FeatureSequence partner;
    AlignmentPath path;
    std::uint32_t label = 0;
};

using PairBatch = std::vector<PairItem>;

template <typename T>
struct ContrastiveLoss {
    T loss = 0;
    Matrix<T> grad_anchors;
    Matrix<T> grad_positives;
    Matrix<T> grad_pool;
};

/// Mean over pairs (t, u) of
///   -log(exp(z_t.p_u/tau) / (exp(z_t.p_u/tau) + sum_k exp(z_t.n_k/tau)))
/// with n_k = pool rows negatives[pair][k]. An empty negative list gives a
/// zero term. Throws ErrorKind::Parameter for tau <= 0.
template <typename T>
ContrastiveLoss<T> contrastive_loss(const Matrix<T>& anchors, const Matrix<T>& positives,
                                    std::span<const FramePair> pairs, const Matrix<T>& pool,
                                    std::span<const std::vector<std::uint32_t>> negatives, T tau);

template <typename T>
struct CommitmentLoss {
    T loss = 0;
    Matrix<T> grad; // w.r.t. z only; the quantised side is a constant
};

/// -(1/|frames|) sum_t z_t . zhat_t over `frames`.
template <typename T>
CommitmentLoss<T> commitment_loss(const Matrix<T>& z, const Matrix<T>& zhat, IndexRange frames);

/// Frame of a batch item: which sequence (0 = clean, 1 = partner) and index.
struct FrameRef {
    std::uint32_t item = 0;
    std::uint8_t sequence = 0;
    std::uint32_t frame = 0;
};

struct ItemTargets {
    std::vector<FramePair> pairs;                     // padded coordinates
    Matrix<double> clean_plan;                        // rows per clean frame
    Matrix<double> partner_plan;
    std::vector<std::uint32_t> clean_codes;           // nearest codeword per frame
    std::vector<std::uint32_t> partner_codes;
    std::vector<std::vector<std::uint32_t>> negatives; // pool rows per pair
};

/// Everything in the loss that is held constant during differentiation.
struct BatchTargets {
    std::vector<FrameRef> pool; // valid frames of every item, both sequences
    std::vector<ItemTargets> items;
    bool sinkhorn_converged = true;
    double sinkhorn_violation = 0.0;
    std::vector<std::uint64_t> assignment_counts; // hard assignments this batch
};

template <typename T>
struct BatchForward {
    std::vector<EncoderCache<T>> clean_cache;
    std::vector<EncoderCache<T>> partner_cache;
    std::vector<EmbeddingSequence<T>> clean;
    std::vector<EmbeddingSequence<T>> partner;
};

template <typename T>
BatchForward<T> forward_batch(const PairBatch& batch, const EncoderParams<T>& params);

/// Builds plans (Sinkhorn or one-hot), nearest codewords and negative samples.
/// Negatives are drawn without replacement from valid frames of items with a
/// different label, resampled for every pair. Throws ErrorKind::Sampling when
/// k_neg > 0 and an item has no other-label frames.
template <typename T>
BatchTargets make_targets(const PairBatch& batch, const BatchForward<T>& forward,
                          const Codebook<T>& codebook, const TrainingConfig& cfg, Rng& rng);

template <typename T>
struct BatchLoss {
    T contrastive = 0;
    T robust = 0;
    T commitment = 0;
    T total = 0;
    std::vector<T> grad_params;
    Matrix<T> grad_codewords;
};

/// (1/B) sum_i [contrastive_i + lambda1 robust_i + lambda2 commitment_i] and
/// its gradient w.r.t. encoder parameters and codewords. Commitment is the
/// mean of the clean and partner terms.
template <typename T>
BatchLoss<T> batch_loss(const PairBatch& batch, const BatchForward<T>& forward,
                        const EncoderParams<T>& params, const Matrix<T>& codewords,
                        const BatchTargets& targets, const TrainingConfig& cfg);

/// forward_batch + batch_loss.
template <typename T>
BatchLoss<T> total_loss(const PairBatch& batch, const EncoderParams<T>& params,
                        const Matrix<T>& codewords, const BatchTargets& targets,
                        const TrainingConfig& cfg);

class Adam {
public:
    Adam(std::size_t size, double lr, double beta1, double beta2, double eps);
    void step(std::span<double> params, std::span<const double> grads);
    std::uint64_t steps() const noexcept { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<double> m_, v_;
    std::uint64_t t_ = 0;
};

/// Produces training batches of same-term pairs.
class PairSource {
public:
    virtual ~PairSource() = default;
    virtual std::size_t input_dim() const = 0;
    virtual PairBatch next_batch(std::size_t batch_size, Rng& rng) = 0;
};

struct LabeledClip {
    std::string term;
    AudioClip audio;
    std::string speaker; // empty when unknown
};

/// Pads both utterances to a fixed length, distorts the longer one, extracts
/// MFCCs and aligns the clean pair with DTW. Without an AugmentSpec the
/// partner stays clean.
class AudioPairSource final : public PairSource {
public:
    AudioPairSource(std::vector<LabeledClip> clips, FeatureConfig features, double pad_seconds,
                    std::optional<AugmentSpec> augment, DtwOptions dtw = {}, bool distort_both = false);

    std::size_t input_dim() const override { return features_.feature_dim(); }
    PairBatch next_batch(std::size_t batch_size, Rng& rng) override;

private:
    std::vector<LabeledClip> clips_;
    FeatureConfig features_;
    double pad_seconds_;
    std::optional<AugmentSpec> augment_;
    DtwOptions dtw_;
    bool distort_both_;
    std::vector<std::vector<std::size_t>> by_term_;
    std::uint64_t ordinal_ = 0;
};

struct LabeledFeatures {
    std::string term;
    FeatureSequence features;
    std::string speaker;
};

/// Pairs precomputed feature files; the partner is undistorted.
class FeaturePairSource final : public PairSource {
public:
    FeaturePairSource(std::vector<LabeledFeatures> items, DtwOptions dtw = {});

    std::size_t input_dim() const override;
    PairBatch next_batch(std::size_t batch_size, Rng& rng) override;

private:
    std::vector<LabeledFeatures> items_;
    DtwOptions dtw_;
    std::vector<std::vector<std::size_t>> by_term_;
};

/// Groups indices by term and validates that at least two terms have two
/// or more utterances. Throws ErrorKind::Sampling otherwise.
std::vector<std::vector<std::size_t>> group_by_term(std::span<const std::string> terms);

/// Picks batch_size (term, anchor, partner) index triples; the partner is the
/// longer of the two and speakers differ when metadata allows.
struct PairChoice {
    std::uint32_t label;
    std::size_t anchor;
    std::size_t partner;
};
std::vector<PairChoice> choose_pairs(const std::vector<std::vector<std::size_t>>& by_term,
                                     std::span<const std::string> speakers,
                                     std::span<const std::size_t> lengths, std::size_t batch_size,
                                     Rng& rng);

struct StepMetrics {
    std::uint64_t step = 0;
    double contrastive = 0.0;
    double robust = 0.0;
    double commitment = 0.0;
    double total = 0.0;
    double entropy = 0.0; // normalised entropy of this batch's hard assignments
    bool sinkhorn_converged = true;
};

struct TrainResult {
    EncoderParams<double> encoder;
    Codebook<double> codebook;
    std::vector<StepMetrics> metrics;
};

/// Adam over encoder parameters and codewords. Deterministic for a fixed
/// seed. When out_dir is set writes metrics.csv, encoder.{json,bin},
/// codebook.{json,f32}, usage.json and periodic ckpt_<step> checkpoints.
/// Throws ErrorKind::Numeric (after writing nan_dump.json) if the loss
/// becomes non-finite.
TrainResult train(const TrainingConfig& cfg, PairSource& source,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::function<void(const StepMetrics&)>& on_step = {});

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

} // namespace tokstd
