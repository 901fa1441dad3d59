#pragma once

#include "tokstd/audio.hpp"
#include "tokstd/encoder.hpp"
#include "tokstd/features.hpp"
#include "tokstd/matrix.hpp"
#include "tokstd/quantizer.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tokstd {

struct SegmentRecord {
    std::string track_id;
    double start = 0.0;  // seconds
    double length = 0.0; // seconds
    TokenSequence tokens;
};

struct TrackSegment {
    double start = 0.0;
    PaddedClip audio; // zero-padded to l; `valid` marks real samples
};

/// Overlapping windows of length l and hop h. A trailing partial window is
/// kept when it holds at least l/2 of audio; a clip shorter than l/2 still
/// yields one padded segment.
std::vector<TrackSegment> segment_track(const AudioClip& clip, double l, double h);

/// Levenshtein distance with unit costs, two-row DP.
std::size_t edit_distance(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

/// 1 - ED / max(|a|, |b|); 1 for two empty sequences.
double edit_similarity(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

/// Jaccard similarity of the token sets; 1 for two empty sequences.
double jaccard(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

/// DTW over token sequences with 0/1 local cost, normalised by |a| + |b|.
double token_dtw(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

struct IndexConfig {
    std::size_t vocab = 64;      // codebook size K_cw
    std::size_t n_list = 16;
    std::size_t pq_m = 8;
    std::size_t pq_bits = 8;
    int kmeans_iters = 20;
    std::uint64_t seed = 0;
    void validate() const;
};

struct SearchConfig {
    std::size_t n1 = 100;
    std::size_t n2 = 25;
    std::size_t n3 = 10;
    std::size_t nprobe = 4;
    bool dtw_rerank = false;
    void validate() const;
};

/// TF-IDF vectors under an IVF coarse quantizer with PQ-coded residuals.
/// With fewer segments than lists the index stays flat and scores exactly.
struct TfIdfIndex {
    IndexConfig config;
    std::vector<float> idf;
    Matrix<float> vectors;      // doc_count x vocab, unit rows
    bool flat = false;
    Matrix<float> centroids;    // n_list x vocab
    std::size_t pq_dsub = 0;    // padded sub-vector width
    std::size_t pq_ksub = 0;
    Matrix<float> pq_codebooks; // (m * ksub) x dsub
    std::vector<std::vector<std::uint32_t>> list_ids;
    std::vector<std::vector<std::uint8_t>> list_codes; // m bytes per entry
    std::vector<SegmentRecord> segments;

    std::size_t doc_count() const noexcept { return segments.size(); }
    /// Decoded (approximate) vector for a document in IVF mode.
    std::vector<float> reconstruct(std::uint32_t doc) const;
};

/// Length-normalised TF times smoothed IDF, L2-normalised.
std::vector<float> tfidf_vector(std::span<const std::uint32_t> tokens, std::span<const float> idf);

/// Throws ErrorKind::EmptyIndex for an empty corpus.
TfIdfIndex build_index(std::vector<SegmentRecord> segments, const IndexConfig& config);

struct Candidate {
    std::uint32_t doc = 0;
    double stage1 = 0.0;
    double stage2 = 0.0;
    double stage3 = 0.0;
    double dtw = 0.0; // rerank cost (lower is better) when enabled
};

struct SearchTiming {
    double stage1_ms = 0.0;
    double stage2_ms = 0.0;
    double stage3_ms = 0.0;
    double rerank_ms = 0.0;
};

struct SearchResult {
    std::vector<Candidate> ranked; // final order
    std::vector<std::uint32_t> stage1_ids;
    std::vector<std::uint32_t> stage2_ids;
    std::vector<std::uint32_t> stage3_ids;
    bool low_confidence = false;
    SearchTiming timing;
};

/// Continuous information for the optional second rerank pass.
struct QueryEmbeddings {
    const Matrix<double>* embeddings = nullptr; // valid frames of the query
    const Codebook<double>* codebook = nullptr;
};

/// Three-stage cascade: IVF-PQ cosine top-n1, Jaccard top-n2, edit similarity
/// top-n3 (ties by stage-2 score, then id). Throws ErrorKind::Input for an
/// empty query or out-of-vocabulary tokens.
SearchResult search(std::span<const std::uint32_t> query, const TfIdfIndex& index, const SearchConfig& config,
                    const QueryEmbeddings& continuous = {});

/// Exact cosine scores against every stored vector, best first (ties by id).
std::vector<std::pair<std::uint32_t, double>> exact_scan(std::span<const std::uint32_t> query,
                                                         const TfIdfIndex& index, std::size_t k);

/// Stage-1 candidates alone, best first.
std::vector<std::pair<std::uint32_t, double>> ann_scan(std::span<const std::uint32_t> query,
                                                       const TfIdfIndex& index, std::size_t k,
                                                       std::size_t nprobe);

void save_index(const std::filesystem::path& dir, const TfIdfIndex& index,
                const std::string& checkpoint = {}, const std::string& codebook = {});
/// Verifies checksums; throws ErrorKind::Format on corruption.
TfIdfIndex load_index(const std::filesystem::path& dir);

/// Holds the published index. Readers take a snapshot; publish swaps it.
class IndexHandle {
public:
    void publish(std::shared_ptr<const TfIdfIndex> index);
    std::shared_ptr<const TfIdfIndex> snapshot() const;

private:
    mutable std::mutex mutex_;
    std::shared_ptr<const TfIdfIndex> current_;
};

/// Feature extraction, encoding and quantization bundled for inference.
struct Tokenizer {
    FeatureConfig features;
    EncoderParams<double> encoder;
    Codebook<double> codebook;

    EmbeddingSequence<double> embed(const AudioClip& clip, IndexRange valid_samples) const;
    TokenSequence tokenize(const AudioClip& clip, IndexRange valid_samples) const;
    TokenSequence tokenize(const AudioClip& clip) const;
};

/// Segments and tokenizes one track.
std::vector<SegmentRecord> tokenize_track(const std::string& track_id, const AudioClip& clip,
                                          const Tokenizer& tokenizer, double l, double h);

} // namespace tokstd
