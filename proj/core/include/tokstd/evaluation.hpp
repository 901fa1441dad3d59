#pragma once

#include "tokstd/audio.hpp"
#include "tokstd/quantizer.hpp"
#include "tokstd/retrieval.hpp"

#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace tokstd {

/// Mean Jaccard over token sequence pairs. Throws ErrorKind::EmptyInput
/// for an empty list.
double token_consistency(std::span<const std::pair<TokenSequence, TokenSequence>> pairs);

struct Detection {
    std::string segment;
    double score = 0.0;
};

struct DetectionTrial {
    std::string term;
    std::string query_id;
    std::vector<Detection> returned;
    std::set<std::string> truth;
    std::size_t universe = 0; // scoreable segments for this term
};

struct MtwvConfig {
    double beta = 20.0;
    /// Sorted thresholds. Empty means every distinct returned score plus a
    /// +inf point that accepts nothing.
    std::vector<double> thresholds;
    void validate() const;
};

struct TwvPoint {
    double threshold = 0.0;
    double twv = 0.0;
};

struct TermDetail {
    std::string term;
    std::size_t truths = 0;
    std::size_t hits = 0;          // at the best threshold
    std::size_t false_alarms = 0;  // at the best threshold
    double p_miss = 0.0;
    double p_fa = 0.0;
};

struct MtwvResult {
    double mtwv = 0.0;
    double best_threshold = std::numeric_limits<double>::infinity();
    std::vector<TwvPoint> curve;
    std::vector<TermDetail> terms;
    std::vector<std::string> warnings;
};

/// TWV(theta) = 1 - mean over terms of (P_miss + beta * P_FA), detections
/// accepted at score >= theta, maximised over the grid. Trials of the same
/// term are pooled, keeping each segment's best score. Terms without true
/// occurrences are dropped with a warning.
MtwvResult mtwv(std::span<const DetectionTrial> trials, const MtwvConfig& config);

struct Occurrence {
    std::string term;
    std::string track_id;
    double start = 0.0; // seconds
    double end = 0.0;
};

/// Segments covering at least `min_overlap` of some occurrence of `term`.
std::set<std::string> ground_truth(std::span<const SegmentRecord> segments, std::span<const Occurrence> truth,
                                   const std::string& term, double min_overlap = 0.5);

struct Query {
    std::string id;
    std::string term;
    AudioClip audio;
    std::string condition; // empty: used in every condition
};

struct Condition {
    std::string name;
    std::optional<double> snr_db; // clean when unset
    bool reverb = false;
};

/// {clean} plus every SNR crossed with {noise, noise+reverb}.
std::vector<Condition> standard_conditions(std::span<const double> snr_grid, bool with_reverb = true);

struct ExperimentInputs {
    const TfIdfIndex* index = nullptr;
    const Tokenizer* tokenizer = nullptr;
    std::vector<Query> queries;
    std::vector<Occurrence> truth;
    std::vector<Condition> conditions;
    std::vector<AudioClip> noise_bank;
    std::vector<AudioClip> rir_bank;
    SearchConfig search;
    MtwvConfig metric;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct ConditionReport {
    Condition condition;
    std::size_t queries = 0;
    double mtwv = 0.0;
    double best_threshold = 0.0;
    double token_consistency = 0.0; // clean vs distorted query tokens
    MtwvResult detail;
};

struct ExperimentReport {
    std::vector<ConditionReport> conditions;
};

/// Throws ErrorKind::Config when artifacts are missing or a distorted
/// condition has no noise.
ExperimentReport run_experiment(const ExperimentInputs& inputs);

std::string report_csv(const ExperimentReport& report);
std::string report_json(const ExperimentReport& report);
void write_report(const std::filesystem::path& dir, const ExperimentReport& report);

} // namespace tokstd
