#pragma once

#include "tokstd/augment.hpp"
#include "tokstd/evaluation.hpp"
#include "tokstd/features.hpp"
#include "tokstd/retrieval.hpp"
#include "tokstd/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tokstd::cli {

/// Every tunable of the pipeline. The JSON file mirrors this struct section
/// by section; unknown keys and mistyped values are rejected at load time.
struct PipelineConfig {
    FeatureConfig features;
    double pad_seconds = 1.0; // 0 disables fixed-length padding

    struct Augment {
        double snr_lo = 0.0;
        double snr_hi = 10.0;
        double reverb_prob = 0.5;
        std::string noise_dir;
        std::string rir_dir;
    } augment;

    TrainingConfig training;
    std::size_t dtw_band = 0; // 0 means unconstrained
    bool distort_both = false;

    IndexConfig index;
    double segment_seconds = 1.0;
    double hop_seconds = 0.5;

    SearchConfig search;
    std::size_t topk = 10;

    MtwvConfig metric;
    std::vector<double> snr_grid{kEvaluationSnrGrid.begin(), kEvaluationSnrGrid.end()};

    std::uint64_t seed = 0;
    std::size_t threads = 0; // 0 means hardware concurrency
    bool deterministic = false;

    /// Pushes the global seed into module configs and resolves the thread
    /// count. Call after flags are applied.
    void finalize();
    void validate() const;
    std::size_t resolved_threads() const;
};

PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& cfg);
/// Throws ErrorKind::Config for unreadable or invalid files.
PipelineConfig load_config(const std::filesystem::path& path);

} // namespace tokstd::cli
