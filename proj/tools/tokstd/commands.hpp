#pragma once

#include "config.hpp"

#include <filesystem>
#include <optional>

namespace tokstd::cli {

namespace fs = std::filesystem;

struct FeaturesArgs {
    fs::path in, out;
};

struct AugmentArgs {
    fs::path in, out;
};

struct TrainArgs {
    fs::path manifest, out;
};

struct TokenizeArgs {
    fs::path ckpt, codebook, in;
    std::optional<fs::path> out;
};

struct IndexArgs {
    fs::path tracks, codebook, ckpt, out;
};

struct SearchArgs {
    fs::path index, query;
};

struct EvalArgs {
    fs::path index, queries, truth, out;
    std::optional<fs::path> conditions;
};

int run_features(const PipelineConfig& cfg, const FeaturesArgs& args);
int run_augment(const PipelineConfig& cfg, const AugmentArgs& args);
int run_train(PipelineConfig cfg, const TrainArgs& args);
int run_tokenize(const PipelineConfig& cfg, const TokenizeArgs& args);
int run_index(const PipelineConfig& cfg, const IndexArgs& args);
int run_search(const PipelineConfig& cfg, const SearchArgs& args);
int run_eval(const PipelineConfig& cfg, const EvalArgs& args);
/// Prints the oracle table; 0 when every check passes, 3 otherwise.
int run_selftest(const PipelineConfig& cfg);

} // namespace tokstd::cli
