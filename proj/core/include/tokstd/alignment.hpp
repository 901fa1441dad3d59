#pragma once

#include "tokstd/features.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace tokstd {

using FramePair = std::pair<std::size_t, std::size_t>;

/// Monotone DTW path between the valid ranges of two feature sequences.
/// `pairs` are local to the valid ranges; `offset_a`/`offset_b` are the
/// valid-range starts in the padded sequences.
struct AlignmentPath {
    std::vector<FramePair> pairs;
    double cost = 0.0;
    std::size_t offset_a = 0;
    std::size_t offset_b = 0;
    std::size_t length_a = 0; // valid frames in a
    std::size_t length_b = 0;
};

struct DtwOptions {
    /// Sakoe-Chiba half-width around the (length-normalised) diagonal, in
    /// frames. Unset means unconstrained.
    std::optional<std::size_t> band;
    /// Keep only the lowest-cost partner per frame of `a`.
    bool one_to_one = false;
};

/// Classical DTW over steps {(1,0),(0,1),(1,1)} with Euclidean local cost.
/// Backtracking prefers the diagonal on ties, then (i-1, j), then (i, j-1).
/// Throws ErrorKind::EmptyInput when either valid range is empty.
AlignmentPath dtw_align(const FeatureSequence& a, const FeatureSequence& b,
                        const DtwOptions& options = {});

/// Same as dtw_align on raw matrices; valid ranges default to the full rows.
AlignmentPath dtw_align(const Matrix<float>& a, IndexRange valid_a, const Matrix<float>& b,
                        IndexRange valid_b, const DtwOptions& options = {});

/// Path pairs in padded-sequence coordinates, ready to index encoder outputs.
std::vector<FramePair> anchor_positive_pairs(const AlignmentPath& path);

/// Throws ErrorKind::Input if the path is not monotone, does not start at
/// (0,0), does not end at (length_a-1, length_b-1), or takes a step outside
/// {(1,0),(0,1),(1,1)}.
void check_path(const AlignmentPath& path, bool require_cover = true);

std::string path_to_json(const AlignmentPath& path);

} // namespace tokstd
