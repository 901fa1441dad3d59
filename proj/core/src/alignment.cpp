#include "tokstd/alignment.hpp"

#include "tokstd/error.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>

namespace tokstd {

namespace {

double frame_distance(std::span<const float> x, std::span<const float> y) {
    double acc = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double diff = static_cast<double>(x[k]) - static_cast<double>(y[k]);
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

bool inside_band(std::size_t i, std::size_t j, std::size_t n, std::size_t m, std::size_t band) {
    if (n <= 1 || m <= 1) {
        return true;
    }
    const double expected = static_cast<double>(i) * static_cast<double>(m - 1) / static_cast<double>(n - 1);
    return std::abs(static_cast<double>(j) - expected) <= static_cast<double>(band);
}

} // namespace

AlignmentPath dtw_align(const Matrix<float>& a, IndexRange valid_a, const Matrix<float>& b,
                        IndexRange valid_b, const DtwOptions& options) {
    require(a.cols() == b.cols(), ErrorKind::Shape, "feature dimensions differ");
    require(valid_a.end <= a.rows() && valid_b.end <= b.rows(), ErrorKind::Input,
            "valid range exceeds sequence length");
    require(!valid_a.empty() && !valid_b.empty(), ErrorKind::EmptyInput,
            "alignment needs non-empty valid ranges");
    if (options.band) {
        require(*options.band >= 1, ErrorKind::Parameter, "DTW band must be at least 1 frame");
    }

    const std::size_t n = valid_a.size();
    const std::size_t m = valid_b.size();
    constexpr double kInf = std::numeric_limits<double>::infinity();

    Matrix<double> local(n, m, kInf);
    Matrix<double> acc(n, m, kInf);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (options.band && !inside_band(i, j, n, m, *options.band)) {
                continue;
            }
            local(i, j) = frame_distance(a.row(valid_a.begin + i), b.row(valid_b.begin + j));
            double best;
            if (i == 0 && j == 0) {
                best = 0.0;
            } else {
                best = kInf;
                if (i > 0 && j > 0) best = std::min(best, acc(i - 1, j - 1));
                if (i > 0) best = std::min(best, acc(i - 1, j));
                if (j > 0) best = std::min(best, acc(i, j - 1));
            }
            acc(i, j) = best + local(i, j);
        }
    }

    AlignmentPath path;
    path.cost = acc(n - 1, m - 1);
    path.offset_a = valid_a.begin;
    path.offset_b = valid_b.begin;
    path.length_a = n;
    path.length_b = m;

    std::size_t i = n - 1;
    std::size_t j = m - 1;
    path.pairs.emplace_back(i, j);
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0) {
            const double diag = acc(i - 1, j - 1);
            const double up = acc(i - 1, j);
            const double left = acc(i, j - 1);
            if (diag <= up && diag <= left) {
                --i;
                --j;
            } else if (up <= left) {
                --i;
            } else {
                --j;
            }
        } else if (i > 0) {
            --i;
        } else {
            --j;
        }
        path.pairs.emplace_back(i, j);
    }
    std::reverse(path.pairs.begin(), path.pairs.end());

    if (options.one_to_one) {
        std::vector<FramePair> kept;
        kept.reserve(n);
        for (const auto& p : path.pairs) {
            if (!kept.empty() && kept.back().first == p.first) {
                if (local(p.first, p.second) < local(kept.back().first, kept.back().second)) {
                    kept.back() = p;
                }
            } else {
                kept.push_back(p);
            }
        }
        path.pairs = std::move(kept);
    }
    return path;
}

AlignmentPath dtw_align(const FeatureSequence& a, const FeatureSequence& b, const DtwOptions& options) {
    return dtw_align(a.frames, a.valid, b.frames, b.valid, options);
}

std::vector<FramePair> anchor_positive_pairs(const AlignmentPath& path) {
    std::vector<FramePair> out;
    out.reserve(path.pairs.size());
    for (const auto& [t, u] : path.pairs) {
        out.emplace_back(t + path.offset_a, u + path.offset_b);
    }
    return out;
}

void check_path(const AlignmentPath& path, bool require_cover) {
    require(!path.pairs.empty(), ErrorKind::Input, "empty path");
    require(path.pairs.front() == FramePair{0, 0}, ErrorKind::Input, "path does not start at (0,0)");
    if (require_cover) {
        require(path.pairs.back() == FramePair{path.length_a - 1, path.length_b - 1}, ErrorKind::Input,
                "path does not end at the last valid frames");
    }
    for (std::size_t k = 1; k < path.pairs.size(); ++k) {
        const auto [pi, pj] = path.pairs[k - 1];
        const auto [ci, cj] = path.pairs[k];
        require(ci >= pi && cj >= pj, ErrorKind::Input, "path is not monotone");
        if (require_cover) {
            require(ci - pi <= 1 && cj - pj <= 1 && (ci != pi || cj != pj), ErrorKind::Input,
                    "path takes an invalid step");
        }
    }
}

std::string path_to_json(const AlignmentPath& path) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [t, u] : path.pairs) {
        pairs.push_back({t, u});
    }
    nlohmann::json j = {{"cost", path.cost},
                        {"offset_a", path.offset_a},
                        {"offset_b", path.offset_b},
                        {"length_a", path.length_a},
                        {"length_b", path.length_b},
                        {"pairs", pairs}};
    return j.dump();
}

} // namespace tokstd
