#include "tokstd/retrieval.hpp"

#include "tokstd/error.hpp"
#include "tokstd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace tokstd {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

float squared_distance(std::span<const float> a, std::span<const float> b) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const float d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

std::size_t nearest_row(std::span<const float> x, const Matrix<float>& centres) {
    std::size_t best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < centres.rows(); ++c) {
        const float d = squared_distance(x, centres.row(c));
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

/// Lloyd's k-means seeded with distinct random rows. Empty clusters keep
/// their previous centre.
Matrix<float> kmeans(const Matrix<float>& data, std::size_t k, int iterations, Rng& rng) {
    const std::size_t n = data.rows();
    const std::size_t dim = data.cols();
    Matrix<float> centres(k, dim, 0.0f);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    for (std::size_t c = 0; c < k; ++c) {
        const auto src = data.row(order[c % n]);
        std::copy(src.begin(), src.end(), centres.row(c).begin());
    }
    std::vector<std::size_t> assign(n, 0);
    std::vector<double> sums(k * dim);
    std::vector<std::size_t> counts(k);
    for (int it = 0; it < iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            assign[i] = nearest_row(data.row(i), centres);
        }
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = data.row(i);
            for (std::size_t j = 0; j < dim; ++j) {
                sums[assign[i] * dim + j] += row[j];
            }
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                continue;
            }
            for (std::size_t j = 0; j < dim; ++j) {
                centres(c, j) = static_cast<float>(sums[c * dim + j] / static_cast<double>(counts[c]));
            }
        }
    }
    return centres;
}

std::span<const float> sub_vector(std::span<const float> padded, std::size_t j, std::size_t dsub) {
    return padded.subspan(j * dsub, dsub);
}

std::vector<float> padded_copy(std::span<const float> v, std::size_t width) {
    std::vector<float> out(width, 0.0f);
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

template <typename Cmp>
void keep_top(std::vector<Candidate>& c, std::size_t n, Cmp cmp) {
    if (c.size() > n) {
        std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(n), c.end(), cmp);
        c.resize(n);
    } else {
        std::sort(c.begin(), c.end(), cmp);
    }
}

} // namespace

std::vector<TrackSegment> segment_track(const AudioClip& clip, double l, double h) {
    validate(clip);
    require(l > 0.0 && h > 0.0 && h <= l, ErrorKind::Parameter, "segmenting needs l > 0 and 0 < h <= l");
    const double fs = clip.sample_rate;
    const auto seg_len = static_cast<std::size_t>(std::llround(l * fs));
    const auto hop = static_cast<std::size_t>(std::llround(h * fs));
    const std::size_t n = clip.size();
    require(seg_len > 0 && hop > 0, ErrorKind::Parameter, "segment length or hop rounds to zero samples");

    std::vector<TrackSegment> out;
    for (std::size_t start = 0; start == 0 || start < n; start += hop) {
        const std::size_t remaining = n - start;
        if (start > 0 && 2 * remaining < seg_len) {
            break;
        }
        TrackSegment seg;
        seg.start = static_cast<double>(start) / fs;
        seg.audio.clip.sample_rate = clip.sample_rate;
        seg.audio.clip.samples.assign(seg_len, 0.0f);
        const std::size_t take = std::min(seg_len, remaining);
        std::copy_n(clip.samples.begin() + static_cast<std::ptrdiff_t>(start), take, seg.audio.clip.samples.begin());
        seg.audio.valid = {0, take};
        out.push_back(std::move(seg));
        if (take < seg_len) {
            break;
        }
    }
    return out;
}

std::size_t edit_distance(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    if (a.size() < b.size()) {
        std::swap(a, b);
    }
    std::vector<std::size_t> prev(b.size() + 1);
    std::vector<std::size_t> cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double edit_similarity(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    const std::size_t longest = std::max(a.size(), b.size());
    if (longest == 0) {
        return 1.0;
    }
    return 1.0 - static_cast<double>(edit_distance(a, b)) / static_cast<double>(longest);
}

double jaccard(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    std::vector<std::uint32_t> sa(a.begin(), a.end());
    std::vector<std::uint32_t> sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
    std::sort(sb.begin(), sb.end());
    sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
    if (sa.empty() && sb.empty()) {
        return 1.0;
    }
    std::size_t inter = 0;
    for (std::size_t i = 0, j = 0; i < sa.size() && j < sb.size();) {
        if (sa[i] == sb[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (sa[i] < sb[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

double token_dtw(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    require(!a.empty() && !b.empty(), ErrorKind::EmptyInput, "token DTW needs non-empty sequences");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(b.size(), inf);
    std::vector<double> cur(b.size(), inf);
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.size(); ++j) {
            const double local = a[i] == b[j] ? 0.0 : 1.0;
            double best = 0.0;
            if (i > 0 || j > 0) {
                best = inf;
                if (i > 0) {
                    best = std::min(best, prev[j]);
                }
                if (j > 0) {
                    best = std::min(best, cur[j - 1]);
                }
                if (i > 0 && j > 0) {
                    best = std::min(best, prev[j - 1]);
                }
            }
            cur[j] = best + local;
        }
        std::swap(prev, cur);
    }
    return prev.back() / static_cast<double>(a.size() + b.size());
}

namespace {

double continuous_dtw(const Matrix<double>& query, std::span<const std::uint32_t> tokens,
                      const Codebook<double>& codebook) {
    const std::size_t n = query.rows();
    const std::size_t m = tokens.size();
    require(n > 0 && m > 0, ErrorKind::EmptyInput, "continuous DTW needs non-empty sequences");
    Matrix<double> unit(codebook.size(), codebook.dim());
    for (std::size_t k = 0; k < codebook.size(); ++k) {
        const auto c = codebook.codewords.row(k);
        const double norm = std::sqrt(dot<double>(c, c));
        for (std::size_t j = 0; j < c.size(); ++j) {
            unit(k, j) = c[j] / norm;
        }
    }
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(m, inf);
    std::vector<double> cur(m, inf);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const auto q = query.row(i);
            const auto c = unit.row(tokens[j]);
            double sq = 0.0;
            for (std::size_t d = 0; d < q.size(); ++d) {
                sq += (q[d] - c[d]) * (q[d] - c[d]);
            }
            double best = 0.0;
            if (i > 0 || j > 0) {
                best = inf;
                if (i > 0) {
                    best = std::min(best, prev[j]);
                }
                if (j > 0) {
                    best = std::min(best, cur[j - 1]);
                }
                if (i > 0 && j > 0) {
                    best = std::min(best, prev[j - 1]);
                }
            }
            cur[j] = best + std::sqrt(sq);
        }
        std::swap(prev, cur);
    }
    return prev.back() / static_cast<double>(n + m);
}

} // namespace

void IndexConfig::validate() const {
    require(vocab >= 1, ErrorKind::Config, "index vocabulary must be positive");
    require(n_list >= 1, ErrorKind::Config, "n_list must be positive");
    require(pq_m >= 1 && pq_m <= vocab, ErrorKind::Config, "pq_m must lie in [1, vocab]");
    require(pq_bits >= 1 && pq_bits <= 8, ErrorKind::Config, "pq_bits must lie in [1, 8]");
    require(kmeans_iters >= 1, ErrorKind::Config, "kmeans_iters must be positive");
}

void SearchConfig::validate() const {
    require(n1 >= 1 && n2 >= 1 && n3 >= 1, ErrorKind::Config, "stage fan-outs must be positive");
    require(nprobe >= 1, ErrorKind::Config, "nprobe must be positive");
}

std::vector<float> tfidf_vector(std::span<const std::uint32_t> tokens, std::span<const float> idf) {
    std::vector<float> v(idf.size(), 0.0f);
    if (tokens.empty()) {
        return v;
    }
    std::vector<double> acc(idf.size(), 0.0);
    for (std::uint32_t t : tokens) {
        require(t < idf.size(), ErrorKind::Input, "token " + std::to_string(t) + " outside the vocabulary");
        acc[t] += 1.0;
    }
    double sq = 0.0;
    for (std::size_t k = 0; k < acc.size(); ++k) {
        acc[k] = acc[k] / static_cast<double>(tokens.size()) * idf[k];
        sq += acc[k] * acc[k];
    }
    const double norm = std::sqrt(sq);
    for (std::size_t k = 0; k < acc.size(); ++k) {
        v[k] = norm > 0.0 ? static_cast<float>(acc[k] / norm) : 0.0f;
    }
    return v;
}

std::vector<float> TfIdfIndex::reconstruct(std::uint32_t doc) const {
    require(doc < doc_count(), ErrorKind::Input, "document id out of range");
    if (flat) {
        const auto row = vectors.row(doc);
        return {row.begin(), row.end()};
    }
    for (std::size_t l = 0; l < list_ids.size(); ++l) {
        const auto& ids = list_ids[l];
        for (std::size_t e = 0; e < ids.size(); ++e) {
            if (ids[e] != doc) {
                continue;
            }
            std::vector<float> out(config.vocab);
            for (std::size_t j = 0; j < config.pq_m; ++j) {
                const std::uint8_t code = list_codes[l][e * config.pq_m + j];
                const auto cw = pq_codebooks.row(j * pq_ksub + code);
                for (std::size_t i = 0; i < pq_dsub; ++i) {
                    const std::size_t dim = j * pq_dsub + i;
                    if (dim < config.vocab) {
                        out[dim] = centroids(l, dim) + cw[i];
                    }
                }
            }
            return out;
        }
    }
    fail(ErrorKind::State, "document missing from every list");
}

TfIdfIndex build_index(std::vector<SegmentRecord> segments, const IndexConfig& config) {
    config.validate();
    require(!segments.empty(), ErrorKind::EmptyIndex, "cannot index an empty corpus");
    TfIdfIndex index;
    index.config = config;
    const std::size_t k = config.vocab;
    const std::size_t n = segments.size();

    std::vector<std::size_t> df(k, 0);
    for (const auto& s : segments) {
        require(!s.tokens.tokens.empty(), ErrorKind::Input, "segment " + s.tokens.segment_id + " has no tokens");
        std::vector<std::uint32_t> uniq = s.tokens.tokens;
        std::sort(uniq.begin(), uniq.end());
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        for (std::uint32_t t : uniq) {
            require(t < k, ErrorKind::Input, "token " + std::to_string(t) + " outside the vocabulary");
            ++df[t];
        }
    }
    index.idf.resize(k);
    for (std::size_t t = 0; t < k; ++t) {
        index.idf[t] = static_cast<float>(std::log((1.0 + static_cast<double>(n)) / (1.0 + static_cast<double>(df[t]))) + 1.0);
    }
    index.vectors = Matrix<float>(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = tfidf_vector(segments[i].tokens.tokens, index.idf);
        std::copy(v.begin(), v.end(), index.vectors.row(i).begin());
    }
    index.segments = std::move(segments);

    index.flat = n < config.n_list;
    if (index.flat) {
        return index;
    }

    Rng rng(derive_seed(config.seed, {0x697666}));
    index.centroids = kmeans(index.vectors, config.n_list, config.kmeans_iters, rng);
    std::vector<std::size_t> assign(n);
    for (std::size_t i = 0; i < n; ++i) {
        assign[i] = nearest_row(index.vectors.row(i), index.centroids);
    }

    index.pq_dsub = (k + config.pq_m - 1) / config.pq_m;
    index.pq_ksub = std::size_t{1} << config.pq_bits;
    const std::size_t width = index.pq_dsub * config.pq_m;
    Matrix<float> residuals(n, width, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < k; ++d) {
            residuals(i, d) = index.vectors(i, d) - index.centroids(assign[i], d);
        }
    }
    index.pq_codebooks = Matrix<float>(config.pq_m * index.pq_ksub, index.pq_dsub, 0.0f);
    std::vector<std::vector<std::uint8_t>> codes(n, std::vector<std::uint8_t>(config.pq_m));
    for (std::size_t j = 0; j < config.pq_m; ++j) {
        Matrix<float> sub(n, index.pq_dsub);
        for (std::size_t i = 0; i < n; ++i) {
            const auto src = sub_vector(residuals.row(i), j, index.pq_dsub);
            std::copy(src.begin(), src.end(), sub.row(i).begin());
        }
        Rng sub_rng(derive_seed(config.seed, {0x7071, j}));
        const Matrix<float> cb = kmeans(sub, index.pq_ksub, config.kmeans_iters, sub_rng);
        for (std::size_t c = 0; c < index.pq_ksub; ++c) {
            const auto src = cb.row(c);
            std::copy(src.begin(), src.end(), index.pq_codebooks.row(j * index.pq_ksub + c).begin());
        }
        for (std::size_t i = 0; i < n; ++i) {
            codes[i][j] = static_cast<std::uint8_t>(nearest_row(sub.row(i), cb));
        }
    }
    index.list_ids.assign(config.n_list, {});
    index.list_codes.assign(config.n_list, {});
    for (std::size_t i = 0; i < n; ++i) {
        index.list_ids[assign[i]].push_back(static_cast<std::uint32_t>(i));
        auto& dst = index.list_codes[assign[i]];
        dst.insert(dst.end(), codes[i].begin(), codes[i].end());
    }
    return index;
}

std::vector<std::pair<std::uint32_t, double>> exact_scan(std::span<const std::uint32_t> query,
                                                         const TfIdfIndex& index, std::size_t k) {
    const auto q = tfidf_vector(query, index.idf);
    std::vector<std::pair<std::uint32_t, double>> scored(index.doc_count());
    for (std::size_t i = 0; i < index.doc_count(); ++i) {
        scored[i] = {static_cast<std::uint32_t>(i), dot<float>(q, index.vectors.row(i))};
    }
    const auto cmp = [](const auto& a, const auto& b) { return a.second > b.second || (a.second == b.second && a.first < b.first); };
    const std::size_t keep = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), cmp);
    scored.resize(keep);
    return scored;
}

std::vector<std::pair<std::uint32_t, double>> ann_scan(std::span<const std::uint32_t> query,
                                                       const TfIdfIndex& index, std::size_t k,
                                                       std::size_t nprobe) {
    if (index.flat) {
        return exact_scan(query, index, k);
    }
    const auto q = tfidf_vector(query, index.idf);
    const std::size_t n_list = index.centroids.rows();
    std::vector<std::pair<float, std::size_t>> lists(n_list);
    for (std::size_t l = 0; l < n_list; ++l) {
        lists[l] = {squared_distance(q, index.centroids.row(l)), l};
    }
    const std::size_t probes = std::min(nprobe, n_list);
    std::partial_sort(lists.begin(), lists.begin() + static_cast<std::ptrdiff_t>(probes), lists.end());

    const std::size_t m = index.config.pq_m;
    const auto qp = padded_copy(q, index.pq_dsub * m);
    std::vector<float> lut(m * index.pq_ksub);
    for (std::size_t j = 0; j < m; ++j) {
        const auto qs = sub_vector(qp, j, index.pq_dsub);
        for (std::size_t c = 0; c < index.pq_ksub; ++c) {
            lut[j * index.pq_ksub + c] = dot<float>(qs, index.pq_codebooks.row(j * index.pq_ksub + c));
        }
    }
    std::vector<std::pair<std::uint32_t, double>> scored;
    for (std::size_t p = 0; p < probes; ++p) {
        const std::size_t l = lists[p].second;
        const float base = dot<float>(q, index.centroids.row(l));
        const auto& ids = index.list_ids[l];
        const auto& codes = index.list_codes[l];
        for (std::size_t e = 0; e < ids.size(); ++e) {
            float s = base;
            for (std::size_t j = 0; j < m; ++j) {
                s += lut[j * index.pq_ksub + codes[e * m + j]];
            }
            scored.emplace_back(ids[e], s);
        }
    }
    const auto cmp = [](const auto& a, const auto& b) { return a.second > b.second || (a.second == b.second && a.first < b.first); };
    const std::size_t keep = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), cmp);
    scored.resize(keep);
    return scored;
}

SearchResult search(std::span<const std::uint32_t> query, const TfIdfIndex& index, const SearchConfig& config,
                    const QueryEmbeddings& continuous) {
    config.validate();
    require(!query.empty(), ErrorKind::Input, "query has no tokens");
    SearchResult result;
    if (index.doc_count() == 0) {
        return result;
    }

    auto t0 = Clock::now();
    std::vector<Candidate> cands;
    for (const auto& [doc, score] : ann_scan(query, index, config.n1, config.nprobe)) {
        cands.push_back({doc, score, 0.0, 0.0, 0.0});
        result.stage1_ids.push_back(doc);
    }
    result.timing.stage1_ms = elapsed_ms(t0);

    t0 = Clock::now();
    for (auto& c : cands) {
        c.stage2 = jaccard(query, index.segments[c.doc].tokens.tokens);
    }
    keep_top(cands, config.n2, [](const Candidate& a, const Candidate& b) {
        return a.stage2 > b.stage2 || (a.stage2 == b.stage2 && a.doc < b.doc);
    });
    result.low_confidence = cands.empty() || cands.front().stage2 == 0.0;
    for (const auto& c : cands) {
        result.stage2_ids.push_back(c.doc);
    }
    result.timing.stage2_ms = elapsed_ms(t0);

    t0 = Clock::now();
    for (auto& c : cands) {
        c.stage3 = edit_similarity(query, index.segments[c.doc].tokens.tokens);
    }
    keep_top(cands, config.n3, [](const Candidate& a, const Candidate& b) {
        if (a.stage3 != b.stage3) {
            return a.stage3 > b.stage3;
        }
        if (a.stage2 != b.stage2) {
            return a.stage2 > b.stage2;
        }
        return a.doc < b.doc;
    });
    for (const auto& c : cands) {
        result.stage3_ids.push_back(c.doc);
    }
    result.timing.stage3_ms = elapsed_ms(t0);

    if (config.dtw_rerank) {
        t0 = Clock::now();
        for (auto& c : cands) {
            c.dtw = token_dtw(query, index.segments[c.doc].tokens.tokens);
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.dtw < b.dtw; });
        if (continuous.embeddings != nullptr && continuous.codebook != nullptr) {
            for (auto& c : cands) {
                c.dtw = continuous_dtw(*continuous.embeddings, index.segments[c.doc].tokens.tokens, *continuous.codebook);
            }
            std::stable_sort(cands.begin(), cands.end(),
                             [](const Candidate& a, const Candidate& b) { return a.dtw < b.dtw; });
        }
        result.timing.rerank_ms = elapsed_ms(t0);
    }
    result.ranked = std::move(cands);
    return result;
}

void IndexHandle::publish(std::shared_ptr<const TfIdfIndex> index) {
    std::lock_guard lock(mutex_);
    current_.swap(index);
}

std::shared_ptr<const TfIdfIndex> IndexHandle::snapshot() const {
    std::lock_guard lock(mutex_);
    return current_;
}

EmbeddingSequence<double> Tokenizer::embed(const AudioClip& clip, IndexRange valid_samples) const {
    AudioClip audio = clip.sample_rate == features.sample_rate ? clip : decimate(clip, features.sample_rate);
    if (clip.sample_rate != features.sample_rate) {
        const auto factor = static_cast<std::size_t>(clip.sample_rate / features.sample_rate);
        valid_samples = {valid_samples.begin / factor, std::min(audio.size(), valid_samples.end / factor)};
    }
    FeatureSequence f = compute_mfcc(audio, features);
    f.valid = frames_for_samples(valid_samples, f.length(), features);
    return encode(f, encoder);
}

TokenSequence Tokenizer::tokenize(const AudioClip& clip, IndexRange valid_samples) const {
    return tokstd::tokenize(embed(clip, valid_samples), codebook);
}

TokenSequence Tokenizer::tokenize(const AudioClip& clip) const { return tokenize(clip, {0, clip.size()}); }

std::vector<SegmentRecord> tokenize_track(const std::string& track_id, const AudioClip& clip,
                                          const Tokenizer& tokenizer, double l, double h) {
    std::vector<SegmentRecord> out;
    const auto segments = segment_track(clip, l, h);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        SegmentRecord rec;
        rec.track_id = track_id;
        rec.start = segments[i].start;
        rec.length = l;
        rec.tokens = tokenizer.tokenize(segments[i].audio.clip, segments[i].audio.valid);
        rec.tokens.segment_id = track_id + ":" + std::to_string(i);
        if (!rec.tokens.tokens.empty()) {
            out.push_back(std::move(rec));
        }
    }
    return out;
}

} // namespace tokstd
