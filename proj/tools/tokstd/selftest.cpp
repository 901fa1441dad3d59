#include "commands.hpp"

#include "oracles.hpp"

#include "tokstd/alignment.hpp"
#include "tokstd/audio.hpp"
#include "tokstd/error.hpp"
#include "tokstd/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <string>

namespace tokstd::cli {
namespace {

struct Check {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Matrix<double> unit_rows(std::size_t r, std::size_t c, Rng& rng) {
    Matrix<double> m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        double n = 0.0;
        for (double& v : m.row(i)) {
            v = rng.normal();
            n += v * v;
        }
        for (double& v : m.row(i)) v /= std::sqrt(n);
    }
    return m;
}

double grad_error(std::span<const double> analytic, std::span<const double> numeric) {
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    return oracle::max_relative_error(analytic, numeric, std::max(1e-3 * scale, 1e-12));
}

template <typename F>
auto perturbing(Matrix<double>& target, F f) {
    return [&target, f](std::span<const double> v) {
        const Matrix<double> keep = target;
        std::copy(v.begin(), v.end(), target.flat().begin());
        const double out = f();
        target = keep;
        return out;
    };
}

std::vector<FramePair> random_pairs(std::size_t count, std::size_t na, std::size_t nb, Rng& rng) {
    std::vector<FramePair> out(count);
    for (auto& p : out) p = {rng.below(na), rng.below(nb)};
    return out;
}

Check dtw_check() {
    Rng rng(11);
    int equal = 0;
    int valid = 0;
    for (int t = 0; t < 40; ++t) {
        Matrix<float> a(1 + rng.below(5), 1 + rng.below(3));
        Matrix<float> b(1 + rng.below(5), a.cols());
        for (float& v : a.flat()) v = static_cast<float>(rng.normal());
        for (float& v : b.flat()) v = static_cast<float>(rng.normal());
        const IndexRange va{0, a.rows()}, vb{0, b.rows()};
        const AlignmentPath path = dtw_align(a, va, b, vb);
        equal += path.cost == oracle::dtw_cost_bruteforce(a, va, b, vb) ? 1 : 0;
        try {
            check_path(path);
            ++valid;
        } catch (const Error&) {
        }
    }
    return {"dtw_bruteforce", equal == 40 && valid == 40, fmt("%d/40 optimal costs, %d/40 valid paths", equal, valid)};
}

Check edit_check() {
    Rng rng(12);
    int equal = 0;
    for (int t = 0; t < 100; ++t) {
        std::vector<std::uint32_t> a(rng.below(8)), b(rng.below(8));
        for (auto& v : a) v = static_cast<std::uint32_t>(rng.below(3));
        for (auto& v : b) v = static_cast<std::uint32_t>(rng.below(3));
        equal += edit_distance(a, b) == oracle::levenshtein_recursive(a, b) ? 1 : 0;
    }
    return {"edit_distance", equal == 100, fmt("%d/100 pairs match recursive Levenshtein", equal)};
}

Check sinkhorn_check() {
    Rng rng(13);
    const Matrix<double> z = unit_rows(256, 16, rng);
    const Matrix<double> c = unit_rows(32, 16, rng);
    Matrix<double> s(z.rows(), c.rows());
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t k = 0; k < c.rows(); ++k) s(i, k) = dot(z.row(i), c.row(k));
    const AssignmentPlan plan = sinkhorn_balance(s);
    const auto [rows, cols] = oracle::marginals(plan.probs);
    double worst = 0.0;
    for (double r : rows) worst = std::max(worst, std::abs(r - 1.0));
    const double target = static_cast<double>(z.rows()) / static_cast<double>(c.rows());
    for (double v : cols) worst = std::max(worst, std::abs(v - target) / target);
    const Matrix<double> ref = oracle::sinkhorn_log_dense(s, 0.05, plan.iterations);
    double gap = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) gap = std::max(gap, std::abs(ref.flat()[i] - plan.probs.flat()[i]));
    return {"sinkhorn_marginals", plan.converged && worst <= 1e-6 && gap <= 1e-8,
            fmt("marginal error %.2g, gap to log-domain %.2g, %d iterations", worst, gap, plan.iterations)};
}

Check encoder_forward_check() {
    Rng rng(14);
    double worst = 0.0;
    for (int t = 0; t < 5; ++t) {
        const EncoderShape shape{3, 4 + rng.below(4), 2 + rng.below(4), 1 + rng.below(3)};
        const auto params = init_encoder<double>(shape, rng.next());
        Matrix<double> x(2 + rng.below(8), shape.input_dim);
        for (double& v : x.flat()) v = rng.normal();
        const auto got = encode(x, {0, x.rows()}, params).embeddings;
        const auto ref = oracle::encoder_forward_reference(x, params);
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref.flat()[i] - got.flat()[i]));
    }
    return {"encoder_forward", worst <= 1e-10, fmt("max deviation from reference %.2g", worst)};
}

Check encoder_gradient_check() {
    Rng rng(15);
    double worst = 0.0;
    for (int t = 0; t < 3; ++t) {
        const EncoderShape shape{2, 3, 2, 1 + rng.below(2)};
        EncoderParams<double> params = init_encoder<double>(shape, rng.next());
        Matrix<double> x(2 + rng.below(4), shape.input_dim);
        for (double& v : x.flat()) v = rng.normal();
        Matrix<double> up(x.rows(), shape.output_dim);
        for (double& v : up.flat()) v = rng.normal();
        EncoderCache<double> cache;
        encode(x, {0, x.rows()}, params, &cache);
        const auto g = encode_backward(cache, params, up);
        auto f = [&](std::span<const double> v) {
            EncoderParams<double> p = params;
            p.values.assign(v.begin(), v.end());
            const auto out = encode(x, {0, x.rows()}, p).embeddings;
            double acc = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) acc += out.flat()[i] * up.flat()[i];
            return acc;
        };
        worst = std::max(worst, grad_error(g.params, oracle::central_difference(f, params.values, 1e-3)));
    }
    return {"encoder_gradient", worst < 1e-6, fmt("worst relative error %.2g", worst)};
}

Check loss_gradient_check() {
    Rng rng(16);
    double worst = 0.0;
    for (int t = 0; t < 5; ++t) {
        const std::size_t d = 3, ta = 3, tb = 4, k = 4;
        Matrix<double> a = unit_rows(ta, d, rng);
        Matrix<double> b = unit_rows(tb, d, rng);
        Matrix<double> pool = unit_rows(5, d, rng);
        Matrix<double> cw = unit_rows(k, d, rng);
        const auto pairs = random_pairs(4, ta, tb, rng);
        std::vector<std::vector<std::uint32_t>> neg(pairs.size(), {0, 2, 4});
        const double tau = rng.uniform(0.2, 1.0);
        auto contrast = [&] { return contrastive_loss<double>(a, b, pairs, pool, neg, tau).loss; };
        const auto rc = contrastive_loss<double>(a, b, pairs, pool, neg, tau);
        worst = std::max({worst, grad_error(rc.grad_anchors.flat(), oracle::central_difference(perturbing(a, contrast), a.flat(), 1e-3)),
                          grad_error(rc.grad_pool.flat(), oracle::central_difference(perturbing(pool, contrast), pool.flat(), 1e-3))});

        Matrix<double> pa(ta, k, 1.0 / k), pb(tb, k, 1.0 / k);
        pa(0, 0) = 0.7;
        pa(0, 1) = pa(0, 2) = pa(0, 3) = 0.1;
        auto robust = [&] { return robust_consistency_loss<double>(a, b, pairs, pa, pb, cw, tau).loss; };
        const auto rr = robust_consistency_loss<double>(a, b, pairs, pa, pb, cw, tau);
        worst = std::max({worst, grad_error(rr.grad_b.flat(), oracle::central_difference(perturbing(b, robust), b.flat(), 1e-3)),
                          grad_error(rr.grad_codewords.flat(), oracle::central_difference(perturbing(cw, robust), cw.flat(), 1e-3))});
    }
    return {"loss_gradients", worst < 1e-6, fmt("contrastive and robust, worst relative error %.2g", worst)};
}

Check snr_check() {
    Rng rng(17);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        AudioClip speech{std::vector<float>(8000), 16000};
        for (std::size_t i = 0; i < speech.size(); ++i) {
            speech.samples[i] = static_cast<float>(0.3 * std::sin(0.05 * static_cast<double>(i)));
        }
        const AudioClip noise = white_noise(3000, 16000, rng.next());
        const double target = rng.uniform(-5.0, 20.0);
        const IndexRange valid{1000, 7000};
        const MixResult mix = mix_at_snr(speech, noise, target, valid);
        worst = std::max(worst, std::abs(oracle::measured_snr_db(speech.samples, mix.audio.samples, mix.peak_scale, valid) - target));
    }
    return {"snr_mixing", worst <= 0.1, fmt("worst |measured - target| %.2g dB", worst)};
}

Check mtwv_check() {
    const std::vector<DetectionTrial> hand{
        {"a", "qa", {{"a1", 0.9}, {"x1", 0.8}, {"a2", 0.5}}, {"a1", "a2"}, 202},
        {"b", "qb", {{"b1", 0.9}, {"b2", 0.5}, {"y1", 0.5}, {"y2", 0.2}}, {"b1", "b2", "b3", "b4"}, 404}};
    MtwvConfig cfg;
    cfg.thresholds = {0.3, 0.6, 0.95};
    const double got = mtwv(hand, cfg).mtwv;
    const double expected = 1.0 - ((20.0 / 200.0) + (0.5 + 20.0 / 400.0)) / 2.0;
    return {"mtwv_hand_case", std::abs(got - expected) < 1e-12, fmt("%.6f (expected %.6f)", got, expected)};
}

Check retrieval_check() {
    const auto corpus = token_corpus(60, 32, 10, 30, 18);
    std::vector<SegmentRecord> records;
    std::vector<std::vector<std::uint32_t>> raw;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        records.push_back({"t", static_cast<double>(i), 1.0, corpus[i]});
        raw.push_back(corpus[i].tokens);
    }
    IndexConfig ic;
    ic.vocab = 32;
    const TfIdfIndex index = build_index(records, ic);
    int agree = 0;
    for (std::size_t q = 0; q < 20; ++q) {
        const auto got = exact_scan(corpus[q].tokens, index, 5);
        const auto ref = oracle::tfidf_scan(raw, corpus[q].tokens, 32, 5);
        bool same = got.size() == ref.size();
        for (std::size_t i = 0; same && i < got.size(); ++i) {
            same = got[i].first == ref[i].first && std::abs(got[i].second - ref[i].second) < 1e-5;
        }
        agree += same ? 1 : 0;
    }
    return {"tfidf_scan", agree == 20, fmt("%d/20 queries match the reference ranking", agree)};
}

} // namespace

int run_selftest(const PipelineConfig&) {
    const std::vector<Check> checks{dtw_check(),          edit_check(),           sinkhorn_check(),
                                    encoder_forward_check(), encoder_gradient_check(), loss_gradient_check(),
                                    snr_check(),          mtwv_check(),           retrieval_check()};
    bool all = true;
    std::printf("%-20s %-6s %s\n", "check", "result", "detail");
    for (const auto& c : checks) {
        std::printf("%-20s %-6s %s\n", c.name.c_str(), c.pass ? "PASS" : "FAIL", c.detail.c_str());
        all = all && c.pass;
    }
    std::fflush(stdout);
    return all ? 0 : 3;
}

} // namespace tokstd::cli
