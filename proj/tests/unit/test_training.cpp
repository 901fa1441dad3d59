#include "oracles.hpp"
#include "tokstd/error.hpp"
#include "tokstd/synthetic.hpp"
#include "tokstd/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace tokstd;

namespace {

Matrix<double> from_rows(std::initializer_list<std::vector<double>> values) {
    const std::size_t d = values.begin()->size();
    Matrix<double> m(values.size(), d);
    std::size_t r = 0;
    for (const auto& v : values) {
        std::copy(v.begin(), v.end(), m.row(r++).begin());
    }
    return m;
}

Matrix<double> random_unit_rows(std::size_t r, std::size_t c, Rng& rng) {
    Matrix<double> m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        double sq = 0.0;
        for (double& v : m.row(i)) {
            v = rng.normal();
            sq += v * v;
        }
        for (double& v : m.row(i)) {
            v /= std::sqrt(sq);
        }
    }
    return m;
}

std::vector<LabeledFeatures> small_corpus(std::uint64_t seed) {
    MixtureCorpusSpec spec;
    spec.terms = 4;
    spec.utterances_per_term = 3;
    spec.segments_min = spec.segments_max = 2;
    spec.hold_min = 2;
    spec.hold_max = 3;
    spec.seed = seed;
    return mixture_corpus(spec);
}

TrainingConfig small_config() {
    TrainingConfig cfg;
    cfg.encoder = {2, 4, 3, 1};
    cfg.codebook_size = 4;
    cfg.batch_size = 3;
    cfg.k_neg = 3;
    cfg.steps = 0;
    cfg.seed = 5;
    return cfg;
}

} // namespace

TEST(Contrastive, NoNegativesGivesZero) {
    const Matrix<double> z = from_rows({{1, 0}});
    const std::vector<FramePair> pairs{{0, 0}};
    const std::vector<std::vector<std::uint32_t>> neg(1);
    const auto r = contrastive_loss<double>(z, z, pairs, Matrix<double>(), neg, 0.1);
    EXPECT_EQ(r.loss, 0.0);
}

TEST(Contrastive, SingleNegativeClosedForm) {
    const Matrix<double> z = from_rows({{1, 0}});
    const Matrix<double> pool = from_rows({{0, 1}});
    const std::vector<FramePair> pairs{{0, 0}};
    const std::vector<std::vector<std::uint32_t>> neg{{0}};
    const auto r = contrastive_loss<double>(z, z, pairs, pool, neg, 1.0);
    EXPECT_NEAR(r.loss, -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
    EXPECT_NEAR(r.loss, 0.31326, 1e-5);
}

TEST(Contrastive, GradientsMatchFiniteDifferences) {
    Rng rng(21);
    Matrix<double> a = random_unit_rows(2, 3, rng);
    Matrix<double> p = random_unit_rows(2, 3, rng);
    Matrix<double> pool = random_unit_rows(3, 3, rng);
    const std::vector<FramePair> pairs{{0, 0}, {1, 1}};
    const std::vector<std::vector<std::uint32_t>> neg{{0, 2}, {1, 2}};
    const auto r = contrastive_loss<double>(a, p, pairs, pool, neg, 0.5);
    auto with = [&](Matrix<double>& m) {
        return [&](std::span<const double> v) {
            const Matrix<double> keep = m;
            std::copy(v.begin(), v.end(), m.flat().begin());
            const double out = contrastive_loss<double>(a, p, pairs, pool, neg, 0.5).loss;
            m = keep;
            return out;
        };
    };
    EXPECT_LT(oracle::max_relative_error(r.grad_anchors.flat(),
                                         oracle::central_difference(with(a), a.flat(), 1e-3), 1e-6),
              1e-6);
    EXPECT_LT(oracle::max_relative_error(r.grad_positives.flat(),
                                         oracle::central_difference(with(p), p.flat(), 1e-3), 1e-6),
              1e-6);
    EXPECT_LT(oracle::max_relative_error(r.grad_pool.flat(),
                                         oracle::central_difference(with(pool), pool.flat(), 1e-3), 1e-6),
              1e-6);
}

TEST(Contrastive, NonPositiveTauIsParameterError) {
    const Matrix<double> z = from_rows({{1, 0}});
    const std::vector<FramePair> pairs{{0, 0}};
    const std::vector<std::vector<std::uint32_t>> neg(1);
    try {
        contrastive_loss<double>(z, z, pairs, Matrix<double>(), neg, 0.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Parameter);
    }
}

TEST(Commitment, ClosedForms) {
    const Matrix<double> z = from_rows({{1, 0}, {0, 1}});
    EXPECT_DOUBLE_EQ(commitment_loss<double>(z, z, {0, 2}).loss, -1.0);
    EXPECT_DOUBLE_EQ(commitment_loss<double>(z, from_rows({{0, 1}, {1, 0}}), {0, 2}).loss, 0.0);
    EXPECT_DOUBLE_EQ(commitment_loss<double>(z, from_rows({{1, 0}, {1, 0}}), {0, 2}).loss, -0.5);
}

TEST(Commitment, GradientIgnoresPaddingFrames) {
    const Matrix<double> z = from_rows({{1, 0}, {0, 1}, {1, 0}});
    const auto r = commitment_loss<double>(z, z, {1, 2});
    EXPECT_EQ(r.grad(0, 0), 0.0);
    EXPECT_EQ(r.grad(2, 0), 0.0);
    EXPECT_DOUBLE_EQ(r.grad(1, 1), -1.0);
}

class BatchFixture : public ::testing::Test {
protected:
    void SetUp() override {
        corpus = small_corpus(4);
        cfg = small_config();
        FeaturePairSource source(corpus);
        Rng rng(7);
        batch = source.next_batch(cfg.batch_size, rng);
        params = init_encoder<double>(cfg.encoder, 8);
        codebook = init_codebook_random<double>(cfg.codebook_size, cfg.encoder.output_dim, 9);
        Rng neg_rng(10);
        targets = make_targets(batch, forward_batch(batch, params), codebook, cfg, neg_rng);
    }

    std::vector<LabeledFeatures> corpus;
    TrainingConfig cfg;
    PairBatch batch;
    EncoderParams<double> params;
    Codebook<double> codebook;
    BatchTargets targets;
};

TEST_F(BatchFixture, TargetsHaveExpectedShapes) {
    std::size_t valid = 0;
    for (const auto& item : batch) {
        valid += item.clean.valid.size() + item.partner.valid.size();
    }
    EXPECT_EQ(targets.pool.size(), valid);
    EXPECT_EQ(std::accumulate(targets.assignment_counts.begin(), targets.assignment_counts.end(), std::uint64_t{0}),
              valid);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& it = targets.items[i];
        EXPECT_EQ(it.negatives.size(), it.pairs.size());
        for (const auto& neg : it.negatives) {
            EXPECT_LE(neg.size(), cfg.k_neg);
            std::vector<std::uint32_t> sorted = neg;
            std::sort(sorted.begin(), sorted.end());
            EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
            for (auto r : neg) {
                EXPECT_NE(batch[targets.pool[r].item].label, batch[i].label);
            }
        }
        for (std::size_t t = 0; t < it.clean_plan.rows(); ++t) {
            const auto row = it.clean_plan.row(t);
            const double sum = std::accumulate(row.begin(), row.end(), 0.0);
            if (batch[i].clean.valid.contains(t)) {
                EXPECT_NEAR(sum, 1.0, 1e-3);
            } else {
                EXPECT_EQ(sum, 0.0);
            }
        }
    }
}

TEST_F(BatchFixture, ZeroWeightsReduceToContrastive) {
    TrainingConfig c = cfg;
    c.lambda1 = 0.0;
    c.lambda2 = 0.0;
    const auto loss = total_loss(batch, params, codebook.codewords, targets, c);
    EXPECT_EQ(loss.total, loss.contrastive);
    EXPECT_EQ(loss.robust, 0.0);
    EXPECT_EQ(loss.commitment, 0.0);
    for (double g : loss.grad_codewords.flat()) {
        EXPECT_EQ(g, 0.0);
    }
}

TEST_F(BatchFixture, TotalIsWeightedSum) {
    const auto loss = total_loss(batch, params, codebook.codewords, targets, cfg);
    EXPECT_NEAR(loss.total, loss.contrastive + cfg.lambda1 * loss.robust + cfg.lambda2 * loss.commitment, 1e-12);
}

TEST_F(BatchFixture, GradientsMatchFiniteDifferences) {
    TrainingConfig c = cfg;
    c.lambda1 = 0.7;
    c.lambda2 = 1.3;
    const auto loss = total_loss(batch, params, codebook.codewords, targets, c);
    auto by_params = [&](std::span<const double> v) {
        EncoderParams<double> p = params;
        std::copy(v.begin(), v.end(), p.values.begin());
        return total_loss(batch, p, codebook.codewords, targets, c).total;
    };
    // Commitment holds the quantised side constant.
    TrainingConfig no_commit = c;
    no_commit.lambda2 = 0.0;
    auto by_codewords = [&](std::span<const double> v) {
        Matrix<double> cw = codebook.codewords;
        std::copy(v.begin(), v.end(), cw.flat().begin());
        return total_loss(batch, params, cw, targets, no_commit).total;
    };
    EXPECT_LT(oracle::max_relative_error(loss.grad_params,
                                         oracle::central_difference(by_params, params.values, 1e-3), 1e-6),
              1e-6);
    EXPECT_LT(oracle::max_relative_error(total_loss(batch, params, codebook.codewords, targets, no_commit)
                                             .grad_codewords.flat(),
                                         oracle::central_difference(by_codewords, codebook.codewords.flat(), 1e-3),
                                         1e-6),
              1e-6);
}

TEST_F(BatchFixture, DuplicatedBatchLeavesLossUnchanged) {
    for (TargetMode mode : {TargetMode::OptimalTransport, TargetMode::ArgmaxOneHot}) {
        TrainingConfig c = cfg;
        c.k_neg = 0;
        c.targets = mode;
        const PairBatch single{batch[0]};
        const PairBatch doubled{batch[0], batch[0]};
        Rng r1(1);
        Rng r2(1);
        const auto t1 = make_targets(single, forward_batch(single, params), codebook, c, r1);
        const auto t2 = make_targets(doubled, forward_batch(doubled, params), codebook, c, r2);
        const double l1 = total_loss(single, params, codebook.codewords, t1, c).total;
        const double l2 = total_loss(doubled, params, codebook.codewords, t2, c).total;
        EXPECT_NEAR(l1, l2, 1e-9 * std::max(1.0, std::abs(l1)));
    }
}

TEST_F(BatchFixture, SingleLabelBatchCannotSampleNegatives) {
    const PairBatch same{batch[0], batch[0]};
    Rng rng(2);
    try {
        make_targets(same, forward_batch(same, params), codebook, cfg, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Sampling);
    }
}

TEST(Adam, FirstStepMovesByLearningRate) {
    Adam opt(2, 0.1, 0.9, 0.999, 1e-8);
    std::vector<double> p{1.0, -1.0};
    const std::vector<double> g{3.0, -0.5};
    opt.step(p, g);
    EXPECT_NEAR(p[0], 0.9, 1e-7);
    EXPECT_NEAR(p[1], -0.9, 1e-7);
}

TEST(Sampling, GroupsAndPairs) {
    const std::vector<std::string> terms{"a", "b", "a", "c", "b"};
    const auto groups = group_by_term(terms);
    ASSERT_EQ(groups.size(), 3u);
    EXPECT_EQ(groups[0], (std::vector<std::size_t>{0, 2}));
    const std::vector<std::string> speakers{"x", "x", "y", "x", "x"};
    const std::vector<std::size_t> lengths{5, 3, 9, 4, 8};
    Rng rng(3);
    const auto pairs = choose_pairs(groups, speakers, lengths, 6, rng);
    ASSERT_EQ(pairs.size(), 6u);
    for (const auto& p : pairs) {
        EXPECT_NE(p.anchor, p.partner);
        EXPECT_EQ(terms[p.anchor], terms[p.partner]);
        EXPECT_GE(lengths[p.partner], lengths[p.anchor]);
    }
}

TEST(Sampling, TooFewTermsIsSamplingError) {
    const std::vector<std::string> terms{"a", "a", "b"};
    try {
        group_by_term(terms);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Sampling);
    }
}

TEST(Train, ZeroStepsReturnsInitialisation) {
    const auto corpus = small_corpus(1);
    FeaturePairSource source(corpus);
    TrainingConfig cfg = small_config();
    const auto result = train(cfg, source);
    EXPECT_EQ(result.encoder.values, init_encoder<double>(cfg.encoder, derive_seed(cfg.seed, {1})).values);
    EXPECT_EQ(result.codebook.codewords,
              init_codebook_random<double>(cfg.codebook_size, cfg.encoder.output_dim, derive_seed(cfg.seed, {2}))
                  .codewords);
    EXPECT_TRUE(result.metrics.empty());
}

TEST(Train, DeterministicForSeed) {
    const auto corpus = small_corpus(2);
    TrainingConfig cfg = small_config();
    cfg.steps = 15;
    FeaturePairSource s1(corpus);
    FeaturePairSource s2(corpus);
    const auto a = train(cfg, s1);
    const auto b = train(cfg, s2);
    EXPECT_EQ(a.encoder.values, b.encoder.values);
    EXPECT_EQ(a.codebook.codewords, b.codebook.codewords);
    EXPECT_EQ(a.codebook.usage, b.codebook.usage);
    cfg.seed = 6;
    FeaturePairSource s3(corpus);
    EXPECT_NE(train(cfg, s3).encoder.values, a.encoder.values);
}

TEST(Train, LossFallsAcrossWindows) {
    MixtureCorpusSpec spec;
    spec.seed = 3;
    FeaturePairSource source(mixture_corpus(spec));
    TrainingConfig cfg;
    cfg.seed = 3;
    cfg.steps = 1500;
    cfg.codebook_size = 16;
    cfg.encoder = {2, 16, 8, 1};
    const auto result = train(cfg, source);
    std::vector<double> means;
    for (std::size_t w = 0; w < 3; ++w) {
        double acc = 0.0;
        for (std::size_t s = w * 500; s < (w + 1) * 500; ++s) {
            acc += result.metrics[s].total;
        }
        means.push_back(acc / 500.0);
    }
    EXPECT_LT(means[1], means[0]);
    EXPECT_LT(means[2], means[1]);
}

TEST(Train, WritesArtifacts) {
    const auto dir = std::filesystem::temp_directory_path() / "tokstd_train_artifacts";
    std::filesystem::remove_all(dir);
    const auto corpus = small_corpus(3);
    FeaturePairSource source(corpus);
    TrainingConfig cfg = small_config();
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    train(cfg, source, dir);
    EXPECT_TRUE(std::filesystem::exists(dir / "metrics.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "encoder.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "codebook.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "usage.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_2" / "encoder.bin"));
    std::ifstream csv(dir / "metrics.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, metrics_csv_header());
    std::size_t lines = 0;
    for (std::string line; std::getline(csv, line);) {
        ++lines;
    }
    EXPECT_EQ(lines, 4u);
}

TEST(Train, MismatchedInputDimIsConfigError) {
    const auto corpus = small_corpus(1);
    FeaturePairSource source(corpus);
    TrainingConfig cfg = small_config();
    cfg.encoder.input_dim = 5;
    try {
        train(cfg, source);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
}

TEST(Train, InvalidConfigIsParameterError) {
    TrainingConfig cfg = small_config();
    cfg.batch_size = 1;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = small_config();
    cfg.tau = -1.0;
    EXPECT_THROW(cfg.validate(), Error);
}
