#include "tokstd/error.hpp"
#include "tokstd/evaluation.hpp"
#include "tokstd/synthetic.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

using namespace tokstd;

namespace {

TokenSequence seq(std::vector<std::uint32_t> t) {
    TokenSequence s;
    s.tokens = std::move(t);
    return s;
}

DetectionTrial trial(const std::string& term, std::vector<Detection> returned, std::set<std::string> truth,
                     std::size_t universe) {
    return {term, term + "_q", std::move(returned), std::move(truth), universe};
}

std::vector<DetectionTrial> hand_case() {
    return {trial("a", {{"a1", 0.9}, {"x1", 0.8}, {"a2", 0.5}}, {"a1", "a2"}, 202),
            trial("b", {{"b1", 0.9}, {"b2", 0.5}, {"y1", 0.5}, {"y2", 0.2}}, {"b1", "b2", "b3", "b4"}, 404)};
}

} // namespace

TEST(Consistency, MeanJaccard) {
    const std::vector<std::pair<TokenSequence, TokenSequence>> pairs{{seq({1, 2}), seq({2, 1})},
                                                                      {seq({1, 2, 3}), seq({2, 3, 4})}};
    EXPECT_DOUBLE_EQ(token_consistency(pairs), 0.75);
    const std::vector<std::pair<TokenSequence, TokenSequence>> swapped{{seq({2, 3, 4}), seq({1, 2, 3})},
                                                                        {seq({2, 1}), seq({1, 2})}};
    EXPECT_DOUBLE_EQ(token_consistency(swapped), 0.75);
    const std::vector<std::pair<TokenSequence, TokenSequence>> disjoint{{seq({1}), seq({2})}};
    EXPECT_DOUBLE_EQ(token_consistency(disjoint), 0.0);
    EXPECT_THROW(token_consistency({}), Error);
}

TEST(Mtwv, HandComputedTwoTermsThreeThresholds) {
    MtwvConfig cfg;
    cfg.thresholds = {0.3, 0.6, 0.95};
    const auto trials = hand_case();
    const auto r = mtwv(trials, cfg);
    // theta 0.3: a misses 0/2, FA 1/200; b misses 2/4, FA 1/400.
    const double t03 = 1.0 - ((0.0 + 20.0 * (1.0 / 200.0)) + (2.0 / 4.0 + 20.0 * (1.0 / 400.0))) / 2.0;
    // theta 0.6: a misses 1/2, FA 1/200; b misses 3/4, no FA.
    const double t06 = 1.0 - ((1.0 / 2.0 + 20.0 * (1.0 / 200.0)) + (3.0 / 4.0)) / 2.0;
    ASSERT_EQ(r.curve.size(), 3u);
    EXPECT_EQ(r.curve[0].twv, t03);
    EXPECT_EQ(r.curve[1].twv, t06);
    EXPECT_EQ(r.curve[2].twv, 0.0);
    EXPECT_EQ(r.mtwv, t03);
    EXPECT_NEAR(r.mtwv, 0.675, 1e-12);
    EXPECT_EQ(r.best_threshold, 0.3);
    ASSERT_EQ(r.terms.size(), 2u);
    EXPECT_EQ(r.terms[0].hits, 2u);
    EXPECT_EQ(r.terms[1].false_alarms, 1u);
}

TEST(Mtwv, PerfectAndEmptySystems) {
    const std::vector<DetectionTrial> perfect{trial("a", {{"a1", 0.7}, {"a2", 0.4}}, {"a1", "a2"}, 10),
                                              trial("b", {{"b1", 0.2}}, {"b1"}, 10)};
    EXPECT_EQ(mtwv(perfect, {}).mtwv, 1.0);
    const std::vector<DetectionTrial> empty{trial("a", {}, {"a1"}, 10), trial("b", {}, {"b1", "b2"}, 10)};
    EXPECT_EQ(mtwv(empty, {}).mtwv, 0.0);
}

TEST(Mtwv, InvariantUnderMonotoneTransform) {
    auto trials = hand_case();
    const double base = mtwv(trials, {}).mtwv;
    for (auto& t : trials) {
        for (auto& d : t.returned) {
            d.score = std::exp(3.0 * d.score) - 7.0;
        }
    }
    EXPECT_DOUBLE_EQ(mtwv(trials, {}).mtwv, base);
}

TEST(Mtwv, NeverExceedsOne) {
    Rng rng(4);
    for (int round = 0; round < 50; ++round) {
        std::vector<DetectionTrial> trials;
        for (int term = 0; term < 3; ++term) {
            DetectionTrial t = trial("t" + std::to_string(term), {}, {"s0"}, 20);
            for (int s = 0; s < 6; ++s) {
                if (rng.bernoulli(0.5)) {
                    t.returned.push_back({"s" + std::to_string(s), rng.uniform()});
                }
            }
            trials.push_back(t);
        }
        const auto r = mtwv(trials, {});
        EXPECT_LE(r.mtwv, 1.0);
        for (const auto& p : r.curve) {
            EXPECT_LE(p.twv, 1.0);
        }
    }
}

TEST(Mtwv, QueriesOfOneTermArePooled) {
    const std::vector<DetectionTrial> trials{trial("a", {{"a1", 0.9}, {"x", 0.1}}, {"a1"}, 10),
                                             trial("a", {{"a1", 0.3}, {"x", 0.2}}, {"a1"}, 10)};
    const auto r = mtwv(trials, {});
    ASSERT_EQ(r.terms.size(), 1u);
    EXPECT_EQ(r.mtwv, 1.0);
    EXPECT_EQ(r.best_threshold, 0.9);
}

TEST(Mtwv, TermWithoutTruthIsExcludedWithWarning) {
    const std::vector<DetectionTrial> trials{trial("a", {{"a1", 0.9}}, {"a1"}, 10),
                                             trial("ghost", {{"z", 0.9}}, {}, 10)};
    const auto r = mtwv(trials, {});
    EXPECT_EQ(r.terms.size(), 1u);
    ASSERT_EQ(r.warnings.size(), 1u);
    EXPECT_NE(r.warnings[0].find("ghost"), std::string::npos);
    EXPECT_EQ(r.mtwv, 1.0);
}

TEST(Mtwv, ConfigValidation) {
    MtwvConfig cfg;
    cfg.beta = 0.0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg.beta = 20.0;
    cfg.thresholds = {0.5, 0.2};
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(GroundTruth, HalfOfTheTermMustBeCovered) {
    std::vector<SegmentRecord> segs;
    for (int i = 0; i < 4; ++i) {
        TokenSequence t = seq({1});
        t.segment_id = "trk:" + std::to_string(i);
        segs.push_back({"trk", 0.5 * i, 1.0, t});
    }
    const std::vector<Occurrence> truth{{"w", "trk", 1.2, 1.6}, {"w", "other", 0.0, 1.0}, {"v", "trk", 0.0, 0.2}};
    const auto gt = ground_truth(segs, truth, "w");
    // Segments [0.5,1.5) and [1.0,2.0) hold 0.3 s and 0.4 s of the 0.4 s word.
    EXPECT_EQ(gt, (std::set<std::string>{"trk:1", "trk:2"}));
}

TEST(Conditions, StandardGridNames) {
    const std::vector<double> grid{0.0, 5.0};
    const auto c = standard_conditions(grid);
    ASSERT_EQ(c.size(), 5u);
    EXPECT_EQ(c[0].name, "clean");
    EXPECT_EQ(c[1].name, "noise_0dB");
    EXPECT_EQ(c[2].name, "noise_reverb_0dB");
    EXPECT_TRUE(c[2].reverb);
    EXPECT_EQ(standard_conditions(grid, false).size(), 3u);
}

class ExperimentFixture : public ::testing::Test {
protected:
    void SetUp() override {
        ToneCorpusSpec spec;
        spec.terms = 6;
        spec.utterances_per_term = 2;
        spec.seed = 2;
        std::vector<LabeledClip> clips;
        for (auto& c : tone_corpus(spec)) {
            if (std::none_of(clips.begin(), clips.end(), [&](const LabeledClip& k) { return k.term == c.term; })) {
                clips.push_back(std::move(c));
            }
        }
        tokenizer.encoder = init_encoder<double>({48, 16, 8, 1}, 3);
        tokenizer.codebook = init_codebook_random<double>(32, 8, 4);
        std::vector<SegmentRecord> segments;
        for (std::size_t i = 0; i < clips.size(); ++i) {
            const PaddedClip padded = pad_to_fixed(clips[i].audio, std::nullopt, 1.0);
            const std::string track = "track" + std::to_string(i);
            for (auto& r : tokenize_track(track, padded.clip, tokenizer, 1.0, 1.0)) {
                segments.push_back(std::move(r));
            }
            inputs.queries.push_back({"q" + std::to_string(i), clips[i].term, padded.clip, ""});
            inputs.truth.push_back({clips[i].term, track, 0.0, 1.0});
        }
        IndexConfig icfg;
        icfg.vocab = 32;
        index = build_index(segments, icfg);
        inputs.index = &index;
        inputs.tokenizer = &tokenizer;
        inputs.noise_bank = {white_noise(16000, 16000, 9)};
        inputs.seed = 5;
    }

    Tokenizer tokenizer;
    TfIdfIndex index;
    ExperimentInputs inputs;
};

TEST_F(ExperimentFixture, CleanSelfQueriesScorePerfectly) {
    inputs.conditions = {{"clean", std::nullopt, false}};
    const auto report = run_experiment(inputs);
    ASSERT_EQ(report.conditions.size(), 1u);
    EXPECT_EQ(report.conditions[0].queries, 6u);
    EXPECT_EQ(report.conditions[0].mtwv, 1.0);
    EXPECT_EQ(report.conditions[0].token_consistency, 1.0);
}

TEST_F(ExperimentFixture, DeterministicAndNoisyNeverBeatsClean) {
    const std::vector<double> grid{0.0};
    inputs.conditions = standard_conditions(grid, false);
    const auto a = run_experiment(inputs);
    const auto b = run_experiment(inputs);
    EXPECT_EQ(report_json(a), report_json(b));
    EXPECT_EQ(report_csv(a), report_csv(b));
    EXPECT_LE(a.conditions[1].mtwv, a.conditions[0].mtwv);
    EXPECT_LE(a.conditions[1].token_consistency, 1.0);

    inputs.threads = 2;
    EXPECT_EQ(report_json(run_experiment(inputs)), report_json(a));
}

TEST_F(ExperimentFixture, MissingArtifactsAreConfigErrors) {
    inputs.conditions = {{"noisy", 5.0, false}};
    inputs.noise_bank.clear();
    try {
        run_experiment(inputs);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
    inputs.tokenizer = nullptr;
    EXPECT_THROW(run_experiment(inputs), Error);
}

TEST_F(ExperimentFixture, WritesCsvAndJson) {
    inputs.conditions = {{"clean", std::nullopt, false}};
    const auto dir = std::filesystem::temp_directory_path() / "tokstd_report";
    std::filesystem::remove_all(dir);
    write_report(dir, run_experiment(inputs));
    std::ifstream csv(dir / "report.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "condition,snr_db,reverb,queries,mtwv,best_threshold,token_consistency");
    EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
}
