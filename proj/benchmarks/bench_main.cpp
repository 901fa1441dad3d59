#include "tokstd/alignment.hpp"
#include "tokstd/augment.hpp"
#include "tokstd/encoder.hpp"
#include "tokstd/features.hpp"
#include "tokstd/quantizer.hpp"
#include "tokstd/retrieval.hpp"
#include "tokstd/rng.hpp"
#include "tokstd/synthetic.hpp"
#include "tokstd/training.hpp"

#include <benchmark/benchmark.h>

#include <cmath>

using namespace tokstd;

namespace {

Matrix<double> unit_rows(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
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

void BM_Mfcc(benchmark::State& state) {
    const AudioClip clip = white_noise(static_cast<std::size_t>(state.range(0)) * 16000, 16000, 1);
    const FeatureConfig cfg;
    for (auto _ : state) {
        benchmark::DoNotOptimize(compute_mfcc(clip, cfg));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Mfcc)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_Dtw(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(2);
    Matrix<float> a(n, 48), b(n + n / 5, 48);
    for (float& v : a.flat()) v = static_cast<float>(rng.normal());
    for (float& v : b.flat()) v = static_cast<float>(rng.normal());
    for (auto _ : state) {
        benchmark::DoNotOptimize(dtw_align(a, {0, a.rows()}, b, {0, b.rows()}));
    }
}
BENCHMARK(BM_Dtw)->Arg(50)->Arg(100)->Arg(200)->Unit(benchmark::kMicrosecond);

void BM_Encode(benchmark::State& state) {
    const EncoderShape shape{48, 64, 32, 2};
    const auto params = init_encoder<double>(shape, 3);
    Rng rng(3);
    Matrix<double> x(static_cast<std::size_t>(state.range(0)), 48);
    for (double& v : x.flat()) v = rng.normal();
    for (auto _ : state) {
        benchmark::DoNotOptimize(encode(x, {0, x.rows()}, params));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Encode)->Arg(100)->Arg(1000)->Unit(benchmark::kMicrosecond);

void BM_Sinkhorn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const Matrix<double> z = unit_rows(n, 32, 4);
    const Matrix<double> c = unit_rows(k, 32, 5);
    Matrix<double> s(n, k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) s(i, j) = dot(z.row(i), c.row(j));
    for (auto _ : state) {
        benchmark::DoNotOptimize(sinkhorn_balance(s));
    }
}
BENCHMARK(BM_Sinkhorn)->Args({1024, 64})->Args({4096, 1024})->Unit(benchmark::kMillisecond);

void BM_EditDistance(benchmark::State& state) {
    const auto seqs = token_corpus(2, 64, static_cast<std::size_t>(state.range(0)),
                                   static_cast<std::size_t>(state.range(0)), 6);
    for (auto _ : state) {
        benchmark::DoNotOptimize(edit_distance(seqs[0].tokens, seqs[1].tokens));
    }
}
BENCHMARK(BM_EditDistance)->Arg(50)->Arg(200);

void BM_Search(benchmark::State& state) {
    const auto seqs = token_corpus(static_cast<std::size_t>(state.range(0)), 256, 20, 60, 7);
    std::vector<SegmentRecord> records;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        records.push_back({"t" + std::to_string(i / 100), static_cast<double>(i % 100), 1.0, seqs[i]});
    }
    IndexConfig ic;
    ic.vocab = 256;
    const TfIdfIndex index = build_index(records, ic);
    const SearchConfig sc;
    std::size_t q = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(search(seqs[q].tokens, index, sc));
        q = (q + 1) % seqs.size();
    }
}
BENCHMARK(BM_Search)->Arg(1000)->Arg(10000)->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
    MixtureCorpusSpec spec;
    FeaturePairSource source(mixture_corpus(spec));
    TrainingConfig cfg;
    cfg.encoder = {2, 16, 8, 1};
    cfg.codebook_size = 16;
    cfg.batch_size = 8;
    Rng rng(8);
    const auto params = init_encoder<double>(cfg.encoder, 8);
    const auto codebook = init_codebook_random<double>(cfg.codebook_size, cfg.encoder.output_dim, 9);
    for (auto _ : state) {
        const PairBatch batch = source.next_batch(cfg.batch_size, rng);
        const auto fwd = forward_batch(batch, params);
        const auto targets = make_targets(batch, fwd, codebook, cfg, rng);
        benchmark::DoNotOptimize(batch_loss(batch, fwd, params, codebook.codewords, targets, cfg));
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
