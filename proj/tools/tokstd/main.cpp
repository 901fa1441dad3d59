#include "commands.hpp"
#include "config.hpp"
#include "log.hpp"

#include "tokstd/error.hpp"

#include <CLI11.hpp>

#include <functional>
#include <memory>
#include <optional>

using namespace tokstd;
using namespace tokstd::cli;

namespace {

int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Parameter:
        return 1;
    case ErrorKind::Numeric:
        return 3;
    default:
        return 2;
    }
}

/// Flags land in optionals and are applied over the config after it loads.
class Overrides {
public:
    template <typename T, typename Access>
    CLI::Option* add(CLI::App* app, const std::string& name, const std::string& help, Access access) {
        auto value = std::make_shared<std::optional<T>>();
        apply_.push_back([value, access](PipelineConfig& c) {
            if (*value) access(c) = **value;
        });
        return app->add_option(name, *value, help);
    }

    template <typename Access>
    CLI::Option* flag(CLI::App* app, const std::string& name, const std::string& help, Access access) {
        auto value = std::make_shared<bool>(false);
        apply_.push_back([value, access](PipelineConfig& c) {
            if (*value) access(c) = true;
        });
        return app->add_flag(name, *value, help);
    }

    void apply(PipelineConfig& c) const {
        for (const auto& f : apply_) f(c);
    }

private:
    std::vector<std::function<void(PipelineConfig&)>> apply_;
};

#define AT(expr) [](PipelineConfig& c) -> auto& { return c.expr; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tokstd: noise-robust discrete speech tokens and spoken term search.\n"
                 "Settings come from defaults, then --cfg FILE (JSON), then flags; later sources win."};
    app.require_subcommand(1, 1);
    app.set_help_flag("--help", "Print this help message and exit");
    app.fallthrough();

    Overrides ov;
    std::optional<std::string> cfg_path;
    bool quiet = false;

    FeaturesArgs fa;
    auto* features = app.add_subcommand("features", "Extract MFCC feature files from a directory of WAVs");
    features->add_option("--in", fa.in, "Input WAV directory")->required();
    features->add_option("--out", fa.out, "Output feature directory")->required();
    ov.add<int>(features, "--mfcc", "Static cepstral coefficients", AT(features.n_mfcc));
    ov.add<double>(features, "--win-ms", "Window length in ms", AT(features.win_ms));
    ov.add<double>(features, "--hop-ms", "Hop in ms", AT(features.hop_ms));
    ov.add<double>(features, "--pad-s", "Centre each clip in this many seconds (0 disables)", AT(pad_seconds));
    ov.add<int>(features, "--sample-rate", "Analysis rate; input is decimated to it", AT(features.sample_rate));

    AugmentArgs aa;
    auto* augment = app.add_subcommand("augment", "Write noisy and reverberant copies of WAVs");
    augment->add_option("--in", aa.in, "Input WAV directory")->required();
    augment->add_option("--out", aa.out, "Output WAV directory")->required();
    ov.add<std::string>(augment, "--noise-dir", "Noise WAV directory", AT(augment.noise_dir));
    ov.add<std::string>(augment, "--rir-dir", "Room impulse response WAV directory", AT(augment.rir_dir));
    ov.add<double>(augment, "--snr-lo", "Lowest SNR in dB", AT(augment.snr_lo));
    ov.add<double>(augment, "--snr-hi", "Highest SNR in dB", AT(augment.snr_hi));
    ov.add<double>(augment, "--reverb-prob", "Probability of reverberation", AT(augment.reverb_prob));

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train the encoder and codebook from a JSONL manifest");
    train->add_option("--manifest", ta.manifest,
                      "JSONL with term, wav_path or feat_path, optional speaker_id")->required();
    train->add_option("--out", ta.out, "Checkpoint directory")->required();
    ov.add<std::size_t>(train, "--steps", "Optimisation steps", AT(training.steps));
    ov.add<std::size_t>(train, "--batch-size", "Pairs per batch", AT(training.batch_size));
    ov.add<double>(train, "--lr", "Adam learning rate", AT(training.lr));
    ov.add<std::size_t>(train, "--codebook-size", "Number of codewords", AT(training.codebook_size));
    ov.add<std::size_t>(train, "--k-neg", "Negatives per positive pair", AT(training.k_neg));
    ov.add<double>(train, "--pad-s", "Fixed utterance length in seconds", AT(pad_seconds));
    ov.add<std::string>(train, "--noise-dir", "Noise WAV directory for partner distortion", AT(augment.noise_dir));
    ov.add<std::string>(train, "--rir-dir", "Room impulse response WAV directory", AT(augment.rir_dir));

    TokenizeArgs ka;
    auto* tok = app.add_subcommand("tokenize", "Print token sequences for a WAV or directory of WAVs");
    tok->add_option("--ckpt", ka.ckpt, "Encoder checkpoint (directory, base or .json)")->required();
    tok->add_option("--codebook", ka.codebook, "Codebook (directory, base or .json)")->required();
    tok->add_option("--in", ka.in, "WAV file or directory")->required();
    tok->add_option("--out", ka.out, "Write JSON lines here instead of stdout");

    IndexArgs ia;
    auto* index = app.add_subcommand("index", "Segment, tokenize and index a directory of tracks");
    index->add_option("--tracks", ia.tracks, "Track WAV directory; file stems become track ids")->required();
    index->add_option("--codebook", ia.codebook, "Codebook (directory, base or .json)")->required();
    index->add_option("--ckpt", ia.ckpt, "Encoder checkpoint (directory, base or .json)")->required();
    index->add_option("--out", ia.out, "Index directory")->required();
    ov.add<double>(index, "--l", "Segment length in seconds", AT(segment_seconds));
    ov.add<double>(index, "--h", "Segment hop in seconds", AT(hop_seconds));
    ov.add<std::size_t>(index, "--n-list", "Inverted lists", AT(index.n_list));

    SearchArgs sa;
    auto* search = app.add_subcommand("search", "Query an index with a WAV; prints JSON lines");
    search->add_option("--index", sa.index, "Index directory")->required();
    search->add_option("--query", sa.query, "Query WAV")->required();
    ov.add<std::size_t>(search, "--topk", "Results to print", AT(topk));
    ov.flag(search, "--dtw-rerank", "Rerank survivors by DTW against codewords", AT(search.dtw_rerank));
    ov.add<std::size_t>(search, "--n1", "Stage 1 fan-out", AT(search.n1));
    ov.add<std::size_t>(search, "--n2", "Stage 2 fan-out", AT(search.n2));
    ov.add<std::size_t>(search, "--n3", "Stage 3 fan-out", AT(search.n3));
    ov.add<std::size_t>(search, "--nprobe", "Inverted lists probed", AT(search.nprobe));

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Run queries under clean and distorted conditions and report MTWV");
    eval->add_option("--index", ea.index, "Index directory")->required();
    eval->add_option("--queries", ea.queries, "JSONL with term, wav_path, optional id and condition")->required();
    eval->add_option("--truth", ea.truth, "JSONL with term, track_id, start_s, end_s")->required();
    eval->add_option("--conditions", ea.conditions,
                     "JSON array of {name, snr_db, reverb} or {snr_grid, reverb}; default is the standard grid");
    eval->add_option("--out", ea.out, "Report directory")->required();
    ov.add<std::string>(eval, "--noise-dir", "Noise WAV directory", AT(augment.noise_dir));
    ov.add<std::string>(eval, "--rir-dir", "Room impulse response WAV directory", AT(augment.rir_dir));
    ov.add<double>(eval, "--beta", "False alarm weight", AT(metric.beta));

    app.add_subcommand("selftest", "Run the built-in oracle checks");

    app.add_option("--cfg", cfg_path, "JSON config file");
    ov.add<std::uint64_t>(&app, "--seed", "Root seed for every random stream", AT(seed));
    ov.add<std::size_t>(&app, "--threads", "Worker threads (0: hardware concurrency)", AT(threads));
    ov.flag(&app, "--deterministic", "Single-threaded with byte-identical artifacts", AT(deterministic));
    app.add_flag("--quiet", quiet, "Only log warnings and errors");

    app.set_help_flag();
    app.set_help_all_flag("--help", "Print help for every subcommand and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    CLI::App* cmd = app.get_subcommands().front();
    set_log_command(cmd->get_name());
    set_quiet(quiet);
    try {
        PipelineConfig cfg = cfg_path ? load_config(*cfg_path) : PipelineConfig{};
        ov.apply(cfg);
        cfg.finalize();
        cfg.validate();

        const std::string name = cmd->get_name();
        if (name == "features") return run_features(cfg, fa);
        if (name == "augment") return run_augment(cfg, aa);
        if (name == "train") return run_train(cfg, ta);
        if (name == "tokenize") return run_tokenize(cfg, ka);
        if (name == "index") return run_index(cfg, ia);
        if (name == "search") return run_search(cfg, sa);
        if (name == "eval") return run_eval(cfg, ea);
        return run_selftest(cfg);
    } catch (const Error& e) {
        log("error", e.what(), {{"kind", std::string(to_string(e.kind()))}});
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        log("error", e.what());
        return 2;
    }
}
