#include "commands.hpp"

#include "log.hpp"

#include "tokstd/audio.hpp"
#include "tokstd/error.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

namespace tokstd::cli {
namespace {

using nlohmann::json;

std::vector<fs::path> list_wavs(const fs::path& dir) {
    require(fs::is_directory(dir), ErrorKind::Config, "not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (entry.is_regular_file() && ext == ".wav") {
            out.push_back(entry.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

AudioClip load_at_rate(const fs::path& path, int rate) {
    AudioClip clip = load_wav(path);
    return clip.sample_rate == rate ? clip : decimate(clip, rate);
}

std::vector<AudioClip> load_bank(const std::string& dir, int rate) {
    std::vector<AudioClip> out;
    if (dir.empty()) {
        return out;
    }
    for (const auto& p : list_wavs(dir)) {
        out.push_back(load_at_rate(p, rate));
    }
    require(!out.empty(), ErrorKind::Config, "no .wav files in " + dir);
    return out;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    require(out.good(), ErrorKind::Io, "cannot write " + path.string());
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
}

/// Accepts `dir`, `dir/<stem>`, or the stem with either artifact extension.
fs::path artifact_base(const fs::path& p, const char* stem, std::initializer_list<const char*> exts) {
    if (fs::is_directory(p)) {
        return p / stem;
    }
    for (const char* e : exts) {
        if (p.extension() == e) return fs::path(p).replace_extension();
    }
    return p;
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Config, "cannot read " + path.string());
    std::vector<json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            fail(ErrorKind::Format, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        require(out.back().is_object(), ErrorKind::Format,
                path.string() + ":" + std::to_string(lineno) + ": expected an object");
    }
    return out;
}

std::string field_string(const json& j, const char* key, const fs::path& src) {
    require(j.contains(key) && j[key].is_string(), ErrorKind::Format,
            src.string() + ": entry lacks string field '" + key + "'");
    return j[key].get<std::string>();
}

double field_number(const json& j, const char* key, const fs::path& src) {
    require(j.contains(key) && j[key].is_number(), ErrorKind::Format,
            src.string() + ": entry lacks numeric field '" + key + "'");
    return j[key].get<double>();
}

fs::path relative_to(const fs::path& base_file, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base_file.parent_path() / path;
}

Tokenizer load_tokenizer(const FeatureConfig& features, const fs::path& ckpt, const fs::path& codebook) {
    Tokenizer t;
    t.features = features;
    t.encoder = load_encoder(artifact_base(ckpt, "encoder", {".json", ".bin"}));
    t.codebook = load_codebook(artifact_base(codebook, "codebook", {".json", ".f32"}));
    require(t.encoder.shape.input_dim == features.feature_dim(), ErrorKind::Config,
            "checkpoint expects " + std::to_string(t.encoder.shape.input_dim) + "-dim features, config gives " +
                std::to_string(features.feature_dim()));
    require(t.encoder.shape.output_dim == t.codebook.dim(), ErrorKind::Config,
            "codebook width does not match the checkpoint");
    return t;
}

struct LoadedIndex {
    TfIdfIndex index;
    Tokenizer tokenizer;
};

/// The index directory records which checkpoint, codebook and feature
/// settings produced it; those take precedence over the config.
LoadedIndex load_index_bundle(const fs::path& dir) {
    require(fs::exists(dir / "manifest.json"), ErrorKind::Config, "no index at " + dir.string());
    LoadedIndex out{load_index(dir), {}};
    json manifest;
    json tok;
    try {
        manifest = json::parse(std::ifstream(dir / "manifest.json"));
        tok = json::parse(std::ifstream(dir / "tokenizer.json"));
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, "index " + dir.string() + " lacks tokenizer metadata: " + e.what());
    }
    const auto ckpt = manifest.value("checkpoint", std::string());
    const auto codebook = manifest.value("codebook", std::string());
    require(!ckpt.empty() && !codebook.empty(), ErrorKind::Config,
            "index " + dir.string() + " does not name its checkpoint and codebook");
    const FeatureConfig features = config_from_json(json{{"features", tok.at("features")}}).features;
    out.tokenizer = load_tokenizer(features, ckpt, codebook);
    return out;
}

} // namespace

int run_features(const PipelineConfig& cfg, const FeaturesArgs& args) {
    const auto files = list_wavs(args.in);
    make_dir(args.out);
    parallel_for(files.size(), cfg.resolved_threads(), [&](std::size_t i) {
        const AudioClip clip = load_at_rate(files[i], cfg.features.sample_rate);
        AudioClip audio = clip;
        IndexRange valid{0, clip.size()};
        if (cfg.pad_seconds > 0.0) {
            PaddedClip padded = pad_to_fixed(clip, std::nullopt, cfg.pad_seconds);
            audio = std::move(padded.clip);
            valid = padded.valid;
        }
        FeatureSequence f = compute_mfcc(audio, cfg.features);
        f.valid = frames_for_samples(valid, f.length(), cfg.features);
        f.source_id = files[i].stem().string();
        write_features(args.out / files[i].stem(), f);
    });
    info("wrote features", {{"files", files.size()}, {"out", args.out.string()}});
    return 0;
}

int run_augment(const PipelineConfig& cfg, const AugmentArgs& args) {
    AugmentSpec spec;
    spec.snr_db_low = cfg.augment.snr_lo;
    spec.snr_db_high = cfg.augment.snr_hi;
    spec.reverb_prob = cfg.augment.reverb_prob;
    spec.rng_seed = derive_seed(cfg.seed, {0xA6});
    require(!cfg.augment.noise_dir.empty(), ErrorKind::Config, "augment needs --noise-dir");
    spec.noise_bank = load_bank(cfg.augment.noise_dir, cfg.features.sample_rate);
    spec.rir_bank = load_bank(cfg.augment.rir_dir, cfg.features.sample_rate);
    try {
        spec.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Config, e.what());
    }

    const auto files = list_wavs(args.in);
    make_dir(args.out);
    std::vector<DistortionDraw> draws(files.size());
    parallel_for(files.size(), cfg.resolved_threads(), [&](std::size_t i) {
        const AudioClip clip = load_at_rate(files[i], cfg.features.sample_rate);
        auto result = sample_distortion(clip, spec, {0, clip.size()}, i);
        write_wav(args.out / files[i].filename(), result.audio);
        draws[i] = result.draw;
    });
    std::string log_lines;
    for (std::size_t i = 0; i < files.size(); ++i) {
        json line = {{"file", files[i].filename().string()},
                     {"snr_db", draws[i].snr_db},
                     {"noise_index", draws[i].noise_index},
                     {"reverberated", draws[i].reverberated}};
        if (draws[i].reverberated) line["rir_index"] = draws[i].rir_index;
        log_lines += line.dump() + '\n';
    }
    write_text(args.out / "augment.jsonl", log_lines);
    info("wrote augmented audio", {{"files", files.size()}, {"out", args.out.string()}});
    return 0;
}

int run_train(PipelineConfig cfg, const TrainArgs& args) {
    const auto entries = read_jsonl(args.manifest);
    require(!entries.empty(), ErrorKind::Config, "training manifest is empty");
    std::vector<LabeledClip> clips;
    std::vector<LabeledFeatures> feats;
    for (const auto& e : entries) {
        const std::string term = field_string(e, "term", args.manifest);
        std::string speaker;
        if (e.contains("speaker_id")) {
            speaker = e["speaker_id"].is_string() ? e["speaker_id"].get<std::string>() : e["speaker_id"].dump();
        }
        if (e.contains("wav_path")) {
            const fs::path p = relative_to(args.manifest, field_string(e, "wav_path", args.manifest));
            clips.push_back({term, load_at_rate(p, cfg.features.sample_rate), speaker});
        } else if (e.contains("feat_path")) {
            const fs::path p = relative_to(args.manifest, field_string(e, "feat_path", args.manifest));
            feats.push_back({term, read_features(artifact_base(p, "", {".feat"})), speaker});
        } else {
            fail(ErrorKind::Format, args.manifest.string() + ": entry needs wav_path or feat_path");
        }
    }
    require(clips.empty() || feats.empty(), ErrorKind::Config, "manifest mixes wav_path and feat_path entries");

    DtwOptions dtw;
    if (cfg.dtw_band > 0) dtw.band = cfg.dtw_band;
    dtw.one_to_one = cfg.training.one_to_one;

    std::unique_ptr<PairSource> source;
    if (!clips.empty()) {
        std::optional<AugmentSpec> spec;
        if (!cfg.augment.noise_dir.empty()) {
            spec.emplace();
            spec->snr_db_low = cfg.augment.snr_lo;
            spec->snr_db_high = cfg.augment.snr_hi;
            spec->reverb_prob = cfg.augment.reverb_prob;
            spec->rng_seed = derive_seed(cfg.seed, {0xA6});
            spec->noise_bank = load_bank(cfg.augment.noise_dir, cfg.features.sample_rate);
            spec->rir_bank = load_bank(cfg.augment.rir_dir, cfg.features.sample_rate);
            if (spec->rir_bank.empty() && spec->reverb_prob > 0.0) {
                warn("no rir_dir given; training without reverberation");
                spec->reverb_prob = 0.0;
            }
        } else {
            warn("no noise_dir given; partners stay clean");
        }
        source = std::make_unique<AudioPairSource>(std::move(clips), cfg.features, cfg.pad_seconds, std::move(spec),
                                                   dtw, cfg.distort_both);
    } else {
        source = std::make_unique<FeaturePairSource>(std::move(feats), dtw);
    }
    cfg.training.encoder.input_dim = source->input_dim();

    make_dir(args.out);
    write_text(args.out / "config.json", config_to_json(cfg).dump(2) + '\n');
    const std::size_t every = std::max<std::size_t>(1, cfg.training.steps / 20);
    info("training", {{"utterances", entries.size()}, {"steps", cfg.training.steps}});
    train(cfg.training, *source, args.out, [&](const StepMetrics& m) {
        if (m.step % every == 0 || m.step == cfg.training.steps) {
            info("step", {{"step", m.step},
                          {"total", m.total},
                          {"contrastive", m.contrastive},
                          {"robust", m.robust},
                          {"commitment", m.commitment},
                          {"entropy", m.entropy},
                          {"sinkhorn_converged", m.sinkhorn_converged}});
        }
    });
    info("wrote checkpoint", {{"out", args.out.string()}});
    return 0;
}

int run_tokenize(const PipelineConfig& cfg, const TokenizeArgs& args) {
    const Tokenizer tokenizer = load_tokenizer(cfg.features, args.ckpt, args.codebook);
    std::vector<fs::path> files;
    if (fs::is_directory(args.in)) {
        files = list_wavs(args.in);
    } else {
        files.push_back(args.in);
    }
    std::vector<std::string> lines(files.size());
    parallel_for(files.size(), cfg.resolved_threads(), [&](std::size_t i) {
        const TokenSequence seq = tokenizer.tokenize(load_wav(files[i]));
        lines[i] = json{{"source", files[i].stem().string()}, {"tokens", seq.tokens}}.dump() + '\n';
    });
    std::string text;
    for (const auto& l : lines) text += l;
    if (args.out) {
        write_text(*args.out, text);
    } else {
        std::fwrite(text.data(), 1, text.size(), stdout);
    }
    return 0;
}

int run_index(const PipelineConfig& cfg, const IndexArgs& args) {
    const Tokenizer tokenizer = load_tokenizer(cfg.features, args.ckpt, args.codebook);
    const auto files = list_wavs(args.tracks);
    std::vector<std::vector<SegmentRecord>> per_track(files.size());
    parallel_for(files.size(), cfg.resolved_threads(), [&](std::size_t i) {
        per_track[i] = tokenize_track(files[i].stem().string(), load_wav(files[i]), tokenizer,
                                      cfg.segment_seconds, cfg.hop_seconds);
    });
    std::vector<SegmentRecord> segments;
    for (auto& t : per_track) {
        std::move(t.begin(), t.end(), std::back_inserter(segments));
    }
    IndexConfig ic = cfg.index;
    ic.vocab = tokenizer.codebook.size();
    const TfIdfIndex index = build_index(std::move(segments), ic);

    const auto ckpt = fs::absolute(artifact_base(args.ckpt, "encoder", {".json", ".bin"})).lexically_normal();
    const auto cb = fs::absolute(artifact_base(args.codebook, "codebook", {".json", ".f32"})).lexically_normal();
    save_index(args.out, index, ckpt.string(), cb.string());
    const json tok = {{"features", config_to_json(cfg)["features"]},
                      {"l", cfg.segment_seconds},
                      {"h", cfg.hop_seconds}};
    write_text(args.out / "tokenizer.json", tok.dump(2) + '\n');
    info("wrote index", {{"tracks", files.size()},
                         {"segments", index.doc_count()},
                         {"flat", index.flat},
                         {"out", args.out.string()}});
    return 0;
}

int run_search(const PipelineConfig& cfg, const SearchArgs& args) {
    const LoadedIndex bundle = load_index_bundle(args.index);
    SearchConfig sc = cfg.search;
    sc.n3 = std::max(sc.n3, cfg.topk);
    sc.n2 = std::max(sc.n2, sc.n3);
    sc.n1 = std::max(sc.n1, sc.n2);

    const AudioClip query = load_wav(args.query);
    const IndexRange whole{0, query.size()};
    const auto emb = bundle.tokenizer.embed(query, whole);
    const TokenSequence tokens = tokenize(emb, bundle.tokenizer.codebook);
    require(!tokens.tokens.empty(), ErrorKind::Input, "query produced no tokens");

    Matrix<double> valid_rows(emb.valid.size(), emb.embeddings.cols());
    for (std::size_t r = 0; r < valid_rows.rows(); ++r) {
        std::copy_n(emb.embeddings.row(emb.valid.begin + r).begin(), valid_rows.cols(),
                    valid_rows.row(r).begin());
    }
    const QueryEmbeddings continuous{&valid_rows, &bundle.tokenizer.codebook};
    const SearchResult result = search(tokens.tokens, bundle.index, sc, continuous);

    std::string out;
    const std::size_t n = std::min(cfg.topk, result.ranked.size());
    for (std::size_t i = 0; i < n; ++i) {
        const Candidate& c = result.ranked[i];
        const SegmentRecord& seg = bundle.index.segments[c.doc];
        json line = {{"rank", i + 1},
                     {"segment", seg.tokens.segment_id},
                     {"track_id", seg.track_id},
                     {"start_s", seg.start},
                     {"end_s", seg.start + seg.length},
                     {"score", c.stage3},
                     {"jaccard", c.stage2},
                     {"cosine", c.stage1}};
        if (sc.dtw_rerank) line["dtw"] = c.dtw;
        out += line.dump() + '\n';
    }
    std::fwrite(out.data(), 1, out.size(), stdout);
    info("search", {{"query_tokens", tokens.size()},
                    {"results", n},
                    {"low_confidence", result.low_confidence},
                    {"stage1_ms", result.timing.stage1_ms},
                    {"stage2_ms", result.timing.stage2_ms},
                    {"stage3_ms", result.timing.stage3_ms},
                    {"rerank_ms", result.timing.rerank_ms}});
    if (result.low_confidence) {
        warn("no candidate shares a token with the query");
    }
    return 0;
}

int run_eval(const PipelineConfig& cfg, const EvalArgs& args) {
    const LoadedIndex bundle = load_index_bundle(args.index);
    const int rate = bundle.tokenizer.features.sample_rate;

    ExperimentInputs in;
    in.index = &bundle.index;
    in.tokenizer = &bundle.tokenizer;
    const auto query_lines = read_jsonl(args.queries);
    for (std::size_t i = 0; i < query_lines.size(); ++i) {
        const auto& q = query_lines[i];
        Query query;
        query.term = field_string(q, "term", args.queries);
        query.id = q.contains("id") ? field_string(q, "id", args.queries) : "q" + std::to_string(i);
        query.condition = q.value("condition", std::string());
        query.audio = load_at_rate(relative_to(args.queries, field_string(q, "wav_path", args.queries)), rate);
        in.queries.push_back(std::move(query));
    }
    for (const auto& t : read_jsonl(args.truth)) {
        in.truth.push_back({field_string(t, "term", args.truth), field_string(t, "track_id", args.truth),
                            field_number(t, "start_s", args.truth), field_number(t, "end_s", args.truth)});
    }
    in.noise_bank = load_bank(cfg.augment.noise_dir, rate);
    in.rir_bank = load_bank(cfg.augment.rir_dir, rate);
    if (args.conditions) {
        json j;
        try {
            j = json::parse(std::ifstream(*args.conditions));
        } catch (const json::exception& e) {
            fail(ErrorKind::Config, args.conditions->string() + ": " + e.what());
        }
        if (j.is_object()) {
            const auto grid = config_from_json(json{{"metric", {{"snr_grid", j.value("snr_grid", json(cfg.snr_grid))}}}})
                                  .snr_grid;
            in.conditions = standard_conditions(grid, j.value("reverb", !in.rir_bank.empty()));
        } else {
            require(j.is_array(), ErrorKind::Config, "conditions must be an object or an array");
            for (const auto& c : j) {
                Condition cond;
                cond.name = field_string(c, "name", *args.conditions);
                if (c.contains("snr_db") && !c["snr_db"].is_null()) cond.snr_db = field_number(c, "snr_db", *args.conditions);
                cond.reverb = c.value("reverb", false);
                in.conditions.push_back(cond);
            }
        }
    } else {
        in.conditions = standard_conditions(cfg.snr_grid, !in.rir_bank.empty());
    }
    for (const auto& c : in.conditions) {
        require(!c.reverb || !in.rir_bank.empty(), ErrorKind::Config,
                "condition " + c.name + " needs reverberation but no rir_dir was given");
    }
    in.search = cfg.search;
    in.metric = cfg.metric;
    in.seed = cfg.seed;
    in.threads = cfg.resolved_threads();

    const ExperimentReport report = run_experiment(in);
    make_dir(args.out);
    write_report(args.out, report);
    for (const auto& c : report.conditions) {
        info("condition", {{"name", c.condition.name},
                           {"queries", c.queries},
                           {"mtwv", c.mtwv},
                           {"token_consistency", c.token_consistency}});
        for (const auto& w : c.detail.warnings) warn(w, {{"condition", c.condition.name}});
    }
    return 0;
}

} // namespace tokstd::cli
