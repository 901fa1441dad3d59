#include "tokstd/evaluation.hpp"

#include "tokstd/augment.hpp"
#include "tokstd/error.hpp"
#include "tokstd/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>

namespace tokstd {

double token_consistency(std::span<const std::pair<TokenSequence, TokenSequence>> pairs) {
    require(!pairs.empty(), ErrorKind::EmptyInput, "token consistency needs at least one pair");
    double acc = 0.0;
    for (const auto& [a, b] : pairs) {
        acc += jaccard(a.tokens, b.tokens);
    }
    return acc / static_cast<double>(pairs.size());
}

void MtwvConfig::validate() const {
    require(beta > 0.0, ErrorKind::Config, "beta must be positive");
    require(std::is_sorted(thresholds.begin(), thresholds.end()), ErrorKind::Config,
            "threshold grid must be sorted");
}

MtwvResult mtwv(std::span<const DetectionTrial> trials, const MtwvConfig& config) {
    config.validate();
    struct TermPool {
        std::map<std::string, double> best; // segment -> best score
        std::set<std::string> truth;
        std::size_t universe = 0;
    };
    std::map<std::string, TermPool> terms;
    for (const auto& t : trials) {
        auto& pool = terms[t.term];
        for (const auto& d : t.returned) {
            require(std::isfinite(d.score), ErrorKind::Input, "detection scores must be finite");
            auto [it, inserted] = pool.best.try_emplace(d.segment, d.score);
            if (!inserted) {
                it->second = std::max(it->second, d.score);
            }
        }
        pool.truth.insert(t.truth.begin(), t.truth.end());
        pool.universe = std::max(pool.universe, t.universe);
    }

    MtwvResult result;
    for (auto it = terms.begin(); it != terms.end();) {
        if (it->second.truth.empty()) {
            result.warnings.push_back("term '" + it->first + "' has no true occurrences and is excluded");
            it = terms.erase(it);
        } else {
            require(it->second.universe >= it->second.truth.size(), ErrorKind::Input,
                    "trial universe of '" + it->first + "' is smaller than its truth set");
            ++it;
        }
    }
    require(!terms.empty(), ErrorKind::Input, "no term has a true occurrence");

    std::vector<double> grid = config.thresholds;
    if (grid.empty()) {
        for (const auto& [name, pool] : terms) {
            for (const auto& [seg, score] : pool.best) {
                grid.push_back(score);
            }
        }
        std::sort(grid.begin(), grid.end());
        grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
        grid.push_back(std::numeric_limits<double>::infinity());
    }

    auto evaluate = [&](double theta, std::vector<TermDetail>* detail) {
        double cost = 0.0;
        for (const auto& [name, pool] : terms) {
            std::size_t hits = 0;
            std::size_t fas = 0;
            for (const auto& [seg, score] : pool.best) {
                if (score >= theta) {
                    (pool.truth.contains(seg) ? hits : fas) += 1;
                }
            }
            const double p_miss =
                static_cast<double>(pool.truth.size() - hits) / static_cast<double>(pool.truth.size());
            const std::size_t non_target = pool.universe - pool.truth.size();
            const double p_fa = non_target == 0 ? 0.0 : static_cast<double>(fas) / static_cast<double>(non_target);
            cost += p_miss + config.beta * p_fa;
            if (detail != nullptr) {
                detail->push_back({name, pool.truth.size(), hits, fas, p_miss, p_fa});
            }
        }
        return 1.0 - cost / static_cast<double>(terms.size());
    };

    result.mtwv = -std::numeric_limits<double>::infinity();
    for (double theta : grid) {
        const double twv = evaluate(theta, nullptr);
        result.curve.push_back({theta, twv});
        if (twv > result.mtwv) {
            result.mtwv = twv;
            result.best_threshold = theta;
        }
    }
    evaluate(result.best_threshold, &result.terms);
    return result;
}

std::set<std::string> ground_truth(std::span<const SegmentRecord> segments, std::span<const Occurrence> truth,
                                   const std::string& term, double min_overlap) {
    std::set<std::string> out;
    for (const auto& occ : truth) {
        if (occ.term != term) {
            continue;
        }
        const double duration = occ.end - occ.start;
        require(duration > 0.0, ErrorKind::Input, "occurrence of '" + term + "' has no duration");
        for (const auto& s : segments) {
            if (s.track_id != occ.track_id) {
                continue;
            }
            const double overlap = std::min(s.start + s.length, occ.end) - std::max(s.start, occ.start);
            if (overlap >= min_overlap * duration) {
                out.insert(s.tokens.segment_id);
            }
        }
    }
    return out;
}

std::vector<Condition> standard_conditions(std::span<const double> snr_grid, bool with_reverb) {
    std::vector<Condition> out{{"clean", std::nullopt, false}};
    for (double snr : snr_grid) {
        std::ostringstream name;
        name << snr;
        out.push_back({"noise_" + name.str() + "dB", snr, false});
        if (with_reverb) {
            out.push_back({"noise_reverb_" + name.str() + "dB", snr, true});
        }
    }
    return out;
}

namespace {

ConditionReport run_condition(const ExperimentInputs& in, std::size_t index,
                              const std::vector<TokenSequence>& clean_tokens) {
    const Condition& cond = in.conditions[index];
    Rng rng(derive_seed(in.seed, {0x6576616c, index}));
    ConditionReport report;
    report.condition = cond;

    std::vector<DetectionTrial> trials;
    std::vector<std::pair<TokenSequence, TokenSequence>> consistency;
    std::map<std::string, std::set<std::string>> truth_cache;
    for (std::size_t q = 0; q < in.queries.size(); ++q) {
        const Query& query = in.queries[q];
        if (!query.condition.empty() && query.condition != cond.name) {
            continue;
        }
        TokenSequence tokens = clean_tokens[q];
        if (cond.snr_db) {
            AudioClip audio = query.audio;
            const IndexRange whole{0, audio.size()};
            if (cond.reverb) {
                audio = apply_rir(audio, in.rir_bank[rng.below(in.rir_bank.size())]);
            }
            const AudioClip& noise = in.noise_bank[rng.below(in.noise_bank.size())];
            audio = mix_at_snr(audio, noise, *cond.snr_db, whole).audio;
            tokens = in.tokenizer->tokenize(audio);
        }
        consistency.emplace_back(clean_tokens[q], tokens);

        DetectionTrial trial;
        trial.term = query.term;
        trial.query_id = query.id;
        trial.universe = in.index->doc_count();
        auto [it, fresh] = truth_cache.try_emplace(query.term);
        if (fresh) {
            it->second = ground_truth(in.index->segments, in.truth, query.term);
        }
        trial.truth = it->second;
        if (!tokens.tokens.empty()) {
            const SearchResult hits = search(tokens.tokens, *in.index, in.search);
            for (const auto& c : hits.ranked) {
                trial.returned.push_back({in.index->segments[c.doc].tokens.segment_id, c.stage3});
            }
        }
        trials.push_back(std::move(trial));
    }
    report.queries = trials.size();
    if (trials.empty()) {
        return report;
    }
    report.detail = mtwv(trials, in.metric);
    report.mtwv = report.detail.mtwv;
    report.best_threshold = report.detail.best_threshold;
    report.token_consistency = token_consistency(consistency);
    return report;
}

} // namespace

ExperimentReport run_experiment(const ExperimentInputs& in) {
    require(in.index != nullptr && in.index->doc_count() > 0, ErrorKind::Config, "experiment needs a built index");
    require(in.tokenizer != nullptr, ErrorKind::Config, "experiment needs a checkpoint and codebook");
    require(!in.queries.empty(), ErrorKind::Config, "query manifest is empty");
    require(!in.conditions.empty(), ErrorKind::Config, "no conditions to evaluate");
    for (const auto& c : in.conditions) {
        require(!c.snr_db || !in.noise_bank.empty(), ErrorKind::Config,
                "condition '" + c.name + "' needs a noise bank");
        require(!c.reverb || !in.rir_bank.empty(), ErrorKind::Config, "condition '" + c.name + "' needs RIRs");
    }
    in.metric.validate();
    in.search.validate();

    std::vector<TokenSequence> clean_tokens;
    clean_tokens.reserve(in.queries.size());
    for (const auto& q : in.queries) {
        clean_tokens.push_back(in.tokenizer->tokenize(q.audio));
    }

    ExperimentReport report;
    report.conditions.resize(in.conditions.size());
    const std::size_t workers = std::max<std::size_t>(1, in.threads);
    for (std::size_t first = 0; first < in.conditions.size(); first += workers) {
        std::vector<std::future<ConditionReport>> jobs;
        const std::size_t last = std::min(in.conditions.size(), first + workers);
        for (std::size_t c = first; c < last; ++c) {
            jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred,
                                      [&, c] { return run_condition(in, c, clean_tokens); }));
        }
        for (std::size_t c = first; c < last; ++c) {
            report.conditions[c] = jobs[c - first].get();
        }
    }
    return report;
}

std::string report_csv(const ExperimentReport& report) {
    std::ostringstream os;
    os << "condition,snr_db,reverb,queries,mtwv,best_threshold,token_consistency\n" << std::setprecision(9);
    for (const auto& c : report.conditions) {
        os << c.condition.name << ',';
        if (c.condition.snr_db) {
            os << *c.condition.snr_db;
        }
        os << ',' << (c.condition.reverb ? 1 : 0) << ',' << c.queries << ',' << c.mtwv << ',' << c.best_threshold
           << ',' << c.token_consistency << '\n';
    }
    return os.str();
}

std::string report_json(const ExperimentReport& report) {
    auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : report.conditions) {
        nlohmann::json curve = nlohmann::json::array();
        for (const auto& p : c.detail.curve) {
            curve.push_back({{"threshold", finite_or_null(p.threshold)}, {"twv", p.twv}});
        }
        nlohmann::json terms = nlohmann::json::array();
        for (const auto& t : c.detail.terms) {
            terms.push_back({{"term", t.term},
                             {"truths", t.truths},
                             {"hits", t.hits},
                             {"false_alarms", t.false_alarms},
                             {"p_miss", t.p_miss},
                             {"p_fa", t.p_fa}});
        }
        out.push_back({{"condition", c.condition.name},
                       {"snr_db", c.condition.snr_db ? nlohmann::json(*c.condition.snr_db) : nlohmann::json(nullptr)},
                       {"reverb", c.condition.reverb},
                       {"queries", c.queries},
                       {"mtwv", c.mtwv},
                       {"best_threshold", finite_or_null(c.best_threshold)},
                       {"token_consistency", c.token_consistency},
                       {"curve", curve},
                       {"terms", terms},
                       {"warnings", c.detail.warnings}});
    }
    return nlohmann::json{{"conditions", out}}.dump(2);
}

void write_report(const std::filesystem::path& dir, const ExperimentReport& report) {
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir / "report.csv");
    csv << report_csv(report);
    std::ofstream json(dir / "report.json");
    json << report_json(report) << '\n';
    require(csv.good() && json.good(), ErrorKind::Io, "cannot write report to " + dir.string());
}

} // namespace tokstd
