#include "config.hpp"

#include "tokstd/error.hpp"

#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <thread>
#include <type_traits>

namespace tokstd::cli {
namespace {

using nlohmann::json;

template <typename T>
T as(const json& v, const std::string& key) {
    auto bad = [&](const char* expected) {
        fail(ErrorKind::Config, key + ": expected " + expected + ", got " + v.dump());
    };
    if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) bad("a boolean");
        return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) bad("a string");
        return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
        if (!v.is_array()) bad("an array of numbers");
        std::vector<double> out;
        for (const auto& x : v) {
            out.push_back(as<double>(x, key));
        }
        return out;
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) bad("a number");
        return v.get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) bad("a non-negative integer");
        return v.get<T>();
    } else {
        if (!v.is_number_integer()) bad("an integer");
        const auto x = v.get<std::int64_t>();
        if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) bad("an integer in range");
        return static_cast<T>(x);
    }
}

struct Field {
    std::function<void(PipelineConfig&, const json&, const std::string&)> set;
    std::function<json(const PipelineConfig&)> get;
};

template <typename T, typename Access>
Field bind(Access access) {
    return {[access](PipelineConfig& c, const json& v, const std::string& key) { access(c) = as<T>(v, key); },
            [access](const PipelineConfig& c) { return json(access(const_cast<PipelineConfig&>(c))); }};
}

template <typename E, typename Access>
Field bind_enum(Access access, std::vector<std::pair<E, std::string>> names) {
    return {[access, names](PipelineConfig& c, const json& v, const std::string& key) {
                const auto s = as<std::string>(v, key);
                for (const auto& [value, name] : names) {
                    if (name == s) {
                        access(c) = value;
                        return;
                    }
                }
                std::string allowed;
                for (const auto& n : names) {
                    allowed += (allowed.empty() ? "" : ", ") + n.second;
                }
                fail(ErrorKind::Config, key + ": expected one of {" + allowed + "}, got \"" + s + "\"");
            },
            [access, names](const PipelineConfig& c) {
                const E value = access(const_cast<PipelineConfig&>(c));
                for (const auto& n : names) {
                    if (n.first == value) return json(n.second);
                }
                return json();
            }};
}

#define FIELD(T, expr) bind<T>([](PipelineConfig& c) -> T& { return c.expr; })

using Section = std::vector<std::pair<std::string, Field>>;

const std::map<std::string, Section>& schema() {
    static const std::map<std::string, Section> s = {
        {"features",
         {{"sample_rate", FIELD(int, features.sample_rate)},
          {"n_mfcc", FIELD(int, features.n_mfcc)},
          {"win_ms", FIELD(double, features.win_ms)},
          {"hop_ms", FIELD(double, features.hop_ms)},
          {"n_fft", FIELD(int, features.n_fft)},
          {"n_mels", FIELD(int, features.n_mels)},
          {"preemphasis", FIELD(double, features.preemphasis)},
          {"log_floor", FIELD(double, features.log_floor)},
          {"low_hz", FIELD(double, features.low_hz)},
          {"high_hz", FIELD(double, features.high_hz)},
          {"pad_s", FIELD(double, pad_seconds)}}},
        {"augment",
         {{"snr_lo", FIELD(double, augment.snr_lo)},
          {"snr_hi", FIELD(double, augment.snr_hi)},
          {"reverb_prob", FIELD(double, augment.reverb_prob)},
          {"noise_dir", FIELD(std::string, augment.noise_dir)},
          {"rir_dir", FIELD(std::string, augment.rir_dir)}}},
        {"training",
         {{"tau", FIELD(double, training.tau)},
          {"tau_prime", FIELD(double, training.tau_prime)},
          {"lambda1", FIELD(double, training.lambda1)},
          {"lambda2", FIELD(double, training.lambda2)},
          {"k_neg", FIELD(std::size_t, training.k_neg)},
          {"batch_size", FIELD(std::size_t, training.batch_size)},
          {"lr", FIELD(double, training.lr)},
          {"beta1", FIELD(double, training.beta1)},
          {"beta2", FIELD(double, training.beta2)},
          {"adam_eps", FIELD(double, training.adam_eps)},
          {"steps", FIELD(std::size_t, training.steps)},
          {"hidden", FIELD(std::size_t, training.encoder.hidden)},
          {"output_dim", FIELD(std::size_t, training.encoder.output_dim)},
          {"layers", FIELD(std::size_t, training.encoder.layers)},
          {"codebook_size", FIELD(std::size_t, training.codebook_size)},
          {"codebook_init", bind_enum<CodebookInit>([](PipelineConfig& c) -> CodebookInit& {
                                return c.training.codebook_init;
                            }, {{CodebookInit::Random, "random"}, {CodebookInit::KMeans, "kmeans"}})},
          {"targets", bind_enum<TargetMode>([](PipelineConfig& c) -> TargetMode& { return c.training.targets; },
                                            {{TargetMode::OptimalTransport, "ot"},
                                             {TargetMode::ArgmaxOneHot, "argmax"}})},
          {"sinkhorn_epsilon", FIELD(double, training.sinkhorn.epsilon)},
          {"sinkhorn_max_iter", FIELD(int, training.sinkhorn.max_iter)},
          {"sinkhorn_tol", FIELD(double, training.sinkhorn.tol)},
          {"one_to_one", FIELD(bool, training.one_to_one)},
          {"checkpoint_every", FIELD(std::size_t, training.checkpoint_every)},
          {"dtw_band", FIELD(std::size_t, dtw_band)},
          {"distort_both", FIELD(bool, distort_both)}}},
        {"index",
         {{"n_list", FIELD(std::size_t, index.n_list)},
          {"pq_m", FIELD(std::size_t, index.pq_m)},
          {"pq_bits", FIELD(std::size_t, index.pq_bits)},
          {"kmeans_iters", FIELD(int, index.kmeans_iters)},
          {"l", FIELD(double, segment_seconds)},
          {"h", FIELD(double, hop_seconds)}}},
        {"search",
         {{"n1", FIELD(std::size_t, search.n1)},
          {"n2", FIELD(std::size_t, search.n2)},
          {"n3", FIELD(std::size_t, search.n3)},
          {"nprobe", FIELD(std::size_t, search.nprobe)},
          {"dtw_rerank", FIELD(bool, search.dtw_rerank)},
          {"topk", FIELD(std::size_t, topk)}}},
        {"metric",
         {{"beta", FIELD(double, metric.beta)},
          {"thresholds", FIELD(std::vector<double>, metric.thresholds)},
          {"snr_grid", FIELD(std::vector<double>, snr_grid)}}},
    };
    return s;
}

const Section& globals() {
    static const Section s = {{"seed", FIELD(std::uint64_t, seed)},
                              {"threads", FIELD(std::size_t, threads)},
                              {"deterministic", FIELD(bool, deterministic)}};
    return s;
}

#undef FIELD

const Field* find(const Section& section, const std::string& key) {
    for (const auto& [name, field] : section) {
        if (name == key) return &field;
    }
    return nullptr;
}

} // namespace

void PipelineConfig::finalize() {
    training.seed = seed;
    index.seed = seed;
    if (deterministic) {
        threads = 1;
    }
}

std::size_t PipelineConfig::resolved_threads() const {
    if (deterministic) return 1;
    if (threads > 0) return threads;
    return std::max(1u, std::thread::hardware_concurrency());
}

void PipelineConfig::validate() const {
    auto check = [](auto&& fn, const char* section) {
        try {
            fn();
        } catch (const Error& e) {
            fail(ErrorKind::Config, std::string(section) + ": " + e.what());
        }
    };
    check([&] { features.validate(); }, "features");
    check([&] {
        require(pad_seconds >= 0.0, ErrorKind::Config, "pad_s must be >= 0");
        require(augment.snr_lo <= augment.snr_hi, ErrorKind::Config, "snr_lo must not exceed snr_hi");
        require(augment.reverb_prob >= 0.0 && augment.reverb_prob <= 1.0, ErrorKind::Config,
                "reverb_prob must lie in [0, 1]");
    }, "augment");
    check([&] { training.validate(); }, "training");
    check([&] {
        require(segment_seconds > 0.0 && hop_seconds > 0.0, ErrorKind::Config, "l and h must be positive");
    }, "index");
    check([&] {
        search.validate();
        require(topk > 0, ErrorKind::Config, "topk must be positive");
    }, "search");
    check([&] { metric.validate(); }, "metric");
}

PipelineConfig config_from_json(const json& j) {
    require(j.is_object(), ErrorKind::Config, "config root must be an object");
    PipelineConfig cfg;
    const auto& sections = schema();
    for (const auto& [key, value] : j.items()) {
        if (const Field* f = find(globals(), key)) {
            f->set(cfg, value, key);
            continue;
        }
        const auto it = sections.find(key);
        require(it != sections.end(), ErrorKind::Config, "unknown key '" + key + "'");
        require(value.is_object(), ErrorKind::Config, "section '" + key + "' must be an object");
        for (const auto& [name, v] : value.items()) {
            const std::string path = key + "." + name;
            const Field* f = find(it->second, name);
            require(f != nullptr, ErrorKind::Config, "unknown key '" + path + "'");
            f->set(cfg, v, path);
        }
    }
    return cfg;
}

json config_to_json(const PipelineConfig& cfg) {
    json out = json::object();
    for (const auto& [name, field] : globals()) {
        out[name] = field.get(cfg);
    }
    for (const auto& [section, fields] : schema()) {
        json s = json::object();
        for (const auto& [name, field] : fields) {
            s[name] = field.get(cfg);
        }
        out[section] = s;
    }
    return out;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Config, "cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

} // namespace tokstd::cli
