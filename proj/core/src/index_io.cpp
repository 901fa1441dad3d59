#include "tokstd/error.hpp"
#include "tokstd/retrieval.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace tokstd {

namespace {

constexpr char kPostingMagic[4] = {'T', 'K', 'P', 'L'};
constexpr std::uint32_t kPostingVersion = 1;

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), ErrorKind::Io, "cannot write " + path.string());
}

std::uint32_t checksum(const std::string& bytes) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

template <typename T>
void append_pod(std::string& out, const T& value) {
    out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

std::string float_bytes(std::span<const float> values) {
    return {reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float)};
}

std::vector<float> bytes_to_floats(const std::string& bytes, std::size_t expected, const std::string& name) {
    require(bytes.size() == expected * sizeof(float), ErrorKind::Format,
            name + " holds " + std::to_string(bytes.size()) + " bytes, expected " +
                std::to_string(expected * sizeof(float)));
    std::vector<float> out(expected);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}
    template <typename T>
    T pod() {
        require(pos_ + sizeof(T) <= bytes_.size(), ErrorKind::Format, "postings.bin is truncated");
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

void save_index(const std::filesystem::path& dir, const TfIdfIndex& index, const std::string& checkpoint,
                const std::string& codebook) {
    std::filesystem::create_directories(dir);
    std::map<std::string, std::string> files;
    files["idf.f32"] = float_bytes(index.idf);
    files["vectors.f32"] = float_bytes(index.vectors.flat());
    files["centroids.f32"] = float_bytes(index.centroids.flat());
    files["pq_codebooks.f32"] = float_bytes(index.pq_codebooks.flat());

    std::string postings(kPostingMagic, sizeof(kPostingMagic));
    append_pod(postings, kPostingVersion);
    append_pod(postings, static_cast<std::uint32_t>(index.list_ids.size()));
    append_pod(postings, static_cast<std::uint32_t>(index.config.pq_m));
    for (std::size_t l = 0; l < index.list_ids.size(); ++l) {
        append_pod(postings, static_cast<std::uint32_t>(index.list_ids[l].size()));
        for (std::uint32_t id : index.list_ids[l]) {
            append_pod(postings, id);
        }
        postings.append(reinterpret_cast<const char*>(index.list_codes[l].data()), index.list_codes[l].size());
    }
    files["postings.bin"] = std::move(postings);

    std::string store;
    for (const auto& s : index.segments) {
        nlohmann::json j = {{"id", s.tokens.segment_id},
                            {"track_id", s.track_id},
                            {"start", s.start},
                            {"length", s.length},
                            {"frames", {s.tokens.frames.begin, s.tokens.frames.end}},
                            {"tokens", s.tokens.tokens}};
        store += j.dump() + '\n';
    }
    files["segments.jsonl"] = std::move(store);

    nlohmann::json checksums = nlohmann::json::object();
    for (const auto& [name, bytes] : files) {
        write_file(dir / name, bytes);
        checksums[name] = checksum(bytes);
    }
    const auto& c = index.config;
    nlohmann::json manifest = {
        {"kind", "tokstd.index"},
        {"version", 1},
        {"config",
         {{"vocab", c.vocab}, {"n_list", c.n_list}, {"pq_m", c.pq_m}, {"pq_bits", c.pq_bits},
          {"kmeans_iters", c.kmeans_iters}, {"seed", c.seed}}},
        {"doc_count", index.doc_count()},
        {"flat", index.flat},
        {"pq_dsub", index.pq_dsub},
        {"pq_ksub", index.pq_ksub},
        {"checkpoint", checkpoint},
        {"codebook", codebook},
        {"checksums", checksums},
    };
    write_file(dir / "manifest.json", manifest.dump(2) + '\n');
}

TfIdfIndex load_index(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, "manifest.json: " + std::string(e.what()));
    }
    require(manifest.value("kind", "") == "tokstd.index", ErrorKind::Format, "not a tokstd index: " + dir.string());

    std::map<std::string, std::string> files;
    for (const auto& [name, sum] : manifest.at("checksums").items()) {
        files[name] = read_file(dir / name);
        require(checksum(files[name]) == sum.get<std::uint32_t>(), ErrorKind::Format,
                "checksum mismatch in " + name);
    }
    for (const char* name : {"idf.f32", "vectors.f32", "centroids.f32", "pq_codebooks.f32", "postings.bin",
                             "segments.jsonl"}) {
        require(files.contains(name), ErrorKind::Format, std::string("index is missing ") + name);
    }

    TfIdfIndex index;
    try {
        const auto& c = manifest.at("config");
        index.config.vocab = c.at("vocab");
        index.config.n_list = c.at("n_list");
        index.config.pq_m = c.at("pq_m");
        index.config.pq_bits = c.at("pq_bits");
        index.config.kmeans_iters = c.at("kmeans_iters");
        index.config.seed = c.at("seed");
        index.flat = manifest.at("flat");
        index.pq_dsub = manifest.at("pq_dsub");
        index.pq_ksub = manifest.at("pq_ksub");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, "manifest.json: " + std::string(e.what()));
    }
    index.config.validate();
    const std::size_t k = index.config.vocab;
    const std::size_t docs = manifest.at("doc_count");

    std::istringstream store(files["segments.jsonl"]);
    for (std::string line; std::getline(store, line);) {
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            SegmentRecord s;
            s.track_id = j.at("track_id");
            s.start = j.at("start");
            s.length = j.at("length");
            s.tokens.segment_id = j.at("id");
            s.tokens.tokens = j.at("tokens").get<std::vector<std::uint32_t>>();
            s.tokens.frames = {j.at("frames")[0], j.at("frames")[1]};
            index.segments.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Format, "segments.jsonl: " + std::string(e.what()));
        }
    }
    require(index.segments.size() == docs, ErrorKind::Format, "segment store does not match doc_count");

    index.idf = bytes_to_floats(files["idf.f32"], k, "idf.f32");
    index.vectors = Matrix<float>(docs, k, bytes_to_floats(files["vectors.f32"], docs * k, "vectors.f32"));
    if (index.flat) {
        return index;
    }
    const std::size_t n_list = index.config.n_list;
    const std::size_t m = index.config.pq_m;
    index.centroids =
        Matrix<float>(n_list, k, bytes_to_floats(files["centroids.f32"], n_list * k, "centroids.f32"));
    index.pq_codebooks = Matrix<float>(
        m * index.pq_ksub, index.pq_dsub,
        bytes_to_floats(files["pq_codebooks.f32"], m * index.pq_ksub * index.pq_dsub, "pq_codebooks.f32"));

    const std::string& postings = files["postings.bin"];
    require(postings.size() >= 4 && std::memcmp(postings.data(), kPostingMagic, 4) == 0, ErrorKind::Format,
            "postings.bin has a bad magic number");
    Reader r(postings);
    (void)r.pod<std::uint32_t>();
    require(r.pod<std::uint32_t>() == kPostingVersion, ErrorKind::Format, "unsupported postings version");
    require(r.pod<std::uint32_t>() == n_list && r.pod<std::uint32_t>() == m, ErrorKind::Format,
            "postings header does not match the manifest");
    index.list_ids.resize(n_list);
    index.list_codes.resize(n_list);
    for (std::size_t l = 0; l < n_list; ++l) {
        const auto count = r.pod<std::uint32_t>();
        for (std::uint32_t e = 0; e < count; ++e) {
            const auto id = r.pod<std::uint32_t>();
            require(id < docs, ErrorKind::Format, "posting refers to an unknown segment");
            index.list_ids[l].push_back(id);
        }
        for (std::size_t b = 0; b < std::size_t{count} * m; ++b) {
            index.list_codes[l].push_back(r.pod<std::uint8_t>());
        }
    }
    require(r.done(), ErrorKind::Format, "trailing bytes in postings.bin");
    return index;
}

} // namespace tokstd
