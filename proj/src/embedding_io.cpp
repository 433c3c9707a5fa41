#include "xmap/embedding_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "xmap/rng.hpp"

namespace xmap::io {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

class Reader {
public:
    Reader(std::string bytes, std::filesystem::path path)
        : bytes_(std::move(bytes)), path_(std::move(path)) {}

    std::uint32_t u32(const char* what) {
        if (pos_ + 4 > bytes_.size()) {
            throw FormatError("length error: " + path_.string() + " truncated while reading " + what);
        }
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) {
            v = (v << 8) | static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]);
        }
        pos_ += 4;
        return v;
    }

    float f32(const char* what) {
        std::uint32_t v = u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    void expect_magic(const char* magic) {
        if (pos_ + 4 > bytes_.size() || std::memcmp(bytes_.data() + pos_, magic, 4) != 0) {
            throw FormatError("format error: " + path_.string() + " lacks magic \"" + magic + "\"");
        }
        pos_ += 4;
    }

    bool exhausted() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::string bytes_;
    std::filesystem::path path_;
    std::size_t pos_ = 0;
};

Reader open_reader(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("I/O error: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(bytes), path);
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("I/O error: cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("I/O error: short write to " + path.string());
}

} // namespace

// ----------------------------------------------------------- EmbeddingSet

void EmbeddingSet::append(std::span<const double> r) {
    if (static_cast<int>(r.size()) != dim) {
        throw ShapeError("embedding set: row length " + std::to_string(r.size()) +
                         " does not match dim " + std::to_string(dim));
    }
    values.insert(values.end(), r.begin(), r.end());
}

ad::Tensor EmbeddingSet::to_tensor() const {
    return ad::Tensor(count(), dim, values);
}

EmbeddingSet EmbeddingSet::from_tensor(const ad::Tensor& t) {
    EmbeddingSet s;
    s.dim = t.cols();
    s.values = t.data();
    return s;
}

// ------------------------------------------------------------- aggregator

AggregatorKind aggregator_from_string(const std::string& s) {
    if (s == "random") return AggregatorKind::Random;
    if (s == "middle") return AggregatorKind::Middle;
    if (s == "average") return AggregatorKind::Average;
    throw ContractError("unknown aggregator \"" + s + "\" (expected random|middle|average)");
}

std::string to_string(AggregatorKind k) {
    switch (k) {
    case AggregatorKind::Random: return "random";
    case AggregatorKind::Middle: return "middle";
    case AggregatorKind::Average: return "average";
    }
    return "?";
}

std::vector<double> aggregate(const PairedSample& sample, const Aggregator& strategy) {
    if (sample.frame_count < 1) {
        throw ContractError("aggregate: empty frame sequence for sample \"" + sample.id + "\"");
    }
    switch (strategy.kind) {
    case AggregatorKind::Random: {
        rng::Stream stream(rng::derive(strategy.seed, "aggregate",
                                       rng::mix(rng::fnv1a(sample.id), strategy.epoch)));
        int pick = static_cast<int>(stream.uniform_int(0, sample.frame_count - 1));
        auto f = sample.frame(pick);
        return {f.begin(), f.end()};
    }
    case AggregatorKind::Middle: {
        auto f = sample.frame(sample.frame_count / 2);
        return {f.begin(), f.end()};
    }
    case AggregatorKind::Average: {
        std::vector<double> out(static_cast<std::size_t>(sample.dim), 0.0);
        for (int j = 0; j < sample.frame_count; ++j) {
            auto f = sample.frame(j);
            for (int k = 0; k < sample.dim; ++k) out[static_cast<std::size_t>(k)] += f[static_cast<std::size_t>(k)];
        }
        for (double& v : out) v /= sample.frame_count;
        return out;
    }
    }
    throw ContractError("aggregate: unknown strategy");
}

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::vector<double> l2_normalize(std::span<const double> v) {
    double n = l2_norm(v);
    if (n == 0.0) throw ContractError("l2_normalize: zero vector");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= n;
    return out;
}

// ------------------------------------------------------------ EMB1 format

void write_embedding_set(const EmbeddingSet& set, const std::filesystem::path& path) {
    std::string bytes;
    bytes.reserve(16 + set.values.size() * 4);
    bytes.append("EMB1", 4);
    put_u32(bytes, 1);
    put_u32(bytes, static_cast<std::uint32_t>(set.count()));
    put_u32(bytes, static_cast<std::uint32_t>(set.dim));
    for (double v : set.values) put_f32(bytes, static_cast<float>(v));
    write_file(path, bytes);
}

EmbeddingSet read_embedding_set(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    r.expect_magic("EMB1");
    std::uint32_t version = r.u32("version");
    if (version != 1) {
        throw FormatError("format error: " + path.string() + " has unsupported EMB1 version " +
                          std::to_string(version));
    }
    std::uint32_t n = r.u32("row count");
    std::uint32_t d = r.u32("dim");
    if (d == 0) throw FormatError("header error: " + path.string() + " declares dim=0");
    if (r.remaining() != static_cast<std::size_t>(n) * d * 4) {
        throw FormatError("length error: " + path.string() + " payload holds " +
                          std::to_string(r.remaining() / (static_cast<std::size_t>(d) * 4)) +
                          " rows but header claims " + std::to_string(n));
    }
    EmbeddingSet set;
    set.dim = static_cast<int>(d);
    set.values.resize(static_cast<std::size_t>(n) * d);
    for (double& v : set.values) v = r.f32("row data");
    return set;
}

// ------------------------------------------------------------ EMS1 format

void write_frame_sequences(const FrameSequenceSet& set, const std::filesystem::path& path) {
    std::string bytes;
    bytes.append("EMS1", 4);
    put_u32(bytes, 1);
    put_u32(bytes, static_cast<std::uint32_t>(set.dim));
    put_u32(bytes, static_cast<std::uint32_t>(set.sequences.size()));
    for (const FrameSequence& seq : set.sequences) {
        put_u32(bytes, static_cast<std::uint32_t>(seq.frame_count));
        for (double v : seq.values) put_f32(bytes, static_cast<float>(v));
    }
    write_file(path, bytes);
}

FrameSequenceSet read_frame_sequences(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    r.expect_magic("EMS1");
    std::uint32_t version = r.u32("version");
    if (version != 1) {
        throw FormatError("format error: " + path.string() + " has unsupported EMS1 version " +
                          std::to_string(version));
    }
    std::uint32_t d = r.u32("dim");
    if (d == 0) throw FormatError("header error: " + path.string() + " declares dim=0");
    std::uint32_t count = r.u32("sample count");
    FrameSequenceSet set;
    set.dim = static_cast<int>(d);
    set.sequences.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        FrameSequence seq;
        seq.frame_count = static_cast<int>(r.u32("frame count"));
        seq.values.resize(static_cast<std::size_t>(seq.frame_count) * d);
        for (double& v : seq.values) v = r.f32("frame data");
        set.sequences.push_back(std::move(seq));
    }
    if (!r.exhausted()) {
        throw FormatError("length error: " + path.string() + " has trailing bytes");
    }
    return set;
}

// --------------------------------------------------------------- manifest

void write_manifest(int dim, const std::vector<ManifestEntry>& entries,
                    const std::filesystem::path& path) {
    nlohmann::json doc;
    doc["dim"] = dim;
    doc["samples"] = nlohmann::json::array();
    for (const ManifestEntry& e : entries) {
        doc["samples"].push_back({
            {"id", e.id},
            {"frames", {{"path", e.frames_path}, {"index", e.frames_index}}},
            {"audio", {{"path", e.audio_path}, {"row", e.audio_row}}},
        });
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("I/O error: cannot open " + path.string() + " for writing");
    out << doc.dump(2) << "\n";
}

PairedDataset read_paired_dataset(const std::filesystem::path& manifest_path, bool normalize) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("I/O error: cannot open " + manifest_path.string());

    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("format error: " + manifest_path.string() + " is not valid JSON: " + e.what());
    }
    if (!doc.contains("dim") || !doc.contains("samples")) {
        throw FormatError("format error: " + manifest_path.string() + " lacks dim/samples fields");
    }

    PairedDataset ds;
    ds.dim = doc["dim"].get<int>();
    if (ds.dim < 1) throw FormatError("header error: manifest declares dim=" + std::to_string(ds.dim));

    auto base = manifest_path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };

    std::map<std::string, FrameSequenceSet> frame_files;
    std::map<std::string, EmbeddingSet> audio_files;

    for (const auto& s : doc["samples"]) {
        ManifestEntry e;
        e.id = s.at("id").get<std::string>();
        const auto& fr = s.at("frames");
        if (fr.is_string()) {
            e.frames_path = fr.get<std::string>();
        } else {
            e.frames_path = fr.at("path").get<std::string>();
            e.frames_index = fr.value("index", 0);
        }
        const auto& au = s.at("audio");
        e.audio_path = au.at("path").get<std::string>();
        e.audio_row = au.value("row", 0);

        auto fpath = resolve(e.frames_path);
        if (!frame_files.count(fpath.string())) {
            if (!std::filesystem::exists(fpath)) {
                throw IoError("I/O error: manifest sample \"" + e.id + "\" references missing file " +
                              fpath.string());
            }
            frame_files.emplace(fpath.string(), read_frame_sequences(fpath));
        }
        auto apath = resolve(e.audio_path);
        if (!audio_files.count(apath.string())) {
            if (!std::filesystem::exists(apath)) {
                throw IoError("I/O error: manifest sample \"" + e.id + "\" references missing file " +
                              apath.string());
            }
            audio_files.emplace(apath.string(), read_embedding_set(apath));
        }

        const FrameSequenceSet& fs = frame_files.at(fpath.string());
        const EmbeddingSet& as = audio_files.at(apath.string());
        if (fs.dim != ds.dim || as.dim != ds.dim) {
            throw ContractError("consistency error: sample \"" + e.id + "\" has frames dim " +
                                std::to_string(fs.dim) + ", audio dim " + std::to_string(as.dim) +
                                ", manifest dim " + std::to_string(ds.dim));
        }
        if (e.frames_index < 0 || e.frames_index >= static_cast<int>(fs.sequences.size())) {
            throw ContractError("consistency error: sample \"" + e.id + "\" frame index " +
                                std::to_string(e.frames_index) + " out of range");
        }
        if (e.audio_row < 0 || e.audio_row >= as.count()) {
            throw ContractError("consistency error: sample \"" + e.id + "\" audio row " +
                                std::to_string(e.audio_row) + " out of range");
        }

        const FrameSequence& seq = fs.sequences[static_cast<std::size_t>(e.frames_index)];
        if (seq.frame_count < 1) {
            throw ContractError("consistency error: sample \"" + e.id + "\" has an empty frame sequence");
        }

        PairedSample sample;
        sample.id = e.id;
        sample.dim = ds.dim;
        sample.frame_count = seq.frame_count;
        sample.frames = seq.values;
        auto arow = as.row(e.audio_row);
        sample.audio.assign(arow.begin(), arow.end());

        if (normalize) {
            for (int j = 0; j < sample.frame_count; ++j) {
                auto norm = l2_normalize(sample.frame(j));
                std::copy(norm.begin(), norm.end(),
                          sample.frames.begin() + static_cast<std::ptrdiff_t>(j) * ds.dim);
            }
            sample.audio = l2_normalize(sample.audio);
        }

        ds.samples.push_back(std::move(sample));
    }
    return ds;
}

} // namespace xmap::io
