#include "xmap/oracle.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "xmap/rng.hpp"

namespace xmap::oracle {

namespace {

constexpr double kClusterSpread = 0.3;
constexpr double kOffsetScale = 0.1;

std::vector<double> normal_vector(int d, rng::Stream& stream) {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (double& x : v) x = stream.normal();
    return v;
}

std::vector<double> matvec(const ad::Tensor& m, std::span<const double> v) {
    std::vector<double> out(static_cast<std::size_t>(m.rows()), 0.0);
    for (int i = 0; i < m.rows(); ++i) {
        const double* row = m.row_ptr(i);
        double s = 0.0;
        for (int j = 0; j < m.cols(); ++j) s += row[j] * v[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = s;
    }
    return out;
}

void quantize(std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

} // namespace

GroundTruthMap GroundTruthMap::random(int dim, std::uint64_t seed) {
    if (dim < 1) throw ContractError("ground-truth map: dim must be >= 1");
    rng::Stream stream(rng::derive(seed, "oracle-map"));
    GroundTruthMap map;
    map.rotation = ad::Tensor(dim, dim);
    for (std::size_t i = 0; i < map.rotation.size(); ++i) map.rotation[i] = stream.normal();

    // modified Gram-Schmidt over columns gives a Haar-ish orthogonal matrix
    for (int c = 0; c < dim; ++c) {
        for (int prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (int r = 0; r < dim; ++r) dot += map.rotation.at(r, c) * map.rotation.at(r, prev);
            for (int r = 0; r < dim; ++r) map.rotation.at(r, c) -= dot * map.rotation.at(r, prev);
        }
        double norm = 0.0;
        for (int r = 0; r < dim; ++r) norm += map.rotation.at(r, c) * map.rotation.at(r, c);
        norm = std::sqrt(norm);
        if (norm == 0.0) throw ContractError("ground-truth map: degenerate draw");
        for (int r = 0; r < dim; ++r) map.rotation.at(r, c) /= norm;
    }

    map.offset.resize(static_cast<std::size_t>(dim));
    for (double& o : map.offset) o = kOffsetScale * stream.normal();
    return map;
}

GroundTruthMap GroundTruthMap::identity(int dim) {
    GroundTruthMap map;
    map.rotation = ad::Tensor::identity(dim);
    map.offset.assign(static_cast<std::size_t>(dim), 0.0);
    return map;
}

void OracleConfig::validate() const {
    if (dim < 1) throw ContractError("oracle config: dim must be >= 1");
    if (count < 1) throw ContractError("oracle config: count must be >= 1");
    if (clusters < 1) throw ContractError("oracle config: clusters must be >= 1");
    if (min_frames < 1 || max_frames < min_frames) {
        throw ContractError("oracle config: frame range [" + std::to_string(min_frames) + ", " +
                            std::to_string(max_frames) + "] invalid");
    }
    if (sigma_frames < 0.0 || sigma_audio < 0.0) {
        throw ContractError("oracle config: sigmas must be >= 0");
    }
    if (!map.empty() && (map.rotation.rows() != dim || map.rotation.cols() != dim ||
                         static_cast<int>(map.offset.size()) != dim)) {
        throw ContractError("oracle config: ground-truth map does not match dim");
    }
}

std::vector<double> oracle_map(std::span<const double> v, const GroundTruthMap& map) {
    if (static_cast<int>(v.size()) != map.dim()) {
        throw ContractError("oracle_map: input length " + std::to_string(v.size()) +
                            " does not match map dim " + std::to_string(map.dim()));
    }
    std::vector<double> out = matvec(map.rotation, v);
    for (int i = 0; i < map.dim(); ++i) out[static_cast<std::size_t>(i)] += map.offset[static_cast<std::size_t>(i)];
    return io::l2_normalize(out);
}

OracleDataset gen_paired(const OracleConfig& config) {
    config.validate();

    OracleDataset out;
    out.config = config;
    out.map = config.map.empty() ? GroundTruthMap::random(config.dim, config.seed) : config.map;
    out.config.map = out.map;

    const int d = config.dim;
    rng::Stream centers_stream(rng::derive(config.seed, "oracle-centers"));
    rng::Stream base_stream(rng::derive(config.seed, "oracle-bases"));
    rng::Stream frame_stream(rng::derive(config.seed, "oracle-frames"));
    rng::Stream audio_stream(rng::derive(config.seed, "oracle-audio"));

    std::vector<std::vector<double>> centers;
    centers.reserve(static_cast<std::size_t>(config.clusters));
    for (int c = 0; c < config.clusters; ++c) {
        centers.push_back(io::l2_normalize(normal_vector(d, centers_stream)));
    }

    out.dataset.dim = d;
    out.dataset.samples.reserve(static_cast<std::size_t>(config.count));
    for (int i = 0; i < config.count; ++i) {
        const auto& center = centers[static_cast<std::size_t>(i % config.clusters)];
        std::vector<double> base = normal_vector(d, base_stream);
        for (int j = 0; j < d; ++j) {
            base[static_cast<std::size_t>(j)] = center[static_cast<std::size_t>(j)] +
                                                kClusterSpread * base[static_cast<std::size_t>(j)];
        }
        base = io::l2_normalize(base);

        io::PairedSample sample;
        sample.id = "sample-" + std::to_string(i);
        sample.dim = d;
        sample.frame_count = static_cast<int>(frame_stream.uniform_int(config.min_frames, config.max_frames));
        sample.frames.reserve(static_cast<std::size_t>(sample.frame_count) * d);
        for (int f = 0; f < sample.frame_count; ++f) {
            std::vector<double> frame = base;
            if (config.sigma_frames > 0.0) {
                for (int j = 0; j < d; ++j) frame[static_cast<std::size_t>(j)] += config.sigma_frames * frame_stream.normal();
                frame = io::l2_normalize(frame);
            }
            quantize(frame);
            sample.frames.insert(sample.frames.end(), frame.begin(), frame.end());
        }

        std::vector<double> target = matvec(out.map.rotation, base);
        for (int j = 0; j < d; ++j) {
            target[static_cast<std::size_t>(j)] += out.map.offset[static_cast<std::size_t>(j)];
            if (config.sigma_audio > 0.0) {
                target[static_cast<std::size_t>(j)] += config.sigma_audio * audio_stream.normal();
            }
        }
        sample.audio = io::l2_normalize(target);
        quantize(sample.audio);

        out.dataset.samples.push_back(std::move(sample));
    }
    return out;
}

void write_oracle_dataset(const OracleDataset& data, const std::filesystem::path& dir, int holdout) {
    const int n = static_cast<int>(data.dataset.samples.size());
    if (holdout < 0 || holdout >= n) {
        throw ContractError("write_oracle_dataset: holdout " + std::to_string(holdout) +
                            " must lie in [0, " + std::to_string(n) + ")");
    }
    std::filesystem::create_directories(dir);

    io::FrameSequenceSet frames;
    frames.dim = data.dataset.dim;
    io::EmbeddingSet audio;
    audio.dim = data.dataset.dim;
    io::EmbeddingSet visual;
    visual.dim = data.dataset.dim;
    io::Aggregator avg{io::AggregatorKind::Average, data.config.seed, 0};
    for (const auto& s : data.dataset.samples) {
        frames.sequences.push_back({s.frame_count, s.frames});
        audio.append(s.audio);
        std::vector<double> v = io::aggregate(s, avg);
        visual.append(v);
    }
    io::write_frame_sequences(frames, dir / "frames.ems");
    io::write_embedding_set(audio, dir / "audio.emb");
    io::write_embedding_set(visual, dir / "visual.emb");

    const int train_n = n - holdout;
    std::vector<io::ManifestEntry> train_entries;
    for (int i = 0; i < train_n; ++i) {
        train_entries.push_back({data.dataset.samples[static_cast<std::size_t>(i)].id,
                                 "frames.ems", i, "audio.emb", i});
    }
    io::write_manifest(data.dataset.dim, train_entries, dir / "manifest.json");

    if (holdout > 0) {
        std::vector<io::ManifestEntry> hold_entries;
        io::EmbeddingSet hold_visual, hold_audio;
        hold_visual.dim = hold_audio.dim = data.dataset.dim;
        for (int i = train_n; i < n; ++i) {
            const auto& s = data.dataset.samples[static_cast<std::size_t>(i)];
            hold_entries.push_back({s.id, "frames.ems", i, "audio.emb", i});
            hold_visual.append(io::aggregate(s, avg));
            hold_audio.append(s.audio);
        }
        io::write_manifest(data.dataset.dim, hold_entries, dir / "holdout_manifest.json");
        io::write_embedding_set(hold_visual, dir / "visual_holdout.emb");
        io::write_embedding_set(hold_audio, dir / "audio_holdout.emb");
    }

    save_map(data.map, data.config.sigma_audio, dir / "map.json");
}

void save_map(const GroundTruthMap& map, double sigma_audio, const std::filesystem::path& path) {
    nlohmann::json doc = {
        {"dim", map.dim()},
        {"rotation", map.rotation.data()},
        {"offset", map.offset},
        {"sigma_audio", sigma_audio},
    };
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("I/O error: cannot open " + path.string() + " for writing");
    out << doc.dump() << "\n";
}

LoadedMap load_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("I/O error: cannot open " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("format error: " + path.string() + " is not valid JSON: " + e.what());
    }
    LoadedMap loaded;
    int dim = doc.at("dim").get<int>();
    std::vector<double> rot = doc.at("rotation").get<std::vector<double>>();
    if (static_cast<int>(rot.size()) != dim * dim) {
        throw FormatError("format error: " + path.string() + " rotation has " +
                          std::to_string(rot.size()) + " entries for dim " + std::to_string(dim));
    }
    loaded.map.rotation = ad::Tensor(dim, dim, std::move(rot));
    loaded.map.offset = doc.at("offset").get<std::vector<double>>();
    if (static_cast<int>(loaded.map.offset.size()) != dim) {
        throw FormatError("format error: " + path.string() + " offset length mismatch");
    }
    loaded.sigma_audio = doc.at("sigma_audio").get<double>();
    return loaded;
}

double trace_covariance(const io::EmbeddingSet& samples) {
    const int n = samples.count();
    const int d = samples.dim;
    if (n < 2) throw ContractError("trace_covariance: need at least 2 samples");
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i) {
        auto r = samples.row(i);
        for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
    }
    for (double& m : mean) m /= n;
    double trace = 0.0;
    for (int i = 0; i < n; ++i) {
        auto r = samples.row(i);
        for (int j = 0; j < d; ++j) {
            double dv = r[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)];
            trace += dv * dv;
        }
    }
    return trace / (n - 1);
}

SpreadStats conditional_spread(const GroundTruthMap& map, double sigma_audio,
                               std::span<const double> cond, const io::EmbeddingSet& samples,
                               int oracle_draws, std::uint64_t seed) {
    if (oracle_draws < 2) throw ContractError("conditional_spread: need at least 2 oracle draws");
    SpreadStats stats;
    stats.mapper_spread = trace_covariance(samples);

    rng::Stream stream(rng::derive(seed, "oracle-spread"));
    const int d = map.dim();
    std::vector<double> base = matvec(map.rotation, cond);
    for (int j = 0; j < d; ++j) base[static_cast<std::size_t>(j)] += map.offset[static_cast<std::size_t>(j)];

    io::EmbeddingSet draws;
    draws.dim = d;
    draws.values.reserve(static_cast<std::size_t>(oracle_draws) * d);
    std::vector<double> v(static_cast<std::size_t>(d));
    for (int k = 0; k < oracle_draws; ++k) {
        for (int j = 0; j < d; ++j) v[static_cast<std::size_t>(j)] = base[static_cast<std::size_t>(j)] + sigma_audio * stream.normal();
        std::vector<double> norm = io::l2_normalize(v);
        draws.values.insert(draws.values.end(), norm.begin(), norm.end());
    }
    stats.oracle_spread = trace_covariance(draws);
    return stats;
}

} // namespace xmap::oracle
