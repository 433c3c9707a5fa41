#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "xmap/embedding_io.hpp"
#include "xmap/tensor.hpp"

namespace xmap::oracle {

// Known ground-truth translation: an orthogonal rotation plus an offset.
// Norm-preserving and smooth, so the learning problem it induces is solvable
// by construction.
struct GroundTruthMap {
    ad::Tensor rotation;        // d x d orthogonal
    std::vector<double> offset; // d

    bool empty() const { return rotation.size() == 0; }
    int dim() const { return rotation.rows(); }

    static GroundTruthMap random(int dim, std::uint64_t seed);
    static GroundTruthMap identity(int dim);
};

struct OracleConfig {
    int dim = 32;
    int count = 4096;
    int clusters = 8;
    GroundTruthMap map;     // empty -> drawn from seed
    int min_frames = 1;
    int max_frames = 3;
    double sigma_frames = 0.0;
    double sigma_audio = 0.0; // 0 -> one-to-one; > 0 -> one-to-many
    std::uint64_t seed = 0;

    void validate() const;
};

struct OracleDataset {
    io::PairedDataset dataset;
    GroundTruthMap map;
    OracleConfig config; // with the realized map filled in
};

// Samples cluster centers on the unit sphere, draws visual bases near them,
// emits jittered frames and audio targets normalize(R base + offset + noise).
// Deterministic per (config, seed); embedding values are float32-quantized so
// the in-memory dataset matches its on-disk form.
OracleDataset gen_paired(const OracleConfig& config);

// The reference answer for a trained mapper: normalize(R v + offset).
std::vector<double> oracle_map(std::span<const double> v, const GroundTruthMap& map);

// Writes frames.ems, audio.emb, visual.emb (average-aggregated, for gap
// diagnostics), manifest.json and map.json into `dir`. With holdout > 0 the
// last `holdout` samples move to holdout_manifest.json plus
// visual_holdout.emb / audio_holdout.emb; manifest.json keeps the rest.
void write_oracle_dataset(const OracleDataset& data, const std::filesystem::path& dir,
                          int holdout = 0);

void save_map(const GroundTruthMap& map, double sigma_audio, const std::filesystem::path& path);

struct LoadedMap {
    GroundTruthMap map;
    double sigma_audio = 0.0;
};

LoadedMap load_map(const std::filesystem::path& path);

// Sum of per-coordinate unbiased variances.
double trace_covariance(const io::EmbeddingSet& samples);

struct SpreadStats {
    double mapper_spread = 0.0;
    double oracle_spread = 0.0;
};

// Compares the spread of mapper samples for one condition against the
// oracle's own conditional spread, measured by Monte Carlo draws of
// normalize(R cond + offset + sigma_audio * g).
SpreadStats conditional_spread(const GroundTruthMap& map, double sigma_audio,
                               std::span<const double> cond, const io::EmbeddingSet& samples,
                               int oracle_draws = 4096, std::uint64_t seed = 0);

} // namespace xmap::oracle
