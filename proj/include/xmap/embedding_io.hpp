#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xmap/errors.hpp"
#include "xmap/tensor.hpp"

namespace xmap::io {

// N rows of d-dimensional vectors; the universal currency of the pipeline.
// In memory values are double; on disk they are little-endian float32.
struct EmbeddingSet {
    int dim = 0;
    std::vector<double> values; // count * dim, row-major

    int count() const { return dim == 0 ? 0 : static_cast<int>(values.size()) / dim; }
    std::span<const double> row(int i) const { return {values.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)}; }
    std::span<double> row(int i) { return {values.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)}; }
    void append(std::span<const double> r);

    ad::Tensor to_tensor() const;
    static EmbeddingSet from_tensor(const ad::Tensor& t);
};

// One visual frame sequence paired with its target audio embedding.
struct PairedSample {
    std::string id;
    int dim = 0;
    int frame_count = 0;
    std::vector<double> frames; // frame_count * dim
    std::vector<double> audio;  // dim

    std::span<const double> frame(int j) const {
        return {frames.data() + static_cast<std::size_t>(j) * dim, static_cast<std::size_t>(dim)};
    }
};

struct PairedDataset {
    int dim = 0;
    std::vector<PairedSample> samples;
};

// A set of frame sequences as stored in an EMS1 file.
struct FrameSequence {
    int frame_count = 0;
    std::vector<double> values; // frame_count * dim
};

struct FrameSequenceSet {
    int dim = 0;
    std::vector<FrameSequence> sequences;
};

// Aggregator sigma: reduce per-frame embeddings to one vector per video.
enum class AggregatorKind { Random, Middle, Average };

struct Aggregator {
    AggregatorKind kind = AggregatorKind::Average;
    std::uint64_t seed = 0;   // drives the random variant
    std::uint64_t epoch = 0;  // nonzero only when per-epoch redraw is enabled
};

AggregatorKind aggregator_from_string(const std::string& s);
std::string to_string(AggregatorKind k);

std::vector<double> aggregate(const PairedSample& sample, const Aggregator& strategy);

double l2_norm(std::span<const double> v);
std::vector<double> l2_normalize(std::span<const double> v);

// EMB1 file: magic "EMB1" | u32 version=1 | u32 N | u32 d | N*d float32,
// little-endian, row-major.
void write_embedding_set(const EmbeddingSet& set, const std::filesystem::path& path);
EmbeddingSet read_embedding_set(const std::filesystem::path& path);

// EMS1 file: magic "EMS1" | u32 version=1 | u32 d | u32 sample count |
// per sample (u32 n | n*d float32), little-endian.
void write_frame_sequences(const FrameSequenceSet& set, const std::filesystem::path& path);
FrameSequenceSet read_frame_sequences(const std::filesystem::path& path);

// Paired-dataset manifest: JSON {dim, samples: [{id, frames: {path, index},
// audio: {path, row}}]}. Paths are resolved relative to the manifest file.
// `frames` may also be a bare path string (index 0).
struct ManifestEntry {
    std::string id;
    std::string frames_path;
    int frames_index = 0;
    std::string audio_path;
    int audio_row = 0;
};

void write_manifest(int dim, const std::vector<ManifestEntry>& entries,
                    const std::filesystem::path& path);

// Loads the dataset a manifest describes. With normalize=true (the default)
// every frame and audio vector is L2-normalized at ingestion; both embedding
// spaces are cosine-metric, so training operates on unit vectors.
PairedDataset read_paired_dataset(const std::filesystem::path& manifest_path, bool normalize = true);

} // namespace xmap::io
