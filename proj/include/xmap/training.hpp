#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xmap/diffusion.hpp"
#include "xmap/embedding_io.hpp"
#include "xmap/mapper.hpp"
#include "xmap/tensor.hpp"

namespace xmap::train {

struct AdamWConfig {
    double learning_rate = 1.1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay applied before the bias-corrected Adam update.
// `step` is 1-based. All state stays on the float32 grid (see quantize_f32)
// so checkpoints roundtrip exactly.
void adamw_update(ad::Tensor& param, const ad::Tensor& grad, ad::Tensor& m, ad::Tensor& v,
                  long step, const AdamWConfig& cfg);

// (1/K) * sum_i ||target_i - pred_i||^2 over rows; no division by d.
double regression_loss(const ad::Tensor& pred, const ad::Tensor& target);
ad::Value regression_loss_graph(ad::Tape& tape, ad::Value pred, const ad::Tensor& target);

struct TrainConfig {
    int batch_size = 448;
    double learning_rate = 1.1e-4;
    int epochs = 100;
    double weight_decay = 0.01;
    double drop_rate = 0.1; // diffusion only
    std::uint64_t seed = 0;
    io::AggregatorKind aggregator = io::AggregatorKind::Average;
    bool redraw_random_frames = false; // random aggregator re-picks per epoch
    int schedule_steps = 1000;
    double schedule_offset = 0.008;
    bool normalized_inputs = true; // recorded so downstream tools match ingestion
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

struct OptState {
    std::vector<ad::Tensor> m; // aligned with MapperParams registration order
    std::vector<ad::Tensor> v;
    long step = 0;
};

struct Checkpoint {
    int format_version = 1;
    model::MapperConfig mapper;
    TrainConfig config;
    model::MapperParams params;
    OptState opt;
    int epochs_completed = 0;
    std::vector<double> loss_history;
};

// Fresh parameters plus zeroed optimizer state; equals a 0-epoch training run.
Checkpoint init_checkpoint(const model::MapperConfig& mapper, const TrainConfig& config);

// Runs config.epochs epochs. Every random draw comes from streams keyed by
// (seed, stream name, epoch), so a resumed run replays the uninterrupted one.
Checkpoint train(const model::MapperConfig& mapper, const io::PairedDataset& dataset,
                 const TrainConfig& config);

// Continues a checkpoint up to target_epochs total epochs.
Checkpoint resume(Checkpoint checkpoint, const io::PairedDataset& dataset, int target_epochs);

// Checkpoint file: magic "V2AM" | u32 version | u64 config length | config
// JSON | u32 section count | sections (u32 name length | name | u32 rank |
// u32 extents | float32 payload), little-endian.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace xmap::train
