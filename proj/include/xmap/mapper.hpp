#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "xmap/tensor.hpp"

namespace xmap::model {

enum class Variant { RegMlp, RegTransformer, DiffMlp, DiffTransformer };

bool is_diffusion(Variant v);
bool is_transformer(Variant v);
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct MapperConfig {
    Variant variant = Variant::RegMlp;
    int dim = 512;          // token width d
    int depth = 1;          // MLP block count D, or transformer depth
    int expansion = 4;      // MLP hidden width = expansion * dim
    int heads = 12;
    int head_dim = 64;
    int ff_expansion = 4;
    int max_timesteps = 1000; // diffusion timestep table size T

    void validate() const;  // throws ContractError on a bad combination
};

struct NamedTensor {
    std::string name;
    ad::Tensor tensor;
};

// Parameter registration order is fixed by param_shapes(); initialization
// draws and checkpoint layout both follow it.
struct MapperParams {
    std::vector<NamedTensor> named;

    ad::Tensor& find(const std::string& name);
    const ad::Tensor& find(const std::string& name) const;
    bool has(const std::string& name) const;
    std::size_t total_size() const;
};

struct ShapeSpec {
    std::string name;
    int rows = 0;
    int cols = 0;
};

std::vector<ShapeSpec> param_shapes(const MapperConfig& config);
std::size_t param_count(const MapperConfig& config);

// Deterministic for a given seed. Linear weights are Glorot-uniform in
// +-sqrt(6/(fan_in+fan_out)); layer-norm gains 1 and shifts 0; embedding
// tables and learnable tokens draw from N(0, 0.02); the final projection is
// zero-initialized for diffusion variants so the untrained predictor is the
// zero function; the null-condition embedding starts at zero. All values are
// rounded through float32 so that checkpoints persist them exactly.
MapperParams init_params(const MapperConfig& config, std::uint64_t seed);

// Binds parameter tensors onto a tape on first use; unbound parameters read
// back a zero gradient.
class ParamBinding {
public:
    ParamBinding(ad::Tape& tape, const MapperParams& params);
    ad::Value operator[](const std::string& name);
    // gradients in registration order, zeros for parameters the forward
    // pass never touched
    std::vector<ad::Tensor> grads();

private:
    ad::Tape& tape_;
    const MapperParams& params_;
    std::unordered_map<std::string, ad::Value> bound_;
};

// Pre-norm residual encoder block: multi-head self-attention then a SiLU
// feedforward, both with residual connections. `tokens_per_sample` gives the
// attention block structure; rows of `tokens` hold samples' tokens
// interleaved. When attn_probs_out is non-null it receives the softmaxed
// attention weights node.
ad::Value attention_block(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                          ad::Value tokens, int tokens_per_sample, const std::string& prefix,
                          ad::Value* attn_probs_out = nullptr);

// Learnable timestep table lookup followed by a linear projection.
ad::Value timestep_embed(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                         const std::vector<int>& timesteps);

// Batched forward passes. Inputs are B x d matrices; outputs are B x d.
ad::Value forward_regression(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                             ad::Value inputs);

// Diffusion forward: predicts the clean target from (t, x_t, condition).
// When drop_mask is non-null, samples with mask=1 swap their condition for
// the learned null embedding (classifier-free guidance training); when
// use_null_condition is true every sample uses the null embedding.
ad::Value forward_diffusion(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                            const std::vector<int>& timesteps, ad::Value noisy, ad::Value cond,
                            const std::vector<std::uint8_t>* drop_mask = nullptr,
                            bool use_null_condition = false);

// Convenience no-grad evaluation wrappers.
ad::Tensor predict_regression(const MapperParams& params, const MapperConfig& config,
                              const ad::Tensor& inputs);
ad::Tensor predict_diffusion(const MapperParams& params, const MapperConfig& config,
                             const std::vector<int>& timesteps, const ad::Tensor& noisy,
                             const ad::Tensor& cond, bool use_null_condition = false);
ad::Tensor timestep_embedding(const MapperParams& params, const MapperConfig& config, int t);

} // namespace xmap::model
