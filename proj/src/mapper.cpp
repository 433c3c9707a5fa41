#include "xmap/mapper.hpp"

#include <cmath>

#include "xmap/rng.hpp"

namespace xmap::model {

namespace {

enum class InitKind { Glorot, Zero, One, Embedding };

struct ParamSpec {
    std::string name;
    int rows = 0;
    int cols = 0;
    InitKind init = InitKind::Glorot;
};

constexpr double kLayerNormEps = 1e-5;
constexpr double kEmbeddingStd = 0.02;

std::vector<ParamSpec> build_specs(const MapperConfig& c) {
    c.validate();
    std::vector<ParamSpec> specs;
    auto push = [&](std::string name, int rows, int cols, InitKind init) {
        specs.push_back({std::move(name), rows, cols, init});
    };

    const int d = c.dim;
    const bool diffusion = is_diffusion(c.variant);

    if (diffusion) {
        push("time.table", c.max_timesteps, d, InitKind::Embedding);
        push("time.proj.w", d, d, InitKind::Glorot);
        push("time.proj.b", 1, d, InitKind::Zero);
        push("null_cond", 1, d, InitKind::Zero);
    }

    if (is_transformer(c.variant)) {
        const int tokens = diffusion ? 4 : 2;
        const int attn_dim = c.heads * c.head_dim;
        const int ff_dim = c.ff_expansion * d;
        push("out_token", 1, d, InitKind::Embedding);
        push("type_emb", tokens, d, InitKind::Embedding);
        for (int i = 0; i < c.depth; ++i) {
            std::string p = "blk." + std::to_string(i) + ".";
            push(p + "ln1.g", 1, d, InitKind::One);
            push(p + "ln1.b", 1, d, InitKind::Zero);
            push(p + "attn.wq", d, attn_dim, InitKind::Glorot);
            push(p + "attn.bq", 1, attn_dim, InitKind::Zero);
            push(p + "attn.wk", d, attn_dim, InitKind::Glorot);
            push(p + "attn.bk", 1, attn_dim, InitKind::Zero);
            push(p + "attn.wv", d, attn_dim, InitKind::Glorot);
            push(p + "attn.bv", 1, attn_dim, InitKind::Zero);
            push(p + "attn.wo", attn_dim, d, InitKind::Glorot);
            push(p + "attn.bo", 1, d, InitKind::Zero);
            push(p + "ln2.g", 1, d, InitKind::One);
            push(p + "ln2.b", 1, d, InitKind::Zero);
            push(p + "ff.w1", d, ff_dim, InitKind::Glorot);
            push(p + "ff.b1", 1, ff_dim, InitKind::Zero);
            push(p + "ff.w2", ff_dim, d, InitKind::Glorot);
            push(p + "ff.b2", 1, d, InitKind::Zero);
        }
        push("final_ln.g", 1, d, InitKind::One);
        push("final_ln.b", 1, d, InitKind::Zero);
        push("out.w", d, d, diffusion ? InitKind::Zero : InitKind::Glorot);
        push("out.b", 1, d, InitKind::Zero);
    } else {
        const int hidden = c.expansion * d;
        int in_width = diffusion ? 3 * d : d;
        for (int i = 0; i < c.depth; ++i) {
            std::string p = "mlp." + std::to_string(i) + ".";
            push(p + "w", in_width, hidden, InitKind::Glorot);
            push(p + "b", 1, hidden, InitKind::Zero);
            push(p + "ln.g", 1, hidden, InitKind::One);
            push(p + "ln.b", 1, hidden, InitKind::Zero);
            in_width = hidden;
        }
        push("out.w", in_width, d, diffusion ? InitKind::Zero : InitKind::Glorot);
        push("out.b", 1, d, InitKind::Zero);
    }
    return specs;
}

// Masked swap of condition rows against the learned null embedding.
ad::Value resolve_condition(ad::Tape& tape, ParamBinding& bind, ad::Value cond, int batch,
                            const std::vector<std::uint8_t>* drop_mask, bool use_null) {
    if (use_null) {
        return tape.tile_rows(bind["null_cond"], batch);
    }
    if (drop_mask == nullptr) return cond;
    const ad::Tensor& c = tape.value(cond);
    if (static_cast<int>(drop_mask->size()) != batch) {
        throw ContractError("forward_diffusion: drop mask length " +
                            std::to_string(drop_mask->size()) + " does not match batch " +
                            std::to_string(batch));
    }
    bool any = false;
    for (std::uint8_t m : *drop_mask) any = any || (m != 0);
    if (!any) return cond;
    ad::Tensor keep(batch, c.cols());
    ad::Tensor drop(batch, c.cols());
    for (int i = 0; i < batch; ++i) {
        double kv = (*drop_mask)[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
        for (int j = 0; j < c.cols(); ++j) {
            keep.at(i, j) = kv;
            drop.at(i, j) = 1.0 - kv;
        }
    }
    ad::Value kept = tape.mul(cond, tape.constant(keep));
    ad::Value null_rows = tape.mul(tape.tile_rows(bind["null_cond"], batch), tape.constant(drop));
    return tape.add(kept, null_rows);
}

ad::Value mlp_stack(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config, ad::Value x) {
    for (int i = 0; i < config.depth; ++i) {
        std::string p = "mlp." + std::to_string(i) + ".";
        ad::Value h = tape.add_rowvec(tape.matmul(x, bind[p + "w"]), bind[p + "b"]);
        h = tape.silu(h);
        x = tape.layer_norm_rows(h, bind[p + "ln.g"], bind[p + "ln.b"], kLayerNormEps);
    }
    return tape.add_rowvec(tape.matmul(x, bind["out.w"]), bind["out.b"]);
}

ad::Value transformer_stack(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                            const std::vector<ad::Value>& tokens) {
    const int m = static_cast<int>(tokens.size());
    const int batch = tape.value(tokens[0]).rows();
    ad::Value x = tape.interleave_rows(tokens);
    x = tape.add(x, tape.tile_rows(bind["type_emb"], batch));
    for (int i = 0; i < config.depth; ++i) {
        x = attention_block(tape, bind, config, x, m, "blk." + std::to_string(i) + ".");
    }
    x = tape.layer_norm_rows(x, bind["final_ln.g"], bind["final_ln.b"], kLayerNormEps);
    ad::Value out_tokens = tape.rows_strided(x, m, m - 1);
    return tape.add_rowvec(tape.matmul(out_tokens, bind["out.w"]), bind["out.b"]);
}

} // namespace

bool is_diffusion(Variant v) { return v == Variant::DiffMlp || v == Variant::DiffTransformer; }
bool is_transformer(Variant v) { return v == Variant::RegTransformer || v == Variant::DiffTransformer; }

std::string to_string(Variant v) {
    switch (v) {
    case Variant::RegMlp: return "reg-mlp";
    case Variant::RegTransformer: return "reg-transformer";
    case Variant::DiffMlp: return "diff-mlp";
    case Variant::DiffTransformer: return "diff-transformer";
    }
    return "?";
}

Variant variant_from_string(const std::string& s) {
    if (s == "reg-mlp") return Variant::RegMlp;
    if (s == "reg-transformer") return Variant::RegTransformer;
    if (s == "diff-mlp") return Variant::DiffMlp;
    if (s == "diff-transformer") return Variant::DiffTransformer;
    throw ContractError("unknown mapper variant \"" + s +
                        "\" (expected reg-mlp|reg-transformer|diff-mlp|diff-transformer)");
}

void MapperConfig::validate() const {
    if (dim < 1) throw ContractError("mapper config: dim must be >= 1");
    if (depth < 1) throw ContractError("mapper config: depth must be >= 1");
    if (!is_transformer(variant) && expansion < 1) {
        throw ContractError("mapper config: expansion must be >= 1");
    }
    if (is_transformer(variant) && (heads < 1 || head_dim < 1 || ff_expansion < 1)) {
        throw ContractError("mapper config: heads, head_dim and ff_expansion must be >= 1");
    }
    if (is_diffusion(variant) && max_timesteps < 1) {
        throw ContractError("mapper config: diffusion variants need max_timesteps >= 1");
    }
}

ad::Tensor& MapperParams::find(const std::string& name) {
    for (NamedTensor& nt : named) {
        if (nt.name == name) return nt.tensor;
    }
    throw ContractError("mapper params: no parameter named \"" + name + "\"");
}

const ad::Tensor& MapperParams::find(const std::string& name) const {
    for (const NamedTensor& nt : named) {
        if (nt.name == name) return nt.tensor;
    }
    throw ContractError("mapper params: no parameter named \"" + name + "\"");
}

bool MapperParams::has(const std::string& name) const {
    for (const NamedTensor& nt : named) {
        if (nt.name == name) return true;
    }
    return false;
}

std::size_t MapperParams::total_size() const {
    std::size_t n = 0;
    for (const NamedTensor& nt : named) n += nt.tensor.size();
    return n;
}

std::vector<ShapeSpec> param_shapes(const MapperConfig& config) {
    std::vector<ShapeSpec> out;
    for (const ParamSpec& s : build_specs(config)) {
        out.push_back({s.name, s.rows, s.cols});
    }
    return out;
}

std::size_t param_count(const MapperConfig& config) {
    std::size_t n = 0;
    for (const ParamSpec& s : build_specs(config)) {
        n += static_cast<std::size_t>(s.rows) * static_cast<std::size_t>(s.cols);
    }
    return n;
}

MapperParams init_params(const MapperConfig& config, std::uint64_t seed) {
    rng::Stream stream(rng::derive(seed, "init"));
    MapperParams params;
    for (const ParamSpec& spec : build_specs(config)) {
        ad::Tensor t(spec.rows, spec.cols);
        switch (spec.init) {
        case InitKind::Glorot: {
            double bound = std::sqrt(6.0 / (spec.rows + spec.cols));
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = stream.uniform(-bound, bound);
            break;
        }
        case InitKind::Zero:
            break;
        case InitKind::One:
            std::fill(t.data().begin(), t.data().end(), 1.0);
            break;
        case InitKind::Embedding:
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = kEmbeddingStd * stream.normal();
            break;
        }
        ad::quantize_f32(t);
        params.named.push_back({spec.name, std::move(t)});
    }
    return params;
}

ParamBinding::ParamBinding(ad::Tape& tape, const MapperParams& params)
    : tape_(tape), params_(params) {}

ad::Value ParamBinding::operator[](const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    ad::Tensor t = params_.find(name);
    t.requires_grad = true;
    ad::Value v = tape_.leaf(std::move(t));
    bound_.emplace(name, v);
    return v;
}

std::vector<ad::Tensor> ParamBinding::grads() {
    std::vector<ad::Tensor> out;
    out.reserve(params_.named.size());
    for (const NamedTensor& nt : params_.named) {
        auto it = bound_.find(nt.name);
        if (it == bound_.end()) {
            out.push_back(ad::Tensor::zeros(nt.tensor.rows(), nt.tensor.cols()));
        } else {
            out.push_back(tape_.grad(it->second));
        }
    }
    return out;
}

ad::Value attention_block(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                          ad::Value tokens, int tokens_per_sample, const std::string& prefix,
                          ad::Value* attn_probs_out) {
    const ad::Tensor& x = tape.value(tokens);
    if (tokens_per_sample < 1 || x.rows() % tokens_per_sample != 0) {
        throw ShapeError("attention_block: " + std::to_string(tokens_per_sample) +
                         " tokens per sample does not divide " + x.shape_str());
    }
    const int batch = x.rows() / tokens_per_sample;
    const int groups = batch * config.heads;

    ad::Value h = tape.layer_norm_rows(tokens, bind[prefix + "ln1.g"], bind[prefix + "ln1.b"], kLayerNormEps);
    ad::Value q = tape.add_rowvec(tape.matmul(h, bind[prefix + "attn.wq"]), bind[prefix + "attn.bq"]);
    ad::Value k = tape.add_rowvec(tape.matmul(h, bind[prefix + "attn.wk"]), bind[prefix + "attn.bk"]);
    ad::Value v = tape.add_rowvec(tape.matmul(h, bind[prefix + "attn.wv"]), bind[prefix + "attn.bv"]);

    ad::Value qs = tape.split_heads(q, tokens_per_sample, config.heads, config.head_dim);
    ad::Value ks = tape.split_heads(k, tokens_per_sample, config.heads, config.head_dim);
    ad::Value vs = tape.split_heads(v, tokens_per_sample, config.heads, config.head_dim);

    ad::Value scores = tape.scale(tape.bmm_nt(qs, ks, groups), 1.0 / std::sqrt(config.head_dim));
    ad::Value probs = tape.softmax_rows(scores);
    if (attn_probs_out != nullptr) *attn_probs_out = probs;

    ad::Value ctx = tape.bmm(probs, vs, groups);
    ad::Value merged = tape.merge_heads(ctx, tokens_per_sample, config.heads, config.head_dim);
    ad::Value attn_out = tape.add_rowvec(tape.matmul(merged, bind[prefix + "attn.wo"]), bind[prefix + "attn.bo"]);
    ad::Value x1 = tape.add(tokens, attn_out);

    ad::Value h2 = tape.layer_norm_rows(x1, bind[prefix + "ln2.g"], bind[prefix + "ln2.b"], kLayerNormEps);
    ad::Value f1 = tape.silu(tape.add_rowvec(tape.matmul(h2, bind[prefix + "ff.w1"]), bind[prefix + "ff.b1"]));
    ad::Value f2 = tape.add_rowvec(tape.matmul(f1, bind[prefix + "ff.w2"]), bind[prefix + "ff.b2"]);
    return tape.add(x1, f2);
}

ad::Value timestep_embed(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                         const std::vector<int>& timesteps) {
    for (int t : timesteps) {
        if (t < 0 || t >= config.max_timesteps) {
            throw ContractError("timestep_embed: index " + std::to_string(t) +
                                " outside [0, " + std::to_string(config.max_timesteps) + ")");
        }
    }
    ad::Value rows = tape.embed_rows(bind["time.table"], timesteps);
    return tape.add_rowvec(tape.matmul(rows, bind["time.proj.w"]), bind["time.proj.b"]);
}

ad::Value forward_regression(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                             ad::Value inputs) {
    config.validate();
    if (is_diffusion(config.variant)) {
        throw ContractError("forward_regression: config holds a diffusion variant");
    }
    const ad::Tensor& x = tape.value(inputs);
    if (x.cols() != config.dim) {
        throw ShapeError("forward_regression: input " + x.shape_str() + " does not match dim " +
                         std::to_string(config.dim));
    }
    if (config.variant == Variant::RegMlp) {
        return mlp_stack(tape, bind, config, inputs);
    }
    std::vector<ad::Value> tokens{inputs, tape.tile_rows(bind["out_token"], x.rows())};
    return transformer_stack(tape, bind, config, tokens);
}

ad::Value forward_diffusion(ad::Tape& tape, ParamBinding& bind, const MapperConfig& config,
                            const std::vector<int>& timesteps, ad::Value noisy, ad::Value cond,
                            const std::vector<std::uint8_t>* drop_mask, bool use_null_condition) {
    config.validate();
    if (!is_diffusion(config.variant)) {
        throw ContractError("forward_diffusion: config holds a regression variant");
    }
    const ad::Tensor& xt = tape.value(noisy);
    const ad::Tensor& cv = tape.value(cond);
    if (xt.cols() != config.dim || cv.cols() != config.dim || xt.rows() != cv.rows()) {
        throw ShapeError("forward_diffusion: noisy " + xt.shape_str() + " and condition " +
                         cv.shape_str() + " must both be batch x " + std::to_string(config.dim));
    }
    if (static_cast<int>(timesteps.size()) != xt.rows()) {
        throw ContractError("forward_diffusion: " + std::to_string(timesteps.size()) +
                            " timesteps for batch of " + std::to_string(xt.rows()));
    }
    const int batch = xt.rows();
    ad::Value time = timestep_embed(tape, bind, config, timesteps);
    ad::Value cond_used = resolve_condition(tape, bind, cond, batch, drop_mask, use_null_condition);

    if (config.variant == Variant::DiffMlp) {
        // the three tokens concatenated into one 3d-wide input
        ad::Value x = tape.concat_cols({time, noisy, cond_used});
        return mlp_stack(tape, bind, config, x);
    }
    std::vector<ad::Value> tokens{time, noisy, cond_used, tape.tile_rows(bind["out_token"], batch)};
    return transformer_stack(tape, bind, config, tokens);
}

ad::Tensor predict_regression(const MapperParams& params, const MapperConfig& config,
                              const ad::Tensor& inputs) {
    ad::Tape tape;
    ParamBinding bind(tape, params);
    ad::Value out = forward_regression(tape, bind, config, tape.constant(inputs));
    return tape.value(out);
}

ad::Tensor predict_diffusion(const MapperParams& params, const MapperConfig& config,
                             const std::vector<int>& timesteps, const ad::Tensor& noisy,
                             const ad::Tensor& cond, bool use_null_condition) {
    ad::Tape tape;
    ParamBinding bind(tape, params);
    ad::Value out = forward_diffusion(tape, bind, config, timesteps, tape.constant(noisy),
                                      tape.constant(cond), nullptr, use_null_condition);
    return tape.value(out);
}

ad::Tensor timestep_embedding(const MapperParams& params, const MapperConfig& config, int t) {
    ad::Tape tape;
    ParamBinding bind(tape, params);
    ad::Value out = timestep_embed(tape, bind, config, {t});
    return tape.value(out);
}

} // namespace xmap::model
