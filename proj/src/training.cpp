#include "xmap/training.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "xmap/rng.hpp"

namespace xmap::train {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

struct Cursor {
    const std::string& bytes;
    const std::string path;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) {
        if (pos + n > bytes.size()) {
            throw FormatError("format error: " + path + " truncated while reading " + what);
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)]);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)]);
        pos += 8;
        return v;
    }
    float f32(const char* what) {
        std::uint32_t v = u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

nlohmann::json mapper_to_json(const model::MapperConfig& c) {
    return {
        {"variant", model::to_string(c.variant)},
        {"dim", c.dim},
        {"depth", c.depth},
        {"expansion", c.expansion},
        {"heads", c.heads},
        {"head_dim", c.head_dim},
        {"ff_expansion", c.ff_expansion},
        {"max_timesteps", c.max_timesteps},
    };
}

model::MapperConfig mapper_from_json(const nlohmann::json& j) {
    model::MapperConfig c;
    c.variant = model::variant_from_string(j.at("variant").get<std::string>());
    c.dim = j.at("dim").get<int>();
    c.depth = j.at("depth").get<int>();
    c.expansion = j.at("expansion").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.ff_expansion = j.at("ff_expansion").get<int>();
    c.max_timesteps = j.at("max_timesteps").get<int>();
    return c;
}

nlohmann::json train_to_json(const TrainConfig& c) {
    return {
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"epochs", c.epochs},
        {"weight_decay", c.weight_decay},
        {"drop_rate", c.drop_rate},
        {"seed", c.seed},
        {"aggregator", io::to_string(c.aggregator)},
        {"redraw_random_frames", c.redraw_random_frames},
        {"schedule_steps", c.schedule_steps},
        {"schedule_offset", c.schedule_offset},
        {"normalized_inputs", c.normalized_inputs},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"adam_eps", c.adam_eps},
    };
}

TrainConfig train_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.drop_rate = j.at("drop_rate").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.aggregator = io::aggregator_from_string(j.at("aggregator").get<std::string>());
    c.redraw_random_frames = j.at("redraw_random_frames").get<bool>();
    c.schedule_steps = j.at("schedule_steps").get<int>();
    c.schedule_offset = j.at("schedule_offset").get<double>();
    c.normalized_inputs = j.at("normalized_inputs").get<bool>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    return c;
}

// Aggregated training matrices: one condition row and one target row per sample.
void prepare_epoch_data(const io::PairedDataset& dataset, const TrainConfig& config,
                        std::uint64_t epoch, ad::Tensor& inputs, ad::Tensor& targets) {
    const int n = static_cast<int>(dataset.samples.size());
    const int d = dataset.dim;
    inputs = ad::Tensor(n, d);
    targets = ad::Tensor(n, d);
    io::Aggregator agg{config.aggregator, config.seed,
                      config.redraw_random_frames ? epoch : 0};
    for (int i = 0; i < n; ++i) {
        const io::PairedSample& s = dataset.samples[static_cast<std::size_t>(i)];
        std::vector<double> v = io::aggregate(s, agg);
        std::copy(v.begin(), v.end(), inputs.row_ptr(i));
        std::copy(s.audio.begin(), s.audio.end(), targets.row_ptr(i));
    }
}

std::vector<int> shuffled_indices(int n, rng::Stream& stream) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
        int j = static_cast<int>(stream.uniform_int(0, i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

ad::Tensor gather_rows(const ad::Tensor& src, const std::vector<int>& idx, int from, int count) {
    ad::Tensor out(count, src.cols());
    for (int i = 0; i < count; ++i) {
        std::memcpy(out.row_ptr(i), src.row_ptr(idx[static_cast<std::size_t>(from + i)]),
                    sizeof(double) * static_cast<std::size_t>(src.cols()));
    }
    return out;
}

} // namespace

void adamw_update(ad::Tensor& param, const ad::Tensor& grad, ad::Tensor& m, ad::Tensor& v,
                  long step, const AdamWConfig& cfg) {
    if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v)) {
        throw ShapeError("adamw: state shapes do not match parameter " + param.shape_str());
    }
    if (step < 1) throw ContractError("adamw: step must be >= 1");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const double decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (std::size_t i = 0; i < param.size(); ++i) {
        double p = param[i] * decay;
        double g = grad[i];
        double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        m[i] = mi;
        v[i] = vi;
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        param[i] = p - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

double regression_loss(const ad::Tensor& pred, const ad::Tensor& target) {
    if (!pred.same_shape(target)) {
        throw ContractError("regression_loss: prediction " + pred.shape_str() +
                            " vs target " + target.shape_str());
    }
    if (pred.rows() < 1) throw ContractError("regression_loss: empty batch");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred[i] - target[i];
        sum += d * d;
    }
    return sum / pred.rows();
}

ad::Value regression_loss_graph(ad::Tape& tape, ad::Value pred, const ad::Tensor& target) {
    const ad::Tensor& p = tape.value(pred);
    if (!p.same_shape(target)) {
        throw ContractError("regression_loss: prediction " + p.shape_str() + " vs target " +
                            target.shape_str());
    }
    if (target.rows() < 1) throw ContractError("regression_loss: empty batch");
    ad::Value diff = tape.sub(pred, tape.constant(target));
    return tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / target.rows());
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ContractError("train config: batch size must be >= 1");
    if (learning_rate < 0.0) throw ContractError("train config: learning rate must be >= 0");
    if (epochs < 0) throw ContractError("train config: epochs must be >= 0");
    if (drop_rate < 0.0 || drop_rate >= 1.0) {
        throw ContractError("train config: drop rate must lie in [0, 1)");
    }
    if (schedule_steps < 1) throw ContractError("train config: schedule steps must be >= 1");
    if (schedule_offset <= 0.0) throw ContractError("train config: schedule offset must be positive");
}

Checkpoint init_checkpoint(const model::MapperConfig& mapper, const TrainConfig& config) {
    mapper.validate();
    config.validate();
    Checkpoint ckpt;
    ckpt.mapper = mapper;
    ckpt.config = config;
    ckpt.params = model::init_params(mapper, config.seed);
    for (const auto& nt : ckpt.params.named) {
        ckpt.opt.m.push_back(ad::Tensor::zeros(nt.tensor.rows(), nt.tensor.cols()));
        ckpt.opt.v.push_back(ad::Tensor::zeros(nt.tensor.rows(), nt.tensor.cols()));
    }
    return ckpt;
}

Checkpoint resume(Checkpoint ckpt, const io::PairedDataset& dataset, int target_epochs) {
    ckpt.mapper.validate();
    ckpt.config.validate();
    if (dataset.samples.empty()) throw ContractError("train: empty dataset");
    if (dataset.dim != ckpt.mapper.dim) {
        throw ContractError("train: dataset dim " + std::to_string(dataset.dim) +
                            " does not match model dim " + std::to_string(ckpt.mapper.dim));
    }
    if (target_epochs < ckpt.epochs_completed) {
        throw ContractError("train: checkpoint already has " + std::to_string(ckpt.epochs_completed) +
                            " epochs, cannot rewind to " + std::to_string(target_epochs));
    }
    ckpt.config.epochs = std::max(ckpt.config.epochs, target_epochs);

    const bool diff = model::is_diffusion(ckpt.mapper.variant);
    const int n = static_cast<int>(dataset.samples.size());
    diffusion::NoiseSchedule schedule;
    if (diff) {
        schedule = diffusion::cosine_schedule(ckpt.config.schedule_steps, ckpt.config.schedule_offset);
        if (ckpt.mapper.max_timesteps != ckpt.config.schedule_steps) {
            throw ContractError("train: mapper timestep table (" +
                                std::to_string(ckpt.mapper.max_timesteps) +
                                ") does not match schedule steps (" +
                                std::to_string(ckpt.config.schedule_steps) + ")");
        }
    }

    AdamWConfig adam;
    adam.learning_rate = ckpt.config.learning_rate;
    adam.beta1 = ckpt.config.beta1;
    adam.beta2 = ckpt.config.beta2;
    adam.eps = ckpt.config.adam_eps;
    adam.weight_decay = ckpt.config.weight_decay;

    ad::Tensor inputs, targets;
    bool fixed_data_ready = false;

    for (int epoch = ckpt.epochs_completed; epoch < target_epochs; ++epoch) {
        const auto eu = static_cast<std::uint64_t>(epoch);
        if (!fixed_data_ready || (ckpt.config.redraw_random_frames &&
                                  ckpt.config.aggregator == io::AggregatorKind::Random)) {
            prepare_epoch_data(dataset, ckpt.config, eu, inputs, targets);
            fixed_data_ready = true;
        }

        rng::Stream shuffle_stream(rng::derive(ckpt.config.seed, "shuffle", eu));
        std::vector<int> order = shuffled_indices(n, shuffle_stream);
        rng::Stream noise_stream(rng::derive(ckpt.config.seed, "diffusion", eu));

        double epoch_loss = 0.0;
        for (int start = 0; start < n; start += ckpt.config.batch_size) {
            const int bs = std::min(ckpt.config.batch_size, n - start);
            ad::Tensor bx = gather_rows(inputs, order, start, bs);
            ad::Tensor by = gather_rows(targets, order, start, bs);

            ad::Tape tape;
            model::ParamBinding bind(tape, ckpt.params);
            ad::Value loss;
            if (diff) {
                diffusion::BatchDraws draws =
                    diffusion::draw_batch(bs, dataset.dim, schedule, ckpt.config.drop_rate, noise_stream);
                loss = diffusion::diffusion_loss_graph(tape, bind, ckpt.mapper, draws, by, bx, schedule);
            } else {
                ad::Value pred = model::forward_regression(tape, bind, ckpt.mapper, tape.constant(bx));
                loss = regression_loss_graph(tape, pred, by);
            }
            tape.backward(loss);
            epoch_loss += tape.value(loss).item() * bs;

            std::vector<ad::Tensor> grads = bind.grads();
            ++ckpt.opt.step;
            for (std::size_t i = 0; i < ckpt.params.named.size(); ++i) {
                adamw_update(ckpt.params.named[i].tensor, grads[i], ckpt.opt.m[i], ckpt.opt.v[i],
                             ckpt.opt.step, adam);
                ad::quantize_f32(ckpt.params.named[i].tensor);
                ad::quantize_f32(ckpt.opt.m[i]);
                ad::quantize_f32(ckpt.opt.v[i]);
            }
        }
        ckpt.loss_history.push_back(epoch_loss / n);
        ckpt.epochs_completed = epoch + 1;
    }
    return ckpt;
}

Checkpoint train(const model::MapperConfig& mapper, const io::PairedDataset& dataset,
                 const TrainConfig& config) {
    return resume(init_checkpoint(mapper, config), dataset, config.epochs);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    nlohmann::json config = {
        {"format_version", ckpt.format_version},
        {"mapper", mapper_to_json(ckpt.mapper)},
        {"train", train_to_json(ckpt.config)},
        {"epochs_completed", ckpt.epochs_completed},
        {"opt_step", ckpt.opt.step},
        {"loss_history", ckpt.loss_history},
    };
    std::string blob = config.dump();

    std::string bytes;
    bytes.append("V2AM", 4);
    put_u32(bytes, 1);
    put_u64(bytes, blob.size());
    bytes += blob;

    auto emit = [&bytes](const std::string& name, const ad::Tensor& t) {
        put_u32(bytes, static_cast<std::uint32_t>(name.size()));
        bytes += name;
        put_u32(bytes, 2);
        put_u32(bytes, static_cast<std::uint32_t>(t.rows()));
        put_u32(bytes, static_cast<std::uint32_t>(t.cols()));
        for (std::size_t i = 0; i < t.size(); ++i) put_f32(bytes, static_cast<float>(t[i]));
    };

    put_u32(bytes, static_cast<std::uint32_t>(3 * ckpt.params.named.size()));
    for (const auto& nt : ckpt.params.named) emit(nt.name, nt.tensor);
    for (std::size_t i = 0; i < ckpt.params.named.size(); ++i) {
        emit("opt.m." + ckpt.params.named[i].name, ckpt.opt.m[i]);
    }
    for (std::size_t i = 0; i < ckpt.params.named.size(); ++i) {
        emit("opt.v." + ckpt.params.named[i].name, ckpt.opt.v[i]);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("I/O error: cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("I/O error: short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("I/O error: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Cursor cur{bytes, path.string()};

    cur.need(4, "magic");
    if (bytes.compare(0, 4, "V2AM") != 0) {
        throw FormatError("format error: " + path.string() + " lacks checkpoint magic \"V2AM\"");
    }
    cur.pos = 4;
    std::uint32_t version = cur.u32("version");
    if (version != 1) {
        throw FormatError("migration error: " + path.string() + " has checkpoint version " +
                          std::to_string(version) + ", this build reads version 1");
    }

    std::uint64_t blob_len = cur.u64("config length");
    std::string blob = cur.str(blob_len, "config blob");
    nlohmann::json config;
    try {
        config = nlohmann::json::parse(blob);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("format error: " + path.string() + " config blob is not valid JSON: " + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.format_version = config.at("format_version").get<int>();
        ckpt.mapper = mapper_from_json(config.at("mapper"));
        ckpt.config = train_from_json(config.at("train"));
        ckpt.epochs_completed = config.at("epochs_completed").get<int>();
        ckpt.opt.step = config.at("opt_step").get<long>();
        ckpt.loss_history = config.at("loss_history").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("format error: " + path.string() + " config blob misses fields: " + e.what());
    }

    auto shapes = model::param_shapes(ckpt.mapper);
    std::uint32_t sections = cur.u32("section count");
    if (sections != 3 * shapes.size()) {
        throw FormatError("format error: " + path.string() + " holds " + std::to_string(sections) +
                          " tensor sections, expected " + std::to_string(3 * shapes.size()));
    }

    auto read_tensor = [&cur, &path](const std::string& want_name, int want_rows, int want_cols) {
        std::uint32_t name_len = cur.u32("tensor name length");
        std::string name = cur.str(name_len, "tensor name");
        std::uint32_t rank = cur.u32("tensor rank");
        if (name != want_name || rank != 2) {
            throw FormatError("format error: " + path.string() + " tensor section \"" + name +
                              "\" does not match expected \"" + want_name + "\"");
        }
        std::uint32_t rows = cur.u32("rows");
        std::uint32_t cols = cur.u32("cols");
        if (static_cast<int>(rows) != want_rows || static_cast<int>(cols) != want_cols) {
            throw FormatError("format error: " + path.string() + " tensor \"" + name + "\" is " +
                              std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                              std::to_string(want_rows) + "x" + std::to_string(want_cols));
        }
        ad::Tensor t(static_cast<int>(rows), static_cast<int>(cols));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = cur.f32("tensor payload");
        return t;
    };

    for (const auto& s : shapes) {
        ckpt.params.named.push_back({s.name, read_tensor(s.name, s.rows, s.cols)});
    }
    for (const auto& s : shapes) {
        ckpt.opt.m.push_back(read_tensor("opt.m." + s.name, s.rows, s.cols));
    }
    for (const auto& s : shapes) {
        ckpt.opt.v.push_back(read_tensor("opt.v." + s.name, s.rows, s.cols));
    }
    if (cur.pos != bytes.size()) {
        throw FormatError("format error: " + path.string() + " has trailing bytes");
    }
    return ckpt;
}

} // namespace xmap::train
