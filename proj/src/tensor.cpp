#include "xmap/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

namespace xmap::ad {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

// C (m x n) += A (m x k) * B (k x n)
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m x n) += A (m x k) * B^T with B (n x k)
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
            crow[j] += s;
        }
    }
}

// C (k x n) += A^T * B with A (m x k), B (m x n)
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        const double* brow = b + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            double av = arow[l];
            if (av == 0.0) continue;
            double* crow = c + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0 || (rows == 0) != (cols == 0)) {
        throw ShapeError("tensor: invalid shape " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Tensor::Tensor(int rows, int cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(rows) * cols) {
        throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str());
    }
}

Tensor Tensor::zeros(int rows, int cols) { return Tensor(rows, cols); }

Tensor Tensor::full(int rows, int cols, double value) {
    Tensor t(rows, cols);
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::row(std::vector<double> values) {
    int n = static_cast<int>(values.size());
    return Tensor(1, n, std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor(1, 1, {value}); }

Tensor Tensor::identity(int n) {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::string Tensor::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::item() const {
    if (!is_scalar()) throw ContractError("item: tensor is " + shape_str() + ", expected 1x1");
    return data_[0];
}

// ------------------------------------------------------------------ Tape

Tape::Node& Tape::node(Value v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
        throw ContractError("tape: value handle does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Value v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
        throw ContractError("tape: value handle does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Value Tape::make(Op op, std::vector<int> in, Tensor val, double attr, std::vector<int> iattr) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    n.val = std::move(val);
    n.attr = attr;
    n.iattr = std::move(iattr);
    n.rg = false;
    for (int i : n.in) {
        if (nodes_[static_cast<std::size_t>(i)].rg) n.rg = true;
    }
    return Value{push(std::move(n))};
}

Value Tape::leaf(const Tensor& t) {
    Node n;
    n.op = Op::Leaf;
    n.val = t;
    n.rg = t.requires_grad;
    return Value{push(std::move(n))};
}

Value Tape::leaf(Tensor&& t) {
    Node n;
    n.op = Op::Leaf;
    n.rg = t.requires_grad;
    n.val = std::move(t);
    return Value{push(std::move(n))};
}

Value Tape::constant(const Tensor& t) {
    Node n;
    n.op = Op::Leaf;
    n.val = t;
    n.val.requires_grad = false;
    n.rg = false;
    return Value{push(std::move(n))};
}

const Tensor& Tape::value(Value v) const { return node(v).val; }

const Tensor& Tape::grad(Value v) {
    Node& n = node(v);
    ensure_grad(n);
    return n.grad;
}

void Tape::ensure_grad(Node& n) {
    if (n.grad.size() == 0 && n.val.size() != 0) {
        n.grad = Tensor::zeros(n.val.rows(), n.val.cols());
    }
}

void Tape::zero_grad() {
    for (Node& n : nodes_) {
        if (n.grad.size() != 0) {
            std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
        }
    }
}

// ------------------------------------------------------------- operations

Value Tape::add(Value a, Value b) {
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (!ta.same_shape(tb)) {
        throw ShapeError("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
    return make(Op::Add, {a.id, b.id}, std::move(out));
}

Value Tape::sub(Value a, Value b) {
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (!ta.same_shape(tb)) {
        throw ShapeError("sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
    return make(Op::Sub, {a.id, b.id}, std::move(out));
}

Value Tape::mul(Value a, Value b) {
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (!ta.same_shape(tb)) {
        throw ShapeError("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
    return make(Op::Mul, {a.id, b.id}, std::move(out));
}

Value Tape::scale(Value a, double c) {
    Tensor out = node(a).val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return make(Op::Scale, {a.id}, std::move(out), c);
}

Value Tape::matmul(Value a, Value b) {
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (ta.cols() != tb.rows()) {
        throw ShapeError("matmul: inner extents differ, " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out(ta.rows(), tb.cols());
    matmul_acc(ta.data().data(), tb.data().data(), out.data().data(), ta.rows(), ta.cols(), tb.cols());
    return make(Op::Matmul, {a.id, b.id}, std::move(out));
}

Value Tape::transpose(Value a) {
    const Tensor& ta = node(a).val;
    Tensor out(ta.cols(), ta.rows());
    for (int i = 0; i < ta.rows(); ++i) {
        for (int j = 0; j < ta.cols(); ++j) out.at(j, i) = ta.at(i, j);
    }
    return make(Op::Transpose, {a.id}, std::move(out));
}

Value Tape::add_rowvec(Value m, Value v) {
    const Tensor& tm = node(m).val;
    const Tensor& tv = node(v).val;
    if (tv.rows() != 1 || tv.cols() != tm.cols()) {
        throw ShapeError("add_rowvec: bias " + tv.shape_str() + " does not broadcast over " + tm.shape_str());
    }
    Tensor out = tm;
    for (int i = 0; i < out.rows(); ++i) {
        double* r = out.row_ptr(i);
        for (int j = 0; j < out.cols(); ++j) r[j] += tv[static_cast<std::size_t>(j)];
    }
    return make(Op::AddRowVec, {m.id, v.id}, std::move(out));
}

Value Tape::silu(Value a) {
    Tensor out = node(a).val;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = out[i] * stable_sigmoid(out[i]);
    }
    return make(Op::Silu, {a.id}, std::move(out));
}

Value Tape::softmax_rows(Value a) {
    const Tensor& ta = node(a).val;
    Tensor out = ta;
    for (int i = 0; i < out.rows(); ++i) {
        double* r = out.row_ptr(i);
        double mx = r[0];
        for (int j = 1; j < out.cols(); ++j) mx = std::max(mx, r[j]);
        double sum = 0.0;
        for (int j = 0; j < out.cols(); ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (int j = 0; j < out.cols(); ++j) r[j] /= sum;
    }
    return make(Op::SoftmaxRows, {a.id}, std::move(out));
}

Value Tape::layer_norm_rows(Value x, Value gamma, Value beta, double eps) {
    const Tensor& tx = node(x).val;
    const Tensor& tg = node(gamma).val;
    const Tensor& tb = node(beta).val;
    if (tg.rows() != 1 || tg.cols() != tx.cols() || tb.rows() != 1 || tb.cols() != tx.cols()) {
        throw ShapeError("layer_norm: gamma/beta " + tg.shape_str() + "/" + tb.shape_str() +
                         " do not match input " + tx.shape_str());
    }
    int n = tx.cols();
    Tensor out(tx.rows(), n);
    for (int i = 0; i < tx.rows(); ++i) {
        const double* r = tx.row_ptr(i);
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += r[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double d = r[j] - mean;
            var += d * d;
        }
        var /= n; // population variance
        double inv = 1.0 / std::sqrt(var + eps);
        double* o = out.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            o[j] = (r[j] - mean) * inv * tg[static_cast<std::size_t>(j)] + tb[static_cast<std::size_t>(j)];
        }
    }
    return make(Op::LayerNormRows, {x.id, gamma.id, beta.id}, std::move(out), eps);
}

Value Tape::bmm(Value a, Value b, int blocks) {
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (blocks < 1 || ta.rows() % blocks != 0 || tb.rows() % blocks != 0) {
        throw ShapeError("bmm: rows of " + ta.shape_str() + "/" + tb.shape_str() +
                         " not divisible into " + std::to_string(blocks) + " blocks");
    }
    int p = ta.rows() / blocks;
    int q = ta.cols();
    int r = tb.cols();
    if (tb.rows() / blocks != q) {
        throw ShapeError("bmm: inner extents differ per block, " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out(ta.rows(), r);
    for (int g = 0; g < blocks; ++g) {
        matmul_acc(ta.row_ptr(g * p), tb.row_ptr(g * q), out.row_ptr(g * p), p, q, r);
    }
    return make(Op::Bmm, {a.id, b.id}, std::move(out), 0.0, {blocks});
}

Value Tape::bmm_nt(Value a, Value b, int blocks) {
    const Tensor& ta = node(a).val;
    const Tensor& tb = node(b).val;
    if (blocks < 1 || ta.rows() % blocks != 0 || tb.rows() % blocks != 0) {
        throw ShapeError("bmm_nt: rows of " + ta.shape_str() + "/" + tb.shape_str() +
                         " not divisible into " + std::to_string(blocks) + " blocks");
    }
    if (ta.cols() != tb.cols()) {
        throw ShapeError("bmm_nt: inner extents differ, " + ta.shape_str() + " vs " + tb.shape_str());
    }
    int p = ta.rows() / blocks;
    int r = tb.rows() / blocks;
    int q = ta.cols();
    Tensor out(ta.rows(), r);
    for (int g = 0; g < blocks; ++g) {
        matmul_nt_acc(ta.row_ptr(g * p), tb.row_ptr(g * r), out.row_ptr(g * p), p, q, r);
    }
    return make(Op::BmmNT, {a.id, b.id}, std::move(out), 0.0, {blocks});
}

Value Tape::concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    int rows = node(parts[0]).val.rows();
    int total = 0;
    std::vector<int> in;
    for (Value p : parts) {
        const Tensor& t = node(p).val;
        if (t.rows() != rows) {
            throw ShapeError("concat_cols: row mismatch " + t.shape_str());
        }
        total += t.cols();
        in.push_back(p.id);
    }
    Tensor out(rows, total);
    int off = 0;
    for (Value p : parts) {
        const Tensor& t = node(p).val;
        for (int i = 0; i < rows; ++i) {
            std::memcpy(out.row_ptr(i) + off, t.row_ptr(i), sizeof(double) * static_cast<std::size_t>(t.cols()));
        }
        off += t.cols();
    }
    return make(Op::ConcatCols, std::move(in), std::move(out));
}

Value Tape::slice_cols(Value a, int offset, int count) {
    const Tensor& ta = node(a).val;
    if (offset < 0 || count < 1 || offset + count > ta.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(offset) + ", " +
                         std::to_string(offset + count) + ") out of " + ta.shape_str());
    }
    Tensor out(ta.rows(), count);
    for (int i = 0; i < ta.rows(); ++i) {
        std::memcpy(out.row_ptr(i), ta.row_ptr(i) + offset, sizeof(double) * static_cast<std::size_t>(count));
    }
    return make(Op::SliceCols, {a.id}, std::move(out), 0.0, {offset, count});
}

Value Tape::interleave_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("interleave_rows: no inputs");
    int rows = node(parts[0]).val.rows();
    int cols = node(parts[0]).val.cols();
    std::vector<int> in;
    for (Value p : parts) {
        const Tensor& t = node(p).val;
        if (t.rows() != rows || t.cols() != cols) {
            throw ShapeError("interleave_rows: all inputs must share shape, got " + t.shape_str() +
                             " vs " + node(parts[0]).val.shape_str());
        }
        in.push_back(p.id);
    }
    int k = static_cast<int>(parts.size());
    Tensor out(rows * k, cols);
    for (int j = 0; j < k; ++j) {
        const Tensor& t = node(parts[static_cast<std::size_t>(j)]).val;
        for (int i = 0; i < rows; ++i) {
            std::memcpy(out.row_ptr(i * k + j), t.row_ptr(i), sizeof(double) * static_cast<std::size_t>(cols));
        }
    }
    return make(Op::InterleaveRows, std::move(in), std::move(out));
}

Value Tape::rows_strided(Value a, int stride, int offset) {
    const Tensor& ta = node(a).val;
    if (stride < 1 || offset < 0 || offset >= stride || ta.rows() % stride != 0) {
        throw ShapeError("rows_strided: stride " + std::to_string(stride) + " offset " +
                         std::to_string(offset) + " invalid for " + ta.shape_str());
    }
    int rows = ta.rows() / stride;
    Tensor out(rows, ta.cols());
    for (int i = 0; i < rows; ++i) {
        std::memcpy(out.row_ptr(i), ta.row_ptr(i * stride + offset),
                    sizeof(double) * static_cast<std::size_t>(ta.cols()));
    }
    return make(Op::RowsStrided, {a.id}, std::move(out), 0.0, {stride, offset});
}

Value Tape::tile_rows(Value a, int times) {
    const Tensor& ta = node(a).val;
    if (times < 1) throw ShapeError("tile_rows: times must be >= 1");
    Tensor out(ta.rows() * times, ta.cols());
    for (int t = 0; t < times; ++t) {
        std::memcpy(out.row_ptr(t * ta.rows()), ta.data().data(), sizeof(double) * ta.size());
    }
    return make(Op::TileRows, {a.id}, std::move(out), 0.0, {times});
}

Value Tape::embed_rows(Value table, std::vector<int> indices) {
    const Tensor& tt = node(table).val;
    Tensor out(static_cast<int>(indices.size()), tt.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        int r = indices[i];
        if (r < 0 || r >= tt.rows()) {
            throw ContractError("embed_rows: index " + std::to_string(r) + " out of range [0, " +
                                std::to_string(tt.rows()) + ")");
        }
        std::memcpy(out.row_ptr(static_cast<int>(i)), tt.row_ptr(r),
                    sizeof(double) * static_cast<std::size_t>(tt.cols()));
    }
    return make(Op::EmbedRows, {table.id}, std::move(out), 0.0, std::move(indices));
}

Value Tape::split_heads(Value a, int tokens, int heads, int head_dim) {
    const Tensor& ta = node(a).val;
    if (tokens < 1 || ta.rows() % tokens != 0 || ta.cols() != heads * head_dim) {
        throw ShapeError("split_heads: input " + ta.shape_str() + " incompatible with tokens=" +
                         std::to_string(tokens) + " heads=" + std::to_string(heads) +
                         " head_dim=" + std::to_string(head_dim));
    }
    int batch = ta.rows() / tokens;
    Tensor out(batch * heads * tokens, head_dim);
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < tokens; ++i) {
                std::memcpy(out.row_ptr((b * heads + h) * tokens + i),
                            ta.row_ptr(b * tokens + i) + h * head_dim,
                            sizeof(double) * static_cast<std::size_t>(head_dim));
            }
        }
    }
    return make(Op::SplitHeads, {a.id}, std::move(out), 0.0, {tokens, heads, head_dim});
}

Value Tape::merge_heads(Value a, int tokens, int heads, int head_dim) {
    const Tensor& ta = node(a).val;
    if (ta.cols() != head_dim || ta.rows() % (heads * tokens) != 0) {
        throw ShapeError("merge_heads: input " + ta.shape_str() + " incompatible with tokens=" +
                         std::to_string(tokens) + " heads=" + std::to_string(heads) +
                         " head_dim=" + std::to_string(head_dim));
    }
    int batch = ta.rows() / (heads * tokens);
    Tensor out(batch * tokens, heads * head_dim);
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < tokens; ++i) {
                std::memcpy(out.row_ptr(b * tokens + i) + h * head_dim,
                            ta.row_ptr((b * heads + h) * tokens + i),
                            sizeof(double) * static_cast<std::size_t>(head_dim));
            }
        }
    }
    return make(Op::MergeHeads, {a.id}, std::move(out), 0.0, {tokens, heads, head_dim});
}

Value Tape::sum(Value a) {
    const Tensor& ta = node(a).val;
    double s = std::accumulate(ta.data().begin(), ta.data().end(), 0.0);
    return make(Op::Sum, {a.id}, Tensor::scalar(s));
}

// --------------------------------------------------------------- backward

void Tape::backward(Value loss) {
    Node& ln = node(loss);
    if (!ln.val.is_scalar()) {
        throw ContractError("backward: loss must be scalar, got " + ln.val.shape_str());
    }
    // Leaf gradients accumulate across backward calls; interior buffers carry
    // only the current pass and are cleared here.
    for (Node& n : nodes_) {
        if (n.op != Op::Leaf && n.grad.size() != 0) {
            std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
        }
    }
    ensure_grad(ln);
    ln.grad[0] += 1.0;
    for (int id = loss.id; id >= 0; --id) {
        backprop(id);
    }
}

void Tape::backprop(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.rg || n.op == Op::Leaf) return;
    if (n.grad.size() == 0) return; // nothing flowed into this node
    const Tensor& g = n.grad;

    auto in_node = [&](int k) -> Node& { return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(k)])]; };
    auto want = [&](int k) -> bool { return in_node(k).rg; };
    auto gbuf = [&](int k) -> Tensor& {
        Node& m = in_node(k);
        ensure_grad(m);
        return m.grad;
    };

    switch (n.op) {
    case Op::Leaf:
        break;
    case Op::Add: {
        for (int k = 0; k < 2; ++k) {
            if (!want(k)) continue;
            Tensor& d = gbuf(k);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
        break;
    }
    case Op::Sub: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
        if (want(1)) {
            Tensor& d = gbuf(1);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
        }
        break;
    }
    case Op::Mul: {
        const Tensor& a = in_node(0).val;
        const Tensor& b = in_node(1).val;
        if (want(0)) {
            Tensor& d = gbuf(0);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * b[i];
        }
        if (want(1)) {
            Tensor& d = gbuf(1);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * a[i];
        }
        break;
    }
    case Op::Scale: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * n.attr;
        }
        break;
    }
    case Op::Matmul: {
        const Tensor& a = in_node(0).val;
        const Tensor& b = in_node(1).val;
        if (want(0)) {
            // dA += g * B^T
            matmul_nt_acc(g.data().data(), b.data().data(), gbuf(0).data().data(),
                          a.rows(), b.cols(), a.cols());
        }
        if (want(1)) {
            // dB += A^T * g
            matmul_tn_acc(a.data().data(), g.data().data(), gbuf(1).data().data(),
                          a.rows(), a.cols(), b.cols());
        }
        break;
    }
    case Op::Transpose: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            for (int i = 0; i < g.rows(); ++i) {
                for (int j = 0; j < g.cols(); ++j) d.at(j, i) += g.at(i, j);
            }
        }
        break;
    }
    case Op::AddRowVec: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
        if (want(1)) {
            Tensor& d = gbuf(1);
            for (int i = 0; i < g.rows(); ++i) {
                const double* r = g.row_ptr(i);
                for (int j = 0; j < g.cols(); ++j) d[static_cast<std::size_t>(j)] += r[j];
            }
        }
        break;
    }
    case Op::Silu: {
        if (want(0)) {
            const Tensor& x = in_node(0).val;
            Tensor& d = gbuf(0);
            for (std::size_t i = 0; i < d.size(); ++i) {
                double s = stable_sigmoid(x[i]);
                d[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
            }
        }
        break;
    }
    case Op::SoftmaxRows: {
        if (want(0)) {
            const Tensor& p = n.val;
            Tensor& d = gbuf(0);
            for (int i = 0; i < p.rows(); ++i) {
                const double* pr = p.row_ptr(i);
                const double* gr = g.row_ptr(i);
                double dot = 0.0;
                for (int j = 0; j < p.cols(); ++j) dot += pr[j] * gr[j];
                double* dr = d.row_ptr(i);
                for (int j = 0; j < p.cols(); ++j) dr[j] += pr[j] * (gr[j] - dot);
            }
        }
        break;
    }
    case Op::LayerNormRows: {
        const Tensor& x = in_node(0).val;
        const Tensor& gamma = in_node(1).val;
        int cols = x.cols();
        for (int i = 0; i < x.rows(); ++i) {
            const double* r = x.row_ptr(i);
            double mean = 0.0;
            for (int j = 0; j < cols; ++j) mean += r[j];
            mean /= cols;
            double var = 0.0;
            for (int j = 0; j < cols; ++j) {
                double dv = r[j] - mean;
                var += dv * dv;
            }
            var /= cols;
            double inv = 1.0 / std::sqrt(var + n.attr);
            const double* gr = g.row_ptr(i);
            if (want(1)) {
                Tensor& dg = gbuf(1);
                for (int j = 0; j < cols; ++j) dg[static_cast<std::size_t>(j)] += gr[j] * (r[j] - mean) * inv;
            }
            if (want(2)) {
                Tensor& db = gbuf(2);
                for (int j = 0; j < cols; ++j) db[static_cast<std::size_t>(j)] += gr[j];
            }
            if (want(0)) {
                Tensor& dx = gbuf(0);
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < cols; ++j) {
                    double dxh = gr[j] * gamma[static_cast<std::size_t>(j)];
                    double xh = (r[j] - mean) * inv;
                    m1 += dxh;
                    m2 += dxh * xh;
                }
                m1 /= cols;
                m2 /= cols;
                double* dr = dx.row_ptr(i);
                for (int j = 0; j < cols; ++j) {
                    double dxh = gr[j] * gamma[static_cast<std::size_t>(j)];
                    double xh = (r[j] - mean) * inv;
                    dr[j] += inv * (dxh - m1 - xh * m2);
                }
            }
        }
        break;
    }
    case Op::Bmm: {
        const Tensor& a = in_node(0).val;
        const Tensor& b = in_node(1).val;
        int blocks = n.iattr[0];
        int p = a.rows() / blocks;
        int q = a.cols();
        int r = b.cols();
        if (want(0)) {
            Tensor& d = gbuf(0);
            for (int gi = 0; gi < blocks; ++gi) {
                matmul_nt_acc(g.row_ptr(gi * p), b.row_ptr(gi * q), d.row_ptr(gi * p), p, r, q);
            }
        }
        if (want(1)) {
            Tensor& d = gbuf(1);
            for (int gi = 0; gi < blocks; ++gi) {
                matmul_tn_acc(a.row_ptr(gi * p), g.row_ptr(gi * p), d.row_ptr(gi * q), p, q, r);
            }
        }
        break;
    }
    case Op::BmmNT: {
        const Tensor& a = in_node(0).val;
        const Tensor& b = in_node(1).val;
        int blocks = n.iattr[0];
        int p = a.rows() / blocks;
        int r = b.rows() / blocks;
        int q = a.cols();
        if (want(0)) {
            // dA_g += dC_g * B_g
            Tensor& d = gbuf(0);
            for (int gi = 0; gi < blocks; ++gi) {
                matmul_acc(g.row_ptr(gi * p), b.row_ptr(gi * r), d.row_ptr(gi * p), p, r, q);
            }
        }
        if (want(1)) {
            // dB_g += dC_g^T * A_g
            Tensor& d = gbuf(1);
            for (int gi = 0; gi < blocks; ++gi) {
                matmul_tn_acc(g.row_ptr(gi * p), a.row_ptr(gi * p), d.row_ptr(gi * r), p, r, q);
            }
        }
        break;
    }
    case Op::ConcatCols: {
        int off = 0;
        for (std::size_t k = 0; k < n.in.size(); ++k) {
            Node& m = nodes_[static_cast<std::size_t>(n.in[k])];
            int c = m.val.cols();
            if (m.rg) {
                ensure_grad(m);
                for (int i = 0; i < g.rows(); ++i) {
                    const double* gr = g.row_ptr(i) + off;
                    double* dr = m.grad.row_ptr(i);
                    for (int j = 0; j < c; ++j) dr[j] += gr[j];
                }
            }
            off += c;
        }
        break;
    }
    case Op::SliceCols: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            int off = n.iattr[0];
            int cnt = n.iattr[1];
            for (int i = 0; i < g.rows(); ++i) {
                const double* gr = g.row_ptr(i);
                double* dr = d.row_ptr(i) + off;
                for (int j = 0; j < cnt; ++j) dr[j] += gr[j];
            }
        }
        break;
    }
    case Op::InterleaveRows: {
        int k = static_cast<int>(n.in.size());
        for (int j = 0; j < k; ++j) {
            Node& m = nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(j)])];
            if (!m.rg) continue;
            ensure_grad(m);
            for (int i = 0; i < m.val.rows(); ++i) {
                const double* gr = g.row_ptr(i * k + j);
                double* dr = m.grad.row_ptr(i);
                for (int c = 0; c < m.val.cols(); ++c) dr[c] += gr[c];
            }
        }
        break;
    }
    case Op::RowsStrided: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            int stride = n.iattr[0];
            int off = n.iattr[1];
            for (int i = 0; i < g.rows(); ++i) {
                const double* gr = g.row_ptr(i);
                double* dr = d.row_ptr(i * stride + off);
                for (int j = 0; j < g.cols(); ++j) dr[j] += gr[j];
            }
        }
        break;
    }
    case Op::TileRows: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            int times = n.iattr[0];
            int rows = d.rows();
            for (int t = 0; t < times; ++t) {
                for (int i = 0; i < rows; ++i) {
                    const double* gr = g.row_ptr(t * rows + i);
                    double* dr = d.row_ptr(i);
                    for (int j = 0; j < g.cols(); ++j) dr[j] += gr[j];
                }
            }
        }
        break;
    }
    case Op::EmbedRows: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            for (std::size_t i = 0; i < n.iattr.size(); ++i) {
                const double* gr = g.row_ptr(static_cast<int>(i));
                double* dr = d.row_ptr(n.iattr[i]);
                for (int j = 0; j < g.cols(); ++j) dr[j] += gr[j];
            }
        }
        break;
    }
    case Op::SplitHeads: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            int tokens = n.iattr[0], heads = n.iattr[1], hd = n.iattr[2];
            int batch = d.rows() / tokens;
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    for (int i = 0; i < tokens; ++i) {
                        const double* gr = g.row_ptr((b * heads + h) * tokens + i);
                        double* dr = d.row_ptr(b * tokens + i) + h * hd;
                        for (int j = 0; j < hd; ++j) dr[j] += gr[j];
                    }
                }
            }
        }
        break;
    }
    case Op::MergeHeads: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            int tokens = n.iattr[0], heads = n.iattr[1], hd = n.iattr[2];
            int batch = g.rows() / tokens;
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    for (int i = 0; i < tokens; ++i) {
                        const double* gr = g.row_ptr(b * tokens + i) + h * hd;
                        double* dr = d.row_ptr((b * heads + h) * tokens + i);
                        for (int j = 0; j < hd; ++j) dr[j] += gr[j];
                    }
                }
            }
        }
        break;
    }
    case Op::Sum: {
        if (want(0)) {
            Tensor& d = gbuf(0);
            double gv = g[0];
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv;
        }
        break;
    }
    }
}

// ------------------------------------------------------------- grad_check

GradCheckReport grad_check_detail(const ScalarFn& f, const Tensor& point,
                                  double eps, double abs_floor) {
    if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");

    GradCheckReport report;
    {
        Tape tape;
        Tensor p = point;
        p.requires_grad = true;
        Value x = tape.leaf(p);
        Value y = f(tape, x);
        if (!tape.value(y).is_scalar()) {
            throw ContractError("grad_check: f must be scalar-valued, got " +
                                tape.value(y).shape_str());
        }
        tape.backward(y);
        report.analytic = tape.grad(x).data();
    }

    auto eval = [&](const Tensor& at) {
        Tape tape;
        Tensor p = at;
        p.requires_grad = false;
        Value x = tape.leaf(p);
        return tape.value(f(tape, x)).item();
    };

    report.numeric.resize(point.size());
    Tensor work = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        double orig = work[i];
        double h = eps * std::max(1.0, std::abs(orig));
        work[i] = orig + h;
        double fp = eval(work);
        work[i] = orig - h;
        double fm = eval(work);
        work[i] = orig;
        report.numeric[i] = (fp - fm) / (2.0 * h);
    }

    for (std::size_t i = 0; i < point.size(); ++i) {
        double denom = std::max(abs_floor, std::abs(report.numeric[i]));
        double rel = std::abs(report.analytic[i] - report.numeric[i]) / denom;
        report.max_rel_err = std::max(report.max_rel_err, rel);
    }
    return report;
}

double grad_check(const ScalarFn& f, const Tensor& point, double eps) {
    return grad_check_detail(f, point, eps).max_rel_err;
}

Tensor& quantize_f32(Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = static_cast<double>(static_cast<float>(t[i]));
    }
    return t;
}

} // namespace xmap::ad
