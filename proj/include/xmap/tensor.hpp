#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmap/errors.hpp"

namespace xmap::ad {

// Dense row-major matrix of doubles. Vectors are 1 x n rows, scalars 1 x 1.
// All computation runs in double precision; persistence layers quantize to
// float32 at their boundary.
class Tensor {
public:
    Tensor() = default;
    Tensor(int rows, int cols);
    Tensor(int rows, int cols, std::vector<double> data);

    static Tensor zeros(int rows, int cols);
    static Tensor full(int rows, int cols, double value);
    static Tensor row(std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor identity(int n);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return rows_ == 1 && cols_ == 1; }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_str() const;

    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* row_ptr(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row_ptr(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const;
    double item() const; // scalar value; throws ContractError otherwise

    bool requires_grad = false;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// Handle to a node on a Tape.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Records a forward pass and computes reverse-mode gradients for it.
// backward() walks the recorded operations in exact reverse order;
// gradients accumulate across repeated backward calls until zero_grad().
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // leaves ------------------------------------------------------------
    Value leaf(const Tensor& t);            // requires_grad taken from t
    Value leaf(Tensor&& t);
    Value constant(const Tensor& t);        // never receives gradient

    // elementwise and linear algebra -------------------------------------
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);            // Hadamard
    Value scale(Value a, double c);
    Value matmul(Value a, Value b);
    Value transpose(Value a);
    Value add_rowvec(Value m, Value v);     // broadcast 1 x n bias over rows

    // nonlinearities ------------------------------------------------------
    Value silu(Value a);
    Value softmax_rows(Value a);
    Value layer_norm_rows(Value x, Value gamma, Value beta, double eps);

    // blocked matmul: a is (G*p) x q, b is (G*q) x r -> (G*p) x r
    Value bmm(Value a, Value b, int blocks);
    // a is (G*p) x q, b is (G*r) x q -> (G*p) x r, multiplying by b^T per block
    Value bmm_nt(Value a, Value b, int blocks);

    // structural ----------------------------------------------------------
    Value concat_cols(const std::vector<Value>& parts);
    Value slice_cols(Value a, int offset, int count);
    // inputs all p x q; output (p*k) x q with row i*k+j taken from part j
    Value interleave_rows(const std::vector<Value>& parts);
    // rows offset, offset+stride, ... ; input rows must divide by stride
    Value rows_strided(Value a, int stride, int offset);
    Value tile_rows(Value a, int times);    // stack `times` copies vertically
    Value embed_rows(Value table, std::vector<int> indices);
    // (B*m) x (heads*hd) -> (B*heads*m) x hd and back
    Value split_heads(Value a, int tokens, int heads, int head_dim);
    Value merge_heads(Value a, int tokens, int heads, int head_dim);

    // reductions ----------------------------------------------------------
    Value sum(Value a);                     // 1 x 1

    // execution -----------------------------------------------------------
    void backward(Value loss);
    void zero_grad();
    const Tensor& value(Value v) const;
    const Tensor& grad(Value v);            // zeros if nothing reached v
    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class Op : std::uint8_t {
        Leaf, Add, Sub, Mul, Scale, Matmul, Transpose, AddRowVec,
        Silu, SoftmaxRows, LayerNormRows, Bmm, BmmNT,
        ConcatCols, SliceCols, InterleaveRows, RowsStrided, TileRows,
        EmbedRows, SplitHeads, MergeHeads, Sum,
    };

    struct Node {
        Op op = Op::Leaf;
        std::vector<int> in;
        Tensor val;
        Tensor grad;        // allocated on first accumulation
        bool rg = false;
        double attr = 0.0;  // scale factor / layer-norm eps
        std::vector<int> iattr;
    };

    Node& node(Value v);
    const Node& node(Value v) const;
    int push(Node n);
    Value make(Op op, std::vector<int> in, Tensor val, double attr = 0.0,
               std::vector<int> iattr = {});
    void ensure_grad(Node& n);
    void backprop(int id);

    std::vector<Node> nodes_;
};

// Independent gradient verification: compares the tape's analytic gradient
// of f at `point` against central finite differences with per-coordinate
// step eps * max(1, |x_i|). Relative error uses an absolute floor so that
// near-zero coordinates do not dominate.
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

// Round every entry through float32. Persistent training state (parameters,
// optimizer moments) lives on the float32 grid so that checkpoints, which
// store float32 payloads, roundtrip bit-exactly.
Tensor& quantize_f32(Tensor& t);

using ScalarFn = std::function<Value(Tape&, Value)>;

GradCheckReport grad_check_detail(const ScalarFn& f, const Tensor& point,
                                  double eps, double abs_floor = 1e-3);
double grad_check(const ScalarFn& f, const Tensor& point, double eps);

} // namespace xmap::ad
