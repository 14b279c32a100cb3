#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "grad2task/rng.hpp"

namespace g2t {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // sized lazily; empty means "no gradient yet"
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop; // accumulates into parents' grads
    int topo_mark = 0;                   // scratch for backward()

    void ensure_grad();
};

} // namespace detail

/// Dense 64-bit float tensor (rank 0..2) with reverse-mode autodiff.
/// Value-semantic handle onto a shared graph node. Every op validates its
/// result for NaN/Inf; a non-finite value throws.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const { return shape().at(i); }

    std::span<const double> values() const;
    /// Direct write access for leaf tensors (parameters, buffers).
    std::span<double> mutable_values();
    double value_at(std::size_t i) const;
    double scalar_value() const; // requires size() == 1

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// Same values, cut off from the graph; never requires grad.
    Tensor detach() const;

    std::shared_ptr<detail::Node>& node() { return node_; }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
    friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                                 std::function<void(detail::Node&)>, const char*);
};

// ---- ops ------------------------------------------------------------------
// All binary ops validate shapes and throw std::invalid_argument naming both
// shapes on mismatch.

Tensor matmul(const Tensor& a, const Tensor& b);    // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b); // a * b^T, [m,k] x [n,k]
Tensor matvec(const Tensor& w, const Tensor& x);    // [m,n] x [n]

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& m, const Tensor& v); // broadcast v over rows
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt_op(const Tensor& a);

/// Row-wise softmax; 1-D input treated as a single row.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

/// Row-wise layer normalization with affine gain/bias of row width.
Tensor layer_norm(const Tensor& m, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts);      // 1-D concat
Tensor concat_cols(const std::vector<Tensor>& parts); // 2-D column concat
Tensor slice(const Tensor& v, std::size_t begin, std::size_t end); // 1-D
Tensor slice_cols(const Tensor& m, std::size_t c0, std::size_t c1);
Tensor row(const Tensor& m, std::size_t r); // 1-D copy of row r

Tensor sum_all(const Tensor& a);  // shape {1}
Tensor mean_all(const Tensor& a); // shape {1}
Tensor pick(const Tensor& v, std::size_t i); // shape {1}

Tensor reshape(const Tensor& a, Shape shape);

/// Rows of `table` selected by ids; gradient scatters back into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

/// FiLM on a single row: out[r] = gamma * m[r] + beta, other rows unchanged.
Tensor film_row(const Tensor& m, const Tensor& gamma, const Tensor& beta, std::size_t r);
/// FiLM on every row.
Tensor film_all_rows(const Tensor& m, const Tensor& gamma, const Tensor& beta);

/// Inverted dropout; identity when !training or rate == 0.
Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training);

/// Reverse-mode sweep from a scalar loss. Populates .grad on every
/// requires-grad tensor reachable from the loss, then clears the tape
/// (parent links and backprop closures) so graph memory is released.
void backward(const Tensor& loss);

} // namespace g2t
