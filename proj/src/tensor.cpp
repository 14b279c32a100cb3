#include "grad2task/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace g2t {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace {

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

void check_finite(const char* op, std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

} // namespace

namespace detail {

void Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
}

} // namespace detail

using detail::Node;

// Constructs an op result node. Parents and backprop are recorded only when
// some input requires grad.
Tensor make_op_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backprop, const char* op_name) {
    check_finite(op_name, value);
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    for (const auto& t : inputs) {
        if (t.defined() && t.requires_grad()) needs = true;
    }
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) n->parents.push_back(t.node());
        n->backprop = std::move(backprop);
    }
    Tensor out;
    out.node() = std::move(n);
    return out;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    std::vector<double> data(shape_size(shape), v);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    std::size_t n = shape_size(shape);
    if (data.empty()) data.assign(n, 0.0);
    if (data.size() != n) {
        throw std::invalid_argument("Tensor::from_data: data length " +
                                    std::to_string(data.size()) + " != product of shape " +
                                    shape_str(shape));
    }
    check_finite("from_data", data);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::values() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->value;
}

std::span<double> Tensor::mutable_values() {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->value;
}

double Tensor::value_at(std::size_t i) const { return values()[i]; }

double Tensor::scalar_value() const {
    if (size() != 1) {
        throw std::invalid_argument("Tensor::scalar_value: tensor has shape " +
                                    shape_str(shape()) + ", expected a scalar");
    }
    return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient present");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
    if (!node_) return Tensor();
    return from_data(node_->shape, node_->value, false);
}

// ---- elementwise helpers ----------------------------------------------------

namespace {

Tensor unary_op(const Tensor& a, const char* name, double (*f)(double), double (*df)(double)) {
    std::vector<double> out(a.size());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return make_op_result(
        a.shape(), std::move(out), {a},
        [f, df](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.value.size(); ++i) {
                p.grad[i] += n.grad[i] * df(p.value[i]);
            }
        },
        name);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

} // namespace

// ---- binary ops -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](Node& n) {
            for (int k = 0; k < 2; ++k) {
                auto& p = *n.parents[k];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i) p.grad[i] += n.grad[i];
            }
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i) pa.grad[i] += n.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i) pb.grad[i] -= n.grad[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i)
                    pa.grad[i] += n.grad[i] * pb.value[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i)
                    pb.grad[i] += n.grad[i] * pa.value[i];
            }
        },
        "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape("div", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / b.values()[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i)
                    pa.grad[i] += n.grad[i] / pb.value[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i)
                    pb.grad[i] -= n.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
            }
        },
        "div");
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    require(m.rank() == 2 && v.rank() == 1, "add_rowvec: expects matrix and vector, got " +
                                                shape_str(m.shape()) + " and " + shape_str(v.shape()));
    if (m.dim(1) != v.dim(0)) shape_error("add_rowvec", m.shape(), v.shape());
    std::size_t rows = m.dim(0), cols = m.dim(1);
    std::vector<double> out(m.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = m.values()[r * cols + c] + v.values()[c];
    return make_op_result(
        m.shape(), std::move(out), {m, v},
        [rows, cols](Node& n) {
            auto& pm = *n.parents[0];
            auto& pv = *n.parents[1];
            if (pm.requires_grad) {
                pm.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i) pm.grad[i] += n.grad[i];
            }
            if (pv.requires_grad) {
                pv.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) pv.grad[c] += n.grad[r * cols + c];
            }
        },
        "add_rowvec");
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    return make_op_result(
        a.shape(), std::move(out), {a},
        [c](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.value.size(); ++i) p.grad[i] += n.grad[i] * c;
        },
        "scale");
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---- matmul family ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: expects two matrices, got " +
                                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const double* A = a.values().data();
    const double* B = b.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* brow = B + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_op_result(
        {m, n}, std::move(out), {a, b},
        [m, k, n](Node& nd) {
            auto& pa = *nd.parents[0];
            auto& pb = *nd.parents[1];
            const double* G = nd.grad.data();
            if (pa.requires_grad) {
                pa.ensure_grad();
                const double* B = pb.value.data();
                // dA = G * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                        pa.grad[i * k + p] += acc;
                    }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                const double* A = pa.value.data();
                // dB = A^T * G
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        double av = A[i * k + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            pb.grad[p * n + j] += av * G[i * n + j];
                    }
            }
        },
        "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul_nt: expects two matrices, got " +
                                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(1)) shape_error("matmul_nt", a.shape(), b.shape());
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<double> out(m * n, 0.0);
    const double* A = a.values().data();
    const double* B = b.values().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
            out[i * n + j] = acc;
        }
    return make_op_result(
        {m, n}, std::move(out), {a, b},
        [m, k, n](Node& nd) {
            auto& pa = *nd.parents[0];
            auto& pb = *nd.parents[1];
            const double* G = nd.grad.data();
            if (pa.requires_grad) {
                pa.ensure_grad();
                const double* B = pb.value.data();
                // dA = G * B
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double g = G[i * n + j];
                        if (g == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p)
                            pa.grad[i * k + p] += g * B[j * k + p];
                    }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                const double* A = pa.value.data();
                // dB = G^T * A
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < m; ++i) {
                        double g = G[i * n + j];
                        if (g == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p)
                            pb.grad[j * k + p] += g * A[i * k + p];
                    }
            }
        },
        "matmul_nt");
}

Tensor matvec(const Tensor& w, const Tensor& x) {
    require(w.rank() == 2 && x.rank() == 1, "matvec: expects matrix and vector, got " +
                                                shape_str(w.shape()) + " and " + shape_str(x.shape()));
    if (w.dim(1) != x.dim(0)) shape_error("matvec", w.shape(), x.shape());
    std::size_t m = w.dim(0), n = w.dim(1);
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += w.values()[i * n + j] * x.values()[j];
        out[i] = acc;
    }
    return make_op_result(
        {m}, std::move(out), {w, x},
        [m, n](Node& nd) {
            auto& pw = *nd.parents[0];
            auto& px = *nd.parents[1];
            if (pw.requires_grad) {
                pw.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        pw.grad[i * n + j] += nd.grad[i] * px.value[j];
            }
            if (px.requires_grad) {
                px.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        px.grad[j] += nd.grad[i] * pw.value[i * n + j];
            }
        },
        "matvec");
}

// ---- elementwise nonlinearities ----------------------------------------------

Tensor relu(const Tensor& a) {
    return unary_op(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    return unary_op(
        a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
        [](double x) {
            double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
            double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + x * pdf;
        });
}

Tensor tanh_op(const Tensor& a) {
    return unary_op(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double x) {
            double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, "sigmoid",
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double x) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        });
}

Tensor log_op(const Tensor& a) {
    return unary_op(
        a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor exp_op(const Tensor& a) {
    return unary_op(
        a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor square(const Tensor& a) {
    return unary_op(
        a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor sqrt_op(const Tensor& a) {
    return unary_op(
        a, "sqrt", [](double x) { return std::sqrt(x); },
        [](double x) { return 0.5 / std::sqrt(x); });
}

// ---- softmax / layer norm -----------------------------------------------------

namespace {

std::pair<std::size_t, std::size_t> as_rows(const Tensor& a, const char* op) {
    if (a.rank() == 1) return {1, a.dim(0)};
    if (a.rank() == 2) return {a.dim(0), a.dim(1)};
    throw std::invalid_argument(std::string(op) + ": expects rank 1 or 2, got " +
                                shape_str(a.shape()));
}

} // namespace

Tensor softmax(const Tensor& a) {
    auto [rows, cols] = as_rows(a, "softmax");
    require(cols > 0, "softmax: empty rows");
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double* y = out.data() + r * cols;
        double mx = *std::max_element(x, x + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            z += y[c];
        }
        for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
    }
    return make_op_result(
        a.shape(), std::move(out), {a},
        [rows, cols](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = n.value.data() + r * cols;
                const double* g = n.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
                for (std::size_t c = 0; c < cols; ++c)
                    p.grad[r * cols + c] += y[c] * (g[c] - dot);
            }
        },
        "softmax");
}

Tensor log_softmax(const Tensor& a) {
    auto [rows, cols] = as_rows(a, "log_softmax");
    require(cols > 0, "log_softmax: empty rows");
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double* y = out.data() + r * cols;
        double mx = *std::max_element(x, x + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
        double lz = mx + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lz;
    }
    return make_op_result(
        a.shape(), std::move(out), {a},
        [rows, cols](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = n.value.data() + r * cols;
                const double* g = n.grad.data() + r * cols;
                double gsum = 0.0;
                for (std::size_t c = 0; c < cols; ++c) gsum += g[c];
                for (std::size_t c = 0; c < cols; ++c)
                    p.grad[r * cols + c] += g[c] - std::exp(y[c]) * gsum;
            }
        },
        "log_softmax");
}

Tensor layer_norm(const Tensor& m, const Tensor& gain, const Tensor& bias, double eps) {
    require(eps > 0.0, "layer_norm: eps must be > 0");
    auto [rows, cols] = as_rows(m, "layer_norm");
    require(gain.rank() == 1 && gain.dim(0) == cols, "layer_norm: gain shape " +
                                                         shape_str(gain.shape()) + " vs row width " +
                                                         std::to_string(cols));
    require(bias.rank() == 1 && bias.dim(0) == cols, "layer_norm: bias shape " +
                                                         shape_str(bias.shape()) + " vs row width " +
                                                         std::to_string(cols));
    std::vector<double> out(m.size());
    std::vector<double> xhat(m.size());
    std::vector<double> inv_sigma(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = m.values().data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += x[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= static_cast<double>(cols);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            double xh = (x[c] - mu) * is;
            xhat[r * cols + c] = xh;
            out[r * cols + c] = xh * gain.values()[c] + bias.values()[c];
        }
    }
    return make_op_result(
        m.shape(), std::move(out), {m, gain, bias},
        [rows, cols, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node& n) {
            auto& pm = *n.parents[0];
            auto& pg = *n.parents[1];
            auto& pb = *n.parents[2];
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                        pg.grad[c] += n.grad[r * cols + c] * xhat[r * cols + c];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) pb.grad[c] += n.grad[r * cols + c];
            }
            if (pm.requires_grad) {
                pm.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        double dxh = n.grad[r * cols + c] * pg.value[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[r * cols + c];
                    }
                    mean_dxh /= static_cast<double>(cols);
                    mean_dxh_xh /= static_cast<double>(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                        double dxh = n.grad[r * cols + c] * pg.value[c];
                        pm.grad[r * cols + c] += inv_sigma[r] * (dxh - mean_dxh -
                                                                 xhat[r * cols + c] * mean_dxh_xh);
                    }
                }
            }
        },
        "layer_norm");
}

// ---- structural ops -----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat: no inputs");
    std::size_t total = 0;
    for (const auto& p : parts) {
        require(p.rank() <= 1, "concat: expects vectors, got " + shape_str(p.shape()));
        total += p.size();
    }
    std::vector<double> out;
    out.reserve(total);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) sizes.push_back(p.size());
    return make_op_result(
        {total}, std::move(out), parts,
        [sizes = std::move(sizes)](Node& n) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                auto& p = *n.parents[k];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (std::size_t i = 0; i < sizes[k]; ++i) p.grad[i] += n.grad[off + i];
                }
                off += sizes[k];
            }
        },
        "concat");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    std::size_t rows = parts[0].dim(0);
    std::size_t total_cols = 0;
    for (const auto& p : parts) {
        require(p.rank() == 2 && p.dim(0) == rows,
                "concat_cols: inconsistent shapes, first " + shape_str(parts[0].shape()) +
                    " vs " + shape_str(p.shape()));
        total_cols += p.dim(1);
    }
    std::vector<double> out(rows * total_cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t pc = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c)
                out[r * total_cols + off + c] = p.values()[r * pc + c];
        off += pc;
    }
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    return make_op_result(
        {rows, total_cols}, std::move(out), parts,
        [rows, total_cols, widths = std::move(widths)](Node& n) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                auto& p = *n.parents[k];
                std::size_t pc = widths[k];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < pc; ++c)
                            p.grad[r * pc + c] += n.grad[r * total_cols + off + c];
                }
                off += pc;
            }
        },
        "concat_cols");
}

Tensor slice(const Tensor& v, std::size_t begin, std::size_t end) {
    require(v.rank() == 1, "slice: expects vector, got " + shape_str(v.shape()));
    require(begin <= end && end <= v.dim(0), "slice: range [" + std::to_string(begin) + "," +
                                                 std::to_string(end) + ") out of bounds for " +
                                                 shape_str(v.shape()));
    std::vector<double> out(v.values().begin() + begin, v.values().begin() + end);
    return make_op_result(
        {end - begin}, std::move(out), {v},
        [begin](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.value.size(); ++i) p.grad[begin + i] += n.grad[i];
        },
        "slice");
}

Tensor slice_cols(const Tensor& m, std::size_t c0, std::size_t c1) {
    require(m.rank() == 2, "slice_cols: expects matrix, got " + shape_str(m.shape()));
    require(c0 <= c1 && c1 <= m.dim(1), "slice_cols: column range out of bounds for " +
                                            shape_str(m.shape()));
    std::size_t rows = m.dim(0), cols = m.dim(1), w = c1 - c0;
    std::vector<double> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) out[r * w + c] = m.values()[r * cols + c0 + c];
    return make_op_result(
        {rows, w}, std::move(out), {m},
        [rows, cols, c0, w](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < w; ++c)
                    p.grad[r * cols + c0 + c] += n.grad[r * w + c];
        },
        "slice_cols");
}

Tensor row(const Tensor& m, std::size_t r) {
    require(m.rank() == 2, "row: expects matrix, got " + shape_str(m.shape()));
    require(r < m.dim(0), "row: index " + std::to_string(r) + " out of bounds for " +
                              shape_str(m.shape()));
    std::size_t cols = m.dim(1);
    std::vector<double> out(m.values().begin() + r * cols, m.values().begin() + (r + 1) * cols);
    return make_op_result(
        {cols}, std::move(out), {m},
        [r, cols](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t c = 0; c < cols; ++c) p.grad[r * cols + c] += n.grad[c];
        },
        "row");
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return make_op_result(
        {1}, {s}, {a},
        [](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += n.grad[0];
        },
        "sum");
}

Tensor mean_all(const Tensor& a) {
    require(a.size() > 0, "mean: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

Tensor pick(const Tensor& v, std::size_t i) {
    require(i < v.size(), "pick: index " + std::to_string(i) + " out of bounds for " +
                              shape_str(v.shape()));
    return make_op_result(
        {1}, {v.values()[i]}, {v},
        [i](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            p.grad[i] += n.grad[0];
        },
        "pick");
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(shape_size(shape) == a.size(), "reshape: size mismatch " + shape_str(a.shape()) +
                                               " -> " + shape_str(shape));
    std::vector<double> out(a.values().begin(), a.values().end());
    return make_op_result(
        std::move(shape), std::move(out), {a},
        [](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.value.size(); ++i) p.grad[i] += n.grad[i];
        },
        "reshape");
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    require(table.rank() == 2, "gather_rows: expects matrix, got " + shape_str(table.shape()));
    std::size_t cols = table.dim(1);
    std::size_t rows = ids.size();
    std::vector<double> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        int id = ids[r];
        require(id >= 0 && static_cast<std::size_t>(id) < table.dim(0),
                "gather_rows: id " + std::to_string(id) + " out of bounds for " +
                    shape_str(table.shape()));
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = table.values()[static_cast<std::size_t>(id) * cols + c];
    }
    return make_op_result(
        {rows, cols}, std::move(out), {table},
        [ids, cols](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    p.grad[static_cast<std::size_t>(ids[r]) * cols + c] += n.grad[r * cols + c];
        },
        "gather_rows");
}

Tensor film_row(const Tensor& m, const Tensor& gamma, const Tensor& beta, std::size_t r) {
    require(m.rank() == 2, "film_row: expects matrix, got " + shape_str(m.shape()));
    require(r < m.dim(0), "film_row: row out of bounds");
    std::size_t cols = m.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != cols) shape_error("film_row(gamma)", m.shape(), gamma.shape());
    if (beta.rank() != 1 || beta.dim(0) != cols) shape_error("film_row(beta)", m.shape(), beta.shape());
    std::vector<double> out(m.values().begin(), m.values().end());
    for (std::size_t c = 0; c < cols; ++c)
        out[r * cols + c] = gamma.values()[c] * m.values()[r * cols + c] + beta.values()[c];
    return make_op_result(
        m.shape(), std::move(out), {m, gamma, beta},
        [r, cols](Node& n) {
            auto& pm = *n.parents[0];
            auto& pg = *n.parents[1];
            auto& pb = *n.parents[2];
            if (pm.requires_grad) {
                pm.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i) {
                    std::size_t rr = i / cols, cc = i % cols;
                    pm.grad[i] += (rr == r) ? n.grad[i] * pg.value[cc] : n.grad[i];
                }
            }
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (std::size_t c = 0; c < cols; ++c)
                    pg.grad[c] += n.grad[r * cols + c] * pm.value[r * cols + c];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t c = 0; c < cols; ++c) pb.grad[c] += n.grad[r * cols + c];
            }
        },
        "film_row");
}

Tensor film_all_rows(const Tensor& m, const Tensor& gamma, const Tensor& beta) {
    require(m.rank() == 2, "film_all_rows: expects matrix, got " + shape_str(m.shape()));
    std::size_t rows = m.dim(0), cols = m.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != cols)
        shape_error("film_all_rows(gamma)", m.shape(), gamma.shape());
    if (beta.rank() != 1 || beta.dim(0) != cols)
        shape_error("film_all_rows(beta)", m.shape(), beta.shape());
    std::vector<double> out(m.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = gamma.values()[c] * m.values()[r * cols + c] + beta.values()[c];
    return make_op_result(
        m.shape(), std::move(out), {m, gamma, beta},
        [rows, cols](Node& n) {
            auto& pm = *n.parents[0];
            auto& pg = *n.parents[1];
            auto& pb = *n.parents[2];
            if (pm.requires_grad) {
                pm.ensure_grad();
                for (std::size_t i = 0; i < n.value.size(); ++i)
                    pm.grad[i] += n.grad[i] * pg.value[i % cols];
            }
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                        pg.grad[c] += n.grad[r * cols + c] * pm.value[r * cols + c];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) pb.grad[c] += n.grad[r * cols + c];
            }
        },
        "film_all_rows");
}

Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training) {
    require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
    if (!training || rate == 0.0) return a;
    double keep = 1.0 - rate;
    std::vector<double> mask(a.size());
    for (auto& m : mask) m = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * mask[i];
    return make_op_result(
        a.shape(), std::move(out), {a},
        [mask = std::move(mask)](Node& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.value.size(); ++i) p.grad[i] += n.grad[i] * mask[i];
        },
        "dropout");
}

// ---- backward ------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return; // constant loss; nothing to do

    // Iterative post-order DFS for the topological order.
    std::vector<Node*> topo;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    loss.node()->topo_mark = 1;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && p->topo_mark == 0) {
                p->topo_mark = 1;
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        n->topo_mark = 0;
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
    // Clear the tape: drop edges and closures so intermediate nodes free up.
    for (Node* n : topo) {
        n->parents.clear();
        n->backprop = nullptr;
    }
}

} // namespace g2t
