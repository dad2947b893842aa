#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "c2fa/common.hpp"
#include "c2fa/rng.hpp"

namespace c2fa {

namespace detail {

struct Node {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    size_t size() const { return rows * cols; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}

}  // namespace detail

// Scoped suppression of tape recording. Ops executed inside produce plain
// values with no parents, so nothing reachable only through them ever
// receives a gradient.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording_enabled() { return detail::no_grad_depth() == 0; }

// Dense row-major matrix of doubles with reverse-mode gradient tracking.
// A Tensor is a shared handle to its node; copies alias the same storage.
// Scalars are 1x1, vectors are 1xk. Data is immutable once an op has consumed
// the tensor; only leaf parameters are mutated (by the optimizer, between
// tape lifetimes) and only grad accumulates during backward.
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    static Tensor zeros(size_t rows, size_t cols, bool requires_grad = false) {
        Tensor t;
        t.node_->rows = rows;
        t.node_->cols = cols;
        t.node_->data.assign(rows * cols, 0.0);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_data(size_t rows, size_t cols, std::vector<double> data,
                            bool requires_grad = false) {
        if (data.size() != rows * cols)
            throw DimensionError("Tensor::from_data: data length " + std::to_string(data.size()) +
                                 " does not match shape [" + std::to_string(rows) + "x" +
                                 std::to_string(cols) + "]");
        Tensor t;
        t.node_->rows = rows;
        t.node_->cols = cols;
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data(1, 1, {v}, requires_grad);
    }

    static Tensor randn(size_t rows, size_t cols, double stddev, Rng& rng,
                        bool requires_grad = false) {
        std::vector<double> d(rows * cols);
        for (auto& x : d) x = stddev * rng.next_gaussian();
        return from_data(rows, cols, std::move(d), requires_grad);
    }

    size_t rows() const { return node_->rows; }
    size_t cols() const { return node_->cols; }
    size_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->parents.empty(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    // Gradient accumulated by backward(). Zero-sized until first allocated.
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

    double at(size_t r, size_t c) const { return node_->data[r * node_->cols + c]; }

    double value() const {
        if (size() != 1) throw ContractError("Tensor::value: tensor is not scalar");
        return node_->data[0];
    }

    // Value copy detached from any graph.
    Tensor detach() const {
        return from_data(rows(), cols(), node_->data, false);
    }

    std::string shape_str() const {
        return "[" + std::to_string(rows()) + "x" + std::to_string(cols()) + "]";
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op_result(size_t rows, size_t cols, std::vector<double> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::Node&)> backward_fn);
};

// Builds the result node of an op. Records parents and the backward closure
// only when recording is active and some parent participates in gradients.
inline Tensor make_op_result(size_t rows, size_t cols, std::vector<double> data,
                             std::vector<Tensor> parents,
                             std::function<void(detail::Node&)> backward_fn) {
    auto node = std::make_shared<detail::Node>();
    node->rows = rows;
    node->cols = cols;
    node->data = std::move(data);
    bool track = false;
    if (grad_recording_enabled()) {
        for (const auto& p : parents)
            if (p.requires_grad()) track = true;
    }
    if (track) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(node);
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError(std::string(op) + ": shapes " + a.shape_str() + " and " +
                             b.shape_str() + " differ");
}

inline void accumulate(Node& dst, const std::vector<double>& contribution) {
    dst.ensure_grad();
    for (size_t i = 0; i < contribution.size(); ++i) dst.grad[i] += contribution[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return make_op_result(a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) detail::accumulate(*p, self.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    return make_op_result(a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) detail::accumulate(pa, self.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return make_op_result(a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }

// Multiply by a plain constant.
inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
    return make_op_result(a.rows(), a.cols(), std::move(out), {a}, [c](detail::Node& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += c * self.grad[i];
    });
}

// Broadcast multiply by a learnable 1x1 tensor (the one permitted broadcast).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("scale_by: scale must be 1x1, got " + s.shape_str());
    const double sv = s.data()[0];
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * sv;
    return make_op_result(a.rows(), a.cols(), std::move(out), {a, s}, [sv](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& ps = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += sv * self.grad[i];
        }
        if (ps.requires_grad) {
            ps.ensure_grad();
            double acc = 0.0;
            for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.data[i];
            ps.grad[0] += acc;
        }
    });
}

// Broadcast divide by a learnable 1x1 tensor.
inline Tensor div_by_scalar(const Tensor& a, const Tensor& s) {
    if (s.size() != 1)
        throw DimensionError("div_by_scalar: divisor must be 1x1, got " + s.shape_str());
    const double sv = s.data()[0];
    if (sv == 0.0) throw DomainError("div_by_scalar: divisor is zero");
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / sv;
    return make_op_result(a.rows(), a.cols(), std::move(out), {a, s}, [sv](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& ps = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] / sv;
        }
        if (ps.requires_grad) {
            ps.ensure_grad();
            double acc = 0.0;
            for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.data[i];
            ps.grad[0] -= acc / sv;
        }
    });
}

// y[i][j] = a[i][j] + bias[j], bias is 1xk.
inline Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols())
        throw DimensionError("add_row_bias: bias " + bias.shape_str() + " does not match " +
                             a.shape_str());
    const size_t m = a.rows(), k = a.cols();
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = bias.data();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < k; ++j) out[i * k + j] = ad[i * k + j] + bd[j];
    return make_op_result(m, k, std::move(out), {a, bias}, [m, k](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) detail::accumulate(pa, self.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < k; ++j) pb.grad[j] += self.grad[i * k + j];
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    const size_t m = a.rows(), k = a.cols();
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < k; ++j) out[j * m + i] = ad[i * k + j];
    return make_op_result(k, m, std::move(out), {a}, [m, k](detail::Node& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < k; ++j) pa.grad[i * k + j] += self.grad[j * m + i];
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner extents differ, " + a.shape_str() + " x " +
                             b.shape_str());
    const size_t m = a.rows(), k = a.cols(), p = b.cols();
    std::vector<double> out(m * p, 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < m; ++i) {
        const double* arow = &ad[i * k];
        double* crow = &out[i * p];
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = &bd[kk * p];
            for (size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return make_op_result(m, p, std::move(out), {a, b}, [m, k, p](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            // dA = G * B^T
            pa.ensure_grad();
            for (size_t i = 0; i < m; ++i) {
                const double* grow = &self.grad[i * p];
                double* darow = &pa.grad[i * k];
                for (size_t kk = 0; kk < k; ++kk) {
                    const double* brow = &pb.data[kk * p];
                    double acc = 0.0;
                    for (size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                    darow[kk] += acc;
                }
            }
        }
        if (pb.requires_grad) {
            // dB = A^T * G
            pb.ensure_grad();
            for (size_t i = 0; i < m; ++i) {
                const double* arow = &pa.data[i * k];
                const double* grow = &self.grad[i * p];
                for (size_t kk = 0; kk < k; ++kk) {
                    const double av = arow[kk];
                    double* dbrow = &pb.grad[kk * p];
                    for (size_t j = 0; j < p; ++j) dbrow[j] += av * grow[j];
                }
            }
        }
    });
}

// a * b^T without materializing the transpose; both operands row-major.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols())
        throw DimensionError("matmul_nt: inner extents differ, " + a.shape_str() + " x " +
                             b.shape_str() + "^T");
    const size_t m = a.rows(), k = a.cols(), p = b.rows();
    std::vector<double> out(m * p);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < m; ++i) {
        const double* arow = &ad[i * k];
        for (size_t j = 0; j < p; ++j) {
            const double* brow = &bd[j * k];
            double acc = 0.0;
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            out[i * p + j] = acc;
        }
    }
    return make_op_result(m, p, std::move(out), {a, b}, [m, k, p](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            // dA = G * B
            pa.ensure_grad();
            for (size_t i = 0; i < m; ++i) {
                const double* grow = &self.grad[i * p];
                double* darow = &pa.grad[i * k];
                for (size_t j = 0; j < p; ++j) {
                    const double gv = grow[j];
                    const double* brow = &pb.data[j * k];
                    for (size_t kk = 0; kk < k; ++kk) darow[kk] += gv * brow[kk];
                }
            }
        }
        if (pb.requires_grad) {
            // dB = G^T * A
            pb.ensure_grad();
            for (size_t i = 0; i < m; ++i) {
                const double* grow = &self.grad[i * p];
                const double* arow = &pa.data[i * k];
                for (size_t j = 0; j < p; ++j) {
                    const double gv = grow[j];
                    double* dbrow = &pb.grad[j * k];
                    for (size_t kk = 0; kk < k; ++kk) dbrow[kk] += gv * arow[kk];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Row-structured ops
// ---------------------------------------------------------------------------

// Row-wise softmax of x / temperature, stabilised by per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x, double temperature) {
    if (temperature <= 0.0)
        throw DomainError("softmax_rows: temperature must be positive, got " +
                          std::to_string(temperature));
    const size_t m = x.rows(), k = x.cols();
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (size_t i = 0; i < m; ++i) {
        const double* row = &xd[i * k];
        double mx = row[0] / temperature;
        for (size_t j = 1; j < k; ++j) mx = std::max(mx, row[j] / temperature);
        double sum = 0.0;
        for (size_t j = 0; j < k; ++j) {
            const double e = std::exp(row[j] / temperature - mx);
            out[i * k + j] = e;
            sum += e;
        }
        for (size_t j = 0; j < k; ++j) out[i * k + j] /= sum;
    }
    return make_op_result(m, k, std::move(out), {x}, [m, k, temperature](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            const double* y = &self.data[i * k];
            const double* g = &self.grad[i * k];
            double dot = 0.0;
            for (size_t j = 0; j < k; ++j) dot += g[j] * y[j];
            double* dx = &px.grad[i * k];
            for (size_t j = 0; j < k; ++j) dx[j] += y[j] * (g[j] - dot) / temperature;
        }
    });
}

inline Tensor l2_normalize_rows(const Tensor& x) {
    const size_t m = x.rows(), k = x.cols();
    std::vector<double> out(x.size());
    std::vector<double> norms(m);
    const auto& xd = x.data();
    for (size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < k; ++j) s += xd[i * k + j] * xd[i * k + j];
        const double r = std::sqrt(s);
        if (r < constants::kNormEps)
            throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) +
                                       " has norm below " + std::to_string(constants::kNormEps));
        norms[i] = r;
        for (size_t j = 0; j < k; ++j) out[i * k + j] = xd[i * k + j] / r;
    }
    return make_op_result(m, k, std::move(out), {x},
                          [m, k, norms = std::move(norms)](detail::Node& self) {
                              auto& px = *self.parents[0];
                              if (!px.requires_grad) return;
                              px.ensure_grad();
                              for (size_t i = 0; i < m; ++i) {
                                  const double* y = &self.data[i * k];
                                  const double* g = &self.grad[i * k];
                                  double dot = 0.0;
                                  for (size_t j = 0; j < k; ++j) dot += g[j] * y[j];
                                  double* dx = &px.grad[i * k];
                                  for (size_t j = 0; j < k; ++j)
                                      dx[j] += (g[j] - dot * y[j]) / norms[i];
                              }
                          });
}

// GELU with the exact erf formulation.
inline Tensor gelu(const Tensor& x) {
    const size_t n = x.size();
    std::vector<double> out(n);
    const auto& xd = x.data();
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < n; ++i)
        out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
    return make_op_result(x.rows(), x.cols(), std::move(out), {x}, [](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        constexpr double kInvSqrt2 = 0.7071067811865475244;
        constexpr double kInvSqrt2Pi = 0.3989422804014326779;
        for (size_t i = 0; i < self.data.size(); ++i) {
            const double v = px.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            px.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

// Per-row layer normalization with learnable gain and bias (both 1xk).
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const size_t m = x.rows(), k = x.cols();
    if (gain.rows() != 1 || gain.cols() != k || bias.rows() != 1 || bias.cols() != k)
        throw DimensionError("layer_norm_rows: gain/bias must be 1x" + std::to_string(k));
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(m);
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    for (size_t i = 0; i < m; ++i) {
        const double* row = &xd[i * k];
        double mean = 0.0;
        for (size_t j = 0; j < k; ++j) mean += row[j];
        mean /= static_cast<double>(k);
        double var = 0.0;
        for (size_t j = 0; j < k; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(k);
        const double inv = 1.0 / std::sqrt(var + constants::kLayerNormEps);
        inv_std[i] = inv;
        for (size_t j = 0; j < k; ++j) {
            const double xn = (row[j] - mean) * inv;
            xhat[i * k + j] = xn;
            out[i * k + j] = gd[j] * xn + bd[j];
        }
    }
    return make_op_result(
        m, k, std::move(out), {x, gain, bias},
        [m, k, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < k; ++j)
                        pg.grad[j] += self.grad[i * k + j] * xhat[i * k + j];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < k; ++j) pb.grad[j] += self.grad[i * k + j];
            }
            if (px.requires_grad) {
                px.ensure_grad();
                for (size_t i = 0; i < m; ++i) {
                    const double* g = &self.grad[i * k];
                    const double* xn = &xhat[i * k];
                    double mean_dy = 0.0, mean_dyx = 0.0;
                    std::vector<double> dy(k);
                    for (size_t j = 0; j < k; ++j) {
                        dy[j] = g[j] * pg.data[j];
                        mean_dy += dy[j];
                        mean_dyx += dy[j] * xn[j];
                    }
                    mean_dy /= static_cast<double>(k);
                    mean_dyx /= static_cast<double>(k);
                    double* dx = &px.grad[i * k];
                    for (size_t j = 0; j < k; ++j)
                        dx[j] += (dy[j] - mean_dy - xn[j] * mean_dyx) * inv_std[i];
                }
            }
        });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const size_t k = parts[0].cols();
    size_t m = 0;
    for (const auto& p : parts) {
        if (p.cols() != k)
            throw DimensionError("concat_rows: column mismatch, " + p.shape_str());
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(m * k);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_op_result(m, k, std::move(out), parts, [k](detail::Node& self) {
        size_t row = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
                const size_t n = p->data.size();
                for (size_t i = 0; i < n; ++i) p->grad[i] += self.grad[row * k + i];
            }
            row += p->rows;
        }
    });
}

inline Tensor slice_rows(const Tensor& a, size_t start, size_t count) {
    if (start + count > a.rows())
        throw ContractError("slice_rows: range [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") exceeds " + a.shape_str());
    const size_t k = a.cols();
    std::vector<double> out(a.data().begin() + static_cast<long>(start * k),
                            a.data().begin() + static_cast<long>((start + count) * k));
    return make_op_result(count, k, std::move(out), {a}, [start, count, k](detail::Node& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < count * k; ++i) pa.grad[start * k + i] += self.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, size_t start, size_t count) {
    if (start + count > a.cols())
        throw ContractError("slice_cols: range [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") exceeds " + a.shape_str());
    const size_t m = a.rows(), k = a.cols();
    std::vector<double> out(m * count);
    const auto& ad = a.data();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < count; ++j) out[i * count + j] = ad[i * k + start + j];
    return make_op_result(m, count, std::move(out), {a}, [m, k, start, count](detail::Node& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < count; ++j)
                pa.grad[i * k + start + j] += self.grad[i * count + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const size_t m = parts[0].rows();
    size_t k = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw DimensionError("concat_cols: row mismatch, " + p.shape_str());
        k += p.cols();
    }
    std::vector<double> out(m * k);
    size_t col = 0;
    for (const auto& p : parts) {
        const size_t pk = p.cols();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < pk; ++j) out[i * k + col + j] = p.data()[i * pk + j];
        col += pk;
    }
    return make_op_result(m, k, std::move(out), parts, [m, k](detail::Node& self) {
        size_t col = 0;
        for (auto& p : self.parents) {
            const size_t pk = p->cols;
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < pk; ++j)
                        p->grad[i * pk + j] += self.grad[i * k + col + j];
            }
            col += pk;
        }
    });
}

// Column means: [m x k] -> [1 x k].
inline Tensor mean_rows(const Tensor& a) {
    const size_t m = a.rows(), k = a.cols();
    if (m == 0) throw ContractError("mean_rows: empty input");
    std::vector<double> out(k, 0.0);
    const auto& ad = a.data();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < k; ++j) out[j] += ad[i * k + j];
    for (size_t j = 0; j < k; ++j) out[j] /= static_cast<double>(m);
    return make_op_result(1, k, std::move(out), {a}, [m, k](detail::Node& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const double inv = 1.0 / static_cast<double>(m);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < k; ++j) pa.grad[i * k + j] += self.grad[j] * inv;
    });
}

// out = sum_l coeffs[l] * layers[l]; coeffs is 1xL, layers share one shape.
inline Tensor linear_combination(const std::vector<Tensor>& layers, const Tensor& coeffs) {
    if (layers.empty()) throw DomainError("linear_combination: need at least one layer");
    if (coeffs.rows() != 1 || coeffs.cols() != layers.size())
        throw DimensionError("linear_combination: coeffs " + coeffs.shape_str() + " vs " +
                             std::to_string(layers.size()) + " layers");
    const size_t m = layers[0].rows(), k = layers[0].cols();
    for (const auto& l : layers) detail::check_same_shape(layers[0], l, "linear_combination");
    std::vector<double> out(m * k, 0.0);
    for (size_t l = 0; l < layers.size(); ++l) {
        const double c = coeffs.data()[l];
        const auto& ld = layers[l].data();
        for (size_t i = 0; i < out.size(); ++i) out[i] += c * ld[i];
    }
    std::vector<Tensor> parents = layers;
    parents.push_back(coeffs);
    return make_op_result(m, k, std::move(out), std::move(parents), [](detail::Node& self) {
        auto& pc = *self.parents.back();
        const size_t num_layers = self.parents.size() - 1;
        for (size_t l = 0; l < num_layers; ++l) {
            auto& pl = *self.parents[l];
            const double c = pc.data[l];
            if (pl.requires_grad) {
                pl.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pl.grad[i] += c * self.grad[i];
            }
            if (pc.requires_grad) {
                pc.ensure_grad();
                double acc = 0.0;
                for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pl.data[i];
                pc.grad[l] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Scalar losses
// ---------------------------------------------------------------------------

namespace detail {

inline void check_prob_rows(const Tensor& t, double tol, const char* op, const char* which) {
    for (size_t i = 0; i < t.rows(); ++i) {
        double s = 0.0;
        for (size_t j = 0; j < t.cols(); ++j) s += t.data()[i * t.cols() + j];
        if (std::abs(s - 1.0) > tol)
            throw ContractError(std::string(op) + ": " + which + " row " + std::to_string(i) +
                                " sums to " + std::to_string(s));
    }
}

}  // namespace detail

// Mean over rows of -sum_j targets * log(probs + eps).
inline Tensor cross_entropy(const Tensor& targets, const Tensor& probs) {
    detail::check_same_shape(targets, probs, "cross_entropy");
    detail::check_prob_rows(probs, constants::kProbRowSumTol, "cross_entropy", "probs");
    detail::check_prob_rows(targets, constants::kTargetRowSumTol, "cross_entropy", "targets");
    const size_t m = targets.rows(), k = targets.cols();
    const double inv_m = 1.0 / static_cast<double>(m);
    double loss = 0.0;
    const auto& td = targets.data();
    const auto& pd = probs.data();
    for (size_t i = 0; i < m * k; ++i)
        if (td[i] != 0.0) loss -= td[i] * std::log(pd[i] + constants::kLogEps);
    loss *= inv_m;
    return make_op_result(1, 1, {loss}, {targets, probs}, [inv_m](detail::Node& self) {
        auto& pt = *self.parents[0];
        auto& pp = *self.parents[1];
        const double g = self.grad[0] * inv_m;
        if (pp.requires_grad) {
            pp.ensure_grad();
            for (size_t i = 0; i < pp.data.size(); ++i)
                pp.grad[i] -= g * pt.data[i] / (pp.data[i] + constants::kLogEps);
        }
        if (pt.requires_grad) {
            pt.ensure_grad();
            for (size_t i = 0; i < pt.data.size(); ++i)
                pt.grad[i] -= g * std::log(pp.data[i] + constants::kLogEps);
        }
    });
}

// Mean over rows of sum_j q * log((q + eps) / (p + eps)).
inline Tensor kl_divergence(const Tensor& q, const Tensor& p) {
    detail::check_same_shape(q, p, "kl_divergence");
    detail::check_prob_rows(q, constants::kProbRowSumTol, "kl_divergence", "q");
    detail::check_prob_rows(p, constants::kProbRowSumTol, "kl_divergence", "p");
    const size_t m = q.rows(), k = q.cols();
    const double inv_m = 1.0 / static_cast<double>(m);
    double loss = 0.0;
    const auto& qd = q.data();
    const auto& pd = p.data();
    for (size_t i = 0; i < m * k; ++i)
        loss += qd[i] * std::log((qd[i] + constants::kLogEps) / (pd[i] + constants::kLogEps));
    loss *= inv_m;
    return make_op_result(1, 1, {loss}, {q, p}, [inv_m](detail::Node& self) {
        auto& pq = *self.parents[0];
        auto& pp = *self.parents[1];
        const double g = self.grad[0] * inv_m;
        if (pq.requires_grad) {
            pq.ensure_grad();
            for (size_t i = 0; i < pq.data.size(); ++i) {
                const double ratio = (pq.data[i] + constants::kLogEps) /
                                     (pp.data[i] + constants::kLogEps);
                pq.grad[i] += g * (std::log(ratio) +
                                   pq.data[i] / (pq.data[i] + constants::kLogEps));
            }
        }
        if (pp.requires_grad) {
            pp.ensure_grad();
            for (size_t i = 0; i < pp.data.size(); ++i)
                pp.grad[i] -= g * pq.data[i] / (pp.data[i] + constants::kLogEps);
        }
    });
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op_result(1, 1, {s}, {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < pa.data.size(); ++i) pa.grad[i] += self.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// loss. Non-leaf gradients are scratch and reset on every call, so running
// backward twice on the same graph adds the full gradient twice into leaves.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " +
                                              loss.shape_str());
    auto root = loss.node();
    if (!root->requires_grad) return;  // nothing on the tape participates

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* next = node->parents[idx].get();
            ++idx;
            if (next->requires_grad && !visited.count(next)) {
                visited.insert(next);
                stack.emplace_back(next, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Each sweep computes gradients from scratch; the leaf totals from prior
    // calls are stashed and added back in a single step afterwards, so two
    // identical sweeps yield exactly s + s = 2s per leaf coordinate.
    std::vector<std::pair<detail::Node*, std::vector<double>>> stashed;
    for (auto* node : order) {
        if (node->parents.empty() && !node->grad.empty())
            stashed.emplace_back(node, std::move(node->grad));
        node->grad.assign(node->data.size(), 0.0);
    }

    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);

    for (auto& [node, prior] : stashed)
        for (size_t i = 0; i < prior.size(); ++i) node->grad[i] += prior[i];
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Central-difference check of d f / d x against the analytic gradient from
// backward(). Returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8). The probe mutates x.data() in place and
// restores it.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                double h) {
    if (h <= 0.0) throw DomainError("finite_diff_check: h must be positive");
    Tensor probe = Tensor::from_data(x.rows(), x.cols(), x.data(), true);
    Tensor out = f(probe);
    backward(out);
    const std::vector<double> analytic = probe.grad();

    double max_rel = 0.0;
    auto& slot = probe.data();
    for (size_t i = 0; i < slot.size(); ++i) {
        const double saved = slot[i];
        double fp, fm;
        {
            NoGradGuard guard;
            slot[i] = saved + h;
            fp = f(probe).value();
            slot[i] = saved - h;
            fm = f(probe).value();
        }
        slot[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

}  // namespace c2fa
