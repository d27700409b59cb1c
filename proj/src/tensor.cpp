// SPDX-License-Identifier: Apache-2.0
#include "cmmix/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cmmix::tensor {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
    out << ']';
    return out.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
T* Node<T>::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
}

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->data.assign(numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
    if (numel(shape) != data.size())
        throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return full(Shape{1}, value, requires_grad);
}

template <typename T>
void Tensor<T>::zero_grad() {
    node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
    if (size() != 1) throw ContractError("item: tensor has " + std::to_string(size()) + " elements");
    return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from(shape(), node_->data, false);
}

// ---- Tape ------------------------------------------------------------------

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& loss) {
    Tape tape;
    tape.loss_ = &loss.node();
    if (!loss.requires_grad()) return tape;

    std::unordered_set<const Node<T>*> visited;
    // Iterative post-order DFS; each frame is (node, next parent index).
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{&loss.node(), 0}};
    visited.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
            continue;
        }
        tape.order_.push_back(node);
        stack.pop_back();
    }
    return tape;
}

template <typename T>
void Tape<T>::run() {
    if (order_.empty()) throw ContractError("backward: loss does not depend on any tensor requiring grad");
    for (Node<T>* node : order_)
        if (node->backward_fn) node->grad.clear();
    loss_->grad_buffer()[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    Tape<T>::record(loss).run();
}

// ---- helpers ---------------------------------------------------------------

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMapMat<T> as_mat(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
    return ConstMapMat<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MapMat<T> as_mat(T* p, std::size_t rows, std::size_t cols) {
    return MapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    node->requires_grad = grad_enabled() && std::any_of(parents.begin(), parents.end(),
                                                        [](const auto& p) { return p->requires_grad; });
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank2(const Shape& s, const char* op) {
    if (s.size() != 2)
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(s));
}

template <typename T>
T normal_cdf(T x) {
    return T(0.5) * std::erfc(-x / std::numbers::sqrt2_v<T>);
}

template <typename T>
T normal_pdf(T x) {
    return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result<T>(a.shape(), std::move(out), "add", {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            T* g = p->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result<T>(a.shape(), std::move(out), "sub", {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
        const T sign[2] = {T(1), T(-1)};
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            T* g = p->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += sign[k] * self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result<T>(a.shape(), std::move(out), "mul", {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            T* g = pa->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            T* g = pb->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->data[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    return make_result<T>(a.shape(), std::move(out), "scale", {a.node_ptr()}, [factor](Node<T>& self) {
        T* g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * normal_cdf(a.data()[i]);
    return make_result<T>(a.shape(), std::move(out), "gelu", {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        T* g = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T x = p->data[i];
            g[i] += self.grad[i] * (normal_cdf(x) + x * normal_pdf(x));
        }
    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return make_result<T>(a.shape(), std::move(out), "exp", {a.node_ptr()}, [](Node<T>& self) {
        T* g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.data[i];
    });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    return make_result<T>(a.shape(), std::move(out), "log", {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        T* g = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / p->data[i];
    });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() == 0 || bias.rank() != 1 || bias.dim(0) != x.shape().back())
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match trailing dim of " +
                             shape_str(x.shape()));
    const std::size_t n = bias.dim(0);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + bias.data()[i % n];
    return make_result<T>(x.shape(), std::move(out), "add_bias", {x.node_ptr(), bias.node_ptr()},
                          [n](Node<T>& self) {
                              auto& px = self.parents[0];
                              auto& pb = self.parents[1];
                              if (px->requires_grad) {
                                  T* g = px->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                              }
                              if (pb->requires_grad) {
                                  T* g = pb->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
                              }
                          });
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (T v : a.data()) total += v;
    return make_result<T>(Shape{1}, {total}, "sum", {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        T* g = p->grad_buffer();
        for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.size() == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a.shape(), "matmul");
    require_rank2(b.shape(), "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dims disagree " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    std::vector<T> out(m * n);
    as_mat(out.data(), m, n).noalias() = as_mat(a.node().data, m, k) * as_mat(b.node().data, k, n);
    return make_result<T>(Shape{m, n}, std::move(out), "matmul", {a.node_ptr(), b.node_ptr()},
                          [m, k, n](Node<T>& self) {
                              auto& pa = self.parents[0];
                              auto& pb = self.parents[1];
                              auto dc = as_mat(self.grad, m, n);
                              if (pa->requires_grad)
                                  as_mat(pa->grad_buffer(), m, k).noalias() += dc * as_mat(pb->data, k, n).transpose();
                              if (pb->requires_grad)
                                  as_mat(pb->grad_buffer(), k, n).noalias() += as_mat(pa->data, m, k).transpose() * dc;
                          });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a.shape(), "matmul_nt");
    require_rank2(b.shape(), "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw DimensionError("matmul_nt: inner dims disagree " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()) + "^T");
    std::vector<T> out(m * n);
    as_mat(out.data(), m, n).noalias() = as_mat(a.node().data, m, k) * as_mat(b.node().data, n, k).transpose();
    return make_result<T>(Shape{m, n}, std::move(out), "matmul_nt", {a.node_ptr(), b.node_ptr()},
                          [m, k, n](Node<T>& self) {
                              auto& pa = self.parents[0];
                              auto& pb = self.parents[1];
                              auto dc = as_mat(self.grad, m, n);
                              if (pa->requires_grad)
                                  as_mat(pa->grad_buffer(), m, k).noalias() += dc * as_mat(pb->data, n, k);
                              if (pb->requires_grad)
                                  as_mat(pb->grad_buffer(), n, k).noalias() += dc.transpose() * as_mat(pa->data, m, k);
                          });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_rank2(a.shape(), "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(m * n);
    as_mat(out.data(), n, m) = as_mat(a.node().data, m, n).transpose();
    return make_result<T>(Shape{n, m}, std::move(out), "transpose", {a.node_ptr()}, [m, n](Node<T>& self) {
        as_mat(self.parents[0]->grad_buffer(), m, n) += as_mat(self.grad, n, m).transpose();
    });
}

// ---- normalization ---------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const Shape& s = x.shape();
    const std::size_t len = s[axis];
    const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    const std::size_t outer = x.size() / std::max<std::size_t>(1, len * inner);
    std::vector<T> out(x.size());
    const auto& in = x.node().data;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            T mx = in[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
            T total = 0;
            for (std::size_t j = 0; j < len; ++j) total += out[base + j * inner] = std::exp(in[base + j * inner] - mx);
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
        }
    }
    return make_result<T>(s, std::move(out), "softmax", {x.node_ptr()}, [outer, len, inner](Node<T>& self) {
        T* g = self.parents[0]->grad_buffer();
        const auto& y = self.data;
        const auto& dy = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * len * inner + i;
                T dot = 0;
                for (std::size_t j = 0; j < len; ++j) dot += dy[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t at = base + j * inner;
                    g[at] += y[at] * (dy[at] - dot);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    if (x.rank() == 0) throw DimensionError("log_softmax: scalar input");
    const std::size_t len = x.shape().back();
    const std::size_t rows = x.size() / len;
    std::vector<T> out(x.size());
    const auto& in = x.node().data;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * len;
        const T mx = *std::max_element(row, row + len);
        T total = 0;
        for (std::size_t j = 0; j < len; ++j) total += std::exp(row[j] - mx);
        const T lse = mx + std::log(total);
        for (std::size_t j = 0; j < len; ++j) out[r * len + j] = row[j] - lse;
    }
    return make_result<T>(x.shape(), std::move(out), "log_softmax", {x.node_ptr()}, [rows, len](Node<T>& self) {
        T* g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * len;
            T total = 0;
            for (std::size_t j = 0; j < len; ++j) total += self.grad[base + j];
            for (std::size_t j = 0; j < len; ++j)
                g[base + j] += self.grad[base + j] - std::exp(self.data[base + j]) * total;
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
    const std::size_t n = x.shape().back();
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n})
        throw DimensionError("layer_norm: gamma/beta must have shape [" + std::to_string(n) + "]");
    const std::size_t rows = x.size() / n;
    std::vector<T> out(x.size());
    // normalized values and reciprocal std are kept for the backward rule
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    const auto& in = x.node().data;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * n;
        T mu = 0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(n);
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (row[j] - mu) * rs;
            (*xhat)[r * n + j] = h;
            out[r * n + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    return make_result<T>(x.shape(), std::move(out), "layer_norm",
                          {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
                          [rows, n, xhat, rstd](Node<T>& self) {
                              auto& px = self.parents[0];
                              auto& pg = self.parents[1];
                              auto& pb = self.parents[2];
                              const auto& dy = self.grad;
                              if (pg->requires_grad) {
                                  T* g = pg->grad_buffer();
                                  for (std::size_t i = 0; i < dy.size(); ++i) g[i % n] += dy[i] * (*xhat)[i];
                              }
                              if (pb->requires_grad) {
                                  T* g = pb->grad_buffer();
                                  for (std::size_t i = 0; i < dy.size(); ++i) g[i % n] += dy[i];
                              }
                              if (!px->requires_grad) return;
                              T* g = px->grad_buffer();
                              const T inv_n = T(1) / static_cast<T>(n);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  T sum_d = 0, sum_dh = 0;
                                  for (std::size_t j = 0; j < n; ++j) {
                                      const T d = dy[r * n + j] * pg->data[j];
                                      sum_d += d;
                                      sum_dh += d * (*xhat)[r * n + j];
                                  }
                                  for (std::size_t j = 0; j < n; ++j) {
                                      const T d = dy[r * n + j] * pg->data[j];
                                      g[r * n + j] += (*rstd)[r] * (d - inv_n * sum_d - (*xhat)[r * n + j] * inv_n * sum_dh);
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    require_rank2(x.shape(), "l2_normalize_rows");
    const std::size_t rows = x.dim(0), n = x.dim(1);
    std::vector<T> out(x.size());
    auto norms = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (std::size_t j = 0; j < n; ++j) ss += x.data()[r * n + j] * x.data()[r * n + j];
        if (!(ss > T(0))) throw ContractError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
        const T norm = std::sqrt(ss);
        (*norms)[r] = norm;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.data()[r * n + j] / norm;
    }
    return make_result<T>(x.shape(), std::move(out), "l2_normalize_rows", {x.node_ptr()},
                          [rows, n, norms](Node<T>& self) {
                              T* g = self.parents[0]->grad_buffer();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  T dot = 0;
                                  for (std::size_t j = 0; j < n; ++j) dot += self.data[r * n + j] * self.grad[r * n + j];
                                  for (std::size_t j = 0; j < n; ++j)
                                      g[r * n + j] += (self.grad[r * n + j] - self.data[r * n + j] * dot) / (*norms)[r];
                              }
                          });
}

// ---- structural ------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    return make_result<T>(std::move(shape), a.node().data, "reshape", {a.node_ptr()}, [](Node<T>& self) {
        T* g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    require_rank2(a.shape(), "slice_cols");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (begin > end || end > cols)
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") out of " + std::to_string(cols));
    const std::size_t w = end - begin;
    std::vector<T> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(a.data().begin() + static_cast<long>(r * cols + begin), w, out.begin() + static_cast<long>(r * w));
    return make_result<T>(Shape{rows, w}, std::move(out), "slice_cols", {a.node_ptr()},
                          [rows, cols, begin, w](Node<T>& self) {
                              T* g = self.parents[0]->grad_buffer();
                              for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < w; ++j) g[r * cols + begin + j] += self.grad[r * w + j];
                          });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank2(p.shape(), "concat_cols");
        if (p.dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<T> out(rows * total);
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(parts[k].data().begin() + static_cast<long>(r * widths[k]), widths[k],
                        out.begin() + static_cast<long>(r * total + offset));
        offset += widths[k];
        parents.push_back(parts[k].node_ptr());
    }
    return make_result<T>(Shape{rows, total}, std::move(out), "concat_cols", std::move(parents),
                          [rows, total, widths](Node<T>& self) {
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < widths.size(); ++k) {
                                  auto& p = self.parents[k];
                                  if (p->requires_grad) {
                                      T* g = p->grad_buffer();
                                      for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t j = 0; j < widths[k]; ++j)
                                              g[r * widths[k] + j] += self.grad[r * total + off + j];
                                  }
                                  off += widths[k];
                              }
                          });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t cols = parts[0].dim(1);
    std::vector<T> out;
    std::vector<std::size_t> sizes;
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (const auto& p : parts) {
        require_rank2(p.shape(), "concat_rows");
        if (p.dim(1) != cols) throw DimensionError("concat_rows: column counts differ");
        out.insert(out.end(), p.data().begin(), p.data().end());
        sizes.push_back(p.size());
        parents.push_back(p.node_ptr());
    }
    const std::size_t rows = out.size() / cols;
    return make_result<T>(Shape{rows, cols}, std::move(out), "concat_rows", std::move(parents),
                          [sizes](Node<T>& self) {
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < sizes.size(); ++k) {
                                  auto& p = self.parents[k];
                                  if (p->requires_grad) {
                                      T* g = p->grad_buffer();
                                      for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[off + i];
                                  }
                                  off += sizes[k];
                              }
                          });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
    require_rank2(a.shape(), "gather_rows");
    const std::size_t n = a.dim(0), cols = a.dim(1);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<T> out(idx.size() * cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range");
        std::copy_n(a.data().begin() + static_cast<long>(idx[i] * cols), cols, out.begin() + static_cast<long>(i * cols));
    }
    return make_result<T>(Shape{idx.size(), cols}, std::move(out), "gather_rows", {a.node_ptr()},
                          [idx, cols](Node<T>& self) {
                              T* g = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                  for (std::size_t j = 0; j < cols; ++j) g[idx[i] * cols + j] += self.grad[i * cols + j];
                          });
}

template <typename T>
Tensor<T> interleave_rows(const Tensor<T>& rows, const Tensor<T>& fill, std::span<const long> source) {
    require_rank2(rows.shape(), "interleave_rows");
    const std::size_t cols = rows.dim(1);
    if (fill.size() != cols)
        throw DimensionError("interleave_rows: fill row has " + std::to_string(fill.size()) + " values, expected " +
                             std::to_string(cols));
    std::vector<long> src(source.begin(), source.end());
    std::vector<T> out(src.size() * cols);
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i] >= static_cast<long>(rows.dim(0)))
            throw DimensionError("interleave_rows: source row " + std::to_string(src[i]) + " out of range");
        const T* from = src[i] >= 0 ? rows.data().data() + static_cast<std::size_t>(src[i]) * cols : fill.data().data();
        std::copy_n(from, cols, out.begin() + static_cast<long>(i * cols));
    }
    return make_result<T>(Shape{src.size(), cols}, std::move(out), "interleave_rows",
                          {rows.node_ptr(), fill.node_ptr()}, [src, cols](Node<T>& self) {
                              auto& pr = self.parents[0];
                              auto& pf = self.parents[1];
                              for (std::size_t i = 0; i < src.size(); ++i) {
                                  auto& target = src[i] >= 0 ? pr : pf;
                                  if (!target->requires_grad) continue;
                                  T* g = target->grad_buffer() + (src[i] >= 0 ? static_cast<std::size_t>(src[i]) * cols : 0);
                                  for (std::size_t j = 0; j < cols; ++j) g[j] += self.grad[i * cols + j];
                              }
                          });
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& a, std::span<const std::size_t> group, std::size_t n_groups) {
    require_rank2(a.shape(), "segment_mean");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (group.size() != rows) throw DimensionError("segment_mean: one group id per row required");
    std::vector<std::size_t> gid(group.begin(), group.end());
    std::vector<T> count(n_groups, T(0));
    for (std::size_t g : gid) {
        if (g >= n_groups) throw DimensionError("segment_mean: group id out of range");
        count[g] += T(1);
    }
    for (std::size_t g = 0; g < n_groups; ++g)
        if (count[g] == T(0)) throw DimensionError("segment_mean: group " + std::to_string(g) + " is empty");
    std::vector<T> out(n_groups * cols, T(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[gid[r] * cols + j] += a.data()[r * cols + j];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= count[i / cols];
    return make_result<T>(Shape{n_groups, cols}, std::move(out), "segment_mean", {a.node_ptr()},
                          [gid, count, cols](Node<T>& self) {
                              T* g = self.parents[0]->grad_buffer();
                              for (std::size_t r = 0; r < gid.size(); ++r)
                                  for (std::size_t j = 0; j < cols; ++j)
                                      g[r * cols + j] += self.grad[gid[r] * cols + j] / count[gid[r]];
                          });
}

// ---- instantiations --------------------------------------------------------

#define CMMIX_INSTANTIATE(T)                                                                              \
    template struct Node<T>;                                                                              \
    template class Tensor<T>;                                                                             \
    template class Tape<T>;                                                                               \
    template void backward(const Tensor<T>&);                                                             \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> scale(const Tensor<T>&, T);                                                        \
    template Tensor<T> gelu(const Tensor<T>&);                                                            \
    template Tensor<T> exp(const Tensor<T>&);                                                             \
    template Tensor<T> log(const Tensor<T>&);                                                             \
    template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> sum(const Tensor<T>&);                                                             \
    template Tensor<T> mean(const Tensor<T>&);                                                            \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> transpose(const Tensor<T>&);                                                       \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                            \
    template Tensor<T> log_softmax(const Tensor<T>&);                                                     \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
    template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                               \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
    template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                            \
    template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                        \
    template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                        \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                       \
    template Tensor<T> interleave_rows(const Tensor<T>&, const Tensor<T>&, std::span<const long>);        \
    template Tensor<T> segment_mean(const Tensor<T>&, std::span<const std::size_t>, std::size_t);

CMMIX_INSTANTIATE(float)
CMMIX_INSTANTIATE(double)

#undef CMMIX_INSTANTIATE

}  // namespace cmmix::tensor
