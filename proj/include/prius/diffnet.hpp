#ifndef PRIUS_DIFFNET_HPP
#define PRIUS_DIFFNET_HPP

// A deliberately small reverse-mode differentiation core plus the encoder-decoder
// evidence network built on it. Tensors are shared handles onto graph nodes; a node
// remembers its parents and a closure that pushes its gradient back to them.

#include <Eigen/Core>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "prius/grid.hpp"

namespace prius::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor make(Shape shape, std::vector<double> values, bool requires_grad = false) {
        for (int d : shape)
            if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive: " + shape_string(shape));
        if (values.size() != numel(shape))
            throw std::invalid_argument("value count " + std::to_string(values.size()) + " does not match shape " +
                                        shape_string(shape));
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }
    static Tensor constant(Shape shape, std::vector<double> values) { return make(std::move(shape), std::move(values)); }
    static Tensor parameter(Shape shape, std::vector<double> values) {
        return make(std::move(shape), std::move(values), true);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel(shape);
        return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<double> values() { return node_->value; }
    std::span<const double> values() const { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    double item() const {
        if (size() != 1) throw std::logic_error("item() on a tensor with " + std::to_string(size()) + " elements");
        return node_->value[0];
    }

    /// Same values, cut off from the graph.
    Tensor detach() const { return constant(shape(), node_->value); }

    const std::shared_ptr<Node>& node() const noexcept { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, std::function<void(Node&)>);

    std::shared_ptr<Node> node_;
};

/// Creates an op output. The backward closure is kept only when some input needs gradients.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    for (const auto& t : inputs) node->requires_grad = node->requires_grad || t.requires_grad();
    if (node->requires_grad) {
        for (auto& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

namespace detail {

inline void topo_sort(const std::shared_ptr<Node>& root, std::vector<Node*>& order,
                      std::unordered_set<const Node*>& seen) {
    // iterative post-order DFS
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

/// Reverse sweep from a scalar. Returns d loss / d param for each requested parameter,
/// zeros for parameters the loss does not reach.
inline std::vector<std::vector<double>> backward(const Tensor& loss, std::span<const Tensor> params = {}) {
    if (loss.size() != 1) throw std::invalid_argument("backward needs a scalar loss, got " + shape_string(loss.shape()));
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    if (!loss.requires_grad()) {
        for (const auto& p : params) out.emplace_back(p.size(), 0.0);
        return out;
    }
    std::vector<Node*> order;
    std::unordered_set<const Node*> seen;
    detail::topo_sort(loss.node(), order, seen);
    for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
    for (const auto& p : params) {
        if (seen.count(p.node().get()))
            out.push_back(p.node()->grad);
        else
            out.emplace_back(p.size(), 0.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(v), {a, b}, [an, bn](Node& self) {
        for (Node* p : {an.get(), bn.get()})
            if (p->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(v), {a, b}, [an, bn](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (an->requires_grad) an->grad[i] += self.grad[i];
            if (bn->requires_grad) bn->grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(v), {a, b}, [an, bn](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (an->requires_grad) an->grad[i] += self.grad[i] * bn->value[i];
            if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double k) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = k * a.values()[i];
    auto an = a.node();
    return make_result(a.shape(), std::move(v), {a}, [an, k](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += k * self.grad[i];
    });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor relu(const Tensor& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, a.values()[i]);
    auto an = a.node();
    return make_result(a.shape(), std::move(v), {a}, [an](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
    });
}

/// log(1 + exp(x)), evaluated without overflow.
inline double softplus_value(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Tensor softplus(const Tensor& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = softplus_value(a.values()[i]);
    auto an = a.node();
    return make_result(a.shape(), std::move(v), {a}, [an](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = an->value[i];
            const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            an->grad[i] += self.grad[i] * sig;
        }
    });
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto an = a.node();
    return make_result({1}, {s}, {a}, [an](Node& self) {
        for (double& g : an->grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Picks flat elements; repeated indices accumulate their gradients.
inline Tensor gather(const Tensor& a, std::vector<std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("gather needs at least one index");
    std::vector<double> v(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= a.size()) throw std::out_of_range("gather index out of range");
        v[i] = a.values()[indices[i]];
    }
    auto an = a.node();
    return make_result({static_cast<int>(indices.size())}, std::move(v), {a},
                       [an, idx = std::move(indices)](Node& self) {
                           for (std::size_t i = 0; i < idx.size(); ++i) an->grad[idx[i]] += self.grad[i];
                       });
}

/// A scalar whose value and input gradients were computed outside the graph.
inline Tensor custom_scalar(std::vector<Tensor> inputs, double value, std::vector<std::vector<double>> input_grads) {
    if (inputs.size() != input_grads.size()) throw std::invalid_argument("custom_scalar: one gradient per input");
    for (std::size_t i = 0; i < inputs.size(); ++i)
        if (inputs[i].size() != input_grads[i].size()) throw std::invalid_argument("custom_scalar: gradient size mismatch");
    std::vector<std::shared_ptr<Node>> nodes;
    for (auto& t : inputs) nodes.push_back(t.node());
    return make_result({1}, {value}, std::move(inputs),
                       [nodes = std::move(nodes), grads = std::move(input_grads)](Node& self) {
                           const double up = self.grad[0];
                           for (std::size_t i = 0; i < nodes.size(); ++i) {
                               if (!nodes[i]->requires_grad) continue;
                               for (std::size_t k = 0; k < grads[i].size(); ++k) nodes[i]->grad[k] += up * grads[i][k];
                           }
                       });
}

// ---------------------------------------------------------------------------
// Image ops on [N, C, H, W]
// ---------------------------------------------------------------------------

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

namespace detail {

inline void require_rank4(const Tensor& t, const char* op) {
    if (t.shape().size() != 4) throw std::invalid_argument(std::string(op) + " expects [N,C,H,W], got " + shape_string(t.shape()));
}

// source pixel of tap (ky, kx) for every output pixel under replicate padding
inline std::vector<int> conv_taps(int h, int w) {
    std::vector<int> taps(static_cast<std::size_t>(9) * h * w);
    for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx)
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) {
                    const int sr = std::clamp(r + ky - 1, 0, h - 1);
                    const int sc = std::clamp(c + kx - 1, 0, w - 1);
                    taps[(static_cast<std::size_t>(ky * 3 + kx) * h + r) * w + c] = sr * w + sc;
                }
    return taps;
}

inline void im2col(const double* x, int cin, int hw, const std::vector<int>& taps, double* cols) {
    for (int ci = 0; ci < cin; ++ci) {
        const double* plane = x + static_cast<std::size_t>(ci) * hw;
        for (int t = 0; t < 9; ++t) {
            double* row = cols + (static_cast<std::size_t>(ci) * 9 + t) * hw;
            const int* tap = taps.data() + static_cast<std::size_t>(t) * hw;
            for (int p = 0; p < hw; ++p) row[p] = plane[tap[p]];
        }
    }
}

inline void col2im(const double* cols, int cin, int hw, const std::vector<int>& taps, double* dx) {
    for (int ci = 0; ci < cin; ++ci) {
        double* plane = dx + static_cast<std::size_t>(ci) * hw;
        for (int t = 0; t < 9; ++t) {
            const double* row = cols + (static_cast<std::size_t>(ci) * 9 + t) * hw;
            const int* tap = taps.data() + static_cast<std::size_t>(t) * hw;
            for (int p = 0; p < hw; ++p) plane[tap[p]] += row[p];
        }
    }
}

}  // namespace detail

/// 3x3 convolution, stride 1, replicate padding. weight [Cout, Cin, 3, 3], bias [Cout].
inline Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank4(x, "conv3x3");
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (weight.shape() != Shape{weight.dim(0), cin, 3, 3})
        throw std::invalid_argument("conv3x3: weight " + shape_string(weight.shape()) + " does not fit input " +
                                    shape_string(x.shape()));
    const int cout = weight.dim(0);
    if (bias.shape() != Shape{cout}) throw std::invalid_argument("conv3x3: bias must be [Cout]");
    const int hw = h * w;
    const int k = cin * 9;

    auto taps = std::make_shared<std::vector<int>>(detail::conv_taps(h, w));
    std::vector<double> out(static_cast<std::size_t>(n) * cout * hw);
    std::vector<double> cols(static_cast<std::size_t>(k) * hw);
    ConstMapMatrix wm(weight.values().data(), cout, k);
    for (int b = 0; b < n; ++b) {
        detail::im2col(x.values().data() + static_cast<std::size_t>(b) * cin * hw, cin, hw, *taps, cols.data());
        MapMatrix om(out.data() + static_cast<std::size_t>(b) * cout * hw, cout, hw);
        om.noalias() = wm * ConstMapMatrix(cols.data(), k, hw);
        for (int co = 0; co < cout; ++co) om.row(co).array() += bias.values()[co];
    }

    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return make_result({n, cout, h, w}, std::move(out), {x, weight, bias},
                       [xn, wn, bn, taps, n, cin, cout, hw, k](Node& self) {
                           std::vector<double> cols(static_cast<std::size_t>(k) * hw);
                           ConstMapMatrix wm(wn->value.data(), cout, k);
                           for (int b = 0; b < n; ++b) {
                               ConstMapMatrix gm(self.grad.data() + static_cast<std::size_t>(b) * cout * hw, cout, hw);
                               if (bn->requires_grad)
                                   for (int co = 0; co < cout; ++co) bn->grad[co] += gm.row(co).sum();
                               if (wn->requires_grad) {
                                   detail::im2col(xn->value.data() + static_cast<std::size_t>(b) * cin * hw, cin, hw,
                                                  *taps, cols.data());
                                   MapMatrix(wn->grad.data(), cout, k).noalias() +=
                                       gm * ConstMapMatrix(cols.data(), k, hw).transpose();
                               }
                               if (xn->requires_grad) {
                                   MapMatrix(cols.data(), k, hw).noalias() = wm.transpose() * gm;
                                   detail::col2im(cols.data(), cin, hw, *taps,
                                                  xn->grad.data() + static_cast<std::size_t>(b) * cin * hw);
                               }
                           }
                       });
}

/// 2x2 max pooling with stride 2 (first maximum wins ties).
inline Tensor maxpool2(const Tensor& x) {
    detail::require_rank4(x, "maxpool2");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 || w % 2) throw std::invalid_argument("maxpool2 needs even spatial dimensions, got " + shape_string(x.shape()));
    const int oh = h / 2, ow = w / 2;
    std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const auto xv = x.values();
    std::size_t o = 0;
    for (int plane = 0; plane < n * c; ++plane) {
        const std::size_t base = static_cast<std::size_t>(plane) * h * w;
        for (int r = 0; r < oh; ++r)
            for (int col = 0; col < ow; ++col, ++o) {
                std::size_t best = base + static_cast<std::size_t>(2 * r) * w + 2 * col;
                for (std::size_t cand : {best + 1, best + w, best + w + 1})
                    if (xv[cand] > xv[best]) best = cand;
                out[o] = xv[best];
                (*argmax)[o] = best;
            }
    }
    auto xn = x.node();
    return make_result({n, c, oh, ow}, std::move(out), {x}, [xn, argmax](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[(*argmax)[i]] += self.grad[i];
    });
}

/// 2x nearest-neighbour upsampling.
inline Tensor upsample2(const Tensor& x) {
    detail::require_rank4(x, "upsample2");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = 2 * h, ow = 2 * w;
    std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
    const auto xv = x.values();
    for (int plane = 0; plane < n * c; ++plane)
        for (int r = 0; r < oh; ++r)
            for (int col = 0; col < ow; ++col)
                out[(static_cast<std::size_t>(plane) * oh + r) * ow + col] =
                    xv[(static_cast<std::size_t>(plane) * h + r / 2) * w + col / 2];
    auto xn = x.node();
    return make_result({n, c, oh, ow}, std::move(out), {x}, [xn, n, c, h, w](Node& self) {
        const int oh = 2 * h, ow = 2 * w;
        for (int plane = 0; plane < n * c; ++plane)
            for (int r = 0; r < oh; ++r)
                for (int col = 0; col < ow; ++col)
                    xn->grad[(static_cast<std::size_t>(plane) * h + r / 2) * w + col / 2] +=
                        self.grad[(static_cast<std::size_t>(plane) * oh + r) * ow + col];
    });
}

/// Concatenates along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require_rank4(a, "concat_channels");
    detail::require_rank4(b, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n) * (ca + cb) * hw);
    for (int s = 0; s < n; ++s) {
        auto ab = a.values().begin() + static_cast<std::ptrdiff_t>(s * ca * hw);
        auto bb = b.values().begin() + static_cast<std::ptrdiff_t>(s * cb * hw);
        out.insert(out.end(), ab, ab + static_cast<std::ptrdiff_t>(ca * hw));
        out.insert(out.end(), bb, bb + static_cast<std::ptrdiff_t>(cb * hw));
    }
    auto an = a.node(), bn = b.node();
    return make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b}, [an, bn, n, ca, cb, hw](Node& self) {
        for (int s = 0; s < n; ++s) {
            const double* g = self.grad.data() + s * (ca + cb) * hw;
            if (an->requires_grad)
                for (std::size_t i = 0; i < ca * hw; ++i) an->grad[s * ca * hw + i] += g[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < cb * hw; ++i) bn->grad[s * cb * hw + i] += g[ca * hw + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Evidence network
// ---------------------------------------------------------------------------

struct NetworkConfig {
    int in_channels = 1;
    int classes = 3;
    int levels = 3;
    int base_width = 8;

    int spatial_divisor() const { return 1 << (levels - 1); }

    void validate() const {
        if (in_channels != 1) throw std::invalid_argument("the evidence network takes single-channel images");
        if (classes < 2) throw std::invalid_argument("class count must be at least 2");
        if (levels < 1 || levels > 8) throw std::invalid_argument("encoder levels must lie in [1, 8]");
        if (base_width < 1) throw std::invalid_argument("base width must be positive");
    }

    void check_input(int height, int width) const {
        const int d = spatial_divisor();
        if (height % d || width % d)
            throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                        " is not divisible by 2^(levels-1) = " + std::to_string(d));
    }
};

/// U-shaped encoder-decoder. Parameters are stored as (weight, bias) pairs in order:
/// encoder convs (two per level), decoder convs (two per level above the bottom), head conv.
class EvidenceNet {
public:
    EvidenceNet() = default;

    /// He-uniform weights from a seeded stream, zero biases.
    static EvidenceNet initialized(const NetworkConfig& config, std::uint64_t seed) {
        EvidenceNet net(config);
        std::mt19937_64 rng(seed);
        for (std::size_t i = 0; i < net.params_.size(); i += 2) {
            auto& wt = net.params_[i];
            const double fan_in = static_cast<double>(wt.dim(1)) * 9.0;
            const double bound = std::sqrt(6.0 / fan_in);
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& v : wt.values()) v = dist(rng);
        }
        return net;
    }

    static EvidenceNet zeros(const NetworkConfig& config) { return EvidenceNet(config); }

    /// Rebuilds a network around stored tensors, inferring the configuration from their shapes.
    static EvidenceNet from_tensors(std::vector<Tensor> tensors) {
        if (tensors.size() < 2 || tensors.size() % 2) throw std::invalid_argument("parameter list must hold weight/bias pairs");
        const int convs = static_cast<int>(tensors.size() / 2);
        if ((convs + 1) % 4) throw std::invalid_argument("parameter count does not match any encoder depth");
        NetworkConfig cfg;
        cfg.levels = (convs + 1) / 4;
        cfg.base_width = tensors[0].dim(0);
        cfg.in_channels = tensors[0].dim(1);
        cfg.classes = tensors[tensors.size() - 2].dim(0);
        EvidenceNet net(cfg);
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (tensors[i].shape() != net.params_[i].shape())
                throw std::invalid_argument("parameter " + std::to_string(i) + " has shape " +
                                            shape_string(tensors[i].shape()) + ", expected " +
                                            shape_string(net.params_[i].shape()));
            std::copy(tensors[i].values().begin(), tensors[i].values().end(), net.params_[i].values().begin());
        }
        return net;
    }

    /// Copy whose parameters are constants, so forward passes build no graph.
    EvidenceNet frozen() const {
        EvidenceNet net(config_);
        for (std::size_t i = 0; i < params_.size(); ++i) net.params_[i] = params_[i].detach();
        return net;
    }

    const NetworkConfig& config() const noexcept { return config_; }
    std::vector<Tensor>& parameters() noexcept { return params_; }
    const std::vector<Tensor>& parameters() const noexcept { return params_; }

    /// input [N, 1, H, W] -> non-negative evidence [N, C, H, W]
    Tensor forward(const Tensor& input) const {
        detail::require_rank4(input, "EvidenceNet::forward");
        if (input.dim(1) != config_.in_channels) throw std::invalid_argument("input channel count mismatch");
        config_.check_input(input.dim(2), input.dim(3));
        std::size_t p = 0;
        auto conv_relu = [&](const Tensor& x) {
            Tensor y = relu(conv3x3(x, params_[p], params_[p + 1]));
            p += 2;
            return y;
        };
        std::vector<Tensor> skips;
        Tensor x = input;
        for (int l = 0; l < config_.levels; ++l) {
            x = conv_relu(conv_relu(x));
            if (l + 1 < config_.levels) {
                skips.push_back(x);
                x = maxpool2(x);
            }
        }
        for (int l = config_.levels - 2; l >= 0; --l) {
            x = concat_channels(skips[static_cast<std::size_t>(l)], upsample2(x));
            x = conv_relu(conv_relu(x));
        }
        return softplus(conv3x3(x, params_[p], params_[p + 1]));
    }

    /// Batches single-channel images into one [N, 1, H, W] tensor.
    static Tensor batch(std::span<const ScalarGrid> images) {
        if (images.empty()) throw std::invalid_argument("empty batch");
        const int h = images[0].height(), w = images[0].width();
        std::vector<double> v;
        v.reserve(images.size() * images[0].size());
        for (const auto& img : images) {
            if (img.height() != h || img.width() != w) throw std::invalid_argument("batch images differ in shape");
            v.insert(v.end(), img.values().begin(), img.values().end());
        }
        return Tensor::constant({static_cast<int>(images.size()), 1, h, w}, std::move(v));
    }

private:
    explicit EvidenceNet(const NetworkConfig& config) : config_(config) {
        config_.validate();
        auto add_conv = [this](int cin, int cout) {
            params_.push_back(Tensor::zeros({cout, cin, 3, 3}, true));
            params_.push_back(Tensor::zeros({cout}, true));
        };
        auto width = [&](int l) { return config_.base_width << l; };
        int cin = config_.in_channels;
        for (int l = 0; l < config_.levels; ++l) {
            add_conv(cin, width(l));
            add_conv(width(l), width(l));
            cin = width(l);
        }
        for (int l = config_.levels - 2; l >= 0; --l) {
            add_conv(width(l) + width(l + 1), width(l));
            add_conv(width(l), width(l));
        }
        add_conv(width(0), config_.classes);
    }

    NetworkConfig config_;
    std::vector<Tensor> params_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    void step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads) {
        if (params.size() != grads.size()) throw std::invalid_argument("Adam: one gradient per parameter");
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
        }
        if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed between steps");
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, t_);
        const double c2 = 1.0 - std::pow(config_.beta2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto values = params[i].values();
            if (grads[i].size() != values.size()) throw std::invalid_argument("Adam: gradient shape mismatch");
            for (std::size_t k = 0; k < values.size(); ++k) {
                const double g = grads[i][k];
                m_[i][k] = config_.beta1 * m_[i][k] + (1.0 - config_.beta1) * g;
                v_[i][k] = config_.beta2 * v_[i][k] + (1.0 - config_.beta2) * g * g;
                const double m_hat = m_[i][k] / c1;
                const double v_hat = v_[i][k] / c2;
                values[k] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
            }
        }
    }

    int steps() const noexcept { return t_; }

private:
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    int t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "PRNW" | u32 count | per tensor (u32 rank, u32 dims..., f64 payload) | u32 CRC32
// ---------------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::vector<unsigned char> encode_checkpoint(std::span<const Tensor> tensors) {
    std::vector<unsigned char> out{'P', 'R', 'N', 'W'};
    auto put_u32 = [&out](std::uint32_t v) {
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFFu));
    };
    put_u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put_u32(static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) put_u32(static_cast<std::uint32_t>(d));
        for (double v : t.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFFu));
        }
    }
    const auto crc = static_cast<std::uint32_t>(crc32(0L, out.data(), static_cast<uInt>(out.size())));
    put_u32(crc);
    return out;
}

inline std::vector<Tensor> decode_checkpoint(std::span<const unsigned char> bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "PRNW", 4) != 0) throw CheckpointError("not a PRNW checkpoint");
    auto get_u32 = [&bytes](std::size_t at) {
        if (at + 4 > bytes.size()) throw CheckpointError("truncated checkpoint at byte " + std::to_string(at));
        return prius::detail::get_u32(bytes.data() + at);
    };
    const std::size_t body = bytes.size() - 4;
    const auto stored_crc = get_u32(body);
    const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
    if (crc != stored_crc) throw CheckpointError("checkpoint CRC mismatch");
    std::size_t at = 4;
    const std::uint32_t count = get_u32(at);
    at += 4;
    std::vector<Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t rank = get_u32(at);
        at += 4;
        if (rank == 0 || rank > 8) throw CheckpointError("implausible tensor rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const std::uint32_t d = get_u32(at);
            at += 4;
            if (d == 0 || d > (1u << 24)) throw CheckpointError("implausible tensor dimension");
            shape.push_back(static_cast<int>(d));
            n *= d;
        }
        if (at + n * 8 > body) throw CheckpointError("truncated tensor payload");
        std::vector<double> values(n);
        for (std::uint64_t k = 0; k < n; ++k, at += 8) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[at + b]} << (8 * b);
            std::memcpy(&values[k], &bits, sizeof bits);
        }
        out.push_back(Tensor::parameter(std::move(shape), std::move(values)));
    }
    if (at != body) throw CheckpointError("trailing bytes before checksum");
    return out;
}

inline void save_checkpoint(std::span<const Tensor> tensors, const std::filesystem::path& path) {
    prius::detail::write_file(path, encode_checkpoint(tensors));
}

inline std::vector<Tensor> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(prius::detail::read_file(path));
}

}  // namespace prius::nn

#endif  // PRIUS_DIFFNET_HPP
