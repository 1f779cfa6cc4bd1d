#pragma once

// Dense n-dimensional tensors with reverse-mode differentiation, the layer
// primitives the U-Nets are built from, and plain SGD with a polynomial
// learning-rate decay.
//
// Layout conventions: activations are (batch, channels, spatial...) with one
// or two (2D nets) or three (3D nets) spatial extents, row-major. Convolution
// weights are (out_channels, in_channels, kernel...).
//
// Every op is deterministic. Kernels that are parallelized with OpenMP split
// work only across independent output elements, so each element is summed in
// the same order regardless of thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "l2s/error.hpp"

namespace l2s {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Applies the L2S_THREADS environment variable to the OpenMP runtime.
inline void configure_threads_from_env() {
#ifdef _OPENMP
    if (const char* env = std::getenv("L2S_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
#endif
}

namespace detail {
inline bool& grad_disabled() {
    thread_local bool disabled = false;
    return disabled;
}
}  // namespace detail

/// While alive, ops on this thread record no graph (inference mode).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_disabled()) { detail::grad_disabled() = true; }
    ~NoGradGuard() { detail::grad_disabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient reaches this node
    bool track = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(TensorNode&)> backward;

    std::vector<T>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

/// Shared handle to a node of the computation graph. Copies alias the same
/// storage; ops never modify their inputs.
template <class T>
class Tensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool track = false) : node_(std::make_shared<Node>()) {
        if (data.size() != l2s::numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + to_string(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->track = track;
    }

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool track = false) {
        std::vector<T> d(l2s::numel(shape), T(0));
        return Tensor(std::move(shape), std::move(d), track);
    }

    static Tensor full(Shape shape, T value, bool track = false) {
        std::vector<T> d(l2s::numel(shape), value);
        return Tensor(std::move(shape), std::move(d), track);
    }

    static Tensor scalar(T value, bool track = false) { return Tensor(Shape{1}, {value}, track); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    /// Direct write access for parameter updates and test harnesses.
    std::span<T> data_mut() { return node_->data; }
    T operator[](std::size_t i) const { return node_->data[i]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    bool tracked() const { return node_ && node_->track; }
    bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad_mut() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
    void clear_grad() {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
    }

    /// Copy of the values with no graph attached.
    Tensor detach(bool track = false) const { return Tensor(shape(), node_->data, track); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t, bool track = false) {
    std::vector<To> d(t.data().begin(), t.data().end());
    return Tensor<To>(t.shape(), std::move(d), track);
}

/// Builds the result node of an op. The backward closure and parent links are
/// kept only when some input is tracked and grad mode is on.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(TensorNode<T>&)> backward, const char* op) {
    Tensor<T> out(std::move(shape), std::move(data));
    if (detail::grad_disabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.tracked();
    if (!any) return out;
    auto& node = *out.node();
    node.track = true;
    node.op = op;
    for (const auto& in : inputs) node.parents.push_back(in.node());
    node.backward = std::move(backward);
    return out;
}

/// Populates grads of every tracked tensor reachable from `loss`.
/// Leaf gradients accumulate across calls; call zero_grad()/clear_grad() to reset.
template <class T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " +
                         (loss.defined() ? to_string(loss.shape()) : std::string("(undefined)")));
    }
    if (!loss.tracked()) throw ValueError("backward: loss does not depend on any tracked tensor");

    using Node = TensorNode<T>;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->track && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        if (n->backward) n->grad.assign(n->data.size(), T(0));
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward) continue;
        n->backward(*n);
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        for (auto& p : self.parents) {
            if (!p->track) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    }, "add");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // Read both inputs before writing: a and b may be the same node.
        std::vector<T> ga(self.grad.size()), gb(self.grad.size());
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] = self.grad[i] * pb.data[i];
            gb[i] = self.grad[i] * pa.data[i];
        }
        if (pa.track) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += ga[i];
        }
        if (pb.track) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb[i];
        }
    }, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return make_result<T>(a.shape(), std::move(out), {a}, [s](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    }, "scale");
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (T v : a.data()) acc += v;
    return make_result<T>(Shape{1}, {static_cast<T>(acc)}, {a}, [](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    }, "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

enum class Pointwise { relu, sigmoid };

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (p.data[i] > T(0)) g[i] += self.grad[i];
        }
    }, "relu");
}

/// Logistic sigmoid, kept strictly inside (0, 1) even where the exact value
/// rounds to an endpoint.
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    constexpr T lo = std::numeric_limits<T>::min();
    constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x[i];
        T s;
        if (v >= T(0)) {
            s = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            s = e / (T(1) + e);
        }
        out[i] = std::clamp(s, lo, hi);
    }
    return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = self.data[i];
            g[i] += self.grad[i] * s * (T(1) - s);
        }
    }, "sigmoid");
}

template <class T>
Tensor<T> pointwise(const Tensor<T>& x, Pointwise kind) {
    return kind == Pointwise::relu ? relu(x) : sigmoid(x);
}

/// Concatenates along the channel axis (axis 1).
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
        !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2)) {
        throw ShapeError("concat_channels: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::size_t spatial = a.numel() / (n * ca);
    Shape shape = a.shape();
    shape[1] = ca + cb;
    std::vector<T> out(numel(shape));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().begin() + i * ca * spatial, ca * spatial, out.begin() + i * (ca + cb) * spatial);
        std::copy_n(b.data().begin() + i * cb * spatial, cb * spatial,
                    out.begin() + (i * (ca + cb) + ca) * spatial);
    }
    return make_result<T>(std::move(shape), std::move(out), {a, b},
                          [n, ca, cb, spatial](TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < n; ++i) {
            const T* src = self.grad.data() + i * (ca + cb) * spatial;
            if (pa.track) {
                T* dst = pa.grad_buffer().data() + i * ca * spatial;
                for (std::size_t k = 0; k < ca * spatial; ++k) dst[k] += src[k];
            }
            if (pb.track) {
                T* dst = pb.grad_buffer().data() + i * cb * spatial;
                for (std::size_t k = 0; k < cb * spatial; ++k) dst[k] += src[ca * spatial + k];
            }
        }
    }, "concat");
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

// 2D problems run as 3D ones with unit depth. Planes are copied into buffers
// with a zero halo of kernel/2 on each side; in that layout every kernel tap
// is a constant linear offset, so each tap becomes one contiguous
// multiply-add over the span [first, last] of interior positions. Halo
// entries inside the span receive garbage in the output buffer and are
// dropped when the interior is extracted.
struct ConvGeometry {
    std::size_t n, c, o, d, h, w, kd, kh, kw;
    std::size_t pd, ph, pw;  // padded extents

    std::size_t plane() const { return d * h * w; }
    std::size_t padded() const { return pd * ph * pw; }
    std::size_t taps() const { return kd * kh * kw; }
    std::size_t first() const { return ((kd / 2) * ph + kh / 2) * pw + kw / 2; }
    std::size_t span() const { return ((d - 1) * ph + (h - 1)) * pw + (w - 1) + 1; }
    long offset(std::size_t a, std::size_t b, std::size_t c) const {
        return (static_cast<long>(a) - static_cast<long>(kd / 2)) * static_cast<long>(ph * pw) +
               (static_cast<long>(b) - static_cast<long>(kh / 2)) * static_cast<long>(pw) +
               (static_cast<long>(c) - static_cast<long>(kw / 2));
    }

    template <class T>
    void pad(const T* src, T* dst) const {
        std::fill(dst, dst + padded(), T(0));
        for (std::size_t z = 0; z < d; ++z)
            for (std::size_t y = 0; y < h; ++y)
                std::copy_n(src + (z * h + y) * w, w, dst + ((z + kd / 2) * ph + y + kh / 2) * pw + kw / 2);
    }

    template <class T>
    void unpad(const T* src, T* dst) const {
        for (std::size_t z = 0; z < d; ++z)
            for (std::size_t y = 0; y < h; ++y)
                std::copy_n(src + ((z + kd / 2) * ph + y + kh / 2) * pw + kw / 2, w, dst + (z * h + y) * w);
    }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k) {
    const std::size_t spatial = k.size() - 2;
    ConvGeometry g{};
    g.n = x[0];
    g.c = x[1];
    g.o = k[0];
    g.d = spatial == 3 ? x[2] : 1;
    g.h = x[x.size() - 2];
    g.w = x[x.size() - 1];
    g.kd = spatial == 3 ? k[2] : 1;
    g.kh = k[k.size() - 2];
    g.kw = k[k.size() - 1];
    g.pd = g.d + 2 * (g.kd / 2);
    g.ph = g.h + 2 * (g.kh / 2);
    g.pw = g.w + 2 * (g.kw / 2);
    return g;
}

template <class T>
std::vector<T> pad_planes(const ConvGeometry& g, const T* src, std::size_t planes) {
    std::vector<T> out(planes * g.padded());
#pragma omp parallel for schedule(static)
    for (long p = 0; p < static_cast<long>(planes); ++p) g.pad(src + p * g.plane(), out.data() + p * g.padded());
    return out;
}

inline constexpr std::size_t kConvChunk = 1024;

// B output planes at once: dst[k][q] = bias[k] + sum_c sum_t w(k, c, t) * src_c[q + offset_t]
// over the interior span, in chunks that keep the B destination rows in L1.
// Each output value is accumulated in (c, t) order whatever the chunking.
template <class T, int B>
void conv_accumulate(const ConvGeometry& g, const T* src, std::size_t in_ch, const T* const* wrow,
                     const long* offsets, std::size_t K, const T* bias, T* const* dst) {
    const std::size_t PP = g.padded(), begin = g.first(), end = g.first() + g.span();
    for (std::size_t q0 = begin; q0 < end; q0 += kConvChunk) {
        const std::size_t len = std::min(kConvChunk, end - q0);
        for (int k = 0; k < B; ++k) std::fill(dst[k] + q0, dst[k] + q0 + len, bias ? bias[k] : T(0));
        for (std::size_t c = 0; c < in_ch; ++c) {
            const T* base = src + c * PP + q0;
            for (std::size_t t = 0; t < K; ++t) {
                const T* s = base + offsets[t];
                T wv[B];
                T* d[B];
                for (int k = 0; k < B; ++k) {
                    wv[k] = wrow[k][c * K + t];
                    d[k] = dst[k] + q0;
                }
#pragma omp simd
                for (std::size_t i = 0; i < len; ++i) {
                    const T v = s[i];
                    for (int k = 0; k < B; ++k) d[k][i] += wv[k] * v;
                }
            }
        }
    }
}

// Runs conv_accumulate over all output planes of one sample, B at a time.
// `weights` is laid out (out, in, taps); `out` receives unpadded planes.
template <class T>
void conv_sample(const ConvGeometry& g, const T* src, std::size_t in_ch, std::size_t out_ch, const T* weights,
                 const long* offsets, const T* bias, std::vector<T>& scratch, T* out) {
    constexpr int B = 4;
    const std::size_t PP = g.padded(), K = g.taps();
    scratch.resize(B * PP);
    for (std::size_t o0 = 0; o0 < out_ch; o0 += B) {
        const std::size_t nb = std::min<std::size_t>(B, out_ch - o0);
        const T* wrow[B];
        T* dst[B];
        for (std::size_t k = 0; k < nb; ++k) {
            wrow[k] = weights + (o0 + k) * in_ch * K;
            dst[k] = scratch.data() + k * PP;
        }
        const T* bb = bias ? bias + o0 : nullptr;
        switch (nb) {
            case 4: conv_accumulate<T, 4>(g, src, in_ch, wrow, offsets, K, bb, dst); break;
            case 3: conv_accumulate<T, 3>(g, src, in_ch, wrow, offsets, K, bb, dst); break;
            case 2: conv_accumulate<T, 2>(g, src, in_ch, wrow, offsets, K, bb, dst); break;
            default: conv_accumulate<T, 1>(g, src, in_ch, wrow, offsets, K, bb, dst); break;
        }
        for (std::size_t k = 0; k < nb; ++k) g.unpad(dst[k], out + (o0 + k) * g.plane());
    }
}

}  // namespace detail

/// Stride-1 convolution with zero "same" padding; rank (2D or 3D) follows the
/// kernel. `b` may be undefined for a bias-free convolution.
template <class T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    const Shape& xs = x.shape();
    const Shape& ks = w.shape();
    if (ks.size() != 4 && ks.size() != 5) {
        throw ShapeError("conv: kernel must be (out, in, k...) with 2 or 3 spatial axes, got " + to_string(ks));
    }
    if (xs.size() != ks.size()) {
        throw ShapeError("conv: input " + to_string(xs) + " and kernel " + to_string(ks) + " differ in rank");
    }
    for (std::size_t v : xs) {
        if (v == 0) throw ShapeError("conv: zero-sized input dimension in " + to_string(xs));
    }
    for (std::size_t v : ks) {
        if (v == 0) throw ShapeError("conv: zero-sized kernel dimension in " + to_string(ks));
    }
    if (xs[1] != ks[1]) {
        throw ShapeError("conv: input has " + std::to_string(xs[1]) + " channels, kernel expects " +
                         std::to_string(ks[1]));
    }
    for (std::size_t i = 2; i < ks.size(); ++i) {
        if (ks[i] % 2 == 0) throw ShapeError("conv: kernel extents must be odd, got " + to_string(ks));
    }
    if (b.defined() && b.numel() != ks[0]) {
        throw ShapeError("conv: bias length " + std::to_string(b.numel()) + " != out channels " +
                         std::to_string(ks[0]));
    }

    const detail::ConvGeometry g = detail::conv_geometry(xs, ks);
    const std::size_t P = g.plane(), PP = g.padded(), K = g.taps();
    const std::size_t first = g.first(), span = g.span();
    std::vector<long> offsets;
    for (std::size_t a = 0; a < g.kd; ++a)
        for (std::size_t bb = 0; bb < g.kh; ++bb)
            for (std::size_t cc = 0; cc < g.kw; ++cc) offsets.push_back(g.offset(a, bb, cc));

    Shape out_shape = xs;
    out_shape[1] = g.o;
    std::vector<T> out(g.n * g.o * P);
    {
        const std::vector<T> xp = detail::pad_planes(g, x.data().data(), g.n * g.c);
        const T* bd = b.defined() ? b.data().data() : nullptr;
        std::vector<T> scratch;
        for (std::size_t n = 0; n < g.n; ++n) {
            detail::conv_sample(g, xp.data() + n * g.c * PP, g.c, g.o, w.data().data(), offsets.data(), bd, scratch,
                                out.data() + n * g.o * P);
        }
    }

    return make_result<T>(std::move(out_shape), std::move(out), {x, w, b},
                          [g, P, PP, K, first, span, offsets = std::move(offsets)](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        TensorNode<T>* pb = self.parents[2] ? self.parents[2].get() : nullptr;
        // Output gradient with a zero halo, so halo positions contribute nothing.
        const std::vector<T> gyp = detail::pad_planes(g, self.grad.data(), g.n * g.o);

        if (px.track) {
            // Input gradient is a convolution of the output gradient with the
            // channel-transposed kernel at negated tap offsets.
            std::vector<T> wt(g.c * g.o * K);
            for (std::size_t o = 0; o < g.o; ++o)
                for (std::size_t c = 0; c < g.c; ++c)
                    for (std::size_t t = 0; t < K; ++t) wt[(c * g.o + o) * K + t] = pw.data[(o * g.c + c) * K + t];
            std::vector<long> neg(offsets.size());
            for (std::size_t t = 0; t < K; ++t) neg[t] = -offsets[t];
            std::vector<T> gin(g.c * P), scratch;
            T* gx = px.grad_buffer().data();
            for (std::size_t n = 0; n < g.n; ++n) {
                detail::conv_sample(g, gyp.data() + n * g.o * PP, g.o, g.c, wt.data(), neg.data(),
                                    static_cast<const T*>(nullptr), scratch, gin.data());
                T* dst = gx + n * g.c * P;
                for (std::size_t i = 0; i < gin.size(); ++i) dst[i] += gin[i];
            }
        }
        if (pw.track) {
            T* gw = pw.grad_buffer().data();
            const std::vector<T> xp = detail::pad_planes(g, px.data.data(), g.n * g.c);
            constexpr std::size_t CH = detail::kConvChunk;
#pragma omp parallel for schedule(static)
            for (long job = 0; job < static_cast<long>(g.o * g.c); ++job) {
                const std::size_t o = static_cast<std::size_t>(job) / g.c, c = static_cast<std::size_t>(job) % g.c;
                std::vector<T> acc(K, T(0));
                for (std::size_t n = 0; n < g.n; ++n) {
                    const T* dy = gyp.data() + (n * g.o + o) * PP;
                    const T* xs = xp.data() + (n * g.c + c) * PP;
                    for (std::size_t q0 = first; q0 < first + span; q0 += CH) {
                        const std::size_t len = std::min(CH, first + span - q0);
                        const T* __restrict dr = dy + q0;
                        for (std::size_t t = 0; t < K; ++t) {
                            const T* __restrict sr = xs + q0 + offsets[t];
                            T dot = T(0);
#pragma omp simd reduction(+ : dot)
                            for (std::size_t i = 0; i < len; ++i) dot += dr[i] * sr[i];
                            acc[t] += dot;
                        }
                    }
                }
                for (std::size_t t = 0; t < K; ++t) gw[job * K + t] += acc[t];
            }
        }
        if (pb && pb->track) {
            auto& gb = pb->grad_buffer();
            for (std::size_t o = 0; o < g.o; ++o) {
                T total = T(0);
                for (std::size_t n = 0; n < g.n; ++n) {
                    const T* dy = self.grad.data() + (n * g.o + o) * P;
                    for (std::size_t i = 0; i < P; ++i) total += dy[i];
                }
                gb[o] += total;
            }
        }
    }, "conv");
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {
inline void check_spatial(const Shape& s, const char* op) {
    if (s.size() != 4 && s.size() != 5) {
        throw ShapeError(std::string(op) + ": expected (batch, channels, spatial...) with 2 or 3 spatial axes, got " +
                         to_string(s));
    }
}
}  // namespace detail

/// Non-overlapping max pooling. Gradient goes to the first maximum in
/// row-major window order.
template <class T>
Tensor<T> pool_max(const Tensor<T>& x, std::size_t factor) {
    const Shape& s = x.shape();
    detail::check_spatial(s, "pool_max");
    if (factor < 1) throw ValueError("pool_max: factor must be >= 1");
    for (std::size_t i = 2; i < s.size(); ++i) {
        if (s[i] % factor != 0) {
            throw ShapeError("pool_max: spatial extent " + std::to_string(s[i]) + " on axis " + std::to_string(i) +
                             " is not divisible by " + std::to_string(factor));
        }
    }
    const bool three = s.size() == 5;
    const std::size_t D = three ? s[2] : 1, H = s[s.size() - 2], W = s[s.size() - 1];
    const std::size_t fd = three ? factor : 1;
    const std::size_t od = D / fd, oh = H / factor, ow = W / factor;
    const std::size_t planes = s[0] * s[1];
    Shape out_shape = s;
    for (std::size_t i = 2; i < s.size(); ++i) out_shape[i] = s[i] / factor;
    std::vector<T> out(planes * od * oh * ow);
    std::vector<std::size_t> argmax(out.size());
    const T* xd = x.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        const std::size_t base = p * D * H * W;
        for (std::size_t z = 0; z < od; ++z)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    std::size_t best = base + ((z * fd) * H + y * factor) * W + xx * factor;
                    for (std::size_t a = 0; a < fd; ++a)
                        for (std::size_t b = 0; b < factor; ++b)
                            for (std::size_t c = 0; c < factor; ++c) {
                                const std::size_t idx = base + ((z * fd + a) * H + y * factor + b) * W + xx * factor + c;
                                if (xd[idx] > xd[best]) best = idx;
                            }
                    const std::size_t o = ((p * od + z) * oh + y) * ow + xx;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
    }
    return make_result<T>(std::move(out_shape), std::move(out), {x},
                          [argmax = std::move(argmax)](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
    }, "pool_max");
}

namespace detail {

// Linear resampling of one axis, viewing the tensor as (outer, len, inner).
// Sample positions are corner-aligned: output 0 maps to input 0 and the last
// output to the last input.
template <class T>
Tensor<T> interpolate_axis(const Tensor<T>& x, std::size_t axis, std::size_t out_len) {
    const Shape& s = x.shape();
    const std::size_t in_len = s[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    std::vector<std::size_t> lo(out_len), hi(out_len);
    std::vector<T> frac(out_len);
    for (std::size_t j = 0; j < out_len; ++j) {
        const double pos = (out_len == 1 || in_len == 1)
                               ? 0.0
                               : static_cast<double>(j) * static_cast<double>(in_len - 1) / static_cast<double>(out_len - 1);
        std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
        if (i0 > in_len - 1) i0 = in_len - 1;
        lo[j] = i0;
        hi[j] = std::min(i0 + 1, in_len - 1);
        frac[j] = static_cast<T>(pos - static_cast<double>(i0));
    }

    Shape out_shape = s;
    out_shape[axis] = out_len;
    std::vector<T> out(outer * out_len * inner);
    const T* xd = x.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < out_len; ++j) {
            const T* a = xd + (o * in_len + lo[j]) * inner;
            const T* b = xd + (o * in_len + hi[j]) * inner;
            T* d = out.data() + (o * out_len + j) * inner;
            const T f = frac[j];
            for (std::size_t i = 0; i < inner; ++i) d[i] = (T(1) - f) * a[i] + f * b[i];
        }
    return make_result<T>(std::move(out_shape), std::move(out), {x},
                          [outer, inner, in_len, out_len, lo = std::move(lo), hi = std::move(hi),
                           frac = std::move(frac)](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < out_len; ++j) {
                const T* src = self.grad.data() + (o * out_len + j) * inner;
                T* a = g.data() + (o * in_len + lo[j]) * inner;
                T* b = g.data() + (o * in_len + hi[j]) * inner;
                const T f = frac[j];
                for (std::size_t i = 0; i < inner; ++i) {
                    a[i] += (T(1) - f) * src[i];
                    b[i] += f * src[i];
                }
            }
    }, "interpolate");
}

}  // namespace detail

/// Bilinear (2D) or trilinear (3D) upsampling by an integer factor with
/// corner-aligned sampling.
template <class T>
Tensor<T> upsample_linear(const Tensor<T>& x, std::size_t factor) {
    detail::check_spatial(x.shape(), "upsample_linear");
    if (factor < 2) throw ValueError("upsample_linear: factor must be >= 2, got " + std::to_string(factor));
    Tensor<T> y = x;
    for (std::size_t axis = 2; axis < x.rank(); ++axis) {
        y = detail::interpolate_axis(y, axis, x.dim(axis) * factor);
    }
    return y;
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormKind { batch, layer };

/// Exponential moving averages kept by batch normalization for eval mode.
template <class T>
struct RunningStats {
    std::vector<T> mean;
    std::vector<T> var;
    T decay = T(0.9);

    explicit RunningStats(std::size_t channels = 0) : mean(channels, T(0)), var(channels, T(1)) {}
};

/// Batch norm normalizes each channel over (batch, spatial); layer norm
/// normalizes each sample over (channels, spatial). The affine gain/bias is
/// per channel in both cases. With kind == batch, `stats` is updated when
/// `training` and used instead of batch statistics when not.
template <class T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& gain, const Tensor<T>& bias, T eps,
                    RunningStats<T>* stats = nullptr, bool training = true) {
    if (x.rank() < 2) throw ShapeError("normalize: expected (batch, channels, ...) got " + to_string(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1);
    const std::size_t S = x.numel() / (N * C);
    if (gain.numel() != C || bias.numel() != C) {
        throw ShapeError("normalize: gain/bias length must equal channel count " + std::to_string(C));
    }
    const std::size_t groups = kind == NormKind::batch ? C : N;
    const std::size_t group_size = kind == NormKind::batch ? N * S : C * S;
    if (!(eps > T(0))) {
        throw ValueError("normalize: eps must be > 0 (statistics group size " + std::to_string(group_size) +
                         (group_size == 1 ? ", single element" : "") + ")");
    }
    const bool use_running = kind == NormKind::batch && stats && !training;
    if (stats && (stats->mean.size() != C || stats->var.size() != C)) {
        throw ShapeError("normalize: running statistics sized for a different channel count");
    }

    // Element e of group k: batch -> (n, k, p), layer -> (k, c, p).
    auto for_group = [&](std::size_t k, auto&& f) {
        if (kind == NormKind::batch) {
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + k) * S;
                for (std::size_t p = 0; p < S; ++p) f(base + p, k);
            }
        } else {
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t base = (k * C + c) * S;
                for (std::size_t p = 0; p < S; ++p) f(base + p, c);
            }
        }
    };

    const T* xd = x.data().data();
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(groups);
    if (use_running) {
        for (std::size_t c = 0; c < C; ++c) {
            const T is = T(1) / std::sqrt(stats->var[c] + eps);
            inv_std[c] = is;
            const T m = stats->mean[c];
            for_group(c, [&](std::size_t i, std::size_t) { xhat[i] = (xd[i] - m) * is; });
        }
    } else {
        for (std::size_t k = 0; k < groups; ++k) {
            double s1 = 0.0;
            for_group(k, [&](std::size_t i, std::size_t) { s1 += xd[i]; });
            const double m = s1 / static_cast<double>(group_size);
            double s2 = 0.0;
            for_group(k, [&](std::size_t i, std::size_t) {
                const double d = xd[i] - m;
                s2 += d * d;
            });
            const double var = s2 / static_cast<double>(group_size);
            const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            inv_std[k] = is;
            const T mt = static_cast<T>(m);
            for_group(k, [&](std::size_t i, std::size_t) { xhat[i] = (xd[i] - mt) * is; });
            if (kind == NormKind::batch && stats && training) {
                const double unbiased = group_size > 1 ? s2 / static_cast<double>(group_size - 1) : var;
                stats->mean[k] = stats->decay * stats->mean[k] + (T(1) - stats->decay) * static_cast<T>(m);
                stats->var[k] = stats->decay * stats->var[k] + (T(1) - stats->decay) * static_cast<T>(unbiased);
            }
        }
    }

    std::vector<T> out(x.numel());
    const T* gd = gain.data().data();
    const T* bd = bias.data().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * S;
            for (std::size_t p = 0; p < S; ++p) out[base + p] = gd[c] * xhat[base + p] + bd[c];
        }

    return make_result<T>(x.shape(), std::move(out), {x, gain, bias},
                          [N, C, S, kind, groups, group_size, use_running, xhat = std::move(xhat),
                           inv_std = std::move(inv_std)](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* gy = self.grad.data();
        if (pg.track || pb.track) {
            std::vector<T> dg(C, T(0)), db(C, T(0));
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (n * C + c) * S;
                    T a = T(0), b = T(0);
                    for (std::size_t p = 0; p < S; ++p) {
                        a += gy[base + p] * xhat[base + p];
                        b += gy[base + p];
                    }
                    dg[c] += a;
                    db[c] += b;
                }
            if (pg.track) {
                auto& g = pg.grad_buffer();
                for (std::size_t c = 0; c < C; ++c) g[c] += dg[c];
            }
            if (pb.track) {
                auto& g = pb.grad_buffer();
                for (std::size_t c = 0; c < C; ++c) g[c] += db[c];
            }
        }
        if (!px.track) return;
        auto& gx = px.grad_buffer();
        const T* gd = pg.data.data();
        if (use_running) {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (n * C + c) * S;
                    for (std::size_t p = 0; p < S; ++p) gx[base + p] += gy[base + p] * gd[c] * inv_std[c];
                }
            return;
        }
        for (std::size_t k = 0; k < groups; ++k) {
            // dxhat = dy * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            double m1 = 0.0, m2 = 0.0;
            auto visit = [&](auto&& f) {
                if (kind == NormKind::batch) {
                    for (std::size_t n = 0; n < N; ++n) {
                        const std::size_t base = (n * C + k) * S;
                        for (std::size_t p = 0; p < S; ++p) f(base + p, k);
                    }
                } else {
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t base = (k * C + c) * S;
                        for (std::size_t p = 0; p < S; ++p) f(base + p, c);
                    }
                }
            };
            visit([&](std::size_t i, std::size_t c) {
                const double dxh = static_cast<double>(gy[i]) * gd[c];
                m1 += dxh;
                m2 += dxh * xhat[i];
            });
            m1 /= static_cast<double>(group_size);
            m2 /= static_cast<double>(group_size);
            const T is = inv_std[k];
            const T a = static_cast<T>(m1), b = static_cast<T>(m2);
            visit([&](std::size_t i, std::size_t c) { gx[i] += is * (gy[i] * gd[c] - a - xhat[i] * b); });
        }
    }, "normalize");
}

// ---------------------------------------------------------------------------
// Parameters and optimization

/// Ordered, uniquely named set of trainable tensors.
template <class T>
class ParamSet {
public:
    void add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw ValueError("duplicate parameter name '" + name + "'");
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
        return items_[it->second].second;
    }
    const Tensor<T>& at(const std::string& name) const { return const_cast<ParamSet*>(this)->at(name); }

    std::size_t size() const { return items_.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items_) n += t.numel();
        return n;
    }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    void clear_grads() {
        for (auto& [_, t] : items_) t.clear_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct OptimConfig {
    double alpha0 = 1e-3;
    int epochs = 200;
    double weight_decay = 1e-4;
    double momentum = 0.0;

    void validate() const {
        if (!(alpha0 > 0.0)) throw ConfigError("optimizer: alpha0 must be > 0");
        if (epochs < 1) throw ConfigError("optimizer: epochs must be >= 1");
        if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer: momentum must be in [0, 1)");
    }
};

/// Momentum buffers, keyed by parameter name.
template <class T>
struct SgdState {
    std::unordered_map<std::string, std::vector<T>> velocity;
};

/// One SGD step: g' = g + weight_decay * w; v = momentum * v + g'; w -= alpha * v.
/// Clears every gradient afterwards.
template <class T>
void sgd_update(ParamSet<T>& params, const OptimConfig& cfg, double alpha, SgdState<T>* state = nullptr) {
    if (cfg.momentum > 0.0 && !state) throw ValueError("sgd_update: momentum requires an SgdState");
    for (auto& [name, p] : params) {
        if (p.tracked() && !p.has_grad()) {
            throw ValueError("sgd_update: tracked parameter '" + name + "' has no gradient");
        }
    }
    const T a = static_cast<T>(alpha);
    const T wd = static_cast<T>(cfg.weight_decay);
    const T mu = static_cast<T>(cfg.momentum);
    for (auto& [name, p] : params) {
        if (!p.tracked()) continue;
        auto w = p.data_mut();
        auto g = p.grad();
        if (cfg.momentum > 0.0) {
            auto& v = state->velocity[name];
            if (v.size() != w.size()) v.assign(w.size(), T(0));
            for (std::size_t i = 0; i < w.size(); ++i) {
                v[i] = mu * v[i] + (g[i] + wd * w[i]);
                w[i] -= a * v[i];
            }
        } else {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= a * (g[i] + wd * w[i]);
        }
        p.clear_grad();
    }
}

/// Polynomial decay alpha0 * (1 - n/N)^0.9.
inline double lr_at_epoch(double alpha0, int n, int N) {
    if (N < 1) throw ValueError("lr_at_epoch: total epochs must be >= 1");
    if (n < 0 || n > N) {
        throw ValueError("lr_at_epoch: epoch " + std::to_string(n) + " outside [0, " + std::to_string(N) + "]");
    }
    return alpha0 * std::pow(1.0 - static_cast<double>(n) / static_cast<double>(N), 0.9);
}

}  // namespace l2s
