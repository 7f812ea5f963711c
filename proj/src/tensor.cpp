#include "fda/tensor.hpp"

#include "fda/error.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fda {

namespace {

std::atomic<bool> g_checked{true};
thread_local GradientTape* t_active_tape = nullptr;

using detail::NodePtr;
using detail::TensorNode;

void check_finite(std::span<const Scalar> values, const char* where) {
    if (!g_checked.load(std::memory_order_relaxed)) return;
    for (Scalar v : values) {
        if (!std::isfinite(v)) fail(ErrorKind::NonFinite, std::string("non-finite value produced by ") + where);
    }
}

NodePtr make_node(Shape shape, std::vector<Scalar> data) {
    if (shape_numel(shape) != data.size()) {
        fail(ErrorKind::ShapeMismatch, "shape " + shape_string(shape) + " does not hold " +
                                           std::to_string(data.size()) + " values");
    }
    for (std::size_t extent : shape) {
        if (extent == 0) fail(ErrorKind::ShapeMismatch, "zero extent in shape " + shape_string(shape));
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return node;
}

// Builds an op result and records its backward rule when any input is tracked.
Tensor finish(const char* op, Shape shape, std::vector<Scalar> data, std::initializer_list<const Tensor*> inputs,
              GradientTape::BackwardFn fn) {
    check_finite(data, op);
    NodePtr node = make_node(std::move(shape), std::move(data));
    GradientTape* tape = t_active_tape;
    if (tape != nullptr) {
        bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
        if (any) {
            node->requires_grad = true;
            tape->record(node, std::move(fn));
        }
    }
    return Tensor(std::move(node));
}

Tensor finish_vec(const char* op, Shape shape, std::vector<Scalar> data, const std::vector<Tensor>& inputs,
                  GradientTape::BackwardFn fn) {
    check_finite(data, op);
    NodePtr node = make_node(std::move(shape), std::move(data));
    GradientTape* tape = t_active_tape;
    if (tape != nullptr) {
        bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            tape->record(node, std::move(fn));
        }
    }
    return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) fail(ErrorKind::ShapeMismatch, std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require_defined(a, op);
    require_defined(b, op);
    if (a.shape() != b.shape()) {
        fail(ErrorKind::ShapeMismatch,
             std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

void require_matrix(const Tensor& t, const char* op) {
    require_defined(t, op);
    if (t.rank() != 2) fail(ErrorKind::ShapeMismatch, std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
    int r = static_cast<int>(rank);
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) fail(ErrorKind::InvalidAxis, "axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
    return static_cast<std::size_t>(a);
}

struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const Scalar* a, const Scalar* b, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        Scalar* crow = c + i * n;
        const Scalar* arow = a + i * k;
        for (std::size_t t = 0; t < k; ++t) {
            const Scalar av = arow[t];
            const Scalar* brow = b + t * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt_acc(const Scalar* a, const Scalar* b, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Scalar* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const Scalar* brow = b + j * k;
            Scalar acc = 0;
            for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
            c[i * n + j] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn_acc(const Scalar* a, const Scalar* b, Scalar* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Scalar* arow = a + i * k;
        const Scalar* brow = b + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const Scalar av = arow[t];
            Scalar* crow = c + t * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

constexpr Scalar kGeluC = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
constexpr Scalar kGeluA = static_cast<Scalar>(0.044715);

} // namespace

// ---- shapes / modes -------------------------------------------------------

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void set_checked_mode(bool enabled) { g_checked.store(enabled); }
bool checked_mode() { return g_checked.load(); }

Scalar* detail::TensorNode::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Scalar{0});
    return grad.data();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad) {
    check_finite(data, "construction");
    node_ = make_node(std::move(shape), std::move(data));
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Scalar>(n, Scalar{0}), requires_grad);
}

Tensor Tensor::filled(Shape shape, Scalar value) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Scalar>(n, value));
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<Scalar>> rows, bool requires_grad) {
    std::size_t m = rows.size();
    std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<Scalar> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
        if (row.size() != n) fail(ErrorKind::ShapeMismatch, "ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<Scalar> values, bool requires_grad) {
    return Tensor({values.size()}, std::vector<Scalar>(values), requires_grad);
}

const Shape& Tensor::shape() const {
    require_defined(*this, "shape");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) fail(ErrorKind::InvalidAxis, "dim " + std::to_string(axis) + " of " + shape_string(shape()));
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return defined() ? node_->data.size() : 0; }

std::span<const Scalar> Tensor::data() const {
    require_defined(*this, "data");
    return node_->data;
}

Scalar Tensor::at(std::size_t row, std::size_t col) const {
    require_matrix(*this, "at");
    return node_->data[row * node_->shape[1] + col];
}

Scalar Tensor::item() const {
    if (numel() != 1) fail(ErrorKind::NotScalar, "item() on " + shape_string(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    require_defined(*this, "set_requires_grad");
    node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return defined() && node_->producer == nullptr; }

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const Scalar> Tensor::grad() const {
    require_defined(*this, "grad");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (defined()) node_->grad.clear();
}

std::span<Scalar> Tensor::mutable_data() {
    require_defined(*this, "mutable_data");
    if (!is_leaf()) fail(ErrorKind::DetachedTensor, "mutable_data() on a non-leaf tensor");
    return node_->data;
}

Tensor Tensor::detach() const {
    require_defined(*this, "detach");
    auto node = make_node(node_->shape, node_->data);
    return Tensor(std::move(node));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(Scalar)) == 0;
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    Scalar m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---- tape -----------------------------------------------------------------

void GradientTape::record(const NodePtr& out, BackwardFn fn) {
    out->producer = this;
    out->tape_index = entries_.size();
    entries_.push_back({out, std::move(fn)});
}

void GradientTape::backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1) {
        fail(ErrorKind::NotScalar, "backward root must be a scalar tensor");
    }
    const NodePtr& rn = root.node();
    if (rn->producer == nullptr) {
        if (!rn->requires_grad) fail(ErrorKind::DetachedTensor, "backward root does not require grad");
        rn->grad_buffer()[0] += 1;
        return;
    }
    if (rn->producer != this) fail(ErrorKind::DetachedTensor, "backward root was produced on a different tape");

    for (std::size_t i = 0; i <= rn->tape_index; ++i) entries_[i].out->grad.clear();
    rn->grad_buffer()[0] = 1;
    for (std::size_t i = rn->tape_index + 1; i-- > 0;) {
        Entry& e = entries_[i];
        if (e.out->grad.empty()) continue;
        e.fn(*e.out);
    }
}

TapeScope::TapeScope(GradientTape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

GradientTape* active_tape() { return t_active_tape; }

void backward(const Tensor& root, GradientTape& tape) { tape.backward(root); }

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        fail(ErrorKind::ShapeMismatch, "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    std::vector<Scalar> out(m * n, Scalar{0});
    gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    NodePtr an = a.node(), bn = b.node();
    return finish("matmul", {m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](TensorNode& o) {
        if (an->requires_grad) gemm_nt_acc(o.grad.data(), bn->data.data(), an->grad_buffer(), m, n, k);
        if (bn->requires_grad) gemm_tn_acc(an->data.data(), o.grad.data(), bn->grad_buffer(), m, k, n);
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    NodePtr an = a.node(), bn = b.node();
    return finish("add", a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode& o) {
        for (const NodePtr& in : {an, bn}) {
            if (!in->requires_grad) continue;
            Scalar* g = in->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    NodePtr an = a.node(), bn = b.node();
    return finish("sub", a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode& o) {
        if (an->requires_grad) {
            Scalar* g = an->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            Scalar* g = bn->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    NodePtr an = a.node(), bn = b.node();
    return finish("mul", a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode& o) {
        if (an->requires_grad) {
            Scalar* g = an->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            Scalar* g = bn->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * an->data[i];
        }
    });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
    require_matrix(x, "add_row");
    require_defined(bias, "add_row");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (bias.numel() != n) {
        fail(ErrorKind::ShapeMismatch, "add_row bias " + shape_string(bias.shape()) + " for " + shape_string(x.shape()));
    }
    std::vector<Scalar> out(m * n);
    auto xd = x.data();
    auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] + bd[j];
    NodePtr xn = x.node(), bn = bias.node();
    return finish("add_row", x.shape(), std::move(out), {&x, &bias}, [xn, bn, m, n](TensorNode& o) {
        if (xn->requires_grad) {
            Scalar* g = xn->grad_buffer();
            for (std::size_t i = 0; i < m * n; ++i) g[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            Scalar* g = bn->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
        }
    });
}

Tensor scale(const Tensor& x, Scalar factor) {
    require_defined(x, "scale");
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    NodePtr xn = x.node();
    return finish("scale", x.shape(), std::move(out), {&x}, [xn, factor](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * factor;
    });
}

Tensor scale_by(const Tensor& x, const Tensor& factor) {
    require_defined(x, "scale_by");
    require_defined(factor, "scale_by");
    if (factor.numel() != 1) fail(ErrorKind::NotScalar, "scale_by factor must be a scalar");
    const Scalar f = factor[0];
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * f;
    NodePtr xn = x.node(), fn = factor.node();
    return finish("scale_by", x.shape(), std::move(out), {&x, &factor}, [xn, fn, f](TensorNode& o) {
        if (xn->requires_grad) {
            Scalar* g = xn->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * f;
        }
        if (fn->requires_grad) {
            Scalar acc = 0;
            for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * xn->data[i];
            fn->grad_buffer()[0] += acc;
        }
    });
}

Tensor elementwise_min(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "elementwise_min");
    const std::size_t n = a.numel();
    std::vector<Scalar> out(n);
    std::vector<std::uint8_t> from_a(n);
    for (std::size_t i = 0; i < n; ++i) {
        from_a[i] = a[i] <= b[i] ? 1 : 0;
        out[i] = from_a[i] ? a[i] : b[i];
    }
    NodePtr an = a.node(), bn = b.node();
    return finish("elementwise_min", a.shape(), std::move(out), {&a, &b},
                  [an, bn, from_a = std::move(from_a)](TensorNode& o) {
                      Scalar* ga = an->requires_grad ? an->grad_buffer() : nullptr;
                      Scalar* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
                      for (std::size_t i = 0; i < o.grad.size(); ++i) {
                          if (from_a[i]) {
                              if (ga) ga[i] += o.grad[i];
                          } else if (gb) {
                              gb[i] += o.grad[i];
                          }
                      }
                  });
}

Tensor select(const std::vector<std::uint8_t>& take_a, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "select");
    if (take_a.size() != a.numel()) fail(ErrorKind::ShapeMismatch, "select mask length");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = take_a[i] ? a[i] : b[i];
    NodePtr an = a.node(), bn = b.node();
    return finish("select", a.shape(), std::move(out), {&a, &b}, [an, bn, take_a](TensorNode& o) {
        Scalar* ga = an->requires_grad ? an->grad_buffer() : nullptr;
        Scalar* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            if (take_a[i]) {
                if (ga) ga[i] += o.grad[i];
            } else if (gb) {
                gb[i] += o.grad[i];
            }
        }
    });
}

Tensor transpose(const Tensor& x) {
    require_matrix(x, "transpose");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<Scalar> out(m * n);
    auto xd = x.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
    NodePtr xn = x.node();
    return finish("transpose", {n, m}, std::move(out), {&x}, [xn, m, n](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) fail(ErrorKind::ShapeMismatch, "concat of zero tensors");
    for (const Tensor& p : parts) require_defined(p, "concat");
    const Shape& first = parts.front().shape();
    const std::size_t ax = normalize_axis(axis, first.size());
    Shape out_shape = first;
    out_shape[ax] = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) fail(ErrorKind::ShapeMismatch, "concat rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != ax && s[d] != first[d]) {
                fail(ErrorKind::ShapeMismatch, "concat " + shape_string(s) + " vs " + shape_string(first));
            }
        }
        out_shape[ax] += s[ax];
    }
    const AxisSplit outer_split = split_axis(out_shape, ax);
    std::vector<Scalar> out(shape_numel(out_shape));
    std::vector<NodePtr> nodes;
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(ax) * outer_split.inner;
        auto pd = p.data();
        for (std::size_t o = 0; o < outer_split.outer; ++o) {
            std::copy_n(pd.data() + o * w, w, out.data() + o * outer_split.extent * outer_split.inner + offset);
        }
        offset += w;
        nodes.push_back(p.node());
        widths.push_back(w);
    }
    const std::size_t row = outer_split.extent * outer_split.inner;
    const std::size_t outer = outer_split.outer;
    return finish_vec("concat", std::move(out_shape), std::move(out), parts,
                      [nodes = std::move(nodes), widths = std::move(widths), row, outer](TensorNode& o) {
                          std::size_t off = 0;
                          for (std::size_t p = 0; p < nodes.size(); ++p) {
                              const std::size_t w = widths[p];
                              if (nodes[p]->requires_grad) {
                                  Scalar* g = nodes[p]->grad_buffer();
                                  for (std::size_t r = 0; r < outer; ++r)
                                      for (std::size_t j = 0; j < w; ++j) g[r * w + j] += o.grad[r * row + off + j];
                              }
                              off += w;
                          }
                      });
}

Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, Scalar value) {
    require_defined(x, "masked_fill");
    if (mask.size() != x.numel()) fail(ErrorKind::ShapeMismatch, "masked_fill mask length");
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? value : x[i];
    NodePtr xn = x.node();
    return finish("masked_fill", x.shape(), std::move(out), {&x}, [xn, mask](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (!mask[i]) g[i] += o.grad[i];
    });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
    require_defined(x, "slice");
    const std::size_t ax = normalize_axis(axis, x.rank());
    if (length == 0 || start + length > x.dim(ax)) {
        fail(ErrorKind::ShapeMismatch, "slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") of " +
                                           shape_string(x.shape()));
    }
    const AxisSplit s = split_axis(x.shape(), ax);
    Shape out_shape = x.shape();
    out_shape[ax] = length;
    std::vector<Scalar> out(shape_numel(out_shape));
    auto xd = x.data();
    const std::size_t w = length * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(xd.data() + (o * s.extent + start) * s.inner, w, out.data() + o * w);
    }
    NodePtr xn = x.node();
    return finish("slice", std::move(out_shape), std::move(out), {&x}, [xn, s, start, w](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t r = 0; r < s.outer; ++r) {
            Scalar* dst = g + (r * s.extent + start) * s.inner;
            const Scalar* src = o.grad.data() + r * w;
            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    require_defined(x, "reshape");
    if (shape_numel(shape) != x.numel()) {
        fail(ErrorKind::ShapeMismatch, "reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
    }
    std::vector<Scalar> out(x.data().begin(), x.data().end());
    NodePtr xn = x.node();
    return finish("reshape", std::move(shape), std::move(out), {&x}, [xn](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    Scalar acc = 0;
    for (Scalar v : x.data()) acc += v;
    NodePtr xn = x.node();
    return finish("sum", {1}, {acc}, {&x}, [xn](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += o.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    require_defined(x, "mean");
    Scalar acc = 0;
    for (Scalar v : x.data()) acc += v;
    const Scalar n = static_cast<Scalar>(x.numel());
    NodePtr xn = x.node();
    return finish("mean", {1}, {acc / n}, {&x}, [xn, n](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += o.grad[0] / n;
    });
}

Tensor softmax(const Tensor& x, int axis) {
    require_defined(x, "softmax");
    const std::size_t ax = normalize_axis(axis, x.rank());
    const AxisSplit s = split_axis(x.shape(), ax);
    std::vector<Scalar> out(x.numel());
    auto xd = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t r = 0; r < s.inner; ++r) {
            const std::size_t base = o * s.extent * s.inner + r;
            Scalar mx = xd[base];
            for (std::size_t i = 1; i < s.extent; ++i) mx = std::max(mx, xd[base + i * s.inner]);
            Scalar total = 0;
            for (std::size_t i = 0; i < s.extent; ++i) {
                Scalar e = std::exp(xd[base + i * s.inner] - mx);
                out[base + i * s.inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < s.extent; ++i) out[base + i * s.inner] /= total;
        }
    }
    NodePtr xn = x.node();
    return finish("softmax", x.shape(), std::move(out), {&x}, [xn, s](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t q = 0; q < s.outer; ++q) {
            for (std::size_t r = 0; r < s.inner; ++r) {
                const std::size_t base = q * s.extent * s.inner + r;
                Scalar dot = 0;
                for (std::size_t i = 0; i < s.extent; ++i) {
                    const std::size_t idx = base + i * s.inner;
                    dot += o.data[idx] * o.grad[idx];
                }
                for (std::size_t i = 0; i < s.extent; ++i) {
                    const std::size_t idx = base + i * s.inner;
                    g[idx] += o.data[idx] * (o.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    require_defined(x, "sigmoid");
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Scalar v = x[i];
        out[i] = v >= 0 ? Scalar{1} / (Scalar{1} + std::exp(-v)) : std::exp(v) / (Scalar{1} + std::exp(v));
    }
    NodePtr xn = x.node();
    return finish("sigmoid", x.shape(), std::move(out), {&x}, [xn](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * o.data[i] * (Scalar{1} - o.data[i]);
    });
}

Tensor gelu(const Tensor& x) {
    require_defined(x, "gelu");
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Scalar v = x[i];
        out[i] = Scalar{0.5} * v * (Scalar{1} + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    NodePtr xn = x.node();
    return finish("gelu", x.shape(), std::move(out), {&x}, [xn](TensorNode& o) {
        if (!xn->requires_grad) return;
        Scalar* g = xn->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const Scalar v = xn->data[i];
            const Scalar t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            const Scalar d = Scalar{0.5} * (Scalar{1} + t) +
                             Scalar{0.5} * v * (Scalar{1} - t * t) * kGeluC * (Scalar{1} + Scalar{3} * kGeluA * v * v);
            g[i] += o.grad[i] * d;
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
    require_defined(x, "layer_norm");
    require_defined(gamma, "layer_norm");
    require_defined(beta, "layer_norm");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    if (gamma.numel() != n || beta.numel() != n) fail(ErrorKind::ShapeMismatch, "layer_norm affine parameters");
    std::vector<Scalar> out(x.numel());
    std::vector<Scalar> xhat(x.numel());
    std::vector<Scalar> inv_std(rows);
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* row = xd.data() + r * n;
        Scalar mu = 0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<Scalar>(n);
        Scalar var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<Scalar>(n);
        inv_std[r] = Scalar{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (row[j] - mu) * inv_std[r];
            out[r * n + j] = xhat[r * n + j] * gd[j] + bd[j];
        }
    }
    NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
    return finish("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                  [xn, gn, bn, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& o) {
                      if (gn->requires_grad) {
                          Scalar* g = gn->grad_buffer();
                          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % n] += o.grad[i] * xhat[i];
                      }
                      if (bn->requires_grad) {
                          Scalar* g = bn->grad_buffer();
                          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % n] += o.grad[i];
                      }
                      if (!xn->requires_grad) return;
                      Scalar* g = xn->grad_buffer();
                      std::vector<Scalar> dxhat(n);
                      for (std::size_t r = 0; r < rows; ++r) {
                          Scalar m1 = 0, m2 = 0;
                          for (std::size_t j = 0; j < n; ++j) {
                              dxhat[j] = o.grad[r * n + j] * gn->data[j];
                              m1 += dxhat[j];
                              m2 += dxhat[j] * xhat[r * n + j];
                          }
                          m1 /= static_cast<Scalar>(n);
                          m2 /= static_cast<Scalar>(n);
                          for (std::size_t j = 0; j < n; ++j) {
                              g[r * n + j] += inv_std[r] * (dxhat[j] - m1 - xhat[r * n + j] * m2);
                          }
                      }
                  });
}

Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
    require_matrix(table, "embedding");
    if (ids.empty()) fail(ErrorKind::ShapeMismatch, "embedding of zero ids");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<Scalar> out(ids.size() * d);
    auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) fail(ErrorKind::InvalidIndex, "token id " + std::to_string(ids[i]) + " out of vocabulary");
        std::copy_n(td.data() + ids[i] * d, d, out.data() + i * d);
    }
    NodePtr tn = table.node();
    return finish("embedding", {ids.size(), d}, std::move(out), {&table}, [tn, ids, d](TensorNode& o) {
        if (!tn->requires_grad) return;
        Scalar* g = tn->grad_buffer();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += o.grad[i * d + j];
    });
}

Tensor patchify(const Tensor& image, std::size_t patch) {
    require_defined(image, "patchify");
    if (image.rank() != 3) fail(ErrorKind::ShapeMismatch, "patchify expects [H x W x C], got " + shape_string(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        fail(ErrorKind::ShapeMismatch, "image " + shape_string(image.shape()) + " not divisible by patch " + std::to_string(patch));
    }
    const std::size_t ph = h / patch, pw = w / patch, width = patch * patch * c;
    // index[k] = flat source index of output element k
    std::vector<std::size_t> index(image.numel());
    std::size_t k = 0;
    for (std::size_t pr = 0; pr < ph; ++pr)
        for (std::size_t pc = 0; pc < pw; ++pc)
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        index[k++] = ((pr * patch + y) * w + (pc * patch + x)) * c + ch;
    std::vector<Scalar> out(image.numel());
    auto id = image.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = id[index[i]];
    NodePtr in = image.node();
    return finish("patchify", {ph * pw, width}, std::move(out), {&image}, [in, index = std::move(index)](TensorNode& o) {
        if (!in->requires_grad) return;
        Scalar* g = in->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[index[i]] += o.grad[i];
    });
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<Scalar>& labels) {
    require_defined(logits, "bce_with_logits");
    if (labels.size() != logits.numel()) fail(ErrorKind::ShapeMismatch, "bce_with_logits label count");
    const Scalar n = static_cast<Scalar>(labels.size());
    Scalar acc = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const Scalar z = logits[i];
        acc += std::max(z, Scalar{0}) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
    }
    NodePtr ln = logits.node();
    return finish("bce_with_logits", {1}, {acc / n}, {&logits}, [ln, labels, n](TensorNode& o) {
        if (!ln->requires_grad) return;
        Scalar* g = ln->grad_buffer();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const Scalar z = ln->data[i];
            const Scalar p = z >= 0 ? Scalar{1} / (Scalar{1} + std::exp(-z)) : std::exp(z) / (Scalar{1} + std::exp(z));
            g[i] += o.grad[0] * (p - labels[i]) / n;
        }
    });
}

// ---- FTEN -----------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::string& buf, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <typename T>
T get_le(const char* p) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

constexpr char kFtenMagic[4] = {'F', 'T', 'E', 'N'};
constexpr std::uint8_t kFtenVersion = 1;

} // namespace

FtenDtype native_dtype() { return sizeof(Scalar) == 4 ? FtenDtype::F32 : FtenDtype::F64; }

std::string encode_ften(const Tensor& t, FtenDtype dtype) {
    require_defined(t, "encode_ften");
    std::string buf(kFtenMagic, 4);
    buf.push_back(static_cast<char>(kFtenVersion));
    buf.push_back(static_cast<char>(dtype));
    if (t.rank() > 255) fail(ErrorKind::FormatError, "rank too large for FTEN");
    buf.push_back(static_cast<char>(t.rank()));
    for (std::size_t extent : t.shape()) put_le<std::uint64_t>(buf, extent);
    for (Scalar v : t.data()) {
        if (dtype == FtenDtype::F32) {
            put_le<float>(buf, static_cast<float>(v));
        } else {
            put_le<double>(buf, static_cast<double>(v));
        }
    }
    return buf;
}

Tensor decode_ften(const std::string& bytes) {
    std::istringstream in(bytes);
    Tensor t = read_ften(in);
    if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::FormatError, "trailing bytes after FTEN payload");
    return t;
}

void write_ften(std::ostream& out, const Tensor& t, FtenDtype dtype) {
    const std::string buf = encode_ften(t, dtype);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) fail(ErrorKind::IoError, "FTEN write failed");
}

Tensor read_ften(std::istream& in) {
    auto read_exact = [&in](char* dst, std::size_t n) {
        in.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) fail(ErrorKind::FormatError, "truncated FTEN block");
    };
    char head[7];
    read_exact(head, sizeof head);
    if (std::memcmp(head, kFtenMagic, 4) != 0) fail(ErrorKind::FormatError, "bad FTEN magic");
    if (static_cast<std::uint8_t>(head[4]) != kFtenVersion) {
        fail(ErrorKind::FormatError, "unsupported FTEN version " + std::to_string(static_cast<unsigned char>(head[4])));
    }
    const auto dtype = static_cast<std::uint8_t>(head[5]);
    if (dtype > 1) fail(ErrorKind::FormatError, "unknown FTEN dtype " + std::to_string(dtype));
    const std::size_t rank = static_cast<std::uint8_t>(head[6]);
    if (rank == 0) fail(ErrorKind::FormatError, "FTEN rank 0");
    Shape shape(rank);
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        char ext[8];
        read_exact(ext, 8);
        const auto v = get_le<std::uint64_t>(ext);
        if (v == 0 || v > (std::uint64_t{1} << 40)) fail(ErrorKind::FormatError, "implausible FTEN extent");
        shape[i] = static_cast<std::size_t>(v);
        count *= shape[i];
        if (count > (std::size_t{1} << 34)) fail(ErrorKind::FormatError, "FTEN payload too large");
    }
    const std::size_t width = dtype == 0 ? 4 : 8;
    std::string payload(count * width, '\0');
    read_exact(payload.data(), payload.size());
    std::vector<Scalar> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        const char* p = payload.data() + i * width;
        data[i] = dtype == 0 ? static_cast<Scalar>(get_le<float>(p)) : static_cast<Scalar>(get_le<double>(p));
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_ften(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot open " + path + " for writing");
    write_ften(out, t);
}

Tensor load_ften(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path);
    return read_ften(in);
}

} // namespace fda
