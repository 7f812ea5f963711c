#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fda {

#ifdef FDA_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// NaN/Inf rejection at tensor construction. On by default.
void set_checked_mode(bool enabled);
bool checked_mode();

class GradientTape;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
    const GradientTape* producer = nullptr;  // null for leaves
    std::size_t tape_index = 0;

    Scalar* grad_buffer();
};

using NodePtr = std::shared_ptr<TensorNode>;

} // namespace detail

// Dense row-major tensor handle. Copies share the underlying node; values are
// immutable after construction except through mutable_data() on leaves.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, Scalar value);
    static Tensor scalar(Scalar value, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows,
                         bool requires_grad = false);
    static Tensor vector(std::initializer_list<Scalar> values, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const Scalar> data() const;
    Scalar operator[](std::size_t flat) const { return data()[flat]; }
    Scalar at(std::size_t row, std::size_t col) const;
    Scalar item() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const Scalar> grad() const;
    void zero_grad();

    // Write access for optimizer updates and iterate buffers. Leaves only.
    std::span<Scalar> mutable_data();

    // Fresh leaf holding a copy of the values.
    Tensor detach() const;

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

    const detail::NodePtr& node() const noexcept { return node_; }
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
    detail::NodePtr node_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
Scalar max_abs_diff(const Tensor& a, const Tensor& b);

// Ordered record of differentiable operations executed while the tape is the
// active tape of the current thread (see TapeScope).
class GradientTape {
public:
    using BackwardFn = std::function<void(detail::TensorNode& out)>;

    GradientTape() = default;
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    std::size_t size() const noexcept { return entries_.size(); }

    // Fills grad of every leaf with requires_grad reachable from root.
    void backward(const Tensor& root);

    void record(const detail::NodePtr& out, BackwardFn fn);

private:
    struct Entry {
        detail::NodePtr out;
        BackwardFn fn;
    };
    std::vector<Entry> entries_;
};

// Makes a tape the active tape of this thread for the scope's lifetime.
class TapeScope {
public:
    explicit TapeScope(GradientTape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradientTape* previous_;
};

GradientTape* active_tape();

void backward(const Tensor& root, GradientTape& tape);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, Scalar factor);
Tensor scale_by(const Tensor& x, const Tensor& factor);
// Ties route the gradient to `a`.
Tensor elementwise_min(const Tensor& a, const Tensor& b);
// Picks a where take_a[i] != 0, else b.
Tensor select(const std::vector<std::uint8_t>& take_a, const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Positions where mask[i] != 0 are replaced by value (gradient zero there).
Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, Scalar value);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);
Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids);
// [H x W x C] image -> [(H/p)*(W/p) x p*p*C] patch rows in raster order.
Tensor patchify(const Tensor& image, std::size_t patch);
// Mean binary cross-entropy of logits (any shape) against 0/1 labels.
Tensor bce_with_logits(const Tensor& logits, const std::vector<Scalar>& labels);

// ---- FTEN binary format ---------------------------------------------------

enum class FtenDtype : std::uint8_t { F32 = 0, F64 = 1 };

FtenDtype native_dtype();
void write_ften(std::ostream& out, const Tensor& t, FtenDtype dtype = native_dtype());
Tensor read_ften(std::istream& in);
std::string encode_ften(const Tensor& t, FtenDtype dtype = native_dtype());
Tensor decode_ften(const std::string& bytes);
void save_ften(const std::string& path, const Tensor& t);
Tensor load_ften(const std::string& path);

} // namespace fda
