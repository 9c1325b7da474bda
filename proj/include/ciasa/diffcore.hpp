#pragma once

// Minimal reverse-mode differentiation over dense row-major double arrays.
//
// A Value is a shared handle to a node holding a shape, its data, and (when
// it participates in differentiation) a gradient buffer. Every primitive
// below records how to push its output gradient back into its inputs; a Tape
// built from a scalar root orders those records so backward() can replay the
// chain rule in reverse.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ciasa::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node {
    Shape shape;
    Array data;
    Array grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
};

class Value {
public:
    Value() = default;
    explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Value constant(Shape shape, Array data);
    static Value constant(double x);
    static Value parameter(Shape shape, Array data);
    static Value zeros(Shape shape, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    Index rank() const { return static_cast<Index>(node_->shape.size()); }
    /// Negative axes count from the back.
    Index dim(Index axis) const;
    Index size() const { return node_->data.size(); }

    const Array& data() const { return node_->data; }
    Array& data() { return node_->data; }
    const Array& grad() const { return node_->grad; }
    Array& grad() { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return !node_->backward; }
    void set_requires_grad(bool flag);
    void zero_grad();
    double item() const;
    const char* op() const { return node_->op; }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& handle() const { return node_; }

    /// Constant copy of the data, cut off from any graph.
    Value detach() const;
    /// Same data viewed under a new shape (copying); differentiable.
    Value reshape(Shape shape) const;

private:
    std::shared_ptr<Node> node_;
};

/// Ordered record of the differentiable operations reachable from a root,
/// inputs before outputs.
class Tape {
public:
    explicit Tape(const Value& root);

    std::size_t size() const { return ops_.size(); }
    const std::vector<Node*>& ops() const { return ops_; }
    const std::vector<Node*>& leaves() const { return leaves_; }

    /// Seeds d(root)/d(root) = 1 and runs every recorded backward rule once,
    /// in reverse order. Leaf gradients accumulate. Returns the number of
    /// operations replayed.
    std::size_t replay();

private:
    Value root_;
    std::vector<Node*> ops_;
    std::vector<Node*> leaves_;
};

/// Writes d(root)/d(leaf) into every requires-grad leaf reachable from root.
void backward(const Value& root);

// ---------------------------------------------------------------------------
// Primitives. Element-wise binary operations broadcast numpy-style.

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);

Value neg(const Value& a);
Value scale(const Value& a, double s);
Value add_scalar(const Value& a, double s);
Value square(const Value& a);
Value sqrt(const Value& a);
Value exp(const Value& a);
Value log(const Value& a);
Value relu(const Value& a);
Value sigmoid(const Value& a);

Value sum(const Value& a);
Value mean(const Value& a);
Value sum(const Value& a, Index axis);
Value mean(const Value& a, Index axis);
/// Euclidean norm along `axis`; the axis is removed from the result.
Value l2_norm(const Value& a, Index axis);

/// (.., m, k) x (.., k, n). Leading batch dimensions must match or be absent
/// on one side, in which case that operand is shared across the batch.
Value matmul(const Value& a, const Value& b);
/// Swaps the last two axes.
Value transpose(const Value& a);

Value reshape(const Value& a, Shape shape);
Value concat(std::span<const Value> parts, Index axis);
Value slice(const Value& a, Index axis, Index begin, Index end);

/// Convolution along the time axis of x: (T, N, Cin) or (B, T, N, Cin) with
/// kernel w: (K, Cin, Cout), odd K, zero padding so the output keeps T.
Value temporal_conv(const Value& x, const Value& w);
/// Valid (unpadded), stride-1 2-D convolution. x: (B, H, W, Cin),
/// w: (kh, kw, Cin, Cout); output (B, H-kh+1, W-kw+1, Cout).
Value conv2d(const Value& x, const Value& w);

Value softmax(const Value& a);
Value log_softmax(const Value& a);
/// Mean negative log-likelihood of integer targets. logits: (C) or (B, C).
Value cross_entropy(const Value& logits, std::span<const int> targets);
Value cross_entropy(const Value& logits, int target);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }
inline Value operator/(const Value& a, const Value& b) { return div(a, b); }
inline Value operator-(const Value& a) { return neg(a); }
inline Value operator*(const Value& a, double s) { return scale(a, s); }
inline Value operator*(double s, const Value& a) { return scale(a, s); }
inline Value operator+(const Value& a, double s) { return add_scalar(a, s); }
inline Value operator-(const Value& a, double s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------
// Optimisation and verification.

struct AdamOptions {
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamOptions options;
    std::vector<Array> first_moment;
    std::vector<Array> second_moment;
    std::int64_t step = 0;
};

AdamState make_adam_state(std::span<const Value> params, const AdamOptions& options = {});

/// One bias-corrected Adam update of every parameter, then clears gradients.
void adam_step(std::span<Value> params, AdamState& state);

struct GradCheckOptions {
    double step = 1e-4;
    /// Smaller steps tried when a coordinate disagrees at `step`; a piecewise
    /// linear op whose kink lies within the step spoils the difference there,
    /// while a wrong analytic gradient disagrees at every step.
    std::vector<double> refine_steps = {1e-5, 1e-6, 1e-7};
    /// Error below which no refinement is attempted.
    double refine_threshold = 1e-6;
    double floor = 1e-8;
    /// Coordinates checked per parameter; 0 checks all of them.
    Index samples_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    Index worst_coordinate = -1;
    std::size_t checked = 0;
    /// Coordinates that needed a smaller step.
    std::size_t refined = 0;
    bool finite = true;
    std::string message;

    bool passed(double tolerance) const { return finite && max_relative_error < tolerance; }
};

/// Compares analytic gradients against central differences of `loss`, which
/// must rebuild its graph from the current parameter data on every call.
GradCheckResult gradient_check(const std::function<Value()>& loss, std::span<Value> params,
                               const GradCheckOptions& options = {});

} // namespace ciasa::ad
