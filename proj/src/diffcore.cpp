#include "ciasa/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace ciasa::ad {

namespace {

using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_error(const char* op, const std::string& what) {
    throw ShapeError(std::string(op) + ": " + what);
}

Index normalize_axis(Index axis, Index rank, const char* op) {
    const Index a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        shape_error(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return a;
}

void ensure_grad(Node& n) {
    if (n.grad.size() != n.data.size()) n.grad = Array::Zero(n.data.size());
}

Value make_result(const char* op, Shape shape, Array data, std::vector<Value> inputs,
                  std::function<void(Node&)> rule) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Value& v) { return v.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& v : inputs) node->inputs.push_back(v.handle());
        node->backward = std::move(rule);
    }
    return Value(std::move(node));
}

// Input i of an op node, or nullptr when it does not want a gradient.
Node* grad_input(Node& self, std::size_t i) {
    Node* in = self.inputs[i].get();
    if (!in->requires_grad) return nullptr;
    ensure_grad(*in);
    return in;
}

// Product of dims [begin, end).
Index span_size(const Shape& s, std::size_t begin, std::size_t end) {
    Index n = 1;
    for (std::size_t i = begin; i < end; ++i) n *= s[i];
    return n;
}

// --- broadcasting ----------------------------------------------------------

struct Broadcast {
    Shape out;
    std::vector<Index> ia; // empty when a already has the output shape
    std::vector<Index> ib;
};

std::vector<Index> broadcast_index(const Shape& in, const Shape& out) {
    const std::size_t r = out.size();
    const std::size_t off = r - in.size();
    std::vector<Index> stride(r, 0);
    Index s = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        stride[k + off] = in[k] == 1 ? 0 : s;
        s *= in[k];
    }
    const Index total = numel(out);
    std::vector<Index> idx(static_cast<std::size_t>(total));
    std::vector<Index> counter(r, 0);
    Index flat = 0;
    for (Index i = 0; i < total; ++i) {
        idx[static_cast<std::size_t>(i)] = flat;
        for (std::size_t k = r; k-- > 0;) {
            ++counter[k];
            flat += stride[k];
            if (counter[k] < out[k]) break;
            flat -= stride[k] * counter[k];
            counter[k] = 0;
        }
    }
    return idx;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast p;
    if (a == b) {
        p.out = a;
        return p;
    }
    const std::size_t r = std::max(a.size(), b.size());
    p.out.assign(r, 1);
    for (std::size_t k = 0; k < r; ++k) {
        const Index da = k < r - a.size() ? 1 : a[k - (r - a.size())];
        const Index db = k < r - b.size() ? 1 : b[k - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            shape_error(op, "cannot broadcast " + to_string(a) + " with " + to_string(b));
        }
        p.out[k] = std::max(da, db);
    }
    if (a != p.out) p.ia = broadcast_index(a, p.out);
    if (b != p.out) p.ib = broadcast_index(b, p.out);
    return p;
}

Array expand(const Array& src, const std::vector<Index>& idx) {
    if (idx.empty()) return src;
    Array out(static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = src[idx[i]];
    return out;
}

void accumulate(Array& dst, const Array& src, const std::vector<Index>& idx) {
    if (idx.empty()) {
        dst += src;
        return;
    }
    for (std::size_t i = 0; i < idx.size(); ++i) dst[idx[i]] += src[static_cast<Index>(i)];
}

enum class BinOp { add, sub, mul, div };

Value binary(const Value& a, const Value& b, BinOp kind, const char* name) {
    auto p = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), name));
    const Array A = expand(a.data(), p->ia);
    const Array B = expand(b.data(), p->ib);
    Array out;
    switch (kind) {
    case BinOp::add: out = A + B; break;
    case BinOp::sub: out = A - B; break;
    case BinOp::mul: out = A * B; break;
    case BinOp::div: out = A / B; break;
    }
    Shape shape = p->out;
    return make_result(name, std::move(shape), std::move(out), {a, b}, [p, kind](Node& self) {
        Node* na = grad_input(self, 0);
        Node* nb = grad_input(self, 1);
        const Array& g = self.grad;
        switch (kind) {
        case BinOp::add:
            if (na) accumulate(na->grad, g, p->ia);
            if (nb) accumulate(nb->grad, g, p->ib);
            break;
        case BinOp::sub:
            if (na) accumulate(na->grad, g, p->ia);
            if (nb) accumulate(nb->grad, -g, p->ib);
            break;
        case BinOp::mul: {
            const Node& ia = *self.inputs[0];
            const Node& ib = *self.inputs[1];
            if (na) accumulate(na->grad, g * expand(ib.data, p->ib), p->ia);
            if (nb) accumulate(nb->grad, g * expand(ia.data, p->ia), p->ib);
            break;
        }
        case BinOp::div: {
            const Node& ia = *self.inputs[0];
            const Node& ib = *self.inputs[1];
            const Array B = expand(ib.data, p->ib);
            if (na) accumulate(na->grad, g / B, p->ia);
            if (nb) accumulate(nb->grad, -g * expand(ia.data, p->ia) / (B * B), p->ib);
            break;
        }
        }
    });
}

// Unary op whose derivative is a function of (input, output).
template <typename Fwd, typename Deriv>
Value unary(const Value& a, const char* name, Fwd fwd, Deriv deriv) {
    Array out = fwd(a.data());
    return make_result(name, a.shape(), std::move(out), {a}, [deriv](Node& self) {
        if (Node* na = grad_input(self, 0)) na->grad += self.grad * deriv(self.inputs[0]->data, self.data);
    });
}

struct AxisSplit {
    Index outer, len, inner;
};

AxisSplit split_at(const Shape& s, Index axis) {
    const auto ax = static_cast<std::size_t>(axis);
    return {span_size(s, 0, ax), s[ax], span_size(s, ax + 1, s.size())};
}

} // namespace

// ---------------------------------------------------------------------------

Index numel(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Value Value::constant(Shape shape, Array data) {
    for (Index d : shape) {
        if (d <= 0) throw ShapeError("constant: non-positive dimension in " + to_string(shape));
    }
    if (numel(shape) != data.size()) {
        throw ShapeError("constant: shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                         " values, got " + std::to_string(data.size()));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Value(std::move(n));
}

Value Value::constant(double x) {
    Array d(1);
    d[0] = x;
    return constant(Shape{1}, std::move(d));
}

Value Value::parameter(Shape shape, Array data) {
    Value v = constant(std::move(shape), std::move(data));
    v.set_requires_grad(true);
    return v;
}

Value Value::zeros(Shape shape, bool requires_grad) {
    const Index n = numel(shape);
    Value v = constant(std::move(shape), Array::Zero(n));
    v.set_requires_grad(requires_grad);
    return v;
}

Index Value::dim(Index axis) const {
    return shape()[static_cast<std::size_t>(normalize_axis(axis, rank(), "dim"))];
}

void Value::set_requires_grad(bool flag) {
    if (!is_leaf()) throw std::logic_error("set_requires_grad: only leaves can change their flag");
    node_->requires_grad = flag;
    if (flag) {
        ensure_grad(*node_);
    } else {
        node_->grad = Array();
    }
}

void Value::zero_grad() {
    if (node_->requires_grad) node_->grad = Array::Zero(node_->data.size());
}

double Value::item() const {
    if (size() != 1) throw ShapeError("item: value of shape " + to_string(shape()) + " is not a scalar");
    return data()[0];
}

Value Value::detach() const { return constant(shape(), data()); }

Value Value::reshape(Shape shape) const { return ad::reshape(*this, std::move(shape)); }

// ---------------------------------------------------------------------------

Tape::Tape(const Value& root) : root_(root) {
    if (!root.defined()) throw std::invalid_argument("Tape: undefined root");
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    if (root.requires_grad()) stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        if (node->backward) {
            ops_.push_back(node);
        } else {
            leaves_.push_back(node);
        }
        stack.pop_back();
    }
}

std::size_t Tape::replay() {
    Node& r = *root_.node();
    if (!r.requires_grad) return 0;
    for (Node* op : ops_) op->grad = Array::Zero(op->data.size());
    for (Node* leaf : leaves_) ensure_grad(*leaf);
    if (r.backward) {
        r.grad.setOnes();
    } else {
        r.grad += 1.0;
    }
    std::size_t count = 0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)->backward(**it);
        ++count;
    }
    // Intermediate buffers are not needed once the leaves hold their gradients.
    for (Node* op : ops_) op->grad = Array();
    return count;
}

void backward(const Value& root) {
    if (root.size() != 1) {
        throw ShapeError("backward: root must be a scalar, got shape " + to_string(root.shape()));
    }
    Tape(root).replay();
}

// ---------------------------------------------------------------------------

Value add(const Value& a, const Value& b) { return binary(a, b, BinOp::add, "add"); }
Value sub(const Value& a, const Value& b) { return binary(a, b, BinOp::sub, "sub"); }
Value mul(const Value& a, const Value& b) { return binary(a, b, BinOp::mul, "mul"); }
Value div(const Value& a, const Value& b) { return binary(a, b, BinOp::div, "div"); }

Value neg(const Value& a) { return scale(a, -1.0); }

Value scale(const Value& a, double s) {
    return unary(
        a, "scale", [s](const Array& x) -> Array { return x * s; },
        [s](const Array& x, const Array&) -> Array { return Array::Constant(x.size(), s); });
}

Value add_scalar(const Value& a, double s) {
    return unary(
        a, "add_scalar", [s](const Array& x) -> Array { return x + s; },
        [](const Array& x, const Array&) -> Array { return Array::Ones(x.size()); });
}

Value square(const Value& a) {
    return unary(
        a, "square", [](const Array& x) -> Array { return x.square(); },
        [](const Array& x, const Array&) -> Array { return 2.0 * x; });
}

Value sqrt(const Value& a) {
    return unary(
        a, "sqrt", [](const Array& x) -> Array { return x.sqrt(); },
        [](const Array&, const Array& y) -> Array { return (y > 0.0).select(0.5 / y, 0.0); });
}

Value exp(const Value& a) {
    return unary(
        a, "exp", [](const Array& x) -> Array { return x.exp(); },
        [](const Array&, const Array& y) -> Array { return y; });
}

Value log(const Value& a) {
    return unary(
        a, "log", [](const Array& x) -> Array { return x.log(); },
        [](const Array& x, const Array&) -> Array { return x.inverse(); });
}

Value relu(const Value& a) {
    return unary(
        a, "relu", [](const Array& x) -> Array { return x.max(0.0); },
        [](const Array& x, const Array&) -> Array { return (x > 0.0).cast<double>(); });
}

Value sigmoid(const Value& a) {
    return unary(
        a, "sigmoid",
        [](const Array& x) -> Array {
            // Split by sign so exp never overflows.
            return (x >= 0.0).select((1.0 + (-x).exp()).inverse(), x.exp() / (1.0 + x.exp()));
        },
        [](const Array&, const Array& y) -> Array { return y * (1.0 - y); });
}

Value sum(const Value& a) {
    Array out(1);
    out[0] = a.data().sum();
    return make_result("sum", Shape{1}, std::move(out), {a}, [](Node& self) {
        if (Node* na = grad_input(self, 0)) na->grad += self.grad[0];
    });
}

Value mean(const Value& a) {
    const double n = static_cast<double>(a.size());
    Array out(1);
    out[0] = a.data().sum() / n;
    return make_result("mean", Shape{1}, std::move(out), {a}, [n](Node& self) {
        if (Node* na = grad_input(self, 0)) na->grad += self.grad[0] / n;
    });
}

namespace {

Shape drop_axis(const Shape& s, Index axis) {
    Shape out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (static_cast<Index>(i) != axis) out.push_back(s[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

Value reduce_axis(const Value& a, Index axis, double weight, const char* name) {
    axis = normalize_axis(axis, a.rank(), name);
    const AxisSplit sp = split_at(a.shape(), axis);
    Array out = Array::Zero(sp.outer * sp.inner);
    const Array& x = a.data();
    for (Index o = 0; o < sp.outer; ++o) {
        for (Index l = 0; l < sp.len; ++l) {
            out.segment(o * sp.inner, sp.inner) += x.segment((o * sp.len + l) * sp.inner, sp.inner);
        }
    }
    out *= weight;
    return make_result(name, drop_axis(a.shape(), axis), std::move(out), {a}, [sp, weight](Node& self) {
        Node* na = grad_input(self, 0);
        if (!na) return;
        for (Index o = 0; o < sp.outer; ++o) {
            for (Index l = 0; l < sp.len; ++l) {
                na->grad.segment((o * sp.len + l) * sp.inner, sp.inner) +=
                    weight * self.grad.segment(o * sp.inner, sp.inner);
            }
        }
    });
}

} // namespace

Value sum(const Value& a, Index axis) { return reduce_axis(a, axis, 1.0, "sum_axis"); }

Value mean(const Value& a, Index axis) {
    const Index ax = normalize_axis(axis, a.rank(), "mean_axis");
    return reduce_axis(a, ax, 1.0 / static_cast<double>(a.shape()[static_cast<std::size_t>(ax)]), "mean_axis");
}

Value l2_norm(const Value& a, Index axis) {
    axis = normalize_axis(axis, a.rank(), "l2_norm");
    const AxisSplit sp = split_at(a.shape(), axis);
    Array out = Array::Zero(sp.outer * sp.inner);
    const Array& x = a.data();
    for (Index o = 0; o < sp.outer; ++o) {
        for (Index l = 0; l < sp.len; ++l) {
            out.segment(o * sp.inner, sp.inner) += x.segment((o * sp.len + l) * sp.inner, sp.inner).square();
        }
    }
    out = out.sqrt();
    return make_result("l2_norm", drop_axis(a.shape(), axis), std::move(out), {a}, [sp](Node& self) {
        Node* na = grad_input(self, 0);
        if (!na) return;
        const Array& x = self.inputs[0]->data;
        const Array scaled = (self.data > 0.0).select(self.grad / self.data, 0.0);
        for (Index o = 0; o < sp.outer; ++o) {
            for (Index l = 0; l < sp.len; ++l) {
                const Index base = (o * sp.len + l) * sp.inner;
                na->grad.segment(base, sp.inner) += x.segment(base, sp.inner) * scaled.segment(o * sp.inner, sp.inner);
            }
        }
    });
}

// ---------------------------------------------------------------------------

Value matmul(const Value& a, const Value& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        shape_error("matmul", "operands need rank >= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    const auto ra = static_cast<std::size_t>(a.rank());
    const auto rb = static_cast<std::size_t>(b.rank());
    const Index m = a.shape()[ra - 2], k = a.shape()[ra - 1];
    const Index kb = b.shape()[rb - 2], n = b.shape()[rb - 1];
    if (k != kb) {
        shape_error("matmul", "inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    if (!lead_a.empty() && !lead_b.empty() && lead_a != lead_b) {
        shape_error("matmul", "batch dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const Index batch_a = numel(lead_a);
    const Index batch_b = numel(lead_b);

    Shape out_shape = lead_a.empty() ? lead_b : lead_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Array out(numel(out_shape));

    enum class Mode { shared_b, shared_a, paired };
    const Mode mode = lead_b.empty() ? Mode::shared_b : (lead_a.empty() ? Mode::shared_a : Mode::paired);
    const Index batch = std::max(batch_a, batch_b);

    if (mode == Mode::shared_b) {
        MatMap(out.data(), batch_a * m, n).noalias() =
            ConstMatMap(a.data().data(), batch_a * m, k) * ConstMatMap(b.data().data(), k, n);
    } else {
        for (Index i = 0; i < batch; ++i) {
            const double* pa = a.data().data() + (mode == Mode::paired ? i * m * k : 0);
            MatMap(out.data() + i * m * n, m, n).noalias() =
                ConstMatMap(pa, m, k) * ConstMatMap(b.data().data() + i * k * n, k, n);
        }
    }

    return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                       [mode, m, k, n, batch, batch_a](Node& self) {
        Node* na = grad_input(self, 0);
        Node* nb = grad_input(self, 1);
        const Array& A = self.inputs[0]->data;
        const Array& B = self.inputs[1]->data;
        const Array& G = self.grad;
        if (mode == Mode::shared_b) {
            ConstMatMap g(G.data(), batch_a * m, n);
            if (na) MatMap(na->grad.data(), batch_a * m, k).noalias() += g * ConstMatMap(B.data(), k, n).transpose();
            if (nb) MatMap(nb->grad.data(), k, n).noalias() += ConstMatMap(A.data(), batch_a * m, k).transpose() * g;
            return;
        }
        for (Index i = 0; i < batch; ++i) {
            const Index off_a = mode == Mode::paired ? i * m * k : 0;
            ConstMatMap g(G.data() + i * m * n, m, n);
            if (na) MatMap(na->grad.data() + off_a, m, k).noalias() += g * ConstMatMap(B.data() + i * k * n, k, n).transpose();
            if (nb) MatMap(nb->grad.data() + i * k * n, k, n).noalias() += ConstMatMap(A.data() + off_a, m, k).transpose() * g;
        }
    });
}

Value transpose(const Value& a) {
    if (a.rank() < 2) shape_error("transpose", "needs rank >= 2, got " + to_string(a.shape()));
    const auto r = static_cast<std::size_t>(a.rank());
    const Index m = a.shape()[r - 2], n = a.shape()[r - 1];
    const Index batch = a.size() / (m * n);
    Shape out_shape = a.shape();
    std::swap(out_shape[r - 2], out_shape[r - 1]);
    Array out(a.size());
    for (Index i = 0; i < batch; ++i) {
        MatMap(out.data() + i * m * n, n, m) = ConstMatMap(a.data().data() + i * m * n, m, n).transpose();
    }
    return make_result("transpose", std::move(out_shape), std::move(out), {a}, [m, n, batch](Node& self) {
        Node* na = grad_input(self, 0);
        if (!na) return;
        for (Index i = 0; i < batch; ++i) {
            MatMap(na->grad.data() + i * m * n, m, n) += ConstMatMap(self.grad.data() + i * m * n, n, m).transpose();
        }
    });
}

Value reshape(const Value& a, Shape shape) {
    if (numel(shape) != a.size()) {
        shape_error("reshape", "cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    }
    return make_result("reshape", std::move(shape), a.data(), {a}, [](Node& self) {
        if (Node* na = grad_input(self, 0)) na->grad += self.grad;
    });
}

Value concat(std::span<const Value> parts, Index axis) {
    if (parts.empty()) shape_error("concat", "no inputs");
    const Shape& ref = parts[0].shape();
    axis = normalize_axis(axis, static_cast<Index>(ref.size()), "concat");
    const auto ax = static_cast<std::size_t>(axis);
    Shape out_shape = ref;
    out_shape[ax] = 0;
    for (const Value& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == ref[i];
        if (!ok) shape_error("concat", "incompatible shapes " + to_string(ref) + " and " + to_string(s));
        out_shape[ax] += s[ax];
    }
    const Index outer = span_size(ref, 0, ax);
    const Index inner = span_size(ref, ax + 1, ref.size());
    const Index out_row = out_shape[ax] * inner;
    std::vector<Index> widths;
    Array out(numel(out_shape));
    Index col = 0;
    for (const Value& p : parts) {
        const Index w = p.shape()[ax] * inner;
        widths.push_back(w);
        for (Index o = 0; o < outer; ++o) out.segment(o * out_row + col, w) = p.data().segment(o * w, w);
        col += w;
    }
    std::vector<Value> inputs(parts.begin(), parts.end());
    return make_result("concat", std::move(out_shape), std::move(out), std::move(inputs),
                       [widths, outer, out_row](Node& self) {
        Index col = 0;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            const Index w = widths[i];
            if (Node* ni = grad_input(self, i)) {
                for (Index o = 0; o < outer; ++o) ni->grad.segment(o * w, w) += self.grad.segment(o * out_row + col, w);
            }
            col += w;
        }
    });
}

Value slice(const Value& a, Index axis, Index begin, Index end) {
    axis = normalize_axis(axis, a.rank(), "slice");
    const AxisSplit sp = split_at(a.shape(), axis);
    if (begin < 0 || end > sp.len || begin >= end) {
        shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                                 to_string(a.shape()) + " along axis " + std::to_string(axis));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = end - begin;
    const Index w = (end - begin) * sp.inner;
    Array out(sp.outer * w);
    for (Index o = 0; o < sp.outer; ++o) {
        out.segment(o * w, w) = a.data().segment((o * sp.len + begin) * sp.inner, w);
    }
    return make_result("slice", std::move(out_shape), std::move(out), {a}, [sp, begin, w](Node& self) {
        Node* na = grad_input(self, 0);
        if (!na) return;
        for (Index o = 0; o < sp.outer; ++o) {
            na->grad.segment((o * sp.len + begin) * sp.inner, w) += self.grad.segment(o * w, w);
        }
    });
}

// ---------------------------------------------------------------------------

Value temporal_conv(const Value& x, const Value& w) {
    if (x.rank() != 3 && x.rank() != 4) {
        shape_error("temporal_conv", "input must be (T,N,C) or (B,T,N,C), got " + to_string(x.shape()));
    }
    if (w.rank() != 3) shape_error("temporal_conv", "kernel must be (K,Cin,Cout), got " + to_string(w.shape()));
    const Index batch = x.rank() == 4 ? x.dim(0) : 1;
    const Index T = x.dim(-3), N = x.dim(-2), cin = x.dim(-1);
    const Index K = w.dim(0), cout = w.dim(2);
    if (w.dim(1) != cin) {
        shape_error("temporal_conv", "kernel " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
    }
    if (K % 2 == 0) shape_error("temporal_conv", "kernel width must be odd, got " + std::to_string(K));
    const Index pad = K / 2;

    Shape out_shape = x.shape();
    out_shape.back() = cout;
    Array out = Array::Zero(batch * T * N * cout);
    for (Index b = 0; b < batch; ++b) {
        const double* xb = x.data().data() + b * T * N * cin;
        double* yb = out.data() + b * T * N * cout;
        for (Index g = 0; g < K; ++g) {
            const Index o = g - pad;
            const Index t0 = std::max<Index>(0, -o), t1 = std::min(T, T - o);
            if (t1 <= t0) continue;
            const Index rows = (t1 - t0) * N;
            MatMap(yb + t0 * N * cout, rows, cout).noalias() +=
                ConstMatMap(xb + (t0 + o) * N * cin, rows, cin) * ConstMatMap(w.data().data() + g * cin * cout, cin, cout);
        }
    }
    return make_result("temporal_conv", std::move(out_shape), std::move(out), {x, w},
                       [batch, T, N, cin, cout, K, pad](Node& self) {
        Node* nx = grad_input(self, 0);
        Node* nw = grad_input(self, 1);
        const Array& X = self.inputs[0]->data;
        const Array& W = self.inputs[1]->data;
        for (Index b = 0; b < batch; ++b) {
            const double* gb = self.grad.data() + b * T * N * cout;
            for (Index g = 0; g < K; ++g) {
                const Index o = g - pad;
                const Index t0 = std::max<Index>(0, -o), t1 = std::min(T, T - o);
                if (t1 <= t0) continue;
                const Index rows = (t1 - t0) * N;
                ConstMatMap gy(gb + t0 * N * cout, rows, cout);
                const Index xoff = b * T * N * cin + (t0 + o) * N * cin;
                if (nx) {
                    MatMap(nx->grad.data() + xoff, rows, cin).noalias() +=
                        gy * ConstMatMap(W.data() + g * cin * cout, cin, cout).transpose();
                }
                if (nw) {
                    MatMap(nw->grad.data() + g * cin * cout, cin, cout).noalias() +=
                        ConstMatMap(X.data() + xoff, rows, cin).transpose() * gy;
                }
            }
        }
    });
}

Value conv2d(const Value& x, const Value& w) {
    if (x.rank() != 4) shape_error("conv2d", "input must be (B,H,W,C), got " + to_string(x.shape()));
    if (w.rank() != 4) shape_error("conv2d", "kernel must be (kh,kw,Cin,Cout), got " + to_string(w.shape()));
    const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
    const Index kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
    if (w.dim(2) != cin) shape_error("conv2d", "kernel " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
    const Index ho = H - kh + 1, wo = W - kw + 1;
    if (ho < 1 || wo < 1) shape_error("conv2d", "kernel " + to_string(w.shape()) + " larger than input " + to_string(x.shape()));

    const Index rows = B * ho * wo;
    const Index patch = kh * kw * cin;
    auto cols = std::make_shared<RowMatrix>(rows, patch);
    const double* X = x.data().data();
    for (Index b = 0; b < B; ++b) {
        for (Index i = 0; i < ho; ++i) {
            for (Index j = 0; j < wo; ++j) {
                double* row = cols->data() + ((b * ho + i) * wo + j) * patch;
                for (Index di = 0; di < kh; ++di) {
                    std::copy_n(X + ((b * H + i + di) * W + j) * cin, kw * cin, row + di * kw * cin);
                }
            }
        }
    }
    Array out(rows * cout);
    MatMap(out.data(), rows, cout).noalias() = *cols * ConstMatMap(w.data().data(), patch, cout);

    return make_result("conv2d", Shape{B, ho, wo, cout}, std::move(out), {x, w},
                       [cols, B, H, W, cin, kh, kw, cout, ho, wo, rows, patch](Node& self) {
        Node* nx = grad_input(self, 0);
        Node* nw = grad_input(self, 1);
        ConstMatMap gy(self.grad.data(), rows, cout);
        if (nw) MatMap(nw->grad.data(), patch, cout).noalias() += cols->transpose() * gy;
        if (!nx) return;
        const RowMatrix gcols = gy * ConstMatMap(self.inputs[1]->data.data(), patch, cout).transpose();
        double* GX = nx->grad.data();
        for (Index b = 0; b < B; ++b) {
            for (Index i = 0; i < ho; ++i) {
                for (Index j = 0; j < wo; ++j) {
                    const double* row = gcols.data() + ((b * ho + i) * wo + j) * patch;
                    for (Index di = 0; di < kh; ++di) {
                        double* dst = GX + ((b * H + i + di) * W + j) * cin;
                        const double* src = row + di * kw * cin;
                        for (Index q = 0; q < kw * cin; ++q) dst[q] += src[q];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------

namespace {

// Row-wise log-softmax over the last axis.
RowMatrix log_softmax_rows(const Array& data, Index rows, Index cols) {
    ConstMatMap x(data.data(), rows, cols);
    RowMatrix out(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        const double mx = x.row(r).maxCoeff();
        const double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
        out.row(r) = x.row(r).array() - lse;
    }
    return out;
}

} // namespace

Value softmax(const Value& a) {
    const Index cols = a.dim(-1);
    const Index rows = a.size() / cols;
    const RowMatrix ls = log_softmax_rows(a.data(), rows, cols);
    Array out = Eigen::Map<const Array>(ls.data(), ls.size()).exp();
    return make_result("softmax", a.shape(), std::move(out), {a}, [rows, cols](Node& self) {
        Node* na = grad_input(self, 0);
        if (!na) return;
        ConstMatMap y(self.data.data(), rows, cols);
        ConstMatMap g(self.grad.data(), rows, cols);
        MatMap dx(na->grad.data(), rows, cols);
        for (Index r = 0; r < rows; ++r) {
            const double dot = y.row(r).dot(g.row(r));
            dx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
        }
    });
}

Value log_softmax(const Value& a) {
    const Index cols = a.dim(-1);
    const Index rows = a.size() / cols;
    const RowMatrix ls = log_softmax_rows(a.data(), rows, cols);
    Array out = Eigen::Map<const Array>(ls.data(), ls.size());
    return make_result("log_softmax", a.shape(), std::move(out), {a}, [rows, cols](Node& self) {
        Node* na = grad_input(self, 0);
        if (!na) return;
        ConstMatMap y(self.data.data(), rows, cols);
        ConstMatMap g(self.grad.data(), rows, cols);
        MatMap dx(na->grad.data(), rows, cols);
        for (Index r = 0; r < rows; ++r) {
            dx.row(r).array() += g.row(r).array() - y.row(r).array().exp() * g.row(r).sum();
        }
    });
}

Value cross_entropy(const Value& logits, std::span<const int> targets) {
    if (logits.rank() != 1 && logits.rank() != 2) {
        shape_error("cross_entropy", "logits must be (C) or (B,C), got " + to_string(logits.shape()));
    }
    const Index cols = logits.dim(-1);
    const Index rows = logits.rank() == 2 ? logits.dim(0) : 1;
    if (static_cast<Index>(targets.size()) != rows) {
        shape_error("cross_entropy", std::to_string(targets.size()) + " targets for logits " + to_string(logits.shape()));
    }
    for (int t : targets) {
        if (t < 0 || t >= cols) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(cols) + ")");
        }
    }
    auto ls = std::make_shared<RowMatrix>(log_softmax_rows(logits.data(), rows, cols));
    std::vector<int> tgt(targets.begin(), targets.end());
    double total = 0.0;
    for (Index r = 0; r < rows; ++r) total -= (*ls)(r, tgt[static_cast<std::size_t>(r)]);
    Array out(1);
    out[0] = total / static_cast<double>(rows);
    return make_result("cross_entropy", Shape{1}, std::move(out), {logits}, [ls, tgt, rows, cols](Node& self) {
        Node* na = grad_input(self, 0);
        if (!na) return;
        const double g = self.grad[0] / static_cast<double>(rows);
        MatMap dx(na->grad.data(), rows, cols);
        for (Index r = 0; r < rows; ++r) {
            dx.row(r).array() += g * ls->row(r).array().exp();
            dx(r, tgt[static_cast<std::size_t>(r)]) -= g;
        }
    });
}

Value cross_entropy(const Value& logits, int target) {
    const int t[1] = {target};
    return cross_entropy(logits, std::span<const int>(t, 1));
}

// ---------------------------------------------------------------------------

AdamState make_adam_state(std::span<const Value> params, const AdamOptions& options) {
    AdamState s;
    s.options = options;
    for (const Value& p : params) {
        s.first_moment.push_back(Array::Zero(p.size()));
        s.second_moment.push_back(Array::Zero(p.size()));
    }
    return s;
}

void adam_step(std::span<Value> params, AdamState& state) {
    if (params.size() != state.first_moment.size()) {
        throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Value& p = params[i];
        if (!p.requires_grad() || p.grad().size() != p.size()) {
            throw std::invalid_argument("adam_step: parameter " + std::to_string(i) + " has no gradient");
        }
        if (state.first_moment[i].size() != p.size()) {
            throw std::invalid_argument("adam_step: moment shape mismatch for parameter " + std::to_string(i));
        }
    }
    const AdamOptions& o = state.options;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(o.beta1, t);
    const double c2 = 1.0 - std::pow(o.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Value p = params[i];
        Array& m = state.first_moment[i];
        Array& v = state.second_moment[i];
        const Array& g = p.grad();
        m = o.beta1 * m + (1.0 - o.beta1) * g;
        v = o.beta2 * v + (1.0 - o.beta2) * g.square();
        p.data() -= o.learning_rate * (m / c1) / ((v / c2).sqrt() + o.epsilon);
        p.zero_grad();
    }
}

GradCheckResult gradient_check(const std::function<Value()>& loss, std::span<Value> params,
                               const GradCheckOptions& options) {
    GradCheckResult result;
    for (Value& p : params) p.zero_grad();
    Value root = loss();
    backward(root);
    std::vector<Array> analytic;
    for (Value& p : params) {
        analytic.push_back(p.grad().size() ? p.grad() : Array::Zero(p.size()));
        p.zero_grad();
    }

    std::mt19937_64 rng(options.seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Value p = params[pi];
        std::vector<Index> coords(static_cast<std::size_t>(p.size()));
        std::iota(coords.begin(), coords.end(), Index{0});
        if (options.samples_per_param > 0 && options.samples_per_param < p.size()) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(static_cast<std::size_t>(options.samples_per_param));
            std::sort(coords.begin(), coords.end());
        }
        for (Index c : coords) {
            const double saved = p.data()[c];
            const double a = analytic[pi][c];
            auto error_at = [&](double step) {
                p.data()[c] = saved + step;
                const double up = loss().item();
                p.data()[c] = saved - step;
                const double down = loss().item();
                p.data()[c] = saved;
                const double numeric = (up - down) / (2.0 * step);
                if (!std::isfinite(numeric)) return std::numeric_limits<double>::quiet_NaN();
                return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
            };
            double err = error_at(options.step);
            ++result.checked;
            if (!std::isfinite(err) || !std::isfinite(a)) {
                result.finite = false;
                result.worst_param = pi;
                result.worst_coordinate = c;
                result.message = "non-finite gradient at parameter " + std::to_string(pi) + " coordinate " + std::to_string(c);
                return result;
            }
            if (err > options.refine_threshold && !options.refine_steps.empty()) {
                ++result.refined;
                for (double step : options.refine_steps) {
                    const double e = error_at(step);
                    if (std::isfinite(e)) err = std::min(err, e);
                    if (err <= options.refine_threshold) break;
                }
            }
            if (err > result.max_relative_error || result.worst_coordinate < 0) {
                result.max_relative_error = std::max(err, result.max_relative_error);
                result.worst_param = pi;
                result.worst_coordinate = c;
            }
        }
    }
    for (Value& p : params) p.zero_grad();
    return result;
}

} // namespace ciasa::ad
