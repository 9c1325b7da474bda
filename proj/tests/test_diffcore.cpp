#include "ciasa/diffcore.hpp"

#include <doctest.h>

#include <random>

using namespace ciasa::ad;

namespace {

Value random_value(Shape shape, std::mt19937_64& rng, bool param = true) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Array a(numel(shape));
    for (auto& x : a) x = u(rng);
    return param ? Value::parameter(std::move(shape), std::move(a)) : Value::constant(std::move(shape), std::move(a));
}

Value vec(std::initializer_list<double> xs, bool param = false) {
    Array a(static_cast<Index>(xs.size()));
    Index i = 0;
    for (double x : xs) a[i++] = x;
    return param ? Value::parameter({a.size()}, a) : Value::constant({a.size()}, a);
}

double check(const std::function<Value()>& f, std::vector<Value> params) {
    const GradCheckResult r = gradient_check(f, params);
    REQUIRE(r.finite);
    return r.max_relative_error;
}

} // namespace

TEST_SUITE("diffcore") {

TEST_CASE("softmax of equal logits is uniform") {
    const Value s = softmax(vec({0.0, 0.0, 0.0}));
    for (Index i = 0; i < 3; ++i) CHECK(s.data()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("relu clamps negatives") {
    const Value r = relu(vec({-1.0, 2.0}));
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 2.0);
}

TEST_CASE("matmul of ones counts the inner dimension") {
    const Value a = Value::constant({2, 3}, Array::Ones(6));
    const Value b = Value::constant({3, 2}, Array::Ones(6));
    const Value c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    CHECK((c.data() == 3.0).all());
}

TEST_CASE("matmul agrees with Eigen on batched operands") {
    std::mt19937_64 rng(1);
    const Value a = random_value({4, 3, 5}, rng, false);
    const Value b = random_value({5, 2}, rng, false);
    const Value c = matmul(a, b);
    REQUIRE(c.shape() == Shape{4, 3, 2});
    const Eigen::Map<const RowMatrix> bm(b.data().data(), 5, 2);
    for (Index k = 0; k < 4; ++k) {
        const Eigen::Map<const RowMatrix> am(a.data().data() + k * 15, 3, 5);
        const RowMatrix expected = am * bm;
        const Eigen::Map<const RowMatrix> got(c.data().data() + k * 6, 3, 2);
        CHECK((expected - got).cwiseAbs().maxCoeff() < 1e-14);
    }
}

TEST_CASE("temporal convolution matches a direct loop with zero padding") {
    std::mt19937_64 rng(2);
    const Index T = 5, N = 2, Ci = 3, Co = 2, K = 3;
    const Value x = random_value({T, N, Ci}, rng, false);
    const Value w = random_value({K, Ci, Co}, rng, false);
    const Value y = temporal_conv(x, w);
    REQUIRE(y.shape() == Shape{T, N, Co});
    for (Index t = 0; t < T; ++t)
        for (Index n = 0; n < N; ++n)
            for (Index o = 0; o < Co; ++o) {
                double acc = 0.0;
                for (Index k = 0; k < K; ++k) {
                    const Index s = t + k - K / 2;
                    if (s < 0 || s >= T) continue;
                    for (Index i = 0; i < Ci; ++i) acc += x.data()[(s * N + n) * Ci + i] * w.data()[(k * Ci + i) * Co + o];
                }
                CHECK(y.data()[(t * N + n) * Co + o] == doctest::Approx(acc).epsilon(1e-13));
            }
}

TEST_CASE("conv2d matches a direct loop") {
    std::mt19937_64 rng(3);
    const Value x = random_value({2, 5, 4, 2}, rng, false);
    const Value w = random_value({3, 3, 2, 3}, rng, false);
    const Value y = conv2d(x, w);
    REQUIRE(y.shape() == Shape{2, 3, 2, 3});
    for (Index b = 0; b < 2; ++b)
        for (Index i = 0; i < 3; ++i)
            for (Index j = 0; j < 2; ++j)
                for (Index o = 0; o < 3; ++o) {
                    double acc = 0.0;
                    for (Index di = 0; di < 3; ++di)
                        for (Index dj = 0; dj < 3; ++dj)
                            for (Index c = 0; c < 2; ++c)
                                acc += x.data()[((b * 5 + i + di) * 4 + j + dj) * 2 + c] * w.data()[((di * 3 + dj) * 2 + c) * 3 + o];
                    CHECK(y.data()[((b * 3 + i) * 2 + j) * 3 + o] == doctest::Approx(acc).epsilon(1e-13));
                }
}

TEST_CASE("cross-entropy equals the negative log-softmax of the target") {
    const Value z = vec({1.0, 2.0, 3.0});
    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    CHECK(cross_entropy(z, 0).item() == doctest::Approx(lse - 1.0).epsilon(1e-14));
    CHECK(cross_entropy(z, 2).item() == doctest::Approx(lse - 3.0).epsilon(1e-14));
    CHECK_THROWS_AS(cross_entropy(z, 3), std::out_of_range);
}

TEST_CASE("l2 norm, concat and reshape") {
    const Value m = Value::constant({2, 2}, (Array(4) << 3.0, 4.0, 0.0, 2.0).finished());
    const Value n = l2_norm(m, -1);
    CHECK(n.shape() == Shape{2});
    CHECK(n.data()[0] == 5.0);
    CHECK(n.data()[1] == 2.0);
    const std::vector<Value> parts = {m, m};
    CHECK(concat(parts, 0).shape() == Shape{4, 2});
    CHECK(concat(parts, 1).shape() == Shape{2, 4});
    CHECK(reshape(m, {4}).shape() == Shape{4});
}

TEST_CASE("shape errors name the primitive and both shapes") {
    const Value a = Value::zeros({2, 3});
    const Value b = Value::zeros({4, 2});
    try {
        (void)matmul(a, b);
        FAIL("matmul accepted mismatched shapes");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(Value::zeros({2, 3}), Value::zeros({3, 2})), ShapeError);
    CHECK_THROWS_AS(reshape(a, {5}), ShapeError);
    CHECK_THROWS_AS(Value::constant({2, 2}, Array::Zero(3)), ShapeError);
}

TEST_CASE("broadcasting follows numpy rules") {
    const Value a = Value::constant({2, 3}, Array::Ones(6));
    const Value b = vec({1.0, 2.0, 3.0});
    const Value c = a + b;
    CHECK(c.shape() == Shape{2, 3});
    CHECK(c.data()[4] == 3.0);
    const Value col = Value::constant({2, 1}, (Array(2) << 10.0, 20.0).finished());
    CHECK((a * col).data()[5] == 20.0);
}

TEST_CASE("backward of sum is all ones") {
    Value x = vec({1.0, -2.0, 0.5}, true);
    backward(sum(x));
    CHECK((x.grad() == 1.0).all());
}

TEST_CASE("backward of sum of squares is twice the input") {
    Value x = vec({1.0, 2.0}, true);
    backward(sum(square(x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("backward rejects a non-scalar root") {
    Value x = vec({1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(square(x)), ShapeError);
}

TEST_CASE("non-participating leaves hold zero gradient") {
    Value x = vec({1.0, 2.0}, true);
    Value y = vec({3.0, 4.0}, true);
    backward(sum(x));
    CHECK(y.grad().size() == 2);
    CHECK((y.grad() == 0.0).all());
}

TEST_CASE("independent subgraphs accumulate additively") {
    Value x = vec({1.0, 2.0}, true);
    backward(sum(square(x)) + sum(x * 3.0));
    CHECK(x.grad()[0] == doctest::Approx(2.0 + 3.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0 + 3.0));
}

TEST_CASE("tape replays every recorded op exactly once") {
    Value x = vec({1.0, 2.0}, true);
    const Value y = square(x);
    const Value root = sum(y + y); // y is shared by two consumers
    Tape tape(root);
    CHECK(tape.size() == 3);
    CHECK(tape.replay() == 3);
    CHECK(x.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("every primitive passes a central-difference check") {
    std::mt19937_64 rng(4);
    Value a = random_value({3, 4}, rng);
    Value b = random_value({3, 4}, rng);
    Value r = random_value({4}, rng);
    Value pos = Value::parameter({3, 4}, random_value({3, 4}, rng).data().abs() + 0.5);
    const double tol = 1e-6;
    CHECK(check([&] { return sum(a + r); }, {a, r}) < tol);
    CHECK(check([&] { return sum(square(a - b)); }, {a, b}) < tol);
    CHECK(check([&] { return sum(a * b * r); }, {a, b, r}) < tol);
    CHECK(check([&] { return sum(a / pos); }, {a, pos}) < tol);
    CHECK(check([&] { return sum(sqrt(pos)); }, {pos}) < tol);
    CHECK(check([&] { return sum(exp(a) + log(pos)); }, {a, pos}) < tol);
    CHECK(check([&] { return sum(sigmoid(a) * 2.0 + 1.0); }, {a}) < tol);
    CHECK(check([&] { return mean(square(mean(a, 0))) + sum(sum(b, 1)); }, {a, b}) < tol);
    CHECK(check([&] { return sum(l2_norm(a, 1)); }, {a}) < tol);
    CHECK(check([&] { return sum(square(matmul(a, transpose(b)))); }, {a, b}) < tol);
    CHECK(check([&] { return sum(square(concat(std::vector<Value>{a, b}, 1))); }, {a, b}) < tol);
    CHECK(check([&] { return sum(square(slice(a, 1, 1, 3))); }, {a}) < tol);
    CHECK(check([&] { return sum(square(softmax(a))); }, {a}) < tol);
    CHECK(check([&] { return cross_entropy(a, std::vector<int>{0, 3, 1}); }, {a}) < tol);
    Value x = random_value({5, 3, 2}, rng);
    Value w = random_value({3, 2, 4}, rng);
    CHECK(check([&] { return sum(square(temporal_conv(x, w))); }, {x, w}) < tol);
    Value img = random_value({2, 5, 5, 2}, rng);
    Value k = random_value({3, 3, 2, 3}, rng);
    CHECK(check([&] { return sum(square(conv2d(img, k))); }, {img, k}) < tol);
}

TEST_CASE("random two-layer network matches finite differences") {
    std::mt19937_64 rng(5);
    Value x = random_value({6, 4}, rng, false);
    Value w1 = random_value({4, 8}, rng);
    Value b1 = random_value({8}, rng);
    Value w2 = random_value({8, 3}, rng);
    const std::vector<int> labels = {0, 1, 2, 1, 0, 2};
    auto loss = [&] { return cross_entropy(matmul(relu(matmul(x, w1) + b1), w2), labels); };
    CHECK(check(loss, {w1, b1, w2}) < 1e-4);
}

TEST_CASE("gradient check on a quadratic and a constant") {
    Value x = vec({0.3, -0.7, 1.1}, true);
    CHECK(check([&] { return sum(square(x) * 2.0); }, {x}) < 1e-6);
    Value y = vec({1.0, 2.0}, true);
    CHECK(check([&] { return sum(y * 0.0) + 5.0; }, {y}) == 0.0);
}

TEST_CASE("gradient check reports a wrong derivative") {
    Value x = vec({0.5, 1.5}, true);
    // Correct forward, derivative deliberately off by a factor of two.
    auto broken = [&] {
        Value y = square(x);
        y.node()->backward = [](Node& self) {
            Node& in = *self.inputs[0];
            in.grad += self.grad * 4.0 * in.data;
        };
        return sum(y);
    };
    CHECK(check(broken, {x}) > 0.3);
}

TEST_CASE("gradient check reports non-finite values with the coordinate") {
    // sqrt is finite at 0 but undefined just below it.
    Value x = vec({1.0, 0.0}, true);
    std::vector<Value> params = {x};
    const GradCheckResult r = gradient_check([&] { return sum(sqrt(x)); }, params);
    CHECK_FALSE(r.finite);
    CHECK(r.worst_coordinate == 1);
    CHECK_FALSE(r.message.empty());
}

TEST_CASE("first Adam step moves by the learning rate against the gradient") {
    Value p = vec({2.0}, true);
    std::vector<Value> ps = {p};
    AdamState st = make_adam_state(ps);
    p.grad()[0] = 1.0;
    adam_step(ps, st);
    CHECK(p.data()[0] == doctest::Approx(2.0 - 0.01).epsilon(1e-9));
    CHECK(st.step == 1);
    CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("zero gradient leaves the parameter but counts the step") {
    Value p = vec({2.0}, true);
    std::vector<Value> ps = {p};
    AdamState st = make_adam_state(ps);
    p.grad()[0] = 0.0;
    adam_step(ps, st);
    CHECK(p.data()[0] == 2.0);
    CHECK(st.step == 1);
}

TEST_CASE("Adam keeps per-parameter state") {
    Value p = vec({1.0}, true);
    Value q = vec({1.0}, true);
    std::vector<Value> both = {p, q};
    AdamState st = make_adam_state(both);
    p.grad()[0] = 1.0;
    q.grad()[0] = -100.0;
    adam_step(both, st);
    // Bias-corrected first step is sign-like, independent of the other parameter.
    CHECK(p.data()[0] == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(q.data()[0] == doctest::Approx(1.01).epsilon(1e-9));
}

TEST_CASE("Adam is deterministic and rejects missing gradients") {
    auto run = [] {
        Value p = vec({0.3, -0.2}, true);
        std::vector<Value> ps = {p};
        AdamState st = make_adam_state(ps);
        for (int i = 0; i < 5; ++i) {
            backward(sum(square(p - 1.0)));
            adam_step(ps, st);
        }
        return Array(p.data());
    };
    CHECK((run() == run()).all());
    Value c = vec({1.0});
    std::vector<Value> ps = {c};
    AdamState st = make_adam_state(ps);
    CHECK_THROWS(adam_step(ps, st));
}

} // TEST_SUITE
