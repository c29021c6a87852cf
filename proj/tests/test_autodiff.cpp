#include "oracles.hpp"

#include "gridreg/autodiff.hpp"

#include <doctest.h>

using namespace gridreg;
using namespace gridreg::ad;

namespace {

using T = Tensor<double>;

T random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
    auto rng = make_engine(seed, Stream::test);
    T t = T::zeros(s);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data(i) = uniform_real(rng, -scale, scale);
    return t;
}

Parameter<double> param(const std::string& name, Shape s, std::uint64_t seed) {
    return {name, random_tensor(s, seed), Init::zeros};
}

// Smooth scalar readout so every primitive is checked through a non-trivial adjoint.
Var<double> readout(Tape<double>& tape, Var<double> v, std::uint64_t seed) {
    const auto w = tape.constant(random_tensor(v.shape(), seed));
    return sum(mul(v, w));
}

} // namespace

TEST_CASE("relu backward") {
    Tape<double> tape;
    const auto x = tape.leaf(T({2}, (T::Array(2) << -1.0, 2.0).finished()));
    const auto y = relu(x);
    tape.backward(sum(y));
    CHECK(y.value().data(0) == 0.0);
    CHECK(tape.grad(x).data(0) == 0.0);
    CHECK(tape.grad(x).data(1) == 1.0);
}

TEST_CASE("softmax of a uniform row") {
    Tape<double> tape;
    const auto x = tape.leaf(T::constant({2, 4}, 3.0));
    const auto y = softmax_rows(x);
    CHECK((y.value().data - 0.25).abs().maxCoeff() < 1e-15);
    // large logits do not overflow
    const auto big = softmax_rows(tape.leaf(T({1, 2}, (T::Array(2) << 1000.0, 0.0).finished())));
    CHECK(big.value().data(0) == doctest::Approx(1.0));
}

TEST_CASE("conv3d against a hand correlation") {
    // single channel 4^3 input, 2^3 kernel, stride 1, no padding -> 3^3 output
    Tape<double> tape;
    const T xin = random_tensor({1, 4, 4, 4}, 1), win = random_tensor({1, 1, 2, 2, 2}, 2);
    const auto x = tape.leaf(xin), w = tape.leaf(win), b = tape.leaf(T::constant({1}, 0.5));
    const auto y = conv3d(x, w, b, ConvSpec{2, 1, 0});
    REQUIRE(y.shape() == Shape{1, 3, 3, 3});
    for (int d = 0; d < 3; ++d)
        for (int h = 0; h < 3; ++h)
            for (int q = 0; q < 3; ++q) {
                double acc = 0.5;
                for (int a = 0; a < 2; ++a)
                    for (int c = 0; c < 2; ++c)
                        for (int e = 0; e < 2; ++e)
                            acc += win.data((a * 2 + c) * 2 + e) * xin.data(((d + a) * 4 + (h + c)) * 4 + (q + e));
                CHECK(y.value().data((d * 3 + h) * 3 + q) == doctest::Approx(acc).epsilon(1e-14));
            }
    // stride 2 padding 1 halves the size
    const auto z = conv3d(x, tape.leaf(random_tensor({3, 1, 3, 3, 3}, 3)), tape.leaf(T::zeros({3})), ConvSpec{});
    CHECK(z.shape() == Shape{3, 2, 2, 2});
}

TEST_CASE("simple analytic gradients") {
    Tape<double> tape;
    const T wv = random_tensor({5}, 4);
    const auto w = tape.leaf(wv, "w");
    tape.backward(sum(mul(w, w)));
    CHECK((tape.grad(w).data - 2.0 * wv.data).abs().maxCoeff() < 1e-15);

    Tape<double> t2;
    const T av = random_tensor({1, 3}, 5), bv = random_tensor({3, 1}, 6);
    const auto a = t2.leaf(av), b = t2.leaf(bv);
    t2.backward(sum(matmul(a, b)));
    CHECK((t2.grad(a).data - bv.data).abs().maxCoeff() < 1e-15);
    CHECK((t2.grad(b).data - av.data).abs().maxCoeff() < 1e-15);
}

TEST_CASE("adjoints accumulate when a node is reused") {
    Tape<double> tape;
    const auto x = tape.leaf(T::constant({3}, 2.0));
    const auto y = add(x, add(x, x));
    tape.backward(sum(y));
    CHECK((tape.grad(x).data == 3.0).all());
    const auto c = tape.constant(T::constant({3}, 1.0));
    Tape<double> t2;
    const auto k = t2.constant(T::constant({3}, 1.0));
    t2.backward(sum(k));
    CHECK((t2.grad(k).data == 0.0).all());
    (void)c;
}

TEST_CASE("every primitive passes gradcheck") {
    const double tol = 1e-6;
    auto run = [&](const std::string& label, std::vector<Parameter<double>> params, const GraphBuilder& build) {
        const auto rep = gradcheck(build, params, tol);
        CAPTURE(label);
        CAPTURE(rep.worst());
        CHECK(rep.passed);
    };
    run("add", {param("a", {3, 4}, 1), param("b", {4}, 2)},
        [](Tape<double>& t, const std::vector<Var<double>>& p) { return readout(t, add(p[0], p[1]), 10); });
    run("mul", {param("a", {2, 3}, 3), param("b", {2, 3}, 4)},
        [](Tape<double>& t, const std::vector<Var<double>>& p) { return readout(t, mul(p[0], p[1]), 11); });
    run("matmul", {param("a", {3, 4}, 5), param("b", {4, 2}, 6)},
        [](Tape<double>& t, const std::vector<Var<double>>& p) { return readout(t, matmul(p[0], p[1]), 12); });
    run("conv3d", {param("x", {2, 5, 4, 3}, 7), param("w", {3, 2, 3, 3, 3}, 8), param("b", {3}, 9)},
        [](Tape<double>& t, const std::vector<Var<double>>& p) {
            return readout(t, conv3d(p[0], p[1], p[2], ConvSpec{}), 13);
        });
    run("softmax", {param("a", {3, 5}, 10)},
        [](Tape<double>& t, const std::vector<Var<double>>& p) { return readout(t, softmax_rows(p[0]), 14); });
    run("softplus", {param("a", {7}, 11)},
        [](Tape<double>& t, const std::vector<Var<double>>& p) { return readout(t, softplus(p[0]), 15); });
    run("relu", {param("a", {9}, 12)},
        [](Tape<double>& t, const std::vector<Var<double>>& p) { return readout(t, relu(p[0]), 16); });
    run("concat", {param("a", {3, 2}, 13), param("b", {3, 4}, 14)}, [](Tape<double>& t, const std::vector<Var<double>>& p) {
        return readout(t, concat_channels<double>({p[0], p[1]}), 17);
    });
    run("reshape+tokens", {param("a", {2, 2, 3, 2}, 15)}, [](Tape<double>& t, const std::vector<Var<double>>& p) {
        return readout(t, mul(reshape(tokens(p[0]), {12, 2}), reshape(tokens(p[0]), {12, 2})), 18);
    });
    run("scale+transpose+slice", {param("a", {4, 5}, 16)}, [](Tape<double>& t, const std::vector<Var<double>>& p) {
        return readout(t, slice_cols(transpose(scale(p[0], 1.7)), 1, 2), 19);
    });
}

TEST_CASE("conv-relu-matmul-softmax-mse pipeline") {
    const std::vector<Parameter<double>> params{param("conv.w", {2, 1, 3, 3, 3}, 21), param("conv.b", {2}, 22),
                                                param("proj", {2, 3}, 23)};
    const T input = random_tensor({1, 4, 4, 4}, 24), target = random_tensor({8, 3}, 25);
    const GraphBuilder build = [&](Tape<double>& t, const std::vector<Var<double>>& p) {
        const auto x = t.constant(input);
        const auto h = relu(conv3d(x, p[0], p[1], ConvSpec{}));
        const auto s = softmax_rows(matmul(tokens(h), p[2]));
        const auto d = add(s, scale(t.constant(target), -1.0));
        return scale(sum(mul(d, d)), 1.0 / 24.0);
    };
    const auto rep = gradcheck(build, params, 1e-5);
    CAPTURE(rep.worst());
    CHECK(rep.passed);
    REQUIRE(rep.entries.size() == 3);

    // repeated evaluation is bit-identical
    Tape<double> t1, t2;
    std::vector<Var<double>> l1, l2;
    for (const auto& p : params) {
        l1.push_back(t1.leaf(p.value, p.name));
        l2.push_back(t2.leaf(p.value, p.name));
    }
    const auto a = build(t1, l1), b = build(t2, l2);
    t1.backward(a);
    t2.backward(b);
    CHECK(a.value().data(0) == b.value().data(0));
    CHECK((t1.grad(l1[0]).data == t2.grad(l2[0]).data).all());
}

TEST_CASE("custom ops") {
    // f(x) = sum x^3 / 3 with a correct and an incorrect VJP
    auto cube_op = [](Var<double> x, double factor) {
        T v = T::scalar((x.value().data.cube() / 3.0).sum());
        const T xv = x.value();
        return custom<double>(
            {x}, v, [xv, factor](const T& up) { return std::vector<T>{T(xv.shape, factor * up.data(0) * xv.data.square())}; },
            "cube");
    };
    const std::vector<Parameter<double>> p{param("good", {4}, 31), param("bad", {4}, 32)};
    const GraphBuilder ok = [&](Tape<double>&, const std::vector<Var<double>>& v) {
        return add(cube_op(v[0], 1.0), cube_op(v[1], 1.0));
    };
    CHECK(gradcheck(ok, p, 1e-7).passed);

    const GraphBuilder wrong = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
        (void)t;
        return add(cube_op(v[0], 1.0), cube_op(v[1], 2.0));
    };
    const auto rep = gradcheck(wrong, p, 1e-7);
    CHECK(!rep.passed);
    CHECK(rep.worst() == "bad");
    CHECK(rep.entries[0].passed);
    CHECK(!rep.entries[1].passed);
}

TEST_CASE("quadratic builder") {
    const std::vector<Parameter<double>> p{param("q", {6}, 41)};
    const GraphBuilder build = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return sum(mul(add(v[0], t.constant(T::constant({6}, 0.3))), v[0]));
    };
    CHECK(gradcheck(build, p, 1e-7).passed);
}

TEST_CASE("shape errors") {
    Tape<double> tape;
    const auto a = tape.leaf(T::zeros({2, 3})), b = tape.leaf(T::zeros({2, 3}));
    CHECK_THROWS_WITH(matmul(a, b), doctest::Contains("[2,3]"));
    CHECK_THROWS(add(a, tape.leaf(T::zeros({4}))));
    CHECK_THROWS(mul(a, tape.leaf(T::zeros({3, 2}))));
    CHECK_THROWS(reshape(a, {5}));
    CHECK_THROWS(tape.backward(a));
    CHECK_THROWS(T({2, 2}, T::Array::Zero(3)));
}
