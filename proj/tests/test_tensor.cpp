// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <unordered_map>

#include "cmmix/optim.hpp"
#include "cmmix/tensor.hpp"
#include "support.hpp"

using namespace cmmix;
using namespace cmmix::tensor;
using cmmix::testing::gradcheck;
using cmmix::testing::random_tensor;
using TD = Tensor<double>;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

// Weighted sum with fixed random weights, so every output element gets a
// distinct cotangent.
TD probe(const TD& y, std::uint64_t seed) {
    Rng rng(seed);
    auto w = random_tensor(rng, y.shape(), -1, 1, false);
    return sum(mul(y, w));
}

void check_unary(const char* name, const std::function<TD(const TD&)>& op, double lo = -2, double hi = 2,
                 Shape shape = {3, 4}) {
    for (int i = 0; i < kInstances; ++i) {
        Rng rng(1000 + i);
        auto x = random_tensor(rng, shape, lo, hi);
        const double err = gradcheck([&](const std::vector<TD>& in) { return probe(op(in[0]), 77 + i); }, {x});
        INFO(name << " instance " << i);
        CHECK(err <= kTol);
    }
}

void check_binary(const char* name, const std::function<TD(const TD&, const TD&)>& op, Shape sa, Shape sb) {
    for (int i = 0; i < kInstances; ++i) {
        Rng rng(2000 + i);
        auto a = random_tensor(rng, sa);
        auto b = random_tensor(rng, sb);
        const double err =
            gradcheck([&](const std::vector<TD>& in) { return probe(op(in[0], in[1]), 99 + i); }, {a, b});
        INFO(name << " instance " << i);
        CHECK(err <= kTol);
    }
}

}  // namespace

TEST_CASE("elementwise examples") {
    auto x = TD::from({3}, {-1.0, 0.0, 1.0});
    auto g = gelu(x);
    CHECK(g.data()[1] == 0.0);
    CHECK(g.data()[2] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    CHECK(g.data()[0] == doctest::Approx(-1.0 + 0.8413447460685429).epsilon(1e-12));
    auto y = add(x, TD::zeros({3}));
    for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == x.data()[i]);
    CHECK_THROWS_AS(add(x, TD::zeros({4})), DimensionError);
    CHECK_THROWS_AS(mul(TD::zeros({2, 3}), TD::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul examples and triple-loop oracle") {
    auto a = TD::from({2, 2}, {1, 2, 3, 4});
    auto b = TD::from({2, 1}, {5, 6});
    auto c = matmul(a, b);
    CHECK(c.data()[0] == 17);
    CHECK(c.data()[1] == 39);

    auto eye = TD::from({2, 2}, {1, 0, 0, 1});
    auto bb = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto ib = matmul(eye, bb);
    for (int i = 0; i < 6; ++i) CHECK(ib.data()[i] == bb.data()[i]);

    Rng rng(5);
    auto p = random_tensor(rng, {3, 4}, -1, 1, false);
    auto q = random_tensor(rng, {4, 2}, -1, 1, false);
    auto r = matmul(p, q);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 4; ++k) s += p.data()[i * 4 + k] * q.data()[k * 2 + j];
            CHECK(r.data()[i * 2 + j] == doctest::Approx(s).epsilon(1e-14));
        }
    CHECK_THROWS_AS(matmul(p, p), DimensionError);
}

TEST_CASE("softmax and layer norm examples") {
    auto row = TD::full({1, 5}, 3.0);
    auto s = softmax(row, 1);
    for (double v : s.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    Rng rng(8);
    auto x = random_tensor(rng, {4, 6}, -3, 3, false);
    auto shifted = TD::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    for (double& v : shifted.data()) v += 11.5;
    auto a = softmax(x, 1);
    auto b = softmax(shifted, 1);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
    for (std::size_t r = 0; r < 4; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < 6; ++c) {
            CHECK(a.data()[r * 6 + c] >= 0.0);
            total += a.data()[r * 6 + c];
        }
        CHECK(std::abs(total - 1.0) <= 1e-6);
    }

    auto ln = layer_norm(TD::full({2, 8}, 4.2), TD::full({8}, 1.0), TD::zeros({8}));
    for (double v : ln.data()) CHECK(v == 0.0);

    auto z = layer_norm(x, TD::full({6}, 1.0), TD::zeros({6}));
    for (std::size_t r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (std::size_t c = 0; c < 6; ++c) mean += z.data()[r * 6 + c] / 6;
        for (std::size_t c = 0; c < 6; ++c) var += std::pow(z.data()[r * 6 + c] - mean, 2) / 6;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("backward examples and contract") {
    auto x = TD::from({2, 3}, {1, -2, 3, 0.5, 4, -1}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    x.zero_grad();
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 2 * x.data()[i]);

    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
    auto detached = TD::scalar(1.0);
    CHECK_THROWS_AS(backward(detached), ContractError);
}

TEST_CASE("tape order and reachability") {
    auto a = TD::from({2}, {1, 2}, true);
    auto b = TD::from({2}, {3, 4}, true);
    auto unrelated = TD::from({2}, {5, 6}, true);
    auto c = mul(a, b);
    auto loss = sum(add(c, a));
    auto tape = Tape<double>::record(loss);
    const auto& nodes = tape.nodes();
    std::unordered_map<const Node<double>*, std::size_t> pos;
    for (std::size_t i = 0; i < nodes.size(); ++i) pos[nodes[i]] = i;
    for (const auto* n : nodes)
        for (const auto& p : n->parents)
            if (pos.count(p.get())) CHECK(pos[p.get()] < pos[n]);
    CHECK(pos.count(&unrelated.node()) == 0);
    tape.run();
    CHECK_FALSE(unrelated.has_grad());
    CHECK(a.grad()[0] == 4.0);  // b + 1
    CHECK(b.grad()[1] == 2.0);  // a
}

TEST_CASE("no-grad guard records nothing") {
    auto x = TD::from({2}, {1, 2}, true);
    TD y;
    {
        NoGradGuard guard;
        y = mul(x, x);
    }
    CHECK(y.node().parents.empty());
    CHECK(grad_enabled());
}

TEST_CASE("finite differences: elementwise and reductions") {
    check_unary("scale", [](const TD& x) { return scale(x, 1.7); });
    check_unary("gelu", [](const TD& x) { return gelu(x); });
    check_unary("exp", [](const TD& x) { return exp(x); });
    check_unary("log", [](const TD& x) { return log(x); }, 0.5, 3.0);
    check_unary("sum", [](const TD& x) { return scale(sum(mul(x, x)), 0.5); });
    check_unary("mean", [](const TD& x) { return mean(mul(x, x)); });
    check_binary("add", [](const TD& a, const TD& b) { return add(a, b); }, {3, 4}, {3, 4});
    check_binary("sub", [](const TD& a, const TD& b) { return sub(a, b); }, {3, 4}, {3, 4});
    check_binary("mul", [](const TD& a, const TD& b) { return mul(a, b); }, {3, 4}, {3, 4});
    check_binary("add_bias", [](const TD& a, const TD& b) { return add_bias(a, b); }, {3, 4}, {4});
}

TEST_CASE("finite differences: linear algebra and normalization") {
    check_binary("matmul", [](const TD& a, const TD& b) { return matmul(a, b); }, {3, 4}, {4, 2});
    check_binary("matmul_nt", [](const TD& a, const TD& b) { return matmul_nt(a, b); }, {3, 4}, {5, 4});
    check_unary("transpose", [](const TD& x) { return transpose(x); });
    check_unary("softmax axis 1", [](const TD& x) { return softmax(x, 1); });
    check_unary("softmax axis 0", [](const TD& x) { return softmax(x, 0); });
    check_unary("log_softmax", [](const TD& x) { return log_softmax(x); });
    check_unary("l2_normalize_rows", [](const TD& x) { return l2_normalize_rows(x); }, 0.2, 2.0);
    for (int i = 0; i < kInstances; ++i) {
        Rng rng(3000 + i);
        auto x = random_tensor(rng, {3, 5}, -2, 2);
        auto g = random_tensor(rng, {5}, 0.5, 1.5);
        auto b = random_tensor(rng, {5});
        const double err = gradcheck(
            [&](const std::vector<TD>& in) { return probe(layer_norm(in[0], in[1], in[2]), 5 + i); }, {x, g, b});
        INFO("layer_norm instance " << i);
        CHECK(err <= kTol);
    }
}

TEST_CASE("finite differences: structural") {
    check_unary("reshape", [](const TD& x) { return reshape(x, {4, 3}); });
    check_unary("slice_cols", [](const TD& x) { return slice_cols(x, 1, 3); });
    check_binary("concat_cols", [](const TD& a, const TD& b) { return concat_cols<double>({a, b, a}); }, {3, 2},
                 {3, 4});
    check_binary("concat_rows", [](const TD& a, const TD& b) { return concat_rows<double>({b, a}); }, {2, 4},
                 {3, 4});
    const std::vector<std::size_t> rows = {2, 0, 2, 1};
    check_unary("gather_rows", [&](const TD& x) { return gather_rows<double>(x, rows); });
    const std::vector<long> source = {1, -1, 0, -1, 2};
    check_binary("interleave_rows", [&](const TD& r, const TD& f) { return interleave_rows<double>(r, f, source); },
                 {3, 4}, {1, 4});
    const std::vector<std::size_t> group = {0, 1, 0};
    check_unary("segment_mean", [&](const TD& x) { return segment_mean<double>(x, group, 2); });
}

TEST_CASE("finite differences: composite graph") {
    for (int i = 0; i < kInstances; ++i) {
        Rng rng(4000 + i);
        auto x = random_tensor(rng, {4, 6});
        auto w = random_tensor(rng, {6, 6});
        auto b = random_tensor(rng, {6});
        const double err = gradcheck(
            [&](const std::vector<TD>& in) {
                auto h = gelu(add_bias(matmul(in[0], in[1]), in[2]));
                auto att = softmax(scale(matmul_nt(h, h), 0.3), 1);
                return mean(mul(matmul(att, h), h));
            },
            {x, w, b});
        CHECK(err <= kTol);
    }
}

TEST_CASE("l2 normalize rejects a zero row") {
    auto x = TD::from({2, 2}, {1, 0, 0, 0});
    CHECK_THROWS_AS(l2_normalize_rows(x), ContractError);
}

TEST_CASE("same graph twice gives identical results") {
    auto run = [] {
        Rng rng(42);
        auto a = random_tensor(rng, {5, 7});
        auto b = random_tensor(rng, {7, 3});
        auto loss = sum(gelu(matmul(a, b)));
        backward(loss);
        std::vector<double> out(a.grad().begin(), a.grad().end());
        out.push_back(loss.item());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("adam: first step moves by lr against the gradient sign") {
    auto w = Tensor<double>::from({3}, {0.5, -0.2, 1.0}, true);
    optim::ParamList<double> params = {{"w", w, false}};
    optim::Adam<double> adam(params, {0.9, 0.95, 0.0, 1e-8});
    w.zero_grad();
    w.grad()[0] = 3.0;
    w.grad()[1] = -0.5;
    w.grad()[2] = 2e-3;
    adam.step(params, 0.01);
    CHECK(w.data()[0] == doctest::Approx(0.5 - 0.01).epsilon(1e-6));
    CHECK(w.data()[1] == doctest::Approx(-0.2 + 0.01).epsilon(1e-6));
    CHECK(w.data()[2] == doctest::Approx(1.0 - 0.01).epsilon(1e-4));
}

TEST_CASE("adam: zero gradient and zero decay is the identity") {
    auto w = Tensor<double>::from({2, 2}, {1, 2, 3, 4}, true);
    optim::ParamList<double> params = {{"w", w, true}};
    optim::Adam<double> adam(params, {0.9, 0.95, 0.0, 1e-8});
    for (int i = 0; i < 5; ++i) {
        optim::zero_grad(params);
        adam.step(params, 0.1);
    }
    CHECK(w.data()[0] == 1.0);
    CHECK(w.data()[3] == 4.0);
}

TEST_CASE("adam: ten steps on w^2 match a scalar simulation") {
    auto w = Tensor<double>::from({1}, {1.0}, true);
    optim::ParamList<double> params = {{"w", w, true}};
    optim::Adam<double> adam(params, {0.9, 0.95, 0.05, 1e-8});
    double sw = 1.0, m = 0, v = 0;
    double previous = 1.0;
    for (int t = 1; t <= 10; ++t) {
        optim::zero_grad(params);
        backward(sum(mul(w, w)));
        adam.step(params, 0.05);
        const double g = 2 * sw;
        m = 0.9 * m + 0.1 * g;
        v = 0.95 * v + 0.05 * g * g;
        const double mh = m / (1 - std::pow(0.9, t));
        const double vh = v / (1 - std::pow(0.95, t));
        sw -= 0.05 * (mh / (std::sqrt(vh) + 1e-8) + 0.05 * sw);
        CHECK(w.data()[0] == doctest::Approx(sw).epsilon(1e-12));
        CHECK(std::abs(w.data()[0]) < previous);
        previous = std::abs(w.data()[0]);
    }
    CHECK(adam.step_count() == 10);
}

TEST_CASE("adam: missing gradient is a contract error") {
    auto w = Tensor<float>::from({1}, {1.0f}, true);
    optim::ParamList<float> params = {{"w", w, true}};
    optim::Adam<float> adam(params, {});
    CHECK_THROWS_AS(adam.step(params, 0.1), ContractError);
}

TEST_CASE("learning-rate schedule") {
    CHECK(optim::lr_schedule(0, 80, 400, 2e-4, 1e-5) == 0.0);
    CHECK(optim::lr_schedule(40, 80, 400, 2e-4, 1e-5) == doctest::Approx(1e-4));
    CHECK(optim::lr_schedule(80, 80, 400, 2e-4, 1e-5) == doctest::Approx(2e-4));
    CHECK(optim::lr_schedule(400, 80, 400, 2e-4, 1e-5) == doctest::Approx(1e-5));
    CHECK(optim::lr_schedule(240, 80, 400, 2e-4, 1e-5) == doctest::Approx(1e-5 + 0.5 * (2e-4 - 1e-5)));
    double previous = 1.0;
    for (std::size_t s = 80; s <= 400; ++s) {
        const double lr = optim::lr_schedule(s, 80, 400, 2e-4, 1e-5);
        CHECK(lr <= previous);
        previous = lr;
    }
    CHECK_THROWS_AS(optim::lr_schedule(0, 400, 400, 2e-4, 1e-5), ConfigError);
}
