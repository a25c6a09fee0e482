#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "rasa/adam.hpp"
#include "rasa/attention.hpp"
#include "rasa/rng.hpp"
#include "rasa/tensor.hpp"

using namespace rasa;

namespace {

Tensor random_tensor(Rng& rng, int rows, int cols, bool requires_grad = false, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor::from_values(rows, cols, std::move(v), requires_grad);
}

AttentionParams random_attention(Rng& rng, int d, int heads) {
    AttentionParams p;
    p.n_heads = heads;
    p.wq = random_tensor(rng, d, d, true, 0.5);
    p.wk = random_tensor(rng, d, d, true, 0.5);
    p.wv = random_tensor(rng, d, d, true, 0.5);
    p.wo = random_tensor(rng, d, d, true, 0.5);
    p.bq = random_tensor(rng, 1, d, true, 0.1);
    p.bk = random_tensor(rng, 1, d, true, 0.1);
    p.bv = random_tensor(rng, 1, d, true, 0.1);
    p.bo = random_tensor(rng, 1, d, true, 0.1);
    return p;
}

std::vector<double> to_vec(const Tensor& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

TEST_SUITE("numcore") {

TEST_CASE("matmul identity leaves any 2x2 matrix unchanged") {
    Tensor id = Tensor::from_values(2, 2, {1, 0, 0, 1});
    Tensor a = Tensor::from_values(2, 2, {3.5, -2, 0.25, 7});
    Tensor c = matmul(id, a);
    CHECK(c.equals_bitwise(a));
}

TEST_CASE("matmul with a zero column vector annihilates") {
    Tensor a = Tensor::from_values(2, 2, {1, 2, 3, 4});
    Tensor z = Tensor::from_values(2, 1, {0, 0});
    Tensor c = matmul(a, z);
    CHECK(c.at(0, 0) == 0.0);
    CHECK(c.at(1, 0) == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    Rng rng(11);
    Tensor a = random_tensor(rng, 3, 4);
    Tensor b = random_tensor(rng, 4, 2);
    Tensor c = matmul(a, b);
    auto want = oracle::matmul_triple_loop(to_vec(a), 3, 4, to_vec(b), 2);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(c.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    Tensor a = Tensor::zeros(2, 3);
    Tensor b = Tensor::zeros(2, 3);
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
    }
}

TEST_CASE("softmax of a constant row is uniform") {
    Tensor x = Tensor::from_values(1, 3, {0, 0, 0});
    Tensor y = softmax_rows(x);
    for (int j = 0; j < 3; ++j) CHECK(y.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax of [0, ln 2] is [1/3, 2/3]") {
    Tensor x = Tensor::from_values(1, 2, {0.0, std::log(2.0)});
    Tensor y = softmax_rows(x);
    CHECK(y.at(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(y.at(0, 1) == doctest::Approx(2.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor(rng, 4, 6, false, 10.0);
        double c = rng.uniform(-50.0, 50.0);
        Tensor shifted = add_scalar(x, c);
        Tensor y0 = softmax_rows(x);
        Tensor y1 = softmax_rows(shifted);
        for (int i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (int j = 0; j < 6; ++j) {
                sum += y0.at(i, j);
                CHECK(std::fabs(y0.at(i, j) - y1.at(i, j)) < 1e-9);
            }
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("attention with a single key puts weight one on its value row") {
    Rng rng(3);
    const int d = 8;
    AttentionParams p = random_attention(rng, d, 2);
    Tensor q1 = random_tensor(rng, 1, d);
    Tensor q2 = random_tensor(rng, 1, d, false, 5.0);
    Tensor k = random_tensor(rng, 1, d);
    Tensor v = random_tensor(rng, 1, d);

    Tensor out1 = multi_head_attention(q1, k, v, p);
    Tensor out2 = multi_head_attention(q2, k, v, p);
    // output-projected value row, independent of the query content
    Tensor expected = add_rowvec(matmul(add_rowvec(matmul(v, p.wv), p.bv), p.wo), p.bo);
    for (int j = 0; j < d; ++j) {
        CHECK(out1.at(0, j) == doctest::Approx(expected.at(0, j)).epsilon(1e-12));
        CHECK(out2.at(0, j) == doctest::Approx(expected.at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("attention is invariant to joint key/value permutations and equivariant in queries") {
    Rng rng(17);
    const int d = 8, nq = 3, nk = 5;
    AttentionParams p = random_attention(rng, d, 4);
    Tensor q = random_tensor(rng, nq, d);
    Tensor k = random_tensor(rng, nk, d);
    Tensor v = random_tensor(rng, nk, d);
    Tensor base = multi_head_attention(q, k, v, p);

    std::vector<int> perm{3, 0, 4, 2, 1};
    Tensor kp = gather_rows(k, perm);
    Tensor vp = gather_rows(v, perm);
    Tensor permuted = multi_head_attention(q, kp, vp, p);
    for (int i = 0; i < nq; ++i)
        for (int j = 0; j < d; ++j)
            CHECK(std::fabs(base.at(i, j) - permuted.at(i, j)) < 1e-9);

    std::vector<int> qperm{2, 0, 1};
    Tensor out_qperm = multi_head_attention(gather_rows(q, qperm), k, v, p);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d; ++j)
            CHECK(std::fabs(out_qperm.at(i, j) - base.at(qperm[i], j)) < 1e-9);
}

TEST_CASE("attention matches the per-head loop oracle on a 2-query/3-key case") {
    Rng rng(23);
    const int d = 6, nq = 2, nk = 3;
    AttentionParams p = random_attention(rng, d, 3);
    Tensor q = random_tensor(rng, nq, d);
    Tensor k = random_tensor(rng, nk, d);
    Tensor v = random_tensor(rng, nk, d);
    Tensor got = multi_head_attention(q, k, v, p);

    oracle::AttentionWeightsRef w{to_vec(p.wq), to_vec(p.bq), to_vec(p.wk), to_vec(p.bk),
                                  to_vec(p.wv), to_vec(p.bv), to_vec(p.wo), to_vec(p.bo)};
    auto want = oracle::mha_loop_reference(to_vec(q), nq, to_vec(k), nk, to_vec(v), d, 3, w);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(std::fabs(got.data()[i] - want[i]) < 1e-10);
}

TEST_CASE("attention rejects an indivisible head count") {
    Rng rng(2);
    AttentionParams p = random_attention(rng, 6, 3);
    p.n_heads = 4;
    Tensor q = random_tensor(rng, 2, 6);
    CHECK_THROWS_AS(multi_head_attention(q, q, q, p), ConfigError);
}

TEST_CASE("empty bags are unrepresentable as tensors") {
    CHECK_THROWS_AS(Tensor::zeros(0, 4), ShapeError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Tensor x = Tensor::from_values(2, 3, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = sum_all(x);
        backward(tape, loss);
    }
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward through sigmoid at zero gives a quarter") {
    Tensor x = Tensor::scalar(0.0, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = sigmoid(x);
        backward(tape, loss);
    }
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tensor x = Tensor::from_values(1, 2, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(backward(tape, y), NumericError);
}

TEST_CASE("unreached parameters keep zero gradients") {
    Tensor used = Tensor::scalar(1.0, true);
    Tensor unused = Tensor::scalar(2.0, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = scale(used, 3.0);
        backward(tape, loss);
    }
    CHECK(used.grad()[0] == 3.0);
    CHECK(unused.grad()[0] == 0.0);
}

TEST_CASE("analytic gradients match central differences for every primitive") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed * 7919 + 1);
        Tensor a = random_tensor(rng, 3, 4, true);
        Tensor b = random_tensor(rng, 4, 3, true);
        Tensor c = random_tensor(rng, 3, 4, true);
        Tensor gamma = random_tensor(rng, 1, 4, true, 0.5);
        Tensor beta = random_tensor(rng, 1, 4, true, 0.5);
        Tensor bias = random_tensor(rng, 1, 3, true, 0.5);
        AttentionParams attn = random_attention(rng, 4, 2);

        struct NamedCase {
            const char* name;
            std::vector<Tensor> params;
            std::function<Tensor()> build;
        };
        std::vector<NamedCase> cases;
        cases.push_back({"matmul", {a, b}, [&]() { return sum_all(matmul(a, b)); }});
        cases.push_back({"softmax_rows", {a}, [&]() { return sum_all(mul(softmax_rows(a), c)); }});
        cases.push_back({"layer_norm", {a, gamma, beta}, [&]() {
                             return sum_all(mul(layer_norm_rows(a, gamma, beta), c));
                         }});
        cases.push_back({"linear", {a, b, bias}, [&]() {
                             return sum_all(sigmoid(add_rowvec(matmul(a, b), bias)));
                         }});
        cases.push_back({"attention", {a, attn.wq, attn.wk, attn.wv, attn.wo, attn.bo}, [&]() {
                             return sum_all(multi_head_attention(a, a, a, attn));
                         }});
        cases.push_back({"mean_rows", {a}, [&]() { return logsumexp_all(mean_rows(a)); }});
        cases.push_back({"sigmoid", {a}, [&]() { return sum_all(sigmoid(a)); }});
        cases.push_back({"logsumexp", {a}, [&]() { return logsumexp_all(a); }});
        cases.push_back({"add", {a, c}, [&]() { return logsumexp_all(add(a, c)); }});
        cases.push_back({"sub_mul", {a, c}, [&]() { return sum_all(mul(sub(a, c), a)); }});
        cases.push_back({"scale", {a}, [&]() { return sum_all(scale(a, -2.5)); }});
        cases.push_back({"gelu", {a}, [&]() { return sum_all(gelu(a)); }});
        cases.push_back({"transpose_slice_concat", {a, b}, [&]() {
                             Tensor t = transpose(matmul(a, b));  // 3x3
                             Tensor s = slice_rows(t, 0, 2);
                             Tensor u = slice_cols(t, 1, 3);
                             return add(sum_all(concat_rows({s, s})), sum_all(concat_cols({u, u})));
                         }});
        cases.push_back({"gather", {a}, [&]() {
                             return sum_all(mul(gather_rows(a, {2, 0, 2}), gather_rows(c, {2, 0, 2})));
                         }});

        for (auto& tc : cases) {
            for (auto& p : tc.params) p.zero_grad();
            Tape tape;
            Tensor loss;
            {
                TapeScope scope(tape);
                loss = tc.build();
                backward(tape, loss);
            }
            auto forward_value = [&]() { return tc.build().value(); };
            double err = oracle::max_grad_rel_error(tc.params, forward_value);
            INFO("primitive: " << tc.name << " seed " << seed);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("non-finite forward values abort with the op name") {
    Tensor big = Tensor::full(1, 2, 1e308);
    try {
        mul(big, big);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("identical seeds give bitwise-identical op outputs") {
    auto run = []() {
        Rng rng(99);
        Tensor a = random_tensor(rng, 5, 5);
        Tensor b = random_tensor(rng, 5, 5);
        return softmax_rows(matmul(gelu(a), b));
    };
    CHECK(run().equals_bitwise(run()));
}

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
    Tensor p = Tensor::from_values(2, 2, {1, 2, 3, 4}, true);
    std::vector<Tensor> params{p};
    AdamState state = AdamState::for_params(params);
    Tensor before = p.detached();
    adam_step(params, state, 0.01);
    CHECK(p.equals_bitwise(before));
    CHECK(state.step_count == 1);
}

TEST_CASE("adam step magnitude approaches lr under a constant gradient") {
    Tensor p = Tensor::scalar(0.0, true);
    std::vector<Tensor> params{p};
    AdamState state = AdamState::for_params(params);
    const double lr = 1e-3, g = 0.37;
    double prev = p.value();
    double step_size = 0.0;
    for (int i = 0; i < 1000; ++i) {
        p.mutable_grad()[0] = g;
        adam_step(params, state, lr);
        step_size = std::fabs(p.value() - prev);
        prev = p.value();
    }
    CHECK(step_size == doctest::Approx(lr).epsilon(0.01));
}

TEST_CASE("adam is deterministic for identical seeds and inputs") {
    auto run = []() {
        Rng rng(4242);
        Tensor p = random_tensor(rng, 3, 3, true);
        std::vector<Tensor> params{p};
        AdamState state = AdamState::for_params(params);
        for (int step = 0; step < 50; ++step) {
            zero_grads(params);
            Tape tape;
            {
                TapeScope scope(tape);
                Tensor loss = sum_all(mul(p, p));
                backward(tape, loss);
            }
            adam_step(params, state, 1e-2);
        }
        return p;
    };
    CHECK(run().equals_bitwise(run()));
}

TEST_CASE("adam rejects misaligned state") {
    Tensor p = Tensor::scalar(0.0, true);
    std::vector<Tensor> params{p};
    AdamState state = AdamState::for_params(params);
    params.push_back(Tensor::scalar(1.0, true));
    CHECK_THROWS_AS(adam_step(params, state, 1e-3), ShapeError);
}

}  // TEST_SUITE
