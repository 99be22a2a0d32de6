#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "tide/tensor.hpp"

using namespace tide;

TEST_CASE("matmul identity and hand arithmetic") {
    Tape tape;
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {3.5, -1.0, 2.0, 7.25});
    Tensor out = tape.matmul(eye, m);
    for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == m.data()[i]);

    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    CHECK(tape.matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul shape mismatch throws") {
    Tape tape;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(tape.matmul(a, b), ShapeError);
    CHECK_THROWS_AS(tape.matmul_nt(a, b), ShapeError);
}

TEST_CASE("matmul gradient vs central finite differences") {
    std::mt19937_64 rng(7);
    Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
    Tensor b = Tensor::randn({5, 3}, rng, 1.0, true);
    // weighted sum keeps the loss sensitive to every output entry
    Tensor w = Tensor::randn({4, 3}, rng, 1.0, false);

    auto loss = [&]() {
        Tape t;
        return t.sum(t.mul(t.matmul(a, b), w)).item();
    };
    Tape tape;
    tape.backward(tape.sum(tape.mul(tape.matmul(a, b), w)));

    CHECK(gradcheck::max_rel_error(a.grad(), gradcheck::finite_diff(a, loss)) <= 1e-6);
    CHECK(gradcheck::max_rel_error(b.grad(), gradcheck::finite_diff(b, loss)) <= 1e-6);
}

TEST_CASE("matmul_nt matches explicit transpose and its gradient") {
    std::mt19937_64 rng(11);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({6, 4}, rng, 1.0, true);
    Tape tape;
    Tensor y = tape.matmul_nt(x, w);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 6; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += x.data()[i * 4 + k] * w.data()[j * 4 + k];
            CHECK(y.data()[i * 6 + j] == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    auto loss = [&]() {
        Tape t;
        return t.sum(t.silu(t.matmul_nt(x, w))).item();
    };
    Tape t2;
    t2.backward(t2.sum(t2.silu(t2.matmul_nt(x, w))));
    CHECK(gradcheck::max_rel_error(x.grad(), gradcheck::finite_diff(x, loss)) <= 1e-6);
    CHECK(gradcheck::max_rel_error(w.grad(), gradcheck::finite_diff(w, loss)) <= 1e-6);
}

TEST_CASE("rmsnorm unit cases") {
    Tape tape;
    Tensor ones = Tensor::full({4}, 1.0);
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor out = tape.rmsnorm(ones, gain, 1e-300);
    for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor x = Tensor::from({2}, {3.0, -3.0});
    Tensor g2 = Tensor::full({2}, 1.0);
    Tensor out2 = tape.rmsnorm(x, g2, 1e-300);
    CHECK(out2.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out2.data()[1] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("rmsnorm output has unit mean square at eps ~ 0") {
    std::mt19937_64 rng(3);
    Tensor x = Tensor::randn({8, 16}, rng, 2.5, false);
    Tensor gain = Tensor::full({16}, 1.0);
    Tape tape;
    Tensor y = tape.rmsnorm(x, gain, 1e-300);
    for (int r = 0; r < 8; ++r) {
        double ms = 0.0;
        for (int i = 0; i < 16; ++i) {
            const double v = y.data()[r * 16 + i];
            ms += v * v;
        }
        CHECK(ms / 16.0 == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("rmsnorm rejects non-finite input") {
    Tape tape;
    Tensor x = Tensor::from({2}, {1.0, std::numeric_limits<double>::infinity()});
    Tensor gain = Tensor::full({2}, 1.0);
    CHECK_THROWS_AS(tape.rmsnorm(x, gain, 1e-6), NumericError);
}

TEST_CASE("rmsnorm gradient vs finite differences") {
    std::mt19937_64 rng(5);
    Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
    Tensor gain = Tensor::randn({6}, rng, 0.5, true);
    Tensor w = Tensor::randn({3, 6}, rng, 1.0, false);
    auto loss = [&]() {
        Tape t;
        return t.sum(t.mul(t.rmsnorm(x, gain, 1e-6), w)).item();
    };
    Tape tape;
    tape.backward(tape.sum(tape.mul(tape.rmsnorm(x, gain, 1e-6), w)));
    CHECK(gradcheck::max_rel_error(x.grad(), gradcheck::finite_diff(x, loss)) <= 1e-6);
    CHECK(gradcheck::max_rel_error(gain.grad(), gradcheck::finite_diff(gain, loss)) <= 1e-6);
}

TEST_CASE("softmax symmetry and shift invariance") {
    Tape tape;
    Tensor z = Tensor::zeros({3});
    Tensor p = tape.softmax_lastdim(z);
    for (int i = 0; i < 3; ++i) CHECK(p.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

    Tensor big = Tensor::full({3}, 1000.0);
    Tensor pb = tape.softmax_lastdim(big);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::isfinite(pb.data()[i]));
        CHECK(pb.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    }
}

TEST_CASE("softmax rows sum to one with positive entries") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({4, 7}, rng, 50.0, false);
        Tape tape;
        Tensor p = tape.softmax_lastdim(x);
        for (int r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int i = 0; i < 7; ++i) {
                CHECK(p.data()[r * 7 + i] > 0.0);
                s += p.data()[r * 7 + i];
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softmax gradient vs finite differences") {
    std::mt19937_64 rng(13);
    Tensor x = Tensor::randn({2, 5}, rng, 1.0, true);
    Tensor w = Tensor::randn({2, 5}, rng, 1.0, false);
    auto loss = [&]() {
        Tape t;
        return t.sum(t.mul(t.softmax_lastdim(x), w)).item();
    };
    Tape tape;
    tape.backward(tape.sum(tape.mul(tape.softmax_lastdim(x), w)));
    CHECK(gradcheck::max_rel_error(x.grad(), gradcheck::finite_diff(x, loss)) <= 1e-6);
}

TEST_CASE("silu values and gradient") {
    Tape tape;
    Tensor x = Tensor::from({3}, {0.0, 40.0, -40.0});
    Tensor y = tape.silu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == doctest::Approx(40.0).epsilon(1e-12));
    CHECK(std::abs(y.data()[2]) <= 1e-12);

    std::mt19937_64 rng(17);
    Tensor z = Tensor::randn({10}, rng, 2.0, true);
    auto loss = [&]() {
        Tape t;
        return t.sum(t.silu(z)).item();
    };
    Tape t2;
    t2.backward(t2.sum(t2.silu(z)));
    CHECK(gradcheck::max_rel_error(z.grad(), gradcheck::finite_diff(z, loss)) <= 1e-6);
}

TEST_CASE("embedding lookup basics and gradient sparsity") {
    Tensor table = Tensor::zeros({4, 3}, true);
    Tape tape;
    std::vector<int32_t> ids = {0};
    Tensor row = tape.embedding_lookup(table, ids, {1});
    for (int i = 0; i < 3; ++i) CHECK(row.data()[i] == 0.0);

    std::mt19937_64 rng(19);
    Tensor t2 = Tensor::randn({5, 3}, rng, 1.0, true);
    std::vector<int32_t> batch = {1, 3, 1};  // id 1 twice, ids 0/2/4 absent
    Tape tape2;
    Tensor rows = tape2.embedding_lookup(t2, batch, {3});
    Tensor w = Tensor::randn({3, 3}, rng, 1.0, false);
    tape2.backward(tape2.sum(tape2.mul(rows, w)));

    for (int32_t absent : {0, 2, 4}) {
        for (int j = 0; j < 3; ++j) CHECK(t2.grad()[absent * 3 + j] == 0.0);
    }
    // duplicate id accumulates per-occurrence grads (looped oracle)
    for (int j = 0; j < 3; ++j) {
        const double expect = w.data()[0 * 3 + j] + w.data()[2 * 3 + j];
        CHECK(t2.grad()[1 * 3 + j] == doctest::Approx(expect).epsilon(1e-15));
        CHECK(t2.grad()[3 * 3 + j] == doctest::Approx(w.data()[1 * 3 + j]).epsilon(1e-15));
    }
}

TEST_CASE("embedding lookup rejects out-of-range ids") {
    Tensor table = Tensor::zeros({4, 3});
    Tape tape;
    std::vector<int32_t> bad = {4};
    CHECK_THROWS_AS(tape.embedding_lookup(table, bad, {1}), IndexError);
}

TEST_CASE("cross entropy with z-loss analytic cases") {
    const int v = 8;
    Tensor logits = Tensor::zeros({3, v}, true);
    std::vector<int32_t> targets = {0, 5, 7};
    Tape tape;
    const double z_coeff = 1e-6;
    const double loss = tape.cross_entropy_zloss(logits, targets, z_coeff).item();
    const double lnv = std::log(static_cast<double>(v));
    CHECK(loss == doctest::Approx(lnv + z_coeff * lnv * lnv).epsilon(1e-12));

    Tape t2;
    const double plain = t2.cross_entropy_zloss(logits, targets, 0.0).item();
    CHECK(plain == doctest::Approx(lnv).epsilon(1e-12));
}

TEST_CASE("cross entropy gradient vs finite differences") {
    std::mt19937_64 rng(23);
    Tensor logits = Tensor::randn({3, 8}, rng, 1.0, true);
    std::vector<int32_t> targets = {2, 0, 7};
    auto loss = [&]() {
        Tape t;
        return t.cross_entropy_zloss(logits, targets, 1e-6).item();
    };
    Tape tape;
    tape.backward(tape.cross_entropy_zloss(logits, targets, 1e-6));
    CHECK(gradcheck::max_rel_error(logits.grad(), gradcheck::finite_diff(logits, loss)) <= 1e-5);
}

TEST_CASE("cross entropy rejects invalid targets") {
    Tensor logits = Tensor::zeros({2, 4});
    Tape tape;
    std::vector<int32_t> bad = {0, 4};
    CHECK_THROWS_AS(tape.cross_entropy_zloss(logits, bad, 0.0), IndexError);
}

TEST_CASE("backward of sum gives all-ones and requires a scalar") {
    Tensor x = Tensor::zeros({2, 3}, true);
    Tape tape;
    tape.backward(tape.sum(x));
    for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0);

    Tape t2;
    Tensor y = t2.add(x, x);
    CHECK_THROWS_AS(t2.backward(y), ShapeError);
}

TEST_CASE("tape replays each node once and clears itself") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor y = tape.scale(x, 3.0);
    CHECK(tape.node_count() == 1);
    tape.backward(tape.sum(y));
    CHECK(tape.node_count() == 0);
    CHECK(x.grad()[0] == 3.0);
    CHECK(x.grad()[1] == 3.0);
}

TEST_CASE("add3 is invariant under swapping its last two inputs") {
    std::mt19937_64 rng(29);
    Tensor a = Tensor::randn({4, 4}, rng, 1.0, false);
    Tensor b = Tensor::randn({4, 4}, rng, 1.0, false);
    Tensor c = Tensor::randn({4, 4}, rng, 1.0, false);
    Tape tape;
    Tensor u = tape.add3(a, b, c);
    Tensor w = tape.add3(a, c, b);
    for (int i = 0; i < 16; ++i) CHECK(u.data()[i] == w.data()[i]);
}

TEST_CASE("stack_k slices are bitwise the inputs") {
    std::mt19937_64 rng(31);
    std::vector<Tensor> xs;
    for (int k = 0; k < 3; ++k) xs.push_back(Tensor::randn({2, 5}, rng, 1.0, false));
    Tape tape;
    Tensor m = tape.stack_k(xs);
    REQUIRE(m.shape() == Shape{2, 3, 5});
    for (int r = 0; r < 2; ++r) {
        for (int k = 0; k < 3; ++k) {
            for (int j = 0; j < 5; ++j) {
                CHECK(m.data()[(r * 3 + k) * 5 + j] == xs[k].data()[r * 5 + j]);
            }
        }
    }
}

TEST_CASE("non-recording tape computes values without grads") {
    std::mt19937_64 rng(37);
    Tensor x = Tensor::randn({3, 3}, rng, 1.0, true);
    Tape eval(false);
    Tensor y = eval.silu(x);
    CHECK_FALSE(y.requires_grad());
    CHECK(eval.node_count() == 0);
}
