#include <doctest.h>

#include <functional>

#include "synbind/autodiff.hpp"
#include "synbind/nn.hpp"
#include "synbind/rng.hpp"

using namespace synbind;

namespace {

// Central-difference check: build() must construct the graph from the
// given leaf values and return the loss node. Every leaf entry is
// perturbed; relative error is measured against the analytic gradient.
void check_gradients(const std::vector<MatD>& leaves,
                     const std::function<int(Tape<double>&, const std::vector<int>&)>& build,
                     double h = 1e-5, double tol = 1e-6) {
    Tape<double> tape;
    std::vector<int> ids;
    for (const auto& m : leaves) ids.push_back(tape.input(m));
    int loss = build(tape, ids);
    tape.backward(loss);

    for (size_t li = 0; li < leaves.size(); ++li) {
        const MatD& grad = tape.grad_of(ids[li]);
        for (Eigen::Index r = 0; r < leaves[li].rows(); ++r)
            for (Eigen::Index c = 0; c < leaves[li].cols(); ++c) {
                auto eval = [&](double delta) {
                    Tape<double> t2;
                    std::vector<int> ids2;
                    for (size_t k = 0; k < leaves.size(); ++k) {
                        MatD m = leaves[k];
                        if (k == li) m(r, c) += delta;
                        ids2.push_back(t2.input(m));
                    }
                    return t2.val(build(t2, ids2))(0, 0);
                };
                double numeric  = (eval(h) - eval(-h)) / (2 * h);
                double analytic = grad.rows() ? grad(r, c) : 0.0;
                double denom    = std::max({std::fabs(numeric), std::fabs(analytic), 1e-4});
                CHECK(std::fabs(numeric - analytic) / denom < tol);
            }
    }
}

MatD randm(int r, int c, Rng& rng) { return randn_mat<double>(r, c, rng); }

}  // namespace

TEST_CASE("gradients of the arithmetic and structure ops check out") {
    Rng rng(101);

    SUBCASE("matmul in all transpose combinations") {
        MatD target = randm(3, 2, rng);
        for (int ta = 0; ta < 2; ++ta)
            for (int tb = 0; tb < 2; ++tb) {
                MatD a = ta ? randm(4, 3, rng) : randm(3, 4, rng);
                MatD b = tb ? randm(2, 4, rng) : randm(4, 2, rng);
                check_gradients({a, b}, [&, ta, tb](Tape<double>& t, const std::vector<int>& ids) {
                    return t.mse(t.matmul(ids[0], ids[1], ta, tb), target);
                });
            }
    }

    SUBCASE("add, sub, hadamard, row bias, scalar affine") {
        MatD a = randm(3, 3, rng), b = randm(3, 3, rng), r = randm(1, 3, rng);
        MatD s = randm(1, 1, rng), bias = randm(1, 1, rng);
        MatD target = randm(3, 3, rng);
        check_gradients({a, b, r, s, bias}, [&](Tape<double>& t, const std::vector<int>& ids) {
            int x = t.hadamard(t.add(ids[0], ids[1]), t.sub(ids[0], ids[1]));
            x     = t.add_rowvec(x, ids[2]);
            x     = t.scale_by(x, ids[3]);
            x     = t.add_scalar_bias(x, ids[4]);
            return t.mse(x, target);
        });
    }

    SUBCASE("silu, sigmoid, softmax, layernorm") {
        MatD x = randm(4, 5, rng);
        MatD gain = MatD::Ones(1, 5), bias = MatD::Zero(1, 5);
        MatD target = randm(4, 5, rng);
        check_gradients({x, gain, bias}, [&](Tape<double>& t, const std::vector<int>& ids) {
            int h = t.silu(ids[0]);
            h     = t.layernorm_rows(h, ids[1], ids[2]);
            h     = t.softmax_rows(h);
            h     = t.sigmoid(h);
            return t.mse(h, target);
        }, 1e-5, 1e-5);
    }

    SUBCASE("masked softmax ignores forbidden cells") {
        MatD x    = randm(3, 4, rng);
        MatD mask = MatD::Zero(3, 4);
        mask(0, 1) = -std::numeric_limits<double>::infinity();
        mask(2, 3) = -std::numeric_limits<double>::infinity();
        MatD target = randm(3, 4, rng);
        check_gradients({x}, [&](Tape<double>& t, const std::vector<int>& ids) {
            return t.mse(t.softmax_rows(ids[0], &mask), target);
        });
    }

    SUBCASE("film applies per-block scale and shift") {
        MatD x = randm(6, 3, rng), sc = randm(2, 3, rng), sh = randm(2, 3, rng);
        MatD target = randm(6, 3, rng);
        check_gradients({x, sc, sh}, [&](Tape<double>& t, const std::vector<int>& ids) {
            return t.mse(t.film(ids[0], ids[1], ids[2], 3), target);
        });
    }

    SUBCASE("slices, concats, gather, transpose") {
        MatD a = randm(4, 6, rng), b = randm(2, 6, rng);
        MatD target = randm(3, 4, rng);
        check_gradients({a, b}, [&](Tape<double>& t, const std::vector<int>& ids) {
            int cat = t.concat_rows({t.slice_rows(ids[0], 1, 2), ids[1]});
            int g   = t.gather_rows(cat, {3, 0, 2});
            int s   = t.slice_cols(g, 1, 4);
            return t.mse(t.transpose(t.transpose(s)), target);
        });
    }

    SUBCASE("im2col convolution path") {
        MatD x = randm(2 * 4 * 4, 3, rng);  // batch 2, 4x4, 3 channels
        MatD w = randm(9 * 3, 5, rng);
        MatD target = randm(2 * 4 * 4, 5, rng);
        check_gradients({x, w}, [&](Tape<double>& t, const std::vector<int>& ids) {
            return t.mse(t.matmul(t.im2col(ids[0], 2, 4, 4, 3, 1), ids[1]), target);
        });
    }

    SUBCASE("strided im2col and upsample") {
        MatD x = randm(4 * 4, 2, rng);
        MatD w = randm(9 * 2, 3, rng);
        MatD target = randm(4 * 4, 3, rng);
        check_gradients({x, w}, [&](Tape<double>& t, const std::vector<int>& ids) {
            int down = t.matmul(t.im2col(ids[0], 1, 4, 4, 3, 2), ids[1]);  // 2x2 grid
            return t.mse(t.upsample2x(down, 1, 2, 2), target);
        });
    }

    SUBCASE("l2 row normalization") {
        MatD x = randm(3, 4, rng);
        MatD target = randm(3, 4, rng);
        check_gradients({x}, [&](Tape<double>& t, const std::vector<int>& ids) {
            return t.mse(t.l2_normalize_rows(ids[0]), target);
        });
    }
}

TEST_CASE("loss gradients match finite differences") {
    Rng rng(102);

    SUBCASE("cross entropy with obscured rows") {
        MatD x = randm(4, 3, rng);
        check_gradients({x}, [&](Tape<double>& t, const std::vector<int>& ids) {
            return t.cross_entropy_logits(ids[0], {0, 2, 1, 0}, {1.0, 0.0, 1.0, 1.0});
        });
    }

    SUBCASE("binary cross entropy with obscured rows") {
        MatD x = randm(3, 4, rng);
        MatD targets(3, 4);
        targets << 1, 0, 0, 1, 0, 1, 0, 0, 1, 1, 1, 0;
        check_gradients({x}, [&](Tape<double>& t, const std::vector<int>& ids) {
            return t.bce_logits(ids[0], targets, {1.0, 0.0, 1.0});
        });
    }

    SUBCASE("obscured rows receive exactly zero gradient") {
        Tape<double> t;
        int x    = t.input(randm(3, 4, rng));
        int loss = t.cross_entropy_logits(x, {0, 1, 2}, {0.0, 1.0, 0.0});
        t.backward(loss);
        CHECK(t.grad_of(x).row(0).cwiseAbs().maxCoeff() == 0.0);
        CHECK(t.grad_of(x).row(2).cwiseAbs().maxCoeff() == 0.0);
        CHECK(t.grad_of(x).row(1).cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("im2col matches a naive convolution") {
    Rng rng(103);
    const int h = 5, w = 5, cin = 2, cout = 3;
    MatT<float> x = randn_mat<float>(h * w, cin, rng);
    MatT<float> kw = randn_mat<float>(9 * cin, cout, rng);

    Tape<float> t;
    int xi   = t.input(x);
    int cols = t.im2col(xi, 1, h, w, 3, 1);
    int y    = t.matmul(cols, t.input(kw));
    const auto& got = t.val(y);

    for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox)
            for (int oc = 0; oc < cout; ++oc) {
                float acc = 0.f;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        int sy = oy + ky - 1, sx = ox + kx - 1;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        for (int c = 0; c < cin; ++c)
                            acc += x(sy * w + sx, c) * kw((ky * 3 + kx) * cin + c, oc);
                    }
                CHECK(got(oy * w + ox, oc) == doctest::Approx(acc).epsilon(1e-4));
            }
}

TEST_CASE("adam drives a quadratic to its minimum") {
    ParamStore<float> ps;
    Rng rng(104);
    auto* p = ps.create("p", 1, 4);
    p->w    = randn_mat<float>(1, 4, rng);
    MatT<float> target = randn_mat<float>(1, 4, rng);

    AdamOptimizer<float> opt;
    opt.lr = 0.05f;
    for (int step = 0; step < 400; ++step) {
        Tape<float> t;
        Binder<float> bind(t);
        int loss = t.mse(bind(p), target);
        t.backward(loss);
        bind.pull_grads();
        opt.update(ps);
    }
    CHECK((p->w - target).cwiseAbs().maxCoeff() < 1e-2f);
}

TEST_CASE("attention layer is causal when masked") {
    ParamStore<float> ps;
    Rng rng(105);
    TransformerBlock<float> block(ps, "blk", 8, 2, 2, rng);

    MatT<float> x1 = randn_mat<float>(4, 8, rng);
    MatT<float> x2 = x1;
    x2.row(3) += MatT<float>::Constant(1, 8, 1.f);  // change only the last position

    auto mask = causal_mask<float>(4);
    Tape<float> t1, t2;
    Binder<float> b1(t1), b2(t2);
    const auto& y1 = t1.val(block.forward(t1, b1, t1.input(x1), &mask));
    const auto& y2 = t2.val(block.forward(t2, b2, t2.input(x2), &mask));
    // earlier positions cannot see the change
    CHECK((y1.topRows(3) - y2.topRows(3)).cwiseAbs().maxCoeff() == 0.f);
    CHECK((y1.row(3) - y2.row(3)).cwiseAbs().maxCoeff() > 0.f);
}
