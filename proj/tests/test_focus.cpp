#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "synbind/focus.hpp"
#include "synbind/rng.hpp"

using namespace synbind;

namespace {

// Naive cell-by-cell evaluation of the masking rule: for every cell,
// recompute the dependent-column value and its per-column extrema with
// plain loops. Deliberately structured differently from the library code.
Mat naive_focus_mask(const Mat& a_star, const Mat& d, float s) {
    const int pixels = static_cast<int>(a_star.rows());
    const int n      = static_cast<int>(a_star.cols());
    Mat mask = Mat::Zero(pixels, n);
    for (int j = 0; j < n; ++j) {
        bool any = false;
        for (int k = 0; k < n; ++k) any = any || d(j, k) != 0.f;
        if (!any) continue;
        float lo = 0, hi = 0;
        for (int p = 0; p < pixels; ++p) {
            float b = 0.f;
            for (int k = 0; k < n; ++k) b += a_star(p, k) * d(j, k);
            if (p == 0) { lo = b; hi = b; }
            lo = std::min(lo, b);
            hi = std::max(hi, b);
        }
        if (hi == lo) continue;
        for (int i = 0; i < pixels; ++i) {
            float b = 0.f;
            for (int k = 0; k < n; ++k) b += a_star(i, k) * d(j, k);
            if ((b - lo) / (hi - lo) < s) mask(i, j) = kNegInf;
        }
    }
    return mask;
}

// Dense reference interpolation: evaluate the full 2D kernel sum per
// output pixel in double, no separable passes.
MatD reference_bicubic(const Mat& src, int out_h, int out_w) {
    auto kernel = [](double x) {
        const double a = -0.5;
        x = std::fabs(x);
        if (x < 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
        if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
        return 0.0;
    };
    const int in_h = static_cast<int>(src.rows()), in_w = static_cast<int>(src.cols());
    MatD out(out_h, out_w);
    for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox) {
            double sy = (oy + 0.5) * in_h / out_h - 0.5;
            double sx = (ox + 0.5) * in_w / out_w - 0.5;
            double acc = 0;
            for (int ky = -1; ky <= 2; ++ky)
                for (int kx = -1; kx <= 2; ++kx) {
                    int iy = std::clamp(static_cast<int>(std::floor(sy)) + ky, 0, in_h - 1);
                    int ix = std::clamp(static_cast<int>(std::floor(sx)) + kx, 0, in_w - 1);
                    acc += kernel(sy - (std::floor(sy) + ky)) * kernel(sx - (std::floor(sx) + kx)) *
                           static_cast<double>(src(iy, ix));
                }
            out(oy, ox) = acc;
        }
    return out;
}

Mat random_rowstochastic(int rows, int cols, Rng& rng) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        float sum = 0.f;
        for (int j = 0; j < cols; ++j) {
            m(i, j) = static_cast<float>(rng.uniform()) + 1e-4f;
            sum += m(i, j);
        }
        m.row(i) /= sum;
    }
    return m;
}

Mat random_dependency(int n, Rng& rng, double density = 0.3) {
    Mat d = Mat::Zero(n, n);
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k)
            if (j != k && rng.uniform() < density) d(j, k) = 1.f;
    return d;
}

}  // namespace

TEST_CASE("aggregate_attention averages maps at the largest grid") {
    SUBCASE("single entry passes through") {
        Rng rng(1);
        AttentionRecord rec;
        rec.entries.push_back({0, 5, 4, 4, random_rowstochastic(16, 3, rng)});
        auto avg = aggregate_attention(rec);
        CHECK(avg.h == 4);
        CHECK(avg.w == 4);
        CHECK((avg.a_star - rec.entries[0].map).cwiseAbs().maxCoeff() == 0.f);
    }

    SUBCASE("same-size entries average elementwise") {
        Rng rng(2);
        AttentionRecord rec;
        rec.entries.push_back({0, 5, 4, 4, random_rowstochastic(16, 3, rng)});
        rec.entries.push_back({1, 5, 4, 4, random_rowstochastic(16, 3, rng)});
        auto avg = aggregate_attention(rec);
        Mat mean = (rec.entries[0].map + rec.entries[1].map) / 2.f;
        CHECK((avg.a_star - mean).cwiseAbs().maxCoeff() < 1e-7f);
    }

    SUBCASE("smaller maps are upsampled with the cubic kernel") {
        Rng rng(3);
        for (int trial = 0; trial < 5; ++trial) {
            AttentionRecord rec;
            rec.entries.push_back({0, 1, 8, 8, random_rowstochastic(64, 4, rng)});
            rec.entries.push_back({1, 1, 16, 16, random_rowstochastic(256, 4, rng)});
            auto avg = aggregate_attention(rec);
            REQUIRE(avg.h == 16);
            for (int j = 0; j < 4; ++j) {
                Mat grid(8, 8);
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) grid(y, x) = rec.entries[0].map(y * 8 + x, j);
                MatD ref = reference_bicubic(grid, 16, 16);
                for (int y = 0; y < 16; ++y)
                    for (int x = 0; x < 16; ++x) {
                        float expect = 0.5f * (static_cast<float>(ref(y, x)) +
                                               rec.entries[1].map(y * 16 + x, j));
                        CHECK(avg.a_star(y * 16 + x, j) == doctest::Approx(expect).epsilon(1e-4));
                    }
            }
        }
    }

    SUBCASE("inconsistent token counts are rejected") {
        Rng rng(4);
        AttentionRecord rec;
        rec.entries.push_back({0, 1, 4, 4, random_rowstochastic(16, 3, rng)});
        rec.entries.push_back({1, 1, 4, 4, random_rowstochastic(16, 5, rng)});
        CHECK_THROWS_AS(aggregate_attention(rec), ShapeError);
    }

    SUBCASE("empty record is rejected") { CHECK_THROWS_AS(aggregate_attention({}), ParamError); }
}

TEST_CASE("compute_focus_mask follows the thresholded normalization") {
    SUBCASE("worked 2x2 example") {
        AveragedAttention avg;
        avg.h = 2;
        avg.w = 1;
        avg.a_star = Mat(2, 2);
        avg.a_star << 1.0f, 0.3f, 0.0f, 0.7f;
        DependencyMatrix dep;
        dep.d = Mat(2, 2);
        dep.d << 0, 0, 1, 0;  // token 1 depends on token 0
        auto fm = compute_focus_mask(avg, dep, 0.5f);
        CHECK(fm.mask(0, 0) == 0.f);
        CHECK(fm.mask(1, 0) == 0.f);
        CHECK(fm.mask(0, 1) == 0.f);
        CHECK(std::isinf(fm.mask(1, 1)));
        CHECK(fm.mask(1, 1) < 0.f);
    }

    SUBCASE("threshold zero masks nothing") {
        Rng rng(5);
        AveragedAttention avg{random_rowstochastic(16, 4, rng), 4, 4};
        DependencyMatrix dep{random_dependency(4, rng)};
        auto fm = compute_focus_mask(avg, dep, 0.f);
        CHECK(fm.mask.cwiseAbs().maxCoeff() == 0.f);
    }

    SUBCASE("constant dependent column stays unmasked") {
        AveragedAttention avg;
        avg.h = 2;
        avg.w = 1;
        avg.a_star = Mat(2, 2);
        avg.a_star << 0.5f, 0.5f, 0.5f, 0.5f;
        DependencyMatrix dep;
        dep.d = Mat(2, 2);
        dep.d << 0, 0, 1, 0;
        auto fm = compute_focus_mask(avg, dep, 0.9f);
        CHECK(fm.mask.cwiseAbs().maxCoeff() == 0.f);
    }

    SUBCASE("errors") {
        Rng rng(6);
        AveragedAttention avg{random_rowstochastic(4, 2, rng), 2, 2};
        DependencyMatrix dep{random_dependency(2, rng)};
        CHECK_THROWS_AS(compute_focus_mask(avg, dep, -0.1f), ParamError);
        CHECK_THROWS_AS(compute_focus_mask(avg, dep, 1.5f), ParamError);
        avg.a_star(1, 1) = std::nanf("");
        CHECK_THROWS_AS(compute_focus_mask(avg, dep, 0.5f), DataError);
        AveragedAttention avg3{random_rowstochastic(4, 3, rng), 2, 2};
        CHECK_THROWS_AS(compute_focus_mask(avg3, dep, 0.5f), ShapeError);
    }
}

TEST_CASE("mask oracle equivalence on 1000 random instances") {
    Rng rng(0xF0C05);
    const float thresholds[] = {0.f, 0.25f, 0.5f, 0.75f, 1.f};
    for (int trial = 0; trial < 1000; ++trial) {
        int side   = 1 + static_cast<int>(rng.uniform_index(8));  // up to 64 pixels
        int pixels = side * side;
        int n      = 2 + static_cast<int>(rng.uniform_index(15));  // up to 16 tokens
        AveragedAttention avg{random_rowstochastic(pixels, n, rng), side, side};
        DependencyMatrix dep{random_dependency(n, rng)};
        float s = thresholds[trial % 5];
        auto fm = compute_focus_mask(avg, dep, s);
        Mat ref = naive_focus_mask(avg.a_star, dep.d, s);
        // exact agreement, including the -inf cells
        for (int i = 0; i < pixels; ++i)
            for (int j = 0; j < n; ++j) {
                bool lhs = std::isinf(fm.mask(i, j));
                bool rhs = std::isinf(ref(i, j));
                REQUIRE(lhs == rhs);
                if (!lhs) REQUIRE(fm.mask(i, j) == ref(i, j));
            }
    }
}

TEST_CASE("monotonicity: raising the threshold only grows the masked set") {
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        AveragedAttention avg{random_rowstochastic(36, 8, rng), 6, 6};
        DependencyMatrix dep{random_dependency(8, rng)};
        float s1 = static_cast<float>(rng.uniform());
        float s2 = s1 + static_cast<float>(rng.uniform()) * (1.f - s1);
        auto m1  = compute_focus_mask(avg, dep, s1);
        auto m2  = compute_focus_mask(avg, dep, s2);
        for (int i = 0; i < 36; ++i)
            for (int j = 0; j < 8; ++j)
                if (std::isinf(m1.mask(i, j))) CHECK(std::isinf(m2.mask(i, j)));
    }
}

TEST_CASE("focused attention zeroes masked tokens and renormalizes") {
    Rng rng(8);
    auto randm = [&](int r, int c) { return randn_mat<float>(r, c, rng); };

    SUBCASE("all-zero mask equals plain cross-attention") {
        Mat q = randm(6, 4), k = randm(3, 4), v = randm(3, 4);
        FocusMask none;
        none.mask = Mat::Zero(6, 3);
        none.h = 6; none.w = 1;
        Mat got = focused_attention(q, k, v, none);
        // direct evaluation of the softmax(QK^T/sqrt(d))V reference
        Mat logits = q * k.transpose() / std::sqrt(4.f);
        Mat ref(6, 4);
        for (int i = 0; i < 6; ++i) {
            double m = logits.row(i).maxCoeff();
            double z = 0;
            for (int j = 0; j < 3; ++j) z += std::exp(logits(i, j) - m);
            Vec w(3);
            for (int j = 0; j < 3; ++j) w(j) = static_cast<float>(std::exp(logits(i, j) - m) / z);
            ref.row(i) = w.transpose() * v;
        }
        CHECK((got - ref).cwiseAbs().maxCoeff() < 1e-6f);
    }

    SUBCASE("masked token gets exactly zero weight") {
        Mat q = randm(4, 2), k = randm(3, 2);
        Mat v = Mat::Identity(3, 3);
        FocusMask fm;
        fm.mask = Mat::Zero(4, 3);
        fm.h = 4; fm.w = 1;
        fm.mask(1, 2) = kNegInf;
        fm.mask(2, 0) = kNegInf;
        // with identity values the output rows are the attention weights
        Mat w = focused_attention(q, k, v, fm);
        CHECK(w(1, 2) == 0.f);
        CHECK(w(2, 0) == 0.f);
        for (int i = 0; i < 4; ++i) CHECK(w.row(i).sum() == doctest::Approx(1.f).epsilon(1e-6));
    }

    SUBCASE("random instance against the brute-force oracle") {
        for (int trial = 0; trial < 20; ++trial) {
            Mat q = randm(4, 3), k = randm(2, 3), v = randm(2, 3);
            FocusMask fm;
            fm.mask = Mat::Zero(4, 2);
            fm.h = 4; fm.w = 1;
            for (int i = 0; i < 4; ++i)
                if (rng.uniform() < 0.3) fm.mask(i, static_cast<int>(rng.uniform_index(2))) = kNegInf;
            Mat got = focused_attention(q, k, v, fm);
            for (int i = 0; i < 4; ++i) {
                double denom = 0;
                Vec w = Vec::Zero(2);
                for (int j = 0; j < 2; ++j) {
                    if (std::isinf(fm.mask(i, j))) continue;
                    double logit = q.row(i).dot(k.row(j)) / std::sqrt(3.0);
                    w(j) = static_cast<float>(std::exp(logit));
                    denom += w(j);
                }
                for (int j = 0; j < 2; ++j) w(j) /= static_cast<float>(denom);
                Vec ref = v.transpose() * w;
                CHECK((got.row(i).transpose() - ref).cwiseAbs().maxCoeff() < 1e-5f);
            }
        }
    }

    SUBCASE("a fully masked query row is an error") {
        Mat q = randm(2, 2), k = randm(2, 2), v = randm(2, 2);
        FocusMask fm;
        fm.mask = Mat::Zero(2, 2);
        fm.h = 2; fm.w = 1;
        fm.mask(0, 0) = kNegInf;
        fm.mask(0, 1) = kNegInf;
        CHECK_THROWS_AS(focused_attention(q, k, v, fm), ParamError);
    }

    SUBCASE("shape mismatches are rejected") {
        Mat q = randm(2, 3), k = randm(2, 2), v = randm(2, 2);
        FocusMask fm;
        fm.mask = Mat::Zero(2, 2);
        CHECK_THROWS_AS(focused_attention(q, k, v, fm), ShapeError);
    }
}

TEST_CASE("project_mask max-pools the unmasked cells") {
    SUBCASE("any unmasked source cell unmasks the target") {
        FocusMask fm;
        fm.h = 4; fm.w = 4;
        fm.mask = Mat::Constant(16, 2, kNegInf);
        // one zero in each 2x2 window of channel 0
        fm.mask(0, 0) = 0.f;   // window (0,0)
        fm.mask(3, 0) = 0.f;   // window (0,1)
        fm.mask(9, 0) = 0.f;   // window (1,0)
        fm.mask(15, 0) = 0.f;  // window (1,1)
        auto out = project_mask(fm, 2, 2);
        for (int i = 0; i < 4; ++i) {
            CHECK(out.mask(i, 0) == 0.f);
            CHECK(std::isinf(out.mask(i, 1)));
        }
    }

    SUBCASE("identity projection returns the mask unchanged") {
        Rng rng(9);
        FocusMask fm;
        fm.h = 4; fm.w = 4;
        fm.mask = Mat::Zero(16, 3);
        for (int i = 0; i < 16; ++i)
            if (rng.uniform() < 0.5) fm.mask(i, static_cast<int>(rng.uniform_index(3))) = kNegInf;
        auto out = project_mask(fm, 4, 4);
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 3; ++j) CHECK(std::isinf(out.mask(i, j)) == std::isinf(fm.mask(i, j)));
    }

    SUBCASE("shape errors") {
        FocusMask fm;
        fm.h = 4; fm.w = 4;
        fm.mask = Mat::Zero(16, 1);
        CHECK_THROWS_AS(project_mask(fm, 3, 3), ShapeError);
        CHECK_THROWS_AS(project_mask(fm, 8, 8), ShapeError);
    }

    SUBCASE("projection commutes with token permutation") {
        Rng rng(10);
        FocusMask fm;
        fm.h = 4; fm.w = 4;
        fm.mask = Mat::Zero(16, 3);
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 3; ++j)
                if (rng.uniform() < 0.4) fm.mask(i, j) = kNegInf;
        int perm[3] = {2, 0, 1};
        FocusMask permuted = fm;
        for (int j = 0; j < 3; ++j) permuted.mask.col(perm[j]) = fm.mask.col(j);
        auto a = project_mask(permuted, 2, 2);
        auto b = project_mask(fm, 2, 2);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 3; ++j)
                CHECK(std::isinf(a.mask(i, perm[j])) == std::isinf(b.mask(i, j)));
    }
}

TEST_CASE("attention dump round trips through the manifest directory") {
    Rng rng(11);
    AttentionDump dump;
    dump.token_strings = {"red", "car", "<eos>"};
    dump.record.entries.push_back({0, 5, 4, 4, random_rowstochastic(16, 3, rng)});
    dump.record.entries.push_back({1, 5, 2, 2, random_rowstochastic(4, 3, rng)});
    dump.averaged     = aggregate_attention(dump.record);
    dump.has_averaged = true;
    DependencyMatrix dep{random_dependency(3, rng)};
    dump.mask     = compute_focus_mask(dump.averaged, dep, 0.5f);
    dump.has_mask = true;

    auto dir = std::filesystem::temp_directory_path() / "synbind_dump_test";
    std::filesystem::remove_all(dir);
    write_attention_dump(dir.string(), dump);
    auto back = read_attention_dump(dir.string());
    CHECK(back.token_strings == dump.token_strings);
    REQUIRE(back.record.entries.size() == 2);
    CHECK((back.record.entries[0].map - dump.record.entries[0].map).cwiseAbs().maxCoeff() == 0.f);
    CHECK(back.has_mask);
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(std::isinf(back.mask.mask(i, j)) == std::isinf(dump.mask.mask(i, j)));
    CHECK(back.mask.threshold_used == 0.5f);
    CHECK_THROWS_AS(read_attention_dump((dir / "missing").string()), DataError);
}
