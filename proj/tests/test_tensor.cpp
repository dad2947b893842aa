#include <cmath>
#include <vector>

#include "catch_amalgamated.hpp"
#include "c2fa/tensor.hpp"
#include "helpers.hpp"

using c2fa::Tensor;
using testutil::random_tensor;

namespace {

// Reduces an op output to a scalar with fixed random weights, so the
// finite-difference probe exercises general (non-uniform) output gradients.
c2fa::Tensor weighted_sum(const c2fa::Tensor& out, const c2fa::Tensor& weights) {
    return c2fa::sum_all(c2fa::mul(out, weights));
}

}  // namespace

TEST_CASE("matmul closed forms", "[tensor]") {
    SECTION("identity times M is M") {
        Tensor eye = Tensor::from_data(2, 2, {1, 0, 0, 1});
        Tensor m = Tensor::from_data(2, 2, {3.5, -1.25, 2.0, 7.75});
        Tensor out = c2fa::matmul(eye, m);
        for (size_t i = 0; i < 4; ++i) REQUIRE(out.data()[i] == m.data()[i]);
    }
    SECTION("2x2 by 2x1") {
        Tensor a = Tensor::from_data(2, 2, {1, 2, 3, 4});
        Tensor b = Tensor::from_data(2, 1, {5, 6});
        Tensor out = c2fa::matmul(a, b);
        REQUIRE(out.data()[0] == 17.0);
        REQUIRE(out.data()[1] == 39.0);
    }
    SECTION("shape mismatch names both shapes") {
        Tensor a = Tensor::zeros(3, 4);
        Tensor b = Tensor::zeros(5, 2);
        REQUIRE_THROWS_MATCHES(c2fa::matmul(a, b), c2fa::DimensionError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("[3x4]") &&
                                   Catch::Matchers::ContainsSubstring("[5x2]")));
    }
}

TEST_CASE("matmul gradients vs central finite differences", "[tensor]") {
    c2fa::Rng rng(11);
    Tensor b = random_tensor(4, 2, rng);
    Tensor w = random_tensor(3, 2, rng);
    auto f = [&](const Tensor& x) { return weighted_sum(c2fa::matmul(x, b), w); };
    REQUIRE(c2fa::finite_diff_check(f, random_tensor(3, 4, rng), 1e-6) <= 1e-6);

    Tensor a = random_tensor(3, 4, rng);
    auto g = [&](const Tensor& x) { return weighted_sum(c2fa::matmul(a, x), w); };
    REQUIRE(c2fa::finite_diff_check(g, random_tensor(4, 2, rng), 1e-6) <= 1e-6);
}

TEST_CASE("softmax_rows", "[tensor]") {
    SECTION("uniform logits give uniform probabilities") {
        Tensor x = Tensor::from_data(1, 3, {0, 0, 0});
        Tensor y = c2fa::softmax_rows(x, 1.0);
        for (double v : y.data()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
    }
    SECTION("temperature scaling identity") {
        Tensor a = c2fa::softmax_rows(Tensor::from_data(1, 3, {2, 4, 6}), 2.0);
        Tensor b = c2fa::softmax_rows(Tensor::from_data(1, 3, {1, 2, 3}), 1.0);
        for (size_t i = 0; i < 3; ++i)
            REQUIRE_THAT(a.data()[i], Catch::Matchers::WithinAbs(b.data()[i], 1e-14));
    }
    SECTION("matches scripted exponential-normalization oracle") {
        Tensor y = c2fa::softmax_rows(Tensor::from_data(1, 3, {1, 2, 3}), 1.0);
        auto expect = testutil::naive_softmax({1, 2, 3}, 1.0);
        for (size_t i = 0; i < 3; ++i)
            REQUIRE_THAT(y.data()[i], Catch::Matchers::WithinAbs(expect[i], 1e-14));
    }
    SECTION("non-positive temperature is a domain error") {
        REQUIRE_THROWS_AS(c2fa::softmax_rows(Tensor::zeros(1, 3), 0.0), c2fa::DomainError);
        REQUIRE_THROWS_AS(c2fa::softmax_rows(Tensor::zeros(1, 3), -1.0), c2fa::DomainError);
    }
    SECTION("rows sum to one across large magnitudes") {
        c2fa::Rng rng(7);
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> row(8);
            for (auto& v : row) v = (rng.next_double() * 2.0 - 1.0) * 50.0;
            Tensor y = c2fa::softmax_rows(Tensor::from_data(1, 8, std::move(row)), 1.0);
            double sum = 0.0;
            for (double v : y.data()) {
                REQUIRE(v >= 0.0);
                sum += v;
            }
            REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
        }
    }
}

TEST_CASE("l2_normalize_rows", "[tensor]") {
    SECTION("closed form") {
        Tensor y = c2fa::l2_normalize_rows(Tensor::from_data(1, 2, {3, 4}));
        REQUIRE_THAT(y.data()[0], Catch::Matchers::WithinAbs(0.6, 1e-15));
        REQUIRE_THAT(y.data()[1], Catch::Matchers::WithinAbs(0.8, 1e-15));
    }
    SECTION("unit row is unchanged") {
        Tensor y = c2fa::l2_normalize_rows(Tensor::from_data(1, 2, {0.6, 0.8}));
        REQUIRE_THAT(y.data()[0], Catch::Matchers::WithinAbs(0.6, 1e-12));
        REQUIRE_THAT(y.data()[1], Catch::Matchers::WithinAbs(0.8, 1e-12));
    }
    SECTION("near-zero row raises instead of emitting NaN") {
        REQUIRE_THROWS_AS(c2fa::l2_normalize_rows(Tensor::from_data(1, 3, {0, 1e-13, 0})),
                          c2fa::DegenerateInputError);
    }
    SECTION("gradient vs finite differences") {
        c2fa::Rng rng(23);
        Tensor w = random_tensor(4, 8, rng);
        auto f = [&](const Tensor& x) { return weighted_sum(c2fa::l2_normalize_rows(x), w); };
        REQUIRE(c2fa::finite_diff_check(f, random_tensor(4, 8, rng), 1e-6) <= 1e-6);
    }
}

TEST_CASE("cross_entropy", "[tensor]") {
    SECTION("perfect one-hot prediction is zero") {
        Tensor y = Tensor::from_data(1, 3, {0, 1, 0});
        Tensor p = Tensor::from_data(1, 3, {0, 1, 0});
        REQUIRE_THAT(c2fa::cross_entropy(y, p).value(), Catch::Matchers::WithinAbs(0.0, 1e-11));
    }
    SECTION("uniform/uniform over four classes is ln 4") {
        Tensor y = Tensor::from_data(1, 4, {0.25, 0.25, 0.25, 0.25});
        Tensor p = Tensor::from_data(1, 4, {0.25, 0.25, 0.25, 0.25});
        REQUIRE_THAT(c2fa::cross_entropy(y, p).value(),
                     Catch::Matchers::WithinAbs(std::log(4.0), 1e-9));
    }
    SECTION("matches scripted oracle") {
        std::vector<double> yrow = {0.5, 0.5, 0.0};
        std::vector<double> prow = {0.25, 0.25, 0.5};
        Tensor y = Tensor::from_data(1, 3, yrow);
        Tensor p = Tensor::from_data(1, 3, prow);
        const double expect = testutil::naive_cross_entropy_row(yrow, prow);
        REQUIRE_THAT(c2fa::cross_entropy(y, p).value(),
                     Catch::Matchers::WithinAbs(expect, 1e-12));
        REQUIRE_THAT(expect, Catch::Matchers::WithinAbs(std::log(4.0), 1e-9));
    }
    SECTION("shape mismatch") {
        REQUIRE_THROWS_AS(c2fa::cross_entropy(Tensor::zeros(1, 3), Tensor::zeros(1, 4)),
                          c2fa::DimensionError);
    }
}

TEST_CASE("kl_divergence", "[tensor]") {
    c2fa::Rng rng(31);
    SECTION("identical distributions give zero") {
        auto q = testutil::random_distribution(5, rng);
        Tensor a = Tensor::from_data(1, 5, q);
        Tensor b = Tensor::from_data(1, 5, q);
        REQUIRE_THAT(c2fa::kl_divergence(a, b).value(), Catch::Matchers::WithinAbs(0.0, 1e-9));
    }
    SECTION("nonnegative for random distributions") {
        for (int trial = 0; trial < 50; ++trial) {
            Tensor q = Tensor::from_data(1, 6, testutil::random_distribution(6, rng));
            Tensor p = Tensor::from_data(1, 6, testutil::random_distribution(6, rng));
            REQUIRE(c2fa::kl_divergence(q, p).value() >= -1e-9);
        }
    }
    SECTION("matches scripted oracle") {
        std::vector<double> qrow = {0.75, 0.25};
        std::vector<double> prow = {0.5, 0.5};
        const double expect = testutil::naive_kl_row(qrow, prow);
        REQUIRE_THAT(
            c2fa::kl_divergence(Tensor::from_data(1, 2, qrow), Tensor::from_data(1, 2, prow))
                .value(),
            Catch::Matchers::WithinAbs(expect, 1e-12));
        REQUIRE_THAT(expect, Catch::Matchers::WithinAbs(0.13081203594113694, 1e-9));
    }
    SECTION("shape mismatch") {
        REQUIRE_THROWS_AS(c2fa::kl_divergence(Tensor::zeros(1, 3), Tensor::zeros(2, 3)),
                          c2fa::DimensionError);
    }
}

TEST_CASE("backward basics", "[tensor]") {
    SECTION("product rule on scalars") {
        Tensor x = Tensor::scalar(2.0, true);
        Tensor y = Tensor::scalar(3.0, true);
        Tensor loss = c2fa::mul(x, y);
        c2fa::backward(loss);
        REQUIRE(x.grad()[0] == 3.0);
        REQUIRE(y.grad()[0] == 2.0);
    }
    SECTION("leaf not used by the loss keeps a zero gradient") {
        Tensor x = Tensor::scalar(2.0, true);
        Tensor unused = Tensor::from_data(2, 2, {1, 2, 3, 4}, true);
        Tensor loss = c2fa::mul(x, x);
        c2fa::backward(loss);
        for (double g : unused.grad()) REQUIRE(g == 0.0);
    }
    SECTION("non-scalar loss is a contract error") {
        Tensor x = Tensor::from_data(1, 2, {1, 2}, true);
        REQUIRE_THROWS_AS(c2fa::backward(c2fa::scale(x, 2.0)), c2fa::ContractError);
    }
    SECTION("backward twice doubles each leaf gradient exactly") {
        c2fa::Rng rng(5);
        Tensor x = random_tensor(3, 3, rng, true);
        Tensor w = random_tensor(3, 3, rng);
        Tensor loss = weighted_sum(c2fa::softmax_rows(c2fa::matmul(x, x), 1.0), w);
        c2fa::backward(loss);
        const std::vector<double> once = x.grad();
        c2fa::backward(loss);
        for (size_t i = 0; i < once.size(); ++i) REQUIRE(x.grad()[i] == 2.0 * once[i]);
    }
    SECTION("composite softmax + cross-entropy matches finite differences") {
        c2fa::Rng rng(13);
        Tensor targets = Tensor::from_data(4, 5, [&] {
            std::vector<double> t;
            for (int i = 0; i < 4; ++i) {
                auto row = testutil::random_distribution(5, rng);
                t.insert(t.end(), row.begin(), row.end());
            }
            return t;
        }());
        auto f = [&](const Tensor& logits) {
            return c2fa::cross_entropy(targets, c2fa::softmax_rows(logits, 1.0));
        };
        REQUIRE(c2fa::finite_diff_check(f, random_tensor(4, 5, rng), 1e-6) <= 1e-4);
    }
}

TEST_CASE("finite_diff_check oracle sanity", "[tensor]") {
    SECTION("quadratic is exact to first order") {
        Tensor x = Tensor::from_data(1, 2, {1, 2});
        auto f = [](const Tensor& t) { return c2fa::sum_all(c2fa::mul(t, t)); };
        REQUIRE(c2fa::finite_diff_check(f, x, 1e-5) <= 1e-8);
    }
    SECTION("constant function reports zero error") {
        Tensor x = Tensor::from_data(1, 3, {1, 2, 3});
        auto f = [](const Tensor&) { return Tensor::scalar(42.0); };
        REQUIRE(c2fa::finite_diff_check(f, x, 1e-5) == 0.0);
    }
    SECTION("rejects non-positive step") {
        Tensor x = Tensor::scalar(1.0);
        auto f = [](const Tensor& t) { return c2fa::sum_all(t); };
        REQUIRE_THROWS_AS(c2fa::finite_diff_check(f, x, 0.0), c2fa::DomainError);
    }
}

TEST_CASE("every differentiable op passes randomized gradient checks", "[tensor][gradcheck]") {
    c2fa::Rng rng(101);
    constexpr int kTrials = 20;
    constexpr double kTol = 1e-4;
    constexpr double kH = 1e-6;

    for (int t = 0; t < kTrials; ++t) {
        Tensor w34 = random_tensor(3, 4, rng);
        Tensor w43 = random_tensor(4, 3, rng);
        Tensor w33 = random_tensor(3, 3, rng);
        Tensor w14 = random_tensor(1, 4, rng);
        Tensor b14 = random_tensor(1, 4, rng);
        Tensor other34 = random_tensor(3, 4, rng);

        auto check = [&](auto&& f) {
            REQUIRE(c2fa::finite_diff_check(f, random_tensor(3, 4, rng), kH) <= kTol);
        };

        check([&](const Tensor& x) { return weighted_sum(c2fa::add(x, other34), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::sub(other34, x), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::mul(x, other34), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::scale(x, -1.7), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::transpose(x), w43); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::matmul_nt(x, other34), w33); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::add_row_bias(x, b14), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::softmax_rows(x, 0.7), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::l2_normalize_rows(x), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::gelu(x), w34); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::mean_rows(x), w14); });
        Tensor w24 = random_tensor(2, 4, rng);
        Tensor w32 = random_tensor(3, 2, rng);
        Tensor w64 = random_tensor(6, 4, rng);
        Tensor w38 = random_tensor(3, 8, rng);
        check([&](const Tensor& x) { return weighted_sum(c2fa::slice_rows(x, 1, 2), w24); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::slice_cols(x, 1, 2), w32); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::concat_rows({x, other34}), w64); });
        check([&](const Tensor& x) { return weighted_sum(c2fa::concat_cols({x, other34}), w38); });

        // scale_by / div_by_scalar, gradient wrt the scalar as well
        Tensor s = Tensor::scalar(1.0 + rng.next_double(), true);
        {
            Tensor a = random_tensor(3, 4, rng, true);
            Tensor loss = weighted_sum(c2fa::div_by_scalar(a, s), w34);
            c2fa::backward(loss);
            const double analytic = s.grad()[0];
            const double h = 1e-6;
            double fp, fm;
            {
                c2fa::NoGradGuard guard;
                const double saved = s.data()[0];
                s.data()[0] = saved + h;
                fp = weighted_sum(c2fa::div_by_scalar(a, s), w34).value();
                s.data()[0] = saved - h;
                fm = weighted_sum(c2fa::div_by_scalar(a, s), w34).value();
                s.data()[0] = saved;
            }
            const double numeric = (fp - fm) / (2 * h);
            REQUIRE_THAT(analytic, Catch::Matchers::WithinRel(numeric, kTol));
        }
        check([&](const Tensor& x) { return weighted_sum(c2fa::scale_by(x, s.detach()), w34); });

        // layer norm wrt input, gain, bias
        Tensor gain = random_tensor(1, 4, rng, false, 0.5);
        for (auto& v : gain.data()) v += 1.0;
        Tensor beta = random_tensor(1, 4, rng);
        check([&](const Tensor& x) {
            return weighted_sum(c2fa::layer_norm_rows(x, gain, beta), w34);
        });
        {
            Tensor x34 = random_tensor(3, 4, rng);
            auto fg = [&](const Tensor& g) {
                return weighted_sum(c2fa::layer_norm_rows(x34, g, beta), w34);
            };
            REQUIRE(c2fa::finite_diff_check(fg, gain, kH) <= kTol);
            auto fb = [&](const Tensor& b) {
                return weighted_sum(c2fa::layer_norm_rows(x34, gain, b), w34);
            };
            REQUIRE(c2fa::finite_diff_check(fb, beta, kH) <= kTol);
        }

        // linear_combination wrt a layer and wrt the coefficients
        Tensor coeffs = random_tensor(1, 3, rng);
        std::vector<Tensor> layers = {random_tensor(3, 4, rng), random_tensor(3, 4, rng),
                                      random_tensor(3, 4, rng)};
        check([&](const Tensor& x) {
            return weighted_sum(c2fa::linear_combination({x, layers[1], layers[2]}, coeffs), w34);
        });
        {
            auto fc = [&](const Tensor& c) {
                return weighted_sum(c2fa::linear_combination(layers, c), w34);
            };
            REQUIRE(c2fa::finite_diff_check(fc, coeffs, kH) <= kTol);
        }

        // losses wrt both operands
        {
            std::vector<double> tdata, pdata;
            for (int i = 0; i < 3; ++i) {
                auto tr = testutil::random_distribution(4, rng);
                auto pr = testutil::random_distribution(4, rng);
                tdata.insert(tdata.end(), tr.begin(), tr.end());
                pdata.insert(pdata.end(), pr.begin(), pr.end());
            }
            Tensor tt = Tensor::from_data(3, 4, tdata);
            Tensor pp = Tensor::from_data(3, 4, pdata);
            auto f_ce_p = [&](const Tensor& p) { return c2fa::cross_entropy(tt, p); };
            REQUIRE(c2fa::finite_diff_check(f_ce_p, pp, kH) <= kTol);
            auto f_kl_q = [&](const Tensor& q) { return c2fa::kl_divergence(q, pp); };
            REQUIRE(c2fa::finite_diff_check(f_kl_q, tt, kH) <= kTol);
            auto f_kl_p = [&](const Tensor& p) { return c2fa::kl_divergence(tt, p); };
            REQUIRE(c2fa::finite_diff_check(f_kl_p, pp, kH) <= kTol);
        }
    }
}

TEST_CASE("no-grad guard suppresses the tape", "[tensor]") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y;
    {
        c2fa::NoGradGuard guard;
        y = c2fa::mul(x, x);
    }
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(y.is_leaf());
    c2fa::backward(y);  // no-op, nothing recorded
    for (double g : x.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("tensor invariants", "[tensor]") {
    SECTION("from_data validates length") {
        REQUIRE_THROWS_AS(Tensor::from_data(2, 2, {1, 2, 3}), c2fa::DimensionError);
    }
    SECTION("grad has the tensor's shape once touched") {
        Tensor x = Tensor::zeros(3, 5, true);
        REQUIRE(x.grad().size() == 15);
    }
    SECTION("value() rejects non-scalars") {
        REQUIRE_THROWS_AS(Tensor::zeros(2, 2).value(), c2fa::ContractError);
    }
}
