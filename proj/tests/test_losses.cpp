#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "tatl/errors.hpp"
#include "tatl/losses.hpp"

using namespace tatl;

namespace {

binary_mask mask_of(std::vector<std::uint8_t> bits) {
    const std::size_t n = bits.size();
    return binary_mask::from_bytes(1, n, std::move(bits));
}

tensor_f pred_of(std::vector<double> values) {
    const std::size_t n = values.size();
    return tensor_f::from_data({1, n}, std::move(values));
}

// Central finite difference of a scalar loss in one prediction coordinate.
template <typename LossFn>
double fd_grad(const LossFn& loss, tensor_f pred, const binary_mask& target, std::size_t i,
               double h = 1e-5) {
    const double saved = pred[i];
    pred[i] = saved + h;
    const double up = loss(pred, target).value;
    pred[i] = saved - h;
    const double down = loss(pred, target).value;
    return (up - down) / (2.0 * h);
}

template <typename LossFn>
void check_gradients(const LossFn& loss, std::mt19937_64& rng, int trials, double tol) {
    std::uniform_int_distribution<std::size_t> len(1, 256);
    // Keep predictions off the [0,1] boundary so the finite-difference probes
    // stay inside the valid domain.
    std::uniform_real_distribution<double> prob(0.05, 0.95);
    std::bernoulli_distribution bit(0.4);
    for (int t = 0; t < trials; ++t) {
        const std::size_t n = len(rng);
        std::vector<double> p(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = prob(rng);
            y[i] = bit(rng) ? 1 : 0;
        }
        const tensor_f pred = pred_of(p);
        const binary_mask target = mask_of(y);
        const loss_result res = loss(pred, target);
        REQUIRE(res.grad.size() == n);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (int probe = 0; probe < 4; ++probe) {
            const std::size_t i = pick(rng);
            const double numeric = fd_grad(loss, pred, target, i);
            const double scale = std::max({1.0, std::abs(numeric), std::abs(res.grad[i])});
            CHECK(std::abs(res.grad[i] - numeric) / scale <= tol);
        }
    }
}

}  // namespace

TEST_CASE("loss_config validation") {
    CHECK_NOTHROW(loss_config{}.validate());
    CHECK_THROWS_AS((loss_config{0.0, 0.6, 0.5, 0.5}.validate()), range_error);
    CHECK_THROWS_AS((loss_config{1.0, 0.0, 0.5, 0.5}.validate()), range_error);
    CHECK_THROWS_AS((loss_config{1.0, 1.0, 0.5, 0.5}.validate()), range_error);
    CHECK_THROWS_AS((loss_config{1.0, 0.6, -0.1, 0.5}.validate()), range_error);
}

TEST_CASE("perfect binary predictions have zero loss") {
    const binary_mask target = mask_of({1, 0, 1, 1, 0});
    const tensor_f pred = pred_of({1, 0, 1, 1, 0});
    CHECK(tversky_loss(pred, target).value == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(soft_jaccard_loss(pred, target).value == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(combined_loss(pred, target).value == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("tversky oracle: single wrong positive prediction") {
    const loss_result res = tversky_loss(pred_of({1.0}), mask_of({0}));
    CHECK(res.value == doctest::Approx(1.0 - 1.0 / 1.4).epsilon(1e-9));
    CHECK(res.value == doctest::Approx(0.2857142857142857).epsilon(1e-9));
}

TEST_CASE("tversky oracle: half-confident predictions") {
    const loss_result res = tversky_loss(pred_of({0.5, 0.5}), mask_of({1, 0}));
    CHECK(res.value == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("soft jaccard oracle values") {
    CHECK(soft_jaccard_loss(pred_of({0.5, 0.5, 0.5, 0.5}), mask_of({1, 1, 1, 1})).value ==
          doctest::Approx(0.4).epsilon(1e-9));
    CHECK(soft_jaccard_loss(pred_of({1.0}), mask_of({0})).value ==
          doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("combined oracle blends the two losses") {
    const loss_result res = combined_loss(pred_of({1.0}), mask_of({0}));
    CHECK(res.value == doctest::Approx(0.39285714285714285).epsilon(1e-9));
}

TEST_CASE("combined with lambda2=0 degenerates to tversky") {
    loss_config cfg;
    cfg.lambda1 = 1.0;
    cfg.lambda2 = 0.0;
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> prob(0.0, 1.0);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> p(9);
        std::vector<std::uint8_t> y(9);
        for (std::size_t i = 0; i < 9; ++i) {
            p[i] = prob(rng);
            y[i] = rng() & 1;
        }
        const tensor_f pred = pred_of(p);
        const binary_mask target = mask_of(y);
        const loss_result lhs = combined_loss(pred, target, cfg);
        const loss_result rhs = tversky_loss(pred, target, cfg);
        CHECK(lhs.value == doctest::Approx(rhs.value).epsilon(1e-15));
        for (std::size_t i = 0; i < 9; ++i) {
            CHECK(lhs.grad[i] == doctest::Approx(rhs.grad[i]).epsilon(1e-15));
        }
    }
}

TEST_CASE("combined is linear in the lambda weights") {
    const tensor_f pred = pred_of({0.2, 0.9, 0.4});
    const binary_mask target = mask_of({0, 1, 1});
    loss_config base;
    loss_config scaled = base;
    scaled.lambda1 *= 3.0;
    scaled.lambda2 *= 3.0;
    const loss_result a = combined_loss(pred, target, base);
    const loss_result b = combined_loss(pred, target, scaled);
    CHECK(b.value == doctest::Approx(3.0 * a.value).epsilon(1e-12));
    for (std::size_t i = 0; i < pred.size(); ++i) {
        CHECK(b.grad[i] == doctest::Approx(3.0 * a.grad[i]).epsilon(1e-12));
    }
}

TEST_CASE("loss values stay in [0,1) across random inputs") {
    std::mt19937_64 rng(37);
    std::uniform_real_distribution<double> prob(0.0, 1.0);
    for (int t = 0; t < 300; ++t) {
        std::uniform_int_distribution<std::size_t> len(1, 64);
        const std::size_t n = len(rng);
        std::vector<double> p(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = prob(rng);
            y[i] = rng() & 1;
        }
        const tensor_f pred = pred_of(p);
        const binary_mask target = mask_of(y);
        for (const loss_result& res :
             {tversky_loss(pred, target), soft_jaccard_loss(pred, target)}) {
            CHECK(res.value >= 0.0);
            CHECK(res.value < 1.0);
        }
    }
}

TEST_CASE("beta=0.5 tversky equals an independently coded dice form") {
    // At beta = 1/2 the false-negative and false-positive terms collapse to
    // (|y| + |p|)/2 - <y,p>, giving the smoothed dice denominator.
    loss_config cfg;
    cfg.beta = 0.5;
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> prob(0.0, 1.0);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> p(16);
        std::vector<std::uint8_t> y(16);
        double inter = 0.0, sum_y = 0.0, sum_p = 0.0;
        for (std::size_t i = 0; i < 16; ++i) {
            p[i] = prob(rng);
            y[i] = rng() & 1;
            inter += p[i] * y[i];
            sum_y += y[i];
            sum_p += p[i];
        }
        const double dice_form =
            1.0 - (cfg.alpha + inter) / (cfg.alpha + inter + 0.5 * (sum_y + sum_p) - inter);
        const loss_result res = tversky_loss(pred_of(p), mask_of(y), cfg);
        CHECK(res.value == doctest::Approx(dice_form).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradients match central finite differences") {
    std::mt19937_64 rng(43);
    const auto tversky = [](const tensor_f& p, const binary_mask& y) {
        return tversky_loss(p, y);
    };
    const auto jaccard = [](const tensor_f& p, const binary_mask& y) {
        return soft_jaccard_loss(p, y);
    };
    const auto combined = [](const tensor_f& p, const binary_mask& y) {
        return combined_loss(p, y);
    };
    check_gradients(tversky, rng, 120, 1e-4);
    check_gradients(jaccard, rng, 120, 1e-4);
    check_gradients(combined, rng, 120, 1e-4);
}

TEST_CASE("losses reject bad inputs") {
    CHECK_THROWS_AS(tversky_loss(pred_of({0.5, 0.5}), mask_of({1})), dimension_error);
    CHECK_THROWS_AS(tversky_loss(pred_of({1.5}), mask_of({1})), range_error);
    CHECK_THROWS_AS(soft_jaccard_loss(pred_of({-0.2}), mask_of({0})), range_error);
}

TEST_CASE("mean_combined_loss averages per-sample losses") {
    const std::vector<tensor_f> preds = {pred_of({1.0}), pred_of({1.0})};
    const std::vector<binary_mask> targets = {mask_of({0}), mask_of({1})};
    // First pair: 0.392857...; second pair: exact match, 0.
    CHECK(mean_combined_loss(preds, targets) ==
          doctest::Approx(0.5 * 0.39285714285714285).epsilon(1e-12));
    CHECK_THROWS_AS(mean_combined_loss({}, {}), range_error);
    CHECK_THROWS_AS(mean_combined_loss(preds, {mask_of({0})}), dimension_error);
}
