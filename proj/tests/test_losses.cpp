#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "l2s/losses.hpp"

using namespace l2s;
using l2s::testing::TensorD;

namespace {

TensorD filled(const Shape& s, double v, bool track = false) { return TensorD::full(s, v, track); }

TensorD random_probs(const Shape& s, Rng& rng) {
    return l2s::testing::random_tensor(s, rng, 0.02, 0.98, false);
}

TensorD random_labels(const Shape& s, Rng& rng) {
    std::vector<double> d(numel(s));
    for (double& x : d) x = rng.bernoulli(0.3) ? 1.0 : 0.0;
    return TensorD(s, std::move(d));
}

}  // namespace

TEST(Bce, Examples) {
    const Shape s{2, 1, 3, 3};
    Rng rng(1);
    EXPECT_NEAR(bce(filled(s, 0.5), random_labels(s, rng)).item(), std::log(2.0), 1e-12);
    TensorD y = random_labels(s, rng);
    EXPECT_LT(bce(y, y).item(), 1e-6);  // clamped at eps
    // Oracle: -(ln 0.9 + ln 0.9 + ln 0.8 + ln 0.7) / 4.
    TensorD p({4}, {0.9, 0.1, 0.8, 0.3});
    TensorD t({4}, {1, 0, 1, 0});
    EXPECT_NEAR(bce(p, t).item(), 0.19763488164214868, 1e-15);
    EXPECT_NEAR(bce(p, t, filled({4}, 1.0)).item(), 0.19763488164214868, 1e-15);
    EXPECT_THROW(bce(p, filled({3}, 0.0)), ShapeError);
}

TEST(Dice, Examples) {
    const Shape s{1, 1, 10, 100};
    const TensorD ones = filled(s, 1.0);
    EXPECT_LT(dice_loss(ones, ones).item(), 1e-12);
    const double V = 1000.0;
    EXPECT_NEAR(dice_loss(filled(s, 0.0), ones).item(), 1.0 - 1.0 / (V + 1.0), 1e-15);
    EXPECT_NEAR(dice_loss(filled(s, 0.5), ones).item(), 1.0 / 3.0, 2e-3);
    EXPECT_NEAR(dice_loss(filled(s, 0.5), ones, {}, 1e-12).item(), 1.0 / 3.0, 1e-9);
    EXPECT_THROW(dice_loss(ones, filled({1, 1, 10, 99}, 1.0)), ShapeError);
}

TEST(Dice, PerSampleVersusBatch) {
    // Sample 0: perfect; sample 1: empty prediction against full label.
    TensorD p({2, 1, 2}, {1, 1, 0, 0});
    TensorD y({2, 1, 2}, {1, 1, 1, 1});
    const double s0 = 1.0 - (2 * 2 + 1.0) / (4 + 1.0), s1 = 1.0 - 1.0 / (2 + 1.0);
    EXPECT_NEAR(dice_loss(p, y).item(), (s0 + s1) / 2, 1e-15);
    EXPECT_NEAR(dice_loss(p, y, {}, 1.0, false).item(), 1.0 - (2 * 2 + 1.0) / (6 + 1.0), 1e-15);
}

TEST(Phase1, Examples) {
    const Shape s{1, 1, 10, 100};
    Rng rng(2);
    const TensorD p = random_probs(s, rng), y = random_labels(s, rng);
    LossConfig l0;
    l0.lambda = 0.0;
    EXPECT_EQ(phase1_loss(p, y, l0).item(), bce(p, y).item());
    EXPECT_LT(phase1_loss(y, y).item(), 1e-5);
    const TensorD ones = filled(s, 1.0);
    EXPECT_NEAR(phase1_loss(filled(s, 0.5), ones).item(), std::log(2.0) + 1.0 / 3.0, 2e-3);
}

TEST(Phase2, CueZeroEqualsPhase1AndCueOneDoublesBce) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Shape s{2, 1, 4, 5};
        Rng rng(seed);
        const TensorD p = random_probs(s, rng), y = random_labels(s, rng);
        EXPECT_NEAR(phase2_loss(p, y, filled(s, 0.0)).item(), phase1_loss(p, y).item(), 1e-12);
        const TensorD w = cue_weights(filled(s, 1.0));
        EXPECT_NEAR(bce(p, y, w).item(), 2.0 * bce(p, y).item(), 1e-12);
    }
    EXPECT_EQ(cue_weights(TensorD({1}, {0.75}))[0], 1.75);
    EXPECT_THROW(cue_weights(TensorD({1}, {1.5})), ValueError);
    EXPECT_THROW(phase2_loss(filled({2}, 0.5), filled({2}, 1.0), filled({3}, 0.0)), ShapeError);
}

TEST(Losses, NonNegativeAndFinite) {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const Shape s{2, 1, 3, 7};
        TensorD p = l2s::testing::random_tensor(s, rng, 0.0, 1.0, false);
        p.data_mut()[0] = 0.0;
        p.data_mut()[1] = 1.0;
        const TensorD y = random_labels(s, rng), c = l2s::testing::random_tensor(s, rng, 0.0, 1.0, false);
        for (double v : {bce(p, y).item(), dice_loss(p, y).item(), phase1_loss(p, y).item(), phase2_loss(p, y, c).item()}) {
            EXPECT_TRUE(std::isfinite(v));
            EXPECT_GE(v, 0.0);
        }
    }
}

TEST(Losses, CueRaisesMismatchedVoxelBce) {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        const Shape s{6};
        const TensorD p = random_probs(s, rng), y = random_labels(s, rng);
        TensorD c = l2s::testing::random_tensor(s, rng, 0.0, 0.9, false);
        const std::size_t i = rng.index(6);
        const double before = bce(p, y, cue_weights(c)).item();
        c.data_mut()[i] += 0.1;
        EXPECT_GT(bce(p, y, cue_weights(c)).item(), before);
    }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Shape s{2, 1, 3, 3};
        TensorD p = l2s::testing::random_tensor(s, rng, 0.05, 0.95);
        const TensorD y = random_labels(s, rng), c = l2s::testing::random_tensor(s, rng, 0.0, 1.0, false);
        const TensorD w = cue_weights(c);
        using l2s::testing::gradcheck;
        EXPECT_LT(gradcheck([&] { return bce(p, y, w); }, {p}), 1e-3);
        EXPECT_LT(gradcheck([&] { return dice_loss(p, y, w); }, {p}), 1e-3);
        EXPECT_LT(gradcheck([&] { return dice_loss(p, y, w, 1.0, false); }, {p}), 1e-3);
        EXPECT_LT(gradcheck([&] { return phase1_loss(p, y); }, {p}), 1e-3);
        EXPECT_LT(gradcheck([&] { return phase2_loss(p, y, c); }, {p}), 1e-3);
    }
}

TEST(Losses, ConfigValidation) {
    LossConfig c;
    c.lambda = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.eps_dice = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}
