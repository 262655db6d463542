#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "ipwd/rng.hpp"
#include "ipwd/weighting.hpp"

using namespace ipwd;

namespace {

DualHeadOutput dual(std::vector<double> kd, std::vector<double> cls) {
    DualHeadOutput o;
    o.z_kd = LogitVector(std::move(kd));
    o.z_cls = LogitVector(std::move(cls));
    return o;
}

DualHeadOutput random_output(Rng& rng, std::size_t classes) {
    std::vector<double> a(classes), b(classes);
    const double sa = rng.uniform(0.05, 15.0), sb = rng.uniform(0.05, 15.0);
    for (double& v : a) v = sa * rng.normal();
    for (double& v : b) v = sb * rng.normal();
    return dual(a, b);
}

}  // namespace

TEST(Propensity, HandComputedRecord) {
    // Without normalization: h_kd = -log softmax(0, 1)[0], h_cls = -log softmax(2, 0)[0].
    WeightingConfig cfg;
    cfg.normalize_logits = false;
    const auto rec = estimate_propensity(dual({0.0, 1.0}, {2.0, 0.0}), OneHotLabel{0}, nullptr, cfg);
    const double h_kd = std::log(1.0 + std::exp(1.0));
    const double h_cls = std::log(1.0 + std::exp(-2.0));
    EXPECT_NEAR(rec.h_kd, h_kd, 1e-15);
    EXPECT_NEAR(rec.h_cls, h_cls, 1e-15);
    EXPECT_NEAR(rec.w_hat, 1.0 + h_kd / h_cls, 1e-12);
    EXPECT_NEAR(rec.p_hat, h_cls / (h_cls + h_kd), 1e-15);
    EXPECT_NEAR(rec.z_x, std::log(h_cls / h_kd), 1e-15);
    EXPECT_FALSE(rec.fallback_flags.any());
}

TEST(Propensity, EqualHeadsGiveWeightTwo) {
    const auto rec = estimate_propensity(dual({0.5, -1.0, 2.0}, {0.5, -1.0, 2.0}), OneHotLabel{1}, nullptr, {});
    EXPECT_DOUBLE_EQ(rec.w_hat, 2.0);
    EXPECT_DOUBLE_EQ(rec.p_hat, 0.5);
}

TEST(Propensity, TeacherReferenceWhenHeadDisabled) {
    WeightingConfig cfg;
    cfg.use_cls_head = false;
    DualHeadOutput out;
    out.z_kd = LogitVector{1.0, 0.0};
    const LogitVector teacher{3.0, 0.0};
    const auto rec = estimate_propensity(out, OneHotLabel{0}, &teacher, cfg);
    EXPECT_NEAR(rec.h_cls, -std::log(std_normalized_probs(teacher).probs[0]), 1e-15);
    EXPECT_THROW(estimate_propensity(out, OneHotLabel{0}, nullptr, cfg), ConfigError);
    EXPECT_THROW(estimate_propensity(out, OneHotLabel{0}, nullptr, WeightingConfig{}), ConfigError);
}

TEST(Propensity, FloorAndFlags) {
    WeightingConfig cfg;
    cfg.normalize_logits = false;
    cfg.epsilon_floor = 1e-4;
    const auto rec = estimate_propensity(dual({0.0, 0.0}, {100.0, 0.0}), OneHotLabel{0}, nullptr, cfg);
    EXPECT_EQ(rec.h_cls, 1e-4);
    EXPECT_TRUE(rec.fallback_flags.has(PropensityFlag::ReferenceFloored));
    EXPECT_FALSE(rec.fallback_flags.has(PropensityFlag::KdFloored));
    EXPECT_NEAR(rec.w_hat, 1.0 + std::log(2.0) / 1e-4, 1e-6);
    EXPECT_TRUE(std::isfinite(rec.w_hat));
}

TEST(Propensity, DegenerateLogitsAreFlagged) {
    const auto rec = estimate_propensity(dual({1.0, 1.0, 1.0}, {0.0, 2.0, 0.0}), OneHotLabel{1}, nullptr, {});
    EXPECT_TRUE(rec.fallback_flags.has(PropensityFlag::KdDegenerate));
    EXPECT_NEAR(rec.h_kd, std::log(3.0), 1e-15);
    EXPECT_TRUE(std::isfinite(rec.w_hat));
}

TEST(Propensity, CapBreaksIdentityAndIsFlagged) {
    WeightingConfig cfg;
    cfg.weight_cap = 3.0;
    const auto rec = estimate_propensity(dual({5.0, 0.0, 0.0}, {0.0, 5.0, 0.0}), OneHotLabel{1}, nullptr, cfg);
    EXPECT_EQ(rec.w_hat, 3.0);
    EXPECT_TRUE(rec.fallback_flags.has(PropensityFlag::WeightCapped));
}

TEST(Propensity, ShapeErrors) {
    EXPECT_THROW(estimate_propensity(dual({1.0, 0.0}, {1.0, 0.0, 0.0}), OneHotLabel{0}, nullptr, {}), InvalidArgument);
    EXPECT_THROW(estimate_propensity(dual({1.0, 0.0}, {1.0, 0.0}), OneHotLabel{2}, nullptr, {}), InvalidArgument);
}

TEST(WeightingConfig, Validation) {
    WeightingConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.epsilon_floor = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.epsilon_floor = 1e-2;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.weight_cap = 1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(PropensityProperty, IdentitiesOnFuzzedOutputs) {
    Rng rng(2024);
    for (int trial = 0; trial < 20000; ++trial) {
        const std::size_t classes = 2 + rng.below(15);
        const auto out = random_output(rng, classes);
        const OneHotLabel y{rng.below(classes)};
        WeightingConfig cfg;
        cfg.normalize_logits = rng.below(2) == 0;
        const auto rec = estimate_propensity(out, y, nullptr, cfg);
        ASSERT_NEAR(rec.p_hat * rec.w_hat, 1.0, 1e-9);
        ASSERT_GT(rec.w_hat, 1.0);
        ASSERT_EQ(rec.w_hat > 2.0, rec.h_kd > rec.h_cls);
        ASSERT_GT(rec.p_hat, 0.0);
        ASSERT_LT(rec.p_hat, 1.0);
    }
}

TEST(PropensityProperty, NormalizedRecordIsScaleInvariant) {
    Rng rng(77);
    for (int trial = 0; trial < 5000; ++trial) {
        const std::size_t classes = 2 + rng.below(10);
        const auto out = random_output(rng, classes);
        const OneHotLabel y{rng.below(classes)};
        const auto base = estimate_propensity(out, y, nullptr, {});
        for (double k : {0.5, 2.0, 10.0}) {
            DualHeadOutput scaled = out;
            for (std::size_t i = 0; i < classes; ++i) {
                scaled.z_kd[i] *= k;
                scaled.z_cls[i] *= k;
            }
            const auto rec = estimate_propensity(scaled, y, nullptr, {});
            ASSERT_NEAR(rec.w_hat, base.w_hat, 1e-9 * base.w_hat);
            ASSERT_NEAR(rec.p_hat, base.p_hat, 1e-9);
        }
    }
}

TEST(WeightSummary, KnownValues) {
    const std::vector<double> w{1.5, 2.5, 3.0, 1.0};
    const auto s = summarize_weights(w);
    EXPECT_EQ(s.count, 4u);
    EXPECT_DOUBLE_EQ(s.mean, 2.0);
    EXPECT_DOUBLE_EQ(s.max, 3.0);
    EXPECT_DOUBLE_EQ(s.frac_above_two, 0.5);
    EXPECT_NEAR(s.std, std::sqrt((0.25 + 0.25 + 1.0 + 1.0) / 4.0), 1e-15);
    EXPECT_THROW(summarize_weights(std::vector<double>{}), InvalidArgument);
}

TEST(BatchWeights, CollectsAndRenormalizes) {
    std::vector<PropensityRecord> recs(3);
    recs[0].w_hat = 1.5;
    recs[1].w_hat = 3.0;
    recs[2].w_hat = 4.5;
    auto bw = batch_weights(recs);
    EXPECT_EQ(bw.weights, (std::vector<double>{1.5, 3.0, 4.5}));
    EXPECT_DOUBLE_EQ(bw.summary.mean, 3.0);
    renormalize_to_unit_mean(bw.weights);
    EXPECT_DOUBLE_EQ(bw.weights[0], 0.5);
    EXPECT_DOUBLE_EQ(bw.weights[2], 1.5);
    EXPECT_THROW(batch_weights(std::vector<PropensityRecord>{}), InvalidArgument);
}
