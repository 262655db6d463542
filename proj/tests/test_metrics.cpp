#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "ipwd/metrics.hpp"
#include "oracles.hpp"

using namespace ipwd;

namespace {

PredictionRow row(std::vector<double> p, std::size_t truth, int context = -1) {
    return make_prediction(std::move(p), truth, context);
}

PredictionDump dump_of(std::size_t classes, std::vector<PredictionRow> rows) {
    PredictionDump d;
    d.num_classes = classes;
    d.rows = std::move(rows);
    return d;
}

}  // namespace

TEST(TopK, PerfectAndTieBreaking) {
    const auto perfect = dump_of(3, {row({0.8, 0.1, 0.1}, 0), row({0.1, 0.7, 0.2}, 1)});
    EXPECT_DOUBLE_EQ(topk_accuracy(perfect, 1), 1.0);

    // Uniform predictions all predict class 0.
    std::vector<PredictionRow> rows;
    for (std::size_t y = 0; y < 10; ++y) rows.push_back(row(std::vector<double>(10, 0.1), y));
    const auto uniform = dump_of(10, rows);
    for (const auto& r : uniform.rows) EXPECT_EQ(r.predicted, 0u);
    EXPECT_DOUBLE_EQ(topk_accuracy(uniform, 1), 0.1);
    EXPECT_DOUBLE_EQ(topk_accuracy(uniform, 3), 0.3);
    EXPECT_THROW(topk_accuracy(PredictionDump{}, 1), InvalidArgument);
    EXPECT_THROW(topk_accuracy(uniform, 0), InvalidArgument);
}

TEST(TopK, MatchesRecountOracle) {
    Rng rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        const auto d = oracle::random_dump(rng, 50, 6, trial % 2 ? 20 : 0);
        for (std::size_t k = 1; k <= 5; ++k) {
            std::size_t hits = 0;
            for (const auto& r : d.rows) {
                std::vector<std::size_t> order(6);
                std::iota(order.begin(), order.end(), std::size_t{0});
                std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return r.probs[a] > r.probs[b]; });
                hits += std::find(order.begin(), order.begin() + static_cast<long>(k), r.truth) != order.begin() + static_cast<long>(k);
            }
            ASSERT_DOUBLE_EQ(topk_accuracy(d, k), static_cast<double>(hits) / 50.0);
        }
    }
}

TEST(Recall, PerClassAndMacro) {
    const auto d = dump_of(3, {row({0.9, 0.1, 0.0}, 0), row({0.2, 0.8, 0.0}, 0), row({0.1, 0.9, 0.0}, 1)});
    const auto r = per_class_recall(d);
    EXPECT_DOUBLE_EQ(r[0], 0.5);
    EXPECT_DOUBLE_EQ(r[1], 1.0);
    EXPECT_TRUE(std::isnan(r[2]));
    EXPECT_DOUBLE_EQ(macro_recall(d), 0.75);
}

TEST(Ece, BoundaryCases) {
    std::vector<PredictionRow> right, wrong;
    for (int i = 0; i < 5; ++i) {
        right.push_back(row({1.0, 0.0}, 0));
        wrong.push_back(row({1.0, 0.0}, 1));
    }
    EXPECT_DOUBLE_EQ(ece(dump_of(2, right)), 0.0);
    EXPECT_DOUBLE_EQ(ece(dump_of(2, wrong)), 1.0);
    EXPECT_THROW(ece(dump_of(2, right), 0), InvalidArgument);
}

TEST(Ece, PerfectlyCalibratedBins) {
    // Four samples at confidence 0.75, three correct.
    std::vector<PredictionRow> rows;
    for (int i = 0; i < 4; ++i) rows.push_back(row({0.75, 0.25}, i < 3 ? 0 : 1));
    EXPECT_NEAR(ece(dump_of(2, rows)), 0.0, 1e-12);
}

TEST(Ece, BinEdgesAreRightClosed) {
    EXPECT_EQ(calibration_bin(0.0, 10), 1u);
    EXPECT_EQ(calibration_bin(0.1, 10), 1u);
    EXPECT_EQ(calibration_bin(std::nextafter(0.1, 1.0), 10), 2u);
    EXPECT_EQ(calibration_bin(0.3, 10), 3u);
    EXPECT_EQ(calibration_bin(0.7, 10), 7u);
    EXPECT_EQ(calibration_bin(1.0, 10), 10u);
    for (int m = 1; m <= 10; ++m) {
        const double edge = static_cast<double>(m) / 10.0;
        EXPECT_EQ(calibration_bin(edge, 10), static_cast<std::size_t>(m)) << edge;
    }
}

TEST(EceProperty, MatchesBruteForceAndInvariants) {
    Rng rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        auto d = oracle::random_dump(rng, 1 + rng.below(80), 2 + rng.below(8), trial % 3 == 0 ? 10 : 0);
        const std::size_t bins = 1 + rng.below(20);
        const double e = ece(d, bins);
        ASSERT_NEAR(e, oracle::brute_ece(d, bins), 1e-12);
        ASSERT_GE(e, 0.0);
        ASSERT_LE(e, 1.0);
        // Order invariance.
        std::reverse(d.rows.begin(), d.rows.end());
        ASSERT_NEAR(ece(d, bins), e, 1e-12);
        // One bin: |accuracy - mean confidence|.
        double acc = 0.0, conf = 0.0;
        for (const auto& r : d.rows) {
            acc += r.correct();
            conf += r.confidence;
        }
        ASSERT_NEAR(ece(d, 1), std::abs(acc - conf) / static_cast<double>(d.rows.size()), 1e-12);
    }
}

TEST(Aurc, HandEnumeratedFiveSamples) {
    // Confidences 0.9, 0.8, 0.7, 0.6, 0.5 with correctness 1, 0, 1, 1, 0.
    std::vector<PredictionRow> rows;
    const std::vector<double> conf{0.7, 0.9, 0.5, 0.8, 0.6};
    const std::vector<bool> correct{true, true, false, false, true};
    for (std::size_t i = 0; i < 5; ++i) rows.push_back(row({conf[i], 1.0 - conf[i]}, correct[i] ? 0 : 1));
    // Sorted correctness: 0.9 ok, 0.8 wrong, 0.7 ok, 0.6 ok, 0.5 wrong.
    // Risks: 0, 1/2, 1/3, 1/4, 2/5.
    const double expected = (0.0 + 0.5 + 1.0 / 3.0 + 0.25 + 0.4) / 5.0 * 1000.0;
    EXPECT_NEAR(aurc(dump_of(2, rows)), expected, 1e-12);
}

TEST(Aurc, AllCorrectAndAllWrong) {
    std::vector<PredictionRow> right, wrong;
    for (int i = 0; i < 7; ++i) {
        right.push_back(row({0.6, 0.4}, 0));
        wrong.push_back(row({0.6, 0.4}, 1));
    }
    EXPECT_DOUBLE_EQ(aurc(dump_of(2, right)), 0.0);
    EXPECT_DOUBLE_EQ(aurc(dump_of(2, wrong)), 1000.0);
    EXPECT_THROW(aurc(PredictionDump{}), InvalidArgument);
}

TEST(Aurc, SingleClassConstantPredictor) {
    std::vector<PredictionRow> rows(4, row({1.0, 0.0}, 0));
    const auto d = dump_of(2, rows);
    EXPECT_DOUBLE_EQ(topk_accuracy(d, 1), 1.0);
    EXPECT_DOUBLE_EQ(aurc(d), 0.0);
}

TEST(AurcProperty, MatchesBruteForceWithTies) {
    Rng rng(6);
    for (int trial = 0; trial < 300; ++trial) {
        const auto d = oracle::random_dump(rng, 1 + rng.below(60), 3, trial % 2 ? 5 : 0);
        ASSERT_EQ(aurc(d), oracle::brute_aurc(d));
    }
}

TEST(AurcProperty, CorrectFirstOrderingIsOptimal) {
    // Exhaustive over permutations of distinct confidences for N <= 6 here; the
    // acceptance suite goes to N = 7.
    for (std::size_t n = 1; n <= 6; ++n) {
        for (unsigned mask = 0; mask < (1u << n); ++mask) {
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            double best = 1e9;
            do {
                std::vector<PredictionRow> rows;
                for (std::size_t i = 0; i < n; ++i) {
                    const double c = 0.5 + 0.4 * static_cast<double>(perm[i] + 1) / static_cast<double>(n + 1);
                    rows.push_back(row({c, 1.0 - c}, ((mask >> i) & 1u) ? 0 : 1));
                }
                best = std::min(best, aurc(dump_of(2, rows)));
            } while (std::next_permutation(perm.begin(), perm.end()));
            std::vector<PredictionRow> sorted;
            const int ones = __builtin_popcount(mask);
            for (std::size_t i = 0; i < n; ++i) {
                const double c = 0.9 - 0.4 * static_cast<double>(i + 1) / static_cast<double>(n + 1);
                sorted.push_back(row({c, 1.0 - c}, static_cast<int>(i) < ones ? 0 : 1));
            }
            ASSERT_NEAR(aurc(dump_of(2, sorted)), best, 1e-9);
        }
    }
}

TEST(Profile, UniformTeacherIsFlatAndCurvesSumToOne) {
    std::vector<LogitVector> logits(20, LogitVector{0.0, 0.0, 0.0, 0.0});
    const std::vector<double> taus{1.0, 4.0};
    const auto flat = teacher_profile_from_logits(logits, taus);
    for (const auto& c : flat.curves) {
        EXPECT_DOUBLE_EQ(c.imbalance_ratio, 1.0);
        for (double m : c.class_means) EXPECT_DOUBLE_EQ(m, 0.25);
    }
    Rng rng(3);
    std::vector<LogitVector> random;
    for (int i = 0; i < 100; ++i) random.push_back(LogitVector{3 * rng.normal(), rng.normal(), 2 + rng.normal()});
    const auto p = teacher_profile_from_logits(random, taus);
    for (const auto& c : p.curves) {
        EXPECT_NEAR(std::accumulate(c.class_means.begin(), c.class_means.end(), 0.0), 1.0, 1e-12);
        EXPECT_TRUE(std::is_sorted(c.sorted.rbegin(), c.sorted.rend()));
        EXPECT_EQ(c.sorted.front(), c.class_means[c.ranking.front()]);
    }
    EXPECT_EQ(p.at(4.0).tau, 4.0);
    EXPECT_THROW(p.at(2.0), InvalidArgument);
    EXPECT_THROW(teacher_profile_from_logits(random, std::vector<double>{}), InvalidArgument);
}

TEST(Profile, RatioShrinksAsTemperatureGrowsOnFuzzedTeachers) {
    // Checked empirically over random teachers; softening pulls every mean toward 1/C.
    Rng rng(12);
    const std::vector<double> taus{1.0, 2.0, 4.0, 8.0, 16.0};
    int violations = 0;
    for (int teacher = 0; teacher < 200; ++teacher) {
        std::vector<double> bias(5);
        for (double& b : bias) b = 2.0 * rng.normal();
        std::vector<LogitVector> logits;
        for (int i = 0; i < 200; ++i) {
            LogitVector z(std::vector<double>(5));
            for (std::size_t c = 0; c < 5; ++c) z[c] = bias[c] + rng.normal();
            logits.push_back(z);
        }
        const auto p = teacher_profile_from_logits(logits, taus);
        for (std::size_t t = 1; t < taus.size(); ++t) {
            if (p.curves[t].imbalance_ratio > p.curves[t - 1].imbalance_ratio + 1e-12) ++violations;
        }
    }
    EXPECT_EQ(violations, 0);
}

TEST(Groups, RankQuartilesAndDeltas) {
    // Eight classes, teacher ranking reversed; two samples per class.
    std::vector<PredictionRow> rows;
    for (std::size_t c = 0; c < 8; ++c) {
        std::vector<double> hit(8, 0.0), miss(8, 0.0);
        hit[c] = 1.0;
        miss[(c + 1) % 8] = 1.0;
        rows.push_back(row(hit, c));
        rows.push_back(row(c < 4 ? hit : miss, c));
    }
    const auto d = dump_of(8, rows);
    std::vector<double> means(8);
    for (std::size_t c = 0; c < 8; ++c) means[c] = static_cast<double>(c + 1);
    const auto curve = make_profile_curve(1.0, means);
    EXPECT_EQ(curve.ranking.front(), 7u);

    const auto g = group_recall(d, Grouping::TeacherRank, &curve);
    ASSERT_EQ(g.values.size(), 4u);
    EXPECT_EQ(g.members[0], (std::vector<std::size_t>{7, 6}));
    EXPECT_DOUBLE_EQ(g.values[0], 0.5);
    EXPECT_DOUBLE_EQ(g.values[3], 1.0);
    EXPECT_EQ(g.labels[0], "rank 1-2");

    const auto self = group_recall(d, Grouping::TeacherRank, &curve, &d);
    for (double delta : *self.deltas) EXPECT_EQ(delta, 0.0);

    const auto one = group_recall(d, Grouping::TeacherRank, &curve, nullptr, 1);
    EXPECT_DOUBLE_EQ(one.values[0], macro_recall(d));

    EXPECT_THROW(group_recall(d, Grouping::TeacherRank), ConfigError);
    EXPECT_THROW(group_recall(d, Grouping::Context), ConfigError);
}

TEST(Groups, ContextGroupsUseMacroRecallWithinContext) {
    const auto d = dump_of(2, {row({0.9, 0.1}, 0, 0), row({0.9, 0.1}, 1, 0), row({0.2, 0.8}, 1, 1), row({0.6, 0.4}, 0, 1)});
    const auto g = group_recall(d, Grouping::Context);
    ASSERT_EQ(g.values.size(), 2u);
    EXPECT_DOUBLE_EQ(g.values[0], 0.5);
    EXPECT_DOUBLE_EQ(g.values[1], 1.0);
}

TEST(GroupsProperty, RecountOracleAndMicroEquivalence) {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        // Equal class counts so the class-weighted mean of recalls is micro recall.
        PredictionDump d;
        d.num_classes = 4;
        for (std::size_t c = 0; c < 4; ++c) {
            for (int i = 0; i < 10; ++i) {
                std::vector<double> z(4);
                for (double& v : z) v = rng.normal();
                d.rows.push_back(make_prediction(softmax(z).values, c));
            }
        }
        std::vector<double> means{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
        const auto curve = make_profile_curve(1.0, means);
        const auto g = group_recall(d, Grouping::TeacherRank, &curve, nullptr, 4);
        double micro = 0.0;
        for (const auto& r : d.rows) micro += r.correct();
        micro /= 40.0;
        double combined = 0.0;
        for (double v : g.values) combined += v / 4.0;
        ASSERT_NEAR(combined, micro, 1e-12);
        for (std::size_t k = 0; k < 4; ++k) {
            const std::size_t c = g.members[k][0];
            double hits = 0.0;
            for (const auto& r : d.rows) hits += (r.truth == c && r.predicted == c);
            ASSERT_DOUBLE_EQ(g.values[k], hits / 10.0);
        }
    }
}

TEST(Dump, CsvRoundTrip) {
    Rng rng(4);
    const auto d = oracle::random_dump(rng, 30, 5, 0, true);
    const auto path = std::filesystem::temp_directory_path() / "ipwd_dump.csv";
    write_dump_csv(d, path);
    const auto back = read_dump_csv(path);
    ASSERT_EQ(back.rows.size(), 30u);
    EXPECT_EQ(back.num_classes, 5u);
    for (std::size_t i = 0; i < 30; ++i) {
        EXPECT_EQ(back.rows[i].probs, d.rows[i].probs);
        EXPECT_EQ(back.rows[i].context, d.rows[i].context);
        EXPECT_EQ(back.rows[i].predicted, d.rows[i].predicted);
    }
    EXPECT_EQ(ece(back), ece(d));
    std::filesystem::remove(path);
    EXPECT_THROW(read_dump_csv(path), IoError);
}
