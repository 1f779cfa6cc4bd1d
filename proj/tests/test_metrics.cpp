#include <gtest/gtest.h>

#include <set>

#include "l2s/metrics.hpp"
#include "oracles.hpp"

using namespace l2s;
using l2s::testing::random_mask;
using l2s::testing::union_find_labels;

namespace {

Volume mask_with(const Index3& shape, double spacing, std::initializer_list<Index3> on) {
    Volume v(shape, {spacing, spacing, spacing}, Modality::MASK);
    for (const auto& p : on) v.at(p[0], p[1], p[2]) = 1.0f;
    return v;
}

}  // namespace

TEST(Dice, Examples) {
    Rng rng(1);
    const Volume a = random_mask({6, 6, 6}, 0.3, rng);
    EXPECT_EQ(dice_score(a, a), 1.0);
    const Volume p = mask_with({4, 4, 4}, 1, {{0, 0, 0}, {0, 0, 1}});
    const Volume g = mask_with({4, 4, 4}, 1, {{0, 0, 1}, {0, 0, 2}});
    EXPECT_EQ(dice_score(p, g), 0.5);
    EXPECT_EQ(dice_score(p, mask_with({4, 4, 4}, 1, {{3, 3, 3}})), 0.0);
    const Volume empty({4, 4, 4}, {1, 1, 1}, Modality::MASK);
    EXPECT_EQ(dice_score(empty, empty), 1.0);
    EXPECT_EQ(dice_score(p, empty), 0.0);
    EXPECT_THROW(dice_score(p, Volume({4, 4, 5}, {1, 1, 1}, Modality::MASK)), ShapeError);
}

TEST(Dice, SymmetricAndBounded) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const Volume a = random_mask({5, 6, 7}, rng.uniform(0, 0.5), rng);
        const Volume b = random_mask({5, 6, 7}, rng.uniform(0, 0.5), rng);
        const double d = dice_score(a, b);
        EXPECT_EQ(d, dice_score(b, a));
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
    }
}

TEST(Components, Examples) {
    EXPECT_EQ(connected_components(mask_with({3, 3, 3}, 1, {{1, 1, 1}}), 6).count, 1u);
    const Volume corner = mask_with({3, 3, 3}, 1, {{0, 0, 0}, {1, 1, 1}});
    EXPECT_EQ(connected_components(corner, 26).count, 1u);
    EXPECT_EQ(connected_components(corner, 18).count, 2u);
    EXPECT_EQ(connected_components(corner, 6).count, 2u);
    const Volume edge = mask_with({3, 3, 3}, 1, {{0, 0, 0}, {0, 1, 1}});
    EXPECT_EQ(connected_components(edge, 18).count, 1u);
    EXPECT_EQ(connected_components(edge, 6).count, 2u);
    EXPECT_THROW(connected_components(corner, 8), ValueError);
}

TEST(Components, MatchUnionFindOracle) {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        const Volume m = random_mask({16, 16, 16}, 0.05 + 0.3 * (t % 10) / 9.0, rng);
        for (int conn : {6, 18, 26}) {
            const Components cc = connected_components(m, conn);
            const auto ref = union_find_labels(m, conn);
            ASSERT_EQ(cc.labels, ref) << "trial " << t << " connectivity " << conn;
            EXPECT_EQ(cc.count, *std::max_element(ref.begin(), ref.end()));
        }
    }
}

TEST(VolumeMetrics, HandCases) {
    // 2x2x2 block disjoint from gt at 2 mm: 8 * 8 mm^3.
    const Volume gt = mask_with({6, 6, 6}, 2.0, {{5, 5, 5}});
    Volume pred = mask_with({6, 6, 6}, 2.0, {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}, {1, 0, 0}, {1, 0, 1}, {1, 1, 0}, {1, 1, 1}});
    EXPECT_EQ(false_positive_volume(pred, gt), 0.064);
    pred.at(5, 5, 5) = 1.0f;
    EXPECT_EQ(false_positive_volume(pred, gt), 0.064);  // the touching component does not count

    // 5-voxel gt component missed entirely at 4 mm: 5 * 64 mm^3.
    const Volume g5 = mask_with({5, 5, 5}, 4.0, {{2, 2, 0}, {2, 2, 1}, {2, 2, 2}, {2, 2, 3}, {2, 2, 4}});
    const Volume p5 = mask_with({5, 5, 5}, 4.0, {{0, 0, 0}});
    EXPECT_NEAR(false_negative_volume(p5, g5), 0.32, 1e-15);
}

TEST(VolumeMetrics, Edges) {
    Rng rng(4);
    for (int t = 0; t < 30; ++t) {
        const Volume gt = random_mask({8, 8, 8}, 0.2, rng);
        Volume sub = gt;
        for (float& x : sub.data) x = x > 0.5f && rng.bernoulli(0.5) ? 1.0f : 0.0f;
        EXPECT_EQ(false_positive_volume(sub, gt), 0.0);
        EXPECT_EQ(false_negative_volume(gt, sub), 0.0);  // sub is inside the prediction gt
        const Volume empty(gt.shape, gt.spacing, Modality::MASK);
        const double total = static_cast<double>(std::count(gt.data.begin(), gt.data.end(), 1.0f)) / 1000.0;
        EXPECT_DOUBLE_EQ(false_negative_volume(empty, gt), total);
        EXPECT_DOUBLE_EQ(false_positive_volume(gt, empty), total);
    }
}

TEST(VolumeMetrics, InvariantUnderJointTranslation) {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        Volume p = random_mask({10, 10, 10}, 0.1, rng), g = random_mask({10, 10, 10}, 0.1, rng);
        // Clear the last two planes of each axis so a shift by (1,2,1) loses nothing.
        auto clear = [](Volume& v) {
            for (std::size_t i = 0; i < 10; ++i)
                for (std::size_t j = 0; j < 10; ++j)
                    for (std::size_t k = 0; k < 10; ++k)
                        if (i >= 8 || j >= 8 || k >= 8) v.at(i, j, k) = 0.0f;
        };
        clear(p);
        clear(g);
        auto shift = [](const Volume& v) {
            Volume o(v.shape, v.spacing, v.modality);
            for (std::size_t i = 0; i < 9; ++i)
                for (std::size_t j = 0; j < 8; ++j)
                    for (std::size_t k = 0; k < 9; ++k) o.at(i + 1, j + 2, k + 1) = v.at(i, j, k);
            return o;
        };
        for (int conn : {6, 26}) {
            EXPECT_EQ(false_positive_volume(p, g, conn), false_positive_volume(shift(p), shift(g), conn));
            EXPECT_EQ(false_negative_volume(p, g, conn), false_negative_volume(shift(p), shift(g), conn));
        }
    }
}

TEST(VolumeMetrics, AddingVoxelNeverRaisesFnvNorLowersFpVoxels) {
    Rng rng(6);
    for (int t = 0; t < 100; ++t) {
        const Volume g = random_mask({8, 8, 8}, 0.15, rng);
        Volume p = random_mask({8, 8, 8}, 0.15, rng);
        const double fnv = false_negative_volume(p, g);
        auto fp_voxels = [&](const Volume& pr) {
            std::size_t n = 0;
            for (std::size_t i = 0; i < pr.data.size(); ++i) n += pr.data[i] > 0.5f && g.data[i] < 0.5f;
            return n;
        };
        const std::size_t fp = fp_voxels(p);
        p.data[rng.index(p.data.size())] = 1.0f;
        EXPECT_LE(false_negative_volume(p, g), fnv);
        EXPECT_GE(fp_voxels(p), fp);
    }
}

TEST(KFold, Examples) {
    std::vector<std::string> ids;
    for (int i = 0; i < 10; ++i) ids.push_back("c" + std::to_string(i));
    const FoldSplit f = kfold_split(ids, 5, 7);
    ASSERT_EQ(f.size(), 5u);
    std::set<std::string> seen;
    for (const auto& fold : f) {
        EXPECT_EQ(fold.size(), 2u);
        for (const auto& id : fold) EXPECT_TRUE(seen.insert(id).second);
    }
    EXPECT_EQ(seen, std::set<std::string>(ids.begin(), ids.end()));
    EXPECT_EQ(kfold_split(ids, 5, 7), f);
    EXPECT_NE(kfold_split(ids, 5, 8), f);
    EXPECT_THROW(kfold_split(ids, 11, 7), ValueError);
    const FoldSplit g = kfold_split(ids, 3, 1);
    EXPECT_EQ(g[0].size(), 4u);
    EXPECT_EQ(g[2].size(), 3u);
}

TEST(Evaluate, ToySetMatchesHandReport) {
    const Index3 s{4, 4, 4};
    auto make = [&](const std::string& id, std::optional<Volume> label) {
        Case c;
        c.id = id;
        c.ct = Volume(s, {2, 2, 2}, Modality::CT);
        c.pet = Volume(s, {2, 2, 2}, Modality::PET);
        c.label = std::move(label);
        return c;
    };
    std::vector<Case> cases{make("a", mask_with(s, 2, {{0, 0, 0}, {0, 0, 1}})),
                            make("b", mask_with(s, 2, {{1, 1, 1}, {3, 3, 3}})), make("c", std::nullopt)};
    std::map<std::string, Volume> masks{{"a", mask_with(s, 2, {{0, 0, 1}, {0, 0, 2}})},
                                        {"b", mask_with(s, 2, {{1, 1, 1}, {3, 0, 0}, {3, 0, 1}})},
                                        {"c", Volume(s, {2, 2, 2}, Modality::MASK)}};
    const MetricsReport r = evaluate(cases, masks, 26, "toy");
    ASSERT_EQ(r.per_case.size(), 3u);
    EXPECT_EQ(r.per_case[0].dice, 0.5);
    EXPECT_EQ(r.per_case[0].fpv_ml, 0.0);
    EXPECT_EQ(r.per_case[0].fnv_ml, 0.0);
    EXPECT_DOUBLE_EQ(r.per_case[1].dice, 0.4);
    EXPECT_DOUBLE_EQ(r.per_case[1].fpv_ml, 0.016);
    EXPECT_DOUBLE_EQ(r.per_case[1].fnv_ml, 0.008);
    EXPECT_EQ(r.per_case[2].dice, 1.0);
    EXPECT_DOUBLE_EQ(r.mean_dice, 1.9 / 3.0);
    EXPECT_DOUBLE_EQ(r.mean_fpv_ml, 0.016 / 3.0);
    EXPECT_DOUBLE_EQ(r.mean_fnv_ml, 0.008 / 3.0);

    const std::string tsv = report_tsv(r);
    EXPECT_EQ(tsv.substr(0, tsv.find('\n')), "# method=toy connectivity=26");
    EXPECT_NE(tsv.find("b\t0.400000\t0.016000\t0.008000\n"), std::string::npos);
    EXPECT_NE(tsv.find("mean\t0.633333\t0.005333\t0.002667\n"), std::string::npos);

    masks.erase("b");
    try {
        evaluate(cases, masks);
        FAIL();
    } catch (const MissingInput& e) {
        EXPECT_NE(std::string(e.what()).find("case b"), std::string::npos);
    }
}

TEST(Evaluate, PerfectAndEmptyPredictions) {
    Rng rng(8);
    std::vector<Case> cases;
    std::map<std::string, Volume> perfect, empty;
    double gt_ml = 0.0;
    for (int i = 0; i < 4; ++i) {
        Case c;
        c.id = "p" + std::to_string(i);
        c.pet = Volume({6, 6, 6}, {1, 1, 1}, Modality::PET);
        c.ct = c.pet;
        Volume g = random_mask({6, 6, 6}, 0.2, rng);
        g.data[0] = 1.0f;
        gt_ml += static_cast<double>(std::count(g.data.begin(), g.data.end(), 1.0f)) / 1000.0;
        perfect[c.id] = g;
        empty[c.id] = Volume({6, 6, 6}, {1, 1, 1}, Modality::MASK);
        c.label = g;
        cases.push_back(c);
    }
    const MetricsReport a = evaluate(cases, perfect);
    EXPECT_EQ(a.mean_dice, 1.0);
    EXPECT_EQ(a.mean_fpv_ml, 0.0);
    EXPECT_EQ(a.mean_fnv_ml, 0.0);
    const MetricsReport b = evaluate(cases, empty);
    EXPECT_EQ(b.mean_dice, 0.0);
    EXPECT_NEAR(b.mean_fnv_ml, gt_ml / 4.0, 1e-12);
}
