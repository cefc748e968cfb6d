#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xshift/attack.hpp"
#include "xshift/synth.hpp"
#include "xshift/vlm.hpp"

using namespace xshift;
using attack::AttackConfig;
using attack::BaselineMode;

namespace {

vlm::ModelConfig tiny_config(std::uint64_t seed = 31) {
    vlm::ModelConfig c;
    c.image_size = 8;
    c.patch_size = 4;  // G=2, P=4
    c.embed_dim = 16;
    c.encoder_depth = 1;
    c.num_heads = 2;
    c.concept_vocab = synth::default_vocab();
    c.seed = seed;
    return c;
}

Tensor tiny_image(std::uint64_t seed, std::size_t index = 0) {
    synth::CorpusConfig cc;
    cc.image_size = 8;
    return synth::generate_image(seed, index, synth::default_vocab(), cc).image;
}

AttackConfig tiny_attack_config(const vlm::ModelBundle& bundle, const Tensor& x) {
    AttackConfig cfg;
    cfg.clean_concept_set = bundle.config.concept_vocab;
    auto pred = vlm::predict(x, bundle, cfg.clean_concept_set);
    // any concept other than the clean label works as a target
    cfg.target_concept = cfg.clean_concept_set[(pred.label_index + 1) % cfg.clean_concept_set.size()];
    cfg.iterations = 5;
    cfg.top_k = 1;
    return cfg;
}

}  // namespace

TEST(AttackLoss, XaiSpotValues) {
    Tensor sims = Tensor::from({3}, {0.9, 0.1, 0.2});
    EXPECT_NEAR(attack::loss_xai(sims, 1, 0.5).item(), -0.825, 5e-7);
    Tensor equal = Tensor::from({4}, {0.37, 0.37, 0.37, 0.37});
    EXPECT_NEAR(attack::loss_xai(equal, 2, 0.0).item(), -0.37, 1e-15);
    EXPECT_THROW(attack::loss_xai(sims, 3, 0.5), std::invalid_argument);
    EXPECT_THROW(attack::loss_xai(sims, 0, 0.5), std::invalid_argument);
}

TEST(AttackLoss, XaiMatchesBruteForceOracle) {
    Rng rng(41);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t P = 16;
        std::vector<double> v(P);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        const std::size_t K = 1 + rng.uniform_index(P - 1);
        const double alpha = rng.uniform(0.0, 2.0);
        // independent oracle: sort (value desc, index asc), average both sets
        std::vector<std::size_t> idx(P);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (v[a] != v[b]) return v[a] > v[b];
            return a < b;
        });
        double top = 0.0, rest = 0.0;
        for (std::size_t i = 0; i < P; ++i) (i < K ? top : rest) += v[idx[i]];
        const double expected = -top / static_cast<double>(K) + alpha * rest / static_cast<double>(P - K);
        EXPECT_NEAR(attack::loss_xai(Tensor::from({P}, v), K, alpha).item(), expected, 1e-12);
    }
}

TEST(AttackLoss, PredSpotValues) {
    // concept rows are axis-aligned, so logits equal the cls entries
    Tensor concepts = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor cls = Tensor::from({2}, {2.0, 0.0});
    EXPECT_NEAR(attack::loss_pred(cls, concepts, 0).item(), std::log(1.0 + std::exp(-2.0)), 5e-7);
    EXPECT_NEAR(attack::loss_pred(cls, concepts, 0).item(), 0.126928, 5e-7);

    Tensor concepts5 = Tensor::from({5, 5}, [] {
        std::vector<double> eye(25, 0.0);
        for (int i = 0; i < 5; ++i) eye[i * 5 + i] = 1.0;
        return eye;
    }());
    Tensor flat = Tensor::from({5}, {0.4, 0.4, 0.4, 0.4, 0.4});
    EXPECT_NEAR(attack::loss_pred(flat, concepts5, 2).item(), std::log(5.0), 1e-12);
    EXPECT_THROW(attack::loss_pred(cls, concepts, 2), std::invalid_argument);
}

TEST(AttackLoss, PredMatchesScalarOracle) {
    Rng rng(42);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t C = 5, D = 7;
        std::vector<double> cls(D), table(C * D);
        for (double& x : cls) x = rng.uniform(-1.0, 1.0);
        for (double& x : table) x = rng.uniform(-1.0, 1.0);
        const std::size_t y = rng.uniform_index(C);
        std::vector<double> logits(C, 0.0);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < D; ++i) logits[c] += cls[i] * table[c * D + i];
        double z = 0.0;
        for (double l : logits) z += std::exp(l);
        const double expected = -std::log(std::exp(logits[y]) / z);
        double got = attack::loss_pred(Tensor::from({D}, cls), Tensor::from({C, D}, table), y).item();
        EXPECT_NEAR(got, expected, 1e-12);
    }
}

TEST(AttackLoss, PatchSpotValues) {
    Tensor ok = Tensor::from({1, 2}, {0.8, 0.5});  // target col 0
    EXPECT_DOUBLE_EQ(attack::loss_patch(ok, 0, 0.1).item(), 0.0);
    Tensor bad = Tensor::from({1, 2}, {0.3, 0.5});
    EXPECT_NEAR(attack::loss_patch(bad, 0, 0.1).item(), 0.3, 1e-15);
    EXPECT_THROW(attack::loss_patch(Tensor::from({2, 1}, {0.1, 0.2}), 0, 0.1), std::invalid_argument);
}

TEST(AttackLoss, PatchMatchesDoubleLoopOracle) {
    Rng rng(43);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t P = 8, C = 4;
        std::vector<double> s(P * C);
        for (double& x : s) x = rng.uniform(-1.0, 1.0);
        const std::size_t t = rng.uniform_index(C);
        const double m = rng.uniform(0.0, 0.5);
        double acc = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
            double best_other = -1e300;
            for (std::size_t c = 0; c < C; ++c)
                if (c != t) best_other = std::max(best_other, s[p * C + c]);
            acc += std::max(0.0, best_other - s[p * C + t] + m);
        }
        const double expected = acc / static_cast<double>(P);
        EXPECT_NEAR(attack::loss_patch(Tensor::from({P, C}, s), t, m).item(), expected, 1e-12);
    }
}

TEST(AttackLoss, EntropySpotValues) {
    Tensor equal4 = Tensor::from({4}, {0.2, 0.2, 0.2, 0.2});
    EXPECT_NEAR(attack::loss_entropy(equal4).item(), -std::log(4.0), 1e-12);
    EXPECT_NEAR(attack::loss_entropy(equal4).item(), -1.386294, 5e-7);
    Tensor two = Tensor::from({2}, {0.0, 0.0});
    EXPECT_NEAR(attack::loss_entropy(two).item(), -std::log(2.0), 1e-12);
    EXPECT_NEAR(attack::loss_entropy(two).item(), -0.693147, 5e-7);

    Tensor peaked = Tensor::from({4}, {10.0, 0.0, 0.0, 0.0});
    double z = std::exp(10.0) + 3.0;
    double expected = 0.0;
    for (double l : {10.0, 0.0, 0.0, 0.0}) {
        double p = std::exp(l) / z;
        expected += p * std::log(p);
    }
    EXPECT_NEAR(attack::loss_entropy(peaked).item(), expected, 1e-12);
    EXPECT_THROW(attack::loss_entropy(Tensor::from({0}, std::vector<double>{})), std::invalid_argument);
}

TEST(AttackLoss, EntropyRangeProperty) {
    Rng rng(44);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t P = 2 + rng.uniform_index(30);
        std::vector<double> v(P);
        for (double& x : v) x = rng.uniform(-2.0, 2.0);
        double e = attack::loss_entropy(Tensor::from({P}, v)).item();
        EXPECT_GE(e, -std::log(static_cast<double>(P)) - 1e-12);
        EXPECT_LT(e, 0.0);
    }
}

TEST(AttackLoss, TotalLossComposition) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(50);
    AttackConfig cfg = tiny_attack_config(bundle, x);
    auto pred = vlm::predict(x, bundle, cfg.clean_concept_set);

    // degenerate weights reduce to single terms
    AttackConfig only_xai = cfg;
    only_xai.w_xai = 1.0;
    only_xai.lambda_pred = only_xai.lambda_patch = only_xai.lambda_ent = 0.0;
    auto bx = attack::total_loss(x, bundle, only_xai, pred.label_index);
    EXPECT_NEAR(bx.total.item(), bx.xai.item(), 1e-15);

    AttackConfig only_pred = cfg;
    only_pred.w_xai = only_pred.lambda_patch = only_pred.lambda_ent = 0.0;
    only_pred.lambda_pred = 1.0;
    auto bp = attack::total_loss(x, bundle, only_pred, pred.label_index);
    EXPECT_NEAR(bp.total.item(), bp.pred.item(), 1e-15);

    // default weights match the hand-composed sum of the four terms
    auto full = attack::total_loss(x, bundle, cfg, pred.label_index);
    const double composed = cfg.w_xai * full.xai.item() + cfg.lambda_pred * full.pred.item() +
                            cfg.lambda_patch * full.patch.item() + cfg.lambda_ent * full.entropy.item();
    EXPECT_NEAR(full.total.item(), composed, 1e-12);

    // and each term matches an independent scalar recomputation
    auto enc = vlm::encode_image(x, bundle);
    Tensor tvec = vlm::concept_embedding(cfg.target_concept, bundle);
    auto sims = explain::patch_similarities(enc, tvec);
    const std::size_t P = sims.size(), K = 1;
    std::vector<std::size_t> idx(P);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return a < b;
    });
    double top = 0.0, restv = 0.0;
    for (std::size_t i = 0; i < P; ++i) (i < K ? top : restv) += sims[idx[i]];
    EXPECT_NEAR(full.xai.item(), -top / K + cfg.alpha * restv / (P - K), 1e-12);

    double z = 0.0;
    for (double s : sims) z += std::exp(s);
    double ent = 0.0;
    for (double s : sims) {
        double p = std::exp(s) / z;
        ent += p * std::log(p);
    }
    EXPECT_NEAR(full.entropy.item(), ent, 1e-12);
}

TEST(AttackProjection, TopkSpotValues) {
    std::vector<double> v = {0.5, -0.9, 0.1};
    attack::topk_project(v, 2);
    EXPECT_EQ(v, (std::vector<double>{0.5, -0.9, 0.0}));
    std::vector<double> z = {0.4, -0.2, 0.7};
    attack::topk_project(z, 0);
    EXPECT_EQ(z, (std::vector<double>{0.0, 0.0, 0.0}));
    std::vector<double> keep = {0.4, -0.2, 0.7};
    auto copy = keep;
    attack::topk_project(keep, 3);
    EXPECT_EQ(keep, copy);
    attack::topk_project(keep, 10);
    EXPECT_EQ(keep, copy);
}

TEST(AttackProjection, TopkTieBreaksByLowerFlatIndex) {
    std::vector<double> v = {0.5, -0.5, 0.5};
    attack::topk_project(v, 2);
    EXPECT_EQ(v, (std::vector<double>{0.5, -0.5, 0.0}));
}

TEST(AttackProjection, TopkMatchesSortOracle) {
    Rng rng(45);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> v(100);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        auto got = v;
        attack::topk_project(got, 10);
        std::vector<std::size_t> idx(100);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (std::fabs(v[a]) != std::fabs(v[b])) return std::fabs(v[a]) > std::fabs(v[b]);
            return a < b;
        });
        std::vector<double> expected(100, 0.0);
        for (std::size_t i = 0; i < 10; ++i) expected[idx[i]] = v[idx[i]];
        EXPECT_EQ(got, expected);
    }
}

TEST(AttackProjection, ClampValidContract) {
    std::vector<double> v = {1.5, -0.2, 0.3};
    attack::clamp_valid(v);
    EXPECT_EQ(v, (std::vector<double>{1.0, 0.0, 0.3}));
    auto once = v;
    attack::clamp_valid(v);
    EXPECT_EQ(v, once);  // idempotent
    std::vector<double> in_range = {0.0, 0.25, 1.0};
    auto copy = in_range;
    attack::clamp_valid(in_range);
    EXPECT_EQ(in_range, copy);  // unchanged bitwise
}

TEST(Attack, NullUpdateReturnsCleanImage) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(51);
    AttackConfig cfg = tiny_attack_config(bundle, x);
    cfg.iterations = 1;
    cfg.eta = 0.0;
    auto res = attack::xshift_attack(x, bundle, cfg);
    EXPECT_EQ(res.x_adv.data(), x.data());
    for (double d : res.delta.data()) EXPECT_DOUBLE_EQ(d, 0.0);
    EXPECT_FALSE(res.flip);
    EXPECT_EQ(res.trace.size(), 1u);
}

TEST(Attack, ResultInvariantsHoldOnSmallRun) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(52);
    AttackConfig cfg = tiny_attack_config(bundle, x);
    cfg.iterations = 6;
    cfg.k_sparsity = 20;
    cfg.epsilon = 8.0 / 255.0;
    auto res = attack::xshift_attack(x, bundle, cfg);
    EXPECT_LE(res.trace.size(), cfg.iterations);
    std::size_t nnz = 0;
    double linf = 0.0;
    for (double d : res.delta.data()) {
        if (d != 0.0) ++nnz;
        linf = std::max(linf, std::fabs(d));
    }
    EXPECT_LE(nnz, cfg.k_sparsity);
    EXPECT_LE(linf, *cfg.epsilon + 1e-12);
    for (double v : res.x_adv.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Attack, BestIterateBeatsFinalWhenPredictionPreserved) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(53);
    AttackConfig cfg = tiny_attack_config(bundle, x);
    cfg.iterations = 8;
    auto res = attack::xshift_attack(x, bundle, cfg);
    if (!res.flip) {
        auto chosen = attack::total_loss(res.x_adv, bundle, cfg, res.y_star);
        EXPECT_LE(chosen.total.item(), res.trace.back().total + 1e-9);
    }
}

TEST(Attack, DeterministicForIdenticalInputs) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(54);
    AttackConfig cfg = tiny_attack_config(bundle, x);
    cfg.iterations = 4;
    auto a = attack::xshift_attack(x, bundle, cfg);
    auto b = attack::xshift_attack(x, bundle, cfg);
    EXPECT_EQ(a.x_adv.data(), b.x_adv.data());
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_DOUBLE_EQ(a.trace[i].total, b.trace[i].total);
}

TEST(Attack, TargetEqualToCleanLabelRejected) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(55);
    AttackConfig cfg = tiny_attack_config(bundle, x);
    auto pred = vlm::predict(x, bundle, cfg.clean_concept_set);
    cfg.target_concept = cfg.clean_concept_set[pred.label_index];
    EXPECT_THROW(attack::xshift_attack(x, bundle, cfg), std::invalid_argument);
}

TEST(Attack, XaiTermAloneRaisesTopKTargetSimilarity) {
    auto bundle = vlm::init_bundle(tiny_config());
    int improved = 0;
    const int images = 10;
    for (int i = 0; i < images; ++i) {
        Tensor x = tiny_image(60 + static_cast<std::uint64_t>(i), static_cast<std::size_t>(i));
        AttackConfig cfg = tiny_attack_config(bundle, x);
        cfg.lambda_pred = cfg.lambda_patch = cfg.lambda_ent = 0.0;
        cfg.w_xai = 1.0;
        cfg.iterations = 25;
        cfg.k_sparsity = x.size();  // no sparsity limit
        cfg.epsilon = std::nullopt;
        auto res = attack::xshift_attack(x, bundle, cfg);

        Tensor tvec = vlm::concept_embedding(cfg.target_concept, bundle);
        auto topk_mean = [&](const Tensor& img) {
            auto sims = explain::patch_similarities(vlm::encode_image(img, bundle), tvec);
            std::sort(sims.begin(), sims.end(), std::greater<>());
            return sims[0];  // K = 1 at this grid size
        };
        if (topk_mean(res.x_adv) > topk_mean(x)) ++improved;
    }
    EXPECT_GE(improved, 9);
}

TEST(Baselines, FgsmZeroEpsilonIsIdentity) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(70);
    auto res = attack::fgsm(x, bundle, bundle.config.concept_vocab, 0.0, BaselineMode::untargeted);
    EXPECT_EQ(res.x_adv.data(), x.data());
    EXPECT_FALSE(res.flip);
}

TEST(Baselines, FgsmRespectsInfinityBudget) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(71);
    const double eps = 16.0 / 255.0;
    auto res = attack::fgsm(x, bundle, bundle.config.concept_vocab, eps, BaselineMode::untargeted);
    for (double d : res.delta.data()) EXPECT_LE(std::fabs(d), eps + 1e-15);
}

TEST(Baselines, TargetedModeRequiresValidTarget) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(72);
    EXPECT_THROW(attack::fgsm(x, bundle, bundle.config.concept_vocab, 0.1, BaselineMode::targeted),
                 std::invalid_argument);
    auto pred = vlm::predict(x, bundle, bundle.config.concept_vocab);
    EXPECT_THROW(attack::fgsm(x, bundle, bundle.config.concept_vocab, 0.1, BaselineMode::targeted,
                              bundle.config.concept_vocab[pred.label_index]),
                 std::invalid_argument);
}

TEST(Baselines, PgdSingleStepEqualsFgsm) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(73);
    const double eps = 8.0 / 255.0;
    auto a = attack::fgsm(x, bundle, bundle.config.concept_vocab, eps, BaselineMode::untargeted);
    auto b = attack::pgd(x, bundle, bundle.config.concept_vocab, eps, 1, eps, BaselineMode::untargeted);
    EXPECT_EQ(a.x_adv.data(), b.x_adv.data());
}

TEST(Baselines, PgdStaysInEpsilonBall) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(74);
    const double eps = 4.0 / 255.0;
    auto res = attack::pgd(x, bundle, bundle.config.concept_vocab, eps, 10, eps / 4.0,
                           BaselineMode::untargeted);
    for (double d : res.delta.data()) EXPECT_LE(std::fabs(d), eps + 1e-15);
    EXPECT_EQ(res.iterations_run, 10u);
    EXPECT_THROW(attack::pgd(x, bundle, bundle.config.concept_vocab, eps, 0, eps, BaselineMode::untargeted),
                 std::invalid_argument);
}

TEST(Control, ExactSparsityAndDeterminism) {
    auto bundle = vlm::init_bundle(tiny_config());
    Tensor x = tiny_image(75);
    auto a = attack::random_perturbation_control(x, bundle, bundle.config.concept_vocab, 19, 4.0 / 255.0, 7);
    std::size_t nnz = 0;
    for (double d : a.delta.data())
        if (d != 0.0) ++nnz;
    EXPECT_EQ(nnz, 19u);
    for (double d : a.delta.data()) EXPECT_LE(std::fabs(d), 4.0 / 255.0 + 1e-15);
    auto b = attack::random_perturbation_control(x, bundle, bundle.config.concept_vocab, 19, 4.0 / 255.0, 7);
    EXPECT_EQ(a.delta.data(), b.delta.data());
    auto c = attack::random_perturbation_control(x, bundle, bundle.config.concept_vocab, 19, 4.0 / 255.0, 8);
    EXPECT_NE(a.delta.data(), c.delta.data());
}

TEST(Control, BoundaryPixelsStillPerturbed) {
    auto bundle = vlm::init_bundle(tiny_config());
    // saturate the image to force the mirroring path
    Tensor x = Tensor::full({3, 8, 8}, 1.0);
    auto res = attack::random_perturbation_control(x, bundle, bundle.config.concept_vocab, 50, 0.3, 3);
    std::size_t nnz = 0;
    for (double d : res.delta.data())
        if (d != 0.0) ++nnz;
    EXPECT_EQ(nnz, 50u);
    for (double v : res.x_adv.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}
