#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "xshift/synth.hpp"
#include "xshift/vlm.hpp"

using namespace xshift;
namespace fs = std::filesystem;

namespace {

vlm::ModelConfig small_config(std::uint64_t seed = 42) {
    vlm::ModelConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.embed_dim = 32;
    c.encoder_depth = 2;
    c.num_heads = 2;
    c.concept_vocab = synth::default_vocab();
    c.seed = seed;
    return c;
}

Tensor sample_image(std::uint64_t seed, std::size_t image_size = 16) {
    synth::CorpusConfig cc;
    cc.image_size = image_size;
    return synth::generate_image(seed, 0, synth::default_vocab(), cc).image;
}

double row_norm(const std::vector<double>& data, std::size_t row, std::size_t dim) {
    double s = 0.0;
    for (std::size_t i = 0; i < dim; ++i) s += data[row * dim + i] * data[row * dim + i];
    return std::sqrt(s);
}

}  // namespace

TEST(Model, EncodingRowsAreUnitNorm) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x = sample_image(5);
    auto enc = vlm::encode_image(x, bundle);
    EXPECT_NEAR(row_norm(enc.cls.data(), 0, 32), 1.0, 1e-9);
    for (std::size_t p = 0; p < bundle.config.patch_count(); ++p)
        EXPECT_NEAR(row_norm(enc.patches.data(), p, 32), 1.0, 1e-9);
}

TEST(Model, EncodingIsDeterministic) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x = sample_image(6);
    auto a = vlm::encode_image(x, bundle);
    auto b = vlm::encode_image(x, bundle);
    EXPECT_EQ(a.cls.data(), b.cls.data());
    EXPECT_EQ(a.patches.data(), b.patches.data());
}

TEST(Model, EncodingIsContinuous) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x = sample_image(7);
    Tensor x2 = x.detached();
    for (double& v : x2.data_mut()) v = std::clamp(v + 1e-9, 0.0, 1.0);
    auto a = vlm::encode_image(x, bundle);
    auto b = vlm::encode_image(x2, bundle);
    double cos = 0.0;
    for (std::size_t i = 0; i < a.cls.size(); ++i) cos += a.cls.data()[i] * b.cls.data()[i];
    EXPECT_GT(cos, 0.999999);
}

TEST(Model, EncodeRejectsWrongShape) {
    auto bundle = vlm::init_bundle(small_config());
    EXPECT_THROW(vlm::encode_image(Tensor::zeros({3, 8, 8}), bundle), std::invalid_argument);
    EXPECT_THROW(vlm::encode_image(Tensor::full({3, 16, 16}, 1.5), bundle), std::invalid_argument);
}

TEST(Model, ConceptEmbeddingContract) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor t = vlm::concept_embedding("red_circle", bundle);
    EXPECT_NEAR(row_norm(t.data(), 0, 32), 1.0, 1e-12);
    Tensor t2 = vlm::concept_embedding("red_circle", bundle);
    EXPECT_EQ(t.data(), t2.data());
    try {
        vlm::concept_embedding("no_such_thing", bundle);
        FAIL() << "expected unknown-concept error";
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("no_such_thing"), std::string::npos);
        EXPECT_NE(msg.find("red_circle"), std::string::npos);  // lists vocabulary
    }
}

TEST(Model, EncodeImageIsDifferentiableWrtPixels) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor t = vlm::concept_embedding("blue_square", bundle);
    Tensor x = sample_image(8);

    auto sim_value = [&](const Tensor& img) {
        auto enc = vlm::encode_image(img, bundle);
        double s = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) s += enc.cls.data()[i] * t.data()[i];
        return s;
    };

    Tensor probe = x.detached();
    probe.set_requires_grad(true);
    std::vector<double> analytic;
    {
        ComputationRecord rec;
        auto enc = vlm::encode_image(probe, bundle);
        Tensor loss = dot(enc.cls, t);
        rec.backward(loss);
        analytic = probe.grad();
    }

    Rng rng(99);
    const double h = 1e-5;
    int checked = 0;
    while (checked < 5) {
        std::size_t j = rng.uniform_index(probe.size());
        double orig = probe.data()[j];
        if (orig < 2 * h || orig > 1.0 - 2 * h) continue;
        probe.data_mut()[j] = orig + h;
        double lp = sim_value(probe);
        probe.data_mut()[j] = orig - h;
        double lm = sim_value(probe);
        probe.data_mut()[j] = orig;
        double fd = (lp - lm) / (2 * h);
        double rel = std::fabs(analytic[j] - fd) / std::max({std::fabs(fd), std::fabs(analytic[j]), 1e-8});
        EXPECT_LT(rel, 1e-3) << "pixel " << j;
        ++checked;
    }
}

TEST(Model, PredictSpotCases) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x = sample_image(9);
    auto single = vlm::predict(x, bundle, {"red_circle"});
    ASSERT_EQ(single.probs.size(), 1u);
    EXPECT_DOUBLE_EQ(single.probs[0], 1.0);

    // identical concepts give equal logits; argmax tie-breaks to index 0
    auto tie = vlm::predict(x, bundle, {"red_circle", "red_circle", "red_circle"});
    EXPECT_EQ(tie.label_index, 0u);
    for (double p : tie.probs) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);

    EXPECT_THROW(vlm::predict(x, bundle, {"bogus"}), std::invalid_argument);
    EXPECT_THROW(vlm::predict(x, bundle, {}), std::invalid_argument);

    auto full = vlm::predict(x, bundle, bundle.config.concept_vocab);
    double s = std::accumulate(full.probs.begin(), full.probs.end(), 0.0);
    EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Model, PredictionInvariantUnderConceptReordering) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x = sample_image(10);
    std::vector<std::string> order1 = {"red_circle", "blue_square", "green_triangle", "yellow_circle"};
    std::vector<std::string> order2 = {"green_triangle", "red_circle", "yellow_circle", "blue_square"};
    auto p1 = vlm::predict(x, bundle, order1);
    auto p2 = vlm::predict(x, bundle, order2);
    for (std::size_t i = 0; i < order1.size(); ++i) {
        auto it = std::find(order2.begin(), order2.end(), order1[i]);
        std::size_t j = static_cast<std::size_t>(it - order2.begin());
        EXPECT_NEAR(p1.probs[i], p2.probs[j], 1e-12);
    }
    EXPECT_EQ(order1[p1.label_index], order2[p2.label_index]);
}

TEST(Model, TemperatureScalingPreservesArgmax) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x = sample_image(11);
    auto base = vlm::predict(x, bundle, bundle.config.concept_vocab);
    for (double lt : {std::log(0.02), std::log(0.3), std::log(1.0)}) {
        bundle.log_temperature.data_mut()[0] = lt;
        auto p = vlm::predict(x, bundle, bundle.config.concept_vocab);
        EXPECT_EQ(p.label_index, base.label_index);
    }
}

TEST(Model, ContrastiveLossUniformEqualsLog2) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x1 = sample_image(12);
    Tensor x2 = sample_image(13);
    auto e1 = vlm::encode_image(x1, bundle);
    auto e2 = vlm::encode_image(x2, bundle);
    // table rows 0 and 1 set to a vector orthogonal to both CLS embeddings:
    // all four similarities are zero, both softmaxes are uniform.
    const std::size_t D = bundle.config.embed_dim;
    std::vector<double> v(D);
    Rng rng(14);
    for (double& w : v) w = rng.normal();
    // Gram-Schmidt: orthogonalize u2 against u1 before projecting both out,
    // since the two CLS embeddings are far from orthogonal themselves.
    std::vector<double> u1 = e1.cls.data(), u2 = e2.cls.data();
    auto project_out = [D](std::vector<double>& target, const std::vector<double>& u) {
        double uu = 0.0, uv = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            uu += u[i] * u[i];
            uv += u[i] * target[i];
        }
        for (std::size_t i = 0; i < D; ++i) target[i] -= uv / uu * u[i];
    };
    project_out(u2, u1);
    project_out(v, u1);
    project_out(v, u2);
    auto& table = bundle.concept_table.data_mut();
    for (std::size_t i = 0; i < D; ++i) {
        table[0 * D + i] = v[i];
        table[1 * D + i] = v[i];
    }
    Tensor loss = vlm::contrastive_loss({x1, x2}, {0, 1}, bundle);
    EXPECT_NEAR(loss.item(), std::log(2.0), 1e-10);
}

TEST(Model, ContrastiveLossVanishesAtAlignedExtreme) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x1 = sample_image(15);
    Tensor x2 = sample_image(16);
    auto e1 = vlm::encode_image(x1, bundle);
    auto e2 = vlm::encode_image(x2, bundle);
    // The two CLS embeddings are strongly correlated under a random encoder,
    // so align the table with +/- their difference direction: the diagonal
    // similarities are positive, the off-diagonals their negatives, and a
    // sharp temperature drives the matched softmax toward 1.
    const std::size_t D = bundle.config.embed_dim;
    auto& table = bundle.concept_table.data_mut();
    for (std::size_t i = 0; i < D; ++i) {
        const double d = e1.cls.data()[i] - e2.cls.data()[i];
        table[0 * D + i] = d;
        table[1 * D + i] = -d;
    }
    bundle.log_temperature.data_mut()[0] = std::log(0.001);
    Tensor loss = vlm::contrastive_loss({x1, x2}, {0, 1}, bundle);
    EXPECT_GT(loss.item(), 0.0);
    EXPECT_LT(loss.item(), 0.01);
}

TEST(Model, ContrastiveLossMatchesScalarOracle) {
    auto bundle = vlm::init_bundle(small_config(77));
    std::vector<Tensor> images;
    std::vector<std::size_t> concepts = {0, 3, 5, 9};
    for (std::uint64_t s = 20; s < 24; ++s) images.push_back(sample_image(s));

    Tensor loss = vlm::contrastive_loss(images, concepts, bundle);

    // independent scalar re-implementation from raw encodings
    const std::size_t N = 4, D = bundle.config.embed_dim;
    std::vector<std::vector<double>> zi, zt;
    for (const auto& img : images) zi.push_back(vlm::encode_image(img, bundle).cls.data());
    for (std::size_t c : concepts) {
        std::vector<double> row(D);
        double norm = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            row[i] = bundle.concept_table.data()[c * D + i];
            norm += row[i] * row[i];
        }
        norm = std::sqrt(norm);
        for (double& v : row) v /= norm;
        zt.push_back(row);
    }
    const double inv_tau = 1.0 / bundle.temperature();
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        double num = 0.0;
        for (std::size_t k = 0; k < D; ++k) num += zi[i][k] * zt[i][k];
        double row_den = 0.0, col_den = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            double sij = 0.0, sji = 0.0;
            for (std::size_t k = 0; k < D; ++k) {
                sij += zi[i][k] * zt[j][k];
                sji += zi[j][k] * zt[i][k];
            }
            row_den += std::exp(sij * inv_tau);
            col_den += std::exp(sji * inv_tau);
        }
        total += -std::log(std::exp(num * inv_tau) / row_den) - std::log(std::exp(num * inv_tau) / col_den);
    }
    total /= 2.0 * static_cast<double>(N);
    EXPECT_NEAR(loss.item(), total, 1e-10);
}

TEST(Model, ContrastiveLossPreconditions) {
    auto bundle = vlm::init_bundle(small_config());
    Tensor x = sample_image(30);
    EXPECT_THROW(vlm::contrastive_loss({x}, {0}, bundle), std::invalid_argument);
    EXPECT_THROW(vlm::contrastive_loss({x, x}, {3, 3}, bundle), std::invalid_argument);
}

TEST(Model, PatchRowsTrackImageRegions) {
    auto bundle = vlm::init_bundle(small_config(123));
    const std::size_t G = bundle.config.grid_side(), ps = bundle.config.patch_size;
    const std::size_t S = bundle.config.image_size;
    Rng rng(300);
    int hits = 0;
    const int probes = 20;
    for (int rep = 0; rep < probes; ++rep) {
        Tensor x = sample_image(1000 + static_cast<std::uint64_t>(rep));
        std::size_t target = rng.uniform_index(G * G);
        Tensor occluded = x.detached();
        const std::size_t pr = target / G, pc = target % G;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t dy = 0; dy < ps; ++dy)
                for (std::size_t dx = 0; dx < ps; ++dx)
                    occluded.data_mut()[c * S * S + (pr * ps + dy) * S + (pc * ps + dx)] = 0.0;
        auto ea = vlm::encode_image(x, bundle);
        auto eb = vlm::encode_image(occluded, bundle);
        std::size_t best = 0;
        double best_change = -1.0;
        const std::size_t D = bundle.config.embed_dim;
        for (std::size_t p = 0; p < G * G; ++p) {
            double change = 0.0;
            for (std::size_t i = 0; i < D; ++i) {
                double d = ea.patches.data()[p * D + i] - eb.patches.data()[p * D + i];
                change += d * d;
            }
            if (change > best_change) {
                best_change = change;
                best = p;
            }
        }
        if (best == target) ++hits;
    }
    EXPECT_GE(hits, probes * 9 / 10);
}

TEST(Model, TrainPreconditions) {
    auto cfg = small_config();
    std::vector<vlm::TrainExample> empty;
    EXPECT_THROW(vlm::train(empty, cfg, 10, 1e-3), std::invalid_argument);
    std::vector<vlm::TrainExample> one = {{sample_image(1), "red_circle"}};
    EXPECT_THROW(vlm::train(one, cfg, 0, 1e-3), std::invalid_argument);
}

TEST(Model, TrainIsDeterministicAndReducesLoss) {
    synth::CorpusConfig cc;
    cc.image_size = 16;
    auto corpus = synth::generate_corpus(21, 24, cc);
    std::vector<vlm::TrainExample> data;
    for (const auto& im : corpus.images) data.push_back({im.image, im.concept_name});
    auto cfg = small_config(55);
    cfg.encoder_depth = 1;
    vlm::TrainLog log1, log2;
    auto b1 = vlm::train(data, cfg, 80, 3e-3, &log1);
    auto b2 = vlm::train(data, cfg, 80, 3e-3, &log2);
    auto p1 = b1.parameters(), p2 = b2.parameters();
    for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(p1[i]->data(), p2[i]->data());
    EXPECT_LT(log1.final_loss, log1.loss_curve.front().second);
}

TEST(Model, BundleRoundTripsBitExactly) {
    synth::CorpusConfig cc;
    cc.image_size = 16;
    auto corpus = synth::generate_corpus(22, 24, cc);
    std::vector<vlm::TrainExample> data;
    for (const auto& im : corpus.images) data.push_back({im.image, im.concept_name});
    auto cfg = small_config(66);
    cfg.encoder_depth = 1;
    auto bundle = vlm::train(data, cfg, 5, 3e-3);

    auto path = fs::temp_directory_path() / "xshift_test_bundle.bin";
    vlm::save_bundle(bundle, path);
    auto loaded = vlm::load_bundle(path);
    auto pa = bundle.parameters(), pb = loaded.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->data(), pb[i]->data());
    EXPECT_EQ(loaded.config.concept_vocab, bundle.config.concept_vocab);
    EXPECT_EQ(loaded.fingerprint.steps, bundle.fingerprint.steps);

    // byte-identical on re-save
    auto path2 = fs::temp_directory_path() / "xshift_test_bundle2.bin";
    vlm::save_bundle(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(s1, s2);
    fs::remove(path);
    fs::remove(path2);

    EXPECT_THROW(vlm::load_bundle(fs::temp_directory_path() / "nonexistent.bin"), std::runtime_error);
}
