#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "xshift/autodiff.hpp"
#include "xshift/rng.hpp"

// Miniature CLIP-style dual encoder: a pre-LN patch transformer on the image
// side and a learned per-concept embedding table on the text side, sharing
// one joint space through the CLS projection. Trained with the symmetric
// contrastive objective.

namespace xshift::vlm {

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 64;
    std::size_t encoder_depth = 4;
    std::size_t num_heads = 4;
    std::vector<std::string> concept_vocab;
    std::uint64_t seed = 0;

    std::size_t grid_side() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid_side() * grid_side(); }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t mlp_dim() const { return 2 * embed_dim; }

    void validate() const {
        if (channels != 3) throw std::invalid_argument("ModelConfig: channels must be 3");
        if (patch_size == 0 || image_size % patch_size != 0)
            throw std::invalid_argument("ModelConfig: image_size must be divisible by patch_size");
        if (num_heads == 0 || embed_dim % num_heads != 0)
            throw std::invalid_argument("ModelConfig: embed_dim must be divisible by num_heads");
        if (concept_vocab.empty()) throw std::invalid_argument("ModelConfig: empty concept vocabulary");
        if (encoder_depth == 0) throw std::invalid_argument("ModelConfig: encoder_depth must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"image_size", image_size},     {"channels", channels},
                              {"patch_size", patch_size},     {"embed_dim", embed_dim},
                              {"encoder_depth", encoder_depth}, {"num_heads", num_heads},
                              {"concept_vocab", concept_vocab}, {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.image_size = j.at("image_size").get<std::size_t>();
        c.channels = j.at("channels").get<std::size_t>();
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.encoder_depth = j.at("encoder_depth").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.concept_vocab = j.at("concept_vocab").get<std::vector<std::string>>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

struct TrainingFingerprint {
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    double learning_rate = 0.0;
    std::string optimizer = "adam(beta1=0.9,beta2=0.999,eps=1e-8)";
};

struct BlockWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
};

struct ModelBundle {
    ModelConfig config;
    Tensor patch_embed_w, patch_embed_b;  // [patch_dim, D], [D]
    Tensor cls_token;                     // [1, D]
    Tensor pos_embed;                     // [P+1, D]
    std::vector<BlockWeights> blocks;
    Tensor ln_f_gain, ln_f_bias;
    Tensor joint_proj;      // [D, D]; shared by CLS and patch tokens
    Tensor concept_table;   // [V, D], normalized on use
    Tensor log_temperature; // scalar; tau = exp(log_temperature)
    TrainingFingerprint fingerprint;

    double temperature() const { return std::exp(log_temperature.item()); }

    std::size_t concept_index(const std::string& name) const {
        const auto& vocab = config.concept_vocab;
        auto it = std::find(vocab.begin(), vocab.end(), name);
        if (it == vocab.end()) {
            std::string msg = "unknown concept '" + name + "'; vocabulary:";
            for (const auto& v : vocab) msg += " " + v;
            throw std::invalid_argument(msg);
        }
        return static_cast<std::size_t>(it - vocab.begin());
    }

    // Serialization and optimizer order. Fixed; the bundle file format
    // depends on it.
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> p = {&patch_embed_w, &patch_embed_b, &cls_token, &pos_embed};
        for (auto& blk : blocks) {
            p.push_back(&blk.ln1_gain);
            p.push_back(&blk.ln1_bias);
            p.push_back(&blk.wq);
            p.push_back(&blk.bq);
            p.push_back(&blk.wk);
            p.push_back(&blk.bk);
            p.push_back(&blk.wv);
            p.push_back(&blk.bv);
            p.push_back(&blk.wo);
            p.push_back(&blk.bo);
            p.push_back(&blk.ln2_gain);
            p.push_back(&blk.ln2_bias);
            p.push_back(&blk.w1);
            p.push_back(&blk.b1);
            p.push_back(&blk.w2);
            p.push_back(&blk.b2);
        }
        p.push_back(&ln_f_gain);
        p.push_back(&ln_f_bias);
        p.push_back(&joint_proj);
        p.push_back(&concept_table);
        p.push_back(&log_temperature);
        return p;
    }

    void set_trainable(bool trainable) {
        for (Tensor* t : parameters()) t->set_requires_grad(trainable);
    }
};

inline ModelBundle init_bundle(const ModelConfig& config) {
    config.validate();
    ModelBundle b;
    b.config = config;
    Rng rng(derive_seed(config.seed, 0x6d6f64656cull));
    const std::size_t D = config.embed_dim;
    auto randn = [&](Shape shape, double sigma) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) x = rng.normal(0.0, sigma);
        return Tensor::from(std::move(shape), std::move(v));
    };
    b.patch_embed_w = randn({config.patch_dim(), D}, 0.02);
    b.patch_embed_b = Tensor::zeros({D});
    b.cls_token = randn({1, D}, 0.02);
    b.pos_embed = randn({config.patch_count() + 1, D}, 0.02);
    for (std::size_t i = 0; i < config.encoder_depth; ++i) {
        BlockWeights blk;
        blk.ln1_gain = Tensor::full({D}, 1.0);
        blk.ln1_bias = Tensor::zeros({D});
        blk.wq = randn({D, D}, 0.02);
        blk.bq = Tensor::zeros({D});
        blk.wk = randn({D, D}, 0.02);
        blk.bk = Tensor::zeros({D});
        blk.wv = randn({D, D}, 0.02);
        blk.bv = Tensor::zeros({D});
        blk.wo = randn({D, D}, 0.02);
        blk.bo = Tensor::zeros({D});
        blk.ln2_gain = Tensor::full({D}, 1.0);
        blk.ln2_bias = Tensor::zeros({D});
        blk.w1 = randn({D, config.mlp_dim()}, 0.02);
        blk.b1 = Tensor::zeros({config.mlp_dim()});
        blk.w2 = randn({config.mlp_dim(), D}, 0.02);
        blk.b2 = Tensor::zeros({D});
        b.blocks.push_back(std::move(blk));
    }
    b.ln_f_gain = Tensor::full({D}, 1.0);
    b.ln_f_bias = Tensor::zeros({D});
    b.joint_proj = randn({D, D}, 0.05);
    b.concept_table = randn({config.concept_vocab.size(), D}, 0.1);
    b.log_temperature = Tensor::scalar(std::log(0.07));
    b.fingerprint.seed = config.seed;
    return b;
}

struct ImageEncoding {
    Tensor cls;      // [D], unit norm
    Tensor patches;  // [P, D], unit-norm rows in row-major patch-grid order
};

namespace detail {

inline std::vector<std::size_t> patchify_indices(const ModelConfig& c) {
    const std::size_t S = c.image_size, ps = c.patch_size, G = c.grid_side();
    std::vector<std::size_t> idx;
    idx.reserve(c.patch_count() * c.patch_dim());
    for (std::size_t pr = 0; pr < G; ++pr)
        for (std::size_t pc = 0; pc < G; ++pc)
            for (std::size_t ch = 0; ch < c.channels; ++ch)
                for (std::size_t dy = 0; dy < ps; ++dy)
                    for (std::size_t dx = 0; dx < ps; ++dx)
                        idx.push_back(ch * S * S + (pr * ps + dy) * S + (pc * ps + dx));
    return idx;
}

inline Tensor affine_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return add(mul(x, gain), bias);
}

inline Tensor attention(const Tensor& x, const BlockWeights& blk, const ModelConfig& c) {
    const std::size_t H = c.num_heads, dh = c.head_dim();
    Tensor q = add(matmul(x, blk.wq), blk.bq);
    Tensor k = add(matmul(x, blk.wk), blk.bk);
    Tensor v = add(matmul(x, blk.wv), blk.bv);
    std::vector<Tensor> heads;
    heads.reserve(H);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < H; ++h) {
        auto cols = iota_indices(h * dh, (h + 1) * dh);
        Tensor qh = gather_cols(q, cols);
        Tensor kh = gather_cols(k, cols);
        Tensor vh = gather_cols(v, cols);
        Tensor weights = softmax(scale(matmul(qh, kh, false, true), inv_sqrt_dh));
        heads.push_back(matmul(weights, vh));
    }
    return add(matmul(concat(heads, 1), blk.wo), blk.bo);
}

}  // namespace detail

// Differentiable end to end with respect to `x` when a record is active.
inline ImageEncoding encode_image(const Tensor& x, const ModelBundle& bundle) {
    const ModelConfig& c = bundle.config;
    const Shape expected = {c.channels, c.image_size, c.image_size};
    if (x.shape() != expected)
        throw std::invalid_argument("encode_image: expected image shape " + shape_str(expected) + ", got " +
                                    shape_str(x.shape()));
    for (double v : x.data())
        if (v < -1e-9 || v > 1.0 + 1e-9)
            throw std::invalid_argument("encode_image: pixel value " + std::to_string(v) + " outside [0,1]");

    static thread_local std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> cache;
    auto key = std::make_pair(c.image_size, c.patch_size);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, detail::patchify_indices(c)).first;

    Tensor flat = reshape(x, {c.channels * c.image_size * c.image_size});
    Tensor patches_raw = reshape(gather(flat, it->second), {c.patch_count(), c.patch_dim()});
    Tensor tokens = add(matmul(patches_raw, bundle.patch_embed_w), bundle.patch_embed_b);
    Tensor h = add(concat({bundle.cls_token, tokens}, 0), bundle.pos_embed);
    for (const auto& blk : bundle.blocks) {
        Tensor a_in = detail::affine_rows(layer_norm(h), blk.ln1_gain, blk.ln1_bias);
        h = add(h, detail::attention(a_in, blk, c));
        Tensor m_in = detail::affine_rows(layer_norm(h), blk.ln2_gain, blk.ln2_bias);
        Tensor hidden = gelu(add(matmul(m_in, blk.w1), blk.b1));
        h = add(h, add(matmul(hidden, blk.w2), blk.b2));
    }
    h = detail::affine_rows(layer_norm(h), bundle.ln_f_gain, bundle.ln_f_bias);
    Tensor joint = l2_normalize(matmul(h, bundle.joint_proj));

    ImageEncoding enc;
    enc.cls = reshape(gather_rows(joint, {0}), {c.embed_dim});
    enc.patches = gather_rows(joint, iota_indices(1, c.patch_count() + 1));
    return enc;
}

// Normalized text-side vector for a known concept; detached constant.
inline Tensor concept_embedding(const std::string& name, const ModelBundle& bundle) {
    const std::size_t idx = bundle.concept_index(name);
    NoRecordScope pause;
    Tensor row = gather_rows(bundle.concept_table.detached(), {idx});
    return reshape(l2_normalize(row), {bundle.config.embed_dim});
}

// Rows are normalized concept vectors for the given names; detached.
inline Tensor concept_matrix(const std::vector<std::string>& names, const ModelBundle& bundle) {
    std::vector<std::size_t> idxs;
    idxs.reserve(names.size());
    for (const auto& n : names) idxs.push_back(bundle.concept_index(n));
    NoRecordScope pause;
    return l2_normalize(gather_rows(bundle.concept_table.detached(), idxs));
}

struct Prediction {
    std::vector<double> probs;  // over the concept set, sums to 1
    std::size_t label_index;    // argmax, ties to the lowest index
};

inline Prediction predict_from_cls(const std::vector<double>& cls, const ModelBundle& bundle,
                                   const std::vector<std::size_t>& concept_indices) {
    if (concept_indices.empty()) throw std::invalid_argument("predict: empty concept set");
    const std::size_t D = bundle.config.embed_dim;
    const double inv_tau = 1.0 / bundle.temperature();
    const auto& table = bundle.concept_table.data();
    std::vector<double> logits(concept_indices.size());
    for (std::size_t c = 0; c < concept_indices.size(); ++c) {
        const double* row = table.data() + concept_indices[c] * D;
        double norm = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < D; ++i) norm += row[i] * row[i];
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < D; ++i) dot += cls[i] * row[i] / norm;
        logits[c] = dot * inv_tau;
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    Prediction pred;
    pred.probs.resize(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c) {
        pred.probs[c] = std::exp(logits[c] - mx);
        z += pred.probs[c];
    }
    for (double& p : pred.probs) p /= z;
    pred.label_index = 0;
    for (std::size_t c = 1; c < pred.probs.size(); ++c)
        if (pred.probs[c] > pred.probs[pred.label_index]) pred.label_index = c;
    return pred;
}

inline Prediction predict(const Tensor& x, const ModelBundle& bundle,
                          const std::vector<std::string>& concept_set) {
    std::vector<std::size_t> idxs;
    idxs.reserve(concept_set.size());
    for (const auto& n : concept_set) idxs.push_back(bundle.concept_index(n));
    NoRecordScope pause;
    ImageEncoding enc = encode_image(x, bundle);
    return predict_from_cls(enc.cls.data(), bundle, idxs);
}

// Symmetric contrastive loss over a batch of image/concept pairs. Concepts
// must be distinct within the batch.
inline Tensor contrastive_loss(const std::vector<Tensor>& batch_images,
                               const std::vector<std::size_t>& batch_concepts, const ModelBundle& bundle) {
    const std::size_t N = batch_images.size();
    if (N < 2 || batch_concepts.size() != N)
        throw std::invalid_argument("contrastive_loss: need a batch of at least 2 image/concept pairs");
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j)
            if (batch_concepts[i] == batch_concepts[j])
                throw std::invalid_argument("contrastive_loss: duplicate concept in batch");

    std::vector<Tensor> cls_rows;
    cls_rows.reserve(N);
    for (const Tensor& img : batch_images) {
        ImageEncoding enc = encode_image(img, bundle);
        cls_rows.push_back(reshape(enc.cls, {1, bundle.config.embed_dim}));
    }
    Tensor zi = concat(cls_rows, 0);
    Tensor zt = l2_normalize(gather_rows(bundle.concept_table, batch_concepts));
    Tensor inv_tau = exp(scale(bundle.log_temperature, -1.0));

    std::vector<std::size_t> diag(N);
    for (std::size_t i = 0; i < N; ++i) diag[i] = i * N + i;

    Tensor img_to_text = log(softmax(mul(matmul(zi, zt, false, true), inv_tau)));
    Tensor text_to_img = log(softmax(mul(matmul(zt, zi, false, true), inv_tau)));
    Tensor matched = add(sum(gather(reshape(img_to_text, {N * N}), diag)),
                         sum(gather(reshape(text_to_img, {N * N}), diag)));
    return scale(matched, -0.5 / static_cast<double>(N));
}

// Adam with fixed hyperparameters; state order follows parameters().
class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<Tensor*> params, double lr)
        : params_(std::move(params)), lr_(lr) {
        for (Tensor* p : params_) {
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }

    void set_learning_rate(double lr) { lr_ = lr; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor* p = params_[pi];
            if (!p->has_grad()) continue;
            const auto& g = p->grad();
            auto& data = p->data_mut();
            for (std::size_t i = 0; i < data.size(); ++i) {
                m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g[i];
                v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m_[pi][i] / bc1;
                const double vhat = v_[pi][i] / bc2;
                data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

  private:
    std::vector<Tensor*> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_;
    std::size_t t_ = 0;
    static constexpr double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

struct TrainExample {
    Tensor image;
    std::string concept_name;
};

struct TrainLog {
    std::vector<std::pair<std::size_t, double>> loss_curve;  // (step, loss)
    double final_loss = 0.0;
};

inline ModelBundle train(const std::vector<TrainExample>& dataset, const ModelConfig& config,
                         std::size_t steps, double learning_rate, TrainLog* log = nullptr) {
    config.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");

    ModelBundle bundle = init_bundle(config);
    bundle.set_trainable(true);

    std::vector<std::vector<const TrainExample*>> pools(config.concept_vocab.size());
    for (const auto& ex : dataset) pools[bundle.concept_index(ex.concept_name)].push_back(&ex);
    for (std::size_t c = 0; c < pools.size(); ++c)
        if (pools[c].empty())
            throw std::invalid_argument("train: no examples for concept '" + config.concept_vocab[c] + "'");

    // Prototype warm start: seed each concept row with the mean CLS encoding
    // of its training images, so training starts from an aligned geometry.
    {
        NoRecordScope pause;
        const std::size_t D = config.embed_dim;
        auto& table = bundle.concept_table.data_mut();
        for (std::size_t c = 0; c < pools.size(); ++c) {
            std::vector<double> mean(D, 0.0);
            for (const TrainExample* ex : pools[c]) {
                ImageEncoding enc = encode_image(ex->image, bundle);
                for (std::size_t i = 0; i < D; ++i) mean[i] += enc.cls.data()[i];
            }
            for (std::size_t i = 0; i < D; ++i) table[c * D + i] = mean[i] / static_cast<double>(pools[c].size());
        }
    }

    AdamOptimizer opt(bundle.parameters(), learning_rate);
    Rng rng(derive_seed(config.seed, 0x747261696eull));
    const std::size_t warmup = std::min<std::size_t>(30, steps / 10 + 1);
    double last_loss = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
        // linear warmup, then cosine decay to a tenth of the peak rate
        double factor;
        if (step < warmup) {
            factor = static_cast<double>(step + 1) / static_cast<double>(warmup);
        } else {
            const double progress =
                static_cast<double>(step - warmup) / std::max<double>(1.0, static_cast<double>(steps - warmup));
            factor = 0.1 + 0.45 * (1.0 + std::cos(3.14159265358979323846 * progress));
        }
        opt.set_learning_rate(learning_rate * factor);

        std::vector<Tensor> images;
        std::vector<std::size_t> concepts;
        for (std::size_t c = 0; c < pools.size(); ++c) {
            images.push_back(pools[c][rng.uniform_index(pools[c].size())]->image);
            concepts.push_back(c);
        }
        ComputationRecord rec;
        Tensor loss = contrastive_loss(images, concepts, bundle);
        rec.backward(loss);
        opt.step();
        last_loss = loss.item();
        if (log && (step % 50 == 0 || step + 1 == steps)) log->loss_curve.emplace_back(step, last_loss);
    }
    if (log) log->final_loss = last_loss;
    bundle.fingerprint.steps = steps;
    bundle.fingerprint.learning_rate = learning_rate;
    bundle.set_trainable(false);
    return bundle;
}

// ---------------------------------------------------------------------------
// Bundle file: magic "XSVLM1", u64-LE header length, JSON header (config +
// fingerprint), then each parameter tensor as raw little-endian doubles in
// parameters() order. Round-trips bit-exactly.

namespace detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(std::istream& in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        int c = in.get();
        if (c == EOF) throw std::runtime_error("bundle: truncated integer field");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

}  // namespace detail

inline void save_bundle(ModelBundle& bundle, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_bundle: cannot write " + path.string());
    out.write("XSVLM1", 6);
    nlohmann::json header;
    header["config"] = bundle.config.to_json();
    header["fingerprint"] = {{"seed", bundle.fingerprint.seed},
                             {"steps", bundle.fingerprint.steps},
                             {"learning_rate", bundle.fingerprint.learning_rate},
                             {"optimizer", bundle.fingerprint.optimizer}};
    const std::string hs = header.dump();
    detail::put_u64_le(out, hs.size());
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (Tensor* t : bundle.parameters()) {
        for (double v : t->data()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw std::runtime_error("save_bundle: short write to " + path.string());
}

inline ModelBundle load_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_bundle: cannot open " + path.string());
    char magic[6];
    in.read(magic, 6);
    if (in.gcount() != 6 || std::string(magic, 6) != "XSVLM1")
        throw std::runtime_error("load_bundle: bad magic in " + path.string());
    const std::uint64_t hlen = detail::get_u64_le(in);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (static_cast<std::uint64_t>(in.gcount()) != hlen)
        throw std::runtime_error("load_bundle: truncated header");
    nlohmann::json header = nlohmann::json::parse(hs);
    ModelBundle bundle = init_bundle(ModelConfig::from_json(header.at("config")));
    const auto& fp = header.at("fingerprint");
    bundle.fingerprint.seed = fp.at("seed").get<std::uint64_t>();
    bundle.fingerprint.steps = fp.at("steps").get<std::size_t>();
    bundle.fingerprint.learning_rate = fp.at("learning_rate").get<double>();
    bundle.fingerprint.optimizer = fp.at("optimizer").get<std::string>();
    for (Tensor* t : bundle.parameters()) {
        for (double& v : t->data_mut()) v = std::bit_cast<double>(detail::get_u64_le(in));
    }
    in.peek();
    if (!in.eof()) throw std::runtime_error("load_bundle: trailing bytes in " + path.string());
    bundle.set_trainable(false);
    return bundle;
}

}  // namespace xshift::vlm
