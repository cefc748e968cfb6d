#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "xshift/autodiff.hpp"
#include "xshift/explain.hpp"
#include "xshift/metrics.hpp"
#include "xshift/rng.hpp"
#include "xshift/vlm.hpp"

// Iterative explanation-shifting attack plus FGSM/PGD prediction baselines
// and a budget-matched random-noise control. The attack redirects patch-text
// similarity toward a target concept while keeping the argmax prediction on
// the clean label; each iterate is projected to the sparsity, infinity-norm,
// and validity budgets.

namespace xshift::attack {

enum class UpdateRule { sign_step, adaptive_moment };

inline const char* update_rule_name(UpdateRule r) {
    return r == UpdateRule::sign_step ? "sign_step" : "adaptive_moment";
}

struct AttackConfig {
    std::string target_concept;
    std::vector<std::string> clean_concept_set;  // classes used for prediction and the patch margin
    std::size_t top_k = 0;                       // 0: default ceil(P/4)
    double alpha = 0.5;
    double margin = 0.1;
    double lambda_pred = 0.01;
    double lambda_patch = 1.0;
    double lambda_ent = 0.1;
    double w_xai = 20.0;
    double eta = 1.0 / 255.0;
    std::size_t iterations = 400;
    std::size_t k_sparsity = 0;  // 0: default 10% of input elements
    std::optional<double> epsilon = 4.0 / 255.0;
    UpdateRule update_rule = UpdateRule::sign_step;
    std::uint64_t seed = 0;
};

struct IterationTrace {
    double total = 0.0;
    double l_xai = 0.0;
    double l_pred = 0.0;
    double l_patch = 0.0;
    double l_ent = 0.0;
    double max_delta_prob = 0.0;
    std::optional<double> iou_vs_clean;  // absent for prediction baselines
};

struct AttackResult {
    Tensor x_adv;
    Tensor delta;           // x_adv - x
    std::size_t y_star = 0;  // clean argmax within the concept set
    bool flip = false;       // recomputed from x_adv at the end
    std::vector<IterationTrace> trace;
    std::size_t iterations_run = 0;
    std::size_t k_sparsity_limit = 0;
    std::optional<double> epsilon_limit;
};

// ---------------------------------------------------------------------------
// Loss terms (graph-building; the top-K set is recomputed from detached
// values each call, so selection indices act as constants of the iteration).

inline std::vector<std::size_t> topk_value_indices(const std::vector<double>& v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    idx.resize(k);
    return idx;
}

inline Tensor loss_xai(const Tensor& patch_sims, std::size_t top_k, double alpha) {
    const std::size_t P = patch_sims.size();
    if (patch_sims.rank() != 1) throw std::invalid_argument("loss_xai: patch similarities must be rank-1");
    if (top_k < 1 || top_k >= P)
        throw std::invalid_argument("loss_xai: top_k must satisfy 1 <= K < P, got K=" + std::to_string(top_k) +
                                    " P=" + std::to_string(P));
    std::vector<std::size_t> top = topk_value_indices(patch_sims.data(), top_k);
    std::vector<char> in_top(P, 0);
    for (std::size_t i : top) in_top[i] = 1;
    std::vector<std::size_t> rest;
    rest.reserve(P - top_k);
    for (std::size_t i = 0; i < P; ++i)
        if (!in_top[i]) rest.push_back(i);
    Tensor boost = scale(mean(gather(patch_sims, top)), -1.0);
    Tensor suppress = scale(mean(gather(patch_sims, rest)), alpha);
    return add(boost, suppress);
}

inline Tensor loss_pred(const Tensor& cls_embedding, const Tensor& concept_matrix, std::size_t y_star) {
    const std::size_t C = concept_matrix.shape()[0];
    if (y_star >= C)
        throw std::invalid_argument("loss_pred: label index " + std::to_string(y_star) + " out of range " +
                                    std::to_string(C));
    Tensor logits = reshape(matmul(reshape(cls_embedding, {1, cls_embedding.size()}), concept_matrix, false, true),
                            {C});
    Tensor log_probs = log(softmax(logits));
    return scale(sum(gather(log_probs, {y_star})), -1.0);
}

inline Tensor loss_patch(const Tensor& patch_class_sims, std::size_t target_index, double margin) {
    if (patch_class_sims.rank() != 2) throw std::invalid_argument("loss_patch: need a P x C matrix");
    const std::size_t P = patch_class_sims.shape()[0], C = patch_class_sims.shape()[1];
    if (C < 2) throw std::invalid_argument("loss_patch: need at least 2 classes");
    if (target_index >= C) throw std::invalid_argument("loss_patch: target index out of range");
    std::vector<std::size_t> others;
    others.reserve(C - 1);
    for (std::size_t c = 0; c < C; ++c)
        if (c != target_index) others.push_back(c);
    Tensor best_other = max_last(gather_cols(patch_class_sims, others));            // [P]
    Tensor target_col = reshape(gather_cols(patch_class_sims, {target_index}), {P});  // [P]
    Tensor hinge = relu(add(sub(best_other, target_col), Tensor::scalar(margin)));
    return mean(hinge);
}

inline Tensor loss_entropy(const Tensor& patch_target_sims) {
    if (patch_target_sims.rank() != 1 || patch_target_sims.size() == 0)
        throw std::invalid_argument("loss_entropy: need a nonempty rank-1 input");
    Tensor m = softmax(patch_target_sims);
    return sum(mul(m, log(m)));
}

// ---------------------------------------------------------------------------
// Projections (plain data ops; applied outside the recorded graph)

inline void topk_project(std::vector<double>& delta, std::size_t k) {
    if (k >= delta.size()) return;
    std::vector<std::size_t> idx(delta.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(delta[a]) > std::fabs(delta[b]); });
    std::vector<char> keep(delta.size(), 0);
    for (std::size_t i = 0; i < k; ++i) keep[idx[i]] = 1;
    for (std::size_t i = 0; i < delta.size(); ++i)
        if (!keep[i]) delta[i] = 0.0;
}

inline void clamp_valid(std::vector<double>& x) {
    for (double& v : x) v = std::clamp(v, 0.0, 1.0);
}

inline Tensor clamp_valid(const Tensor& x) {
    Tensor out = x.detached();
    clamp_valid(out.data_mut());
    return out;
}

// ---------------------------------------------------------------------------
// Resolved attack state

namespace detail {

struct Resolved {
    std::vector<std::size_t> concept_indices;  // into the bundle vocabulary
    std::size_t target_index = 0;              // into clean_concept_set
    Tensor concept_mat;                        // [C, D], unit rows, detached
    Tensor target_vec;                         // [D]
    std::size_t top_k = 0;
    std::size_t k_sparsity = 0;
};

inline Resolved resolve(const AttackConfig& cfg, const vlm::ModelBundle& bundle, std::size_t input_size) {
    const std::size_t P = bundle.config.patch_count();
    Resolved r;
    if (cfg.clean_concept_set.size() < 2)
        throw std::invalid_argument("attack: clean_concept_set needs at least 2 concepts");
    for (const auto& n : cfg.clean_concept_set) r.concept_indices.push_back(bundle.concept_index(n));
    auto it = std::find(cfg.clean_concept_set.begin(), cfg.clean_concept_set.end(), cfg.target_concept);
    if (it == cfg.clean_concept_set.end())
        throw std::invalid_argument("attack: target concept '" + cfg.target_concept +
                                    "' not in the clean concept set");
    r.target_index = static_cast<std::size_t>(it - cfg.clean_concept_set.begin());
    r.concept_mat = vlm::concept_matrix(cfg.clean_concept_set, bundle);
    r.target_vec = vlm::concept_embedding(cfg.target_concept, bundle);
    r.top_k = cfg.top_k == 0 ? (P + 3) / 4 : cfg.top_k;
    if (r.top_k < 1 || r.top_k > P) throw std::invalid_argument("attack: top_k out of range");
    r.k_sparsity = cfg.k_sparsity == 0
                       ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.10 * input_size)))
                       : cfg.k_sparsity;
    if (r.k_sparsity < 1 || r.k_sparsity > input_size)
        throw std::invalid_argument("attack: k_sparsity out of range");
    if (!(cfg.alpha >= 0.0)) throw std::invalid_argument("attack: alpha must be >= 0");
    if (!(cfg.margin >= 0.0)) throw std::invalid_argument("attack: margin must be >= 0");
    if (!(cfg.eta >= 0.0)) throw std::invalid_argument("attack: eta must be >= 0");
    if (cfg.iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
    if (cfg.epsilon && !(*cfg.epsilon > 0.0 && *cfg.epsilon <= 1.0))
        throw std::invalid_argument("attack: epsilon must lie in (0,1]");
    return r;
}

}  // namespace detail

struct LossBreakdown {
    Tensor total, xai, pred, patch, entropy;
};

namespace detail {

struct ForwardState {
    vlm::ImageEncoding enc;
    Tensor target_sims;  // [P]
    LossBreakdown losses;
};

inline ForwardState attack_forward(const Tensor& x, const vlm::ModelBundle& bundle, const AttackConfig& cfg,
                                   const Resolved& r, std::size_t y_star) {
    ForwardState f;
    f.enc = vlm::encode_image(x, bundle);
    const std::size_t P = bundle.config.patch_count();
    Tensor class_sims = matmul(f.enc.patches, r.concept_mat, false, true);         // [P, C]
    f.target_sims = reshape(gather_cols(class_sims, {r.target_index}), {P});       // [P]
    f.losses.xai = loss_xai(f.target_sims, r.top_k, cfg.alpha);
    f.losses.pred = loss_pred(f.enc.cls, r.concept_mat, y_star);
    f.losses.patch = loss_patch(class_sims, r.target_index, cfg.margin);
    f.losses.entropy = loss_entropy(f.target_sims);
    f.losses.total = add(add(scale(f.losses.xai, cfg.w_xai), scale(f.losses.pred, cfg.lambda_pred)),
                         add(scale(f.losses.patch, cfg.lambda_patch), scale(f.losses.entropy, cfg.lambda_ent)));
    return f;
}

inline std::size_t count_nonzero(const std::vector<double>& v) {
    std::size_t n = 0;
    for (double x : v)
        if (x != 0.0) ++n;
    return n;
}

inline void assert_result_invariants(const AttackResult& res, const Tensor& x_clean,
                                     const vlm::ModelBundle& bundle,
                                     const std::vector<std::size_t>& concept_indices) {
    for (double v : res.x_adv.data())
        if (v < 0.0 || v > 1.0) throw std::logic_error("attack result: x_adv out of [0,1]");
    if (count_nonzero(res.delta.data()) > res.k_sparsity_limit)
        throw std::logic_error("attack result: sparsity budget violated");
    if (res.epsilon_limit) {
        for (double v : res.delta.data())
            if (std::fabs(v) > *res.epsilon_limit + 1e-12)
                throw std::logic_error("attack result: epsilon budget violated");
    }
    for (std::size_t i = 0; i < res.delta.size(); ++i) {
        const double recon = x_clean.data()[i] + res.delta.data()[i];
        if (std::fabs(recon - res.x_adv.data()[i]) > 1e-12)
            throw std::logic_error("attack result: delta does not reconstruct x_adv");
    }
    NoRecordScope pause;
    auto pred = vlm::predict_from_cls(vlm::encode_image(res.x_adv, bundle).cls.data(), bundle, concept_indices);
    if ((pred.label_index != res.y_star) != res.flip)
        throw std::logic_error("attack result: flip flag inconsistent with recomputed prediction");
}

}  // namespace detail

// Four-term objective at `x` with the clean label fixed to y_star (an index
// into cfg.clean_concept_set). Differentiable when a record is active.
inline LossBreakdown total_loss(const Tensor& x, const vlm::ModelBundle& bundle, const AttackConfig& cfg,
                                std::size_t y_star) {
    detail::Resolved r = detail::resolve(cfg, bundle, x.size());
    return detail::attack_forward(x, bundle, cfg, r, y_star).losses;
}

// ---------------------------------------------------------------------------
// X-Shift

inline AttackResult xshift_attack(const Tensor& x, const vlm::ModelBundle& bundle, const AttackConfig& cfg) {
    detail::Resolved r = detail::resolve(cfg, bundle, x.size());
    const std::size_t n = x.size();
    const std::size_t P = bundle.config.patch_count();
    const std::size_t trace_k = topk_count(P, MetricParams{}.topk_fraction);

    vlm::Prediction clean_pred;
    std::vector<double> clean_map;
    {
        NoRecordScope pause;
        auto enc = vlm::encode_image(x, bundle);
        clean_pred = vlm::predict_from_cls(enc.cls.data(), bundle, r.concept_indices);
        clean_map = explain::patch_similarities(enc, r.target_vec);
    }
    const std::size_t y_star = clean_pred.label_index;
    if (y_star == r.target_index)
        throw std::invalid_argument("xshift_attack: target concept equals the clean label");

    AttackResult res;
    res.y_star = y_star;
    res.k_sparsity_limit = r.k_sparsity;
    res.epsilon_limit = cfg.epsilon;

    std::vector<double> x_cur = x.data();
    std::vector<double> adam_m(n, 0.0), adam_v(n, 0.0);
    std::vector<double> best_x;
    double best_loss = 0.0;

    auto record_iterate = [&](const detail::ForwardState& f) {
        IterationTrace tr;
        tr.total = f.losses.total.item();
        tr.l_xai = f.losses.xai.item();
        tr.l_pred = f.losses.pred.item();
        tr.l_patch = f.losses.patch.item();
        tr.l_ent = f.losses.entropy.item();
        auto pred = vlm::predict_from_cls(f.enc.cls.data(), bundle, r.concept_indices);
        tr.max_delta_prob = max_delta_prob(clean_pred.probs, pred.probs);
        tr.iou_vs_clean = iou_topk(clean_map, f.target_sims.data(), trace_k);
        res.trace.push_back(tr);
        if (pred.label_index == y_star && (best_x.empty() || tr.total < best_loss)) {
            best_loss = tr.total;
            best_x = x_cur;
        }
    };

    for (std::size_t iter = 1; iter <= cfg.iterations; ++iter) {
        std::vector<double> grad;
        {
            ComputationRecord rec;
            Tensor leaf = Tensor::from(x.shape(), x_cur, true);
            detail::ForwardState f = detail::attack_forward(leaf, bundle, cfg, r, y_star);
            rec.backward(f.losses.total);
            grad = leaf.grad();
            if (iter > 1) record_iterate(f);  // f describes iterate iter-1
        }
        // gradient descent step (Algorithm 1 is written as ascent; every term
        // here is built to be minimized, so we descend)
        if (cfg.update_rule == UpdateRule::sign_step) {
            for (std::size_t i = 0; i < n; ++i) {
                const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
                x_cur[i] -= cfg.eta * s;
            }
        } else {
            const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(iter));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(iter));
            for (std::size_t i = 0; i < n; ++i) {
                adam_m[i] = b1 * adam_m[i] + (1.0 - b1) * grad[i];
                adam_v[i] = b2 * adam_v[i] + (1.0 - b2) * grad[i] * grad[i];
                x_cur[i] -= cfg.eta * (adam_m[i] / bc1) / (std::sqrt(adam_v[i] / bc2) + eps);
            }
        }
        // projections: optional L-inf clamp, then sparsity, then validity
        std::vector<double> delta(n);
        for (std::size_t i = 0; i < n; ++i) delta[i] = x_cur[i] - x.data()[i];
        if (cfg.epsilon)
            for (double& d : delta) d = std::clamp(d, -*cfg.epsilon, *cfg.epsilon);
        topk_project(delta, r.k_sparsity);
        for (std::size_t i = 0; i < n; ++i) x_cur[i] = x.data()[i] + delta[i];
        clamp_valid(x_cur);
    }
    {
        // final iterate's losses and trace entry
        NoRecordScope pause;
        Tensor leaf = Tensor::from(x.shape(), x_cur, false);
        detail::ForwardState f = detail::attack_forward(leaf, bundle, cfg, r, y_star);
        record_iterate(f);
    }
    res.iterations_run = cfg.iterations;

    const std::vector<double>& chosen = best_x.empty() ? x_cur : best_x;
    res.x_adv = Tensor::from(x.shape(), chosen);
    std::vector<double> delta(n);
    for (std::size_t i = 0; i < n; ++i) delta[i] = chosen[i] - x.data()[i];
    res.delta = Tensor::from(x.shape(), std::move(delta));
    {
        NoRecordScope pause;
        auto pred = vlm::predict_from_cls(vlm::encode_image(res.x_adv, bundle).cls.data(), bundle,
                                          r.concept_indices);
        res.flip = pred.label_index != y_star;
    }
    detail::assert_result_invariants(res, x, bundle, r.concept_indices);
    return res;
}

// ---------------------------------------------------------------------------
// Prediction baselines

enum class BaselineMode { targeted, untargeted };

namespace detail {

inline AttackResult pgd_impl(const Tensor& x, const vlm::ModelBundle& bundle,
                             const std::vector<std::string>& concept_set, double epsilon, std::size_t steps,
                             double step_size, BaselineMode mode, const std::optional<std::string>& target) {
    if (steps < 1) throw std::invalid_argument("pgd: steps must be >= 1");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("pgd: epsilon must be >= 0");
    if (concept_set.size() < 2) throw std::invalid_argument("pgd: concept set needs at least 2 entries");
    std::vector<std::size_t> concept_indices;
    for (const auto& nconc : concept_set) concept_indices.push_back(bundle.concept_index(nconc));
    Tensor concept_mat = vlm::concept_matrix(concept_set, bundle);

    vlm::Prediction clean_pred;
    {
        NoRecordScope pause;
        clean_pred = vlm::predict_from_cls(vlm::encode_image(x, bundle).cls.data(), bundle, concept_indices);
    }
    const std::size_t y_star = clean_pred.label_index;

    std::size_t loss_label = y_star;
    double direction = +1.0;  // ascend the clean-label CE
    if (mode == BaselineMode::targeted) {
        if (!target) throw std::invalid_argument("pgd: targeted mode requires a target concept");
        auto it = std::find(concept_set.begin(), concept_set.end(), *target);
        if (it == concept_set.end())
            throw std::invalid_argument("pgd: target concept '" + *target + "' not in the concept set");
        loss_label = static_cast<std::size_t>(it - concept_set.begin());
        if (loss_label == y_star)
            throw std::invalid_argument("pgd: target concept equals the clean label");
        direction = -1.0;  // descend toward the target
    }

    AttackResult res;
    res.y_star = y_star;
    res.k_sparsity_limit = x.size();  // no sparsity constraint
    res.epsilon_limit = epsilon;

    const double inv_tau = 1.0 / bundle.temperature();
    const std::size_t n = x.size();
    std::vector<double> x_cur = x.data();

    auto ce_loss = [&](const Tensor& leaf) {
        auto enc = vlm::encode_image(leaf, bundle);
        Tensor logits = scale(
            reshape(matmul(reshape(enc.cls, {1, enc.cls.size()}), concept_mat, false, true),
                    {concept_set.size()}),
            inv_tau);
        Tensor ce = scale(sum(gather(log(softmax(logits)), {loss_label})), -1.0);
        return std::make_pair(ce, enc);
    };

    auto record_iterate = [&](double ce, const vlm::ImageEncoding& enc) {
        IterationTrace tr;
        tr.total = ce;
        tr.l_pred = ce;
        auto pred = vlm::predict_from_cls(enc.cls.data(), bundle, concept_indices);
        tr.max_delta_prob = max_delta_prob(clean_pred.probs, pred.probs);
        res.trace.push_back(tr);
    };

    for (std::size_t step = 1; step <= steps; ++step) {
        std::vector<double> grad;
        {
            ComputationRecord rec;
            Tensor leaf = Tensor::from(x.shape(), x_cur, true);
            auto [ce, enc] = ce_loss(leaf);
            rec.backward(ce);
            grad = leaf.grad();
            if (step > 1) record_iterate(ce.item(), enc);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
            x_cur[i] += direction * step_size * s;
            const double d = std::clamp(x_cur[i] - x.data()[i], -epsilon, epsilon);
            x_cur[i] = std::clamp(x.data()[i] + d, 0.0, 1.0);
        }
    }
    {
        NoRecordScope pause;
        Tensor leaf = Tensor::from(x.shape(), x_cur, false);
        auto [ce, enc] = ce_loss(leaf);
        record_iterate(ce.item(), enc);
    }
    res.iterations_run = steps;
    res.x_adv = Tensor::from(x.shape(), x_cur);
    std::vector<double> delta(n);
    for (std::size_t i = 0; i < n; ++i) delta[i] = x_cur[i] - x.data()[i];
    res.delta = Tensor::from(x.shape(), std::move(delta));
    {
        NoRecordScope pause;
        auto pred =
            vlm::predict_from_cls(vlm::encode_image(res.x_adv, bundle).cls.data(), bundle, concept_indices);
        res.flip = pred.label_index != y_star;
    }
    assert_result_invariants(res, x, bundle, concept_indices);
    return res;
}

}  // namespace detail

inline AttackResult fgsm(const Tensor& x, const vlm::ModelBundle& bundle,
                         const std::vector<std::string>& concept_set, double epsilon, BaselineMode mode,
                         const std::optional<std::string>& target = std::nullopt) {
    return detail::pgd_impl(x, bundle, concept_set, epsilon, 1, epsilon, mode, target);
}

inline AttackResult pgd(const Tensor& x, const vlm::ModelBundle& bundle,
                        const std::vector<std::string>& concept_set, double epsilon, std::size_t steps,
                        double step_size, BaselineMode mode,
                        const std::optional<std::string>& target = std::nullopt) {
    return detail::pgd_impl(x, bundle, concept_set, epsilon, steps, step_size, mode, target);
}

// Budget-matched noise: exactly k_sparsity entries perturbed uniformly in
// [-epsilon, epsilon], mirrored into the valid range so no entry collapses
// to zero.
inline AttackResult random_perturbation_control(const Tensor& x, const vlm::ModelBundle& bundle,
                                                const std::vector<std::string>& concept_set,
                                                std::size_t k_sparsity, double epsilon, std::uint64_t seed) {
    if (k_sparsity < 1 || k_sparsity > x.size())
        throw std::invalid_argument("random_perturbation_control: k_sparsity out of range");
    if (!(epsilon > 0.0 && epsilon <= 1.0))
        throw std::invalid_argument("random_perturbation_control: epsilon must lie in (0,1]");
    std::vector<std::size_t> concept_indices;
    for (const auto& nconc : concept_set) concept_indices.push_back(bundle.concept_index(nconc));

    Rng rng(derive_seed(seed, 0x636f6e74726f6cull));
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);

    std::vector<double> delta(n, 0.0);
    for (std::size_t j = 0; j < k_sparsity; ++j) {
        const std::size_t i = order[j];
        const double mag = epsilon * (1.0 - rng.uniform01());  // (0, epsilon]
        double d = rng.bernoulli(0.5) ? mag : -mag;
        const double xi = x.data()[i];
        if (xi + d > 1.0 || xi + d < 0.0) d = -d;
        d = std::clamp(xi + d, 0.0, 1.0) - xi;
        delta[i] = d;
    }
    AttackResult res;
    res.k_sparsity_limit = k_sparsity;
    res.epsilon_limit = epsilon;
    res.iterations_run = 0;
    std::vector<double> x_adv(n);
    for (std::size_t i = 0; i < n; ++i) x_adv[i] = x.data()[i] + delta[i];
    res.x_adv = Tensor::from(x.shape(), std::move(x_adv));
    res.delta = Tensor::from(x.shape(), std::move(delta));
    {
        NoRecordScope pause;
        auto clean = vlm::predict_from_cls(vlm::encode_image(x, bundle).cls.data(), bundle, concept_indices);
        res.y_star = clean.label_index;
        auto pred =
            vlm::predict_from_cls(vlm::encode_image(res.x_adv, bundle).cls.data(), bundle, concept_indices);
        res.flip = pred.label_index != res.y_star;
    }
    detail::assert_result_invariants(res, x, bundle, concept_indices);
    return res;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json attack_config_json(const AttackConfig& cfg) {
    nlohmann::json j;
    j["target_concept"] = cfg.target_concept;
    j["clean_concept_set"] = cfg.clean_concept_set;
    j["top_k"] = cfg.top_k;
    j["alpha"] = cfg.alpha;
    j["margin"] = cfg.margin;
    j["lambda_pred"] = cfg.lambda_pred;
    j["lambda_patch"] = cfg.lambda_patch;
    j["lambda_ent"] = cfg.lambda_ent;
    j["w_xai"] = cfg.w_xai;
    j["eta"] = cfg.eta;
    j["iterations"] = cfg.iterations;
    j["k_sparsity"] = cfg.k_sparsity;
    j["epsilon"] = cfg.epsilon ? nlohmann::json(*cfg.epsilon) : nlohmann::json();
    j["update_rule"] = update_rule_name(cfg.update_rule);
    j["seed"] = cfg.seed;
    return j;
}

inline nlohmann::json attack_result_json(const AttackResult& res) {
    nlohmann::json j;
    j["y_star"] = res.y_star;
    j["flip"] = res.flip;
    j["iterations_run"] = res.iterations_run;
    j["k_sparsity_limit"] = res.k_sparsity_limit;
    j["epsilon_limit"] = res.epsilon_limit ? nlohmann::json(*res.epsilon_limit) : nlohmann::json();
    j["delta_nonzeros"] = detail::count_nonzero(res.delta.data());
    double linf = 0.0;
    for (double v : res.delta.data()) linf = std::max(linf, std::fabs(v));
    j["delta_linf"] = linf;
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& tr : res.trace) {
        nlohmann::json e;
        e["total"] = tr.total;
        e["l_xai"] = tr.l_xai;
        e["l_pred"] = tr.l_pred;
        e["l_patch"] = tr.l_patch;
        e["l_ent"] = tr.l_ent;
        e["max_delta_prob"] = tr.max_delta_prob;
        if (tr.iou_vs_clean) e["iou_vs_clean"] = *tr.iou_vs_clean;
        trace.push_back(e);
    }
    j["trace"] = trace;
    return j;
}

}  // namespace xshift::attack
