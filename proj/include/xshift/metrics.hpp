#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

// Clean-vs-adversarial comparison statistics: embedding stealth (cossim_cls),
// classifier stability (max_delta_prob), and explanation drift (iou_topk,
// soft_iou, spearman, emd).

namespace xshift {

struct MetricParams {
    double topk_fraction = 0.25;       // fraction of cells binarized for iou_topk
    double soft_iou_temperature = 0.1;
};

struct MetricReport {
    double cossim_cls = 0.0;
    double max_delta_prob = 0.0;
    double iou_topk = 0.0;
    double soft_iou = 0.0;
    double spearman = 0.0;
    double emd = 0.0;
    MetricParams params;
};

inline double cossim_cls(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("cossim_cls: vectors must have equal nonzero length");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw std::domain_error("cossim_cls: zero vector");
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline double max_delta_prob(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) throw std::invalid_argument("max_delta_prob: length mismatch");
    auto check_normalized = [](std::span<const double> v, const char* which) {
        double s = std::accumulate(v.begin(), v.end(), 0.0);
        if (std::fabs(s - 1.0) > 1e-9)
            throw std::invalid_argument(std::string("max_delta_prob: ") + which +
                                        " does not sum to 1 (sum=" + std::to_string(s) + ")");
    };
    check_normalized(p, "first vector");
    check_normalized(q, "second vector");
    double m = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) m = std::max(m, std::fabs(p[i] - q[i]));
    return m;
}

// Indices of the k largest values; ties resolve to the lower flat index.
inline std::vector<std::size_t> topk_cells(std::span<const double> v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    idx.resize(k);
    return idx;
}

inline double iou_topk(std::span<const double> map_clean, std::span<const double> map_adv, std::size_t k) {
    if (map_clean.size() != map_adv.size()) throw std::invalid_argument("iou_topk: map size mismatch");
    if (k < 1 || k > map_clean.size()) throw std::invalid_argument("iou_topk: k out of range");
    std::vector<std::size_t> a = topk_cells(map_clean, k);
    std::vector<std::size_t> b = topk_cells(map_adv, k);
    std::vector<char> in_a(map_clean.size(), 0);
    for (std::size_t i : a) in_a[i] = 1;
    std::size_t inter = 0;
    for (std::size_t i : b) inter += in_a[i];
    const std::size_t uni = 2 * k - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double soft_iou(std::span<const double> map_clean, std::span<const double> map_adv, double temperature) {
    if (map_clean.size() != map_adv.size()) throw std::invalid_argument("soft_iou: map size mismatch");
    if (!(temperature > 0.0)) throw std::invalid_argument("soft_iou: temperature must be positive");
    auto soft = [&](std::span<const double> m) {
        std::vector<double> p(m.size());
        double mx = m[0];
        for (double v : m) mx = std::max(mx, v);
        double z = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) {
            p[i] = std::exp((m[i] - mx) / temperature);
            z += p[i];
        }
        for (double& v : p) v /= z;
        return p;
    };
    std::vector<double> pc = soft(map_clean), pa = soft(map_adv);
    double mins = 0.0, maxs = 0.0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
        mins += std::min(pc[i], pa[i]);
        maxs += std::max(pc[i], pa[i]);
    }
    return mins / maxs;
}

// Fractional (average) ranks for ties.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(std::span<const double> map_clean, std::span<const double> map_adv) {
    if (map_clean.size() != map_adv.size()) throw std::invalid_argument("spearman: map size mismatch");
    if (map_clean.size() < 2) throw std::invalid_argument("spearman: need at least 2 cells");
    std::vector<double> ra = fractional_ranks(map_clean);
    std::vector<double> rb = fractional_ranks(map_adv);
    const double n = static_cast<double>(ra.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) throw std::domain_error("spearman: constant map has no rank variance");
    return cov / std::sqrt(va * vb);
}

// 1-D Wasserstein between the value distributions of the flattened maps.
inline double emd_1d(std::span<const double> map_clean, std::span<const double> map_adv) {
    if (map_clean.size() != map_adv.size()) throw std::invalid_argument("emd_1d: length mismatch");
    std::vector<double> a(map_clean.begin(), map_clean.end());
    std::vector<double> b(map_adv.begin(), map_adv.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::fabs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

inline std::size_t topk_count(std::size_t cells, double fraction) {
    auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(cells)));
    return std::clamp<std::size_t>(k, 1, cells);
}

inline MetricReport score_pair(std::span<const double> cls_clean, std::span<const double> cls_adv,
                               std::span<const double> prob_clean, std::span<const double> prob_adv,
                               std::span<const double> map_clean, std::span<const double> map_adv,
                               const MetricParams& params = {}) {
    MetricReport r;
    r.params = params;
    r.cossim_cls = cossim_cls(cls_clean, cls_adv);
    r.max_delta_prob = max_delta_prob(prob_clean, prob_adv);
    r.iou_topk = iou_topk(map_clean, map_adv, topk_count(map_clean.size(), params.topk_fraction));
    r.soft_iou = soft_iou(map_clean, map_adv, params.soft_iou_temperature);
    r.spearman = spearman(map_clean, map_adv);
    r.emd = emd_1d(map_clean, map_adv);
    return r;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline constexpr const char* kMetricCsvHeader =
    "cossim_cls,max_delta_prob,iou_topk,soft_iou,spearman,emd,topk_fraction,soft_iou_temperature";

inline std::string metric_csv_row(const MetricReport& r) {
    return format_double(r.cossim_cls) + "," + format_double(r.max_delta_prob) + "," +
           format_double(r.iou_topk) + "," + format_double(r.soft_iou) + "," + format_double(r.spearman) +
           "," + format_double(r.emd) + "," + format_double(r.params.topk_fraction) + "," +
           format_double(r.params.soft_iou_temperature);
}

inline nlohmann::json metric_json(const MetricReport& r) {
    return nlohmann::json{{"cossim_cls", r.cossim_cls},
                          {"max_delta_prob", r.max_delta_prob},
                          {"iou_topk", r.iou_topk},
                          {"soft_iou", r.soft_iou},
                          {"spearman", r.spearman},
                          {"emd", r.emd},
                          {"topk_fraction", r.params.topk_fraction},
                          {"soft_iou_temperature", r.params.soft_iou_temperature}};
}

}  // namespace xshift
