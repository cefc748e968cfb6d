#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xshift/autodiff.hpp"
#include "xshift/image_io.hpp"
#include "xshift/rng.hpp"
#include "xshift/vlm.hpp"

// Explanation heatmaps for (image, concept) pairs: native patch-text
// similarity, gradient saliency pooled per patch, and RISE-style random
// masking. Entries are raw scores; normalization happens at render time.

namespace xshift::explain {

enum class Method { similarity, gradient_saliency, rise };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::similarity: return "similarity";
        case Method::gradient_saliency: return "gradient_saliency";
        case Method::rise: return "rise";
    }
    return "?";
}

struct Heatmap {
    std::size_t grid = 0;            // side length G
    std::vector<double> values;      // G*G, row-major patch order
    Method method = Method::similarity;
    std::string concept_name;
    std::string source_image_id;
};

// grid[p] = z_p . z_T with both unit-norm, so entries lie in [-1, 1].
inline Heatmap similarity_map(const Tensor& x, const std::string& concept_name,
                              const vlm::ModelBundle& bundle, const std::string& image_id = "") {
    Tensor t = vlm::concept_embedding(concept_name, bundle);
    NoRecordScope pause;
    vlm::ImageEncoding enc = vlm::encode_image(x, bundle);
    Heatmap h;
    h.grid = bundle.config.grid_side();
    h.method = Method::similarity;
    h.concept_name = concept_name;
    h.source_image_id = image_id;
    const std::size_t P = bundle.config.patch_count(), D = bundle.config.embed_dim;
    h.values.resize(P);
    for (std::size_t p = 0; p < P; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < D; ++i) s += enc.patches.data()[p * D + i] * t.data()[i];
        h.values[p] = s;
    }
    return h;
}

// Values computed during an attack iteration reuse this helper so the final
// trace entry and similarity_map agree exactly.
inline std::vector<double> patch_similarities(const vlm::ImageEncoding& enc, const Tensor& concept_vec) {
    const std::size_t D = concept_vec.size();
    const std::size_t P = enc.patches.shape()[0];
    std::vector<double> sims(P);
    for (std::size_t p = 0; p < P; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < D; ++i) s += enc.patches.data()[p * D + i] * concept_vec.data()[i];
        sims[p] = s;
    }
    return sims;
}

// grid[p] = mean over patch-p pixels and channels of |d s(x, concept) / dx|,
// where s is the CLS-to-concept similarity.
inline Heatmap gradient_saliency(const Tensor& x, const std::string& concept_name,
                                 const vlm::ModelBundle& bundle, const std::string& image_id = "") {
    Tensor t = vlm::concept_embedding(concept_name, bundle);
    Tensor probe = x.detached();
    probe.set_requires_grad(true);
    std::vector<double> grad;
    {
        ComputationRecord rec;
        vlm::ImageEncoding enc = vlm::encode_image(probe, bundle);
        Tensor score = dot(enc.cls, t);
        rec.backward(score);
        grad = probe.grad();
    }
    const vlm::ModelConfig& c = bundle.config;
    const std::size_t G = c.grid_side(), ps = c.patch_size, S = c.image_size;
    Heatmap h;
    h.grid = G;
    h.method = Method::gradient_saliency;
    h.concept_name = concept_name;
    h.source_image_id = image_id;
    h.values.assign(G * G, 0.0);
    for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t xx = 0; xx < S; ++xx)
                h.values[(y / ps) * G + (xx / ps)] += std::fabs(grad[ch * S * S + y * S + xx]);
    const double denom = static_cast<double>(c.channels * ps * ps);
    for (double& v : h.values) v /= denom;
    return h;
}

// grid[p] = mean score over masks that keep patch p, minus the mean score
// over all masks. Masks are patch-aligned Bernoulli(keep_prob) grids.
inline Heatmap rise_map(const Tensor& x, const std::string& concept_name, const vlm::ModelBundle& bundle,
                        std::size_t num_masks, double mask_keep_prob, std::uint64_t seed,
                        const std::string& image_id = "") {
    if (num_masks < 1) throw std::invalid_argument("rise_map: num_masks must be >= 1");
    if (!(mask_keep_prob > 0.0) || !(mask_keep_prob < 1.0))
        throw std::invalid_argument("rise_map: mask_keep_prob must lie in (0,1)");
    Tensor t = vlm::concept_embedding(concept_name, bundle);
    NoRecordScope pause;
    const vlm::ModelConfig& c = bundle.config;
    const std::size_t G = c.grid_side(), P = c.patch_count(), ps = c.patch_size, S = c.image_size;

    Rng rng(derive_seed(seed, 0x72697365ull));
    std::vector<double> sum_kept(P, 0.0);
    std::vector<std::size_t> count_kept(P, 0);
    double total_score = 0.0;
    std::vector<std::uint8_t> mask(P);
    for (std::size_t m = 0; m < num_masks; ++m) {
        for (std::size_t p = 0; p < P; ++p) mask[p] = rng.bernoulli(mask_keep_prob) ? 1 : 0;
        Tensor masked = x.detached();
        auto& px = masked.data_mut();
        for (std::size_t p = 0; p < P; ++p) {
            if (mask[p]) continue;
            const std::size_t pr = p / G, pc = p % G;
            for (std::size_t ch = 0; ch < c.channels; ++ch)
                for (std::size_t dy = 0; dy < ps; ++dy)
                    for (std::size_t dx = 0; dx < ps; ++dx)
                        px[ch * S * S + (pr * ps + dy) * S + (pc * ps + dx)] = 0.0;
        }
        vlm::ImageEncoding enc = vlm::encode_image(masked, bundle);
        double score = 0.0;
        for (std::size_t i = 0; i < c.embed_dim; ++i) score += enc.cls.data()[i] * t.data()[i];
        total_score += score;
        for (std::size_t p = 0; p < P; ++p)
            if (mask[p]) {
                sum_kept[p] += score;
                ++count_kept[p];
            }
    }
    const double mean_score = total_score / static_cast<double>(num_masks);
    Heatmap h;
    h.grid = G;
    h.method = Method::rise;
    h.concept_name = concept_name;
    h.source_image_id = image_id;
    h.values.resize(P);
    for (std::size_t p = 0; p < P; ++p)
        h.values[p] = count_kept[p] == 0 ? 0.0
                                         : sum_kept[p] / static_cast<double>(count_kept[p]) - mean_score;
    return h;
}

// Writes a P6 overlay: the heatmap min-max normalized (constant maps go to
// 0.5), upsampled nearest-neighbor, colored blue-to-red, blended 50/50 onto
// the grayscale base image.
inline void render_heatmap(const Heatmap& h, const Tensor& base, const std::filesystem::path& path) {
    const std::size_t S = base.shape()[1];
    const std::size_t G = h.grid;
    if (base.shape()[2] != S || S % G != 0)
        throw std::invalid_argument("render_heatmap: base image incompatible with grid");
    double lo = h.values[0], hi = h.values[0];
    for (double v : h.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const std::size_t cell = S / G;
    PixelBuffer buf;
    buf.width = S;
    buf.height = S;
    buf.channels = 3;
    buf.bytes.resize(3 * S * S);
    const std::size_t plane = S * S;
    for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
            const double gray = (base.data()[0 * plane + y * S + x] + base.data()[1 * plane + y * S + x] +
                                 base.data()[2 * plane + y * S + x]) /
                                3.0;
            const double raw = h.values[(y / cell) * G + (x / cell)];
            const double heat = hi > lo ? (raw - lo) / (hi - lo) : 0.5;
            const double r = 0.5 * gray + 0.5 * heat;
            const double g = 0.5 * gray;
            const double b = 0.5 * gray + 0.5 * (1.0 - heat);
            buf.bytes[(y * S + x) * 3 + 0] = quantize_unit(r);
            buf.bytes[(y * S + x) * 3 + 1] = quantize_unit(g);
            buf.bytes[(y * S + x) * 3 + 2] = quantize_unit(b);
        }
    }
    write_ppm(path, buf);
}

// CSV: G rows of G comma-separated values, 17 significant digits.
inline void write_heatmap_csv(const Heatmap& h, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_heatmap_csv: cannot write " + path.string());
    char buf[64];
    for (std::size_t r = 0; r < h.grid; ++r) {
        for (std::size_t c = 0; c < h.grid; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", h.values[r * h.grid + c]);
            out << (c ? "," : "") << buf;
        }
        out << "\n";
    }
}

inline Heatmap read_heatmap_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_heatmap_csv: cannot open " + path.string());
    Heatmap h;
    std::string line;
    std::size_t cols = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cellv;
        std::size_t n = 0;
        while (std::getline(ss, cellv, ',')) {
            h.values.push_back(std::stod(cellv));
            ++n;
        }
        if (cols == 0)
            cols = n;
        else if (n != cols)
            throw std::runtime_error("read_heatmap_csv: ragged rows in " + path.string());
        ++h.grid;
    }
    if (h.grid != cols)
        throw std::runtime_error("read_heatmap_csv: expected a square grid in " + path.string());
    return h;
}

}  // namespace xshift::explain
