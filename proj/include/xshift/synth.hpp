#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "xshift/autodiff.hpp"
#include "xshift/image_io.hpp"
#include "xshift/rng.hpp"

// Deterministic synthetic corpus: one colored shape per image on a lightly
// tinted noise background. The background tint is keyed to a distractor
// concept from the same vocabulary, which gives attack targets a real region
// to drift toward. Stored as PPM/PGM plus a JSON manifest.

namespace xshift::synth {

struct LabeledImage {
    std::string id;
    Tensor image;                          // {3, H, W}, values in [0,1]
    std::vector<std::uint8_t> object_mask;  // H*W, 1 = object pixel
    std::string concept_name;
    std::string background_concept;
    bool held_out = false;
};

struct CorpusConfig {
    std::size_t image_size = 32;
    double noise_amplitude = 0.04;
    double background_tint = 0.08;
    // Object colors are blended toward the background base; low contrast makes
    // the encoder amplify small pixel differences, which is what gives the
    // perturbation budget real leverage on the learned representations.
    double object_contrast = 0.40;
};

inline const std::vector<std::string>& default_vocab() {
    static const std::vector<std::string> vocab = {
        "red_circle",   "green_circle",   "blue_circle",   "yellow_circle",
        "red_triangle", "green_triangle", "blue_triangle", "yellow_triangle",
        "red_square",   "green_square",   "blue_square",   "yellow_square",
    };
    return vocab;
}

namespace detail {

struct Rgb {
    double r, g, b;
};

inline Rgb concept_color(const std::string& name) {
    if (name.rfind("red_", 0) == 0) return {0.85, 0.10, 0.10};
    if (name.rfind("green_", 0) == 0) return {0.10, 0.75, 0.15};
    if (name.rfind("blue_", 0) == 0) return {0.15, 0.20, 0.85};
    return {0.90, 0.80, 0.10};  // yellow_*
}

enum class ShapeKind { circle, triangle, square };

inline ShapeKind concept_shape(const std::string& name) {
    if (name.find("circle") != std::string::npos) return ShapeKind::circle;
    if (name.find("triangle") != std::string::npos) return ShapeKind::triangle;
    return ShapeKind::square;
}

}  // namespace detail

// Deterministic 80/20 split keyed on the image id.
inline bool id_is_held_out(const std::string& id) { return fnv1a64(id) % 5 == 4; }

inline std::string image_id(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06zu", index);
    return buf;
}

inline LabeledImage generate_image(std::uint64_t corpus_seed, std::size_t index,
                                   const std::vector<std::string>& vocab, const CorpusConfig& cfg) {
    using detail::ShapeKind;
    Rng rng(derive_seed(corpus_seed, index));
    const std::size_t S = cfg.image_size;

    LabeledImage out;
    out.id = image_id(index);
    out.concept_name = vocab[index % vocab.size()];
    std::size_t bg_pick = rng.uniform_index(vocab.size() - 1);
    const std::size_t self = index % vocab.size();
    out.background_concept = vocab[bg_pick >= self ? bg_pick + 1 : bg_pick];
    out.held_out = id_is_held_out(out.id);

    std::vector<double> px(3 * S * S);
    const detail::Rgb tint = detail::concept_color(out.background_concept);
    const double base = 0.55;
    for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
            const double noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude);
            const std::array<double, 3> tinted = {base + cfg.background_tint * (tint.r - 0.5) + noise,
                                                  base + cfg.background_tint * (tint.g - 0.5) + noise,
                                                  base + cfg.background_tint * (tint.b - 0.5) + noise};
            for (std::size_t c = 0; c < 3; ++c)
                px[c * S * S + y * S + x] = std::clamp(tinted[c], 0.0, 1.0);
        }
    }

    const ShapeKind kind = detail::concept_shape(out.concept_name);
    // Extent ranges are disjoint across shape families so silhouettes stay
    // separable at patch granularity; all stay inside the 5-50% mask band.
    const double smin = static_cast<double>(S) / 32.0;  // tuned for 32px, scales with size
    double radius = rng.uniform(4.2, 5.5) * smin;
    double half_side = rng.uniform(8.5, 11.0) * smin;
    double tri_r = rng.uniform(9.0, 10.5) * smin;
    double extent = kind == ShapeKind::circle ? radius : (kind == ShapeKind::square ? half_side : tri_r);
    const double margin = extent + 1.0;
    const double cx = rng.uniform(margin, static_cast<double>(S) - margin);
    const double cy = rng.uniform(margin, static_cast<double>(S) - margin);

    detail::Rgb color = detail::concept_color(out.concept_name);
    const double jig = rng.uniform(-0.05, 0.05);
    color.r = std::clamp(base + cfg.object_contrast * (color.r - base) + jig, 0.0, 1.0);
    color.g = std::clamp(base + cfg.object_contrast * (color.g - base) + jig, 0.0, 1.0);
    color.b = std::clamp(base + cfg.object_contrast * (color.b - base) + jig, 0.0, 1.0);

    out.object_mask.assign(S * S, 0);
    for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            bool inside = false;
            switch (kind) {
                case ShapeKind::circle:
                    inside = dx * dx + dy * dy <= radius * radius;
                    break;
                case ShapeKind::square:
                    inside = std::fabs(dx) <= half_side && std::fabs(dy) <= half_side;
                    break;
                case ShapeKind::triangle: {
                    // upward triangle inscribed in a circle of radius tri_r
                    const double x0 = 0.0, y0 = -tri_r;
                    const double x1 = -tri_r * 0.8660254037844386, y1 = tri_r * 0.5;
                    const double x2 = tri_r * 0.8660254037844386, y2 = tri_r * 0.5;
                    auto edge = [&](double ax, double ay, double bx, double by) {
                        return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                    };
                    const double e0 = edge(x0, y0, x1, y1), e1 = edge(x1, y1, x2, y2), e2 = edge(x2, y2, x0, y0);
                    inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
                    break;
                }
            }
            if (inside) {
                out.object_mask[y * S + x] = 1;
                px[0 * S * S + y * S + x] = color.r;
                px[1 * S * S + y * S + x] = color.g;
                px[2 * S * S + y * S + x] = color.b;
            }
        }
    }
    out.image = Tensor::from({3, S, S}, std::move(px));
    return out;
}

struct Manifest {
    std::uint64_t seed = 0;
    std::size_t count = 0;
    std::size_t image_size = 32;
    std::vector<std::string> vocab;

    nlohmann::json to_json(const std::vector<LabeledImage>& images) const {
        nlohmann::json j;
        j["schema"] = "xshift-corpus-v1";
        j["seed"] = seed;
        j["count"] = count;
        j["image_size"] = image_size;
        j["vocab"] = vocab;
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& im : images) {
            arr.push_back({{"id", im.id},
                           {"concept", im.concept_name},
                           {"background_concept", im.background_concept},
                           {"image", "img_" + im.id + ".ppm"},
                           {"mask", "mask_" + im.id + ".pgm"},
                           {"split", im.held_out ? "held_out" : "train"}});
        }
        j["images"] = arr;
        return j;
    }
};

struct Corpus {
    Manifest manifest;
    std::vector<LabeledImage> images;

    std::vector<const LabeledImage*> split(bool held_out) const {
        std::vector<const LabeledImage*> out;
        for (const auto& im : images)
            if (im.held_out == held_out) out.push_back(&im);
        return out;
    }
};

inline Corpus generate_corpus(std::uint64_t seed, std::size_t count, const CorpusConfig& cfg = {},
                              const std::vector<std::string>& vocab = default_vocab()) {
    if (count < 1) throw std::invalid_argument("generate_corpus: count must be >= 1");
    if (count < vocab.size())
        throw std::invalid_argument("generate_corpus: count " + std::to_string(count) +
                                    " cannot cover the vocabulary of " + std::to_string(vocab.size()));
    Corpus corpus;
    corpus.manifest.seed = seed;
    corpus.manifest.count = count;
    corpus.manifest.image_size = cfg.image_size;
    corpus.manifest.vocab = vocab;
    corpus.images.reserve(count);
    for (std::size_t i = 0; i < count; ++i) corpus.images.push_back(generate_image(seed, i, vocab, cfg));
    return corpus;
}

inline PixelBuffer to_ppm_buffer(const Tensor& image) {
    PixelBuffer buf;
    buf.height = image.shape()[1];
    buf.width = image.shape()[2];
    buf.channels = 3;
    buf.bytes.resize(3 * buf.width * buf.height);
    const auto& px = image.data();
    const std::size_t plane = buf.width * buf.height;
    for (std::size_t i = 0; i < plane; ++i) {
        buf.bytes[i * 3 + 0] = quantize_unit(px[0 * plane + i]);
        buf.bytes[i * 3 + 1] = quantize_unit(px[1 * plane + i]);
        buf.bytes[i * 3 + 2] = quantize_unit(px[2 * plane + i]);
    }
    return buf;
}

inline Tensor from_ppm_buffer(const PixelBuffer& buf) {
    const std::size_t plane = buf.width * buf.height;
    std::vector<double> px(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        px[0 * plane + i] = static_cast<double>(buf.bytes[i * 3 + 0]) / 255.0;
        px[1 * plane + i] = static_cast<double>(buf.bytes[i * 3 + 1]) / 255.0;
        px[2 * plane + i] = static_cast<double>(buf.bytes[i * 3 + 2]) / 255.0;
    }
    return Tensor::from({3, buf.height, buf.width}, std::move(px));
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& im : corpus.images) {
        write_ppm(dir / ("img_" + im.id + ".ppm"), to_ppm_buffer(im.image));
        PixelBuffer mask;
        mask.width = im.image.shape()[2];
        mask.height = im.image.shape()[1];
        mask.channels = 1;
        mask.bytes.resize(mask.width * mask.height);
        for (std::size_t i = 0; i < mask.bytes.size(); ++i) mask.bytes[i] = im.object_mask[i] ? 255 : 0;
        write_pgm(dir / ("mask_" + im.id + ".pgm"), mask);
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest to " + dir.string());
    out << corpus.manifest.to_json(corpus.images).dump(2) << "\n";
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("cannot open manifest at " + (dir / "manifest.json").string());
    nlohmann::json j = nlohmann::json::parse(in);
    Corpus corpus;
    corpus.manifest.seed = j.at("seed").get<std::uint64_t>();
    corpus.manifest.count = j.at("count").get<std::size_t>();
    corpus.manifest.image_size = j.at("image_size").get<std::size_t>();
    corpus.manifest.vocab = j.at("vocab").get<std::vector<std::string>>();
    for (const auto& entry : j.at("images")) {
        LabeledImage im;
        im.id = entry.at("id").get<std::string>();
        im.concept_name = entry.at("concept").get<std::string>();
        im.background_concept = entry.at("background_concept").get<std::string>();
        im.held_out = entry.at("split").get<std::string>() == "held_out";
        const auto img_path = dir / entry.at("image").get<std::string>();
        const auto mask_path = dir / entry.at("mask").get<std::string>();
        if (!std::filesystem::exists(img_path) || !std::filesystem::exists(mask_path))
            throw std::runtime_error("load_corpus: manifest references missing files for id " + im.id);
        im.image = from_ppm_buffer(read_ppm(img_path));
        PixelBuffer mask = read_pgm(mask_path);
        im.object_mask.resize(mask.bytes.size());
        for (std::size_t i = 0; i < mask.bytes.size(); ++i) im.object_mask[i] = mask.bytes[i] >= 128 ? 1 : 0;
        corpus.images.push_back(std::move(im));
    }
    return corpus;
}

}  // namespace xshift::synth
