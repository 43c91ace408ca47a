#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tpt/rng.hpp"
#include "tpt/tensor.hpp"

namespace tpt {

struct AugmentPolicy {
    enum class Kind { rrc, augmix };
    Kind kind = Kind::rrc;
    /// Crop area as a fraction of the image.
    double scale_min = 0.5;
    double scale_max = 1.0;
    double ratio_min = 3.0 / 4.0;
    double ratio_max = 4.0 / 3.0;
    int depth_min = 1;
    int depth_max = 3;
    int width = 3;
    double alpha = 1.0;
    double brightness = 0.3;
    double contrast_min = 0.7;
    double contrast_max = 1.3;
    int max_translate = 4;
    double value_min = 0.0;
    double value_max = 1.0;

    void validate() const;
    static Kind parse_kind(const std::string& name);
    std::string kind_name() const;
};

/// Views of one test image; index 0 is the untouched original.
struct ViewBatch {
    std::vector<Tensor> views;
    std::size_t original_index = 0;
    std::vector<std::uint64_t> seeds;

    std::size_t size() const { return views.size(); }
};

/// Seed of view `index` (>= 1) for an episode seed.
std::uint64_t view_seed(std::uint64_t seed, std::size_t index);

/// View 0 is `image`; view i >= 1 is a draw from `policy` under view_seed(seed, i),
/// so the first n views of a larger batch equal the batch of size n.
ViewBatch generate_views(const Tensor& image, std::size_t n, const AugmentPolicy& policy,
                         std::uint64_t seed);

namespace augment {

/// Nearest-neighbour crop of [top, top+h) x [left, left+w) resized to the full frame.
Tensor crop_resize(const Tensor& image, std::size_t top, std::size_t left, std::size_t h,
                   std::size_t w);
Tensor random_resized_crop(const Tensor& image, const AugmentPolicy& policy, Rng& rng);
Tensor hflip(const Tensor& image);
Tensor brightness(const Tensor& image, double delta, double lo, double hi);
Tensor contrast(const Tensor& image, double factor, double lo, double hi);
/// Shift by (dy, dx) pixels with edge replication.
Tensor translate(const Tensor& image, int dy, int dx);

} // namespace augment

struct AugMixWeights {
    std::vector<double> chain_weights;  // Dirichlet(alpha, ..., alpha)
    double original_weight = 0.0;       // 1 - Beta(alpha, alpha) draw
};

/// The mixing weights augmix_view(image, policy, seed) uses.
AugMixWeights augmix_weights(const AugmentPolicy& policy, std::uint64_t seed);

/// `width` random chains of 1..3 primitives mixed with Dirichlet weights, then
/// blended with the original. `forced_original_weight` overrides the blend.
Tensor augmix_view(const Tensor& image, const AugmentPolicy& policy, std::uint64_t seed,
                   std::optional<double> forced_original_weight = std::nullopt);

} // namespace tpt
