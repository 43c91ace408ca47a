#include "tpt/augment.hpp"

#include <algorithm>
#include <cmath>

namespace tpt {

void AugmentPolicy::validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
        throw ContractError("crop scale range must lie within (0, 1]");
    }
    if (!(ratio_min > 0.0 && ratio_min <= ratio_max)) throw ContractError("bad aspect ratio range");
    if (width < 1) throw ContractError("augmix width must be >= 1");
    if (depth_min < 1 || depth_max < depth_min) throw ContractError("bad augmix depth range");
    if (!(alpha > 0.0)) throw ContractError("augmix alpha must be positive");
}

AugmentPolicy::Kind AugmentPolicy::parse_kind(const std::string& name) {
    if (name == "rrc") return Kind::rrc;
    if (name == "augmix") return Kind::augmix;
    throw ContractError("unknown augmentation '" + name + "' (expected rrc or augmix)");
}

std::string AugmentPolicy::kind_name() const { return kind == Kind::rrc ? "rrc" : "augmix"; }

std::uint64_t view_seed(std::uint64_t seed, std::size_t index) {
    return derive_seed(seed ^ 0x5157a11ce0ffULL, index);
}

namespace augment {

Tensor crop_resize(const Tensor& image, std::size_t top, std::size_t left, std::size_t h,
                   std::size_t w) {
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (h == 0 || w == 0 || top + h > H || left + w > W) {
        throw ShapeError("crop window outside image");
    }
    Tensor out(image.shape());
    for (std::size_t y = 0; y < H; ++y) {
        const std::size_t sy = top + std::min(h - 1, (2 * y + 1) * h / (2 * H));
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t sx = left + std::min(w - 1, (2 * x + 1) * w / (2 * W));
            for (std::size_t c = 0; c < C; ++c) out[(c * H + y) * W + x] = image[(c * H + sy) * W + sx];
        }
    }
    return out;
}

Tensor random_resized_crop(const Tensor& image, const AugmentPolicy& policy, Rng& rng) {
    const std::size_t H = image.dim(1), W = image.dim(2);
    const double area = static_cast<double>(H * W);
    const double log_lo = std::log(policy.ratio_min), log_hi = std::log(policy.ratio_max);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * uniform(rng, policy.scale_min, policy.scale_max);
        const double ratio = std::exp(uniform(rng, log_lo, log_hi));
        const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
        const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
        if (w == 0 || h == 0 || w > W || h > H) continue;
        const auto top = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(H - h)));
        const auto left = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(W - w)));
        return crop_resize(image, top, left, h, w);
    }
    return image.detached();
}

Tensor hflip(const Tensor& image) {
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor out(image.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                out[(c * H + y) * W + x] = image[(c * H + y) * W + (W - 1 - x)];
    return out;
}

Tensor brightness(const Tensor& image, double delta, double lo, double hi) {
    Tensor out = image.detached();
    for (double& v : out.values()) v = std::clamp(v + delta, lo, hi);
    return out;
}

Tensor contrast(const Tensor& image, double factor, double lo, double hi) {
    Tensor out = image.detached();
    double mean = 0.0;
    for (double v : out.data()) mean += v;
    mean /= static_cast<double>(out.size());
    for (double& v : out.values()) v = std::clamp((v - mean) * factor + mean, lo, hi);
    return out;
}

Tensor translate(const Tensor& image, int dy, int dx) {
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor out(image.shape());
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            const long sy = std::clamp(static_cast<long>(y) - dy, 0L, static_cast<long>(H) - 1);
            for (std::size_t x = 0; x < W; ++x) {
                const long sx = std::clamp(static_cast<long>(x) - dx, 0L, static_cast<long>(W) - 1);
                out[(c * H + y) * W + x] = image[(c * H + static_cast<std::size_t>(sy)) * W +
                                                 static_cast<std::size_t>(sx)];
            }
        }
    }
    return out;
}

} // namespace augment

namespace {

AugMixWeights draw_weights(const AugmentPolicy& policy, Rng& rng) {
    AugMixWeights w;
    std::gamma_distribution<double> gamma(policy.alpha, 1.0);
    double total = 0.0;
    for (int i = 0; i < policy.width; ++i) {
        w.chain_weights.push_back(gamma(rng));
        total += w.chain_weights.back();
    }
    for (double& v : w.chain_weights) v /= total;
    const double ga = gamma(rng), gb = gamma(rng);
    const double mix = ga / (ga + gb);  // Beta(alpha, alpha)
    w.original_weight = 1.0 - mix;
    return w;
}

Tensor random_primitive(const Tensor& image, const AugmentPolicy& p, Rng& rng) {
    switch (uniform_int(rng, 0, 4)) {
    case 0: return augment::random_resized_crop(image, p, rng);
    case 1: return augment::hflip(image);
    case 2: return augment::brightness(image, uniform(rng, -p.brightness, p.brightness), p.value_min, p.value_max);
    case 3: return augment::contrast(image, uniform(rng, p.contrast_min, p.contrast_max), p.value_min, p.value_max);
    default:
        return augment::translate(image, uniform_int(rng, -p.max_translate, p.max_translate),
                                  uniform_int(rng, -p.max_translate, p.max_translate));
    }
}

} // namespace

AugMixWeights augmix_weights(const AugmentPolicy& policy, std::uint64_t seed) {
    Rng rng(seed);
    return draw_weights(policy, rng);
}

Tensor augmix_view(const Tensor& image, const AugmentPolicy& policy, std::uint64_t seed,
                   std::optional<double> forced_original_weight) {
    policy.validate();
    Rng rng(seed);
    const AugMixWeights w = draw_weights(policy, rng);
    Tensor mix(image.shape());
    for (int chain = 0; chain < policy.width; ++chain) {
        Tensor img = image.detached();
        const int depth = uniform_int(rng, policy.depth_min, policy.depth_max);
        for (int d = 0; d < depth; ++d) img = random_primitive(img, policy, rng);
        const double cw = w.chain_weights[static_cast<std::size_t>(chain)];
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += cw * img[i];
    }
    const double keep = forced_original_weight.value_or(w.original_weight);
    Tensor out(image.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(keep * image[i] + (1.0 - keep) * mix[i], policy.value_min, policy.value_max);
    }
    return out;
}

ViewBatch generate_views(const Tensor& image, std::size_t n, const AugmentPolicy& policy,
                         std::uint64_t seed) {
    if (n == 0) throw ContractError("generate_views needs N >= 1");
    if (image.rank() != 3) throw ShapeError("image must be C x H x W");
    policy.validate();
    ViewBatch batch;
    batch.views.reserve(n);
    batch.views.push_back(image.detached());
    batch.seeds.push_back(seed);
    for (std::size_t i = 1; i < n; ++i) {
        const std::uint64_t s = view_seed(seed, i);
        batch.seeds.push_back(s);
        if (policy.kind == AugmentPolicy::Kind::augmix) {
            batch.views.push_back(augmix_view(image, policy, s));
        } else {
            Rng rng(s);
            Tensor v = augment::random_resized_crop(image, policy, rng);
            for (double& x : v.values()) x = std::clamp(x, policy.value_min, policy.value_max);
            batch.views.push_back(std::move(v));
        }
    }
    return batch;
}

} // namespace tpt
