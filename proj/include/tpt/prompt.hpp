#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "tpt/adamw.hpp"
#include "tpt/model.hpp"

namespace tpt {

/// Learnable prompt tokens in text-embedding space, optionally with the two
/// binary label tokens used for support-set reasoning. Holds a snapshot of
/// its initial values and the optimizer moments so one test sample can
/// never leak into the next.
class PromptState {
public:
    /// Prompt rows copied from the embedding table rows of `template_tokens`.
    static PromptState from_template(const ModelWeights& weights, const ModelConfig& config,
                                     const TokenIds& template_tokens,
                                     std::size_t max_class_tokens = 0);
    /// All learnable tokens drawn i.i.d. from N(0, sigma^2).
    static PromptState gaussian(std::size_t length, std::size_t dim, double sigma,
                                std::uint64_t seed, bool with_cls);

    std::size_t length() const { return prompt_.rows(); }
    std::size_t dim() const { return prompt_.cols(); }
    bool has_cls() const { return cls_.has_value(); }

    Tensor& prompt() { return prompt_; }
    const Tensor& prompt() const { return prompt_; }
    /// Label token 1 or 2.
    Tensor& cls(int index);
    const Tensor& cls(int index) const;

    std::vector<Tensor*> learnable();
    void zero_grad();
    AdamWState& optimizer() { return optimizer_; }

    /// Restores every learnable tensor to its initial bits and clears the
    /// optimizer state.
    void reset();
    /// Replaces the snapshot with the current values (used after few-shot
    /// training to make a tuned prompt the new episode start).
    void rebase();

    bool same_values(const PromptState& other) const;

private:
    PromptState() = default;
    void snapshot();

    Tensor prompt_;
    std::optional<std::array<Tensor, 2>> cls_;
    Tensor prompt_init_;
    std::optional<std::array<Tensor, 2>> cls_init_;
    AdamWState optimizer_;
};

/// Text sequence [prompt ; embed(class_tokens)] on the tape.
ad::Var assemble(ad::Var prompt, const TokenIds& class_tokens, const ModelWeights& weights,
                 const ModelConfig& config);
/// Text sequence [prompt ; cls] on the tape.
ad::Var assemble(ad::Var prompt, ad::Var cls, const ModelConfig& config);

/// Features [K x proj_dim] of every class prompted by `prompt`, with classes of
/// equal token length encoded together.
ad::Var prompted_class_features(const BoundWeights& w, const ModelConfig& config,
                                ad::Var prompt, const ClassSet& classes);

} // namespace tpt
