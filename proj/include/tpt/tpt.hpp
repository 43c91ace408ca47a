#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpt/adamw.hpp"
#include "tpt/augment.hpp"
#include "tpt/model.hpp"
#include "tpt/prompt.hpp"

namespace tpt {

/// Episodic test-time tuning protocol.
struct TPTConfig {
    std::size_t views = 64;
    double rho = 0.1;
    std::size_t steps = 1;
    AdamWOptions adamw{};
    std::uint64_t seed = 0;
    AugmentPolicy policy{};

    void validate() const;
};

/// Self-entropy -sum p ln max(p, 1e-12) of one distribution. Throws
/// ContractError unless entries are >= 0 and sum to 1 within 1e-8.
double entropy(std::span<const double> p);

/// Per-view predictions of one optimization step.
struct PredictionSet {
    ad::Var probs;                 // [N x K], on the tape
    std::vector<double> entropies; // H(p_i) per view
    std::vector<bool> mask;        // selected views
    std::vector<std::size_t> selected;
    ad::Var averaged;              // [1 x K], mean of the selected rows
    double threshold = 0.0;
    std::size_t k = 0;

    std::size_t views() const { return entropies.size(); }
};

struct ConfidenceSelection {
    double threshold = 0.0;
    std::size_t k = 0;
    /// Indices of the k lowest-entropy views, ascending by (entropy, index).
    std::vector<std::size_t> selected;
};

/// k = max(1, floor(rho * N)); the threshold is the k-th smallest entropy and
/// ties at the threshold go to the lower view index.
ConfidenceSelection confidence_threshold(std::span<const double> entropies, double rho);

/// Probabilities of every view against the prompted class features.
PredictionSet predict_views(ad::Var text_features, ad::Var image_features, double logit_scale);

/// Fills mask/selected/threshold/k and averages the selected rows on the tape.
/// The divisor is the number of selected rows.
void select_and_average(PredictionSet& pred, double rho);

/// Entropy of the averaged distribution, differentiable.
ad::Var marginal_entropy_loss(const PredictionSet& pred);

/// Which tensors receive test-time updates.
enum class ParameterGroup { prompt, text_encoder, image_encoder, all };
ParameterGroup parse_parameter_group(const std::string& name);
std::string to_string(ParameterGroup group);

struct StepTrace {
    double loss = 0.0;
    std::size_t k = 0;
    double threshold = 0.0;
    std::vector<std::size_t> selected;
};

struct EpisodeTrace {
    std::size_t sample_id = 0;
    std::vector<StepTrace> steps;
    std::vector<double> pre;       // original view, initial prompt
    std::vector<double> post;      // original view, tuned prompt
    std::vector<double> averaged;  // confidence-averaged views, tuned prompt
};

struct EpisodeResult {
    int prediction = 0;
    EpisodeTrace trace;
    /// Prompt values after the last update, captured before the reset.
    Tensor tuned_prompt;
};

/// Image features of a view batch under frozen weights: [N x proj_dim].
Tensor encode_views(const ModelWeights& weights, const ModelConfig& config, const ViewBatch& views);

/// Runs one episode from `prompt`'s initial state on precomputed view
/// features (row 0 = original image). The prompt is reset afterwards.
EpisodeResult tpt_episode(const ModelWeights& weights, const ModelConfig& config,
                          PromptState& prompt, const ClassSet& classes,
                          const Tensor& view_features, const TPTConfig& tpt);

/// Episode with updates on `group`. Model weights are copied for the
/// episode so the caller's weights are never modified. `views` must hold at
/// least config.views images.
EpisodeResult tpt_episode(const ModelWeights& weights, const ModelConfig& config,
                          PromptState& prompt, const ClassSet& classes, const ViewBatch& views,
                          const TPTConfig& tpt, ParameterGroup group);

/// generate_views + encode + tpt_episode.
EpisodeResult tpt_classify(const ModelWeights& weights, const ModelConfig& config,
                           PromptState& prompt, const ClassSet& classes, const Tensor& image,
                           const TPTConfig& tpt);

/// Argmax with ties going to the lowest index.
std::size_t argmax(std::span<const double> values);

/// One JSON object per episode.
std::string trace_to_json(const EpisodeTrace& trace, int prediction, std::optional<int> label);

} // namespace tpt
