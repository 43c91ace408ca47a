#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpt/model.hpp"
#include "tpt/prompt.hpp"

namespace tpt {

/// Hidden concept of a synthetic task: positives carry `positive_value` on
/// attribute `axis` (0 color, 1 pattern, 2 shape), negatives `negative_value`.
struct Concept {
    int axis = 0;
    int positive_value = 0;
    int negative_value = 1;
    int split = 0;
};

struct BongardSample {
    std::vector<Tensor> positives;
    std::vector<Tensor> negatives;
    Tensor query;
    int query_label = 0;  // evaluation only
    Concept rule;

    std::size_t support_size() const { return positives.size() + negatives.size(); }
};

/// Names of the four generator splits, in CSV column order.
const std::vector<std::string>& bongard_split_names();

struct BongardGeneratorOptions {
    std::size_t per_side = 6;
    /// Attribute values are drawn from [0, value_count).
    int value_count = 2;
    double noise_sigma = 0.08;
};

/// Task `index` of the stream seeded by `seed`; its split is index mod 4.
BongardSample generate_bongard_task(const ModelConfig& config, std::uint64_t seed,
                                    std::size_t index, const BongardGeneratorOptions& options = {});

struct BongardConfig {
    std::size_t prompt_length = 4;
    double sigma = 0.02;
    std::size_t steps = 64;
    double lr = 0.005;
    std::uint64_t seed = 0;
    /// Exchanges the initial label tokens (used to check relabeling symmetry).
    bool swap_label_init = false;
};

struct BongardResult {
    int prediction = 0;
    /// Support accuracy before each update, then once more after the last.
    std::vector<double> support_accuracy;
    std::vector<double> support_loss;
    Tensor tuned_prompt;
    Tensor tuned_cls1;
    Tensor tuned_cls2;

    double final_support_accuracy() const {
        return support_accuracy.empty() ? 0.0 : support_accuracy.back();
    }
};

/// Tunes prompt and both label tokens on the support images with the binary
/// cross-entropy objective (negatives -> label token 1, positives -> label
/// token 2), then labels the query. The query is encoded only after tuning.
BongardResult tpt_reason(const ModelWeights& weights, const ModelConfig& config,
                         const BongardSample& sample, const BongardConfig& options);

} // namespace tpt
