#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tpt/data.hpp"
#include "tpt/gradcheck.hpp"
#include "tpt/model.hpp"
#include "tpt/prompt.hpp"
#include "tpt/run_config.hpp"
#include "tpt/tpt.hpp"

namespace tpt {

/// Worker count: TPT_THREADS when set and positive, else the hardware count.
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() threads. The first
/// exception thrown by any task is rethrown after all workers finish; tasks
/// not yet started by then are skipped.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// With probability `probability` a random resized crop under `policy`,
/// otherwise the image unchanged.
std::function<Tensor(const Tensor&, std::uint64_t)> crop_transform(const AugmentPolicy& policy,
                                                                   double probability);

/// Generates the dataset of `config`, pairs its training split with
/// captions and pretrains fresh weights from config.model_seed.
PretrainResult pretrain_from_config(const RunConfig& config);

struct EvalResult {
    std::size_t correct = 0;
    std::size_t n = 0;
    std::vector<int> predictions;  // in sample order
    std::vector<int> labels;

    double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
};

/// Seed of the view batch for one sample; depends on the sample id only,
/// so evaluation order cannot change it.
std::uint64_t sample_seed(std::uint64_t seed, const Sample& sample);

/// Frozen image features of every sample's view batch: features[i] is
/// [views x proj_dim], row 0 the original image. Smaller N reuse the prefix.
struct ViewCache {
    AugmentPolicy policy{};
    std::uint64_t seed = 0;
    std::size_t views = 0;
    std::vector<Tensor> features;
};

ViewCache build_view_cache(const ModelWeights& weights, const ModelConfig& config,
                           std::span<const Sample* const> samples, const AugmentPolicy& policy,
                           std::size_t views, std::uint64_t seed);

/// Argmax of class_probabilities under the prompt's current values.
EvalResult evaluate_zero_shot(const ModelWeights& weights, const ModelConfig& config,
                              const PromptState& prompt, const ClassSet& classes,
                              std::span<const Sample* const> samples);

struct TPTRunOptions {
    ParameterGroup group = ParameterGroup::prompt;
    /// Precomputed features for group == prompt; must match tpt.seed and policy.
    const ViewCache* cache = nullptr;
    /// Receives one JSON line per sample, in sample order.
    std::vector<std::string>* traces = nullptr;
};

/// Per-sample episodic TPT. View batches use sample_seed(tpt.seed, sample).
EvalResult evaluate_tpt(const ModelWeights& weights, const ModelConfig& config,
                        const PromptState& prompt, const ClassSet& classes,
                        std::span<const Sample* const> samples, const TPTConfig& tpt,
                        const TPTRunOptions& options = {});

/// Class features averaged over templates, then L2-normalized.
EvalResult evaluate_prompt_ensemble(const ModelWeights& weights, const ModelConfig& config,
                                    const std::vector<TokenIds>& templates, const ClassSet& classes,
                                    std::span<const Sample* const> samples);

/// Mean of the per-view probabilities over the first `views` cached views.
EvalResult baseline_averaged_prediction(const ModelWeights& weights, const ModelConfig& config,
                                        const PromptState& prompt, const ClassSet& classes,
                                        std::span<const Sample* const> samples,
                                        const ViewCache& cache, std::size_t views);
/// Most frequent per-view argmax; ties go to the lowest class id.
EvalResult baseline_majority_vote(const ModelWeights& weights, const ModelConfig& config,
                                  const PromptState& prompt, const ClassSet& classes,
                                  std::span<const Sample* const> samples, const ViewCache& cache,
                                  std::size_t views);

struct FewShotOptions {
    std::size_t epochs = 50;
    double lr = 0.005;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
};

/// The first `shots` samples of each class from `pool`.
std::vector<const Sample*> select_shots(std::span<const Sample* const> pool, std::size_t shots,
                                        std::size_t num_classes);

/// Cross-entropy prompt tuning on labeled shots. Returns a copy of `init`
/// whose values and snapshot are the trained prompt.
PromptState fewshot_train_prompt(const ModelWeights& weights, const ModelConfig& config,
                                 const PromptState& init, const ClassSet& classes,
                                 std::span<const Sample* const> shots, const FewShotOptions& options,
                                 std::vector<double>* epoch_losses = nullptr);

/// One line of a results file. accuracy() is correct / n.
struct ResultRow {
    std::string method;
    std::string shift;
    double rho = 0.0;
    std::size_t views = 0;
    std::size_t steps = 0;
    std::string group;
    std::size_t correct = 0;
    std::size_t n = 0;
    std::uint64_t seed = 0;

    double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
};

struct ResultsTable {
    std::vector<ResultRow> rows;

    /// `header` (usually RunConfig::header()) followed by the CSV.
    void write_csv(std::ostream& out, const std::string& header) const;
    std::string to_csv(const std::string& header) const;
};

struct AblationGrid {
    std::vector<double> rhos{0.1};
    std::vector<std::size_t> views{64};
    std::vector<std::size_t> steps{1};
    std::vector<ParameterGroup> groups{ParameterGroup::prompt};
};

/// Evaluates TPT over the cartesian product of the grid. Views and features
/// are shared across grid points.
ResultsTable ablate(const ModelWeights& weights, const ModelConfig& config,
                    const PromptState& prompt, const ClassSet& classes,
                    std::span<const Sample* const> samples, const TPTConfig& base,
                    const AblationGrid& grid, const std::string& shift_name);

/// Per-view class distributions of one sample before and after tuning.
struct DistributionDump {
    Tensor before;  // [N x K], initial prompt
    Tensor after;   // [N x K], tuned prompt
    int prediction = 0;
};

DistributionDump dump_distributions(const ModelWeights& weights, const ModelConfig& config,
                                    const PromptState& prompt, const ClassSet& classes,
                                    const Tensor& image, const TPTConfig& tpt);
void write_distributions_csv(std::ostream& out, const DistributionDump& dump);

/// Mean L1 distance over all pairs of rows.
double mean_pairwise_l1(const Tensor& probs);

struct NamedGradCheck {
    std::string name;
    GradCheckResult result;
};

/// Finite-difference checks of every differentiable op (w.r.t. each input)
/// and of the end-to-end marginal-entropy loss w.r.t. the prompt.
std::vector<NamedGradCheck> gradcheck_suite(std::uint64_t seed);

/// Runs gradcheck_suite. Prints one line per check; returns the number above `tolerance`.
std::size_t gradcheck_report(std::uint64_t seed, std::ostream& out, double tolerance = 1e-4);

} // namespace tpt
