#include "tpt/tpt.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include <json.hpp>

namespace tpt {

void TPTConfig::validate() const {
    if (views < 1) throw ContractError("TPT needs at least one view");
    if (steps < 1) throw ContractError("TPT needs at least one optimization step");
    if (!(rho > 0.0 && rho <= 1.0)) throw ContractError("rho must lie in (0, 1]");
    policy.validate();
}

double entropy(std::span<const double> p) {
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw ContractError("entropy: negative or NaN probability");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-8) {
        throw ContractError("entropy: probabilities sum to " + std::to_string(total));
    }
    double h = 0.0;
    for (double v : p) h -= v * std::log(std::max(v, 1e-12));
    return h;
}

ConfidenceSelection confidence_threshold(std::span<const double> entropies, double rho) {
    const std::size_t n = entropies.size();
    if (n == 0) throw ContractError("confidence selection needs at least one view");
    if (!(rho > 0.0 && rho <= 1.0)) throw ContractError("rho must lie in (0, 1]");
    ConfidenceSelection sel;
    sel.k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rho * static_cast<double>(n))));
    sel.k = std::min(sel.k, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return entropies[a] < entropies[b]; });
    sel.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sel.k));
    sel.threshold = entropies[sel.selected.back()];
    return sel;
}

PredictionSet predict_views(ad::Var text_features, ad::Var image_features, double logit_scale) {
    PredictionSet pred;
    pred.probs = class_probabilities(text_features, image_features, logit_scale);
    const Tensor& probs = pred.probs.value();
    const std::size_t n = probs.rows(), k = probs.cols();
    pred.entropies.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        pred.entropies[i] = entropy(std::span(probs.data().data() + i * k, k));
    }
    return pred;
}

void select_and_average(PredictionSet& pred, double rho) {
    const ConfidenceSelection sel = confidence_threshold(pred.entropies, rho);
    pred.threshold = sel.threshold;
    pred.k = sel.k;
    pred.selected = sel.selected;
    pred.mask.assign(pred.views(), false);
    for (std::size_t i : sel.selected) pred.mask[i] = true;
    // Keep the selected rows in view order so the average does not depend on ranking.
    std::vector<std::size_t> rows = sel.selected;
    std::sort(rows.begin(), rows.end());
    pred.averaged = ad::mean_rows(ad::select_rows(pred.probs, rows));
}

ad::Var marginal_entropy_loss(const PredictionSet& pred) {
    const ad::Var p = pred.averaged;
    return ad::scale(ad::sum(ad::mul(p, ad::log(p))), -1.0);
}

ParameterGroup parse_parameter_group(const std::string& name) {
    if (name == "prompt") return ParameterGroup::prompt;
    if (name == "text_encoder") return ParameterGroup::text_encoder;
    if (name == "image_encoder") return ParameterGroup::image_encoder;
    if (name == "all") return ParameterGroup::all;
    throw ContractError("unknown parameter group '" + name + "'");
}

std::string to_string(ParameterGroup group) {
    switch (group) {
    case ParameterGroup::prompt: return "prompt";
    case ParameterGroup::text_encoder: return "text_encoder";
    case ParameterGroup::image_encoder: return "image_encoder";
    case ParameterGroup::all: return "all";
    }
    return "?";
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

Tensor encode_views(const ModelWeights& weights, const ModelConfig& config, const ViewBatch& views) {
    return encode_images(weights, config, views.views);
}

namespace {

std::vector<double> row_of(const Tensor& t, std::size_t r) {
    return std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(r * t.cols()),
                               t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols()));
}

Tensor first_rows(const Tensor& t, std::size_t n) {
    if (t.rows() < n) {
        throw ShapeError("need " + std::to_string(n) + " view features, got " +
                         std::to_string(t.rows()));
    }
    if (t.rows() == n) return t.detached();
    return Tensor({n, t.cols()}, std::vector<double>(t.data().begin(),
                                                     t.data().begin() + static_cast<std::ptrdiff_t>(n * t.cols())));
}

// Image features for one tape: either frozen constants or a differentiable
// pass through the (trainable) image tower.
using ImageFeatureFn = std::function<ad::Var(const BoundWeights&)>;

// `tuned` is the episode-local weight copy when a model parameter group is
// trained, otherwise null and `weights` stay constants on every tape.
EpisodeResult run_episode(const ModelWeights& weights, ModelWeights* tuned,
                          const ModelConfig& config, PromptState& prompt, const ClassSet& classes,
                          const ImageFeatureFn& image_features, const TPTConfig& tpt,
                          bool tune_prompt) {
    EpisodeResult result;
    std::vector<Tensor*> params;
    if (tuned) params = tuned->trainable();
    if (tune_prompt) {
        const auto p = prompt.learnable();
        params.insert(params.begin(), p.begin(), p.end());
    }
    AdamWState& state = prompt.optimizer();
    state.reset();

    auto forward = [&](ad::Tape& tape) {
        BoundWeights w = tuned ? BoundWeights(tape, *tuned) : BoundWeights(tape, weights);
        ad::Var p = tune_prompt ? tape.leaf(prompt.prompt()) : tape.constant(prompt.prompt());
        ad::Var text = prompted_class_features(w, config, p, classes);
        return predict_views(text, image_features(w), config.logit_scale);
    };

    for (std::size_t step = 0; step < tpt.steps; ++step) {
        ad::Tape tape;
        PredictionSet pred = forward(tape);
        if (step == 0) result.trace.pre = row_of(pred.probs.value(), 0);
        select_and_average(pred, tpt.rho);
        const ad::Var loss = marginal_entropy_loss(pred);
        for (Tensor* t : params) t->zero_grad();
        tape.backward(loss);
        if (!params.empty()) adamw_step(params, state, tpt.adamw);
        result.trace.steps.push_back({loss.value()[0], pred.k, pred.threshold, pred.selected});
    }

    ad::Tape tape;
    PredictionSet pred = forward(tape);
    if (tpt.steps == 0) result.trace.pre = row_of(pred.probs.value(), 0);
    result.trace.post = row_of(pred.probs.value(), 0);
    select_and_average(pred, tpt.rho);
    result.trace.averaged = row_of(pred.averaged.value(), 0);
    result.prediction = static_cast<int>(argmax(result.trace.post));
    result.tuned_prompt = prompt.prompt().detached();
    prompt.reset();
    return result;
}

} // namespace

EpisodeResult tpt_episode(const ModelWeights& weights, const ModelConfig& config,
                          PromptState& prompt, const ClassSet& classes,
                          const Tensor& view_features, const TPTConfig& tpt) {
    tpt.validate();
    prompt.reset();
    const Tensor feats = first_rows(view_features, tpt.views);
    return run_episode(
        weights, nullptr, config, prompt, classes,
        [&](const BoundWeights& w) { return w.tape().constant(feats); }, tpt, true);
}

EpisodeResult tpt_episode(const ModelWeights& weights, const ModelConfig& config,
                          PromptState& prompt, const ClassSet& classes, const ViewBatch& views,
                          const TPTConfig& tpt, ParameterGroup group) {
    tpt.validate();
    if (views.size() < tpt.views) throw ContractError("view batch smaller than configured N");
    std::vector<Tensor> used(views.views.begin(),
                             views.views.begin() + static_cast<std::ptrdiff_t>(tpt.views));
    if (group == ParameterGroup::prompt) {
        return tpt_episode(weights, config, prompt, classes, encode_images(weights, config, used), tpt);
    }
    prompt.reset();
    ModelWeights local = weights;
    const bool tune_text = group == ParameterGroup::text_encoder || group == ParameterGroup::all;
    const bool tune_image = group == ParameterGroup::image_encoder || group == ParameterGroup::all;
    if (tune_text) {
        local.set_trainable("text.", true);
        local.set_trainable("text.token_embedding", false);
    }
    if (tune_image) local.set_trainable("image.", true);

    const Tensor patches = patchify(config, used);
    const Tensor frozen = tune_image ? Tensor() : encode_images(weights, config, used);
    ImageFeatureFn image_features = [&](const BoundWeights& w) {
        if (tune_image) return encode_images(w, config, w.tape().constant(patches));
        return w.tape().constant(frozen);
    };
    return run_episode(local, &local, config, prompt, classes, image_features, tpt,
                       group == ParameterGroup::all);
}

EpisodeResult tpt_classify(const ModelWeights& weights, const ModelConfig& config,
                           PromptState& prompt, const ClassSet& classes, const Tensor& image,
                           const TPTConfig& tpt) {
    tpt.validate();
    const ViewBatch views = generate_views(image, tpt.views, tpt.policy, tpt.seed);
    return tpt_episode(weights, config, prompt, classes, encode_views(weights, config, views), tpt);
}

std::string trace_to_json(const EpisodeTrace& trace, int prediction, std::optional<int> label) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : trace.steps) {
        steps.push_back({{"loss", s.loss}, {"k", s.k}, {"threshold", s.threshold},
                         {"mask", s.selected}});
    }
    nlohmann::json j = {{"sample_id", trace.sample_id},
                        {"steps", steps},
                        {"pre", trace.pre},
                        {"post", trace.post},
                        {"averaged", trace.averaged},
                        {"prediction", prediction}};
    if (label) j["label"] = *label;
    return j.dump();
}

} // namespace tpt
