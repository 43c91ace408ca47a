#include "tpt/bongard.hpp"

#include <algorithm>
#include <cmath>

#include "tpt/adamw.hpp"
#include "tpt/data.hpp"
#include "tpt/rng.hpp"
#include "tpt/tpt.hpp"

namespace tpt {

const std::vector<std::string>& bongard_split_names() {
    static const std::vector<std::string> names = {"color", "pattern", "shape", "mixed"};
    return names;
}

namespace {

Tensor render_noisy(const Attributes& a, const ModelConfig& config, double sigma, Rng& rng) {
    Tensor img = render_prototype(a, config);
    if (sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, sigma);
        for (double& v : img.values()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    }
    return img;
}

Attributes random_attributes(Rng& rng, int value_count, int axis, int value) {
    Attributes a{uniform_int(rng, 0, value_count - 1), uniform_int(rng, 0, value_count - 1),
                 uniform_int(rng, 0, value_count - 1)};
    (axis == 0 ? a.color : axis == 1 ? a.pattern : a.shape) = value;
    return a;
}

} // namespace

BongardSample generate_bongard_task(const ModelConfig& config, std::uint64_t seed,
                                    std::size_t index, const BongardGeneratorOptions& options) {
    if (options.per_side < 1) throw ContractError("each support side needs at least one image");
    if (options.value_count < 2) throw ContractError("concepts need two attribute values");
    Rng rng(derive_seed(seed, index));
    BongardSample s;
    s.rule.split = static_cast<int>(index % 4);
    s.rule.axis = s.rule.split < 3 ? s.rule.split : uniform_int(rng, 0, 2);
    s.rule.positive_value = uniform_int(rng, 0, options.value_count - 1);
    do {
        s.rule.negative_value = uniform_int(rng, 0, options.value_count - 1);
    } while (s.rule.negative_value == s.rule.positive_value);

    for (std::size_t i = 0; i < options.per_side; ++i) {
        s.positives.push_back(render_noisy(
            random_attributes(rng, options.value_count, s.rule.axis, s.rule.positive_value),
            config, options.noise_sigma, rng));
        s.negatives.push_back(render_noisy(
            random_attributes(rng, options.value_count, s.rule.axis, s.rule.negative_value),
            config, options.noise_sigma, rng));
    }
    s.query_label = uniform_int(rng, 0, 1);
    const int qv = s.query_label == 1 ? s.rule.positive_value : s.rule.negative_value;
    s.query = render_noisy(random_attributes(rng, options.value_count, s.rule.axis, qv), config,
                           options.noise_sigma, rng);
    return s;
}

BongardResult tpt_reason(const ModelWeights& weights, const ModelConfig& config,
                         const BongardSample& sample, const BongardConfig& options) {
    if (sample.positives.empty() || sample.negatives.empty()) {
        throw ContractError("both support sets need at least one image");
    }
    PromptState state = PromptState::gaussian(options.prompt_length, config.embed_dim,
                                              options.sigma, options.seed, true);
    if (options.swap_label_init) {
        std::swap(state.cls(1).values(), state.cls(2).values());
        state.rebase();
    }

    std::vector<Tensor> support = sample.negatives;
    support.insert(support.end(), sample.positives.begin(), sample.positives.end());
    const std::size_t M = support.size();
    const Tensor support_features = encode_images(weights, config, support);
    Tensor targets({M, 2});
    for (std::size_t i = 0; i < M; ++i) targets.at(i, i < sample.negatives.size() ? 0 : 1) = 1.0;

    auto label_features = [&](ad::Tape& tape) {
        BoundWeights w(tape, weights);
        ad::Var p = tape.leaf(state.prompt());
        const ad::Var seqs[] = {assemble(p, tape.leaf(state.cls(1)), config),
                                assemble(p, tape.leaf(state.cls(2)), config)};
        return encode_text(w, config, ad::concat_rows(seqs), state.length() + 1);
    };
    auto accuracy = [&](const Tensor& probs) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < M; ++i) {
            const std::size_t pred = probs.at(i, 1) > probs.at(i, 0) ? 1 : 0;
            correct += targets.at(i, pred) == 1.0 ? 1 : 0;
        }
        return static_cast<double>(correct) / static_cast<double>(M);
    };

    BongardResult result;
    const AdamWOptions adamw{options.lr, 0.9, 0.999, 1e-8, 0.0};
    const std::vector<Tensor*> params = state.learnable();
    for (std::size_t step = 0; step < options.steps; ++step) {
        ad::Tape tape;
        ad::Var probs = class_probabilities(label_features(tape), tape.constant(support_features),
                                            config.logit_scale);
        ad::Var loss = ad::scale(ad::sum(ad::mul(ad::log(probs), tape.constant(targets))),
                                 -1.0 / static_cast<double>(M));
        result.support_accuracy.push_back(accuracy(probs.value()));
        result.support_loss.push_back(loss.value()[0]);
        state.zero_grad();
        tape.backward(loss);
        adamw_step(params, state.optimizer(), adamw);
    }

    ad::Tape tape;
    ad::Var text = label_features(tape);
    const Tensor final_probs = class_probabilities(text.value(), support_features, config.logit_scale);
    result.support_accuracy.push_back(accuracy(final_probs));
    const Tensor query_feature = encode_image(weights, config, sample.query);
    const Tensor q = class_probabilities(text.value(), query_feature, config.logit_scale);
    result.prediction = q[1] > q[0] ? 1 : 0;
    result.tuned_prompt = state.prompt().detached();
    result.tuned_cls1 = state.cls(1).detached();
    result.tuned_cls2 = state.cls(2).detached();
    state.reset();
    return result;
}

} // namespace tpt
