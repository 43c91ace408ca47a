#include "tpt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "tpt/adamw.hpp"
#include "tpt/gradcheck.hpp"
#include "tpt/rng.hpp"

namespace tpt {

std::size_t thread_count() {
    if (const char* env = std::getenv("TPT_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next = n;
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t + 1 < workers; ++t) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

std::function<Tensor(const Tensor&, std::uint64_t)> crop_transform(const AugmentPolicy& policy,
                                                                   double probability) {
    policy.validate();
    return [policy, probability](const Tensor& image, std::uint64_t seed) {
        Rng rng(seed);
        if (uniform(rng, 0.0, 1.0) >= probability) return image.detached();
        return augment::random_resized_crop(image, policy, rng);
    };
}

PretrainResult pretrain_from_config(const RunConfig& config) {
    const Dataset data = generate(config.dataset, config.model, config.data_seed);
    const std::vector<CaptionPair> pairs = caption_pairs(data.subset("train"));
    PretrainOptions options = config.pretrain;
    options.seed = config.model_seed;
    if (config.pretrain_crop_probability > 0.0) {
        AugmentPolicy crops;
        crops.scale_min = config.pretrain_crop_scale_min;
        options.image_transform = crop_transform(crops, config.pretrain_crop_probability);
    }
    return pretrain_contrastive(init_weights(config.model, config.model_seed), config.model, pairs, options);
}

std::uint64_t sample_seed(std::uint64_t seed, const Sample& sample) {
    return derive_seed(seed ^ 0x7e57b47c4ULL, sample.id);
}

namespace {

constexpr std::size_t kEncodeChunk = 64;

Tensor text_features_for(const ModelWeights& weights, const ModelConfig& config,
                         const Tensor& prompt, const ClassSet& classes) {
    ad::Tape tape;
    BoundWeights w(tape, weights);
    return prompted_class_features(w, config, tape.constant(prompt), classes).value().detached();
}

/// Image features of every sample, encoded in fixed chunks.
Tensor sample_features(const ModelWeights& weights, const ModelConfig& config,
                       std::span<const Sample* const> samples) {
    const std::size_t n = samples.size();
    Tensor out({n, config.proj_dim});
    const std::size_t chunks = (n + kEncodeChunk - 1) / kEncodeChunk;
    parallel_for(chunks, [&](std::size_t c) {
        const std::size_t begin = c * kEncodeChunk, end = std::min(n, begin + kEncodeChunk);
        std::vector<Tensor> images;
        for (std::size_t i = begin; i < end; ++i) images.push_back(samples[i]->image);
        const Tensor f = encode_images(weights, config, images);
        std::copy(f.data().begin(), f.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * config.proj_dim));
    });
    return out;
}

EvalResult classify(const ModelWeights& weights, const ModelConfig& config, const Tensor& text,
                    std::span<const Sample* const> samples) {
    EvalResult r;
    r.n = samples.size();
    if (r.n == 0) return r;
    const Tensor probs = class_probabilities(text, sample_features(weights, config, samples),
                                             config.logit_scale);
    const std::size_t K = probs.cols();
    for (std::size_t i = 0; i < r.n; ++i) {
        const int pred = static_cast<int>(argmax(probs.data().subspan(i * K, K)));
        r.predictions.push_back(pred);
        r.labels.push_back(samples[i]->class_id);
        r.correct += pred == samples[i]->class_id ? 1 : 0;
    }
    return r;
}

EvalResult collect(std::span<const Sample* const> samples, std::vector<int> predictions) {
    EvalResult r;
    r.n = samples.size();
    r.predictions = std::move(predictions);
    for (std::size_t i = 0; i < r.n; ++i) {
        r.labels.push_back(samples[i]->class_id);
        r.correct += r.predictions[i] == samples[i]->class_id ? 1 : 0;
    }
    return r;
}

Tensor prefix_rows(const Tensor& t, std::size_t n) {
    if (t.rows() < n) throw ContractError("view cache holds fewer views than requested");
    return Tensor({n, t.cols()}, std::vector<double>(t.data().begin(),
                                                     t.data().begin() + static_cast<std::ptrdiff_t>(n * t.cols())));
}

void check_cache(const ViewCache& cache, std::size_t samples, std::size_t views) {
    if (cache.features.size() != samples) throw ContractError("view cache does not match the sample list");
    if (cache.views < views) throw ContractError("view cache holds fewer views than requested");
}

} // namespace

ViewCache build_view_cache(const ModelWeights& weights, const ModelConfig& config,
                           std::span<const Sample* const> samples, const AugmentPolicy& policy,
                           std::size_t views, std::uint64_t seed) {
    ViewCache cache;
    cache.policy = policy;
    cache.seed = seed;
    cache.views = views;
    cache.features.resize(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const ViewBatch batch = generate_views(samples[i]->image, views, policy, sample_seed(seed, *samples[i]));
        cache.features[i] = encode_views(weights, config, batch);
    });
    return cache;
}

EvalResult evaluate_zero_shot(const ModelWeights& weights, const ModelConfig& config,
                              const PromptState& prompt, const ClassSet& classes,
                              std::span<const Sample* const> samples) {
    return classify(weights, config, text_features_for(weights, config, prompt.prompt(), classes), samples);
}

EvalResult evaluate_tpt(const ModelWeights& weights, const ModelConfig& config,
                        const PromptState& prompt, const ClassSet& classes,
                        std::span<const Sample* const> samples, const TPTConfig& tpt,
                        const TPTRunOptions& options) {
    tpt.validate();
    const bool cached = options.cache && options.group == ParameterGroup::prompt;
    if (cached) {
        check_cache(*options.cache, samples.size(), tpt.views);
        if (options.cache->seed != tpt.seed || options.cache->policy.kind != tpt.policy.kind) {
            throw ContractError("view cache was built for a different seed or policy");
        }
    }
    std::vector<int> predictions(samples.size());
    std::vector<std::string> traces(options.traces ? samples.size() : 0);
    parallel_for(samples.size(), [&](std::size_t i) {
        const Sample& s = *samples[i];
        PromptState local = prompt;
        TPTConfig cfg = tpt;
        cfg.seed = sample_seed(tpt.seed, s);
        EpisodeResult res;
        if (cached) {
            res = tpt_episode(weights, config, local, classes, options.cache->features[i], cfg);
        } else {
            const ViewBatch views = generate_views(s.image, cfg.views, cfg.policy, cfg.seed);
            res = tpt_episode(weights, config, local, classes, views, cfg, options.group);
        }
        predictions[i] = res.prediction;
        if (options.traces) {
            res.trace.sample_id = s.id;
            traces[i] = trace_to_json(res.trace, res.prediction, s.class_id);
        }
    });
    if (options.traces) *options.traces = std::move(traces);
    return collect(samples, std::move(predictions));
}

EvalResult evaluate_prompt_ensemble(const ModelWeights& weights, const ModelConfig& config,
                                    const std::vector<TokenIds>& templates, const ClassSet& classes,
                                    std::span<const Sample* const> samples) {
    if (templates.empty()) throw ContractError("prompt ensemble needs at least one template");
    Tensor mean({classes.size(), config.proj_dim});
    for (const TokenIds& tpl : templates) {
        const PromptState p = PromptState::from_template(weights, config, tpl, classes.max_token_length());
        const Tensor f = text_features_for(weights, config, p.prompt(), classes);
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += f[i];
    }
    for (double& v : mean.values()) v /= static_cast<double>(templates.size());
    ad::Tape tape;
    const Tensor text = ad::l2_normalize_rows(tape.constant(mean)).value().detached();
    return classify(weights, config, text, samples);
}

EvalResult baseline_averaged_prediction(const ModelWeights& weights, const ModelConfig& config,
                                        const PromptState& prompt, const ClassSet& classes,
                                        std::span<const Sample* const> samples,
                                        const ViewCache& cache, std::size_t views) {
    check_cache(cache, samples.size(), views);
    const Tensor text = text_features_for(weights, config, prompt.prompt(), classes);
    std::vector<int> predictions(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const Tensor probs = class_probabilities(text, prefix_rows(cache.features[i], views), config.logit_scale);
        std::vector<double> mean(probs.cols(), 0.0);
        for (std::size_t r = 0; r < views; ++r)
            for (std::size_t k = 0; k < probs.cols(); ++k) mean[k] += probs.at(r, k);
        predictions[i] = static_cast<int>(argmax(mean));
    });
    return collect(samples, std::move(predictions));
}

EvalResult baseline_majority_vote(const ModelWeights& weights, const ModelConfig& config,
                                  const PromptState& prompt, const ClassSet& classes,
                                  std::span<const Sample* const> samples, const ViewCache& cache,
                                  std::size_t views) {
    check_cache(cache, samples.size(), views);
    const Tensor text = text_features_for(weights, config, prompt.prompt(), classes);
    std::vector<int> predictions(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const Tensor probs = class_probabilities(text, prefix_rows(cache.features[i], views), config.logit_scale);
        const std::size_t K = probs.cols();
        std::vector<double> votes(K, 0.0);
        for (std::size_t r = 0; r < views; ++r) votes[argmax(probs.data().subspan(r * K, K))] += 1.0;
        predictions[i] = static_cast<int>(argmax(votes));
    });
    return collect(samples, std::move(predictions));
}

std::vector<const Sample*> select_shots(std::span<const Sample* const> pool, std::size_t shots,
                                        std::size_t num_classes) {
    std::vector<std::size_t> taken(num_classes, 0);
    std::vector<const Sample*> out;
    for (const Sample* s : pool) {
        const auto c = static_cast<std::size_t>(s->class_id);
        if (c < num_classes && taken[c] < shots) {
            ++taken[c];
            out.push_back(s);
        }
    }
    return out;
}

PromptState fewshot_train_prompt(const ModelWeights& weights, const ModelConfig& config,
                                 const PromptState& init, const ClassSet& classes,
                                 std::span<const Sample* const> shots, const FewShotOptions& options,
                                 std::vector<double>* epoch_losses) {
    PromptState state = init;
    state.reset();
    if (options.epochs == 0 || shots.empty()) return state;
    if (options.batch == 0) throw ContractError("few-shot batch size must be positive");
    const Tensor features = sample_features(weights, config, shots);
    const std::size_t n = shots.size(), K = classes.size();
    const AdamWOptions adamw{options.lr, 0.9, 0.999, 1e-8, 0.0};
    std::vector<Tensor*> params{&state.prompt()};
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        Rng rng(derive_seed(options.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t begin = 0; begin < n; begin += options.batch) {
            const std::size_t B = std::min(options.batch, n - begin);
            Tensor batch({B, config.proj_dim});
            Tensor onehot({B, K});
            for (std::size_t b = 0; b < B; ++b) {
                const std::size_t idx = order[begin + b];
                std::copy_n(features.data().begin() + static_cast<std::ptrdiff_t>(idx * config.proj_dim),
                            config.proj_dim, batch.data().begin() + static_cast<std::ptrdiff_t>(b * config.proj_dim));
                onehot.at(b, static_cast<std::size_t>(shots[idx]->class_id)) = 1.0;
            }
            ad::Tape tape;
            BoundWeights w(tape, weights);
            ad::Var text = prompted_class_features(w, config, tape.leaf(state.prompt()), classes);
            ad::Var probs = class_probabilities(text, tape.constant(batch), config.logit_scale);
            ad::Var loss = ad::scale(ad::sum(ad::mul(ad::log(probs), tape.constant(onehot))),
                                     -1.0 / static_cast<double>(B));
            state.zero_grad();
            tape.backward(loss);
            adamw_step(params, state.optimizer(), adamw);
            total += loss.value()[0] * static_cast<double>(B);
        }
        if (epoch_losses) epoch_losses->push_back(total / static_cast<double>(n));
    }
    state.rebase();
    return state;
}

void ResultsTable::write_csv(std::ostream& out, const std::string& header) const {
    out << header;
    out << "method,shift,rho,views,steps,group,top1,correct,n,seed\n";
    char buf[64];
    for (const ResultRow& r : rows) {
        out << r.method << ',' << r.shift << ',';
        std::snprintf(buf, sizeof buf, "%.17g", r.rho);
        out << buf << ',' << r.views << ',' << r.steps << ',' << r.group << ',';
        std::snprintf(buf, sizeof buf, "%.17g", r.accuracy());
        out << buf << ',' << r.correct << ',' << r.n << ',' << r.seed << '\n';
    }
}

std::string ResultsTable::to_csv(const std::string& header) const {
    std::ostringstream out;
    write_csv(out, header);
    return out.str();
}

ResultsTable ablate(const ModelWeights& weights, const ModelConfig& config,
                    const PromptState& prompt, const ClassSet& classes,
                    std::span<const Sample* const> samples, const TPTConfig& base,
                    const AblationGrid& grid, const std::string& shift_name) {
    std::size_t max_views = 0;
    for (std::size_t v : grid.views) max_views = std::max(max_views, v);
    const bool any_prompt = std::find(grid.groups.begin(), grid.groups.end(), ParameterGroup::prompt) !=
                            grid.groups.end();
    ViewCache cache;
    if (any_prompt && max_views > 0) {
        cache = build_view_cache(weights, config, samples, base.policy, max_views, base.seed);
    }
    ResultsTable table;
    for (ParameterGroup group : grid.groups) {
        for (double rho : grid.rhos) {
            for (std::size_t views : grid.views) {
                for (std::size_t steps : grid.steps) {
                    TPTConfig cfg = base;
                    cfg.rho = rho;
                    cfg.views = views;
                    cfg.steps = steps;
                    TPTRunOptions opts;
                    opts.group = group;
                    opts.cache = group == ParameterGroup::prompt ? &cache : nullptr;
                    const EvalResult r = evaluate_tpt(weights, config, prompt, classes, samples, cfg, opts);
                    table.rows.push_back({"tpt", shift_name, rho, views, steps, to_string(group),
                                          r.correct, r.n, base.seed});
                }
            }
        }
    }
    return table;
}

DistributionDump dump_distributions(const ModelWeights& weights, const ModelConfig& config,
                                    const PromptState& prompt, const ClassSet& classes,
                                    const Tensor& image, const TPTConfig& tpt) {
    tpt.validate();
    const ViewBatch views = generate_views(image, tpt.views, tpt.policy, tpt.seed);
    const Tensor features = encode_views(weights, config, views);
    PromptState local = prompt;
    local.reset();
    DistributionDump dump;
    dump.before = class_probabilities(text_features_for(weights, config, local.prompt(), classes),
                                      features, config.logit_scale);
    const EpisodeResult res = tpt_episode(weights, config, local, classes, features, tpt);
    dump.after = class_probabilities(text_features_for(weights, config, res.tuned_prompt, classes),
                                     features, config.logit_scale);
    dump.prediction = res.prediction;
    return dump;
}

void write_distributions_csv(std::ostream& out, const DistributionDump& dump) {
    const std::size_t K = dump.before.cols();
    out << "phase,view,is_original";
    for (std::size_t k = 0; k < K; ++k) out << ",p" << k;
    out << '\n';
    char buf[32];
    auto emit = [&](const char* phase, const Tensor& t) {
        for (std::size_t r = 0; r < t.rows(); ++r) {
            out << phase << ',' << r << ',' << (r == 0 ? 1 : 0);
            for (std::size_t k = 0; k < K; ++k) {
                std::snprintf(buf, sizeof buf, "%.17g", t.at(r, k));
                out << ',' << buf;
            }
            out << '\n';
        }
    };
    emit("before", dump.before);
    emit("after", dump.after);
}

double mean_pairwise_l1(const Tensor& probs) {
    const std::size_t n = probs.rows(), K = probs.cols();
    if (n < 2) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            for (std::size_t k = 0; k < K; ++k) total += std::abs(probs.at(i, k) - probs.at(j, k));
    return total / static_cast<double>(n * (n - 1) / 2);
}

} // namespace tpt
