// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "support/pretrained.hpp"
#include "tpt/bongard.hpp"
#include "tpt/harness.hpp"
#include "tpt/rng.hpp"
#include "tpt/weights_io.hpp"

using namespace tpt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string format(const char* fmt, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

constexpr std::uint64_t kSeeds[] = {0, 1, 2};
constexpr const char* kShift = "noise:0.3";

/// Pretrained model, its hand-crafted prompt and the clean data.
struct World {
    const RunConfig& config = testing::pretrained().config;
    const ModelWeights& weights = testing::pretrained().weights;
    const ModelConfig& model = config.model;
    Dataset clean = generate(config.dataset, config.model, config.data_seed);
    PromptState prompt = PromptState::from_template(weights, model, vocab::tokenize(config.template_text),
                                                    clean.classes.max_token_length());

    Dataset shifted(std::uint64_t seed) const { return apply_shift(clean, ShiftSpec::parse(kShift), seed); }
    TPTConfig tpt(std::uint64_t seed) const {
        TPTConfig c = config.tpt;
        c.seed = seed;
        return c;
    }
};

const World& world() {
    static const World w;
    return w;
}

/// Everything criteria 3 to 9 measure on one shifted split.
struct SeedRun {
    std::uint64_t seed = 0;
    std::size_t n = 0;
    EvalResult zero_shot;
    EvalResult tpt;              // rho 0.1, N = 64
    EvalResult tpt_rho1;
    EvalResult null_update;      // lr = 0
    EvalResult image_encoder;
    std::vector<std::pair<std::size_t, std::size_t>> by_views;  // (N, correct) at rho 0.1
    std::size_t averaged = 0;
    std::size_t vote = 0;
    double tpt_seconds = 0.0;    // view generation + encoding + default TPT
};

const SeedRun& seed_run(std::uint64_t seed) {
    static std::map<std::uint64_t, SeedRun> runs;
    if (auto it = runs.find(seed); it != runs.end()) return it->second;
    const World& w = world();
    const Dataset data = w.shifted(seed);
    const auto test = data.split("test");
    SeedRun r;
    r.seed = seed;
    r.n = test.size();
    r.zero_shot = evaluate_zero_shot(w.weights, w.model, w.prompt, data.classes, test);

    const TPTConfig base = w.tpt(seed);
    const auto start = Clock::now();
    const ViewCache cache = build_view_cache(w.weights, w.model, test, base.policy, base.views, seed);
    TPTRunOptions cached;
    cached.cache = &cache;
    r.tpt = evaluate_tpt(w.weights, w.model, w.prompt, data.classes, test, base, cached);
    r.tpt_seconds = seconds_since(start);

    TPTConfig c = base;
    c.rho = 1.0;
    r.tpt_rho1 = evaluate_tpt(w.weights, w.model, w.prompt, data.classes, test, c, cached);
    c = base;
    c.adamw.lr = 0.0;
    r.null_update = evaluate_tpt(w.weights, w.model, w.prompt, data.classes, test, c, cached);
    for (std::size_t views : {2, 8, 32}) {
        c = base;
        c.views = views;
        r.by_views.emplace_back(views, evaluate_tpt(w.weights, w.model, w.prompt, data.classes, test, c, cached).correct);
    }
    r.by_views.emplace_back(base.views, r.tpt.correct);
    r.averaged = baseline_averaged_prediction(w.weights, w.model, w.prompt, data.classes, test, cache, base.views).correct;
    r.vote = baseline_majority_vote(w.weights, w.model, w.prompt, data.classes, test, cache, base.views).correct;

    TPTRunOptions image;
    image.group = ParameterGroup::image_encoder;
    r.image_encoder = evaluate_tpt(w.weights, w.model, w.prompt, data.classes, test, base, image);
    return runs[seed] = r;
}

/// Mean accuracy over the three seeds of one measurement.
double mean_accuracy(const std::function<std::size_t(const SeedRun&)>& correct) {
    double total = 0.0;
    for (std::uint64_t s : kSeeds) {
        const SeedRun& r = seed_run(s);
        total += static_cast<double>(correct(r)) / static_cast<double>(r.n);
    }
    return total / std::size(kSeeds);
}

std::string per_seed(const std::function<std::size_t(const SeedRun&)>& correct) {
    std::string out;
    for (std::uint64_t s : kSeeds) out += (out.empty() ? "" : "/") + std::to_string(correct(seed_run(s)));
    return out;
}

// 1
Outcome gradient_fidelity() {
    const auto start = Clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::size_t checks = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const NamedGradCheck& c : gradcheck_suite(seed)) {
            ++checks;
            if (c.result.max_rel_error > worst) {
                worst = c.result.max_rel_error;
                worst_name = c.name;
            }
        }
    }
    const double secs = seconds_since(start);
    return {worst <= 1e-4 && secs < 60.0,
            format("%zu checks over 20 seeds, max rel err %.2e (%s), %.1f s", checks, worst,
                   worst_name.c_str(), secs)};
}

Tensor unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (double& v : t.values()) v = normal(rng);
    ad::Tape tape;
    return ad::l2_normalize_rows(tape.constant(t)).value().detached();
}

// 2
Outcome selection_reductions() {
    Rng rng(2024);
    double mean_err = 0.0;
    std::size_t mismatched = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = static_cast<std::size_t>(uniform_int(rng, 1, 64));
        const std::size_t K = static_cast<std::size_t>(uniform_int(rng, 2, 12));
        ad::Tape tape;
        PredictionSet pred = predict_views(tape.constant(unit_rows(rng, K, 16)), tape.constant(unit_rows(rng, n, 16)),
                                           uniform(rng, 1.0, 30.0));
        const Tensor& p = pred.probs.value();

        const double rho = uniform(rng, 0.01, 1.0);
        select_and_average(pred, rho);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> h(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < K; ++k) h[i] -= p.at(i, k) * std::log(p.at(i, k));
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });
        const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rho * static_cast<double>(n))));
        const std::set<std::size_t> oracle(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        if (std::set<std::size_t>(pred.selected.begin(), pred.selected.end()) != oracle) ++mismatched;

        select_and_average(pred, 1.0);
        for (std::size_t c = 0; c < K; ++c) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i) m += p.at(i, c);
            mean_err = std::max(mean_err, std::abs(pred.averaged.value()[c] - m / static_cast<double>(n)));
        }
    }
    const std::vector<double> entropies(64, 0.5);
    const std::size_t k = confidence_threshold(entropies, 0.1).k;
    return {mean_err <= 1e-12 && mismatched == 0 && k == 6,
            format("rho=1 vs mean max diff %.1e; oracle mismatches %zu/100; k(0.1, 64)=%zu", mean_err,
                   mismatched, k)};
}

// 3
Outcome null_update() {
    const SeedRun& r = seed_run(0);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < r.n; ++i) differ += r.null_update.predictions[i] != r.zero_shot.predictions[i];
    return {differ == 0 && r.n == 500, format("%zu samples, %zu predictions differ", r.n, differ)};
}

std::string results_file(const World& w, const Dataset& data, std::span<const Sample* const> samples,
                         std::uint64_t seed) {
    std::vector<std::string> traces;
    TPTRunOptions opts;
    opts.traces = &traces;
    const EvalResult r = evaluate_tpt(w.weights, w.model, w.prompt, data.classes, samples, w.tpt(seed), opts);
    RunConfig header = w.config;
    header.seed = seed;
    header.shift = kShift;
    ResultsTable table;
    table.rows.push_back({"tpt", kShift, w.config.tpt.rho, w.config.tpt.views, w.config.tpt.steps, "prompt",
                          r.correct, r.n, seed});
    std::string out = table.to_csv(header.header());
    for (const std::string& t : traces) out += t + "\n";
    return out;
}

// 4
Outcome isolation_and_determinism() {
    const World& w = world();
    const SeedRun& r = seed_run(0);
    const Dataset data = w.shifted(0);
    const auto test = data.split("test");

    std::vector<const Sample*> shuffled(test.begin(), test.end());
    Rng rng(77);
    for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i) - 1))]);
    const EvalResult s = evaluate_tpt(w.weights, w.model, w.prompt, data.classes, shuffled, w.tpt(0));
    std::map<std::size_t, int> by_id;
    for (std::size_t i = 0; i < test.size(); ++i) by_id[test[i]->id] = r.tpt.predictions[i];
    std::size_t changed = 0;
    for (std::size_t i = 0; i < shuffled.size(); ++i) changed += s.predictions[i] != by_id[shuffled[i]->id];

    const std::span<const Sample* const> subset(test.data(), 100);
    const std::string a = results_file(w, data, subset, 0), b = results_file(w, data, subset, 0);
    return {changed == 0 && a == b,
            format("shuffled order: %zu of %zu predictions changed; two runs' results files (%zu bytes) %s",
                   changed, shuffled.size(), a.size(), a == b ? "identical" : "DIFFER")};
}

// 5
Outcome tpt_beats_zero_shot() {
    const double zs = mean_accuracy([](const SeedRun& r) { return r.zero_shot.correct; });
    const double tpt = mean_accuracy([](const SeedRun& r) { return r.tpt.correct; });
    double secs = 0.0;
    for (std::uint64_t s : kSeeds) secs = std::max(secs, seed_run(s).tpt_seconds);
    return {tpt - zs > 0.0 && secs < 600.0,
            format("zero-shot %.4f (%s) vs TPT %.4f (%s); margin %+.4f; slowest seed %.1f s", zs,
                   per_seed([](const SeedRun& r) { return r.zero_shot.correct; }).c_str(), tpt,
                   per_seed([](const SeedRun& r) { return r.tpt.correct; }).c_str(), tpt - zs, secs)};
}

// 6
Outcome confidence_selection() {
    const double sel = mean_accuracy([](const SeedRun& r) { return r.tpt.correct; });
    const double all = mean_accuracy([](const SeedRun& r) { return r.tpt_rho1.correct; });
    return {sel >= all, format("rho=0.1 %.4f (%s) vs rho=1.0 %.4f (%s)", sel,
                               per_seed([](const SeedRun& r) { return r.tpt.correct; }).c_str(), all,
                               per_seed([](const SeedRun& r) { return r.tpt_rho1.correct; }).c_str())};
}

// 7
Outcome prompt_vs_image_encoder() {
    const double prompt = mean_accuracy([](const SeedRun& r) { return r.tpt.correct; });
    const double image = mean_accuracy([](const SeedRun& r) { return r.image_encoder.correct; });
    return {prompt >= image,
            format("prompt %.4f vs image_encoder %.4f (%s)", prompt, image,
                   per_seed([](const SeedRun& r) { return r.image_encoder.correct; }).c_str())};
}

// 8
Outcome view_sweep() {
    std::vector<double> acc;
    std::string detail;
    const auto& views = seed_run(0).by_views;
    for (std::size_t j = 0; j < views.size(); ++j) {
        acc.push_back(mean_accuracy([j](const SeedRun& r) { return r.by_views[j].second; }));
        detail += format("%sN=%zu %.4f", j ? ", " : "", views[j].first, acc.back());
    }
    std::size_t inversions = 0;
    double worst = 0.0;
    for (std::size_t j = 1; j < acc.size(); ++j) {
        if (acc[j] < acc[j - 1]) {
            ++inversions;
            worst = std::max(worst, acc[j - 1] - acc[j]);
        }
    }
    return {inversions <= 1 && worst <= 0.005,
            detail + format("; %zu inversion(s), largest %.4f", inversions, worst)};
}

// 9
Outcome augmentation_baselines() {
    const double tpt = mean_accuracy([](const SeedRun& r) { return r.tpt.correct; });
    const double avg = mean_accuracy([](const SeedRun& r) { return r.averaged; });
    const double vote = mean_accuracy([](const SeedRun& r) { return r.vote; });
    return {tpt >= avg && tpt >= vote,
            format("TPT %.4f vs averaged %.4f (%s), vote %.4f (%s)", tpt, avg,
                   per_seed([](const SeedRun& r) { return r.averaged; }).c_str(), vote,
                   per_seed([](const SeedRun& r) { return r.vote; }).c_str())};
}

// 10
Outcome bongard() {
    const World& w = world();
    BongardConfig c;
    c.prompt_length = w.config.bongard_prompt_length;
    c.steps = w.config.bongard_steps;
    std::vector<BongardResult> tuned(100);
    parallel_for(tuned.size(), [&](std::size_t i) {
        BongardConfig ci = c;
        ci.seed = i;
        tuned[i] = tpt_reason(w.weights, w.model, generate_bongard_task(w.model, 0, i), ci);
    });
    std::size_t separated = 0, right = 0;
    for (std::size_t i = 0; i < tuned.size(); ++i) {
        separated += tuned[i].final_support_accuracy() == 1.0;
        right += tuned[i].prediction == generate_bongard_task(w.model, 0, i).query_label;
    }
    std::vector<int> coin(1000);
    parallel_for(coin.size(), [&](std::size_t i) {
        BongardConfig ci = c;
        ci.steps = 0;
        ci.seed = i;
        const BongardSample s = generate_bongard_task(w.model, 1, i);
        coin[i] = tpt_reason(w.weights, w.model, s, ci).prediction == s.query_label;
    });
    const double null_acc = std::accumulate(coin.begin(), coin.end(), 0) / 1000.0;
    return {separated >= 95 && right >= 80 && std::abs(null_acc - 0.5) <= 0.05,
            format("64 steps: support 100%% on %zu/100, query %zu/100; 0 steps: query %.3f over 1000",
                   separated, right, null_acc)};
}

// 11
Outcome invariants() {
    const World& w = world();
    const Dataset data = w.shifted(0);
    const auto test = data.split("test");
    const Tensor text = class_text_features(w.weights, w.model, vocab::tokenize(w.config.template_text), data.classes);
    const std::size_t K = data.classes.size();
    const double lnK = std::log(static_cast<double>(K));
    const ViewCache cache = build_view_cache(w.weights, w.model, std::span(test.data(), 100), w.config.tpt.policy,
                                             w.config.tpt.views, 0);
    double sum_err = 0.0, below = 0.0, above = 0.0;
    std::size_t rows = 0;
    for (const Tensor& f : cache.features) {
        const Tensor p = class_probabilities(text, f, w.model.logit_scale);
        for (std::size_t i = 0; i < p.rows(); ++i, ++rows) {
            const std::span<const double> row(p.data().data() + i * K, K);
            sum_err = std::max(sum_err, std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0));
            const double h = entropy(row);
            below = std::max(below, -h);
            above = std::max(above, h - lnK);
        }
    }
    double uniform_err = 0.0, onehot = 0.0;
    for (std::size_t k = 1; k <= 1000; ++k) {
        const std::vector<double> u(k, 1.0 / static_cast<double>(k));
        uniform_err = std::max(uniform_err, std::abs(entropy(u) - std::log(static_cast<double>(k))));
        std::vector<double> e(k, 0.0);
        e[k / 2] = 1.0;
        onehot = std::max(onehot, std::abs(entropy(e)));
    }
    return {sum_err <= 1e-10 && below <= 0.0 && above <= 0.0 && uniform_err <= 1e-12 && onehot == 0.0,
            format("%zu rows: max |sum-1| %.1e, entropy in [0, ln K]: %s; uniform err %.1e; one-hot %.1e", rows,
                   sum_err, below <= 0.0 && above <= 0.0 ? "yes" : "NO", uniform_err, onehot)};
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// 12
Outcome persistence() {
    const World& w = world();
    const fs::path dir = fs::temp_directory_path() / format("tpt_acceptance_%d", static_cast<int>(::getpid()));
    fs::create_directories(dir);
    save_weights(dir / "a.tptw", w.weights);
    const ModelWeights back = load_weights(dir / "a.tptw");
    save_weights(dir / "b.tptw", back);
    const bool weights_ok = back.same_values(w.weights) && read_bytes(dir / "a.tptw") == read_bytes(dir / "b.tptw");

    const Dataset data = w.shifted(0);
    std::size_t images = 0, bad = 0;
    for (const Sample& s : data.samples) {
        if (s.id % 10 != 0) continue;
        save_image(dir / "x.tptimg", s.image);
        bad += load_image(dir / "x.tptimg").same_values(s.image) ? 0 : 1;
        ++images;
    }
    fs::remove_all(dir);
    return {weights_ok && bad == 0,
            format("weights (%zu params) %s; %zu images, %zu mismatched", back.parameter_count(),
                   weights_ok ? "bit-exact" : "DIFFER", images, bad)};
}

struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "gradient fidelity", gradient_fidelity},
    {2, "selection reductions", selection_reductions},
    {3, "null-update identity", null_update},
    {4, "episodic isolation and determinism", isolation_and_determinism},
    {5, "TPT beats zero-shot under shift", tpt_beats_zero_shot},
    {6, "confidence selection helps", confidence_selection},
    {7, "prompt beats image-encoder tuning", prompt_vs_image_encoder},
    {8, "accuracy grows with views", view_sweep},
    {9, "TPT beats augmentation baselines", augmentation_baselines},
    {10, "support-set reasoning", bongard},
    {11, "entropy and normalization invariants", invariants},
    {12, "persistence round trips", persistence},
};

} // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failed = 0;
    const auto start = Clock::now();
    for (const Criterion& c : kCriteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += o.pass ? 0 : 1;
        std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    seconds_since(t0));
        std::fflush(stdout);
    }
    std::printf("%d failed, total %.1f s\n", failed, seconds_since(start));
    return failed == 0 ? 0 : 1;
}
