// Command-line driver: pretraining, evaluation, baselines, ablations,
// support-set reasoning and diagnostics.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "tpt/bongard.hpp"
#include "tpt/data.hpp"
#include "tpt/harness.hpp"
#include "tpt/run_config.hpp"
#include "tpt/weights_io.hpp"

namespace fs = std::filesystem;
using namespace tpt;

namespace {

struct Flags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> shift;
    std::optional<std::string> aug;
    std::optional<double> rho;
    std::optional<std::size_t> views;
    std::optional<std::size_t> steps;
    std::optional<double> lr;
    std::optional<std::string> out;
    std::optional<std::string> weights;
    std::optional<std::string> data;
    std::vector<std::string> sets;
};

void add_common(CLI::App& app, Flags& f) {
    app.add_option("--config", f.config_path, "key=value config file");
    app.add_option("--seed", f.seed, "evaluation seed");
    app.add_option("--shift", f.shift, "distribution shift, e.g. noise:0.3 or invert+blur:1");
    app.add_option("--aug", f.aug, "view augmentation: rrc or augmix");
    app.add_option("--rho", f.rho, "confidence selection fraction");
    app.add_option("--views", f.views, "views per test image");
    app.add_option("--steps", f.steps, "optimization steps");
    app.add_option("--lr", f.lr, "step size");
    app.add_option("--out", f.out, "output path");
    app.add_option("--weights", f.weights, "weights file");
    app.add_option("--data", f.data, "dataset directory written by gen-data");
    app.add_option("--set", f.sets, "override any config key (key=value), repeatable");
}

RunConfig resolve(const Flags& f) {
    RunConfig c;
    if (!f.config_path.empty()) c.merge_file(f.config_path);
    for (const std::string& kv : f.sets) c.merge_text(kv);
    if (f.seed) c.seed = *f.seed;
    if (f.shift) c.shift = *f.shift;
    if (f.aug) c.tpt.policy.kind = AugmentPolicy::parse_kind(*f.aug);
    if (f.rho) c.tpt.rho = *f.rho;
    if (f.views) c.tpt.views = *f.views;
    if (f.steps) c.tpt.steps = *f.steps;
    if (f.lr) c.tpt.adamw.lr = *f.lr;
    if (f.out) c.out = *f.out;
    if (f.weights) c.weights = *f.weights;
    if (f.data) c.data_dir = *f.data;
    c.tpt.seed = c.seed;
    c.model.validate();
    return c;
}

/// Loaded weights plus the (shifted) test split.
struct Context {
    RunConfig config;
    ModelWeights weights;
    Dataset data;
    std::vector<const Sample*> test;
    std::vector<const Sample*> train;

    PromptState prompt() const {
        return PromptState::from_template(weights, config.model, vocab::tokenize(config.template_text),
                                          data.classes.max_token_length());
    }
};

Dataset load_data(const RunConfig& c, bool from_disk) {
    if (from_disk && fs::exists(fs::path(c.data_dir) / "manifest.jsonl")) return read_dataset(c.data_dir);
    return generate(c.dataset, c.model, c.data_seed);
}

Context load_context(const Flags& f) {
    Context ctx;
    ctx.config = resolve(f);
    if (!fs::exists(ctx.config.weights)) {
        throw std::runtime_error("weights file '" + ctx.config.weights + "' not found; run `tpt pretrain` first");
    }
    ctx.weights = load_weights(ctx.config.weights);
    check_weights(ctx.weights, ctx.config.model);
    Dataset raw = load_data(ctx.config, f.data.has_value());
    ctx.data = apply_shift(raw, ShiftSpec::parse(ctx.config.shift), ctx.config.seed);
    ctx.test = ctx.data.split("test");
    ctx.train = ctx.data.split("train");
    return ctx;
}

void emit(const RunConfig& c, const std::string& text) {
    if (c.out.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(c.out);
    if (!out) throw std::runtime_error("cannot write " + c.out);
    out << text;
}

ResultRow row_for(const std::string& method, const RunConfig& c, const EvalResult& r) {
    return {method, c.shift, c.tpt.rho, c.tpt.views, c.tpt.steps, c.group, r.correct, r.n, c.seed};
}

int cmd_pretrain(const Flags& f) {
    RunConfig c = resolve(f);
    c.pretrain.on_epoch = [](std::size_t epoch, double loss) {
        std::fprintf(stderr, "epoch %zu loss %.5f\n", epoch, loss);
    };
    const PretrainResult res = pretrain_from_config(c);
    const Dataset data = generate(c.dataset, c.model, c.data_seed);
    save_weights(c.weights, res.weights);

    const auto test = data.split("test");
    const PromptState prompt = PromptState::from_template(
        res.weights, c.model, vocab::tokenize(c.template_text), data.classes.max_token_length());
    const EvalResult zs = evaluate_zero_shot(res.weights, c.model, prompt, data.classes, test);
    const auto test_pairs = caption_pairs(data.subset("test"));
    std::printf("weights=%s parameters=%zu final_loss=%.5f zero_shot_clean=%.4f retrieval_top1=%.4f\n",
                c.weights.c_str(), res.weights.parameter_count(), res.epoch_losses.back(), zs.accuracy(),
                retrieval_top1(res.weights, c.model, test_pairs, c.pretrain.batch));
    return 0;
}

int cmd_gen_data(const Flags& f) {
    const RunConfig c = resolve(f);
    Dataset data = generate(c.dataset, c.model, c.data_seed);
    data = apply_shift(data, ShiftSpec::parse(c.shift), c.seed);
    const std::string dir = c.out.empty() ? c.data_dir : c.out;
    write_dataset(dir, data);
    std::printf("wrote %zu images to %s\n", data.samples.size(), dir.c_str());
    return 0;
}

int cmd_eval(const Flags& f, const std::string& method, const std::string& traces_path) {
    Context ctx = load_context(f);
    RunConfig& c = ctx.config;
    const PromptState prompt = ctx.prompt();
    const ModelConfig& m = c.model;
    EvalResult r;
    if (method == "zeroshot") {
        r = evaluate_zero_shot(ctx.weights, m, prompt, ctx.data.classes, ctx.test);
    } else if (method == "tpt") {
        std::vector<std::string> traces;
        TPTRunOptions opts;
        opts.group = parse_parameter_group(c.group);
        if (!traces_path.empty()) opts.traces = &traces;
        r = evaluate_tpt(ctx.weights, m, prompt, ctx.data.classes, ctx.test, c.tpt, opts);
        if (!traces_path.empty()) {
            std::ofstream out(traces_path);
            for (const auto& line : traces) out << line << '\n';
        }
    } else if (method == "ensemble") {
        std::vector<TokenIds> templates;
        for (const auto& t : vocab::templates()) templates.push_back(vocab::tokenize(t));
        r = evaluate_prompt_ensemble(ctx.weights, m, templates, ctx.data.classes, ctx.test);
    } else {
        const ViewCache cache = build_view_cache(ctx.weights, m, ctx.test, c.tpt.policy, c.tpt.views, c.seed);
        r = method == "avgpred"
                ? baseline_averaged_prediction(ctx.weights, m, prompt, ctx.data.classes, ctx.test, cache, c.tpt.views)
                : baseline_majority_vote(ctx.weights, m, prompt, ctx.data.classes, ctx.test, cache, c.tpt.views);
    }
    ResultsTable table;
    table.rows.push_back(row_for(method, c, r));
    emit(c, table.to_csv(c.header()));
    return 0;
}

int cmd_fewshot(const Flags& f) {
    Context ctx = load_context(f);
    const RunConfig& c = ctx.config;
    const PromptState init = ctx.prompt();
    // Shots come from the clean training split.
    const Dataset clean = load_data(c, f.data.has_value());
    const auto pool = clean.split("train");
    const auto shots = select_shots(pool, c.fewshot_shots, clean.classes.size());
    std::vector<double> losses;
    const PromptState tuned = fewshot_train_prompt(
        ctx.weights, c.model, init, ctx.data.classes, shots,
        {c.fewshot_epochs, c.fewshot_lr, 32, c.seed}, &losses);
    ResultsTable table;
    table.rows.push_back(row_for("fewshot_train", c, evaluate_zero_shot(ctx.weights, c.model, tuned, ctx.data.classes, shots)));
    table.rows.push_back(row_for("zeroshot", c, evaluate_zero_shot(ctx.weights, c.model, init, ctx.data.classes, ctx.test)));
    table.rows.push_back(row_for("fewshot", c, evaluate_zero_shot(ctx.weights, c.model, tuned, ctx.data.classes, ctx.test)));
    table.rows.push_back(row_for("tpt", c, evaluate_tpt(ctx.weights, c.model, init, ctx.data.classes, ctx.test, c.tpt)));
    table.rows.push_back(row_for("tpt+fewshot", c, evaluate_tpt(ctx.weights, c.model, tuned, ctx.data.classes, ctx.test, c.tpt)));
    emit(c, table.to_csv(c.header()));
    return 0;
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& text, Parse parse) {
    std::vector<T> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        if (!item.empty()) out.push_back(parse(item));
    }
    return out;
}

int cmd_ablate(const Flags& f, const std::string& rhos, const std::string& views,
               const std::string& steps, const std::string& groups) {
    Context ctx = load_context(f);
    const RunConfig& c = ctx.config;
    AblationGrid grid;
    grid.rhos = rhos.empty() ? std::vector<double>{c.tpt.rho}
                             : parse_list<double>(rhos, [](const std::string& s) { return std::stod(s); });
    grid.views = views.empty() ? std::vector<std::size_t>{c.tpt.views}
                               : parse_list<std::size_t>(views, [](const std::string& s) { return std::stoul(s); });
    grid.steps = steps.empty() ? std::vector<std::size_t>{c.tpt.steps}
                               : parse_list<std::size_t>(steps, [](const std::string& s) { return std::stoul(s); });
    grid.groups = groups.empty() ? std::vector<ParameterGroup>{parse_parameter_group(c.group)}
                                 : parse_list<ParameterGroup>(groups, parse_parameter_group);
    const ResultsTable table = ablate(ctx.weights, c.model, ctx.prompt(), ctx.data.classes, ctx.test,
                                      c.tpt, grid, c.shift);
    emit(c, table.to_csv(c.header()));
    return 0;
}

int cmd_bongard(const Flags& f, std::optional<std::size_t> tasks) {
    RunConfig c = resolve(f);
    if (tasks) c.bongard_tasks = *tasks;
    const ModelWeights weights = load_weights(c.weights);
    check_weights(weights, c.model);
    const auto& splits = bongard_split_names();
    std::vector<std::size_t> correct(splits.size(), 0), total(splits.size(), 0);
    std::vector<int> hits(c.bongard_tasks, 0), split_of(c.bongard_tasks, 0);
    parallel_for(c.bongard_tasks, [&](std::size_t i) {
        const BongardSample s = generate_bongard_task(c.model, c.seed, i);
        BongardConfig bc;
        bc.prompt_length = c.bongard_prompt_length;
        bc.steps = c.bongard_steps;
        bc.seed = derive_seed(c.seed, 1000003 + i);
        hits[i] = tpt_reason(weights, c.model, s, bc).prediction == s.query_label ? 1 : 0;
        split_of[i] = s.rule.split;
    });
    for (std::size_t i = 0; i < c.bongard_tasks; ++i) {
        correct[static_cast<std::size_t>(split_of[i])] += static_cast<std::size_t>(hits[i]);
        ++total[static_cast<std::size_t>(split_of[i])];
    }
    std::ostringstream out;
    out << c.header();
    out << "method";
    for (const auto& s : splits) out << ',' << s;
    out << ",avg\nTPT";
    std::size_t all_c = 0, all_n = 0;
    char buf[32];
    for (std::size_t k = 0; k < splits.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.2f", total[k] ? 100.0 * static_cast<double>(correct[k]) / static_cast<double>(total[k]) : 0.0);
        out << ',' << buf;
        all_c += correct[k];
        all_n += total[k];
    }
    std::snprintf(buf, sizeof buf, "%.2f", all_n ? 100.0 * static_cast<double>(all_c) / static_cast<double>(all_n) : 0.0);
    out << ',' << buf << '\n';
    emit(c, out.str());
    return 0;
}

int cmd_dump(const Flags& f, std::size_t sample) {
    Context ctx = load_context(f);
    const RunConfig& c = ctx.config;
    if (sample >= ctx.test.size()) throw std::runtime_error("sample index out of range");
    TPTConfig tpt = c.tpt;
    tpt.seed = sample_seed(c.seed, *ctx.test[sample]);
    const DistributionDump dump =
        dump_distributions(ctx.weights, c.model, ctx.prompt(), ctx.data.classes, ctx.test[sample]->image, tpt);
    std::ostringstream out;
    out << c.header() << "# sample_id=" << ctx.test[sample]->id << " label=" << ctx.test[sample]->class_id
        << " prediction=" << dump.prediction << '\n';
    write_distributions_csv(out, dump);
    emit(c, out.str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time prompt tuning on a miniature dual encoder"};
    app.require_subcommand(1);
    Flags flags;

    auto* pretrain = app.add_subcommand("pretrain", "contrastive pretraining on synthetic caption pairs");
    auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset to disk");
    auto* eval = app.add_subcommand("eval", "evaluate one method on the test split");
    std::string method = "tpt", traces;
    eval->add_option("--method", method, "zeroshot|tpt|ensemble|avgpred|vote")
        ->check(CLI::IsMember({"zeroshot", "tpt", "ensemble", "avgpred", "vote"}));
    eval->add_option("--traces", traces, "JSON-lines episode traces (tpt only)");
    auto* fewshot = app.add_subcommand("fewshot-train", "cross-entropy prompt tuning baseline");
    auto* abl = app.add_subcommand("ablate", "grid over rho, views, steps and parameter group");
    std::string g_rho, g_views, g_steps, g_groups;
    abl->add_option("--grid-rho", g_rho, "comma-separated rho values");
    abl->add_option("--grid-views", g_views, "comma-separated view counts");
    abl->add_option("--grid-steps", g_steps, "comma-separated step counts");
    abl->add_option("--grid-groups", g_groups, "prompt,text_encoder,image_encoder,all");
    auto* bong = app.add_subcommand("bongard", "support-set reasoning on synthetic concept tasks");
    std::optional<std::size_t> tasks;
    bong->add_option("--tasks", tasks, "number of tasks");
    auto* dump = app.add_subcommand("dump-dist", "per-view distributions before and after tuning");
    std::size_t sample = 0;
    dump->add_option("--sample", sample, "index into the test split");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient report");

    for (CLI::App* sub : {pretrain, gen, eval, fewshot, abl, bong, dump, grad}) add_common(*sub, flags);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*pretrain) return cmd_pretrain(flags);
        if (*gen) return cmd_gen_data(flags);
        if (*eval) return cmd_eval(flags, method, traces);
        if (*fewshot) return cmd_fewshot(flags);
        if (*abl) return cmd_ablate(flags, g_rho, g_views, g_steps, g_groups);
        if (*bong) return cmd_bongard(flags, tasks);
        if (*dump) return cmd_dump(flags, sample);
        if (*grad) {
            const RunConfig c = resolve(flags);
            return gradcheck_report(c.seed, std::cout) == 0 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
