#include <cstdio>
#include <ostream>

#include "tpt/data.hpp"
#include "tpt/harness.hpp"
#include "tpt/rng.hpp"

namespace tpt {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = uniform(rng, lo, hi);
    return t;
}

/// sum(out * W) with a fixed random W, so every output entry matters.
ad::Var project(ad::Tape& tape, ad::Var out, const Tensor& w) {
    return ad::sum(ad::mul(out, tape.constant(w)));
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.embed_dim = 8;
    c.proj_dim = 6;
    c.text_layers = 1;
    c.image_layers = 1;
    c.heads = 2;
    c.vocab_size = 32;
    c.max_text_len = 8;
    c.height = 8;
    c.width = 8;
    c.patch_size = 4;
    c.mlp_ratio = 2;
    return c;
}

} // namespace

std::vector<NamedGradCheck> gradcheck_suite(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x9c));
    std::vector<NamedGradCheck> out;
    auto check = [&](const std::string& name, const ScalarFn& f, const Tensor& x) {
        out.push_back({name, finite_diff_check(f, x)});
    };

    const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5});
    const Tensor w35 = random_tensor(rng, {3, 5}), w34 = random_tensor(rng, {3, 4});
    const Tensor w43 = random_tensor(rng, {4, 3}), w14 = random_tensor(rng, {1, 4});
    const Tensor c34 = random_tensor(rng, {3, 4}), row = random_tensor(rng, {1, 4});
    const Tensor pos = random_tensor(rng, {3, 4}, 0.1, 2.0);

    check("matmul.a", [&](ad::Tape& t, ad::Var x) { return project(t, ad::matmul(x, t.constant(b)), w35); }, a);
    check("matmul.b", [&](ad::Tape& t, ad::Var x) { return project(t, ad::matmul(t.constant(a), x), w35); }, b);
    check("transpose", [&](ad::Tape& t, ad::Var x) { return project(t, ad::transpose(x), w43); }, a);
    check("add.a", [&](ad::Tape& t, ad::Var x) { return project(t, ad::add(x, t.constant(c34)), w34); }, a);
    check("add.b", [&](ad::Tape& t, ad::Var x) { return project(t, ad::add(t.constant(c34), x), w34); }, a);
    check("add_tiled.x", [&](ad::Tape& t, ad::Var x) { return project(t, ad::add_tiled(x, t.constant(row)), w34); }, a);
    check("add_tiled.y", [&](ad::Tape& t, ad::Var x) { return project(t, ad::add_tiled(t.constant(a), x), w34); }, row);
    check("mul.a", [&](ad::Tape& t, ad::Var x) { return project(t, ad::mul(x, t.constant(c34)), w34); }, a);
    check("mul.b", [&](ad::Tape& t, ad::Var x) { return project(t, ad::mul(t.constant(c34), x), w34); }, a);
    check("scale", [&](ad::Tape& t, ad::Var x) { return project(t, ad::scale(x, -1.7), w34); }, a);
    check("sum", [&](ad::Tape&, ad::Var x) { return ad::scale(ad::sum(ad::mul(x, x)), 0.5); }, a);
    check("softmax_rows", [&](ad::Tape& t, ad::Var x) { return project(t, ad::softmax_rows(x), w34); }, a);
    check("log", [&](ad::Tape& t, ad::Var x) { return project(t, ad::log(x), w34); }, pos);
    check("gelu", [&](ad::Tape& t, ad::Var x) { return project(t, ad::gelu(x), w34); }, a);
    check("l2_normalize_rows", [&](ad::Tape& t, ad::Var x) { return project(t, ad::l2_normalize_rows(x), w34); }, a);
    check("mean_rows", [&](ad::Tape& t, ad::Var x) { return project(t, ad::mean_rows(x), w14); }, a);

    const Tensor tall = random_tensor(rng, {6, 4}), w_block = random_tensor(rng, {3, 4});
    check("block_mean_rows", [&](ad::Tape& t, ad::Var x) { return project(t, ad::block_mean_rows(x, 2), w_block); }, tall);
    const std::vector<std::size_t> picks{4, 0, 4};
    check("select_rows", [&](ad::Tape& t, ad::Var x) { return project(t, ad::select_rows(x, picks), w34); }, tall);
    check("slice_rows", [&](ad::Tape& t, ad::Var x) { return project(t, ad::slice_rows(x, 2, 3), w34); }, tall);
    const Tensor w94 = random_tensor(rng, {9, 4});
    check("concat_rows", [&](ad::Tape& t, ad::Var x) {
        const ad::Var parts[] = {x, t.constant(c34), ad::scale(x, 2.0)};
        return project(t, ad::concat_rows(parts), w94);
    }, a);

    const Tensor gain = random_tensor(rng, {1, 4}, 0.5, 1.5), bias = random_tensor(rng, {1, 4});
    check("layer_norm.x", [&](ad::Tape& t, ad::Var x) {
        return project(t, ad::layer_norm(x, t.constant(gain), t.constant(bias)), w34);
    }, a);
    check("layer_norm.gain", [&](ad::Tape& t, ad::Var x) {
        return project(t, ad::layer_norm(t.constant(a), x, t.constant(bias)), w34);
    }, gain);
    check("layer_norm.bias", [&](ad::Tape& t, ad::Var x) {
        return project(t, ad::layer_norm(t.constant(a), t.constant(gain), x), w34);
    }, bias);

    // Two blocks of three positions, two heads of width 2.
    const Tensor q = random_tensor(rng, {6, 4}), k = random_tensor(rng, {6, 4}), v = random_tensor(rng, {6, 4});
    const Tensor w64 = random_tensor(rng, {6, 4});
    for (bool causal : {false, true}) {
        const std::string tag = causal ? ".causal" : "";
        check("attention.q" + tag, [&](ad::Tape& t, ad::Var x) {
            return project(t, ad::attention(x, t.constant(k), t.constant(v), 2, 3, causal), w64);
        }, q);
        check("attention.k" + tag, [&](ad::Tape& t, ad::Var x) {
            return project(t, ad::attention(t.constant(q), x, t.constant(v), 2, 3, causal), w64);
        }, k);
        check("attention.v" + tag, [&](ad::Tape& t, ad::Var x) {
            return project(t, ad::attention(t.constant(q), t.constant(k), x, 2, 3, causal), w64);
        }, v);
    }

    // Encoder towers w.r.t. their inputs on a small model.
    const ModelConfig tiny = tiny_config();
    const ModelWeights tiny_w = init_weights(tiny, derive_seed(seed, 1));
    const Tensor seqs = random_tensor(rng, {2 * 5, tiny.embed_dim}, -0.5, 0.5);
    const Tensor w_text = random_tensor(rng, {2, tiny.proj_dim});
    check("encode_text", [&](ad::Tape& t, ad::Var x) {
        BoundWeights bw(t, tiny_w);
        return project(t, encode_text(bw, tiny, x, 5), w_text);
    }, seqs);
    const Tensor patches = random_tensor(rng, {2 * tiny.num_patches(), tiny.patch_dim()}, 0.0, 1.0);
    check("encode_images", [&](ad::Tape& t, ad::Var x) {
        BoundWeights bw(t, tiny_w);
        return project(t, encode_images(bw, tiny, x), w_text);
    }, patches);

    const Tensor img_f = random_tensor(rng, {4, 6}), txt_f = random_tensor(rng, {4, 6});
    check("contrastive_loss", [&](ad::Tape& t, ad::Var x) {
        return contrastive_loss(ad::l2_normalize_rows(x), ad::l2_normalize_rows(t.constant(txt_f)), 5.0);
    }, img_f);

    // End-to-end marginal entropy w.r.t. the prompt on the default model.
    const ModelConfig config;
    const ModelWeights weights = init_weights(config, derive_seed(seed, 2));
    const ClassSet classes = make_class_set(8);
    const PromptState prompt = PromptState::from_template(
        weights, config, vocab::tokenize(vocab::templates().front()), classes.max_token_length());
    const Tensor views = [&] {
        Tensor f = random_tensor(rng, {16, config.proj_dim});
        ad::Tape t;
        return ad::l2_normalize_rows(t.constant(f)).value().detached();
    }();
    check("tpt_loss.prompt", [&](ad::Tape& t, ad::Var x) {
        BoundWeights bw(t, weights);
        PredictionSet pred = predict_views(prompted_class_features(bw, config, x, classes),
                                           t.constant(views), config.logit_scale);
        select_and_average(pred, 0.25);
        return marginal_entropy_loss(pred);
    }, prompt.prompt());
    return out;
}

std::size_t gradcheck_report(std::uint64_t seed, std::ostream& out, double tolerance) {
    std::size_t failures = 0;
    char buf[160];
    for (const NamedGradCheck& c : gradcheck_suite(seed)) {
        const bool ok = c.result.max_rel_error <= tolerance;
        failures += ok ? 0 : 1;
        std::snprintf(buf, sizeof buf, "%-4s %-24s max_rel_err=%.3e (index %zu: analytic %.6e numeric %.6e)\n",
                      ok ? "ok" : "FAIL", c.name.c_str(), c.result.max_rel_error, c.result.worst_index,
                      c.result.analytic, c.result.numeric);
        out << buf;
    }
    return failures;
}

} // namespace tpt
