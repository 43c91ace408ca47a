#include "tpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tpt/adamw.hpp"
#include "tpt/rng.hpp"

namespace tpt {

namespace {

using ad::Var;

std::string layer_name(const char* tower, std::size_t layer, const char* part) {
    return std::string(tower) + ".l" + std::to_string(layer) + "." + part;
}

struct ParamSpec {
    std::string name;
    Shape shape;
    enum class Init { normal, ones, zeros } init;
    double stddev;
};

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
    const std::size_t D = c.embed_dim, H = c.embed_dim * c.mlp_ratio;
    const double lin = 1.0 / std::sqrt(static_cast<double>(D));
    const double lin_h = 1.0 / std::sqrt(static_cast<double>(H));
    std::vector<ParamSpec> specs;
    auto block = [&](const char* tower, std::size_t layers) {
        for (std::size_t l = 0; l < layers; ++l) {
            specs.push_back({layer_name(tower, l, "ln1.g"), {1, D}, ParamSpec::Init::ones, 0});
            specs.push_back({layer_name(tower, l, "ln1.b"), {1, D}, ParamSpec::Init::zeros, 0});
            for (const char* m : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
                specs.push_back({layer_name(tower, l, m), {D, D}, ParamSpec::Init::normal, lin});
            }
            for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) {
                specs.push_back({layer_name(tower, l, b), {1, D}, ParamSpec::Init::zeros, 0});
            }
            specs.push_back({layer_name(tower, l, "ln2.g"), {1, D}, ParamSpec::Init::ones, 0});
            specs.push_back({layer_name(tower, l, "ln2.b"), {1, D}, ParamSpec::Init::zeros, 0});
            specs.push_back({layer_name(tower, l, "mlp.w1"), {D, H}, ParamSpec::Init::normal, lin});
            specs.push_back({layer_name(tower, l, "mlp.b1"), {1, H}, ParamSpec::Init::zeros, 0});
            specs.push_back({layer_name(tower, l, "mlp.w2"), {H, D}, ParamSpec::Init::normal, lin_h});
            specs.push_back({layer_name(tower, l, "mlp.b2"), {1, D}, ParamSpec::Init::zeros, 0});
        }
    };
    specs.push_back({"text.token_embedding", {c.vocab_size, D}, ParamSpec::Init::normal, 0.02});
    specs.push_back({"text.pos", {c.max_text_len, D}, ParamSpec::Init::normal, 0.01});
    block("text", c.text_layers);
    specs.push_back({"text.ln_final.g", {1, D}, ParamSpec::Init::ones, 0});
    specs.push_back({"text.ln_final.b", {1, D}, ParamSpec::Init::zeros, 0});
    specs.push_back({"text.proj", {D, c.proj_dim}, ParamSpec::Init::normal, lin});

    specs.push_back({"image.patch.w", {c.patch_dim(), D}, ParamSpec::Init::normal,
                     1.0 / std::sqrt(static_cast<double>(c.patch_dim()))});
    specs.push_back({"image.patch.b", {1, D}, ParamSpec::Init::zeros, 0});
    specs.push_back({"image.pos", {c.num_patches(), D}, ParamSpec::Init::normal, 0.01});
    specs.push_back({"image.ln_pre.g", {1, D}, ParamSpec::Init::ones, 0});
    specs.push_back({"image.ln_pre.b", {1, D}, ParamSpec::Init::zeros, 0});
    block("image", c.image_layers);
    specs.push_back({"image.ln_post.g", {1, D}, ParamSpec::Init::ones, 0});
    specs.push_back({"image.ln_post.b", {1, D}, ParamSpec::Init::zeros, 0});
    specs.push_back({"image.proj", {D, c.proj_dim}, ParamSpec::Init::normal, lin});
    return specs;
}

Var linear(const BoundWeights& w, Var x, const std::string& weight, const std::string& bias) {
    return ad::add_tiled(ad::matmul(x, w[weight]), w[bias]);
}

Var transformer_layer(const BoundWeights& w, const ModelConfig& c, const char* tower,
                      std::size_t l, Var x, std::size_t seq_len, bool causal) {
    auto n = [&](const char* part) { return layer_name(tower, l, part); };
    Var h = ad::layer_norm(x, w[n("ln1.g")], w[n("ln1.b")]);
    Var q = linear(w, h, n("attn.wq"), n("attn.bq"));
    Var k = linear(w, h, n("attn.wk"), n("attn.bk"));
    Var v = linear(w, h, n("attn.wv"), n("attn.bv"));
    Var a = ad::attention(q, k, v, c.heads, seq_len, causal);
    x = ad::add(x, linear(w, a, n("attn.wo"), n("attn.bo")));
    h = ad::layer_norm(x, w[n("ln2.g")], w[n("ln2.b")]);
    h = ad::gelu(linear(w, h, n("mlp.w1"), n("mlp.b1")));
    return ad::add(x, linear(w, h, n("mlp.w2"), n("mlp.b2")));
}

} // namespace

void ModelConfig::validate() const {
    if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0) {
        throw ContractError("image height/width must be divisible by patch_size");
    }
    if (heads == 0 || embed_dim % heads != 0) {
        throw ContractError("embed_dim must be divisible by heads");
    }
    if (!(logit_scale > 0.0)) throw ContractError("logit_scale must be positive");
    if (vocab_size == 0 || max_text_len == 0 || proj_dim == 0) {
        throw ContractError("vocab_size, max_text_len and proj_dim must be positive");
    }
}

Tensor& ModelWeights::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown weight '" + name + "'");
    return it->second;
}

const Tensor& ModelWeights::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown weight '" + name + "'");
    return it->second;
}

std::size_t ModelWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
}

bool ModelWeights::all_finite() const {
    return std::all_of(tensors.begin(), tensors.end(),
                       [](const auto& kv) { return kv.second.all_finite(); });
}

bool ModelWeights::same_values(const ModelWeights& other) const {
    if (tensors.size() != other.tensors.size()) return false;
    for (const auto& [name, t] : tensors) {
        auto it = other.tensors.find(name);
        if (it == other.tensors.end() || !t.same_values(it->second)) return false;
    }
    return true;
}

void ModelWeights::set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, t] : tensors) {
        if (name.rfind(prefix, 0) == 0) t.set_requires_grad(on);
    }
}

void ModelWeights::zero_grad() {
    for (auto& [_, t] : tensors) t.zero_grad();
}

std::vector<Tensor*> ModelWeights::trainable() {
    std::vector<Tensor*> out;
    for (auto& [_, t] : tensors) {
        if (t.requires_grad()) out.push_back(&t);
    }
    return out;
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelWeights w;
    Rng rng(seed);
    for (const auto& spec : parameter_specs(config)) {
        Tensor t(spec.shape);
        switch (spec.init) {
        case ParamSpec::Init::normal:
            for (double& v : t.values()) v = normal(rng, 0.0, spec.stddev);
            break;
        case ParamSpec::Init::ones:
            std::fill(t.values().begin(), t.values().end(), 1.0);
            break;
        case ParamSpec::Init::zeros:
            break;
        }
        w.tensors.emplace(spec.name, std::move(t));
    }
    return w;
}

void check_weights(const ModelWeights& weights, const ModelConfig& config) {
    const auto specs = parameter_specs(config);
    if (specs.size() != weights.tensors.size()) {
        throw ShapeError("weights hold " + std::to_string(weights.tensors.size()) +
                         " tensors, config expects " + std::to_string(specs.size()));
    }
    for (const auto& spec : specs) {
        if (!weights.contains(spec.name)) throw ShapeError("missing weight '" + spec.name + "'");
        const Tensor& t = weights.at(spec.name);
        if (t.shape() != spec.shape) {
            throw ShapeError("weight '" + spec.name + "' has shape " + shape_to_string(t.shape()) +
                             ", expected " + shape_to_string(spec.shape));
        }
    }
}

std::size_t ClassSet::max_token_length() const {
    std::size_t n = 0;
    for (const auto& c : classes) n = std::max(n, c.tokens.size());
    return n;
}

void ClassSet::validate(std::size_t vocab_size) const {
    if (classes.empty()) throw ContractError("class set is empty");
    for (const auto& c : classes) {
        if (c.tokens.empty()) throw ContractError("class '" + c.name + "' has no tokens");
        for (int id : c.tokens) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
                throw ContractError("class '" + c.name + "' token id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(vocab_size));
            }
        }
    }
}

BoundWeights::BoundWeights(ad::Tape& tape, const ModelWeights& weights)
    : tape_(&tape), weights_(&weights) {}

BoundWeights::BoundWeights(ad::Tape& tape, ModelWeights& weights)
    : tape_(&tape), weights_(&weights) {
    for (auto& [name, t] : weights.tensors) {
        if (t.requires_grad()) vars_.emplace(name, tape.leaf(t));
    }
}

Var BoundWeights::operator[](const std::string& name) const {
    if (auto it = vars_.find(name); it != vars_.end()) return it->second;
    return tape_->constant(weights_->at(name));
}

Tensor embed_tokens(const ModelWeights& weights, const ModelConfig& config,
                    std::span<const int> tokens) {
    const Tensor& table = weights.at("text.token_embedding");
    const std::size_t D = config.embed_dim;
    Tensor out({tokens.size(), D});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config.vocab_size) {
            throw ContractError("token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                                std::to_string(config.vocab_size));
        }
        std::copy_n(table.data().data() + static_cast<std::size_t>(tokens[i]) * D, D,
                    out.data().data() + i * D);
    }
    return out;
}

Var encode_text(const BoundWeights& w, const ModelConfig& config, Var sequences,
                std::size_t seq_len) {
    if (seq_len == 0 || seq_len > config.max_text_len) {
        throw ContractError("text length " + std::to_string(seq_len) + " exceeds max_text_len " +
                            std::to_string(config.max_text_len));
    }
    if (sequences.cols() != config.embed_dim || sequences.rows() % seq_len != 0) {
        throw ShapeError("encode_text: input " + shape_to_string(sequences.shape()) +
                         " is not a stack of [" + std::to_string(seq_len) + "x" +
                         std::to_string(config.embed_dim) + "] sequences");
    }
    const std::size_t blocks = sequences.rows() / seq_len;
    Var x = ad::add_tiled(sequences, ad::slice_rows(w["text.pos"], 0, seq_len));
    for (std::size_t l = 0; l < config.text_layers; ++l) {
        x = transformer_layer(w, config, "text", l, x, seq_len, true);
    }
    std::vector<std::size_t> last(blocks);
    for (std::size_t b = 0; b < blocks; ++b) last[b] = b * seq_len + seq_len - 1;
    x = ad::select_rows(x, last);
    x = ad::layer_norm(x, w["text.ln_final.g"], w["text.ln_final.b"]);
    return ad::l2_normalize_rows(ad::matmul(x, w["text.proj"]));
}

Tensor encode_text(const ModelWeights& weights, const ModelConfig& config,
                   const Tensor& embedded_sequence) {
    ad::Tape tape;
    BoundWeights w(tape, weights);
    Var out = encode_text(w, config, tape.constant(embedded_sequence), embedded_sequence.rows());
    return out.value().reshaped({config.proj_dim});
}

Tensor patchify(const ModelConfig& config, std::span<const Tensor> images) {
    const std::size_t C = config.channels, H = config.height, W = config.width;
    const std::size_t ps = config.patch_size, P = config.num_patches(), pd = config.patch_dim();
    const std::size_t per_row = W / ps;
    Tensor out({images.size() * P, pd});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const Tensor& img = images[n];
        if (img.shape() != config.image_shape()) {
            throw ShapeError("image shape " + shape_to_string(img.shape()) + " differs from " +
                             shape_to_string(config.image_shape()));
        }
        for (std::size_t p = 0; p < P; ++p) {
            const std::size_t py = (p / per_row) * ps, px = (p % per_row) * ps;
            double* row = out.data().data() + (n * P + p) * pd;
            std::size_t o = 0;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < ps; ++y)
                    for (std::size_t x = 0; x < ps; ++x)
                        row[o++] = img[(c * H + py + y) * W + px + x];
        }
    }
    return out;
}

Var encode_images(const BoundWeights& w, const ModelConfig& config, Var patches) {
    const std::size_t P = config.num_patches();
    Var x = linear(w, patches, "image.patch.w", "image.patch.b");
    x = ad::add_tiled(x, w["image.pos"]);
    x = ad::layer_norm(x, w["image.ln_pre.g"], w["image.ln_pre.b"]);
    for (std::size_t l = 0; l < config.image_layers; ++l) {
        x = transformer_layer(w, config, "image", l, x, P, false);
    }
    x = ad::layer_norm(x, w["image.ln_post.g"], w["image.ln_post.b"]);
    x = ad::block_mean_rows(x, P);
    return ad::l2_normalize_rows(ad::matmul(x, w["image.proj"]));
}

Tensor encode_images(const ModelWeights& weights, const ModelConfig& config,
                     std::span<const Tensor> images) {
    ad::Tape tape;
    BoundWeights w(tape, weights);
    Var out = encode_images(w, config, tape.constant(patchify(config, images)));
    return out.value().detached();
}

Tensor encode_image(const ModelWeights& weights, const ModelConfig& config, const Tensor& image) {
    return encode_images(weights, config, std::span(&image, 1)).reshaped({config.proj_dim});
}

Var class_probabilities(Var text_features, Var image_features, double logit_scale) {
    Var sims = ad::matmul(image_features, ad::transpose(text_features));
    return ad::softmax_rows(ad::scale(sims, logit_scale));
}

Tensor class_probabilities(const Tensor& text_features, const Tensor& image_features,
                           double logit_scale) {
    ad::Tape tape;
    Var p = class_probabilities(tape.constant(text_features), tape.constant(image_features),
                                logit_scale);
    Tensor out = p.value().detached();
    if (image_features.rank() == 1) return out.reshaped({text_features.rows()});
    return out;
}

Tensor class_text_features(const ModelWeights& weights, const ModelConfig& config,
                           const TokenIds& prompt_tokens, const ClassSet& classes) {
    ad::Tape tape;
    BoundWeights w(tape, weights);
    std::vector<Var> feats;
    for (const auto& c : classes.classes) {
        TokenIds seq = prompt_tokens;
        seq.insert(seq.end(), c.tokens.begin(), c.tokens.end());
        feats.push_back(encode_text(w, config, tape.constant(embed_tokens(weights, config, seq)),
                                    seq.size()));
    }
    return ad::concat_rows(feats).value().detached();
}

Var contrastive_loss(Var image_features, Var text_features, double logit_scale) {
    const std::size_t B = image_features.rows();
    if (B < 2 || text_features.rows() != B) {
        throw ContractError("contrastive loss needs at least 2 matched pairs, got " +
                            std::to_string(B));
    }
    ad::Tape& tape = *image_features.tape;
    Var logits = ad::scale(ad::matmul(image_features, ad::transpose(text_features)), logit_scale);
    Var eye = tape.constant(Tensor::identity(B));
    Var i2t = ad::sum(ad::mul(ad::log(ad::softmax_rows(logits)), eye));
    Var t2i = ad::sum(ad::mul(ad::log(ad::softmax_rows(ad::transpose(logits))), eye));
    return ad::scale(ad::add(i2t, t2i), -0.5 / static_cast<double>(B));
}

namespace {

// Encodes a batch of captions, grouping equal lengths into one pass, and
// returns features in input order.
Var encode_captions(const BoundWeights& w, const ModelConfig& config,
                    std::span<const CaptionPair* const> batch) {
    ad::Tape& tape = w.tape();
    const Tensor& table_ref = w.weights().at("text.token_embedding");
    const bool table_trainable = table_ref.requires_grad();
    std::map<std::size_t, std::vector<std::size_t>> by_length;
    for (std::size_t i = 0; i < batch.size(); ++i) by_length[batch[i]->caption.size()].push_back(i);

    std::vector<Var> groups;
    std::vector<std::size_t> order;
    for (const auto& [len, members] : by_length) {
        Var seqs;
        if (table_trainable) {
            std::vector<std::size_t> rows;
            for (std::size_t i : members)
                for (int id : batch[i]->caption) rows.push_back(static_cast<std::size_t>(id));
            seqs = ad::select_rows(w["text.token_embedding"], rows);
        } else {
            std::vector<int> ids;
            for (std::size_t i : members)
                ids.insert(ids.end(), batch[i]->caption.begin(), batch[i]->caption.end());
            seqs = tape.constant(embed_tokens(w.weights(), config, ids));
        }
        groups.push_back(encode_text(w, config, seqs, len));
        order.insert(order.end(), members.begin(), members.end());
    }
    Var stacked = ad::concat_rows(groups);
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) inverse[order[pos]] = pos;
    return ad::select_rows(stacked, inverse);
}

std::vector<std::vector<const CaptionPair*>> make_batches(std::span<const CaptionPair> pairs,
                                                          std::size_t batch,
                                                          const std::vector<std::size_t>& order) {
    std::vector<std::vector<const CaptionPair*>> out;
    for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t end = std::min(order.size(), start + batch);
        if (end - start < 2) break;  // a single leftover pair has no negatives
        std::vector<const CaptionPair*> b;
        for (std::size_t i = start; i < end; ++i) b.push_back(&pairs[order[i]]);
        out.push_back(std::move(b));
    }
    return out;
}

Tensor batch_patches(const ModelConfig& config, const std::vector<const CaptionPair*>& batch) {
    std::vector<Tensor> imgs;
    imgs.reserve(batch.size());
    for (const auto* p : batch) imgs.push_back(p->image);
    return patchify(config, imgs);
}

Tensor augmented_patches(const ModelConfig& config, const std::vector<const CaptionPair*>& batch,
                         const PretrainOptions& options, std::size_t step) {
    if (!options.image_transform) return batch_patches(config, batch);
    std::vector<Tensor> imgs;
    imgs.reserve(batch.size());
    const std::uint64_t step_seed = derive_seed(options.seed ^ 0xa11c0de5ULL, step);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        imgs.push_back(options.image_transform(batch[i]->image, derive_seed(step_seed, i)));
    }
    return patchify(config, imgs);
}

} // namespace

PretrainResult pretrain_contrastive(const ModelWeights& init, const ModelConfig& config,
                                    std::span<const CaptionPair> pairs,
                                    const PretrainOptions& options) {
    if (options.batch < 2) throw ContractError("contrastive pretraining needs batch size >= 2");
    if (pairs.size() < 2) throw ContractError("contrastive pretraining needs at least 2 pairs");
    check_weights(init, config);

    PretrainResult result;
    result.weights = init;
    ModelWeights& w = result.weights;
    w.set_trainable("", true);
    std::vector<Tensor*> params = w.trainable();
    AdamWState state;
    AdamWOptions opt{options.lr, 0.9, 0.999, 1e-8, options.weight_decay};
    const std::size_t per_epoch = (pairs.size() + options.batch - 1) / options.batch;
    const double total_steps = static_cast<double>(std::max<std::size_t>(1, per_epoch * options.epochs));
    std::size_t step = 0;

    Rng rng(options.seed);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t count = 0;
        for (const auto& batch : make_batches(pairs, options.batch, order)) {
            ad::Tape tape;
            BoundWeights bw(tape, w);
            Var img = encode_images(bw, config, tape.constant(augmented_patches(config, batch, options, step)));
            Var txt = encode_captions(bw, config, batch);
            Var loss = contrastive_loss(img, txt, config.logit_scale);
            w.zero_grad();
            tape.backward(loss);
            const double warm = options.warmup_steps == 0
                                    ? 1.0
                                    : std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(options.warmup_steps));
            opt.lr = options.lr * warm * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
            adamw_step(params, state, opt);
            ++step;
            total += loss.value()[0];
            ++count;
        }
        const double mean = count ? total / static_cast<double>(count) : 0.0;
        result.epoch_losses.push_back(mean);
        if (options.on_epoch) options.on_epoch(epoch, mean);
    }
    w.set_trainable("", false);
    return result;
}

double contrastive_loss_value(const ModelWeights& weights, const ModelConfig& config,
                              std::span<const CaptionPair> pairs, std::size_t batch) {
    if (batch < 2) throw ContractError("contrastive loss needs batch size >= 2");
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& b : make_batches(pairs, batch, order)) {
        ad::Tape tape;
        BoundWeights bw(tape, weights);
        Var img = encode_images(bw, config, tape.constant(batch_patches(config, b)));
        Var txt = encode_captions(bw, config, b);
        total += contrastive_loss(img, txt, config.logit_scale).value()[0];
        ++count;
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

double retrieval_top1(const ModelWeights& weights, const ModelConfig& config,
                      std::span<const CaptionPair> pairs, std::size_t batch) {
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t correct = 0, total = 0;
    for (const auto& b : make_batches(pairs, batch, order)) {
        ad::Tape tape;
        BoundWeights bw(tape, weights);
        const Tensor img = encode_images(bw, config, tape.constant(batch_patches(config, b))).value();
        const Tensor txt = encode_captions(bw, config, b).value();
        for (std::size_t i = 0; i < b.size(); ++i) {
            std::size_t best = 0;
            double best_sim = -2.0;
            for (std::size_t j = 0; j < b.size(); ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < config.proj_dim; ++d) s += img.at(i, d) * txt.at(j, d);
                if (s > best_sim) {
                    best_sim = s;
                    best = j;
                }
            }
            correct += b[best]->class_id == b[i]->class_id ? 1 : 0;
            ++total;
        }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

} // namespace tpt
