#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tpt/autodiff.hpp"
#include "tpt/tensor.hpp"

namespace tpt {

using TokenIds = std::vector<int>;

/// Shape of the miniature dual encoder.
struct ModelConfig {
    std::size_t embed_dim = 32;
    std::size_t text_layers = 2;
    std::size_t image_layers = 2;
    std::size_t heads = 2;
    std::size_t vocab_size = 64;
    std::size_t max_text_len = 16;
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t patch_size = 8;
    /// Multiplies cosine similarities before the softmax. Kept fixed.
    double logit_scale = 20.0;
    std::size_t proj_dim = 32;
    std::size_t mlp_ratio = 4;

    void validate() const;
    std::size_t num_patches() const { return (height / patch_size) * (width / patch_size); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    Shape image_shape() const { return {channels, height, width}; }
};

/// Named parameter tensors of both encoders.
struct ModelWeights {
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
    std::size_t parameter_count() const;
    bool all_finite() const;
    bool same_values(const ModelWeights& other) const;

    /// Marks every tensor whose name starts with `prefix` trainable (or not).
    void set_trainable(const std::string& prefix, bool on);
    void zero_grad();
    std::vector<Tensor*> trainable();
};

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

/// Checks names and shapes against `config`; throws ShapeError on mismatch.
void check_weights(const ModelWeights& weights, const ModelConfig& config);

struct ClassEntry {
    std::string name;
    TokenIds tokens;
};

/// The label set: each class is a name plus the token ids appended after the
/// prompt.
struct ClassSet {
    std::vector<ClassEntry> classes;

    std::size_t size() const { return classes.size(); }
    std::size_t max_token_length() const;
    /// Throws ContractError when the set is empty or a token id is out of range.
    void validate(std::size_t vocab_size) const;
};

/// Weights registered on a tape. Frozen weights are constants; weights
/// bound through the mutable overload become leaves whose gradients
/// accumulate when the tensor requires grad.
class BoundWeights {
public:
    BoundWeights(ad::Tape& tape, const ModelWeights& weights);
    BoundWeights(ad::Tape& tape, ModelWeights& weights);

    ad::Var operator[](const std::string& name) const;
    ad::Tape& tape() const { return *tape_; }
    const ModelWeights& weights() const { return *weights_; }

private:
    ad::Tape* tape_;
    const ModelWeights* weights_;
    std::map<std::string, ad::Var> vars_;
};

/// Token embedding rows for `tokens`, copied out of the table.
Tensor embed_tokens(const ModelWeights& weights, const ModelConfig& config,
                    std::span<const int> tokens);

/// Encodes `blocks` sequences of `seq_len` embedded tokens stacked as
/// [blocks*seq_len x D]. Causal attention, feature read at the last position,
/// L2-normalized. Returns [blocks x proj_dim].
ad::Var encode_text(const BoundWeights& w, const ModelConfig& config, ad::Var sequences,
                    std::size_t seq_len);

/// Single-sequence convenience wrapper: [T x D] -> [proj_dim].
Tensor encode_text(const ModelWeights& weights, const ModelConfig& config,
                   const Tensor& embedded_sequence);

/// Cuts images into flattened patches: [images*num_patches x patch_dim].
Tensor patchify(const ModelConfig& config, std::span<const Tensor> images);

/// Encodes patchified images. Returns L2-normalized [images x proj_dim].
ad::Var encode_images(const BoundWeights& w, const ModelConfig& config, ad::Var patches);

/// Frozen image branch, no gradient bookkeeping: [images x proj_dim].
Tensor encode_images(const ModelWeights& weights, const ModelConfig& config,
                     std::span<const Tensor> images);
Tensor encode_image(const ModelWeights& weights, const ModelConfig& config, const Tensor& image);

/// softmax(logit_scale * image_features * text_features^T), rows per image.
ad::Var class_probabilities(ad::Var text_features, ad::Var image_features, double logit_scale);
Tensor class_probabilities(const Tensor& text_features, const Tensor& image_features,
                           double logit_scale);

/// Text features for every class with a fixed (non-learnable) prompt of token ids.
Tensor class_text_features(const ModelWeights& weights, const ModelConfig& config,
                           const TokenIds& prompt_tokens, const ClassSet& classes);

struct CaptionPair {
    Tensor image;
    TokenIds caption;
    int class_id = 0;
};

struct PretrainOptions {
    std::size_t epochs = 40;
    double lr = 2e-3;
    std::size_t batch = 32;
    double weight_decay = 0.0;
    /// Linear warmup over this many updates, then cosine decay to zero.
    std::size_t warmup_steps = 50;
    std::uint64_t seed = 0;
    /// Optional per-image augmentation applied to every training image each
    /// time it is drawn. The seed is unique per (update, position in batch).
    std::function<Tensor(const Tensor& image, std::uint64_t seed)> image_transform;
    std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct PretrainResult {
    ModelWeights weights;
    std::vector<double> epoch_losses;
};

/// Symmetric InfoNCE over an in-batch similarity matrix.
ad::Var contrastive_loss(ad::Var image_features, ad::Var text_features, double logit_scale);

/// Contrastive pretraining with AdamW. Batches of size 1 are rejected.
PretrainResult pretrain_contrastive(const ModelWeights& init, const ModelConfig& config,
                                    std::span<const CaptionPair> pairs,
                                    const PretrainOptions& options);

/// Mean contrastive loss of the fixed weights over the batches of `pairs`.
double contrastive_loss_value(const ModelWeights& weights, const ModelConfig& config,
                              std::span<const CaptionPair> pairs, std::size_t batch);

/// In-batch image-to-caption retrieval: the top caption counts as correct
/// when it describes the image's class.
double retrieval_top1(const ModelWeights& weights, const ModelConfig& config,
                      std::span<const CaptionPair> pairs, std::size_t batch);

} // namespace tpt
