#include "tpt/prompt.hpp"

#include <map>

#include "tpt/rng.hpp"

namespace tpt {

PromptState PromptState::from_template(const ModelWeights& weights, const ModelConfig& config,
                                       const TokenIds& template_tokens,
                                       std::size_t max_class_tokens) {
    if (template_tokens.empty()) throw ContractError("prompt template is empty");
    if (template_tokens.size() + max_class_tokens > config.max_text_len) {
        throw ContractError("prompt of " + std::to_string(template_tokens.size()) +
                            " tokens leaves no room for class names within max_text_len " +
                            std::to_string(config.max_text_len));
    }
    PromptState s;
    s.prompt_ = embed_tokens(weights, config, template_tokens);
    s.prompt_.set_requires_grad(true);
    s.snapshot();
    return s;
}

PromptState PromptState::gaussian(std::size_t length, std::size_t dim, double sigma,
                                  std::uint64_t seed, bool with_cls) {
    if (!(sigma > 0.0)) throw ContractError("prompt init sigma must be positive");
    if (length == 0 || dim == 0) throw ContractError("prompt must have at least one token");
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, sigma);
    PromptState s;
    s.prompt_ = Tensor({length, dim});
    for (double& v : s.prompt_.values()) v = dist(rng);
    s.prompt_.set_requires_grad(true);
    if (with_cls) {
        std::array<Tensor, 2> cls{Tensor({1, dim}), Tensor({1, dim})};
        for (auto& t : cls) {
            for (double& v : t.values()) v = dist(rng);
            t.set_requires_grad(true);
        }
        s.cls_ = std::move(cls);
    }
    s.snapshot();
    return s;
}

Tensor& PromptState::cls(int index) {
    if (!cls_ || (index != 1 && index != 2)) throw ContractError("no label token " + std::to_string(index));
    return (*cls_)[static_cast<std::size_t>(index - 1)];
}

const Tensor& PromptState::cls(int index) const {
    if (!cls_ || (index != 1 && index != 2)) throw ContractError("no label token " + std::to_string(index));
    return (*cls_)[static_cast<std::size_t>(index - 1)];
}

std::vector<Tensor*> PromptState::learnable() {
    std::vector<Tensor*> out{&prompt_};
    if (cls_) {
        out.push_back(&(*cls_)[0]);
        out.push_back(&(*cls_)[1]);
    }
    return out;
}

void PromptState::zero_grad() {
    for (Tensor* t : learnable()) t->zero_grad();
}

void PromptState::snapshot() {
    prompt_init_ = prompt_.detached();
    if (cls_) cls_init_ = std::array<Tensor, 2>{(*cls_)[0].detached(), (*cls_)[1].detached()};
}

void PromptState::reset() {
    std::copy(prompt_init_.data().begin(), prompt_init_.data().end(), prompt_.data().begin());
    if (cls_) {
        for (std::size_t i = 0; i < 2; ++i) {
            std::copy((*cls_init_)[i].data().begin(), (*cls_init_)[i].data().end(),
                      (*cls_)[i].data().begin());
        }
    }
    zero_grad();
    optimizer_.reset();
}

void PromptState::rebase() {
    snapshot();
    zero_grad();
    optimizer_.reset();
}

bool PromptState::same_values(const PromptState& other) const {
    if (!prompt_.same_values(other.prompt_) || has_cls() != other.has_cls()) return false;
    if (!cls_) return true;
    return (*cls_)[0].same_values((*other.cls_)[0]) && (*cls_)[1].same_values((*other.cls_)[1]);
}

ad::Var assemble(ad::Var prompt, const TokenIds& class_tokens, const ModelWeights& weights,
                 const ModelConfig& config) {
    const std::size_t total = prompt.rows() + class_tokens.size();
    if (total > config.max_text_len) {
        throw ContractError("assembled text of " + std::to_string(total) +
                            " tokens exceeds max_text_len " + std::to_string(config.max_text_len));
    }
    ad::Var tokens = prompt.tape->constant(embed_tokens(weights, config, class_tokens));
    const ad::Var parts[] = {prompt, tokens};
    return ad::concat_rows(parts);
}

ad::Var assemble(ad::Var prompt, ad::Var cls, const ModelConfig& config) {
    const std::size_t total = prompt.rows() + cls.rows();
    if (total > config.max_text_len) {
        throw ContractError("assembled text of " + std::to_string(total) +
                            " tokens exceeds max_text_len " + std::to_string(config.max_text_len));
    }
    const ad::Var parts[] = {prompt, cls};
    return ad::concat_rows(parts);
}

ad::Var prompted_class_features(const BoundWeights& w, const ModelConfig& config, ad::Var prompt,
                                const ClassSet& classes) {
    std::map<std::size_t, std::vector<std::size_t>> by_length;
    for (std::size_t k = 0; k < classes.size(); ++k) {
        by_length[classes.classes[k].tokens.size()].push_back(k);
    }
    std::vector<ad::Var> groups;
    std::vector<std::size_t> order;
    for (const auto& [len, members] : by_length) {
        std::vector<ad::Var> seqs;
        for (std::size_t k : members) {
            seqs.push_back(assemble(prompt, classes.classes[k].tokens, w.weights(), config));
        }
        groups.push_back(encode_text(w, config, ad::concat_rows(seqs), prompt.rows() + len));
        order.insert(order.end(), members.begin(), members.end());
    }
    ad::Var stacked = groups.size() == 1 ? groups.front() : ad::concat_rows(groups);
    bool identity = true;
    for (std::size_t i = 0; i < order.size(); ++i) identity = identity && order[i] == i;
    if (identity) return stacked;
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) inverse[order[pos]] = pos;
    return ad::select_rows(stacked, inverse);
}

} // namespace tpt
