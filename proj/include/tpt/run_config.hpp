#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tpt/data.hpp"
#include "tpt/model.hpp"
#include "tpt/tpt.hpp"

namespace tpt {

/// Everything a run depends on. Text form is one `key=value` per line;
/// `#` starts a comment. Unknown keys are rejected.
struct RunConfig {
    std::uint64_t seed = 0;
    std::uint64_t model_seed = 0;
    std::uint64_t data_seed = 0;
    std::string weights = "weights.tptw";
    std::string data_dir = "data";
    std::string out;
    std::string template_text = "a photo of a";
    std::string shift = "none";
    std::string group = "prompt";

    ModelConfig model{};
    DatasetSpec dataset{};
    TPTConfig tpt{};
    PretrainOptions pretrain{};
    /// Chance that a pretraining image is replaced by a random resized crop.
    double pretrain_crop_probability = 0.0;
    double pretrain_crop_scale_min = 0.5;

    std::size_t fewshot_shots = 16;
    std::size_t fewshot_epochs = 50;
    double fewshot_lr = 0.005;

    std::size_t bongard_tasks = 100;
    std::size_t bongard_prompt_length = 4;
    std::size_t bongard_steps = 64;

    /// Sets one key from its text value. Throws ContractError on an unknown
    /// key or a malformed value.
    void set(const std::string& key, const std::string& value);
    /// key -> value for every field, in a fixed order.
    std::vector<std::pair<std::string, std::string>> entries() const;

    void merge_file(const std::filesystem::path& path);
    void merge_text(const std::string& text);

    /// `# key=value` lines, preceded by the code version.
    std::string header() const;
};

std::string code_version();

/// Parses a results-file header back into a config.
RunConfig config_from_header(const std::string& text);

} // namespace tpt
