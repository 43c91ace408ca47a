#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tpt/model.hpp"
#include "tpt/tensor.hpp"

namespace tpt {

/// Fixed word list shared by captions, prompts and class names.
namespace vocab {

const std::vector<std::string>& words();
int token(const std::string& word);
TokenIds tokenize(const std::string& text);
std::string decode(const TokenIds& tokens);

/// Four-token caption templates cycled during pretraining; the first is the
/// default hand-crafted test prompt.
const std::vector<std::string>& templates();

} // namespace vocab

/// Visual attributes of a procedural image; indices into the attribute lists.
struct Attributes {
    int color = 0;
    int pattern = 0;
    int shape = 0;

    bool operator==(const Attributes&) const = default;
};

namespace attributes {
const std::vector<std::string>& colors();
const std::vector<std::string>& patterns();
const std::vector<std::string>& shapes();
std::string name(const Attributes& a);
/// Attribute combinations in class order: every combination whose indices lie
/// in {0,1} first, then {0,1,2}, and so on.
const std::vector<Attributes>& class_order();
} // namespace attributes

struct DatasetSpec {
    std::size_t num_classes = 8;
    std::size_t train_samples = 512;
    std::size_t test_samples = 500;
    double noise_sigma = 0.08;
    double value_min = 0.0;
    double value_max = 1.0;
    /// Shape radius as a fraction of the image side.
    double shape_radius = 0.36;
    /// Stripe/checker period in pixels; 0 picks height / 6.
    std::size_t stripe_period = 0;

    void validate() const;
};

/// Renders the noise-free image for `attrs` in [0, 1]. Only the prototype
/// fields of `spec` (shape radius, stripe period) are read.
Tensor render_prototype(const Attributes& attrs, const ModelConfig& config, const DatasetSpec& spec = {});

struct Sample {
    std::size_t id = 0;
    int class_id = 0;
    std::string split;
    Tensor image;
};

struct Dataset {
    ClassSet classes;
    std::vector<Attributes> class_attributes;
    std::vector<Sample> samples;
    double value_min = 0.0;
    double value_max = 1.0;

    std::vector<const Sample*> split(const std::string& name) const;
    Dataset subset(const std::string& split_name) const;
};

/// Class names and token ids for the first `num_classes` attribute combinations.
ClassSet make_class_set(std::size_t num_classes);

/// Samples are prototype(class) + N(0, sigma^2), clamped to the value range.
/// Sample i of a split belongs to class i mod K.
Dataset generate(const DatasetSpec& spec, const ModelConfig& config, std::uint64_t seed);

/// One label-preserving corruption.
struct ShiftOp {
    enum class Kind { none, noise, invert, channel_drop, blur, style };
    Kind kind = Kind::none;
    double param = 0.0;
};

/// Composition of ShiftOps, applied left to right. Text form:
/// `none`, `noise:0.3`, `invert`, `channel_drop:1`, `blur:1`, `style`,
/// joined with '+'.
struct ShiftSpec {
    std::vector<ShiftOp> ops;

    static ShiftSpec parse(const std::string& text);
    std::string to_string() const;
};

Tensor apply_shift(const Tensor& image, const ShiftSpec& shift, std::uint64_t seed,
                   double value_min = 0.0, double value_max = 1.0);
/// Shifts every sample; sample seeds derive from (seed, sample id) on a stream
/// separate from generation noise.
Dataset apply_shift(const Dataset& dataset, const ShiftSpec& shift, std::uint64_t seed);

/// Caption = template (cycled over the three templates) + class tokens.
std::vector<CaptionPair> caption_pairs(const Dataset& dataset);

/// Image file: "TPTIMG1", u32 C, H, W, raw little-endian f64 values.
void save_image(const std::filesystem::path& path, const Tensor& image);
Tensor load_image(const std::filesystem::path& path);

/// Writes images under `dir`, a JSON-lines manifest (one record per image:
/// path, class_id, split) and classes.json with names and token ids.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

} // namespace tpt
