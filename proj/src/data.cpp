#include "tpt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tpt/rng.hpp"
#include "tpt/weights_io.hpp"

namespace tpt {

namespace vocab {

const std::vector<std::string>& words() {
    static const std::vector<std::string> w = {
        "<unk>", "a",     "photo",  "of",       "picture",  "the",       "an",
        "image", "one",   "red",    "blue",     "green",    "yellow",    "horizontal",
        "vertical", "checkered", "circle", "square", "triangle", "cross", "this",
        "is",    "small", "big",    "shape",    "pattern",  "color",     "striped",
    };
    return w;
}

int token(const std::string& word) {
    const auto& w = words();
    auto it = std::find(w.begin(), w.end(), word);
    if (it == w.end()) throw ContractError("word '" + word + "' is not in the vocabulary");
    return static_cast<int>(it - w.begin());
}

TokenIds tokenize(const std::string& text) {
    std::istringstream is(text);
    TokenIds out;
    for (std::string word; is >> word;) out.push_back(token(word));
    return out;
}

std::string decode(const TokenIds& tokens) {
    std::string out;
    for (int id : tokens) {
        if (!out.empty()) out += ' ';
        out += (id >= 0 && static_cast<std::size_t>(id) < words().size()) ? words()[id] : "<unk>";
    }
    return out;
}

const std::vector<std::string>& templates() {
    static const std::vector<std::string> t = {"a photo of a", "a picture of the",
                                               "an image of one"};
    return t;
}

} // namespace vocab

namespace attributes {

const std::vector<std::string>& colors() {
    static const std::vector<std::string> v = {"red", "blue", "green", "yellow"};
    return v;
}
const std::vector<std::string>& patterns() {
    static const std::vector<std::string> v = {"horizontal", "vertical", "checkered"};
    return v;
}
const std::vector<std::string>& shapes() {
    static const std::vector<std::string> v = {"circle", "cross", "triangle", "square"};
    return v;
}

std::string name(const Attributes& a) {
    return colors().at(a.color) + " " + patterns().at(a.pattern) + " " + shapes().at(a.shape);
}

const std::vector<Attributes>& class_order() {
    static const std::vector<Attributes> order = [] {
        std::vector<Attributes> all;
        for (int c = 0; c < static_cast<int>(colors().size()); ++c)
            for (int p = 0; p < static_cast<int>(patterns().size()); ++p)
                for (int s = 0; s < static_cast<int>(shapes().size()); ++s) all.push_back({c, p, s});
        std::stable_sort(all.begin(), all.end(), [](const Attributes& x, const Attributes& y) {
            return std::max({x.color, x.pattern, x.shape}) < std::max({y.color, y.pattern, y.shape});
        });
        return all;
    }();
    return order;
}

} // namespace attributes

void DatasetSpec::validate() const {
    if (num_classes < 2 || num_classes > attributes::class_order().size()) {
        throw ContractError("num_classes must be in [2, " +
                            std::to_string(attributes::class_order().size()) + "]");
    }
    if (noise_sigma < 0.0) throw ContractError("noise sigma must be non-negative");
    if (!(value_max > value_min)) throw ContractError("empty value range");
    if (!(shape_radius > 0.0 && shape_radius <= 0.5)) throw ContractError("shape radius must be in (0, 0.5]");
}

namespace {

constexpr std::array<std::array<double, 3>, 4> kColors = {{
    {0.85, 0.2, 0.2},
    {0.2, 0.3, 0.85},
    {0.2, 0.8, 0.25},
    {0.85, 0.8, 0.2},
}};
constexpr double kBackground = 0.45;
// Keeps shift noise independent of generation noise drawn under the same seed.
constexpr std::uint64_t kShiftStream = 0x5e1f7c0ffee5ULL;
constexpr double kStripeLow = 0.4;

bool inside_shape(int shape, double y, double x, double h, double w, double radius) {
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    const double r = radius * std::min(h, w);
    const double dy = y - cy, dx = x - cx;
    switch (shape) {
    case 0: return dy * dy + dx * dx <= r * r;
    case 1: {
        const double arm = 0.3 * r;
        return (std::abs(dy) <= arm && std::abs(dx) <= r) || (std::abs(dx) <= arm && std::abs(dy) <= r);
    }
    case 2: {
        const double top = cy - r, bottom = cy + r;
        if (y < top || y > bottom) return false;
        const double half = r * (y - top) / (bottom - top);
        return std::abs(dx) <= half;
    }
    default: return std::abs(dy) <= 0.85 * r && std::abs(dx) <= 0.85 * r;
    }
}

double pattern_factor(int pattern, std::size_t y, std::size_t x, std::size_t period) {
    const std::size_t half = period / 2;
    switch (pattern) {
    case 0: return (y % period) < half ? 1.0 : kStripeLow;
    case 1: return (x % period) < half ? 1.0 : kStripeLow;
    default: return (((y / half) + (x / half)) % 2 == 0) ? 1.0 : kStripeLow;
    }
}

std::vector<Sample> make_split(const std::string& split, std::size_t count, std::size_t first_id,
                               const std::vector<Tensor>& prototypes, const DatasetSpec& spec,
                               std::uint64_t seed) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Sample s;
        s.id = first_id + i;
        s.class_id = static_cast<int>(i % prototypes.size());
        s.split = split;
        s.image = prototypes[static_cast<std::size_t>(s.class_id)];
        if (spec.noise_sigma > 0.0) {
            Rng rng(derive_seed(seed, s.id));
            std::normal_distribution<double> noise(0.0, spec.noise_sigma);
            for (double& v : s.image.values()) {
                v = std::clamp(v + noise(rng), spec.value_min, spec.value_max);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

void box_blur(Tensor& img, int radius) {
    if (radius <= 0) return;
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const Tensor src = img.detached();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                int n = 0;
                for (int dy = -radius; dy <= radius; ++dy) {
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                        if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                        acc += src[(c * H + static_cast<std::size_t>(yy)) * W + static_cast<std::size_t>(xx)];
                        ++n;
                    }
                }
                img[(c * H + y) * W + x] = acc / n;
            }
        }
    }
}

// Non-monotone tone curve on [0, 1], sampled at 5 evenly spaced knots.
double style_curve(double v) {
    static constexpr std::array<double, 5> knots = {0.15, 0.7, 0.35, 0.85, 0.6};
    const double t = std::clamp(v, 0.0, 1.0) * 4.0;
    const std::size_t i = std::min<std::size_t>(3, static_cast<std::size_t>(t));
    const double f = t - static_cast<double>(i);
    return knots[i] * (1.0 - f) + knots[i + 1] * f;
}

} // namespace

Tensor render_prototype(const Attributes& attrs, const ModelConfig& config, const DatasetSpec& spec) {
    const std::size_t C = config.channels, H = config.height, W = config.width;
    const std::size_t period = std::max<std::size_t>(2, spec.stripe_period > 0 ? spec.stripe_period : H / 6);
    Tensor img({C, H, W}, kBackground);
    const auto& rgb = kColors.at(static_cast<std::size_t>(attrs.color));
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            if (!inside_shape(attrs.shape, static_cast<double>(y), static_cast<double>(x),
                              static_cast<double>(H), static_cast<double>(W), spec.shape_radius)) {
                continue;
            }
            const double f = pattern_factor(attrs.pattern, y, x, period);
            for (std::size_t c = 0; c < C; ++c) img[(c * H + y) * W + x] = rgb[c % 3] * f;
        }
    }
    return img;
}

std::vector<const Sample*> Dataset::split(const std::string& name) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples) {
        if (s.split == name) out.push_back(&s);
    }
    return out;
}

Dataset Dataset::subset(const std::string& split_name) const {
    Dataset d;
    d.classes = classes;
    d.class_attributes = class_attributes;
    d.value_min = value_min;
    d.value_max = value_max;
    for (const auto& s : samples) {
        if (s.split == split_name) d.samples.push_back(s);
    }
    return d;
}

ClassSet make_class_set(std::size_t num_classes) {
    const auto& order = attributes::class_order();
    if (num_classes > order.size()) throw ContractError("too many classes requested");
    ClassSet set;
    for (std::size_t k = 0; k < num_classes; ++k) {
        const std::string name = attributes::name(order[k]);
        set.classes.push_back({name, vocab::tokenize(name)});
    }
    return set;
}

Dataset generate(const DatasetSpec& spec, const ModelConfig& config, std::uint64_t seed) {
    spec.validate();
    Dataset d;
    d.classes = make_class_set(spec.num_classes);
    d.value_min = spec.value_min;
    d.value_max = spec.value_max;
    std::vector<Tensor> prototypes;
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        d.class_attributes.push_back(attributes::class_order()[k]);
        Tensor p = render_prototype(d.class_attributes.back(), config, spec);
        for (double& v : p.values()) v = spec.value_min + (spec.value_max - spec.value_min) * v;
        prototypes.push_back(std::move(p));
    }
    d.samples = make_split("train", spec.train_samples, 0, prototypes, spec, seed);
    auto test = make_split("test", spec.test_samples, spec.train_samples, prototypes, spec, seed);
    d.samples.insert(d.samples.end(), std::make_move_iterator(test.begin()),
                     std::make_move_iterator(test.end()));
    return d;
}

ShiftSpec ShiftSpec::parse(const std::string& text) {
    ShiftSpec spec;
    std::stringstream ss(text);
    for (std::string part; std::getline(ss, part, '+');) {
        if (part.empty()) continue;
        const auto colon = part.find(':');
        const std::string kind = part.substr(0, colon);
        const bool has_param = colon != std::string::npos;
        const double param = has_param ? std::stod(part.substr(colon + 1)) : 0.0;
        ShiftOp op;
        if (kind == "none") {
            op.kind = ShiftOp::Kind::none;
        } else if (kind == "noise") {
            op = {ShiftOp::Kind::noise, has_param ? param : 0.3};
            if (op.param < 0.0) throw ContractError("noise sigma must be non-negative");
        } else if (kind == "invert") {
            op.kind = ShiftOp::Kind::invert;
        } else if (kind == "channel_drop") {
            op = {ShiftOp::Kind::channel_drop, has_param ? param : 0.0};
        } else if (kind == "blur") {
            op = {ShiftOp::Kind::blur, has_param ? param : 1.0};
        } else if (kind == "style") {
            op = {ShiftOp::Kind::style, has_param ? param : 1.0};
        } else {
            throw ContractError("unknown shift kind '" + kind + "'");
        }
        spec.ops.push_back(op);
    }
    return spec;
}

std::string ShiftSpec::to_string() const {
    if (ops.empty()) return "none";
    std::string out;
    for (const auto& op : ops) {
        if (!out.empty()) out += '+';
        std::ostringstream os;
        switch (op.kind) {
        case ShiftOp::Kind::none: os << "none"; break;
        case ShiftOp::Kind::noise: os << "noise:" << op.param; break;
        case ShiftOp::Kind::invert: os << "invert"; break;
        case ShiftOp::Kind::channel_drop: os << "channel_drop:" << op.param; break;
        case ShiftOp::Kind::blur: os << "blur:" << op.param; break;
        case ShiftOp::Kind::style: os << "style:" << op.param; break;
        }
        out += os.str();
    }
    return out;
}

Tensor apply_shift(const Tensor& image, const ShiftSpec& shift, std::uint64_t seed,
                   double value_min, double value_max) {
    Tensor img = image.detached();
    Rng rng(seed);
    for (const auto& op : shift.ops) {
        switch (op.kind) {
        case ShiftOp::Kind::none:
            break;
        case ShiftOp::Kind::noise: {
            std::normal_distribution<double> noise(0.0, op.param);
            for (double& v : img.values()) v = std::clamp(v + noise(rng), value_min, value_max);
            break;
        }
        case ShiftOp::Kind::invert:
            for (double& v : img.values()) v = value_max + value_min - v;
            break;
        case ShiftOp::Kind::channel_drop: {
            const std::size_t c = static_cast<std::size_t>(op.param);
            if (c >= img.dim(0)) throw ContractError("channel_drop channel out of range");
            const std::size_t plane = img.dim(1) * img.dim(2);
            std::fill_n(img.values().begin() + static_cast<std::ptrdiff_t>(c * plane), plane, value_min);
            break;
        }
        case ShiftOp::Kind::blur:
            box_blur(img, static_cast<int>(op.param));
            break;
        case ShiftOp::Kind::style:
            for (double& v : img.values()) {
                const double u = (v - value_min) / (value_max - value_min);
                const double s = (1.0 - op.param) * u + op.param * style_curve(u);
                v = value_min + s * (value_max - value_min);
            }
            break;
        }
    }
    return img;
}

Dataset apply_shift(const Dataset& dataset, const ShiftSpec& shift, std::uint64_t seed) {
    Dataset out = dataset;
    for (auto& s : out.samples) {
        s.image = apply_shift(s.image, shift, derive_seed(seed ^ kShiftStream, s.id), dataset.value_min,
                              dataset.value_max);
    }
    return out;
}

std::vector<CaptionPair> caption_pairs(const Dataset& dataset) {
    std::vector<CaptionPair> pairs;
    pairs.reserve(dataset.samples.size());
    const auto& templates = vocab::templates();
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const Sample& s = dataset.samples[i];
        TokenIds caption = vocab::tokenize(templates[i % templates.size()]);
        const auto& cls = dataset.classes.classes.at(static_cast<std::size_t>(s.class_id)).tokens;
        caption.insert(caption.end(), cls.begin(), cls.end());
        pairs.push_back({s.image, std::move(caption), s.class_id});
    }
    return pairs;
}

void save_image(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3) throw ShapeError("image must be C x H x W");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write("TPTIMG1", 7);
    for (std::size_t d : image.shape()) io::write_u32(out, static_cast<std::uint32_t>(d));
    for (double v : image.data()) io::write_f64(out, v);
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor load_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    char magic[7];
    if (!in.read(magic, 7) || std::string(magic, 7) != "TPTIMG1") {
        throw std::runtime_error(path.string() + " is not a TPTIMG1 file");
    }
    Shape shape(3);
    for (auto& d : shape) d = io::read_u32(in);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = io::read_f64(in);
    return Tensor(shape, std::move(data));
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::ofstream manifest(dir / "manifest.jsonl");
    for (const auto& s : dataset.samples) {
        const std::string rel = "images/" + std::to_string(s.id) + ".tptimg";
        save_image(dir / rel, s.image);
        nlohmann::json rec = {{"path", rel}, {"class_id", s.class_id}, {"split", s.split}};
        manifest << rec.dump() << '\n';
    }
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t k = 0; k < dataset.classes.size(); ++k) {
        const auto& c = dataset.classes.classes[k];
        const auto& a = dataset.class_attributes.at(k);
        classes.push_back({{"name", c.name},
                           {"tokens", c.tokens},
                           {"attributes", {a.color, a.pattern, a.shape}}});
    }
    nlohmann::json meta = {{"classes", classes},
                           {"value_range", {dataset.value_min, dataset.value_max}},
                           {"vocabulary", vocab::words()}};
    std::ofstream(dir / "classes.json") << meta.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
    Dataset d;
    std::ifstream meta_in(dir / "classes.json");
    if (!meta_in) throw std::runtime_error("missing classes.json in " + dir.string());
    const auto meta = nlohmann::json::parse(meta_in);
    for (const auto& c : meta.at("classes")) {
        d.classes.classes.push_back({c.at("name").get<std::string>(), c.at("tokens").get<TokenIds>()});
        const auto a = c.at("attributes");
        d.class_attributes.push_back({a[0].get<int>(), a[1].get<int>(), a[2].get<int>()});
    }
    d.value_min = meta.at("value_range")[0].get<double>();
    d.value_max = meta.at("value_range")[1].get<double>();
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("missing manifest.jsonl in " + dir.string());
    for (std::string line; std::getline(manifest, line);) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        Sample s;
        const auto rel = rec.at("path").get<std::string>();
        s.id = std::stoul(std::filesystem::path(rel).stem().string());
        s.class_id = rec.at("class_id").get<int>();
        s.split = rec.at("split").get<std::string>();
        s.image = load_image(dir / rel);
        d.samples.push_back(std::move(s));
    }
    return d;
}

} // namespace tpt
