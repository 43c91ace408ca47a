#include "tpt/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace tpt {

std::string code_version() { return std::string("tpt ") + TPT_VERSION; }

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T value{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw ContractError("config key '" + key + "': cannot parse '" + text + "'");
    }
    return value;
}

struct Field {
    const char* key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number(const char* key, T RunConfig::*member) {
    return {key,
            [key, member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>(key, v); },
            [member](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>) return fmt(c.*member);
                else return std::to_string(c.*member);
            }};
}

template <typename S, typename T>
Field nested(const char* key, S RunConfig::*outer, T S::*member) {
    return {key,
            [key, outer, member](RunConfig& c, const std::string& v) {
                (c.*outer).*member = parse_number<T>(key, v);
            },
            [outer, member](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>) return fmt((c.*outer).*member);
                else return std::to_string((c.*outer).*member);
            }};
}

Field text(const char* key, std::string RunConfig::*member) {
    return {key, [member](RunConfig& c, const std::string& v) { c.*member = v; },
            [member](const RunConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back(number("seed", &RunConfig::seed));
        f.push_back(number("model_seed", &RunConfig::model_seed));
        f.push_back(number("data_seed", &RunConfig::data_seed));
        f.push_back(text("weights", &RunConfig::weights));
        f.push_back(text("data_dir", &RunConfig::data_dir));
        f.push_back(text("out", &RunConfig::out));
        f.push_back(text("template", &RunConfig::template_text));
        f.push_back(text("shift", &RunConfig::shift));
        f.push_back(text("group", &RunConfig::group));

        f.push_back(nested("model.embed_dim", &RunConfig::model, &ModelConfig::embed_dim));
        f.push_back(nested("model.text_layers", &RunConfig::model, &ModelConfig::text_layers));
        f.push_back(nested("model.image_layers", &RunConfig::model, &ModelConfig::image_layers));
        f.push_back(nested("model.heads", &RunConfig::model, &ModelConfig::heads));
        f.push_back(nested("model.vocab_size", &RunConfig::model, &ModelConfig::vocab_size));
        f.push_back(nested("model.max_text_len", &RunConfig::model, &ModelConfig::max_text_len));
        f.push_back(nested("model.channels", &RunConfig::model, &ModelConfig::channels));
        f.push_back(nested("model.height", &RunConfig::model, &ModelConfig::height));
        f.push_back(nested("model.width", &RunConfig::model, &ModelConfig::width));
        f.push_back(nested("model.patch_size", &RunConfig::model, &ModelConfig::patch_size));
        f.push_back(nested("model.logit_scale", &RunConfig::model, &ModelConfig::logit_scale));
        f.push_back(nested("model.proj_dim", &RunConfig::model, &ModelConfig::proj_dim));
        f.push_back(nested("model.mlp_ratio", &RunConfig::model, &ModelConfig::mlp_ratio));

        f.push_back(nested("data.num_classes", &RunConfig::dataset, &DatasetSpec::num_classes));
        f.push_back(nested("data.train_samples", &RunConfig::dataset, &DatasetSpec::train_samples));
        f.push_back(nested("data.test_samples", &RunConfig::dataset, &DatasetSpec::test_samples));
        f.push_back(nested("data.noise_sigma", &RunConfig::dataset, &DatasetSpec::noise_sigma));
        f.push_back(nested("data.shape_radius", &RunConfig::dataset, &DatasetSpec::shape_radius));
        f.push_back(nested("data.stripe_period", &RunConfig::dataset, &DatasetSpec::stripe_period));

        f.push_back(nested("tpt.views", &RunConfig::tpt, &TPTConfig::views));
        f.push_back(nested("tpt.rho", &RunConfig::tpt, &TPTConfig::rho));
        f.push_back(nested("tpt.steps", &RunConfig::tpt, &TPTConfig::steps));
        f.push_back({"tpt.lr", [](RunConfig& c, const std::string& v) { c.tpt.adamw.lr = parse_number<double>("tpt.lr", v); },
                     [](const RunConfig& c) { return fmt(c.tpt.adamw.lr); }});
        f.push_back({"tpt.weight_decay",
                     [](RunConfig& c, const std::string& v) {
                         c.tpt.adamw.weight_decay = parse_number<double>("tpt.weight_decay", v);
                     },
                     [](const RunConfig& c) { return fmt(c.tpt.adamw.weight_decay); }});
        f.push_back({"tpt.aug",
                     [](RunConfig& c, const std::string& v) { c.tpt.policy.kind = AugmentPolicy::parse_kind(v); },
                     [](const RunConfig& c) { return c.tpt.policy.kind_name(); }});
        f.push_back({"tpt.crop_scale_min",
                     [](RunConfig& c, const std::string& v) {
                         c.tpt.policy.scale_min = parse_number<double>("tpt.crop_scale_min", v);
                     },
                     [](const RunConfig& c) { return fmt(c.tpt.policy.scale_min); }});

        f.push_back(nested("pretrain.epochs", &RunConfig::pretrain, &PretrainOptions::epochs));
        f.push_back(nested("pretrain.lr", &RunConfig::pretrain, &PretrainOptions::lr));
        f.push_back(nested("pretrain.batch", &RunConfig::pretrain, &PretrainOptions::batch));
        f.push_back(nested("pretrain.weight_decay", &RunConfig::pretrain, &PretrainOptions::weight_decay));
        f.push_back(nested("pretrain.warmup_steps", &RunConfig::pretrain, &PretrainOptions::warmup_steps));
        f.push_back(number("pretrain.crop_probability", &RunConfig::pretrain_crop_probability));
        f.push_back(number("pretrain.crop_scale_min", &RunConfig::pretrain_crop_scale_min));

        f.push_back(number("fewshot.shots", &RunConfig::fewshot_shots));
        f.push_back(number("fewshot.epochs", &RunConfig::fewshot_epochs));
        f.push_back(number("fewshot.lr", &RunConfig::fewshot_lr));

        f.push_back(number("bongard.tasks", &RunConfig::bongard_tasks));
        f.push_back(number("bongard.prompt_length", &RunConfig::bongard_prompt_length));
        f.push_back(number("bongard.steps", &RunConfig::bongard_steps));
        return f;
    }();
    return table;
}

} // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    for (const Field& f : fields()) {
        if (key == f.key) {
            f.set(*this, trim(value));
            return;
        }
    }
    throw ContractError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const Field& f : fields()) out.emplace_back(f.key, f.get(*this));
    return out;
}

void RunConfig::merge_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ContractError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str());
}

std::string RunConfig::header() const {
    std::string out = "# version=" + code_version() + "\n";
    for (const auto& [k, v] : entries()) out += "# " + k + "=" + v + "\n";
    return out;
}

RunConfig config_from_header(const std::string& text) {
    RunConfig config;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("# ", 0) != 0) break;
        const std::string body = line.substr(2);
        const auto eq = body.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = body.substr(0, eq);
        if (key == "version") continue;
        config.set(key, body.substr(eq + 1));
    }
    return config;
}

} // namespace tpt
