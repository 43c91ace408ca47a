#include "pretrained.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "tpt/harness.hpp"
#include "tpt/weights_io.hpp"

namespace tpt::testing {

namespace fs = std::filesystem;

fs::path fixture_dir() {
    if (const char* env = std::getenv("TPT_FIXTURE_DIR"); env && *env) return env;
    return TPT_DEFAULT_FIXTURE_DIR;
}

namespace {

Pretrained load_or_train() {
    Pretrained p;
    const fs::path dir = fixture_dir();
    const fs::path weights = dir / "pretrained.tptw", losses = dir / "pretrain_losses.txt";
    if (fs::exists(weights) && fs::exists(losses)) {
        p.weights = load_weights(weights);
        std::ifstream in(losses);
        for (double v; in >> v;) p.epoch_losses.push_back(v);
        if (p.epoch_losses.size() == p.config.pretrain.epochs) return p;
    }
    std::fprintf(stderr, "pretraining the shared test model into %s\n", dir.c_str());
    const PretrainResult res = pretrain_from_config(p.config);
    p.weights = res.weights;
    p.epoch_losses = res.epoch_losses;
    fs::create_directories(dir);
    // Write to temporaries first so a concurrent reader never sees half a file.
    save_weights(weights.string() + ".tmp", p.weights);
    {
        std::ofstream out(losses.string() + ".tmp");
        char buf[32];
        for (double v : p.epoch_losses) {
            std::snprintf(buf, sizeof buf, "%.17g\n", v);
            out << buf;
        }
    }
    fs::rename(weights.string() + ".tmp", weights);
    fs::rename(losses.string() + ".tmp", losses);
    return p;
}

} // namespace

const Pretrained& pretrained() {
    static const Pretrained p = load_or_train();
    return p;
}

} // namespace tpt::testing
