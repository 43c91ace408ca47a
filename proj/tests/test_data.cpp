#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "tpt/data.hpp"

using namespace tpt;
namespace fs = std::filesystem;

namespace {

DatasetSpec small_spec() {
    DatasetSpec s;
    s.train_samples = 32;
    s.test_samples = 16;
    return s;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("tpt_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Solves A x = b in place for symmetric positive definite A (Cholesky).
void cholesky_solve(std::vector<double>& a, std::vector<double>& b, std::size_t n, std::size_t rhs) {
    for (std::size_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        d = std::sqrt(d);
        a[j * n + j] = d;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / d;
        }
    }
    for (std::size_t r = 0; r < rhs; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = b[i * rhs + r];
            for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k * rhs + r];
            b[i * rhs + r] = s / a[i * n + i];
        }
        for (std::size_t i = n; i-- > 0;) {
            double s = b[i * rhs + r];
            for (std::size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k * rhs + r];
            b[i * rhs + r] = s / a[i * n + i];
        }
    }
}

}  // namespace

TEST(DatasetSpec, Validation) {
    DatasetSpec s;
    EXPECT_NO_THROW(s.validate());
    s.num_classes = 1;
    EXPECT_THROW(s.validate(), ContractError);
    s = {};
    s.noise_sigma = -0.1;
    EXPECT_THROW(s.validate(), ContractError);
    s = {};
    s.shape_radius = 0.0;
    EXPECT_THROW(s.validate(), ContractError);
}

TEST(Vocabulary, TokenizeDecodeRoundTrip) {
    const TokenIds t = vocab::tokenize("a photo of a red vertical cross");
    EXPECT_EQ(vocab::decode(t), "a photo of a red vertical cross");
    EXPECT_THROW(vocab::tokenize("a photo of a dog"), ContractError);
    ModelConfig config;
    EXPECT_LE(vocab::words().size(), config.vocab_size);
    ASSERT_EQ(vocab::templates().size(), 3u);
    for (const auto& tmpl : vocab::templates()) EXPECT_EQ(vocab::tokenize(tmpl).size(), 4u);
}

TEST(ClassSet, DefaultClassesAreDistinctAndValid) {
    const ClassSet set = make_class_set(8);
    ASSERT_EQ(set.size(), 8u);
    EXPECT_NO_THROW(set.validate(64));
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(set.classes[i].tokens.size(), 3u);
        for (std::size_t j = i + 1; j < 8; ++j) EXPECT_NE(set.classes[i].name, set.classes[j].name);
    }
    EXPECT_THROW(ClassSet{}.validate(64), ContractError);
    ClassSet bad;
    bad.classes.push_back({"x", {64}});
    EXPECT_THROW(bad.validate(64), ContractError);
}

TEST(Generate, NoiseFreeClassesAreIdentical) {
    ModelConfig config;
    DatasetSpec spec = small_spec();
    spec.noise_sigma = 0.0;
    const Dataset d = generate(spec, config, 3);
    for (const Sample& s : d.samples) {
        EXPECT_TRUE(s.image.same_values(d.samples[static_cast<std::size_t>(s.class_id)].image));
    }
}

TEST(Generate, SeededAndLabelled) {
    ModelConfig config;
    const Dataset a = generate(small_spec(), config, 4), b = generate(small_spec(), config, 4);
    const Dataset c = generate(small_spec(), config, 5);
    ASSERT_EQ(a.samples.size(), 48u);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_TRUE(a.samples[i].image.same_values(b.samples[i].image));
        EXPECT_FALSE(a.samples[i].image.same_values(c.samples[i].image));
        EXPECT_EQ(a.samples[i].id, i);
    }
    const auto train = a.split("train"), test = a.split("test");
    ASSERT_EQ(train.size(), 32u);
    ASSERT_EQ(test.size(), 16u);
    for (std::size_t i = 0; i < train.size(); ++i) EXPECT_EQ(train[i]->class_id, static_cast<int>(i % 8));
    for (std::size_t i = 0; i < test.size(); ++i) EXPECT_EQ(test[i]->class_id, static_cast<int>(i % 8));
    for (const Sample& s : a.samples) {
        for (double v : s.image.values()) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
    }
}

TEST(Generate, LinearProbeSeparatesDefaultClasses) {
    ModelConfig config;
    DatasetSpec spec;
    spec.train_samples = 256;
    spec.test_samples = 400;
    const Dataset d = generate(spec, config, 8);
    const auto train = d.split("train"), test = d.split("test");
    const std::size_t n = train.size(), K = 8, P = train[0]->image.size();
    // Ridge regression to one-hot targets in the dual: W = X^T (X X^T + lambda I)^-1 Y.
    std::vector<double> gram(n * n), y(n * K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = 1.0;  // bias feature
            for (std::size_t p = 0; p < P; ++p) s += train[i]->image[p] * train[j]->image[p];
            gram[i * n + j] = gram[j * n + i] = s;
        }
        gram[i * n + i] += 1e-3;
        y[i * K + static_cast<std::size_t>(train[i]->class_id)] = 1.0;
    }
    cholesky_solve(gram, y, n, K);
    std::size_t correct = 0;
    for (const Sample* s : test) {
        std::vector<double> score(K, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double k = 1.0;
            for (std::size_t p = 0; p < P; ++p) k += s->image[p] * train[i]->image[p];
            for (std::size_t c = 0; c < K; ++c) score[c] += k * y[i * K + c];
        }
        correct += static_cast<int>(std::max_element(score.begin(), score.end()) - score.begin()) == s->class_id;
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(test.size()), 0.99);
}

TEST(Shift, ParseAndPrint) {
    EXPECT_TRUE(ShiftSpec::parse("none").ops.empty() || ShiftSpec::parse("none").ops[0].kind == ShiftOp::Kind::none);
    const ShiftSpec s = ShiftSpec::parse("noise:0.3+invert+blur:1");
    ASSERT_EQ(s.ops.size(), 3u);
    EXPECT_EQ(s.ops[0].kind, ShiftOp::Kind::noise);
    EXPECT_EQ(s.ops[0].param, 0.3);
    EXPECT_EQ(s.ops[1].kind, ShiftOp::Kind::invert);
    EXPECT_EQ(s.ops[2].param, 1.0);
    const ShiftSpec back = ShiftSpec::parse(s.to_string());
    ASSERT_EQ(back.ops.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back.ops[i].kind, s.ops[i].kind);
        EXPECT_EQ(back.ops[i].param, s.ops[i].param);
    }
    EXPECT_THROW(ShiftSpec::parse("fog"), ContractError);
    EXPECT_THROW(ShiftSpec::parse("noise:-1"), ContractError);
}

TEST(Shift, NoneIsIdentityAndInvertIsInvolution) {
    ModelConfig config;
    const Dataset d = generate(small_spec(), config, 1);
    const Dataset same = apply_shift(d, ShiftSpec::parse("none"), 9);
    const Dataset twice = apply_shift(apply_shift(d, ShiftSpec::parse("invert"), 9), ShiftSpec::parse("invert"), 9);
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        EXPECT_TRUE(same.samples[i].image.same_values(d.samples[i].image));
        for (std::size_t p = 0; p < d.samples[i].image.size(); ++p)
            ASSERT_NEAR(twice.samples[i].image[p], d.samples[i].image[p], 1e-15);
    }
}

TEST(Shift, LabelPreservingDeterministicAndInRange) {
    ModelConfig config;
    const Dataset d = generate(small_spec(), config, 1);
    for (const char* text : {"noise:0.3", "channel_drop:1", "blur:1", "style", "noise:0.2+blur:1+invert"}) {
        const ShiftSpec shift = ShiftSpec::parse(text);
        const Dataset a = apply_shift(d, shift, 4), b = apply_shift(d, shift, 4);
        ASSERT_EQ(a.samples.size(), d.samples.size());
        std::size_t changed = 0;
        for (std::size_t i = 0; i < d.samples.size(); ++i) {
            EXPECT_EQ(a.samples[i].class_id, d.samples[i].class_id) << text;
            EXPECT_EQ(a.samples[i].split, d.samples[i].split) << text;
            EXPECT_TRUE(a.samples[i].image.same_values(b.samples[i].image)) << text;
            changed += a.samples[i].image.same_values(d.samples[i].image) ? 0 : 1;
            for (double v : a.samples[i].image.values()) {
                ASSERT_GE(v, 0.0) << text;
                ASSERT_LE(v, 1.0) << text;
            }
        }
        EXPECT_EQ(changed, d.samples.size()) << text;
    }
}

TEST(Shift, NoiseIsIndependentOfGenerationNoise) {
    // Shifting with the generation seed must not reproduce the generation noise.
    ModelConfig config;
    DatasetSpec spec = small_spec();
    spec.noise_sigma = 0.1;
    const Dataset d = generate(spec, config, 0);
    DatasetSpec clean = spec;
    clean.noise_sigma = 0.0;
    const Dataset shifted = apply_shift(generate(clean, config, 0), ShiftSpec::parse("noise:0.1"), 0);
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        EXPECT_FALSE(shifted.samples[i].image.same_values(d.samples[i].image));
    }
}

TEST(Shift, ChannelDropZeroesOnePlane) {
    Tensor img({3, 4, 4}, 0.6);
    const Tensor out = apply_shift(img, ShiftSpec::parse("channel_drop:2"), 1);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_EQ(out[i], 0.6);
        EXPECT_EQ(out[32 + i], 0.0);
    }
    EXPECT_THROW(apply_shift(img, ShiftSpec::parse("channel_drop:3"), 1), ContractError);
    const Tensor blurred = apply_shift(img, ShiftSpec::parse("blur:2"), 1);
    for (double v : blurred.values()) EXPECT_NEAR(v, 0.6, 1e-15);
}

TEST(Captions, DecodeToClassNames) {
    ModelConfig config;
    const Dataset d = generate(small_spec(), config, 2);
    const auto pairs = caption_pairs(d);
    ASSERT_EQ(pairs.size(), d.samples.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const std::string text = vocab::decode(pairs[i].caption);
        const std::string& name = d.classes.classes[static_cast<std::size_t>(d.samples[i].class_id)].name;
        EXPECT_EQ(text, vocab::templates()[i % 3] + " " + name);
        EXPECT_EQ(pairs[i].class_id, d.samples[i].class_id);
        EXPECT_TRUE(pairs[i].image.same_values(d.samples[i].image));
    }
}

TEST(ImageFile, RoundTripIsBitExact) {
    const fs::path dir = scratch_dir("img");
    Tensor img({3, 5, 7});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::sin(static_cast<double>(i) * 0.37) / 3.0;
    save_image(dir / "x.tptimg", img);
    const Tensor back = load_image(dir / "x.tptimg");
    EXPECT_EQ(back.shape(), img.shape());
    EXPECT_TRUE(back.same_values(img));
    EXPECT_EQ(fs::file_size(dir / "x.tptimg"), 7u + 3 * 4 + img.size() * 8);
    std::ofstream(dir / "bad.tptimg") << "NOTANIMAGE";
    EXPECT_THROW(load_image(dir / "bad.tptimg"), std::runtime_error);
    fs::remove_all(dir);
}

TEST(DatasetFiles, WriteReadRoundTrip) {
    const fs::path dir = scratch_dir("ds");
    ModelConfig config;
    const Dataset d = generate(small_spec(), config, 6);
    write_dataset(dir, d);
    EXPECT_TRUE(fs::exists(dir / "manifest.jsonl"));
    EXPECT_TRUE(fs::exists(dir / "classes.json"));
    const Dataset back = read_dataset(dir);
    ASSERT_EQ(back.samples.size(), d.samples.size());
    ASSERT_EQ(back.classes.size(), d.classes.size());
    for (std::size_t k = 0; k < d.classes.size(); ++k) {
        EXPECT_EQ(back.classes.classes[k].name, d.classes.classes[k].name);
        EXPECT_EQ(back.classes.classes[k].tokens, d.classes.classes[k].tokens);
    }
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].id, d.samples[i].id);
        EXPECT_EQ(back.samples[i].class_id, d.samples[i].class_id);
        EXPECT_EQ(back.samples[i].split, d.samples[i].split);
        EXPECT_TRUE(back.samples[i].image.same_values(d.samples[i].image));
    }
    fs::remove_all(dir);
}
