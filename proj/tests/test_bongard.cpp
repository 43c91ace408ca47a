#include <gtest/gtest.h>

#include "tpt/bongard.hpp"
#include "tpt/data.hpp"

using namespace tpt;

namespace {

int attribute(const Attributes& a, int axis) { return axis == 0 ? a.color : axis == 1 ? a.pattern : a.shape; }

// Recovers the attributes of a noise-free image by matching prototypes.
Attributes identify(const Tensor& img, const ModelConfig& config) {
    for (const Attributes& a : attributes::class_order()) {
        if (render_prototype(a, config).same_values(img)) return a;
    }
    ADD_FAILURE() << "image matches no prototype";
    return {};
}

class BongardFixture : public ::testing::Test {
protected:
    ModelConfig config;
    ModelWeights weights = init_weights(config, 13);
};

}  // namespace

TEST_F(BongardFixture, GeneratorRespectsConcept) {
    BongardGeneratorOptions opts;
    opts.noise_sigma = 0.0;
    for (std::size_t index = 0; index < 40; ++index) {
        const BongardSample s = generate_bongard_task(config, 3, index, opts);
        EXPECT_EQ(s.rule.split, static_cast<int>(index % 4));
        if (s.rule.split < 3) {
            EXPECT_EQ(s.rule.axis, s.rule.split);
        }
        EXPECT_NE(s.rule.positive_value, s.rule.negative_value);
        ASSERT_EQ(s.positives.size(), opts.per_side);
        ASSERT_EQ(s.negatives.size(), opts.per_side);
        EXPECT_EQ(s.support_size(), 2 * opts.per_side);
        for (const Tensor& img : s.positives) EXPECT_EQ(attribute(identify(img, config), s.rule.axis), s.rule.positive_value);
        for (const Tensor& img : s.negatives) EXPECT_EQ(attribute(identify(img, config), s.rule.axis), s.rule.negative_value);
        const int qv = attribute(identify(s.query, config), s.rule.axis);
        EXPECT_EQ(qv, s.query_label == 1 ? s.rule.positive_value : s.rule.negative_value);
    }
}

TEST_F(BongardFixture, GeneratorIsDeterministicAndBalanced) {
    const BongardSample a = generate_bongard_task(config, 5, 17), b = generate_bongard_task(config, 5, 17);
    EXPECT_TRUE(a.query.same_values(b.query));
    EXPECT_EQ(a.query_label, b.query_label);
    int ones = 0;
    for (std::size_t i = 0; i < 400; ++i) ones += generate_bongard_task(config, 5, i).query_label;
    EXPECT_GT(ones, 160);
    EXPECT_LT(ones, 240);
    EXPECT_EQ(bongard_split_names(), (std::vector<std::string>{"color", "pattern", "shape", "mixed"}));
}

TEST_F(BongardFixture, GeneratorPreconditions) {
    BongardGeneratorOptions opts;
    opts.per_side = 0;
    EXPECT_THROW(generate_bongard_task(config, 1, 0, opts), ContractError);
    opts = {};
    opts.value_count = 1;
    EXPECT_THROW(generate_bongard_task(config, 1, 0, opts), ContractError);
}

TEST_F(BongardFixture, EmptySupportSideRejected) {
    BongardSample s = generate_bongard_task(config, 1, 0);
    s.negatives.clear();
    EXPECT_THROW(tpt_reason(weights, config, s, {}), ContractError);
}

TEST_F(BongardFixture, TracesHaveOneEntryPerStepPlusFinal) {
    const BongardSample s = generate_bongard_task(config, 2, 1);
    BongardConfig c;
    c.steps = 5;
    const BongardResult r = tpt_reason(weights, config, s, c);
    EXPECT_EQ(r.support_accuracy.size(), 6u);
    EXPECT_EQ(r.support_loss.size(), 5u);
    EXPECT_TRUE(r.prediction == 0 || r.prediction == 1);
    c.steps = 0;
    const BongardResult z = tpt_reason(weights, config, s, c);
    EXPECT_EQ(z.support_accuracy.size(), 1u);
    EXPECT_TRUE(z.support_loss.empty());
}

TEST_F(BongardFixture, SupportLossDecreasesOnASeparableTask) {
    const BongardSample s = generate_bongard_task(config, 9, 0);
    BongardConfig c;
    c.steps = 40;
    const BongardResult r = tpt_reason(weights, config, s, c);
    EXPECT_LT(r.support_loss.back(), r.support_loss.front());
}

TEST_F(BongardFixture, QueryNeverInfluencesTunedTensors) {
    BongardSample s = generate_bongard_task(config, 4, 2);
    BongardConfig c;
    c.steps = 8;
    const BongardResult a = tpt_reason(weights, config, s, c);
    s.query = Tensor(config.image_shape(), 0.9);
    s.query_label = 1 - s.query_label;
    const BongardResult b = tpt_reason(weights, config, s, c);
    EXPECT_TRUE(a.tuned_prompt.same_values(b.tuned_prompt));
    EXPECT_TRUE(a.tuned_cls1.same_values(b.tuned_cls1));
    EXPECT_TRUE(a.tuned_cls2.same_values(b.tuned_cls2));
    EXPECT_EQ(a.support_loss, b.support_loss);
}

TEST_F(BongardFixture, DeterministicUnderSeed) {
    const BongardSample s = generate_bongard_task(config, 6, 3);
    BongardConfig c;
    c.steps = 6;
    c.seed = 12;
    const BongardResult a = tpt_reason(weights, config, s, c), b = tpt_reason(weights, config, s, c);
    EXPECT_EQ(a.prediction, b.prediction);
    EXPECT_TRUE(a.tuned_prompt.same_values(b.tuned_prompt));
    c.seed = 13;
    EXPECT_FALSE(tpt_reason(weights, config, s, c).tuned_prompt.same_values(a.tuned_prompt));
}

TEST_F(BongardFixture, RelabelingSymmetryFlipsPrediction) {
    // Swapping the support sides and the initial label tokens mirrors the whole optimization.
    BongardConfig c;
    c.steps = 16;
    for (std::size_t index = 0; index < 12; ++index) {
        BongardSample s = generate_bongard_task(config, 8, index);
        c.seed = index;
        const BongardResult a = tpt_reason(weights, config, s, c);
        std::swap(s.positives, s.negatives);
        BongardConfig swapped = c;
        swapped.swap_label_init = true;
        const BongardResult b = tpt_reason(weights, config, s, swapped);
        EXPECT_EQ(b.prediction, 1 - a.prediction) << "task " << index;
        for (std::size_t i = 0; i < a.tuned_cls1.size(); ++i) {
            EXPECT_NEAR(b.tuned_cls1[i], a.tuned_cls2[i], 1e-9);
            EXPECT_NEAR(b.tuned_cls2[i], a.tuned_cls1[i], 1e-9);
        }
    }
}
