#include "support/reference.hpp"

#include "costom/transformer.hpp"
#include "costom/util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

namespace {

using namespace costom;

std::shared_ptr<const Weights> small_base(std::uint64_t seed = 1) {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 20;
    c.max_seq = 32;
    return std::make_shared<const Weights>(init_weights(c, seed));
}

AdapterSpec spec_for(std::set<int> layers, int rank = 4) {
    AdapterSpec s;
    s.rank = rank;
    s.alpha = 8.0f;
    s.layers = std::move(layers);
    return s;
}

void randomize_b(AdaptedModel& m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 0.5f);
    for (auto& [key, a] : m.adapters()) {
        for (float& v : a.b.data) v = n(rng);
    }
}

const std::vector<int> kTokens{3, 1, 4, 1, 5, 9, 2, 6};

TEST(Adapters, InitIsNormalAAndZeroB) {
    ModelConfig c;
    c.vocab_size = 20;
    auto base = std::make_shared<const Weights>(init_weights(c, 1));
    const AdaptedModel m = attach(base, spec_for({0, 1, 2, 3}, 16), 42);
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& [key, a] : m.adapters()) {
        EXPECT_EQ(a.a.shape, (ad::Shape{site_dims(c, key.site).first, 16}));
        EXPECT_EQ(a.b.shape, (ad::Shape{16, site_dims(c, key.site).second}));
        EXPECT_FLOAT_EQ(a.scale, 0.5f);
        for (float v : a.b.data) EXPECT_EQ(v, 0.0f);
        for (float v : a.a.data) {
            sum += v;
            sq += static_cast<double>(v) * v;
            ++n;
        }
    }
    EXPECT_EQ(m.adapters().size(), 4u * 7u);
    const double mean = sum / static_cast<double>(n);
    EXPECT_NEAR(mean, 0.0, 0.002);
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n) - mean * mean), 0.02, 0.001);
}

TEST(Adapters, TrainableParametersAreExactlyTheAdapters) {
    const auto base = small_base();
    AdaptedModel m = attach(base, spec_for({0, 2}), 1);
    std::size_t expected = 0;
    for (const auto& [key, a] : m.adapters()) expected += a.a.size() + a.b.size();
    EXPECT_EQ(m.trainable_count(), expected);
    const auto params = m.trainable_parameters();
    ASSERT_EQ(params.size(), 2 * m.adapters().size());
    auto it = m.adapters().begin();
    for (std::size_t i = 0; i < params.size(); i += 2, ++it) {
        EXPECT_EQ(params[i].second, &it->second.a);
        EXPECT_EQ(params[i + 1].second, &it->second.b);
    }
}

TEST(Adapters, ZeroBLeavesTheModelUnchanged) {
    const auto base = small_base();
    const AdaptedModel m = attach(base, spec_for({0, 1, 2}), 3);
    EXPECT_EQ(run_forward(m, kTokens).logits, run_forward(*base, kTokens).logits);
}

TEST(Adapters, DeltaMatchesTheReferenceFormula) {
    const auto base = small_base(4);
    AdaptedModel m = attach(base, spec_for({0, 1}), 5);
    randomize_b(m, 6);
    const Tensor logits = run_forward(m, kTokens).logits;
    const ref::Result r = ref::forward(ref::Model::from(m), kTokens);
    for (int i = 0; i < logits.rows(); ++i) {
        for (int j = 0; j < logits.cols(); ++j) EXPECT_NEAR(logits.at(i, j), r.logits(i, j), 1e-5);
    }
    EXPECT_NE(logits, run_forward(*base, kTokens).logits);
}

TEST(Adapters, MergePreviewMatchesTheAdaptedForward) {
    const auto base = small_base(7);
    AdaptedModel m = attach(base, spec_for({1, 2}), 8);
    randomize_b(m, 9);
    const Weights merged = merge_preview(m);
    const Tensor a = run_forward(m, kTokens).logits;
    const Tensor b = run_forward(merged, kTokens).logits;
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-5);
    m.set_training(true);
    EXPECT_THROW(merge_preview(m), ContractError);
}

TEST(Adapters, DropoutOnlyActsInTraining) {
    const auto base = small_base(10);
    AdapterSpec s = spec_for({0, 1, 2});
    s.dropout = 0.5f;
    AdaptedModel m = attach(base, s, 11);
    randomize_b(m, 12);
    auto logits = [&](std::uint64_t seed) {
        ad::Tape tape;
        BoundModel bm(tape, m, seed);
        return forward(bm, {kTokens}).logits->value();
    };
    EXPECT_EQ(logits(1), logits(2));  // evaluation mode ignores the dropout stream
    m.set_training(true);
    EXPECT_EQ(logits(1), logits(1));
    EXPECT_NE(logits(1), logits(2));
}

TEST(Adapters, AttachRejectsDuplicatesAndBadSpecs) {
    const auto base = small_base();
    AdaptedModel m = attach(base, spec_for({0}), 1);
    EXPECT_THROW(m.attach(spec_for({0}), 2), ContractError);
    EXPECT_NO_THROW(m.attach(spec_for({1}), 2));
    EXPECT_THROW(attach(base, spec_for({3}), 1), ContractError);
    EXPECT_THROW(attach(base, spec_for({0}, 0), 1), ContractError);
    AdapterSpec s = spec_for({0});
    s.dropout = 1.0f;
    EXPECT_THROW(attach(base, s, 1), ContractError);
}

TEST(Adapters, SaveLoadRoundTripsAndChecksTheBase) {
    const auto base = small_base(13);
    AdaptedModel m = attach(base, spec_for({0, 2}), 14);
    randomize_b(m, 15);
    const auto dir = std::filesystem::temp_directory_path() / "costom_adapter_test";
    std::filesystem::create_directories(dir);
    save_adapters(m, dir / "a.bin");
    const AdaptedModel back = load_adapters(base, dir / "a.bin");
    EXPECT_EQ(back.adapter_digest(), m.adapter_digest());
    EXPECT_EQ(run_forward(back, kTokens).logits, run_forward(m, kTokens).logits);
    EXPECT_THROW(load_adapters(small_base(99), dir / "a.bin"), ContractError);
    std::filesystem::remove_all(dir);
}

TEST(Adapters, GradientReachesAdaptersButNotTheBase) {
    const auto base = small_base(16);
    AdaptedModel m = attach(base, spec_for({0, 1, 2}), 17);
    randomize_b(m, 18);
    ad::Tape tape;
    BoundModel bm(tape, m);
    const ad::GradientMap g = tape.backward(lm_loss(bm, kTokens));
    for (const ad::Var& v : bm.base_params()) EXPECT_FALSE(g.contains(v));
    int nonzero = 0;
    for (const ad::Var& v : bm.adapter_params()) {
        const Tensor* t = g.find(v);
        if (t == nullptr) continue;
        for (float x : t->data) nonzero += x != 0.0f;
    }
    EXPECT_GT(nonzero, 0);
}

}  // namespace
