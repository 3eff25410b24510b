#include "patchfm/cpm.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace patchfm;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.d_model = 64;
    c.heads = 2;
    c.d_head = 32;
    c.layers = 3;
    c.patch_size = 4;
    c.context_length = 64;
    return c;
}

PatchGrid random_grid(std::size_t V, std::size_t N, std::size_t P, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    PatchGrid g;
    g.variates = V;
    g.patches = N;
    g.patch_size = P;
    g.values.resize(V * N * P);
    g.mask.assign(V * N * P, 0);
    for (std::size_t v = 0; v < V; ++v)
        for (std::size_t t = 0; t < N * P; ++t)
            g.values[v * N * P + t] = std::asinh(std::sin(0.4 * double(t) + double(v)) + 0.3 * nd(rng));
    return g;
}

// Independent implementation of the span scan, used as a Monte Carlo oracle.
double oracle_masked_fraction(std::size_t N, std::size_t c_max, double p_max, std::size_t draws, std::uint64_t seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    double total = 0;
    for (std::size_t d = 0; d < draws; ++d) {
        const double p = u(rng) * p_max;
        std::size_t pos = 0, masked = 0;
        while (pos < N) {
            if (u(rng) < p) {
                const std::size_t len = 1 + std::size_t(u(rng) * double(c_max)) % c_max;
                const std::size_t take = std::min(len, N - pos);
                masked += take;
                pos += take;
            } else {
                pos += 1;
            }
        }
        total += double(masked) / double(N);
    }
    return total / double(draws);
}

}  // namespace

TEST(SampleMask, ZeroProbabilityNeverMasks) {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_mask(128, 16, 0.0, rng).masked_count(), 0u);
}

TEST(SampleMask, UnitSpans) {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 1000; ++i)
        for (auto len : sample_mask(64, 1, 0.9, rng).span_lengths()) EXPECT_EQ(len, 1u);
}

TEST(SampleMask, PlanInvariants) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 2000; ++i) {
        const auto plan = sample_mask(40, 16, 0.4, rng);
        EXPECT_GE(plan.sampled_p, 0.0);
        EXPECT_LE(plan.sampled_p, 0.4);
        std::vector<std::uint8_t> cover(40, 0);
        std::size_t prev_end = 0;
        for (const auto& s : plan.spans) {
            EXPECT_GE(s.length, 1u);
            EXPECT_LE(s.length, 16u);
            EXPECT_GE(s.start, prev_end);
            EXPECT_LE(s.start + s.length, 40u);
            for (std::size_t j = s.start; j < s.start + s.length; ++j) cover[j] = 1;
            prev_end = s.start + s.length;
        }
        EXPECT_EQ(cover, plan.masked);
    }
}

TEST(SampleMask, MaskedFractionMatchesMonteCarloOracle) {
    std::mt19937_64 rng(4);
    const std::size_t draws = 100000;
    double total = 0;
    for (std::size_t d = 0; d < draws; ++d) total += double(sample_mask(128, 16, 0.4, rng).masked_count()) / 128.0;
    const double ours = total / double(draws);
    const double oracle = oracle_masked_fraction(128, 16, 0.4, draws, 99);
    EXPECT_NEAR(ours, oracle, 0.01) << ours << " vs " << oracle;
}

TEST(SampleMask, Reproducible) {
    std::mt19937_64 a(5), b(5);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_mask(128, 16, 0.4, a), sample_mask(128, 16, 0.4, b));
}

TEST(SampleMask, BadArguments) {
    std::mt19937_64 rng(6);
    EXPECT_THROW(sample_mask(0, 16, 0.4, rng), std::invalid_argument);
    EXPECT_THROW(sample_mask(8, 0, 0.4, rng), std::invalid_argument);
    EXPECT_THROW(sample_mask(8, 16, 1.5, rng), std::invalid_argument);
}

TEST(ApplyMask, EmptyAndFullPlans) {
    const auto g = random_grid(2, 6, 4, 7);
    const auto same = apply_mask(g, empty_plan(6));
    EXPECT_EQ(same.values, g.values);
    EXPECT_EQ(same.mask, g.mask);
    MaskPlan full = empty_plan(6);
    full.masked.assign(6, 1);
    const auto hidden = apply_mask(g, full);
    for (auto m : hidden.mask) EXPECT_EQ(m, 1);
    for (auto x : hidden.values) EXPECT_EQ(x, 0.0);
    EXPECT_THROW(apply_mask(g, empty_plan(5)), std::invalid_argument);
}

TEST(ApplyMask, HiddenValuesDoNotReachTheModel) {
    Model<double> m(tiny(), 8);
    auto g = random_grid(2, 8, 4, 9);
    MaskPlan plan = empty_plan(8);
    plan.masked[2] = plan.masked[3] = plan.masked[6] = 1;
    auto run = [&](const PatchGrid& grid) {
        const auto masked = apply_mask(grid, plan);
        auto tb = tokens_from_grid<double>(masked, 0, 8, nullptr);
        tb.missing.assign(tb.rows(), 0);
        Graph<double> gr;
        return gr.value(m.forward(gr, tb).quantiles);
    };
    const auto a = run(g);
    for (std::size_t v = 0; v < 2; ++v)
        for (std::size_t k = 0; k < 4; ++k) g.values[g.index(v, 3, k)] += 17.0;
    EXPECT_EQ(a, run(g));
}

TEST(SinglePass, OneForwardForAnyK) {
    Model<float> m(tiny(), 10);
    const auto ctx = random_grid(2, 6, 4, 11);
    for (std::size_t K : {1, 3, 10}) {
        const auto r = single_pass_forecast(m, ctx, K);
        EXPECT_EQ(r.forward_passes, 1u);
        EXPECT_EQ(r.forecast.horizon, K * 4);
        for (double x : r.forecast.values) EXPECT_TRUE(std::isfinite(x));
    }
}

TEST(SinglePass, CapacityErrorPointsToBlockMode) {
    Model<float> m(tiny(), 10);
    const auto ctx = random_grid(1, 10, 4, 12);
    try {
        single_pass_forecast(m, ctx, 7);
        FAIL() << "expected length_error";
    } catch (const std::length_error& e) {
        EXPECT_NE(std::string(e.what()).find("block"), std::string::npos);
    }
}

TEST(SinglePass, ContextOutputsUnchangedByMaskTokens) {
    Model<double> m(tiny(), 13);
    const auto ctx = random_grid(2, 6, 4, 14);
    auto short_tb = tokens_from_grid<double>(ctx, 0, 6);
    Graph<double> g0;
    const auto a = g0.value(m.forward(g0, short_tb).quantiles);
    auto work = detail::extend_with_mask(ctx, 5);
    std::vector<std::uint8_t> miss(2 * 11, 0);
    auto long_tb = tokens_from_grid<double>(work, 0, 11, &miss);
    Graph<double> g1;
    const auto b = g1.value(m.forward(g1, long_tb).quantiles);
    // Row counts differ, so the matrix kernels may round differently.
    for (std::size_t v = 0; v < 2; ++v)
        for (std::size_t n = 0; n < 6; ++n)
            for (std::size_t c = 0; c < a.cols(); ++c)
                EXPECT_NEAR(a.at(short_tb.row(0, v, n), c), b.at(long_tb.row(0, v, n), c), 1e-12);
}

TEST(BlockDecode, SingleRoundEqualsSinglePass) {
    Model<float> m(tiny(), 15);
    const auto ctx = random_grid(3, 6, 4, 16);
    for (std::size_t K : {1, 4}) {
        const auto s = single_pass_forecast(m, ctx, K);
        for (bool cache : {true, false}) {
            const auto b = block_decode(m, ctx, K, {K, cache});
            EXPECT_EQ(b.forward_passes, 1u);
            EXPECT_EQ(b.forecast.values, s.forecast.values);
        }
    }
    const auto s1 = single_pass_forecast(m, ctx, 1);
    EXPECT_EQ(block_decode(m, ctx, 1, {1, true}).forecast.values, s1.forecast.values);
}

TEST(BlockDecode, PassCount) {
    Model<float> m(tiny(), 17);
    const auto ctx = random_grid(1, 4, 4, 18);
    for (std::size_t K : {1, 5, 8, 12})
        for (std::size_t B = 1; B <= K; ++B)
            for (bool cache : {true, false})
                EXPECT_EQ(block_decode(m, ctx, K, {B, cache}).forward_passes, (K + B - 1) / B) << K << " " << B;
}

TEST(BlockDecode, CacheMatchesRecompute) {
    Model<float> m(tiny(), 19);
    const auto ctx = random_grid(2, 5, 4, 20);
    for (std::size_t B : {1, 2, 3}) {
        const auto on = block_decode(m, ctx, 9, {B, true});
        const auto off = block_decode(m, ctx, 9, {B, false});
        double worst = 0;
        for (std::size_t i = 0; i < on.forecast.values.size(); ++i)
            worst = std::max(worst, std::abs(on.forecast.values[i] - off.forecast.values[i]));
        EXPECT_LE(worst, 1e-4) << "B=" << B;
    }
}

TEST(BlockDecode, SlidesBeyondCapacity) {
    Model<float> m(tiny(), 21);
    const auto ctx = random_grid(1, 12, 4, 22);
    const auto r = block_decode(m, ctx, 20, {2, true});
    EXPECT_EQ(r.forward_passes, 10u);
    EXPECT_EQ(r.forecast.horizon, 80u);
    for (double x : r.forecast.values) EXPECT_TRUE(std::isfinite(x));
    EXPECT_THROW(block_decode(m, ctx, 20, {5, true}), std::length_error);
    EXPECT_THROW(block_decode(m, ctx, 4, {5, true}), std::invalid_argument);
}

TEST(BlockDecode, RepeatableAcrossSessions) {
    Model<float> m(tiny(), 23);
    const auto ctx = random_grid(2, 5, 4, 24);
    EXPECT_EQ(block_decode(m, ctx, 6, {2, true}).forecast.values, block_decode(m, ctx, 6, {2, true}).forecast.values);
}

TEST(KvCacheTest, CachedKeysEqualRecomputed) {
    const auto c = tiny();
    Model<double> m(c, 25);
    const auto ctx = random_grid(2, 8, 4, 26);
    KvCache<double> cache(1, c.layers, 2, c.d_model);
    auto first = tokens_from_grid<double>(ctx, 0, 5);
    Graph<double> g0;
    auto out0 = m.forward(g0, first);
    cache.append(g0, out0, first, 5);
    auto rest = tokens_from_grid<double>(ctx, 5, 8);
    Graph<double> g1;
    const auto cached = g1.value(m.forward(g1, rest, &cache).quantiles);
    auto all = tokens_from_grid<double>(ctx, 0, 8);
    Graph<double> g2;
    auto full = m.forward(g2, all);
    for (std::size_t l = 0; l < c.layers; ++l) {
        if (c.is_variate_layer(l)) continue;
        const auto keys = cache.keys(l);
        const auto& ref = g2.value(full.kv[l].k);
        for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t j = 0; j < 5; ++j)
                for (std::size_t d = 0; d < c.d_model; ++d)
                    EXPECT_NEAR(keys.at(s * 5 + j, d), ref.at(s * 8 + j, d), 1e-12);
    }
    const auto& fq = g2.value(full.quantiles);
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t k = 0; k < fq.cols(); ++k)
                EXPECT_NEAR(cached.at(s * 3 + j, k), fq.at(s * 8 + 5 + j, k), 1e-10);
}

TEST(KvCacheTest, GrowthSessionAndClear) {
    const auto c = tiny();
    Model<double> m(c, 27);
    const auto ctx = random_grid(1, 9, 4, 28);
    KvCache<double> cache(7, c.layers, 1, c.d_model);
    EXPECT_NO_THROW(cache.require_session(7));
    EXPECT_THROW(cache.require_session(8), std::logic_error);
    std::vector<std::size_t> sizes;
    for (std::size_t n = 0; n < 9; n += 3) {
        auto tb = tokens_from_grid<double>(ctx, n, n + 3);
        Graph<double> g;
        auto out = m.forward(g, tb, &cache);
        cache.append(g, out, tb, 3);
        sizes.push_back(cache.entries());
    }
    EXPECT_EQ(sizes[1], 2 * sizes[0]);
    EXPECT_EQ(sizes[2], 3 * sizes[0]);
    EXPECT_EQ(cache.length(), 9u);
    // Two K and V rows of d_model per time layer per patch.
    EXPECT_EQ(sizes[0], 3 * 2 * c.d_model * (c.layers - 1));
    cache.clear();
    EXPECT_EQ(cache.length(), 0u);
    EXPECT_EQ(cache.entries(), 0u);
    auto tb = tokens_from_grid<double>(ctx, 0, 3);
    Graph<double> g1, g2;
    const auto a = g1.value(m.forward(g1, tb, &cache).quantiles);
    const auto b = g2.value(m.forward(g2, tb).quantiles);
    EXPECT_EQ(a, b);
}

TEST(KvCacheTest, PrefixChangeInvalidates) {
    const auto c = tiny();
    Model<double> m(c, 29);
    auto ctx = random_grid(1, 4, 4, 30);
    KvCache<double> cache(1, c.layers, 1, c.d_model);
    auto tb = tokens_from_grid<double>(ctx, 0, 4);
    Graph<double> g;
    auto out = m.forward(g, tb);
    cache.append(g, out, tb, 4);
    EXPECT_TRUE(cache.validate_prefix(tb.features));
    ctx.values[5] += 1;
    EXPECT_FALSE(cache.validate_prefix(tokens_from_grid<double>(ctx, 0, 4).features));
    EXPECT_EQ(cache.length(), 0u);
}
