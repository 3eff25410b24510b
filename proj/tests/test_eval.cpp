#include "patchfm/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace patchfm;

namespace {

QuantileForecast constant_levels(std::size_t horizon, const std::array<double, 9>& q) {
    QuantileForecast f(1, horizon, true);
    for (std::size_t t = 0; t < horizon; ++t)
        for (std::size_t l = 0; l < 9; ++l) f.at(0, t, l) = q[l];
    return f;
}

// Trapezoid integration of 2/9 * sum_tau rho_tau(y - tau) over y in [0, 1].
double uniform_decile_crps() {
    const std::size_t n = 200000;
    double acc = 0;
    for (std::size_t i = 0; i <= n; ++i) {
        const double y = double(i) / double(n);
        double s = 0;
        for (int l = 1; l <= 9; ++l) {
            const double tau = 0.1 * l, u = y - tau;
            s += u >= 0 ? tau * u : (tau - 1) * u;
        }
        acc += (i == 0 || i == n ? 0.5 : 1.0) * s;
    }
    return 2.0 / 9.0 * acc / double(n);
}

}  // namespace

TEST(Crps, PerfectForecastIsZero) {
    std::array<double, 9> q;
    q.fill(2.5);
    std::vector<double> y(4, 2.5);
    EXPECT_EQ(*crps_quantile(constant_levels(4, q), y), 0.0);
}

TEST(Crps, UniformDecilesMatchIntegral) {
    std::array<double, 9> q;
    for (std::size_t l = 0; l < 9; ++l) q[l] = kQuantileLevels[l];
    const std::size_t n = 1000000;
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> y(n);
    for (auto& x : y) x = u(rng);
    const double mc = *crps_quantile(constant_levels(n, q), y);
    const double exact = uniform_decile_crps();
    EXPECT_NEAR(mc, exact, 1e-3) << mc << " vs " << exact;
}

TEST(Crps, EqualsTwiceQuantileLoss) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    QuantileForecast f(3, 7, true);
    for (auto& x : f.values) x = nd(rng);
    f = sort_quantiles(f);
    std::vector<double> y(21);
    std::vector<std::uint8_t> obs(21, 1);
    for (auto& x : y) x = nd(rng);
    obs[4] = 0;
    const auto ml = quantile_loss(y, obs, f.values);
    EXPECT_NEAR(*crps_quantile(f, y, obs), 2 * ml.loss, 1e-15);
    std::vector<std::uint8_t> none(21, 0);
    EXPECT_FALSE(crps_quantile(f, y, none).present());
}

TEST(Crps, PiecewiseLinearInShift) {
    std::array<double, 9> q;
    for (std::size_t l = 0; l < 9; ++l) q[l] = double(l);
    const std::vector<double> y{3.3};
    auto at = [&](double c) {
        auto s = q;
        for (auto& x : s) x += c;
        return *crps_quantile(constant_levels(1, s), y);
    };
    // Breakpoints sit where some q_l + c == y; between them second differences vanish.
    const double h = 1e-3;
    std::size_t kinks = 0;
    for (double c = -10; c < 10; c += h) {
        const double d2 = at(c + h) - 2 * at(c) + at(c - h);
        if (std::abs(d2) > 1e-9) ++kinks;
        EXPECT_LT(std::abs(at(c + h) - at(c)), 2 * h);
    }
    EXPECT_GE(kinks, 9u);
    EXPECT_LE(kinks, 18u);
}

TEST(Mase, Cases) {
    std::vector<double> ins{1, 3, 2, 5, 4, 6};
    std::vector<double> y{7, 8, 9};
    EXPECT_EQ(*mase(y, y, ins), 0.0);
    // Denominator: mean |diff| = (2+1+3+1+2)/5 = 1.8.
    std::vector<double> f{8, 8, 8};
    EXPECT_NEAR(*mase(f, y, ins), (1.0 + 0 + 1) / 3 / 1.8, 1e-15);
    std::vector<double> flat(10, 4.0);
    const auto s = mase(f, y, flat);
    EXPECT_FALSE(s.present());
    EXPECT_EQ(s.reason, "zero scale");
    EXPECT_FALSE(mase(f, y, std::vector<double>{1, 2}, 2).present());
}

TEST(Mase, SeasonalNaiveOnNoiseIsAboutOne) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    const std::size_t season = 12;
    double total = 0;
    const int trials = 400;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<double> x(600);
        for (std::size_t t = 0; t < x.size(); ++t)
            x[t] = 3 * std::sin(2 * std::numbers::pi * double(t) / double(season)) + nd(rng);
        std::span<const double> ins(x.data(), 480), truth(x.data() + 480, 120);
        const auto f = seasonal_naive(ins, season, 120);
        total += *mase(f, truth, ins, season);
    }
    EXPECT_NEAR(total / trials, 1.0, 0.03);
}

TEST(SeasonalNaive, RepeatsLastSeason) {
    std::vector<double> x{1, 2, 3, 4, 5};
    EXPECT_EQ(seasonal_naive(x, 2, 5), (std::vector<double>{4, 5, 4, 5, 4}));
    EXPECT_THROW(seasonal_naive(x, 6, 1), std::invalid_argument);
}

TEST(Owa, Cases) {
    EXPECT_DOUBLE_EQ(*owa(Score::of(1.3), Score::of(0.7), Score::of(1.3), Score::of(0.7)), 1.0);
    EXPECT_DOUBLE_EQ(*owa(Score::of(0.65), Score::of(0.35), Score::of(1.3), Score::of(0.7)), 0.5);
    EXPECT_DOUBLE_EQ(*owa(Score::of(1.3), Score::of(0.0), Score::of(1.3), Score::of(0.7)), 0.5);
    EXPECT_FALSE(owa(Score::of(1), Score::of(1), Score::of(0), Score::of(1)).present());
    EXPECT_FALSE(owa(Score::absent("x"), Score::of(1), Score::of(1), Score::of(1)).present());
}

TEST(Ranks, BestAndTies) {
    ScoreTable t;
    t["d1"] = {{"a", Score::of(0.1)}, {"b", Score::of(0.5)}, {"c", Score::of(0.5)}};
    t["d2"] = {{"a", Score::of(1.0)}, {"b", Score::of(2.0)}, {"c", Score::of(3.0)}};
    const auto r = rank_models(t);
    EXPECT_EQ(r.at("a"), 1.0);
    EXPECT_EQ(r.at("b"), (2.5 + 2.0) / 2);
    EXPECT_EQ(r.at("c"), (2.5 + 3.0) / 2);
    const auto d1 = rank_dataset({{"x", 1.0}, {"y", 1.0}});
    EXPECT_EQ(d1.at("x"), 1.5);
    EXPECT_EQ(d1.at("y"), 1.5);
}

TEST(Ranks, MonotoneInvarianceAndSum) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.01, 5);
    for (int trial = 0; trial < 50; ++trial) {
        ScoreTable a, b;
        for (int d = 0; d < 4; ++d)
            for (int m = 0; m < 5; ++m) {
                const double s = std::round(u(rng) * 2) / 2;  // coarse grid to create ties
                a["d" + std::to_string(d)]["m" + std::to_string(m)] = Score::of(s);
                b["d" + std::to_string(d)]["m" + std::to_string(m)] = Score::of(std::exp(3 * s) + double(d));
            }
        EXPECT_EQ(rank_models(a), rank_models(b));
        for (const auto& [d, row] : a) {
            std::map<std::string, double> s;
            for (const auto& [m, v] : row) s[m] = *v;
            double sum = 0;
            for (const auto& [m, r] : rank_dataset(s)) sum += r;
            EXPECT_EQ(sum, 15.0);
        }
    }
}

TEST(Ranks, AbsentScoresExcludeDataset) {
    ScoreTable t;
    t["d1"] = {{"a", Score::of(0.1)}, {"b", Score::of(0.5)}};
    t["d2"] = {{"a", Score::absent("zero scale")}, {"b", Score::of(0.1)}};
    const auto r = rank_models(t);
    EXPECT_EQ(r.at("a"), 1.0);
    EXPECT_EQ(r.at("b"), 2.0);
}

TEST(Pearson, Cases) {
    std::vector<double> x{1, 4, 2, 8, 5}, neg;
    for (double v : x) neg.push_back(-v);
    EXPECT_NEAR(*pearson(x, x), 1.0, 1e-15);
    EXPECT_NEAR(*pearson(x, neg), -1.0, 1e-15);
    std::vector<double> flat(5, 2.0);
    EXPECT_FALSE(pearson(x, flat).present());
    EXPECT_EQ(pearson(x, flat).reason, "constant input");
}

TEST(Pearson, NullDistribution) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(10000), b(10000);
        for (auto& v : a) v = nd(rng);
        for (auto& v : b) v = nd(rng);
        EXPECT_LE(std::abs(*pearson(a, b)), 0.05);
    }
}

TEST(Metrics, VariateOrderInvariant) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    QuantileForecast f(3, 5, true);
    for (auto& x : f.values) x = nd(rng);
    std::vector<double> y(15);
    for (auto& x : y) x = nd(rng);
    QuantileForecast g(3, 5, true);
    std::vector<double> z(15);
    const std::size_t perm[3] = {2, 0, 1};
    for (std::size_t v = 0; v < 3; ++v)
        for (std::size_t t = 0; t < 5; ++t) {
            z[v * 5 + t] = y[perm[v] * 5 + t];
            for (std::size_t l = 0; l < 9; ++l) g.at(v, t, l) = f.at(perm[v], t, l);
        }
    EXPECT_NEAR(*crps_quantile(f, y), *crps_quantile(g, z), 1e-14);
}

TEST(Report, CsvAndJson) {
    MetricReport r;
    r.rows.push_back({"sine", "patchfm", Score::of(0.1), Score::of(0.5), Score::of(0.4), Score::of(0.9)});
    r.rows.push_back({"sine", "naive", Score::of(0.3), Score::absent("zero scale"), Score::of(1.0), Score::of(0.2)});
    r.compute_ranks();
    std::ostringstream out;
    r.write_csv(out);
    std::istringstream in(out.str());
    std::string header, row1, row2;
    std::getline(in, header);
    std::getline(in, row1);
    std::getline(in, row2);
    EXPECT_EQ(header, "dataset,model,crps,mase,owa,pearson");
    EXPECT_EQ(row2, "sine,naive,0.3,,1,0.2");
    const auto j = r.to_json();
    EXPECT_EQ(j["average_rank"]["patchfm"], 1.0);
    EXPECT_EQ(j["rows"][1]["mase"]["absent"], "zero scale");
}
