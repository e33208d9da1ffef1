#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include <boost/math/distributions/binomial.hpp>

#include "oracles.hpp"

using namespace nnfi;

namespace {

SelectorSpec rate(double ber, Sampling s) { return {RateSelect{ber, s}, std::nullopt}; }

SiteScope scope(Shape shape, unsigned bits) { return {"layer", Target::Activation, std::move(shape), bits}; }

} // namespace

TEST(ExpectedCount, Examples) {
    EXPECT_EQ(expected_count(1000, 0.001), 1u);
    EXPECT_EQ(expected_count(1000, 0.0004), 0u);
    EXPECT_EQ(expected_count(4096 * 16, 1e-5), 1u);
    EXPECT_EQ(expected_count(1000, 0.0005), 1u); // exact tie rounds away from zero
    EXPECT_EQ(expected_count(0, 0.5), 0u);
}

TEST(PoissonCount, ZeroMean) {
    Rng rng(1);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(poisson_count(1000, 0.0, rng), 0u);
}

TEST(PoissonCount, SampleMeanWithinThreeSigma) {
    Rng rng(2);
    const double lambda = 4.096;
    double sum = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) sum += static_cast<double>(poisson_count(4096, 1e-3, rng));
    EXPECT_NEAR(sum / n, lambda, 3 * std::sqrt(lambda / n));
}

TEST(PoissonCount, LargeMeanBranch) {
    Rng rng(3);
    const double lambda = 250.0;
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double k = static_cast<double>(poisson_sample(lambda, rng));
        sum += k;
        sq += k * k;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    EXPECT_NEAR(mean, lambda, 3 * std::sqrt(lambda / n));
    EXPECT_NEAR(var / lambda, 1.0, 0.05);
}

TEST(PoissonCount, MatchesPerBitBernoulliOracle) {
    // Count histogram from the Poisson path against counts produced by
    // flipping a coin for every bit slot.
    const std::uint64_t n_bits = 4096;
    const double ber = 1e-3;
    std::map<std::uint64_t, std::uint64_t> poisson, bernoulli;
    Rng a(4), b(5);
    const auto sel = rate(ber, Sampling::PerBitBernoulli);
    for (int i = 0; i < 100000; ++i) ++poisson[poisson_count(n_bits, ber, a)];
    for (int i = 0; i < 20000; ++i) ++bernoulli[select_sites(sel, scope({n_bits}, 1), b).size()];
    EXPECT_GT(oracle::chi_square_two_sample(poisson, bernoulli), 0.01);

    // And the Bernoulli oracle itself against the exact binomial law.
    boost::math::binomial binom(static_cast<double>(n_bits), ber);
    std::vector<double> obs, exp;
    double tail_obs = 20000, tail_exp = 20000;
    for (std::uint64_t k = 0; k <= 8; ++k) {
        obs.push_back(static_cast<double>(bernoulli[k]));
        exp.push_back(20000 * boost::math::pdf(binom, static_cast<double>(k)));
        tail_obs -= obs.back();
        tail_exp -= exp.back();
    }
    obs.push_back(tail_obs);
    exp.push_back(tail_exp);
    EXPECT_GT(oracle::chi_square_gof(obs, exp), 0.01);
}

TEST(SelectSites, FixedCountOne) {
    Rng rng(6);
    const auto sites = select_sites({FixedCount{1}, std::nullopt}, scope({10}, 1), rng);
    ASSERT_EQ(sites.size(), 1u);
    EXPECT_LT(sites[0].element_offset, 10u);
}

TEST(SelectSites, FixedCountDistinctAndBounded) {
    Rng rng(7);
    const auto sites = select_sites({FixedCount{40}, std::nullopt}, scope({5, 4}, 2), rng);
    std::set<std::pair<std::size_t, unsigned>> uniq;
    for (const auto& s : sites) uniq.insert({s.element_offset, *s.bit_index});
    EXPECT_EQ(uniq.size(), 40u);
    EXPECT_THROW(select_sites({FixedCount{41}, std::nullopt}, scope({5, 4}, 2), rng), ConfigError);
}

TEST(SelectSites, ZeroRateIsEmpty) {
    Rng rng(8);
    for (auto s : {Sampling::Rounded, Sampling::Poisson, Sampling::PerBitBernoulli})
        EXPECT_TRUE(select_sites(rate(0.0, s), scope({1000}, 16), rng).empty());
}

TEST(SelectSites, FixedPositionExactlyConfigured) {
    Rng rng(9);
    SelectorSpec sel{FixedPosition{{{"layer", 3, 7}, {"other", 1, 1}, {"layer", 9, 0}}}, std::nullopt};
    const auto sites = select_sites(sel, scope({10}, 16), rng);
    ASSERT_EQ(sites.size(), 2u);
    EXPECT_EQ(sites[0].element_offset, 3u);
    EXPECT_EQ(sites[0].bit_index, 7u);
    EXPECT_EQ(sites[1].element_offset, 9u);
    SelectorSpec bad{FixedPosition{{{"layer", 10, 0}}}, std::nullopt};
    EXPECT_THROW(select_sites(bad, scope({10}, 16), rng), ConfigError);
}

TEST(SelectSites, PoissonCountAndUniformity) {
    // 10^6 bit slots at ber 1e-3 over 1000 trials.
    const Shape shape{62500};
    const auto sel = rate(1e-3, Sampling::Poisson);
    std::vector<double> bins(100, 0.0);
    double total = 0;
    for (std::uint64_t t = 0; t < 1000; ++t) {
        Rng rng(10, t, "layer");
        const auto sites = select_sites(sel, scope(shape, 16), rng);
        total += static_cast<double>(sites.size());
        for (const auto& s : sites) bins[(s.element_offset * 16 + *s.bit_index) / 10000] += 1;
    }
    const double mean = total / 1000;
    EXPECT_NEAR(mean, 1000.0, 3 * std::sqrt(1000.0 / 1000));
    std::vector<double> expected(100, total / 100);
    EXPECT_GT(oracle::chi_square_gof(bins, expected), 0.01);
}

TEST(SelectSites, SamplingStrategiesAgreeInExpectation) {
    const Shape shape{4096};
    const unsigned bits = 16; // 65536 slots
    const double ber = 6.0 / 65536.0; // mean exactly 6
    const int trials = 10000;
    std::map<Sampling, std::vector<double>> counts;
    for (auto s : {Sampling::Rounded, Sampling::Poisson, Sampling::PerBitBernoulli})
        for (int t = 0; t < trials; ++t) {
            Rng rng(11, t, "layer");
            counts[s].push_back(static_cast<double>(select_sites(rate(ber, s), scope(shape, bits), rng).size()));
        }
    const double lambda = 65536 * ber;
    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double sigma = std::sqrt(2 * lambda / trials);
    EXPECT_NEAR(mean(counts[Sampling::Poisson]), mean(counts[Sampling::PerBitBernoulli]), 3 * sigma);
    EXPECT_NEAR(mean(counts[Sampling::Rounded]), mean(counts[Sampling::PerBitBernoulli]), 3 * sigma);
    // The rounded strategy never varies: it always injects round(n * ber).
    for (double c : counts[Sampling::Rounded]) EXPECT_EQ(c, 6.0);
}

TEST(SelectSites, MaskSoundness) {
    const Shape shape{1, 6, 8, 8};
    Rng rng(12);
    SelectorSpec chan{RateSelect{0.05, Sampling::Poisson}, SiteMask{2, std::nullopt, {}}};
    SelectorSpec pix{RateSelect{0.05, Sampling::PerBitBernoulli}, SiteMask{std::nullopt, std::pair{3, 5}, {}}};
    SelectorSpec cnt{FixedCount{6}, SiteMask{std::nullopt, std::pair{1, 1}, {}}};
    for (int t = 0; t < 50; ++t) {
        for (const auto& s : select_sites(chan, scope(shape, 16), rng)) EXPECT_EQ((s.element_offset / 64) % 6, 2u);
        for (const auto& s : select_sites(pix, scope(shape, 16), rng)) {
            EXPECT_EQ(s.element_offset % 8, 5u);
            EXPECT_EQ((s.element_offset / 8) % 8, 3u);
        }
        const auto c = select_sites(cnt, scope(shape, 1), rng);
        EXPECT_EQ(c.size(), 6u);
        for (const auto& s : c) EXPECT_EQ(s.element_offset % 64, 9u);
    }
}

TEST(SelectSites, DeterministicForSameStream) {
    const auto sel = rate(1e-3, Sampling::Poisson);
    Rng a(13, 4, "model.conv1"), b(13, 4, "model.conv1"), c(13, 5, "model.conv1");
    const auto sa = select_sites(sel, scope({1, 6, 24, 24}, 16), a);
    const auto sb = select_sites(sel, scope({1, 6, 24, 24}, 16), b);
    const auto sc = select_sites(sel, scope({1, 6, 24, 24}, 16), c);
    EXPECT_EQ(sa, sb);
    EXPECT_NE(sa, sc);
}

TEST(ApplyError, BitFlipExamples) {
    Rng rng(14);
    Tensor i16({1}, DType::I16);
    EXPECT_EQ(apply_error(BitFlipFixed{15}, i16, {{"x", Target::Activation, 0, {}}}, rng), 1u);
    EXPECT_EQ(i16.value(0), -32768.0);
    Tensor h = to_f16(Tensor({1}, std::vector<float>{1.0f}));
    apply_error(BitFlipFixed{14}, h, {{"x", Target::Activation, 0, {}}}, rng);
    EXPECT_EQ(h.get_bits(0), 0x7C00u);
    EXPECT_TRUE(std::isinf(h.value(0)));
}

TEST(ApplyError, NarrowCodesSignExtend) {
    Rng rng(15);
    Tensor q({1}, DType::I16); // 14-bit code 0 stored in i16
    apply_error(BitFlipFixed{13}, q, {{"x", Target::Activation, 0, {}}}, rng, 14);
    EXPECT_EQ(q.value(0), -8192.0);
    EXPECT_THROW(apply_error(BitFlipFixed{14}, q, {{"x", Target::Activation, 0, {}}}, rng, 14), ConfigError);
}

TEST(ApplyError, FlipTwiceRestores) {
    Rng rng(16);
    for (DType d : {DType::F32, DType::F16, DType::I16, DType::I8}) {
        Tensor t({50}, d);
        for (std::size_t i = 0; i < t.size(); ++i) t.set_bits(i, static_cast<std::uint32_t>(rng.next_u64()) & word_mask(word_bits(d)));
        const Tensor before = t;
        std::vector<FaultSite> sites;
        for (int k = 0; k < 20; ++k)
            sites.push_back({"x", Target::Activation, rng.uniform_index(50),
                             static_cast<unsigned>(rng.uniform_index(word_bits(d)))});
        apply_error(BitFlipRandom{}, t, sites, rng);
        apply_error(BitFlipRandom{}, t, sites, rng);
        EXPECT_TRUE(t.bit_equal(before));
    }
}

TEST(ApplyError, ValueModels) {
    Rng rng(17);
    Tensor t({4}, std::vector<float>{1, 2, 3, 4});
    const std::vector<FaultSite> one{{"x", Target::Activation, 1, {}}};
    EXPECT_EQ(apply_error(StuckAtZero{}, t, one, rng), 1u);
    EXPECT_EQ(t.get_bits(1), 0u);
    EXPECT_EQ(apply_error(StuckAtZero{}, t, one, rng), 0u);
    apply_error(FixedValue{7.5}, t, {{"x", Target::Activation, 2, {}}}, rng);
    EXPECT_EQ(t.f32()[2], 7.5f);
    for (int k = 0; k < 100; ++k) {
        apply_error(UniformRandom{-1.0, 1.0}, t, {{"x", Target::Activation, 3, {}}}, rng);
        EXPECT_GE(t.f32()[3], -1.0f);
        EXPECT_LT(t.f32()[3], 1.0f);
    }
    EXPECT_EQ(t.f32()[0], 1.0f);
    Tensor g({1}, std::vector<float>{0.0f});
    apply_error(GaussianPerturb{0.5}, g, {{"x", Target::Activation, 0, {}}}, rng);
    EXPECT_NE(g.f32()[0], 0.0f);
    Tensor q({1}, DType::I16);
    EXPECT_THROW(apply_error(GaussianPerturb{0.5}, q, {{"x", Target::Activation, 0, {}}}, rng), ConfigError);
}

TEST(ApplyError, ChangedCountIsExact) {
    Rng rng(18);
    Tensor t = oracle::random_tensor({100}, 3);
    const Tensor before = t;
    std::vector<FaultSite> sites;
    for (std::size_t i = 0; i < 100; i += 7) sites.push_back({"x", Target::Activation, i, {}});
    sites.push_back({"x", Target::Activation, 0, {}}); // duplicate element
    const auto changed = apply_error(FixedValue{0.25}, t, sites, rng);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < 100; ++i) diff += t.get_bits(i) != before.get_bits(i);
    EXPECT_EQ(changed, diff);
    EXPECT_LE(changed, sites.size());
}

TEST(Injector, ZeroRateIsIdentity) {
    const Tensor x = oracle::random_tensor({1, 6, 24, 24}, 4);
    for (const QuantSpec q : {QuantSpec{}, QuantSpec{FixedPoint{3, 13}, std::nullopt}, QuantSpec{Float16Cast{}, std::nullopt}}) {
        auto hook = make_injector(q, rate(0.0, Sampling::Poisson), BitFlipRandom{}, Rng(1), {"l", Target::Activation, {}});
        EXPECT_TRUE(hook({"l", HookSite::ActivationPost}, x) == x);
    }
}

TEST(Injector, SingleStuckAtZeroWithoutQuant) {
    const Tensor x = oracle::random_tensor({20}, 5, 0.5, 1.0);
    SelectorSpec sel{FixedPosition{{{"l", 4, 0}}}, std::nullopt};
    auto hook = make_injector({}, sel, StuckAtZero{}, Rng(1), {"l", Target::Activation, {}});
    const Tensor y = hook({"l", HookSite::ActivationPost}, x);
    for (std::size_t i = 0; i < 20; ++i) {
        if (i == 4) EXPECT_EQ(y.f32()[i], 0.0f);
        else EXPECT_EQ(y.get_bits(i), x.get_bits(i));
    }
}

TEST(Injector, FixedPointBitThirteenTurnsZeroIntoOne) {
    const Tensor x({4});
    SelectorSpec sel{FixedPosition{{{"l", 2, 0}}}, std::nullopt};
    auto hook = make_injector({FixedPoint{3, 13}, std::nullopt}, sel, BitFlipFixed{13}, Rng(1), {"l", Target::Activation, {}});
    const Tensor y = hook({"l", HookSite::ActivationPost}, x);
    EXPECT_EQ(y.f32()[2], 1.0f);
    EXPECT_EQ(y.f32()[0], 0.0f);
}

TEST(Injector, UntouchedElementsStayBitIdenticalUnderQuantization) {
    const Tensor x = oracle::random_tensor({1000}, 6, -3.0, 3.0);
    auto hook = make_injector({FixedPoint{3, 13}, std::nullopt}, rate(1e-3, Sampling::Poisson), BitFlipRandom{}, Rng(2),
                              {"l", Target::Activation, {}});
    const Tensor y = hook({"l", HookSite::ActivationPost}, x);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < 1000; ++i) diff += y.get_bits(i) != x.get_bits(i);
    EXPECT_GT(diff, 0u);
    EXPECT_LT(diff, 60u); // about 16 expected flips
}

TEST(Injector, LayerwiseActivationNeedsRange) {
    EXPECT_THROW(make_injector({LayerwiseRange{8}, std::nullopt}, rate(1e-3, Sampling::Poisson), BitFlipRandom{}, Rng(1),
                               {"l", Target::Activation, {}}),
                 ConfigError);
    EXPECT_NO_THROW(make_injector({LayerwiseRange{8}, std::nullopt}, rate(1e-3, Sampling::Poisson), BitFlipRandom{}, Rng(1),
                                  {"l", Target::Weight, {}}));
}

TEST(Injector, DeterministicAcrossInstances) {
    const Tensor x = oracle::random_tensor({1, 6, 24, 24}, 7);
    auto make = [] {
        return make_injector({FixedPoint{3, 13}, std::nullopt}, rate(1e-3, Sampling::Poisson), BitFlipRandom{},
                             Rng(9, 2, "model.conv1"), {"model.conv1", Target::Activation, {}});
    };
    auto h1 = make(), h2 = make();
    EXPECT_TRUE(h1({"model.conv1", HookSite::ActivationPost}, x) == h2({"model.conv1", HookSite::ActivationPost}, x));
}
