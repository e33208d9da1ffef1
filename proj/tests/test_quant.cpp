#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace nnfi;

namespace {

QuantSpec fixed(int m, int n) { return {FixedPoint{m, n}, std::nullopt}; }

std::int64_t code(float x, const QuantSpec& s, std::optional<DynamicRange> r = std::nullopt) {
    return static_cast<std::int64_t>(quantize(Tensor({1}, std::vector<float>{x}), s, r).value(0));
}

float roundtrip(float x, const QuantSpec& s, std::optional<DynamicRange> r = std::nullopt) {
    return dequantize(quantize(Tensor({1}, std::vector<float>{x}), s, r), s, r).f32()[0];
}

} // namespace

TEST(Quantize, FixedPointExamples) {
    EXPECT_EQ(code(1.0f, fixed(3, 13)), 8192);
    EXPECT_EQ(code(100.0f, fixed(3, 13)), 32767);
    EXPECT_EQ(code(-100.0f, fixed(3, 13)), -32768);
    EXPECT_EQ(quantize(Tensor({1}), fixed(3, 13)).dtype(), DType::I16);
    EXPECT_EQ(quantize(Tensor({1}), fixed(2, 6)).dtype(), DType::I8);
    EXPECT_EQ(quantize(Tensor({1}), fixed(2, 12)).dtype(), DType::I16);
}

TEST(Quantize, LayerwiseExample) {
    const QuantSpec s{LayerwiseRange{16}, std::nullopt};
    const DynamicRange r{-1.0f, 2.0f};
    EXPECT_EQ(code(0.5f, s, r), 8192);
    // Brute-force scan: every in-range value comes back within half a step.
    const double step = 2.0 / 32767.0;
    for (int i = -2000; i <= 2000; ++i) {
        const float x = static_cast<float>(i) * 0.001f;
        EXPECT_LE(std::fabs(roundtrip(x, s, r) - x), step / 2 + 1e-7);
    }
}

TEST(Quantize, LayerwiseNeedsRange) {
    const QuantSpec s{LayerwiseRange{8}, std::nullopt};
    EXPECT_THROW(quantize(Tensor({1}), s), ConfigError);
}

TEST(Dequantize, FixedPointExamples) {
    const auto s = fixed(3, 13);
    Tensor q({2}, DType::I16);
    q.as<std::int16_t>()[0] = 8192;
    q.as<std::int16_t>()[1] = -32768;
    const Tensor x = dequantize(q, s);
    EXPECT_EQ(x.f32()[0], 1.0f);
    EXPECT_EQ(x.f32()[1], -4.0f);
}

TEST(Quantize, RoundTripWithinHalfStep) {
    Rng rng(21);
    for (auto [m, n] : {std::pair{3, 13}, std::pair{2, 12}}) {
        const double lo = -std::ldexp(1.0, m - 1), hi = std::ldexp(1.0, m - 1) - std::ldexp(1.0, -n);
        double worst = 0;
        for (int i = 0; i < 1000; ++i) {
            const float x = static_cast<float>(lo + (hi - lo) * rng.uniform());
            worst = std::max(worst, std::fabs(static_cast<double>(roundtrip(x, fixed(m, n))) - x));
        }
        EXPECT_LE(worst, std::ldexp(1.0, -(n + 1)));
    }
}

TEST(Quantize, RoundsHalfAwayFromZero) {
    const auto s = fixed(3, 13);
    const float half = std::ldexp(1.0f, -14);
    EXPECT_EQ(code(half, s), 1);
    EXPECT_EQ(code(-half, s), -1);
    EXPECT_EQ(code(3 * half, s), 2);
}

TEST(Quantize, MonotoneAndSaturatingOverAllCodes) {
    for (auto [m, n] : {std::pair{3, 13}, std::pair{2, 12}}) {
        const auto s = fixed(m, n);
        const std::int64_t lo = -(std::int64_t{1} << (m + n - 1)), hi = (std::int64_t{1} << (m + n - 1)) - 1;
        std::int64_t prev = lo;
        for (std::int64_t q = lo; q <= hi; ++q) {
            const double x = static_cast<double>(q) * std::ldexp(1.0, -n);
            const auto c = code(static_cast<float>(x), s);
            ASSERT_EQ(c, q);
            ASSERT_GE(c, prev);
            prev = c;
        }
        EXPECT_EQ(code(static_cast<float>(std::ldexp(1.0, m)), s), hi);
        EXPECT_EQ(code(static_cast<float>(-std::ldexp(1.0, m)), s), lo);
        EXPECT_EQ(code(std::numeric_limits<float>::infinity(), s), hi);
        EXPECT_EQ(code(-std::numeric_limits<float>::infinity(), s), lo);
    }
}

TEST(Quantize, ScaleOverrideDoublesStepAndRange) {
    const DynamicRange r{-1.0f, 1.0f};
    const QuantSpec a{LayerwiseRange{8}, 1.0};
    const QuantSpec b{LayerwiseRange{8}, 2.0};
    const auto ga = quant_grid(a, r), gb = quant_grid(b, r);
    EXPECT_DOUBLE_EQ(gb.step, 2 * ga.step);
    EXPECT_DOUBLE_EQ(dequantize_value(gb.hi, gb), 2 * dequantize_value(ga.hi, ga));
    EXPECT_EQ(code(1.5f, a, r), 127);
    EXPECT_EQ(code(1.5f, b, r), 95);
}

TEST(QuantSpec, Validation) {
    EXPECT_THROW(fixed(0, 8).validate(), ConfigError);
    EXPECT_THROW(fixed(3, -1).validate(), ConfigError);
    EXPECT_THROW(fixed(20, 13).validate(), ConfigError);
    EXPECT_THROW((QuantSpec{LayerwiseRange{1}, std::nullopt}.validate()), ConfigError);
    EXPECT_THROW((QuantSpec{LayerwiseRange{33}, std::nullopt}.validate()), ConfigError);
    EXPECT_THROW((QuantSpec{FixedPoint{3, 13}, 0.0}.validate()), ConfigError);
    EXPECT_NO_THROW(fixed(1, 31).validate());
    EXPECT_EQ(fixed(3, 13).code_bits(), 16u);
    EXPECT_EQ(fixed(2, 12).code_bits(), 14u);
}

TEST(Quantize, Float16CastRoundTrip) {
    const QuantSpec s{Float16Cast{}, std::nullopt};
    const Tensor x({3}, std::vector<float>{1.0f, 0.1f, -2.5f});
    const Tensor q = quantize(x, s);
    EXPECT_EQ(q.dtype(), DType::F16);
    EXPECT_EQ(q.get_bits(0), 0x3C00u);
    const Tensor back = dequantize(q, s);
    EXPECT_EQ(back.f32()[0], 1.0f);
    EXPECT_NEAR(back.f32()[1], 0.1f, 1e-4);
    EXPECT_EQ(back.f32()[2], -2.5f);
}

TEST(Calibrate, EmptyBatchIsArgumentError) {
    EXPECT_THROW(calibrate(oracle::fixture_graph(), {}), ArgumentError);
}

TEST(Calibrate, ZeroActivationsGiveZeroRange) {
    LayerNode relu;
    relu.path = "r";
    relu.kind = LayerKind::ReLU;
    relu.params.bias = false;
    const Graph g({1, 4}, {relu});
    const auto ranges = calibrate(g, {Tensor({1, 4})});
    EXPECT_EQ(ranges.at("r"), (DynamicRange{0.0f, 0.0f}));
    const auto pos = calibrate(g, {oracle::random_tensor({1, 4}, 3)});
    EXPECT_GE(pos.at("r").min_val, 0.0f);
}

TEST(Calibrate, MatchesRecordingOracle) {
    const auto g = oracle::fixture_graph();
    const auto data = oracle::fixture_data(g);
    std::vector<Tensor> inputs;
    for (std::size_t i = 0; i < 32; ++i) inputs.push_back(data.samples[i].input);
    const auto ranges = calibrate(g, inputs);

    std::map<std::string, std::vector<float>> seen;
    std::vector<Hook> hooks;
    for (const auto& l : g.layers())
        hooks.push_back({{l.path, HookSite::ActivationPost}, [&seen](const HookPoint& p, Tensor t) {
                             for (float v : t.f32()) seen[p.path].push_back(v);
                             return t;
                         }});
    for (const auto& x : inputs) forward(g, x, hooks);
    for (const auto& l : g.layers()) {
        const auto& v = seen[l.path];
        EXPECT_EQ(ranges.at(l.path).min_val, *std::min_element(v.begin(), v.end())) << l.path;
        EXPECT_EQ(ranges.at(l.path).max_val, *std::max_element(v.begin(), v.end())) << l.path;
        if (l.weighted()) {
            const auto w = l.weight->f32();
            EXPECT_EQ(ranges.at(weight_range_key(l.path)).min_val, *std::min_element(w.begin(), w.end()));
            EXPECT_EQ(ranges.at(weight_range_key(l.path)).max_val, *std::max_element(w.begin(), w.end()));
        }
    }
    EXPECT_EQ(ranges.at(input_range_key("model.conv1")).min_val, 0.0f);
}

TEST(Calibrate, CsvRoundTrip) {
    const auto g = oracle::fixture_graph();
    const auto ranges = calibrate(g, {oracle::fixture_data(g).samples[0].input});
    const auto csv = ranges_to_csv(ranges);
    EXPECT_EQ(csv.substr(0, 13), "path,min,max\n");
    EXPECT_EQ(ranges_from_csv(csv), ranges);
    EXPECT_THROW(ranges_from_csv("path,min,max\nx,2,1\n"), ParseError);
}
