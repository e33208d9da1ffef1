#include <gtest/gtest.h>

#include <filesystem>

#include "config_cases.hpp"
#include "oracles.hpp"

using namespace nnfi;

namespace {

const Graph& lenet() {
    static const Graph g = oracle::fixture_graph();
    return g;
}

const Graph& residual() {
    static const Graph g = residual_fixture_model(1);
    return g;
}

} // namespace

class ConfigCaseTest : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ConfigCaseTest, ResolvesAsExpected) {
    const auto cc = cases::config_cases()[GetParam()];
    const auto outcome = cases::run_case(cc, lenet(), residual());
    EXPECT_TRUE(outcome.passed) << cc.name << ": " << outcome.detail;
}

INSTANTIATE_TEST_SUITE_P(Cases, ConfigCaseTest, ::testing::Range<std::size_t>(0, cases::config_cases().size()));

TEST(ConfigResolve, MatchesAncestorWalkOracle) {
    const std::string text = "enabled = false\nmode = ber\nber = 1e-6\nerror_model = bitflip_random\n"
                             "model.block*:\n  ber = 1e-5\n  conv*:\n    enabled = true\n    method = fixed:3.13\n"
                             "model.block2:\n  target = weight\n  add:\n    enabled = true\n    error_model = stuck0\n"
                             "model.block2.conv2:\n  ber = 1e-2\n"
                             "model.fc:\n  enabled = true\n  method = layerwise:8\n";
    const auto tree = parse_config(text);
    const auto resolved = resolve(tree, residual());
    for (const auto& e : resolved.entries) {
        const auto w = oracle::ancestor_walk(tree, e.path);
        EXPECT_EQ(e.enabled, w.enabled.value_or(false)) << e.path;
        EXPECT_EQ(e.target, w.target.value_or(TargetSel::Activation)) << e.path;
        EXPECT_EQ(e.quant.method, w.method.value_or(QuantMethod{NoQuant{}})) << e.path;
        if (e.enabled) {
            EXPECT_EQ(std::get<RateSelect>(e.selector.mode).ber, *w.ber) << e.path;
            EXPECT_EQ(e.error_model, *w.error_model) << e.path;
        }
    }
}

TEST(ConfigResolve, DisjointSiblingOrderDoesNotMatter) {
    const std::string head = "mode = ber\nber = 1e-6\nerror_model = stuck0\n";
    const std::vector<std::string> blocks{"model.conv1:\n  enabled = true\n  ber = 1e-3\n",
                                          "model.fc*:\n  enabled = true\n  method = fixed:2.12\n",
                                          "model.pool2:\n  target = weight\n"};
    const auto reference = resolve(parse_config(head + blocks[0] + blocks[1] + blocks[2]), lenet());
    std::vector<std::size_t> perm{0, 1, 2};
    while (std::next_permutation(perm.begin(), perm.end())) {
        const auto r = resolve(parse_config(head + blocks[perm[0]] + blocks[perm[1]] + blocks[perm[2]]), lenet());
        EXPECT_TRUE(r == reference);
    }
}

TEST(ConfigResolve, EmptyNodesAreNeutral) {
    const std::string base = "enabled = true\nmode = ber\nber = 1e-6\nerror_model = stuck0\nmodel.conv1:\n  ber = 1e-4\n";
    const auto a = resolve(parse_config(base), lenet());
    InjectionConfigNode tree = parse_config(base);
    auto empty = [](const char* pattern) {
        InjectionConfigNode n;
        n.pattern = pattern;
        return n;
    };
    tree.children.push_back(empty("model.fc*"));
    tree.children.push_back(empty("model"));
    tree.children.back().children.push_back(empty("pool*"));
    EXPECT_TRUE(resolve(tree, lenet()) == a);
}

TEST(ConfigParse, EasyAndTreeFormsAgree) {
    const auto easy = parse_config("[injection]\nlayers = model.conv*\nmode = ber\nber = 1e-5\nerror_model = stuck0\n");
    const auto tree = parse_config("model.conv*:\n  enabled = true\n  mode = ber\n  ber = 1e-5\n  error_model = stuck0\n");
    EXPECT_TRUE(resolve(easy, lenet()) == resolve(tree, lenet()));
}

TEST(ConfigParse, ErrorsCarryLineNumbers) {
    try {
        parse_config_tree("mode = ber\n\tber = 1\n");
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
    }
    EXPECT_THROW(parse_config_tree("ber = 1e-3\nber = 1e-4\n"), ParseError);
    EXPECT_THROW(parse_config_tree("model.conv1:\n   ber = 1e-3\n"), ParseError);
}

TEST(BuildHooks, OneHookPerEnabledTarget) {
    const auto resolved = resolve(parse_config("mode = ber\nber = 1e-3\nerror_model = bitflip_random\n"
                                               "model.conv*:\n  enabled = true\n  target = weight\n"
                                               "model.fc*:\n  enabled = true\n  target = activation\n"
                                               "model.relu1:\n  enabled = true\n  target = weight\n"),
                                  lenet());
    const auto hooks = build_hooks(resolved, lenet());
    ASSERT_EQ(hooks.size(), 4u); // relu1 has no weights
    std::size_t weight = 0, act = 0;
    for (const auto& h : hooks) (h.point.site == HookSite::WeightPre ? weight : act)++;
    EXPECT_EQ(weight, 2u);
    EXPECT_EQ(act, 2u);
    BuildOptions opts;
    opts.include_weights = false;
    EXPECT_EQ(build_hooks(resolved, lenet(), opts).size(), 2u);
}

TEST(BuildHooks, BothTargetsAndPreSite) {
    const auto resolved = resolve(parse_config("model.conv2:\n  enabled = true\n  target = both\n  site = pre\n"
                                               "  mode = fixed_count\n  count = 1\n  error_model = stuck0\n"),
                                  lenet());
    const auto hooks = build_hooks(resolved, lenet());
    ASSERT_EQ(hooks.size(), 2u);
    EXPECT_EQ(hooks[0].point.site, HookSite::ActivationPre);
    EXPECT_EQ(hooks[1].point.site, HookSite::WeightPre);
}

TEST(BuildHooks, AllDisabledGivesNoHooks) {
    const auto resolved = resolve(parse_config("mode = ber\nber = 1e-3\nerror_model = stuck0\n"), lenet());
    EXPECT_TRUE(build_hooks(resolved, lenet()).empty());
    const auto x = oracle::fixture_data(lenet()).samples[0].input;
    EXPECT_TRUE(forward(lenet(), x, build_hooks(resolved, lenet())) == forward(lenet(), x));
}

TEST(BuildHooks, LayerwiseActivationNeedsRanges) {
    const auto resolved = resolve(parse_config("model.fc1:\n  enabled = true\n  method = layerwise:8\n"
                                               "  mode = ber\n  ber = 1e-3\n  error_model = bitflip_random\n"),
                                  lenet());
    EXPECT_THROW(build_hooks(resolved, lenet()), ConfigError);
    RangeMap ranges{{"model.fc1", {-1.0f, 1.0f}}};
    BuildOptions opts;
    opts.ranges = &ranges;
    EXPECT_EQ(build_hooks(resolved, lenet(), opts).size(), 1u);
}

TEST(ApplyWeightFaults, CorruptsOnlyEnabledWeights) {
    Graph g = lenet();
    const auto resolved = resolve(parse_config("model.fc1:\n  enabled = true\n  target = weight\n"
                                               "  mode = fixed_count\n  count = 5\n  error_model = value:9\n"),
                                  g);
    EXPECT_EQ(apply_weight_faults(g, resolved, {}), 1u);
    for (const auto& l : g.layers()) {
        if (!l.weighted()) continue;
        const auto& orig = *lenet().layer(l.path).weight;
        std::size_t diff = 0;
        for (std::size_t i = 0; i < orig.size(); ++i) diff += orig.get_bits(i) != l.weight->get_bits(i);
        EXPECT_EQ(diff, l.path == "model.fc1" ? 5u : 0u) << l.path;
    }
}

TEST(ConfigFiles, ShippedConfigsResolve) {
    std::size_t seen = 0;
    for (const auto& entry : std::filesystem::directory_iterator(NNFI_CONFIG_DIR)) {
        const auto tree = parse_config(read_file(entry.path()));
        const auto resolved = resolve(tree, lenet());
        RangeMap ranges;
        for (const auto& l : lenet().layers()) {
            ranges[l.path] = {-1.0f, 1.0f};
            ranges[input_range_key(l.path)] = {-1.0f, 1.0f};
        }
        BuildOptions opts;
        opts.ranges = &ranges;
        EXPECT_NO_THROW(build_hooks(resolved, lenet(), opts)) << entry.path();
        EXPECT_TRUE(parse_config_tree(serialize_config_tree(tree)) == tree) << entry.path();
        ++seen;
    }
    EXPECT_GE(seen, 5u);
}
