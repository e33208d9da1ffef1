#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "nnfi/nnfi.hpp"

namespace nnfi::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitUsage = 64;

class UsageError : public Error {
public:
    using Error::Error;
};

struct Options {
    std::string model, weights, data, config, out, ranges;
    std::optional<std::uint64_t> seed;
    std::size_t trials = 1;
    std::size_t jobs = 1;
    std::size_t images = 0;
    bool transient = false;
    std::string ber_list;
    std::string bits;
    std::string layer;
    std::string ranges_out, ranked_out, grid_out, observe_out, timing_out;
};

namespace detail {

inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
    if (path.empty()) out << text;
    else write_file(path, text);
}

inline std::uint64_t require_seed(const Options& o) {
    if (!o.seed) throw UsageError("--seed is required for injection commands");
    return *o.seed;
}

inline void require(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

inline Graph load_graph(const Options& o) {
    require(o.model, "--model");
    require(o.weights, "--weights");
    return load_model(o.model, o.weights);
}

inline Dataset load_data(const Options& o, const Graph& g) {
    require(o.data, "--data");
    return load_dataset(o.data, g.input_shape());
}

inline InjectionConfigNode load_config(const Options& o) {
    require(o.config, "--config");
    return parse_config(read_file(o.config));
}

inline std::vector<double> parse_ber_list(const std::string& text) {
    std::vector<double> out;
    for (const auto& item : split(text, ',')) {
        try {
            out.push_back(parse_double(item));
        } catch (const ParseError&) {
            throw UsageError("bad --ber value '" + item + "'");
        }
    }
    return out;
}

struct Context {
    Graph graph;
    Dataset data;
    InjectionConfigNode tree;
    RangeMap ranges;
    RunOptions run;
};

inline bool uses_layerwise(const ResolvedConfig& r) {
    for (const auto& e : r.entries)
        if (e.enabled && std::holds_alternative<LayerwiseRange>(e.quant.method)) return true;
    return false;
}

// Everything an injection command needs. Ranges come from --ranges or, when
// a layerwise quantizer needs them, from a golden pass over the run images.
inline Context prepare(const Options& o) {
    const auto seed = require_seed(o);
    Context c{load_graph(o), {}, load_config(o), {}, {}};
    c.data = load_data(o, c.graph);
    check_dataset(c.graph, c.data);
    const auto resolved = resolve(c.tree, c.graph);
    if (!o.ranges.empty()) c.ranges = ranges_from_csv(read_file(o.ranges));
    else if (uses_layerwise(resolved)) c.ranges = run_golden(c.graph, c.data, o.images).ranges;
    c.run.seed = seed;
    c.run.trials = o.trials;
    c.run.jobs = o.jobs;
    c.run.max_images = o.images;
    c.run.permanent_weights = !o.transient;
    return c;
}

inline std::pair<unsigned, unsigned> bit_range(const Options& o, const Context& c) {
    if (!o.bits.empty()) {
        const auto parts = split(o.bits, '-');
        try {
            if (parts.size() == 1) {
                const auto b = static_cast<unsigned>(parse_uint(parts[0]));
                return {b, b};
            }
            if (parts.size() == 2)
                return {static_cast<unsigned>(parse_uint(parts[0])), static_cast<unsigned>(parse_uint(parts[1]))};
        } catch (const ParseError&) {
        }
        throw UsageError("--bits expects <b> or <lo>-<hi>");
    }
    const auto resolved = resolve(c.tree, c.graph);
    for (const auto& e : resolved.entries)
        if (e.enabled) return {0u, e.quant.code_bits() - 1};
    throw ConfigError("configuration enables no layer");
}

} // namespace detail

/// Runs one command line. Summary lines go to `out`, diagnostics to `err`.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace detail;
    CLI::App app{"Fault injection for neural-network inference"};
    app.require_subcommand(1);
    Options o;

    auto add_model = [&](CLI::App* sub) {
        sub->add_option("--model", o.model, "Model description file");
        sub->add_option("--weights", o.weights, "Weights file (MRFW)");
        sub->add_option("--data", o.data, "Dataset file (MRFD)");
        sub->add_option("--images", o.images, "Use only the first N images (0 = all)");
        sub->add_option("--out", o.out, "Output CSV path (default stdout)");
    };
    auto add_run = [&](CLI::App* sub) {
        add_model(sub);
        sub->add_option("--config", o.config, "Injection configuration file");
        sub->add_option("--seed", o.seed, "Seed for all randomness");
        sub->add_option("--trials", o.trials, "Trials per point")->check(CLI::PositiveNumber);
        sub->add_option("--jobs", o.jobs, "Parallel trial workers")->check(CLI::PositiveNumber);
        sub->add_option("--ranges", o.ranges, "Calibrated ranges CSV");
        auto* perm = sub->add_flag("--permanent", "Corrupt weights once per trial (default)");
        sub->add_flag("--transient", o.transient, "Corrupt weights on every forward pass")->excludes(perm);
    };

    auto* fixture = app.add_subcommand("fixture", "Write the deterministic fixture model and dataset");
    fixture->add_option("--seed", o.seed, "Fixture seed");
    fixture->add_option("--out", o.out, "Output directory")->required();

    auto* golden = app.add_subcommand("golden", "Fault-free accuracy");
    add_model(golden);
    golden->add_option("--ranges-out", o.ranges_out, "Write calibrated ranges CSV");

    auto* calib = app.add_subcommand("calibrate", "Record per-layer dynamic ranges");
    add_model(calib);

    auto* validate = app.add_subcommand("validate-config", "Parse and resolve a configuration without running");
    validate->add_option("--config", o.config, "Injection configuration file")->required();
    validate->add_option("--model", o.model, "Model description file")->required();
    validate->add_option("--weights", o.weights, "Weights file (optional)");

    auto* inject = app.add_subcommand("inject", "Run the configured injection");
    add_run(inject);
    inject->add_option("--observe-out", o.observe_out, "Observer CSV for the configured observers");
    inject->add_option("--timing-out", o.timing_out, "Timing CSV comparing golden and injected passes");

    auto* sweep = app.add_subcommand("sweep", "Accuracy versus bit error rate");
    add_run(sweep);
    sweep->add_option("--ber", o.ber_list, "Comma-separated, strictly increasing rates")->required();

    auto* bitsense = app.add_subcommand("bitsense", "Per-bit sensitivity");
    add_run(bitsense);
    bitsense->add_option("--bits", o.bits, "Bit or bit range lo-hi (default: whole word)");

    auto* channel = app.add_subcommand("channelsense", "Per-channel sensitivity of a conv layer");
    add_run(channel);
    channel->add_option("--layer", o.layer, "Conv layer path")->required();
    channel->add_option("--ranked-out", o.ranked_out, "Channels sorted by ascending RMSE");

    auto* pixel = app.add_subcommand("pixelsense", "Per-pixel sensitivity of a layer");
    add_run(pixel);
    pixel->add_option("--layer", o.layer, "Layer path")->required();
    pixel->add_option("--grid-out", o.grid_out, "RMSE grid as an H x W CSV matrix");

    auto* propagate = app.add_subcommand("propagate", "Per-layer error propagation");
    add_run(propagate);

    std::vector<std::string> argv_store{"nnfi"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    try {
        if (fixture->parsed()) {
            const auto seed = require_seed(o);
            write_fixture(o.out, seed);
            out << "wrote " << kFixtureModelFile << "," << kFixtureWeightsFile << "," << kFixtureDataFile << "\n";
        } else if (golden->parsed()) {
            const auto g = load_graph(o);
            const auto data = load_data(o, g);
            const auto res = run_golden(g, data, o.images);
            out << "accuracy," << format_fixed(res.accuracy, 4) << "\n";
            if (!o.out.empty()) write_file(o.out, golden_table(res).to_csv());
            if (!o.ranges_out.empty()) write_file(o.ranges_out, ranges_to_csv(res.ranges));
        } else if (calib->parsed()) {
            const auto g = load_graph(o);
            const auto data = load_data(o, g);
            emit(o.out, ranges_to_csv(run_golden(g, data, o.images).ranges), out);
        } else if (validate->parsed()) {
            const Graph g = o.weights.empty() ? zero_weight_graph(parse_model_description(read_file(o.model)))
                                              : load_model(o.model, o.weights);
            const auto resolved = resolve(parse_config(read_file(o.config)), g);
            // Build injectors too, so combinations only rejected there are caught here.
            RangeMap placeholder;
            for (const auto& l : g.layers()) {
                placeholder[l.path] = {-1.0f, 1.0f};
                placeholder[input_range_key(l.path)] = {-1.0f, 1.0f};
            }
            build_hooks(resolved, g, {0, 0, &placeholder, true, std::nullopt, nullptr});
            out << "ok,enabled_layers," << resolved.enabled_count() << "\n";
        } else if (inject->parsed()) {
            auto c = prepare(o);
            c.run.ranges = &c.ranges;
            const auto table = run_inject(c.graph, c.data, c.tree, c.run);
            emit(o.out, table.to_csv(), out);
            if (!o.observe_out.empty()) {
                const auto resolved = resolve(c.tree, c.graph);
                const auto attach = observer_attachments(resolved);
                ObserverSet set;
                const auto hooks = build_hooks(resolved, c.graph, {c.run.seed, 0, &c.ranges, true, std::nullopt, nullptr});
                for (std::size_t i = 0; i < image_count(c.data, c.run); ++i)
                    dual_forward(c.graph, c.data.samples[i].input, hooks, attach, set);
                write_file(o.observe_out, set.to_csv());
            }
            if (!o.timing_out.empty()) {
                const auto t = timing_report(c.graph, c.data, c.tree, c.run);
                write_file(o.timing_out, t.to_csv());
                out << "overhead_ratio," << format_fixed(t.ratio(), 4) << "\n";
            }
        } else if (sweep->parsed()) {
            auto c = prepare(o);
            c.run.ranges = &c.ranges;
            emit(o.out, run_ber_sweep(c.graph, c.data, c.tree, parse_ber_list(o.ber_list), c.run).to_csv(), out);
        } else if (bitsense->parsed()) {
            auto c = prepare(o);
            c.run.ranges = &c.ranges;
            const auto [lo, hi] = bit_range(o, c);
            emit(o.out, run_bit_sense(c.graph, c.data, c.tree, lo, hi, c.run).to_csv(), out);
        } else if (channel->parsed()) {
            auto c = prepare(o);
            c.run.ranges = &c.ranges;
            const auto table = run_channel_sense(c.graph, c.data, c.tree, o.layer, c.run);
            emit(o.out, table.to_csv(), out);
            if (!o.ranked_out.empty()) write_file(o.ranked_out, ranked_channels_csv(rank_channels(table)));
        } else if (pixel->parsed()) {
            auto c = prepare(o);
            c.run.ranges = &c.ranges;
            const auto res = run_pixel_sense(c.graph, c.data, c.tree, o.layer, c.run);
            emit(o.out, res.table.to_csv(), out);
            if (!o.grid_out.empty()) write_file(o.grid_out, res.grid.to_csv());
        } else if (propagate->parsed()) {
            auto c = prepare(o);
            c.run.ranges = &c.ranges;
            emit(o.out, run_propagation(c.graph, c.data, c.tree, c.run).to_csv(), out);
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

} // namespace nnfi::cli
