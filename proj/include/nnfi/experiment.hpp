#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "nnfi/config.hpp"
#include "nnfi/error.hpp"
#include "nnfi/fault.hpp"
#include "nnfi/graph.hpp"
#include "nnfi/model_io.hpp"
#include "nnfi/observe.hpp"
#include "nnfi/quant.hpp"
#include "nnfi/text.hpp"

namespace nnfi {

// ---------------------------------------------------------------------------
// Result table

struct ResultRow {
    std::string key;
    std::string metric;
    double value = 0.0;
    std::size_t trials = 1;
    std::optional<double> stderr_value;

    friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct ResultTable {
    std::vector<ResultRow> rows;

    void add(std::string key, std::string metric, double value, std::size_t trials = 1,
             std::optional<double> err = std::nullopt) {
        rows.push_back({std::move(key), std::move(metric), value, trials, err});
    }

    const ResultRow* find(const std::string& key, const std::string& metric) const {
        for (const auto& r : rows)
            if (r.key == key && r.metric == metric) return &r;
        return nullptr;
    }

    double value(const std::string& key, const std::string& metric) const {
        const auto* r = find(key, metric);
        if (!r) throw ArgumentError("no result row " + key + "/" + metric);
        return r->value;
    }

    std::string to_csv() const {
        std::string out = "key,metric,value,trials,stderr\n";
        for (const auto& r : rows)
            out += r.key + "," + r.metric + "," + format_double(r.value) + "," + std::to_string(r.trials) + "," +
                   (r.stderr_value ? format_double(*r.stderr_value) : "") + "\n";
        return out;
    }

    friend bool operator==(const ResultTable&, const ResultTable&) = default;
};

/// Mean and standard error of the mean (sample standard deviation / sqrt(n)).
struct MeanStderr {
    double mean = 0.0;
    std::optional<double> stderr_value;
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
    MeanStderr out;
    if (xs.empty()) return out;
    double sum = 0.0;
    for (double x : xs) sum += x;
    out.mean = sum / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - out.mean) * (x - out.mean);
        out.stderr_value = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run options and trial machinery

struct RunOptions {
    std::uint64_t seed = 0;
    std::size_t trials = 1;
    std::size_t jobs = 1;
    std::size_t max_images = 0;     // 0 = whole dataset
    bool permanent_weights = true;  // corrupt a weight copy once per trial
    const RangeMap* ranges = nullptr;

    void validate() const {
        if (trials == 0) throw ConfigError("trials must be at least 1");
        if (jobs == 0) throw ConfigError("jobs must be at least 1");
    }
};

/// Runs `count` independent tasks on up to `jobs` threads. Results land at
/// their own index, so the output does not depend on scheduling.
template <typename T>
std::vector<T> parallel_map(std::size_t count, std::size_t jobs, const std::function<T(std::size_t)>& task) {
    std::vector<T> out(count);
    jobs = std::max<std::size_t>(1, std::min(jobs, count));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) out[i] = task(i);
        return out;
    }
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) {
        pool.emplace_back([&, j] {
            try {
                for (std::size_t i = j; i < count; i += jobs) out[i] = task(i);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

inline std::size_t image_count(const Dataset& data, const RunOptions& opts) {
    if (data.empty()) throw DataError("dataset is empty");
    return opts.max_images == 0 ? data.size() : std::min(opts.max_images, data.size());
}

inline void check_dataset(const Graph& graph, const Dataset& data) {
    if (data.empty()) throw DataError("dataset is empty");
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data.samples[i].input.shape() != graph.input_shape())
            throw DataError("sample " + std::to_string(i) + " has shape " + shape_string(data.samples[i].input.shape()) +
                            ", graph expects " + shape_string(graph.input_shape()));
}

/// Fault-free logits for every sample.
inline std::vector<Tensor> golden_logits(const Graph& graph, const Dataset& data, std::size_t count) {
    std::vector<Tensor> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(forward(graph, data.samples[i].input));
    return out;
}

/// Per-trial totals over the evaluated images.
struct TrialStats {
    std::size_t correct = 0;
    std::size_t images = 0;
    std::size_t elements = 0; // output elements compared
    double sum_abs = 0.0;
    double sum_sq = 0.0;

    double accuracy() const { return images ? static_cast<double>(correct) / static_cast<double>(images) : 0.0; }
    double mae() const { return elements ? sum_abs / static_cast<double>(elements) : 0.0; }
    double rmse() const { return elements ? std::sqrt(sum_sq / static_cast<double>(elements)) : 0.0; }
};

/// One trial: fresh RNG streams keyed by (seed, trial), optional permanent
/// weight corruption, then inference over the first `count` images with
/// output error measured against the golden logits.
inline TrialStats run_trial(const Graph& graph, const Dataset& data, const std::vector<Tensor>& golden,
                            const ResolvedConfig& resolved, std::uint64_t trial, const RunOptions& opts,
                            const std::optional<SiteMask>& mask = std::nullopt) {
    BuildOptions build{opts.seed, trial, opts.ranges, true, mask, nullptr};
    std::optional<Graph> corrupted;
    if (opts.permanent_weights) {
        corrupted = graph;
        apply_weight_faults(*corrupted, resolved, build);
        build.include_weights = false;
    }
    const Graph& g = corrupted ? *corrupted : graph;
    const auto hooks = build_hooks(resolved, g, build);

    TrialStats s;
    for (std::size_t i = 0; i < golden.size(); ++i) {
        const Tensor out = forward(g, data.samples[i].input, hooks);
        s.correct += argmax(out) == data.samples[i].label;
        ++s.images;
        const auto a = golden[i].f32();
        const auto b = out.f32();
        for (std::size_t j = 0; j < a.size(); ++j) {
            const double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
            s.sum_abs += std::fabs(d);
            s.sum_sq += d * d;
        }
        s.elements += a.size();
    }
    return s;
}

inline std::vector<TrialStats> run_trials(const Graph& graph, const Dataset& data, const std::vector<Tensor>& golden,
                                          const ResolvedConfig& resolved, const RunOptions& opts,
                                          const std::optional<SiteMask>& mask = std::nullopt,
                                          std::uint64_t trial_base = 0) {
    opts.validate();
    return parallel_map<TrialStats>(opts.trials, opts.jobs, [&](std::size_t t) {
        return run_trial(graph, data, golden, resolved, trial_base + t, opts, mask);
    });
}

inline void add_summary_rows(ResultTable& table, const std::string& key, const std::vector<TrialStats>& stats,
                             bool with_accuracy = true) {
    std::vector<double> acc, err, rmse, mae;
    for (const auto& s : stats) {
        acc.push_back(s.accuracy());
        err.push_back(1.0 - s.accuracy());
        rmse.push_back(s.rmse());
        mae.push_back(s.mae());
    }
    auto row = [&](const char* metric, const std::vector<double>& xs) {
        const auto m = mean_stderr(xs);
        table.add(key, metric, m.mean, xs.size(), m.stderr_value);
    };
    if (with_accuracy) {
        row("accuracy", acc);
        row("error_rate", err);
    }
    row("rmse", rmse);
    row("mae", mae);
}

// ---------------------------------------------------------------------------
// Runners

struct GoldenResult {
    double accuracy = 0.0;
    std::size_t images = 0;
    RangeMap ranges;
};

/// Top-1 accuracy of the fault-free model plus calibrated activation ranges.
inline GoldenResult run_golden(const Graph& graph, const Dataset& data, std::size_t max_images = 0) {
    check_dataset(graph, data);
    const std::size_t n = max_images == 0 ? data.size() : std::min(max_images, data.size());
    GoldenResult out;
    std::vector<Tensor> inputs;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        correct += argmax(forward(graph, data.samples[i].input)) == data.samples[i].label;
        inputs.push_back(data.samples[i].input);
    }
    out.images = n;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    out.ranges = calibrate(graph, inputs);
    return out;
}

inline ResultTable golden_table(const GoldenResult& g) {
    ResultTable t;
    t.add("golden", "accuracy", g.accuracy);
    t.add("golden", "error_rate", 1.0 - g.accuracy);
    return t;
}

/// Configured injection repeated over `trials` trials.
inline ResultTable run_inject(const Graph& graph, const Dataset& data, const InjectionConfigNode& tree,
                              const RunOptions& opts) {
    check_dataset(graph, data);
    const auto resolved = resolve(tree, graph);
    const auto golden = golden_logits(graph, data, image_count(data, opts));
    ResultTable table;
    add_summary_rows(table, "inject", run_trials(graph, data, golden, resolved, opts));
    return table;
}

namespace experiment_detail {

// Set a field on the root and clear it everywhere below so the root value
// reaches every layer.
template <typename F>
void force_everywhere(InjectionConfigNode& node, F&& clear, bool root = true) {
    if (!root) clear(node);
    for (auto& c : node.children) force_everywhere(c, clear, false);
}

inline void check_increasing(const std::vector<double>& bers) {
    if (bers.empty()) throw ConfigError("ber list is empty");
    for (std::size_t i = 0; i < bers.size(); ++i) {
        if (!(bers[i] >= 0.0 && bers[i] <= 1.0)) throw ConfigError("ber values must lie in [0, 1]");
        if (i && !(bers[i] > bers[i - 1])) throw ConfigError("ber list must be strictly increasing");
    }
}

inline std::string key_of(const char* name, const std::string& v) { return std::string(name) + "=" + v; }

} // namespace experiment_detail

/// Accuracy versus bit error rate. The template supplies everything except
/// the rate; each point runs `trials` independent trials.
inline ResultTable run_ber_sweep(const Graph& graph, const Dataset& data, const InjectionConfigNode& tmpl,
                                 const std::vector<double>& bers, const RunOptions& opts) {
    using namespace experiment_detail;
    check_dataset(graph, data);
    check_increasing(bers);
    opts.validate();
    const auto golden = golden_logits(graph, data, image_count(data, opts));
    ResultTable table;
    for (std::size_t p = 0; p < bers.size(); ++p) {
        InjectionConfigNode tree = tmpl;
        tree.ber = bers[p];
        tree.mode = SelectMode::Ber;
        force_everywhere(tree, [](InjectionConfigNode& n) {
            n.ber.reset();
            n.mode.reset();
        });
        const auto resolved = resolve(tree, graph);
        const auto stats = run_trials(graph, data, golden, resolved, opts, std::nullopt, p * opts.trials);
        add_summary_rows(table, key_of("ber", format_double(bers[p])), stats);
    }
    return table;
}

/// Per-bit sensitivity: the template's error model is replaced by a flip of
/// one fixed bit. All bits share the same trial ids, so they see the same
/// selected elements.
inline ResultTable run_bit_sense(const Graph& graph, const Dataset& data, const InjectionConfigNode& tmpl,
                                 unsigned bit_lo, unsigned bit_hi, const RunOptions& opts) {
    using namespace experiment_detail;
    check_dataset(graph, data);
    if (bit_lo > bit_hi) throw ConfigError("bit range is empty");
    const auto golden = golden_logits(graph, data, image_count(data, opts));
    ResultTable table;
    for (unsigned b = bit_lo; b <= bit_hi; ++b) {
        InjectionConfigNode tree = tmpl;
        tree.error_model = BitFlipFixed{b};
        force_everywhere(tree, [](InjectionConfigNode& n) { n.error_model.reset(); });
        const auto resolved = resolve(tree, graph);
        add_summary_rows(table, key_of("bit", std::to_string(b)), run_trials(graph, data, golden, resolved, opts));
    }
    return table;
}

namespace experiment_detail {

struct MaskedTarget {
    ResolvedConfig resolved;
    Shape shape; // activation shape the mask indexes
};

// Resolve the template at one layer and keep only that layer enabled.
inline MaskedTarget masked_target(const Graph& graph, const InjectionConfigNode& tmpl, const std::string& layer,
                                  bool need_conv) {
    const auto idx = graph.index_of(layer);
    if (!idx) throw ConfigError("no layer named '" + layer + "'");
    if (need_conv && graph.layers()[*idx].kind != LayerKind::Conv2d)
        throw ConfigError(layer + " is not a conv2d layer");
    InjectionConfigNode tree = tmpl;
    tree.enabled = false;
    InjectionConfigNode only;
    only.pattern = layer;
    only.enabled = true;
    force_everywhere(tree, [](InjectionConfigNode& n) { n.enabled.reset(); });
    tree.children.push_back(std::move(only));
    MaskedTarget out{resolve(tree, graph), {}};
    const auto* e = out.resolved.find(layer);
    if (!e->enabled) throw ConfigError(layer + " is not enabled by the configuration");
    if (e->target != TargetSel::Activation) throw ConfigError("sensitivity maps need an activation target");
    out.shape = e->site == ActSite::Post ? graph.output_shapes()[*idx] : graph.input_shape_of(*idx);
    if (out.shape.size() != 4) throw ConfigError(layer + " activation has no spatial extent");
    return out;
}

} // namespace experiment_detail

/// Output RMSE when injection is restricted to one channel of a conv
/// layer's activation, for each channel in turn.
inline ResultTable run_channel_sense(const Graph& graph, const Dataset& data, const InjectionConfigNode& tmpl,
                                     const std::string& layer, const RunOptions& opts) {
    using namespace experiment_detail;
    check_dataset(graph, data);
    const auto target = masked_target(graph, tmpl, layer, true);
    const auto golden = golden_logits(graph, data, image_count(data, opts));
    ResultTable table;
    for (std::size_t c = 0; c < target.shape[1]; ++c) {
        SiteMask mask;
        mask.channel = c;
        add_summary_rows(table, key_of("channel", std::to_string(c)),
                         run_trials(graph, data, golden, target.resolved, opts, mask), false);
    }
    return table;
}

struct RankedChannel {
    std::size_t channel = 0;
    double rmse = 0.0;
};

/// Channels ordered by ascending output RMSE (ties by channel index).
inline std::vector<RankedChannel> rank_channels(const ResultTable& table) {
    std::vector<RankedChannel> out;
    for (const auto& r : table.rows)
        if (r.metric == "rmse" && r.key.rfind("channel=", 0) == 0)
            out.push_back({static_cast<std::size_t>(parse_uint(r.key.substr(8))), r.value});
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return a.rmse < b.rmse || (a.rmse == b.rmse && a.channel < b.channel);
    });
    return out;
}

inline std::string ranked_channels_csv(const std::vector<RankedChannel>& ranked) {
    std::string out = "rank,channel,rmse\n";
    for (std::size_t i = 0; i < ranked.size(); ++i)
        out += std::to_string(i) + "," + std::to_string(ranked[i].channel) + "," + format_double(ranked[i].rmse) + "\n";
    return out;
}

struct PixelGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> rmse; // row-major H x W

    double at(std::size_t y, std::size_t x) const { return rmse.at(y * width + x); }

    std::string to_csv() const {
        std::string out;
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) out += (x ? "," : "") + format_double(at(y, x));
            out += "\n";
        }
        return out;
    }
};

struct PixelSenseResult {
    ResultTable table;
    PixelGrid grid;
};

/// Output RMSE when injection is restricted to one spatial position (all
/// channels) of a layer's activation, for each position.
inline PixelSenseResult run_pixel_sense(const Graph& graph, const Dataset& data, const InjectionConfigNode& tmpl,
                                        const std::string& layer, const RunOptions& opts) {
    using namespace experiment_detail;
    check_dataset(graph, data);
    const auto target = masked_target(graph, tmpl, layer, false);
    const auto golden = golden_logits(graph, data, image_count(data, opts));
    PixelSenseResult out;
    out.grid.height = target.shape[2];
    out.grid.width = target.shape[3];
    for (std::size_t y = 0; y < out.grid.height; ++y)
        for (std::size_t x = 0; x < out.grid.width; ++x) {
            SiteMask mask;
            mask.pixel = std::make_pair(y, x);
            const auto stats = run_trials(graph, data, golden, target.resolved, opts, mask);
            const std::string key = key_of("pixel", std::to_string(y) + "x" + std::to_string(x));
            add_summary_rows(out.table, key, stats, false);
            out.grid.rmse.push_back(out.table.value(key, "rmse"));
        }
    return out;
}

/// Per-layer divergence after injection: affected elements per image (and
/// as a fraction of the layer size), MAE and RMSE against the golden run.
inline ResultTable run_propagation(const Graph& graph, const Dataset& data, const InjectionConfigNode& tree,
                                   const RunOptions& opts) {
    check_dataset(graph, data);
    opts.validate();
    const auto resolved = resolve(tree, graph);
    const std::size_t n = image_count(data, opts);
    ObserverAttachments attach;
    for (const auto& l : graph.layers())
        attach.emplace_back(l.path, std::vector<ObserverSpec>{{ObserverKind::AffectedCount}, {ObserverKind::MAE},
                                                              {ObserverKind::RMSE}});

    const auto sets = parallel_map<ObserverSet>(opts.trials, opts.jobs, [&](std::size_t t) {
        BuildOptions build{opts.seed, t, opts.ranges, true, std::nullopt, nullptr};
        const auto hooks = build_hooks(resolved, graph, build);
        ObserverSet set;
        for (std::size_t i = 0; i < n; ++i) dual_forward(graph, data.samples[i].input, hooks, attach, set);
        return set;
    });

    ResultTable table;
    for (const auto& l : graph.layers()) {
        std::vector<double> per_pass, fraction, mae, rmse;
        for (const auto& set : sets) {
            per_pass.push_back(set.find(l.path, ObserverKind::AffectedCount)->affected_per_pass());
            fraction.push_back(set.find(l.path, ObserverKind::AffectedCount)->affected_fraction());
            mae.push_back(set.find(l.path, ObserverKind::MAE)->mae());
            rmse.push_back(set.find(l.path, ObserverKind::RMSE)->rmse());
        }
        auto row = [&](const char* metric, const std::vector<double>& xs) {
            const auto m = mean_stderr(xs);
            table.add(l.path, metric, m.mean, xs.size(), m.stderr_value);
        };
        row("affected", per_pass);
        row("affected_fraction", fraction);
        row("mae", mae);
        row("rmse", rmse);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Timing

struct PhaseTiming {
    double mean = 0.0;
    double stddev = 0.0;
};

struct TimingReport {
    PhaseTiming golden;
    PhaseTiming injected;
    std::size_t repetitions = 0;

    double ratio() const { return golden.mean > 0.0 ? injected.mean / golden.mean : 0.0; }

    std::string to_csv() const {
        return "phase,seconds_mean,seconds_std\n"
               "golden," + format_fixed(golden.mean, 6) + "," + format_fixed(golden.stddev, 6) + "\n" +
               "injected," + format_fixed(injected.mean, 6) + "," + format_fixed(injected.stddev, 6) + "\n";
    }
};

/// Wall clock of a plain pass over the dataset versus the same pass with the
/// configured injection hooks. Repetitions alternate the two phases.
inline TimingReport timing_report(const Graph& graph, const Dataset& data, const InjectionConfigNode& tree,
                                  const RunOptions& opts, std::size_t repetitions = 3) {
    check_dataset(graph, data);
    if (repetitions < 3) throw ConfigError("timing needs at least three repetitions");
    const auto resolved = resolve(tree, graph);
    const std::size_t n = image_count(data, opts);
    using clock = std::chrono::steady_clock;
    std::vector<double> golden_s, injected_s;
    volatile std::size_t sink = 0;
    for (std::size_t r = 0; r < repetitions; ++r) {
        auto t0 = clock::now();
        for (std::size_t i = 0; i < n; ++i) sink = sink + argmax(forward(graph, data.samples[i].input));
        auto t1 = clock::now();
        const auto hooks = build_hooks(resolved, graph, {opts.seed, r, opts.ranges, true, std::nullopt, nullptr});
        for (std::size_t i = 0; i < n; ++i) sink = sink + argmax(forward(graph, data.samples[i].input, hooks));
        auto t2 = clock::now();
        golden_s.push_back(std::chrono::duration<double>(t1 - t0).count());
        injected_s.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    auto summarize = [](const std::vector<double>& xs) {
        PhaseTiming p;
        for (double x : xs) p.mean += x;
        p.mean /= static_cast<double>(xs.size());
        for (double x : xs) p.stddev += (x - p.mean) * (x - p.mean);
        p.stddev = std::sqrt(p.stddev / static_cast<double>(xs.size() - 1));
        return p;
    };
    return {summarize(golden_s), summarize(injected_s), repetitions};
}

} // namespace nnfi
