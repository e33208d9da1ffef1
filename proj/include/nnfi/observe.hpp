#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nnfi/error.hpp"
#include "nnfi/graph.hpp"
#include "nnfi/tensor.hpp"
#include "nnfi/text.hpp"

namespace nnfi {

enum class ObserverKind { MinMax, AffectedCount, MAE, RMSE, ValueDump };

inline const char* observer_kind_name(ObserverKind k) {
    switch (k) {
    case ObserverKind::MinMax: return "minmax";
    case ObserverKind::AffectedCount: return "affected";
    case ObserverKind::MAE: return "mae";
    case ObserverKind::RMSE: return "rmse";
    case ObserverKind::ValueDump: return "dump";
    }
    return "?";
}

inline bool is_comparison(ObserverKind k) {
    return k == ObserverKind::AffectedCount || k == ObserverKind::MAE || k == ObserverKind::RMSE;
}

struct ObserverSpec {
    ObserverKind kind = ObserverKind::MinMax;
    std::size_t max_elements = 4096; // ValueDump only

    friend bool operator==(const ObserverSpec&, const ObserverSpec&) = default;
};

struct ValueDump {
    Shape shape;
    std::vector<float> values;
    std::vector<float> errors; // faulty - golden, when dumped from a comparison pass
    bool truncated = false;
};

struct ObservationRecord {
    std::string layer_path;
    ObserverSpec spec;

    std::uint64_t n = 0;      // elements accumulated into sums / extremes
    double sum_abs = 0.0;     // sum |g - f|
    double sum_sq = 0.0;      // sum (g - f)^2
    float min = std::numeric_limits<float>::infinity();
    float max = -std::numeric_limits<float>::infinity();
    std::uint64_t affected = 0;
    std::uint64_t total = 0;  // elements compared
    std::uint64_t passes = 0; // forward passes seen
    ValueDump dump;

    double mae() const { return n ? sum_abs / static_cast<double>(n) : 0.0; }
    double rmse() const { return n ? std::sqrt(sum_sq / static_cast<double>(n)) : 0.0; }
    double affected_per_pass() const { return passes ? static_cast<double>(affected) / static_cast<double>(passes) : 0.0; }
    double affected_fraction() const { return total ? static_cast<double>(affected) / static_cast<double>(total) : 0.0; }

    /// Records merge associatively; dumps keep the first non-empty one.
    void merge(const ObservationRecord& o) {
        n += o.n;
        sum_abs += o.sum_abs;
        sum_sq += o.sum_sq;
        min = std::min(min, o.min);
        max = std::max(max, o.max);
        affected += o.affected;
        total += o.total;
        passes += o.passes;
        if (dump.values.empty()) dump = o.dump;
    }
};

inline ObservationRecord make_record(std::string path, ObserverSpec spec) {
    if (spec.kind == ObserverKind::ValueDump && spec.max_elements == 0)
        throw ObserverError("value dump needs max_elements > 0");
    ObservationRecord r;
    r.layer_path = std::move(path);
    r.spec = spec;
    return r;
}

inline void update_minmax(ObservationRecord& rec, const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto v = static_cast<float>(t.value(i));
        if (std::isnan(v)) continue;
        rec.min = std::min(rec.min, v);
        rec.max = std::max(rec.max, v);
    }
    rec.n += t.size();
    ++rec.passes;
}

/// Accumulate golden-vs-faulty divergence. NaN differences propagate into
/// MAE/RMSE; NaN never compares equal for the affected count.
inline void compare(ObservationRecord& rec, const Tensor& golden, const Tensor& faulty) {
    if (golden.shape() != faulty.shape())
        throw ObserverError("compare shape mismatch at " + rec.layer_path + ": " + shape_string(golden.shape()) +
                            " vs " + shape_string(faulty.shape()));
    const std::size_t count = golden.size();
    if (golden.dtype() == DType::F32 && faulty.dtype() == DType::F32) {
        const auto g = golden.f32();
        const auto f = faulty.f32();
        for (std::size_t i = 0; i < count; ++i) {
            if (!(g[i] == f[i])) ++rec.affected;
            const double d = static_cast<double>(f[i]) - static_cast<double>(g[i]);
            rec.sum_abs += std::fabs(d);
            rec.sum_sq += d * d;
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            const double g = golden.value(i), f = faulty.value(i);
            if (!(g == f)) ++rec.affected;
            const double d = f - g;
            rec.sum_abs += std::fabs(d);
            rec.sum_sq += d * d;
        }
    }
    rec.n += count;
    rec.total += count;
    ++rec.passes;
}

/// Store up to max_elements values (and errors against `golden` if given).
inline void dump_values(ObservationRecord& rec, const Tensor& t, const Tensor* golden = nullptr) {
    if (rec.spec.max_elements == 0) throw ObserverError("value dump needs max_elements > 0");
    auto& d = rec.dump;
    d.shape = t.shape();
    const std::size_t keep = std::min(t.size(), rec.spec.max_elements);
    d.truncated = keep < t.size();
    d.values.resize(keep);
    d.errors.clear();
    for (std::size_t i = 0; i < keep; ++i) d.values[i] = static_cast<float>(t.value(i));
    if (golden) {
        d.errors.resize(keep);
        for (std::size_t i = 0; i < keep; ++i) d.errors[i] = static_cast<float>(t.value(i) - golden->value(i));
    }
    ++rec.passes;
}

// ---------------------------------------------------------------------------

/// Flattened dump with a shape header; floats are written in shortest
/// round-trip form.
inline std::string dump_to_csv(const ValueDump& d) {
    std::string out = "# shape=" + shape_string(d.shape) + " truncated=" + (d.truncated ? "1" : "0") + "\n";
    const bool errors = !d.errors.empty();
    out += errors ? "index,value,error\n" : "index,value\n";
    for (std::size_t i = 0; i < d.values.size(); ++i) {
        out += std::to_string(i) + "," + format_float(d.values[i]);
        if (errors) out += "," + format_float(d.errors[i]);
        out += "\n";
    }
    return out;
}

inline ValueDump dump_from_csv(const std::string& text) {
    ValueDump d;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.rfind("# shape=", 0) == 0) {
            std::istringstream hdr(line.substr(8));
            std::string dims, trunc;
            hdr >> dims >> trunc;
            for (const auto& e : split(dims, 'x')) d.shape.push_back(static_cast<std::size_t>(parse_uint(e, lineno)));
            d.truncated = trunc == "truncated=1";
            continue;
        }
        if (line.empty() || line.rfind("index,", 0) == 0) continue;
        const auto fields = split(line, ',');
        if (fields.size() < 2) throw ParseError(lineno, "malformed dump row");
        d.values.push_back(static_cast<float>(parse_double(fields[1], lineno)));
        if (fields.size() > 2) d.errors.push_back(static_cast<float>(parse_double(fields[2], lineno)));
    }
    return d;
}

/// A set of records keyed by (layer, observer kind), kept in insertion order.
class ObserverSet {
public:
    ObservationRecord& record(const std::string& path, const ObserverSpec& spec) {
        const auto key = std::make_pair(path, spec.kind);
        auto it = index_.find(key);
        if (it != index_.end()) return records_[it->second];
        index_.emplace(key, records_.size());
        records_.push_back(make_record(path, spec));
        return records_.back();
    }

    const ObservationRecord* find(const std::string& path, ObserverKind kind) const {
        auto it = index_.find(std::make_pair(path, kind));
        return it == index_.end() ? nullptr : &records_[it->second];
    }

    const std::vector<ObservationRecord>& records() const noexcept { return records_; }
    bool empty() const noexcept { return records_.empty(); }

    void merge(const ObserverSet& other) {
        for (const auto& r : other.records_) record(r.layer_path, r.spec).merge(r);
    }

    /// Hooks for observers that need no golden reference (min/max, dumps).
    /// The set must outlive the returned hooks.
    std::vector<Hook> single_pass_hooks(const std::vector<std::pair<std::string, std::vector<ObserverSpec>>>& attach) {
        std::vector<Hook> hooks;
        for (const auto& [path, specs] : attach) {
            for (const auto& spec : specs) {
                if (is_comparison(spec.kind)) continue;
                record(path, spec);
                const std::size_t idx = index_.at(std::make_pair(path, spec.kind));
                hooks.push_back({{path, HookSite::ActivationPost}, [this, idx](const HookPoint&, Tensor t) {
                                     auto& rec = records_[idx];
                                     if (rec.spec.kind == ObserverKind::MinMax) update_minmax(rec, t);
                                     else dump_values(rec, t);
                                     return t;
                                 }});
            }
        }
        return hooks;
    }

    /// `layer,kind,n,value` rows with finalized metrics.
    std::string to_csv() const {
        std::string out = "layer,kind,n,value\n";
        auto row = [&out](const std::string& layer, const char* kind, std::uint64_t n, double v) {
            out += layer + "," + kind + "," + std::to_string(n) + "," + format_double(v) + "\n";
        };
        for (const auto& r : records_) {
            switch (r.spec.kind) {
            case ObserverKind::MinMax:
                row(r.layer_path, "min", r.n, r.n ? r.min : 0.0);
                row(r.layer_path, "max", r.n, r.n ? r.max : 0.0);
                break;
            case ObserverKind::AffectedCount:
                row(r.layer_path, "affected", r.total, static_cast<double>(r.affected));
                row(r.layer_path, "affected_mean", r.passes, r.affected_per_pass());
                row(r.layer_path, "affected_fraction", r.total, r.affected_fraction());
                break;
            case ObserverKind::MAE: row(r.layer_path, "mae", r.n, r.mae()); break;
            case ObserverKind::RMSE: row(r.layer_path, "rmse", r.n, r.rmse()); break;
            case ObserverKind::ValueDump:
                row(r.layer_path, "dump", r.dump.values.size(), static_cast<double>(r.dump.values.size()));
                break;
            }
        }
        return out;
    }

private:
    std::vector<ObservationRecord> records_;
    std::map<std::pair<std::string, ObserverKind>, std::size_t> index_;
};

using ObserverAttachments = std::vector<std::pair<std::string, std::vector<ObserverSpec>>>;

struct DualResult {
    Tensor golden;
    Tensor faulty;
};

/// Golden pass (no injection) caching the observed activations, then a
/// faulty pass with `injection` hooks whose activations are compared against
/// the cache. Observation hooks run after injection hooks at the same site.
inline DualResult dual_forward(const Graph& graph, const Tensor& input, const std::vector<Hook>& injection,
                               const ObserverAttachments& observers, ObserverSet& records) {
    for (const auto& [path, specs] : observers) {
        if (!graph.index_of(path)) throw ObserverError("observer attached to unknown layer '" + path + "'");
        for (const auto& spec : specs) records.record(path, spec);
    }

    std::vector<Tensor> cache(observers.size());
    std::vector<Hook> golden_hooks;
    for (std::size_t slot = 0; slot < observers.size(); ++slot) {
        const auto& [path, specs] = observers[slot];
        golden_hooks.push_back({{path, HookSite::ActivationPost}, [&, slot](const HookPoint&, Tensor t) {
                                    cache[slot] = t;
                                    for (const auto& spec : observers[slot].second)
                                        if (spec.kind == ObserverKind::MinMax)
                                            update_minmax(records.record(observers[slot].first, spec), t);
                                    return t;
                                }});
    }
    DualResult out;
    out.golden = forward(graph, input, golden_hooks);

    std::vector<Hook> faulty_hooks = injection;
    for (std::size_t slot = 0; slot < observers.size(); ++slot) {
        const auto& path = observers[slot].first;
        faulty_hooks.push_back({{path, HookSite::ActivationPost}, [&, slot](const HookPoint&, Tensor t) {
                                    for (const auto& spec : observers[slot].second) {
                                        auto& rec = records.record(observers[slot].first, spec);
                                        if (is_comparison(spec.kind)) compare(rec, cache[slot], t);
                                        else if (spec.kind == ObserverKind::ValueDump) dump_values(rec, t, &cache[slot]);
                                    }
                                    return t;
                                }});
    }
    out.faulty = forward(graph, input, faulty_hooks);
    return out;
}

inline std::pair<DualResult, ObserverSet> dual_forward(const Graph& graph, const Tensor& input,
                                                       const std::vector<Hook>& injection,
                                                       const ObserverAttachments& observers) {
    ObserverSet set;
    auto res = dual_forward(graph, input, injection, observers, set);
    return {std::move(res), std::move(set)};
}

} // namespace nnfi
