#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "nnfi/error.hpp"
#include "nnfi/fault.hpp"
#include "nnfi/graph.hpp"
#include "nnfi/observe.hpp"
#include "nnfi/quant.hpp"
#include "nnfi/text.hpp"

namespace nnfi {

enum class TargetSel { Weight, Activation, Both };
enum class ActSite { Pre, Post };
enum class SelectMode { Ber, FixedCount, FixedPosition };

/// One node of the injection configuration tree. Every field is optional;
/// unset fields inherit from the most specific matching ancestor.
struct InjectionConfigNode {
    std::string pattern; // glob segment as written; empty for the root

    std::optional<bool> enabled;
    std::optional<TargetSel> target;
    std::optional<ActSite> site;
    std::optional<SelectMode> mode;
    std::optional<double> ber;
    std::optional<std::uint64_t> count;
    std::optional<std::vector<PositionEntry>> positions;
    std::optional<Sampling> sampling;
    std::optional<ErrorModelSpec> error_model;
    std::optional<QuantMethod> method;
    std::optional<double> scale;
    std::optional<std::vector<ObserverSpec>> observers;

    std::vector<InjectionConfigNode> children;

    bool sets_nothing() const {
        return !enabled && !target && !site && !mode && !ber && !count && !positions && !sampling && !error_model &&
               !method && !scale && !observers;
    }

    friend bool operator==(const InjectionConfigNode&, const InjectionConfigNode&) = default;
};

namespace config_detail {

// Field overlay used by resolution: later calls win.
inline void overlay(InjectionConfigNode& into, const InjectionConfigNode& from) {
    if (from.enabled) into.enabled = from.enabled;
    if (from.target) into.target = from.target;
    if (from.site) into.site = from.site;
    if (from.mode) into.mode = from.mode;
    if (from.ber) into.ber = from.ber;
    if (from.count) into.count = from.count;
    if (from.positions) into.positions = from.positions;
    if (from.sampling) into.sampling = from.sampling;
    if (from.error_model) into.error_model = from.error_model;
    if (from.method) into.method = from.method;
    if (from.scale) into.scale = from.scale;
    if (from.observers) into.observers = from.observers;
}

// ---- value grammar --------------------------------------------------------

inline TargetSel parse_target(const std::string& v, std::size_t line) {
    if (v == "activation") return TargetSel::Activation;
    if (v == "weight") return TargetSel::Weight;
    if (v == "both") return TargetSel::Both;
    throw ParseError(line, "unknown target '" + v + "'");
}
inline const char* target_text(TargetSel t) {
    return t == TargetSel::Activation ? "activation" : t == TargetSel::Weight ? "weight" : "both";
}

inline ActSite parse_site(const std::string& v, std::size_t line) {
    if (v == "pre") return ActSite::Pre;
    if (v == "post") return ActSite::Post;
    throw ParseError(line, "unknown site '" + v + "'");
}

inline SelectMode parse_mode(const std::string& v, std::size_t line) {
    if (v == "ber") return SelectMode::Ber;
    if (v == "fixed_count") return SelectMode::FixedCount;
    if (v == "fixed_position") return SelectMode::FixedPosition;
    throw ParseError(line, "unknown mode '" + v + "'");
}
inline const char* mode_text(SelectMode m) {
    return m == SelectMode::Ber ? "ber" : m == SelectMode::FixedCount ? "fixed_count" : "fixed_position";
}

inline Sampling parse_sampling(const std::string& v, std::size_t line) {
    if (v == "rounded") return Sampling::Rounded;
    if (v == "poisson") return Sampling::Poisson;
    if (v == "bernoulli") return Sampling::PerBitBernoulli;
    throw ParseError(line, "unknown sampling '" + v + "'");
}
inline const char* sampling_text(Sampling s) {
    return s == Sampling::Rounded ? "rounded" : s == Sampling::Poisson ? "poisson" : "bernoulli";
}

inline std::vector<PositionEntry> parse_positions(const std::string& v, std::size_t line) {
    std::vector<PositionEntry> out;
    for (const auto& item : split(v, ';')) {
        if (item.empty()) continue;
        const auto last = item.rfind(':');
        const auto mid = last == std::string::npos ? std::string::npos : item.rfind(':', last - 1);
        if (last == std::string::npos || mid == std::string::npos || mid == 0)
            throw ParseError(line, "position '" + item + "' is not path:offset:bit");
        PositionEntry p;
        p.path = item.substr(0, mid);
        p.offset = static_cast<std::size_t>(parse_uint(item.substr(mid + 1, last - mid - 1), line));
        p.bit = static_cast<unsigned>(parse_uint(item.substr(last + 1), line));
        out.push_back(std::move(p));
    }
    return out;
}
inline std::string positions_text(const std::vector<PositionEntry>& ps) {
    std::string out;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (i) out += ";";
        out += ps[i].path + ":" + std::to_string(ps[i].offset) + ":" + std::to_string(ps[i].bit);
    }
    return out;
}

inline ErrorModelSpec parse_error_model(const std::string& v, std::size_t line) {
    const auto colon = v.find(':');
    const std::string name = v.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : v.substr(colon + 1);
    auto need_arg = [&] {
        if (arg.empty()) throw ParseError(line, "error model '" + name + "' needs an argument");
    };
    auto no_arg = [&] {
        if (colon != std::string::npos) throw ParseError(line, "error model '" + name + "' takes no argument");
    };
    if (name == "bitflip_random") return no_arg(), ErrorModelSpec{BitFlipRandom{}};
    if (name == "stuck0") return no_arg(), ErrorModelSpec{StuckAtZero{}};
    if (name == "bitflip_fixed") {
        need_arg();
        return BitFlipFixed{static_cast<unsigned>(parse_uint(arg, line))};
    }
    if (name == "value") {
        need_arg();
        return FixedValue{parse_double(arg, line)};
    }
    if (name == "uniform") {
        need_arg();
        const auto parts = split(arg, ',');
        if (parts.size() != 2) throw ParseError(line, "uniform needs <lo>,<hi>");
        UniformRandom u{parse_double(parts[0], line), parse_double(parts[1], line)};
        if (!(u.lo < u.hi)) throw ParseError(line, "uniform needs lo < hi");
        return u;
    }
    if (name == "gauss") {
        need_arg();
        GaussianPerturb g{parse_double(arg, line)};
        if (!(g.sigma > 0.0)) throw ParseError(line, "gauss sigma must be positive");
        return g;
    }
    throw ParseError(line, "unknown error model '" + name + "'");
}

inline std::string error_model_text(const ErrorModelSpec& m) {
    return std::visit(
        [](const auto& e) -> std::string {
            using M = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<M, BitFlipRandom>) return "bitflip_random";
            else if constexpr (std::is_same_v<M, BitFlipFixed>) return "bitflip_fixed:" + std::to_string(e.bit);
            else if constexpr (std::is_same_v<M, StuckAtZero>) return "stuck0";
            else if constexpr (std::is_same_v<M, FixedValue>) return "value:" + format_double(e.value);
            else if constexpr (std::is_same_v<M, UniformRandom>)
                return "uniform:" + format_double(e.lo) + "," + format_double(e.hi);
            else return "gauss:" + format_double(e.sigma);
        },
        m);
}

inline QuantMethod parse_method(const std::string& v, std::size_t line) {
    if (v == "none") return NoQuant{};
    if (v == "float16") return Float16Cast{};
    if (v.rfind("fixed:", 0) == 0) {
        const auto spec = v.substr(6);
        const auto dot = spec.find('.');
        if (dot == std::string::npos) throw ParseError(line, "fixed-point method needs <m>.<n>");
        FixedPoint fp{static_cast<int>(parse_uint(spec.substr(0, dot), line)),
                      static_cast<int>(parse_uint(spec.substr(dot + 1), line))};
        try {
            QuantSpec{fp, std::nullopt}.validate();
        } catch (const ConfigError& e) {
            throw ParseError(line, e.what());
        }
        return fp;
    }
    if (v.rfind("layerwise:", 0) == 0) {
        LayerwiseRange lr{static_cast<int>(parse_uint(v.substr(10), line))};
        try {
            QuantSpec{lr, std::nullopt}.validate();
        } catch (const ConfigError& e) {
            throw ParseError(line, e.what());
        }
        return lr;
    }
    throw ParseError(line, "unknown quantization method '" + v + "'");
}

inline std::string method_text(const QuantMethod& m) {
    if (auto fp = std::get_if<FixedPoint>(&m)) return "fixed:" + std::to_string(fp->int_bits) + "." + std::to_string(fp->frac_bits);
    if (auto lr = std::get_if<LayerwiseRange>(&m)) return "layerwise:" + std::to_string(lr->total_bits);
    if (std::holds_alternative<Float16Cast>(m)) return "float16";
    return "none";
}

inline std::vector<ObserverSpec> parse_observers(const std::string& v, std::size_t line) {
    std::vector<ObserverSpec> out;
    for (const auto& item : split(v, ',')) {
        if (item.empty()) continue;
        if (item == "minmax") out.push_back({ObserverKind::MinMax});
        else if (item == "affected") out.push_back({ObserverKind::AffectedCount});
        else if (item == "mae") out.push_back({ObserverKind::MAE});
        else if (item == "rmse") out.push_back({ObserverKind::RMSE});
        else if (item == "dump") out.push_back({ObserverKind::ValueDump});
        else if (item.rfind("dump:", 0) == 0) {
            const auto n = parse_uint(item.substr(5), line);
            if (n == 0) throw ParseError(line, "dump needs a positive element limit");
            out.push_back({ObserverKind::ValueDump, static_cast<std::size_t>(n)});
        } else {
            throw ParseError(line, "unknown observer '" + item + "'");
        }
    }
    return out;
}

inline std::string observers_text(const std::vector<ObserverSpec>& obs) {
    std::string out;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        if (i) out += ",";
        out += observer_kind_name(obs[i].kind);
        if (obs[i].kind == ObserverKind::ValueDump && obs[i].max_elements != ObserverSpec{}.max_elements)
            out += ":" + std::to_string(obs[i].max_elements);
    }
    return out;
}

inline bool parse_bool(const std::string& v, std::size_t line) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ParseError(line, "expected true or false, got '" + v + "'");
}

template <typename T>
void assign_once(std::optional<T>& slot, T value, const std::string& key, std::size_t line) {
    if (slot) throw ParseError(line, "duplicate key '" + key + "'");
    slot = std::move(value);
}

/// Set one key on a node. Returns false when the key is not a node field.
inline bool set_field(InjectionConfigNode& node, const std::string& key, const std::string& value, std::size_t line) {
    if (key == "enabled") assign_once(node.enabled, parse_bool(value, line), key, line);
    else if (key == "target") assign_once(node.target, parse_target(value, line), key, line);
    else if (key == "site") assign_once(node.site, parse_site(value, line), key, line);
    else if (key == "mode") assign_once(node.mode, parse_mode(value, line), key, line);
    else if (key == "ber") {
        const double ber = parse_double(value, line);
        if (!(ber >= 0.0 && ber <= 1.0)) throw ParseError(line, "ber must lie in [0, 1]");
        assign_once(node.ber, ber, key, line);
    } else if (key == "count") assign_once(node.count, parse_uint(value, line), key, line);
    else if (key == "positions") assign_once(node.positions, parse_positions(value, line), key, line);
    else if (key == "sampling") assign_once(node.sampling, parse_sampling(value, line), key, line);
    else if (key == "error_model") assign_once(node.error_model, parse_error_model(value, line), key, line);
    else if (key == "method") assign_once(node.method, parse_method(value, line), key, line);
    else if (key == "scale") {
        const double s = parse_double(value, line);
        if (!(s > 0.0)) throw ParseError(line, "scale must be positive");
        assign_once(node.scale, s, key, line);
    } else if (key == "observers") assign_once(node.observers, parse_observers(value, line), key, line);
    else return false;
    return true;
}

inline std::pair<std::string, std::string> split_key_value(const std::string& line, std::size_t lineno) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "expected key = value");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(lineno, "missing key");
    return {key, value};
}

inline std::string strip_comment(const std::string& line) {
    const auto hash = line.find('#');
    return hash == std::string::npos ? line : line.substr(0, hash);
}

inline void write_fields(std::string& out, const InjectionConfigNode& n, const std::string& indent) {
    auto kv = [&](const char* key, const std::string& value) { out += indent + key + " = " + value + "\n"; };
    if (n.enabled) kv("enabled", *n.enabled ? "true" : "false");
    if (n.target) kv("target", target_text(*n.target));
    if (n.site) kv("site", *n.site == ActSite::Pre ? "pre" : "post");
    if (n.mode) kv("mode", mode_text(*n.mode));
    if (n.ber) kv("ber", format_double(*n.ber));
    if (n.count) kv("count", std::to_string(*n.count));
    if (n.positions) kv("positions", positions_text(*n.positions));
    if (n.sampling) kv("sampling", sampling_text(*n.sampling));
    if (n.error_model) kv("error_model", error_model_text(*n.error_model));
    if (n.method) kv("method", method_text(*n.method));
    if (n.scale) kv("scale", format_double(*n.scale));
    if (n.observers) kv("observers", observers_text(*n.observers));
}

inline void write_node(std::string& out, const InjectionConfigNode& n, std::size_t depth) {
    const std::string indent(2 * depth, ' ');
    write_fields(out, n, indent);
    for (const auto& child : n.children) {
        out += indent + child.pattern + ":\n";
        write_node(out, child, depth + 1);
    }
}

} // namespace config_detail

// ---------------------------------------------------------------------------
// Parsing and serialization

/// Flat configuration: [injection], [quantize] and [observe] sections. The
/// injection policy applies uniformly to every layer matched by `layers`.
inline InjectionConfigNode parse_easyconfig(const std::string& text) {
    using namespace config_detail;
    InjectionConfigNode root;
    root.enabled = false;
    std::vector<std::string> inject_globs, observe_globs;
    std::optional<std::vector<ObserverSpec>> observers;
    bool have_inject_keys = false;

    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    auto parse_globs = [](const std::string& v, std::size_t line) {
        std::vector<std::string> globs;
        for (const auto& g : split(v, ','))
            if (!g.empty()) globs.push_back(g);
        if (globs.empty()) throw ParseError(line, "layers needs at least one glob");
        return globs;
    };

    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ParseError(lineno, "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "injection" && section != "quantize" && section != "observe")
                throw ParseError(lineno, "unknown section [" + section + "]");
            continue;
        }
        auto [key, value] = split_key_value(line, lineno);
        if (section.empty()) throw ParseError(lineno, "key '" + key + "' outside any section");
        if (section == "injection") {
            if (key == "layers") {
                if (!inject_globs.empty()) throw ParseError(lineno, "duplicate key 'layers'");
                inject_globs = parse_globs(value, lineno);
            } else if (key == "quantize") {
                set_field(root, "method", value, lineno);
            } else if (key == "enabled" || key == "method" || key == "scale" || key == "observers" ||
                       !set_field(root, key, value, lineno)) {
                throw ParseError(lineno, "unknown key '" + key + "' in [injection]");
            } else {
                have_inject_keys = true;
            }
        } else if (section == "quantize") {
            if (key != "method" && key != "scale") throw ParseError(lineno, "unknown key '" + key + "' in [quantize]");
            set_field(root, key, value, lineno);
        } else {
            if (key == "layers") {
                if (!observe_globs.empty()) throw ParseError(lineno, "duplicate key 'layers'");
                observe_globs = parse_globs(value, lineno);
            } else if (key == "observers") {
                if (observers) throw ParseError(lineno, "duplicate key 'observers'");
                observers = parse_observers(value, lineno);
            } else {
                throw ParseError(lineno, "unknown key '" + key + "' in [observe]");
            }
        }
    }
    if (have_inject_keys && inject_globs.empty())
        throw ParseError(lineno, "[injection] settings given without 'layers'");

    for (const auto& g : inject_globs) {
        InjectionConfigNode child;
        child.pattern = g;
        child.enabled = true;
        root.children.push_back(std::move(child));
    }
    if (observers) {
        if (observe_globs.empty()) {
            root.observers = observers;
        } else {
            for (const auto& g : observe_globs) {
                InjectionConfigNode child;
                child.pattern = g;
                child.observers = observers;
                root.children.push_back(std::move(child));
            }
        }
    } else if (!observe_globs.empty()) {
        throw ParseError(lineno, "[observe] layers given without observers");
    }
    return root;
}

/// Indentation-based tree: `key = value` lines and `pattern:` headers, two
/// spaces per nesting level. Child patterns are relative to their parent.
inline InjectionConfigNode parse_config_tree(const std::string& text) {
    using namespace config_detail;
    InjectionConfigNode root;
    std::vector<InjectionConfigNode*> stack{&root};
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string body = strip_comment(raw);
        const std::string line = trim(body);
        if (line.empty()) continue;
        const auto indent = body.find_first_not_of(' ');
        if (body[indent] == '\t') throw ParseError(lineno, "tabs are not allowed for indentation");
        if (indent % 2 != 0) throw ParseError(lineno, "indentation must be a multiple of two spaces");
        const std::size_t level = indent / 2;
        if (level + 1 > stack.size()) throw ParseError(lineno, "unexpected indentation");
        stack.resize(level + 1);

        const bool header = line.back() == ':' && line.find('=') == std::string::npos;
        if (header) {
            InjectionConfigNode child;
            child.pattern = trim(line.substr(0, line.size() - 1));
            if (child.pattern.empty()) throw ParseError(lineno, "empty node path");
            stack.back()->children.push_back(std::move(child));
            stack.push_back(&stack.back()->children.back());
        } else {
            auto [key, value] = split_key_value(line, lineno);
            if (!set_field(*stack.back(), key, value, lineno)) throw ParseError(lineno, "unknown key '" + key + "'");
        }
    }
    return root;
}

/// Canonical tree text: fixed key order, children in declaration order.
inline std::string serialize_config_tree(const InjectionConfigNode& root) {
    std::string out;
    config_detail::write_node(out, root, 0);
    return out;
}

/// Easy files are recognised by their section headers.
inline bool looks_like_easyconfig(const std::string& text) {
    std::istringstream in(text);
    std::string raw;
    while (std::getline(in, raw)) {
        const auto line = trim(config_detail::strip_comment(raw));
        if (line.empty()) continue;
        return line.front() == '[';
    }
    return false;
}

inline InjectionConfigNode parse_config(const std::string& text) {
    return looks_like_easyconfig(text) ? parse_easyconfig(text) : parse_config_tree(text);
}

// ---------------------------------------------------------------------------
// Resolution

struct ResolvedEntry {
    std::string path;
    bool enabled = false;
    TargetSel target = TargetSel::Activation;
    ActSite site = ActSite::Post;
    QuantSpec quant;
    SelectorSpec selector;
    ErrorModelSpec error_model = BitFlipRandom{};
    std::vector<ObserverSpec> observers;

    bool targets_activation() const { return target != TargetSel::Weight; }
    bool targets_weight() const { return target != TargetSel::Activation; }

    friend bool operator==(const ResolvedEntry&, const ResolvedEntry&) = default;
};

struct ResolvedConfig {
    std::vector<ResolvedEntry> entries; // graph layer order

    const ResolvedEntry* find(const std::string& path) const {
        for (const auto& e : entries)
            if (e.path == path) return &e;
        return nullptr;
    }
    std::size_t enabled_count() const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.enabled; }));
    }

    friend bool operator==(const ResolvedConfig&, const ResolvedConfig&) = default;
};

/// A node pattern applies to a layer when it matches the layer path or any
/// dotted prefix of it (so `model.block1` covers `model.block1.conv1`).
inline bool pattern_covers(const std::string& pattern, const std::string& path) {
    if (glob_match(pattern, path)) return true;
    for (std::size_t pos = path.find('.'); pos != std::string::npos; pos = path.find('.', pos + 1))
        if (glob_match(pattern, std::string_view(path).substr(0, pos))) return true;
    return false;
}

namespace config_detail {

struct FlatNode {
    const InjectionConfigNode* node;
    std::string full_pattern;
    std::size_t depth;
};

inline void flatten(const InjectionConfigNode& n, const std::string& full, std::size_t depth, std::vector<FlatNode>& out) {
    out.push_back({&n, full, depth});
    for (const auto& c : n.children) flatten(c, full.empty() ? c.pattern : full + "." + c.pattern, depth + 1, out);
}

inline ResolvedEntry materialize(const std::string& path, const InjectionConfigNode& f) {
    ResolvedEntry e;
    e.path = path;
    e.enabled = f.enabled.value_or(false);
    e.target = f.target.value_or(TargetSel::Activation);
    e.site = f.site.value_or(ActSite::Post);
    e.quant.method = f.method.value_or(QuantMethod{NoQuant{}});
    e.quant.scale_override = f.scale;
    e.observers = f.observers.value_or(std::vector<ObserverSpec>{});
    try {
        e.quant.validate();
    } catch (const ConfigError& err) {
        throw ConfigError(path + ": " + err.what());
    }
    if (!e.enabled) return e;

    if (!f.mode) throw ConfigError(path + ": injection enabled but no selector mode set");
    if (!f.error_model) throw ConfigError(path + ": injection enabled but no error model set");
    switch (*f.mode) {
    case SelectMode::Ber:
        if (!f.ber) throw ConfigError(path + ": mode 'ber' needs a ber value");
        e.selector.mode = RateSelect{*f.ber, f.sampling.value_or(Sampling::Poisson)};
        break;
    case SelectMode::FixedCount:
        if (!f.count) throw ConfigError(path + ": mode 'fixed_count' needs a count");
        e.selector.mode = FixedCount{*f.count};
        break;
    case SelectMode::FixedPosition:
        if (!f.positions) throw ConfigError(path + ": mode 'fixed_position' needs positions");
        e.selector.mode = FixedPosition{*f.positions};
        break;
    }
    e.error_model = *f.error_model;
    try {
        e.selector.validate();
        validate_error_model(e.error_model, e.quant.code_bits(), e.quant.is_integer());
    } catch (const ConfigError& err) {
        throw ConfigError(path + ": " + err.what());
    }
    return e;
}

} // namespace config_detail

/// Most-specific-wins, field by field: for every layer each field comes from
/// the deepest matching node that sets it; among equally deep matches the
/// later declaration wins. Nodes that match no layer are an error.
inline ResolvedConfig resolve(const InjectionConfigNode& tree, const Graph& graph) {
    std::vector<config_detail::FlatNode> flat;
    config_detail::flatten(tree, "", 0, flat);

    for (std::size_t i = 1; i < flat.size(); ++i) {
        const auto& fn = flat[i];
        const bool hit = std::any_of(graph.layers().begin(), graph.layers().end(),
                                     [&](const LayerNode& l) { return pattern_covers(fn.full_pattern, l.path); });
        if (!hit) throw ConfigError("configuration path '" + fn.full_pattern + "' matches no layer");
    }

    std::vector<std::size_t> order(flat.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return flat[a].depth < flat[b].depth; });

    ResolvedConfig out;
    for (const auto& layer : graph.layers()) {
        InjectionConfigNode fields;
        for (auto i : order)
            if (i == 0 || pattern_covers(flat[i].full_pattern, layer.path)) config_detail::overlay(fields, *flat[i].node);
        out.entries.push_back(config_detail::materialize(layer.path, fields));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hook construction

struct BuildOptions {
    std::uint64_t seed = 0;
    std::uint64_t trial = 0;
    const RangeMap* ranges = nullptr;
    bool include_weights = true; // false when weights are corrupted up front
    std::optional<SiteMask> mask;
    ObserverSet* observers = nullptr; // attach min/max and dump observers
};

inline std::string rng_stream_name(const std::string& path, Target target) {
    return path + (target == Target::Weight ? "#weight" : "#activation");
}

inline std::optional<DynamicRange> lookup_range(const BuildOptions& opts, const std::string& key) {
    if (!opts.ranges) return std::nullopt;
    auto it = opts.ranges->find(key);
    if (it == opts.ranges->end()) return std::nullopt;
    return it->second;
}

inline HookFn make_entry_injector(const ResolvedEntry& e, const Graph& graph, Target target, const BuildOptions& opts) {
    SelectorSpec selector = e.selector;
    if (opts.mask) selector.mask = opts.mask;
    InjectorContext ctx{e.path, target, std::nullopt};
    if (std::holds_alternative<LayerwiseRange>(e.quant.method)) {
        if (target == Target::Weight) {
            ctx.range = lookup_range(opts, weight_range_key(e.path));
            if (!ctx.range) ctx.range = tensor_range(*graph.layer(e.path).weight);
        } else {
            const auto key = e.site == ActSite::Post ? e.path : input_range_key(e.path);
            ctx.range = lookup_range(opts, key);
            if (!ctx.range)
                throw ConfigError(e.path + ": layerwise quantization needs a calibrated range for '" + key + "'");
        }
    }
    if (!e.quant.enabled()) validate_error_model(e.error_model, 32, false);
    return make_injector(e.quant, selector, e.error_model, Rng(opts.seed, opts.trial, rng_stream_name(e.path, target)),
                         std::move(ctx));
}

/// One injector hook per enabled (layer, target) plus single-pass observer
/// hooks when an ObserverSet is supplied. Weight targets on layers without
/// weights are skipped.
inline std::vector<Hook> build_hooks(const ResolvedConfig& resolved, const Graph& graph, const BuildOptions& opts = {}) {
    std::vector<Hook> hooks;
    for (const auto& e : resolved.entries) {
        if (!e.enabled) continue;
        const auto& layer = graph.layer(e.path);
        if (e.targets_activation()) {
            const HookSite site = e.site == ActSite::Pre ? HookSite::ActivationPre : HookSite::ActivationPost;
            hooks.push_back({{e.path, site}, make_entry_injector(e, graph, Target::Activation, opts)});
        }
        if (e.targets_weight() && layer.weighted() && opts.include_weights)
            hooks.push_back({{e.path, HookSite::WeightPre}, make_entry_injector(e, graph, Target::Weight, opts)});
    }
    if (opts.observers) {
        ObserverAttachments attach;
        for (const auto& e : resolved.entries)
            if (!e.observers.empty()) attach.emplace_back(e.path, e.observers);
        auto obs = opts.observers->single_pass_hooks(attach);
        hooks.insert(hooks.end(), std::make_move_iterator(obs.begin()), std::make_move_iterator(obs.end()));
    }
    return hooks;
}

/// Permanent weight faults: corrupt the graph's weights once, using the same
/// streams transient weight hooks would. Returns the number of layers hit.
inline std::size_t apply_weight_faults(Graph& graph, const ResolvedConfig& resolved, const BuildOptions& opts = {}) {
    std::size_t touched = 0;
    for (const auto& e : resolved.entries) {
        if (!e.enabled || !e.targets_weight()) continue;
        const auto& layer = graph.layer(e.path);
        if (!layer.weighted()) continue;
        auto injector = make_entry_injector(e, graph, Target::Weight, opts);
        Tensor w = injector({e.path, HookSite::WeightPre}, *layer.weight);
        graph.set_weight(e.path, std::move(w));
        ++touched;
    }
    return touched;
}

inline ObserverAttachments observer_attachments(const ResolvedConfig& resolved) {
    ObserverAttachments out;
    for (const auto& e : resolved.entries)
        if (!e.observers.empty()) out.emplace_back(e.path, e.observers);
    return out;
}

} // namespace nnfi
