#pragma once

// Independent reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "nnfi/nnfi.hpp"

namespace oracle {

using nnfi::Tensor;

inline nnfi::Graph fixture_graph() {
    return nnfi::load_model(std::string(NNFI_FIXTURE_DIR) + "/model.txt", std::string(NNFI_FIXTURE_DIR) + "/weights.mrfw");
}

inline nnfi::Dataset fixture_data(const nnfi::Graph& g) {
    return nnfi::load_dataset(std::string(NNFI_FIXTURE_DIR) + "/data.mrfd", g.input_shape());
}

inline Tensor random_tensor(const nnfi::Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    nnfi::Rng rng(seed, 0, "oracle.tensor");
    Tensor t(shape);
    for (auto& v : t.f32()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
    return t;
}

/// Direct seven-loop cross-correlation with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, std::size_t stride, std::size_t pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3], K = ws[0], kh = ws[2], kw = ws[3];
    const std::size_t OH = (H + 2 * pad - kh) / stride + 1, OW = (W + 2 * pad - kw) / stride + 1;
    Tensor out({N, K, OH, OW});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    double acc = b ? b->f32()[k] : 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j) {
                                const long y = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                                const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                                acc += static_cast<double>(x.f32()[((n * C + c) * H + y) * W + xx]) *
                                       w.f32()[((k * C + c) * kh + i) * kw + j];
                            }
                    out.f32()[((n * K + k) * OH + oy) * OW + ox] = static_cast<float>(acc);
                }
    return out;
}

struct Divergence {
    std::size_t affected = 0;
    double mae = 0.0;
    double rmse = 0.0;
};

inline Divergence divergence(const Tensor& g, const Tensor& f) {
    Divergence d;
    long double abs_sum = 0, sq_sum = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const long double a = g.value(i), b = f.value(i);
        if (!(a == b)) ++d.affected;
        abs_sum += std::fabs(a - b);
        sq_sum += (a - b) * (a - b);
    }
    d.mae = static_cast<double>(abs_sum / g.size());
    d.rmse = static_cast<double>(std::sqrt(sq_sum / g.size()));
    return d;
}

inline double rel_err(double a, double b) {
    const double scale = std::max({std::fabs(a), std::fabs(b), 1e-300});
    return std::fabs(a - b) / scale;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (static_cast<double>(i + j) / 2.0) + 1.0;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += rx[i], my += ry[i];
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

/// Two-sample chi-square homogeneity test on count histograms. Bins with a
/// small pooled expectation are merged into their neighbour.
inline double chi_square_two_sample(const std::map<std::uint64_t, std::uint64_t>& a,
                                    const std::map<std::uint64_t, std::uint64_t>& b) {
    std::map<std::uint64_t, std::pair<double, double>> bins;
    for (const auto& [k, v] : a) bins[k].first += static_cast<double>(v);
    for (const auto& [k, v] : b) bins[k].second += static_cast<double>(v);
    double na = 0, nb = 0;
    for (const auto& [k, v] : bins) na += v.first, nb += v.second;
    std::vector<std::pair<double, double>> merged;
    std::pair<double, double> acc{0, 0};
    for (const auto& [k, v] : bins) {
        acc.first += v.first;
        acc.second += v.second;
        if (acc.first + acc.second >= 10.0) {
            merged.push_back(acc);
            acc = {0, 0};
        }
    }
    if (acc.first + acc.second > 0) {
        if (merged.empty()) merged.push_back(acc);
        else merged.back().first += acc.first, merged.back().second += acc.second;
    }
    if (merged.size() < 2) return 1.0;
    double stat = 0;
    for (const auto& [oa, ob] : merged) {
        const double tot = oa + ob;
        const double ea = tot * na / (na + nb), eb = tot * nb / (na + nb);
        stat += (oa - ea) * (oa - ea) / ea + (ob - eb) * (ob - eb) / eb;
    }
    boost::math::chi_squared dist(static_cast<double>(merged.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

/// Goodness of fit of observed counts against expected counts.
inline double chi_square_gof(const std::vector<double>& observed, const std::vector<double>& expected) {
    double stat = 0;
    for (std::size_t i = 0; i < observed.size(); ++i)
        stat += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
    boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

/// Per-field resolution by walking every node that covers the layer and
/// keeping, for each field, the deepest setter (later wins at equal depth).
struct WalkResult {
    std::optional<bool> enabled;
    std::optional<double> ber;
    std::optional<nnfi::QuantMethod> method;
    std::optional<nnfi::ErrorModelSpec> error_model;
    std::optional<nnfi::TargetSel> target;
};

inline bool covers(const std::string& pattern, const std::string& path) {
    std::string prefix;
    for (std::size_t i = 0; i <= path.size(); ++i) {
        if (i == path.size() || path[i] == '.') {
            if (nnfi::glob_match(pattern, path.substr(0, i))) return true;
        }
    }
    return false;
}

inline void walk(const nnfi::InjectionConfigNode& node, const std::string& full, int depth, const std::string& path,
                 WalkResult& r, std::map<std::string, int>& best) {
    const bool hit = depth == 0 || covers(full, path);
    auto take = [&](const char* field, const auto& src, auto& dst) {
        if (hit && src && depth >= best[field]) {
            dst = src;
            best[field] = depth;
        }
    };
    take("enabled", node.enabled, r.enabled);
    take("ber", node.ber, r.ber);
    take("method", node.method, r.method);
    take("error_model", node.error_model, r.error_model);
    take("target", node.target, r.target);
    for (const auto& c : node.children) walk(c, full.empty() ? c.pattern : full + "." + c.pattern, depth + 1, path, r, best);
}

inline WalkResult ancestor_walk(const nnfi::InjectionConfigNode& root, const std::string& path) {
    WalkResult r;
    std::map<std::string, int> best;
    walk(root, "", 0, path, r, best);
    return r;
}

} // namespace oracle
