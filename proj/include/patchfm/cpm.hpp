#pragma once

// Contiguous patch masking: the training mask sampler and the two decoding
// modes. Decoders work in model space (scaled then arcsinh) and return raw
// head outputs; conversion to real space happens in the forecast pipeline.

#include "patchfm/model.hpp"

#include <atomic>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace patchfm {

struct MaskSpan {
    std::size_t start = 0;
    std::size_t length = 0;
    bool operator==(const MaskSpan&) const = default;
};

struct MaskPlan {
    std::size_t patches = 0;
    double sampled_p = 0;
    std::vector<MaskSpan> spans;
    std::vector<std::uint8_t> masked;  // per patch

    std::vector<std::size_t> span_lengths() const {
        std::vector<std::size_t> out;
        for (const auto& s : spans) out.push_back(s.length);
        return out;
    }
    std::size_t masked_count() const {
        std::size_t n = 0;
        for (auto m : masked) n += m;
        return n;
    }
    bool operator==(const MaskPlan&) const = default;
};

/// Draws p ~ U(0, p_max) once, then scans patches left to right: each
/// position not already covered starts a span with probability p whose
/// length c ~ U{1..c_max} is truncated at N; the scan resumes after the span.
template <class Rng>
MaskPlan sample_mask(std::size_t N, std::size_t c_max, double p_max, Rng& rng) {
    if (N == 0) throw std::invalid_argument("sample_mask: N must be >= 1");
    if (c_max == 0) throw std::invalid_argument("sample_mask: c_max must be >= 1");
    if (!(p_max >= 0 && p_max <= 1)) throw std::invalid_argument("sample_mask: p_max must lie in [0, 1]");
    MaskPlan plan;
    plan.patches = N;
    plan.masked.assign(N, 0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> span(1, c_max);
    plan.sampled_p = p_max * unit(rng);
    std::size_t i = 0;
    while (i < N) {
        if (unit(rng) < plan.sampled_p) {
            const std::size_t c = std::min(span(rng), N - i);
            plan.spans.push_back({i, c});
            for (std::size_t j = i; j < i + c; ++j) plan.masked[j] = 1;
            i += c;
        } else {
            ++i;
        }
    }
    return plan;
}

inline MaskPlan empty_plan(std::size_t N) {
    MaskPlan p;
    p.patches = N;
    p.masked.assign(N, 0);
    return p;
}

/// Hides every entry of every masked patch, for all variates.
inline PatchGrid apply_mask(const PatchGrid& grid, const MaskPlan& plan) {
    if (plan.masked.size() != grid.patches)
        throw std::invalid_argument("apply_mask: plan covers " + std::to_string(plan.masked.size()) +
                                    " patches, grid has " + std::to_string(grid.patches));
    PatchGrid out = grid;
    for (std::size_t v = 0; v < grid.variates; ++v)
        for (std::size_t n = 0; n < grid.patches; ++n) {
            if (!plan.masked[n]) continue;
            for (std::size_t k = 0; k < grid.patch_size; ++k) {
                const std::size_t i = grid.index(v, n, k);
                out.values[i] = 0;
                out.mask[i] = 1;
            }
        }
    return out;
}

/// Per-patch "no observed entry" flags (v, n)-major, used as attention key
/// masks. Computed on the original data so that CPM mask tokens stay visible.
inline std::vector<std::uint8_t> missing_patches(const PatchGrid& g) {
    std::vector<std::uint8_t> out(g.variates * g.patches);
    for (std::size_t v = 0; v < g.variates; ++v)
        for (std::size_t n = 0; n < g.patches; ++n) out[v * g.patches + n] = g.patch_fully_missing(v, n);
    return out;
}

enum class DecodeMode { single_pass, block };

struct DecodeResult {
    QuantileForecast forecast;  // model space, K * P steps, unsorted
    std::size_t forward_passes = 0;
};

namespace detail {

inline std::uint64_t next_session() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
}

/// Context grid followed by K all-masked patches.
inline PatchGrid extend_with_mask(const PatchGrid& context, std::size_t K) {
    PatchGrid g;
    g.variates = context.variates;
    g.patches = context.patches + K;
    g.patch_size = context.patch_size;
    g.values.assign(g.variates * g.patches * g.patch_size, 0.0);
    g.mask.assign(g.values.size(), 1);
    for (std::size_t v = 0; v < g.variates; ++v)
        for (std::size_t n = 0; n < context.patches; ++n)
            for (std::size_t k = 0; k < g.patch_size; ++k) {
                g.values[g.index(v, n, k)] = context.values[context.index(v, n, k)];
                g.mask[g.index(v, n, k)] = context.mask[context.index(v, n, k)];
            }
    return g;
}

/// Copies head outputs for grid patches [from, to) into forecast patches
/// starting at `dest` (in patches).
template <class T>
void collect(const Array<T>& q, const TokenBatch<T>& tb, std::size_t from, std::size_t to, std::size_t dest,
             QuantileForecast& f, std::size_t P) {
    for (std::size_t v = 0; v < tb.variates; ++v)
        for (std::size_t n = from; n < to; ++n) {
            const std::size_t r = tb.row(0, v, n - tb.start);
            for (std::size_t k = 0; k < P; ++k) {
                const std::size_t t = (dest + n - from) * P + k;
                if (t >= f.horizon) continue;
                for (std::size_t l = 0; l < kNumQuantiles; ++l) f.at(v, t, l) = double(q.at(r, k * kNumQuantiles + l));
            }
        }
}

/// Writes the sorted median of each step of patches [from, to) back into the
/// grid as observed values.
template <class T>
void commit_median(PatchGrid& g, const Array<T>& q, const TokenBatch<T>& tb, std::size_t from, std::size_t to) {
    const std::size_t P = g.patch_size;
    std::array<double, kNumQuantiles> lv{};
    for (std::size_t v = 0; v < tb.variates; ++v)
        for (std::size_t n = from; n < to; ++n) {
            const std::size_t r = tb.row(0, v, n - tb.start);
            for (std::size_t k = 0; k < P; ++k) {
                for (std::size_t l = 0; l < kNumQuantiles; ++l) lv[l] = double(q.at(r, k * kNumQuantiles + l));
                std::sort(lv.begin(), lv.end());
                g.values[g.index(v, n, k)] = double(T(lv[kMedianIndex]));
                g.mask[g.index(v, n, k)] = 0;
            }
        }
}

}  // namespace detail

/// Appends K masked patches to the context and forecasts them in one forward.
template <class T>
DecodeResult single_pass_forecast(const Model<T>& model, const PatchGrid& context, std::size_t K) {
    if (K == 0) throw std::invalid_argument("single_pass_forecast: K must be >= 1");
    const std::size_t cap = model.config().max_patches();
    if (context.patches + K > cap)
        throw std::length_error("single-pass forecast needs " + std::to_string(context.patches + K) +
                                " patches but the model holds " + std::to_string(cap) +
                                "; use block mode (--mode block) for longer horizons");
    const std::size_t P = context.patch_size;
    const std::size_t N = context.patches;
    PatchGrid work = detail::extend_with_mask(context, K);
    const auto missing = missing_patches(context);
    std::vector<std::uint8_t> miss(work.variates * work.patches, 0);
    for (std::size_t v = 0; v < work.variates; ++v)
        for (std::size_t n = 0; n < N; ++n) miss[v * work.patches + n] = missing[v * N + n];
    auto tb = tokens_from_grid<T>(work, 0, N + K, &miss);
    Graph<T> g;
    auto out = model.forward(g, tb);
    DecodeResult res{QuantileForecast(context.variates, K * P), 1};
    detail::collect(g.value(out.quantiles), tb, N, N + K, 0, res.forecast, P);
    return res;
}

struct BlockOptions {
    std::size_t block = 1;
    bool use_cache = true;
};

/// Forecasts K patches in ceil(K/B) rounds of at most B patches. After each
/// round the sorted median of the round's outputs is committed as observed
/// context. With the cache on, round r > 1 processes only the previous block
/// (now committed) and the new masked block, reading earlier time-axis keys
/// and values from a session-bound cache. When the grid outgrows the model's
/// context the window slides and the round is recomputed without the cache.
template <class T>
DecodeResult block_decode(const Model<T>& model, const PatchGrid& context, std::size_t K, BlockOptions opt) {
    if (K == 0) throw std::invalid_argument("block_decode: K must be >= 1");
    if (opt.block < 1 || opt.block > K)
        throw std::invalid_argument("block_decode: block size " + std::to_string(opt.block) + " outside [1, " +
                                    std::to_string(K) + "]");
    const std::size_t cap = model.config().max_patches();
    const std::size_t N = context.patches;
    const std::size_t P = context.patch_size;
    if (N == 0) throw std::invalid_argument("block_decode: empty context");
    if (N + std::min(opt.block, K) > cap)
        throw std::length_error("block_decode: context of " + std::to_string(N) + " patches plus a block of " +
                                std::to_string(opt.block) + " exceeds the model limit of " + std::to_string(cap));
    const std::size_t V = context.variates;
    PatchGrid work = detail::extend_with_mask(context, K);
    const auto orig = missing_patches(context);
    std::vector<std::uint8_t> miss(V * work.patches, 0);
    for (std::size_t v = 0; v < V; ++v)
        for (std::size_t n = 0; n < N; ++n) miss[v * work.patches + n] = orig[v * N + n];

    DecodeResult res{QuantileForecast(V, K * P), 0};
    KvCache<T> cache(detail::next_session(), model.config().layers, V, model.config().d_model);
    std::size_t done = 0;      // forecast patches committed so far
    std::size_t prev_len = 0;  // length of the block committed last round
    bool cache_live = false;
    while (done < K) {
        const std::size_t b = std::min(opt.block, K - done);
        const std::size_t end = N + done + b;
        const bool fits = end <= cap;
        const bool last = done + b == K;
        Graph<T> g;
        TokenBatch<T> tb;
        typename Model<T>::Output out;
        if (fits && opt.use_cache && cache_live) {
            const std::size_t begin = N + done - prev_len;
            auto prefix = tokens_from_grid<T>(work, 0, begin, &miss);
            if (!cache.validate_prefix(prefix.features)) throw std::logic_error("block_decode: KV cache invalidated");
            tb = tokens_from_grid<T>(work, begin, end, &miss);
            out = model.forward(g, tb, &cache);
            if (!last) cache.append(g, out, tb, prev_len);
        } else if (fits) {
            tb = tokens_from_grid<T>(work, 0, end, &miss);
            out = model.forward(g, tb);
            if (opt.use_cache && !last) {
                cache.clear();
                cache.append(g, out, tb, N + done);
                cache_live = true;
            }
        } else {
            const std::size_t begin = end - cap;
            // Sliding window: positions restart at zero for the retained patches.
            PatchGrid win;
            win.variates = V;
            win.patch_size = P;
            win.patches = cap;
            win.values.resize(V * cap * P);
            win.mask.resize(V * cap * P);
            std::vector<std::uint8_t> wmiss(V * cap);
            for (std::size_t v = 0; v < V; ++v)
                for (std::size_t n = 0; n < cap; ++n) {
                    wmiss[v * cap + n] = miss[v * work.patches + begin + n];
                    for (std::size_t k = 0; k < P; ++k) {
                        win.values[win.index(v, n, k)] = work.values[work.index(v, begin + n, k)];
                        win.mask[win.index(v, n, k)] = work.mask[work.index(v, begin + n, k)];
                    }
                }
            tb = tokens_from_grid<T>(win, 0, cap, &wmiss);
            out = model.forward(g, tb);
            cache_live = false;
            ++res.forward_passes;
            const auto& q = g.value(out.quantiles);
            detail::collect(q, tb, cap - b, cap, done, res.forecast, P);
            // Commit into the full grid via the window's row layout.
            PatchGrid tmp = win;
            detail::commit_median(tmp, q, tb, cap - b, cap);
            for (std::size_t v = 0; v < V; ++v)
                for (std::size_t n = cap - b; n < cap; ++n)
                    for (std::size_t k = 0; k < P; ++k) {
                        work.values[work.index(v, begin + n, k)] = tmp.values[tmp.index(v, n, k)];
                        work.mask[work.index(v, begin + n, k)] = 0;
                    }
            done += b;
            prev_len = b;
            continue;
        }
        ++res.forward_passes;
        const auto& q = g.value(out.quantiles);
        detail::collect(q, tb, N + done, end, done, res.forecast, P);
        if (!last) detail::commit_median(work, q, tb, N + done, end);
        done += b;
        prev_len = b;
    }
    return res;
}

template <class T>
DecodeResult decode(const Model<T>& model, const PatchGrid& context, std::size_t K, DecodeMode mode,
                    std::size_t block = 1, bool use_cache = true) {
    if (mode == DecodeMode::single_pass) return single_pass_forecast(model, context, K);
    return block_decode(model, context, K, BlockOptions{block, use_cache});
}

inline DecodeMode decode_mode_from_string(std::string_view s) {
    if (s == "single" || s == "single_pass") return DecodeMode::single_pass;
    if (s == "block") return DecodeMode::block;
    throw std::invalid_argument("unknown decode mode '" + std::string(s) + "' (expected single or block)");
}

}  // namespace patchfm
