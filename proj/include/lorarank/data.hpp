#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lorarank/error.hpp"
#include "lorarank/rng.hpp"

// Deterministic synthetic task generators. Token layout within the shared
// vocabulary: 0 unused, 1 = SEP, 2 = ASK, 3..12 = digits 0-9, 13.. = symbols.

namespace lorarank {

inline constexpr int kSepToken = 1;
inline constexpr int kAskToken = 2;
inline constexpr int kDigitBase = 3;
inline constexpr int kSymbolBase = 13;
inline constexpr int kCopySymbols = 16;
inline constexpr int kModsumModulus = 2;

struct PatchSpec {
    std::size_t patch_count = 0;
    std::size_t patch_dim = 0;
    bool enabled() const { return patch_count > 0 && patch_dim > 0; }
};

struct Example {
    std::vector<int> tokens;
    std::vector<std::uint8_t> loss_mask;  // marks answer positions in `tokens`
    std::vector<double> patches;          // flattened patch grid, may be empty
};

struct Dataset {
    std::vector<Example> examples;
    std::string split;  // train | val | eval
    std::uint64_t seed = 0;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
};

struct TaskBundle {
    std::string kind;
    Dataset train;
    Dataset val;
    Dataset eval_split;
    PatchSpec patches;  // non-zero only for patch tasks
};

// Running sum of `values` modulo k; the supervision rule of the modsum task.
inline std::vector<int> modsum_targets(const std::vector<int>& values, int k) {
    std::vector<int> out;
    out.reserve(values.size());
    int acc = 0;
    for (int v : values) {
        acc = (acc + v) % k;
        out.push_back(acc);
    }
    return out;
}

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double eval = 0.1;
};

// Deterministic shuffle-partition into train/val/eval.
inline std::array<Dataset, 3> split_train_val(const Dataset& dataset, SplitRatios ratios) {
    const double total = ratios.train + ratios.val + ratios.eval;
    if (std::abs(total - 1.0) > 1e-9) {
        throw ValueError("split ratios must sum to 1, got " + std::to_string(total));
    }
    const std::size_t n = dataset.size();
    const auto n_train = static_cast<std::size_t>(ratios.train * static_cast<double>(n));
    const auto n_val = static_cast<std::size_t>(ratios.val * static_cast<double>(n));
    const std::size_t n_eval = n - n_train - n_val;
    if (n_train == 0 || n_val == 0 || n_eval == 0) {
        throw ValueError("degenerate split: " + std::to_string(n_train) + "/" +
                         std::to_string(n_val) + "/" + std::to_string(n_eval) + " of " +
                         std::to_string(n) + " examples");
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    RngStream rng = named_stream(dataset.seed, "data/split");
    rng.shuffle(order);

    std::array<Dataset, 3> out;
    const char* tags[3] = {"train", "val", "eval"};
    const std::size_t counts[3] = {n_train, n_val, n_eval};
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        out[s].split = tags[s];
        out[s].seed = dataset.seed;
        out[s].examples.reserve(counts[s]);
        for (std::size_t i = 0; i < counts[s]; ++i)
            out[s].examples.push_back(dataset.examples[order[cursor++]]);
    }
    return out;
}

namespace detail {

inline Example gen_copy_example(RngStream& rng) {
    const std::size_t len = 3 + rng.bounded(8);  // prefix length 3..10
    Example ex;
    ex.tokens.reserve(2 * len + 1);
    for (std::size_t i = 0; i < len; ++i)
        ex.tokens.push_back(kSymbolBase + static_cast<int>(rng.bounded(kCopySymbols)));
    ex.tokens.push_back(kSepToken);
    for (std::size_t i = 0; i < len; ++i) ex.tokens.push_back(ex.tokens[i]);
    ex.loss_mask.assign(ex.tokens.size(), 0);
    for (std::size_t i = len + 1; i < ex.tokens.size(); ++i) ex.loss_mask[i] = 1;
    return ex;
}

inline Example gen_modsum_example(RngStream& rng) {
    const std::size_t len = 4 + rng.bounded(9);  // 4..12 values
    std::vector<int> values;
    values.reserve(len);
    for (std::size_t i = 0; i < len; ++i)
        values.push_back(static_cast<int>(rng.bounded(kModsumModulus)));
    const std::vector<int> sums = modsum_targets(values, kModsumModulus);
    Example ex;
    ex.tokens.reserve(2 * len + 1);
    for (int v : values) ex.tokens.push_back(kDigitBase + v);
    ex.tokens.push_back(kSepToken);
    for (int s : sums) ex.tokens.push_back(kDigitBase + s);
    ex.loss_mask.assign(ex.tokens.size(), 0);
    for (std::size_t i = len + 1; i < ex.tokens.size(); ++i) ex.loss_mask[i] = 1;
    return ex;
}

inline Example gen_patchcount_example(RngStream& rng, const PatchSpec& spec) {
    Example ex;
    const std::size_t cells = spec.patch_count * spec.patch_dim;
    ex.patches.reserve(cells);
    const double density = rng.uniform();
    int count = 0;
    for (std::size_t i = 0; i < cells; ++i) {
        const bool set = rng.uniform() < density;
        ex.patches.push_back(set ? 1.0 : 0.0);
        count += set ? 1 : 0;
    }
    ex.tokens = {kAskToken, kDigitBase + (count / 10) % 10, kDigitBase + count % 10};
    ex.loss_mask = {0, 1, 1};
    return ex;
}

}  // namespace detail

inline PatchSpec default_patch_spec() { return PatchSpec{4, 16}; }

// Generates `size` examples of the named task and splits them 80/10/10.
inline TaskBundle gen_task(const std::string& kind, std::size_t size, std::uint64_t seed) {
    if (size < 30) {
        throw ValueError("gen_task: size must be >= 30 so every split is non-empty, got " +
                         std::to_string(size));
    }
    TaskBundle bundle;
    bundle.kind = kind;
    Dataset all;
    all.split = "all";
    all.seed = seed;
    all.examples.reserve(size);
    RngStream rng = named_stream(seed, "data/" + kind);
    if (kind == "copy") {
        for (std::size_t i = 0; i < size; ++i)
            all.examples.push_back(detail::gen_copy_example(rng));
    } else if (kind == "modsum") {
        for (std::size_t i = 0; i < size; ++i)
            all.examples.push_back(detail::gen_modsum_example(rng));
    } else if (kind == "patchcount") {
        bundle.patches = default_patch_spec();
        for (std::size_t i = 0; i < size; ++i)
            all.examples.push_back(detail::gen_patchcount_example(rng, bundle.patches));
    } else {
        throw ValueError("gen_task: unknown task kind '" + kind +
                         "' (expected copy, modsum or patchcount)");
    }
    auto splits = split_train_val(all, SplitRatios{});
    bundle.train = std::move(splits[0]);
    bundle.val = std::move(splits[1]);
    bundle.eval_split = std::move(splits[2]);
    return bundle;
}

// Newline-delimited token-id sequences; every position after the first is
// supervised. Lines are whitespace-separated integers.
inline TaskBundle load_token_file(const std::string& path, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open token file: " + path);
    Dataset all;
    all.split = "all";
    all.seed = seed;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        Example ex;
        int tok;
        while (ls >> tok) ex.tokens.push_back(tok);
        if (ex.tokens.size() < 2) continue;
        ex.loss_mask.assign(ex.tokens.size(), 1);
        ex.loss_mask[0] = 0;
        all.examples.push_back(std::move(ex));
    }
    if (all.size() < 30) {
        throw ValueError("token file " + path + " holds " + std::to_string(all.size()) +
                         " usable sequences; at least 30 required");
    }
    TaskBundle bundle;
    bundle.kind = "file";
    auto splits = split_train_val(all, SplitRatios{});
    bundle.train = std::move(splits[0]);
    bundle.val = std::move(splits[1]);
    bundle.eval_split = std::move(splits[2]);
    return bundle;
}

// Deterministic permutation of `split` indices, chunked into batches; the
// final ragged batch is kept.
inline std::vector<std::vector<std::size_t>> batch_iter(const Dataset& split,
                                                        std::size_t batch_size,
                                                        std::uint64_t seed, std::size_t epoch) {
    if (batch_size < 1) throw ValueError("batch_iter: batch size must be >= 1");
    std::vector<std::size_t> order(split.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream rng =
        named_stream(seed, "batching/" + split.split + "/epoch" + std::to_string(epoch));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

}  // namespace lorarank
