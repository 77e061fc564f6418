#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lorarank/ops.hpp"
#include "lorarank/rng.hpp"
#include "lorarank/search_space.hpp"
#include "lorarank/tensor.hpp"

// LoRA adapters and the alpha-weighted superweight construction. The adapted
// output convention is fixed as x * W_A * W_B scaled by s, with W_A of shape
// in_dim x r and W_B of shape r x out_dim.

namespace lorarank {

struct LoraAdapter {
    Tensor w_a;  // in_dim x r
    Tensor w_b;  // r x out_dim
    std::size_t rank = 0;
    double scaling = 1.0;
    std::string target;

    LoraAdapter() = default;
    LoraAdapter(Tensor a, Tensor b, std::size_t r, double s, std::string name)
        : w_a(std::move(a)), w_b(std::move(b)), rank(r), scaling(s), target(std::move(name)) {
        if (rank < 1) throw ValueError("lora adapter: rank must be >= 1");
        if (scaling <= 0.0) throw ValueError("lora adapter: scaling must be positive");
        if (w_a.ndim() != 2 || w_b.ndim() != 2 || w_a.shape()[1] != rank ||
            w_b.shape()[0] != rank) {
            throw ShapeError("lora adapter: W_A " + shape_str(w_a.shape()) + " / W_B " +
                             shape_str(w_b.shape()) + " inconsistent with rank " +
                             std::to_string(rank));
        }
    }

    std::size_t in_dim() const { return w_a.shape()[0]; }
    std::size_t out_dim() const { return w_b.shape()[1]; }

    // x * base + s * (x * W_A) * W_B
    Tensor forward(const Tensor& x, const Tensor& base) const {
        return add(matmul(x, base), scalar_mul(matmul(matmul(x, w_a), w_b), scaling));
    }
};

// One adapted linear module of the supernetwork: maximal-rank LoRA factors
// plus one shared architectural vector serving both W_A and W_B.
class SuperLoraModule {
  public:
    SuperLoraModule(Tensor base, RankSearchSpace space, std::string target, double lora_alpha,
                    RngStream& init)
        : space_(std::move(space)), target_(std::move(target)), base_(std::move(base)) {
        if (base_.ndim() != 2) {
            throw ShapeError("supernet module '" + target_ + "': base weight must be rank 2");
        }
        const std::size_t in_dim = base_.shape()[0];
        const std::size_t out_dim = base_.shape()[1];
        const std::size_t r_max = space_.r_max();
        if (lora_alpha <= 0.0) lora_alpha = static_cast<double>(r_max);
        scaling_ = lora_alpha / static_cast<double>(r_max);

        // Standard LoRA start: Gaussian A, zero B, so the initial update is
        // exactly zero. Alphas start at zero, i.e. uniform after softmax.
        w_a_ = Tensor::zeros({in_dim, r_max});
        const double stddev = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (auto& v : w_a_.mut_data()) v = init.normal(0.0, stddev);
        w_a_.set_requires_grad(true);
        w_b_ = Tensor::zeros({r_max, out_dim}).set_requires_grad(true);
        alphas_ = Tensor::zeros({space_.size()}).set_requires_grad(true);
    }

    const RankSearchSpace& space() const { return space_; }
    const std::string& target() const { return target_; }
    double scaling() const { return scaling_; }
    const Tensor& base() const { return base_; }
    Tensor& w_a() { return w_a_; }
    Tensor& w_b() { return w_b_; }
    Tensor& alphas() { return alphas_; }
    const Tensor& w_a() const { return w_a_; }
    const Tensor& w_b() const { return w_b_; }
    const Tensor& alphas() const { return alphas_; }

    std::size_t in_dim() const { return base_.shape()[0]; }
    std::size_t out_dim() const { return base_.shape()[1]; }

  private:
    RankSearchSpace space_;
    std::string target_;
    Tensor base_;
    Tensor w_a_;
    Tensor w_b_;
    Tensor alphas_;
    double scaling_ = 1.0;
};

// Softmax over the architectural vector; rejects non-finite entries.
inline Tensor softmax_alphas(const Tensor& alphas) {
    if (alphas.numel() < 1) throw ShapeError("softmax_alphas: empty vector");
    for (double v : alphas.data()) {
        if (!std::isfinite(v)) throw NumericError("softmax_alphas: non-finite entry");
    }
    return softmax_rows(alphas);
}

namespace detail {

// Coverage matrix M[j][i] = 1 when window(ranks[i]) contains index j. The
// mask M * p then holds, per index, the cumulative probability of every
// window covering it.
inline Tensor window_coverage(const RankSearchSpace& space) {
    const std::size_t r_max = space.r_max();
    const std::size_t n = space.size();
    Tensor m = Tensor::zeros({r_max, n});
    for (std::size_t i = 0; i < n; ++i) {
        auto [start, end] = space.window(space.ranks()[i]);
        for (std::size_t j = start; j < end; ++j) m.set(j, i, 1.0);
    }
    return m;
}

inline Tensor window_mask(const SuperLoraModule& module) {
    Tensor p = softmax_alphas(module.alphas());
    Tensor coverage = window_coverage(module.space());
    return reshape(matmul(coverage, reshape(p, {module.space().size(), 1})),
                   {module.space().r_max()});
}

}  // namespace detail

// W*_A: every column of W_A scaled by the cumulative probability of the
// windows covering it. Identical values to summing alpha-weighted
// zero-embedded slices, with one masked scale per index.
inline Tensor superweight_A(const SuperLoraModule& module) {
    return scale_columns(module.w_a(), detail::window_mask(module));
}

// Row analogue for W*_B.
inline Tensor superweight_B(const SuperLoraModule& module) {
    return scale_rows(module.w_b(), detail::window_mask(module));
}

// x * W_base + s * (x * W*_A) * W*_B. One adapter matmul chain regardless of
// the number of candidate ranks; gradients reach W_A, W_B and alphas but not
// the frozen base.
inline Tensor supernet_forward(const Tensor& x, const SuperLoraModule& module) {
    if (x.ndim() != 2 || x.shape()[1] != module.in_dim()) {
        throw ShapeError("supernet_forward('" + module.target() + "'): input " +
                         shape_str(x.shape()) + " does not match base " +
                         shape_str(module.base().shape()));
    }
    Tensor adapter = matmul(matmul(x, superweight_A(module)), superweight_B(module));
    return add(matmul(x, module.base()), scalar_mul(adapter, module.scaling()));
}

// Rank with the highest alpha; ties break toward the smallest rank.
inline std::size_t sample_rank(const SuperLoraModule& module) {
    const auto& a = module.alphas().data();
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.size(); ++i) {
        if (a[i] > a[best]) best = i;
    }
    return module.space().ranks()[best];
}

// Slices the centered window out of the supernet weights as a warm-start
// adapter. The scaling carries over unchanged.
inline LoraAdapter extract_adapter(const SuperLoraModule& module, std::size_t rank) {
    if (!module.space().contains(rank)) {
        throw ValueError("extract_adapter('" + module.target() + "'): rank " +
                         std::to_string(rank) + " not in search space");
    }
    auto [start, end] = module.space().window(rank);
    Tape::NoGrad guard;
    Tensor a = slice_cols(module.w_a(), start, end);
    Tensor b = slice_rows(module.w_b(), start, end);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    return LoraAdapter(std::move(a), std::move(b), rank, module.scaling(), module.target());
}

// W_base + s * (W_A * W_B); plain values, never on the tape.
inline Tensor merge_adapter(const Tensor& base_w, const LoraAdapter& adapter) {
    if (base_w.ndim() != 2 || base_w.shape()[0] != adapter.in_dim() ||
        base_w.shape()[1] != adapter.out_dim()) {
        throw ShapeError("merge_adapter: base " + shape_str(base_w.shape()) +
                         " does not match adapter " + std::to_string(adapter.in_dim()) + "x" +
                         std::to_string(adapter.out_dim()));
    }
    Tape::NoGrad guard;
    Tensor delta = matmul(adapter.w_a, adapter.w_b);
    Tensor merged = Tensor::zeros(base_w.shape());
    for (std::size_t i = 0; i < merged.numel(); ++i) {
        merged.mut_data()[i] = base_w.data()[i] + adapter.scaling * delta.data()[i];
    }
    return merged;
}

}  // namespace lorarank
