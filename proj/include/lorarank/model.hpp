#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lorarank/data.hpp"
#include "lorarank/ops.hpp"
#include "lorarank/rng.hpp"
#include "lorarank/supernet.hpp"

// A small frozen pre-norm transformer whose linear submodules host LoRA
// attachments. Text tokens are causal; optional patch-prefix tokens are
// linearly embedded, prepended, and visible to every position (prefix-LM
// masking), standing in for a vision tower at toy scale.

namespace lorarank {

enum class TargetModule { Q, K, V, O, Gate, Up, Down };

inline const std::vector<TargetModule>& all_target_modules() {
    static const std::vector<TargetModule> all = {
        TargetModule::Q,  TargetModule::K,  TargetModule::V,   TargetModule::O,
        TargetModule::Gate, TargetModule::Up, TargetModule::Down};
    return all;
}

inline std::string target_name(TargetModule t) {
    switch (t) {
        case TargetModule::Q: return "q";
        case TargetModule::K: return "k";
        case TargetModule::V: return "v";
        case TargetModule::O: return "o";
        case TargetModule::Gate: return "gate";
        case TargetModule::Up: return "up";
        case TargetModule::Down: return "down";
    }
    throw ValueError("unknown target module");
}

// Accepts Table-style labels; fc1/fc2 alias the gated-MLP up/down pair.
inline TargetModule parse_target(const std::string& name) {
    if (name == "q") return TargetModule::Q;
    if (name == "k") return TargetModule::K;
    if (name == "v") return TargetModule::V;
    if (name == "o") return TargetModule::O;
    if (name == "g" || name == "gate") return TargetModule::Gate;
    if (name == "u" || name == "up" || name == "fc1") return TargetModule::Up;
    if (name == "d" || name == "down" || name == "fc2") return TargetModule::Down;
    throw ValueError("unknown target module '" + name + "' (expected q,k,v,o,g,u,d)");
}

struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t hidden_dim = 64;
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t mlp_dim = 128;
    std::size_t max_seq_len = 64;
    PatchSpec patches;  // disabled unless patch_count and patch_dim set
    std::vector<TargetModule> targets = all_target_modules();
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return hidden_dim / num_heads; }

    void validate() const {
        if (vocab_size == 0 || hidden_dim == 0 || num_layers == 0 || num_heads == 0 ||
            mlp_dim == 0 || max_seq_len == 0) {
            throw ValueError("model config: all dimensions must be positive");
        }
        if (hidden_dim % num_heads != 0) {
            throw ValueError("model config: hidden dim " + std::to_string(hidden_dim) +
                             " not divisible by " + std::to_string(num_heads) + " heads");
        }
        if (targets.empty()) throw ValueError("model config: target module set is empty");
    }

    bool has_target(TargetModule t) const {
        for (TargetModule x : targets)
            if (x == t) return true;
        return false;
    }
};

// Prefix-LM attention mask over a (prefix + text) sequence: prefix positions
// see the whole prefix, text positions see the prefix plus their causal past.
inline std::vector<std::uint8_t> build_attention_mask(std::size_t prefix_len, std::size_t total) {
    std::vector<std::uint8_t> mask(total * total, 0);
    for (std::size_t i = 0; i < total; ++i)
        for (std::size_t j = 0; j < total; ++j) {
            const bool allowed = (i < prefix_len) ? (j < prefix_len) : (j < prefix_len || j <= i);
            mask[i * total + j] = allowed ? 1 : 0;
        }
    return mask;
}

// One adaptable linear: frozen base plus an optional supernet or fixed-rank
// attachment.
struct AdaptedLinear {
    enum class Mode { Frozen, Supernet, Fixed };

    std::string name;
    Tensor base;
    Mode mode = Mode::Frozen;
    std::optional<SuperLoraModule> supernet;
    std::optional<LoraAdapter> adapter;

    Tensor forward(const Tensor& x) const {
        switch (mode) {
            case Mode::Frozen: return matmul(x, base);
            case Mode::Supernet: return supernet_forward(x, *supernet);
            case Mode::Fixed: return adapter->forward(x, base);
        }
        throw StateError("adapted linear '" + name + "': invalid mode");
    }
};

class FrozenTransformer {
  public:
    struct Layer {
        AdaptedLinear q, k, v, o, gate, up, down;
        Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    };

    explicit FrozenTransformer(ModelConfig config) : cfg_(std::move(config)) {
        cfg_.validate();
        const std::size_t d = cfg_.hidden_dim;
        embedding_ = init_tensor({cfg_.vocab_size, d}, "model-init/embedding", 1.0);
        const std::size_t positions =
            cfg_.max_seq_len + (cfg_.patches.enabled() ? cfg_.patches.patch_count : 0);
        pos_embedding_ = init_tensor({positions, d}, "model-init/pos-embedding", 1.0);
        if (cfg_.patches.enabled()) {
            patch_proj_ = init_tensor({cfg_.patches.patch_dim, d}, "model-init/patch-proj",
                                      1.0 / std::sqrt(static_cast<double>(cfg_.patches.patch_dim)));
        }
        const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.num_layers));
        layers_.reserve(cfg_.num_layers);
        for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
            Layer layer;
            const std::string prefix = "layer" + std::to_string(l) + ".";
            const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));
            const double mlp_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.mlp_dim));
            layer.q = make_linear(prefix + "q", {d, d}, in_scale);
            layer.k = make_linear(prefix + "k", {d, d}, in_scale);
            layer.v = make_linear(prefix + "v", {d, d}, in_scale);
            layer.o = make_linear(prefix + "o", {d, d}, in_scale * residual_scale);
            layer.gate = make_linear(prefix + "gate", {d, cfg_.mlp_dim}, in_scale);
            layer.up = make_linear(prefix + "up", {d, cfg_.mlp_dim}, in_scale);
            layer.down = make_linear(prefix + "down", {cfg_.mlp_dim, d},
                                     mlp_scale * residual_scale);
            layer.ln1_gamma = Tensor::ones({d});
            layer.ln1_beta = Tensor::zeros({d});
            layer.ln2_gamma = Tensor::ones({d});
            layer.ln2_beta = Tensor::zeros({d});
            layers_.push_back(std::move(layer));
        }
        final_gamma_ = Tensor::ones({d});
        final_beta_ = Tensor::zeros({d});
        head_ = init_tensor({d, cfg_.vocab_size}, "model-init/head",
                            1.0 / std::sqrt(static_cast<double>(d)));
    }

    const ModelConfig& config() const { return cfg_; }
    std::size_t num_layers() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return layers_.at(i); }
    const Layer& layer(std::size_t i) const { return layers_.at(i); }
    Tensor& embedding() { return embedding_; }
    Tensor& head() { return head_; }

    // ---- attachments -----------------------------------------------------

    void attach_supernet(const RankSearchSpace& space, double lora_alpha,
                         std::uint64_t adapter_seed) {
        for_each_adaptable([&](AdaptedLinear& lin) {
            RngStream init = named_stream(adapter_seed, "adapter-init/" + lin.name);
            lin.supernet.emplace(lin.base, space, lin.name, lora_alpha, init);
            lin.adapter.reset();
            lin.mode = AdaptedLinear::Mode::Supernet;
        });
    }

    // Fresh fixed-rank adapters (zero-start LoRA). `ranks` must cover every
    // adaptable module when given; otherwise `uniform_rank` applies.
    void attach_adapters(std::size_t uniform_rank, double lora_alpha,
                         std::uint64_t adapter_seed,
                         const std::map<std::string, std::size_t>* ranks = nullptr) {
        for_each_adaptable([&](AdaptedLinear& lin) {
            std::size_t rank = uniform_rank;
            if (ranks) {
                auto it = ranks->find(lin.name);
                if (it == ranks->end()) {
                    throw ValueError("rank map missing module '" + lin.name + "'");
                }
                rank = it->second;
            }
            if (rank < 1) throw ValueError("adapter rank must be >= 1");
            const std::size_t in_dim = lin.base.shape()[0];
            const std::size_t out_dim = lin.base.shape()[1];
            RngStream init = named_stream(adapter_seed, "adapter-init/" + lin.name);
            Tensor w_a = Tensor::zeros({in_dim, rank});
            const double stddev = 1.0 / std::sqrt(static_cast<double>(in_dim));
            for (auto& v : w_a.mut_data()) v = init.normal(0.0, stddev);
            w_a.set_requires_grad(true);
            Tensor w_b = Tensor::zeros({rank, out_dim}).set_requires_grad(true);
            const double alpha = lora_alpha > 0.0 ? lora_alpha : static_cast<double>(rank);
            lin.adapter.emplace(std::move(w_a), std::move(w_b), rank,
                                alpha / static_cast<double>(rank), lin.name);
            lin.supernet.reset();
            lin.mode = AdaptedLinear::Mode::Fixed;
        });
    }

    // Replace supernet attachments by extracted fixed-rank adapters (warm
    // start), keeping the supernet scaling.
    void attach_extracted(const std::map<std::string, std::size_t>& ranks) {
        for_each_adaptable([&](AdaptedLinear& lin) {
            if (lin.mode != AdaptedLinear::Mode::Supernet) {
                throw StateError("extract: module '" + lin.name + "' has no supernet attached");
            }
            auto it = ranks.find(lin.name);
            if (it == ranks.end()) throw ValueError("rank map missing module '" + lin.name + "'");
            lin.adapter.emplace(extract_adapter(*lin.supernet, it->second));
            lin.supernet.reset();
            lin.mode = AdaptedLinear::Mode::Fixed;
        });
    }

    void detach_adapters() {
        for_each_adaptable([&](AdaptedLinear& lin) {
            lin.supernet.reset();
            lin.adapter.reset();
            lin.mode = AdaptedLinear::Mode::Frozen;
        });
    }

    // ---- forward ---------------------------------------------------------

    // Scaled dot-product attention sublayer (projections, prefix-LM mask,
    // head concat, output projection). `x` is the already-normalized input.
    Tensor attention_forward(const Tensor& x, std::size_t layer_idx,
                             std::size_t prefix_len = 0) const {
        if (x.ndim() != 2 || x.shape()[1] != cfg_.hidden_dim) {
            throw ShapeError("attention_forward: input " + shape_str(x.shape()) +
                             " does not match hidden dim " + std::to_string(cfg_.hidden_dim));
        }
        const std::size_t n = x.shape()[0];
        if (n > cfg_.max_seq_len + (cfg_.patches.enabled() ? cfg_.patches.patch_count : 0)) {
            throw ValueError("attention_forward: sequence length " + std::to_string(n) +
                             " exceeds configured maximum");
        }
        const Layer& layer = layers_.at(layer_idx);
        const std::size_t dk = cfg_.head_dim();
        Tensor q = layer.q.forward(x);
        Tensor k = layer.k.forward(x);
        Tensor v = layer.v.forward(x);
        const auto mask = build_attention_mask(prefix_len, n);
        std::vector<Tensor> heads;
        heads.reserve(cfg_.num_heads);
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
        for (std::size_t h = 0; h < cfg_.num_heads; ++h) {
            Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
            Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
            Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
            Tensor scores = scalar_mul(matmul(qh, transpose(kh)), inv_sqrt_dk);
            Tensor attn = masked_softmax_rows(scores, mask);
            heads.push_back(matmul(attn, vh));
        }
        return layer.o.forward(concat_cols(heads));
    }

    // Gated MLP: (SiLU(x W_G) ⊙ (x W_U)) W_D.
    Tensor mlp_forward(const Tensor& x, std::size_t layer_idx) const {
        const Layer& layer = layers_.at(layer_idx);
        Tensor gated = mul(silu(layer.gate.forward(x)), layer.up.forward(x));
        return layer.down.forward(gated);
    }

    // Logits over the text positions. Patch inputs, when present, are
    // linearly embedded and prepended as fully-visible prefix tokens.
    Tensor model_forward(const std::vector<int>& tokens,
                         const std::vector<double>* patches = nullptr) const {
        if (tokens.empty()) throw ValueError("model_forward: empty token sequence");
        if (tokens.size() > cfg_.max_seq_len) {
            throw ValueError("model_forward: sequence length " + std::to_string(tokens.size()) +
                             " exceeds maximum " + std::to_string(cfg_.max_seq_len));
        }
        Tensor x = embedding_lookup(embedding_, tokens);
        std::size_t prefix_len = 0;
        if (patches && !patches->empty()) {
            if (!cfg_.patches.enabled()) {
                throw ValueError("model_forward: patch inputs given but patches are disabled");
            }
            const std::size_t cells = cfg_.patches.patch_count * cfg_.patches.patch_dim;
            if (patches->size() != cells) {
                throw ShapeError("model_forward: patch grid holds " +
                                 std::to_string(patches->size()) + " cells, expected " +
                                 std::to_string(cells));
            }
            prefix_len = cfg_.patches.patch_count;
            Tensor grid = Tensor::from({cfg_.patches.patch_count, cfg_.patches.patch_dim},
                                       *patches);
            x = concat_rows({matmul(grid, patch_proj_), x});
        }
        x = add(x, slice_rows(pos_embedding_, 0, x.shape()[0]));
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const Layer& layer = layers_[l];
            Tensor normed = layer_norm(x, layer.ln1_gamma, layer.ln1_beta);
            x = add(x, attention_forward(normed, l, prefix_len));
            Tensor normed2 = layer_norm(x, layer.ln2_gamma, layer.ln2_beta);
            x = add(x, mlp_forward(normed2, l));
        }
        Tensor final = layer_norm(x, final_gamma_, final_beta_);
        Tensor logits = matmul(final, head_);
        if (prefix_len > 0) {
            logits = slice_rows(logits, prefix_len, prefix_len + tokens.size());
        }
        return logits;
    }

    // Next-token cross entropy over the supervised positions of one example.
    // Returns the unreduced sum; `count` receives the number of positions.
    Tensor example_loss_sum(const Example& ex, std::size_t* count) const {
        if (ex.tokens.size() < 2) throw ValueError("example too short for next-token loss");
        Tensor logits = model_forward(ex.tokens, ex.patches.empty() ? nullptr : &ex.patches);
        const std::size_t m = ex.tokens.size();
        Tensor predict = slice_rows(logits, 0, m - 1);
        std::vector<int> targets(ex.tokens.begin() + 1, ex.tokens.end());
        std::vector<std::uint8_t> mask(ex.loss_mask.begin() + 1, ex.loss_mask.end());
        std::size_t c = 0;
        for (auto b : mask) c += b;
        if (count) *count = c;
        return cross_entropy_masked_sum(predict, targets, mask);
    }

    // ---- parameter access --------------------------------------------------

    std::vector<TensorPtr> weight_params() {
        std::vector<TensorPtr> out;
        for_each_adaptable([&](AdaptedLinear& lin) {
            if (lin.mode == AdaptedLinear::Mode::Supernet) {
                out.push_back(lin.supernet->w_a().impl());
                out.push_back(lin.supernet->w_b().impl());
            } else if (lin.mode == AdaptedLinear::Mode::Fixed) {
                out.push_back(lin.adapter->w_a.impl());
                out.push_back(lin.adapter->w_b.impl());
            }
        });
        return out;
    }

    std::vector<TensorPtr> alpha_params() {
        std::vector<TensorPtr> out;
        for_each_adaptable([&](AdaptedLinear& lin) {
            if (lin.mode == AdaptedLinear::Mode::Supernet)
                out.push_back(lin.supernet->alphas().impl());
        });
        return out;
    }

    std::vector<SuperLoraModule*> supernet_modules() {
        std::vector<SuperLoraModule*> out;
        for_each_adaptable([&](AdaptedLinear& lin) {
            if (lin.mode == AdaptedLinear::Mode::Supernet) out.push_back(&*lin.supernet);
        });
        return out;
    }

    std::vector<AdaptedLinear*> adaptable_modules() {
        std::vector<AdaptedLinear*> out;
        for_each_adaptable([&](AdaptedLinear& lin) { out.push_back(&lin); });
        return out;
    }

    // Every tensor of the model, keyed for checkpoints. Frozen tensors carry
    // frozen=true; attachments contribute their trainables.
    std::vector<std::pair<std::string, Tensor>> named_tensors(bool frozen_only = false) {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("embedding", embedding_);
        out.emplace_back("pos_embedding", pos_embedding_);
        if (cfg_.patches.enabled()) out.emplace_back("patch_proj", patch_proj_);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            Layer& layer = layers_[l];
            for (auto* lin : {&layer.q, &layer.k, &layer.v, &layer.o, &layer.gate, &layer.up,
                              &layer.down}) {
                out.emplace_back(lin->name + ".base", lin->base);
                if (frozen_only) continue;
                if (lin->mode == AdaptedLinear::Mode::Supernet) {
                    out.emplace_back(lin->name + ".w_a", lin->supernet->w_a());
                    out.emplace_back(lin->name + ".w_b", lin->supernet->w_b());
                    out.emplace_back(lin->name + ".alphas", lin->supernet->alphas());
                } else if (lin->mode == AdaptedLinear::Mode::Fixed) {
                    out.emplace_back(lin->name + ".w_a", lin->adapter->w_a);
                    out.emplace_back(lin->name + ".w_b", lin->adapter->w_b);
                }
            }
            out.emplace_back(prefix + "ln1.gamma", layer.ln1_gamma);
            out.emplace_back(prefix + "ln1.beta", layer.ln1_beta);
            out.emplace_back(prefix + "ln2.gamma", layer.ln2_gamma);
            out.emplace_back(prefix + "ln2.beta", layer.ln2_beta);
        }
        out.emplace_back("final_ln.gamma", final_gamma_);
        out.emplace_back("final_ln.beta", final_beta_);
        out.emplace_back("head", head_);
        return out;
    }

    std::size_t trainable_param_count() {
        std::size_t total = 0;
        for (const auto& p : weight_params()) total += p->numel();
        for (const auto& p : alpha_params()) total += p->numel();
        return total;
    }

    // Folds every fixed adapter into its base weight and detaches.
    void merge_all_adapters() {
        for_each_adaptable([&](AdaptedLinear& lin) {
            if (lin.mode != AdaptedLinear::Mode::Fixed) return;
            Tensor merged = merge_adapter(lin.base, *lin.adapter);
            lin.base.mut_data() = merged.data();
            lin.adapter.reset();
            lin.mode = AdaptedLinear::Mode::Frozen;
        });
    }

    template <typename Fn>
    void for_each_adaptable(Fn&& fn) {
        for (Layer& layer : layers_) {
            if (cfg_.has_target(TargetModule::Q)) fn(layer.q);
            if (cfg_.has_target(TargetModule::K)) fn(layer.k);
            if (cfg_.has_target(TargetModule::V)) fn(layer.v);
            if (cfg_.has_target(TargetModule::O)) fn(layer.o);
            if (cfg_.has_target(TargetModule::Gate)) fn(layer.gate);
            if (cfg_.has_target(TargetModule::Up)) fn(layer.up);
            if (cfg_.has_target(TargetModule::Down)) fn(layer.down);
        }
    }

  private:
    Tensor init_tensor(Shape shape, const std::string& stream, double stddev) {
        RngStream rng = named_stream(cfg_.seed, stream);
        Tensor t = Tensor::zeros(std::move(shape));
        for (auto& v : t.mut_data()) v = rng.normal(0.0, stddev);
        return t;
    }

    AdaptedLinear make_linear(const std::string& name, Shape shape, double stddev) {
        AdaptedLinear lin;
        lin.name = name;
        lin.base = init_tensor(std::move(shape), "model-init/" + name, stddev);
        return lin;
    }

    ModelConfig cfg_;
    Tensor embedding_;
    Tensor pos_embedding_;
    Tensor patch_proj_;
    std::vector<Layer> layers_;
    Tensor final_gamma_;
    Tensor final_beta_;
    Tensor head_;
};

// exp(mean token-level cross entropy) over the supervised positions of a
// split. Evaluation never records onto the tape.
inline double eval_perplexity(const FrozenTransformer& model, const Dataset& split) {
    if (split.empty()) throw ValueError("eval_perplexity: empty split '" + split.split + "'");
    Tape::NoGrad guard;
    double total = 0.0;
    std::size_t count = 0;
    for (const Example& ex : split.examples) {
        std::size_t c = 0;
        total += model.example_loss_sum(ex, &c).item();
        count += c;
    }
    if (count == 0) throw ValueError("eval_perplexity: split has no supervised positions");
    return std::exp(total / static_cast<double>(count));
}

}  // namespace lorarank
