#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lorarank/data.hpp"
#include "lorarank/model.hpp"
#include "lorarank/optim.hpp"
#include "lorarank/rank_map.hpp"

// Alternating bi-level optimization of LoRA weights and architectural
// parameters, followed by rank sampling and fixed-rank fine-tuning. The
// implementation is first-order: each step freezes one parameter group and
// descends the other, with no unrolled inner gradient.

namespace lorarank {

struct SearchConfig {
    std::size_t search_epochs = 3;
    std::size_t finetune_epochs = 7;
    std::size_t batch_size = 8;
    OptimizerConfig weight_opt{OptKind::Adam, 1e-3};
    OptimizerConfig alpha_opt{OptKind::Sgd, 3e-3};
    std::uint64_t seed = 0;
    bool reinit_after_search = false;
    std::vector<std::size_t> space = {4, 8, 16};
    double lora_alpha = 0.0;  // 0 picks r_max, giving unit scaling

    void validate() const {
        weight_opt.validate();
        alpha_opt.validate();
        if (batch_size < 1) throw ValueError("search config: batch size must be >= 1");
        (void)RankSearchSpace{std::vector<std::size_t>(space)};  // validates the space
    }
};

struct EpochRow {
    std::size_t epoch = 0;
    std::string phase;  // search | finetune
    double train_loss = 0.0;
    double val_loss = 0.0;
    double eval_ppl = 0.0;
    double seconds = 0.0;
    std::size_t trainable_params = 0;
};

struct SearchState {
    std::size_t step = 0;
    std::size_t search_epochs_done = 0;
    std::size_t finetune_epochs_done = 0;
    std::vector<std::string> module_names;
    // alpha_history[epoch][module] = post-softmax distribution.
    std::vector<std::vector<std::vector<double>>> alpha_history;
    std::vector<EpochRow> rows;
    std::uint64_t seed = 0;
};

// Anything the bi-level stepper can train: a loss over a batch plus the two
// parameter groups.
struct TrainableModel {
    virtual ~TrainableModel() = default;
    virtual Tensor batch_loss(const std::vector<const Example*>& batch) = 0;
    virtual std::vector<TensorPtr> weight_params() = 0;
    virtual std::vector<TensorPtr> alpha_params() = 0;
};

// Next-token objective of the toy transformer, token-mean over the batch.
class TransformerTask final : public TrainableModel {
  public:
    explicit TransformerTask(FrozenTransformer& model) : model_(model) {}

    Tensor batch_loss(const std::vector<const Example*>& batch) override {
        if (batch.empty()) throw ValueError("batch_loss: empty batch");
        Tensor acc;
        std::size_t total = 0;
        for (const Example* ex : batch) {
            std::size_t c = 0;
            Tensor s = model_.example_loss_sum(*ex, &c);
            total += c;
            acc = acc.defined() ? add(acc, s) : s;
        }
        if (total == 0) throw ValueError("batch_loss: batch has no supervised positions");
        return scalar_mul(acc, 1.0 / static_cast<double>(total));
    }

    std::vector<TensorPtr> weight_params() override { return model_.weight_params(); }
    std::vector<TensorPtr> alpha_params() override { return model_.alpha_params(); }

  private:
    FrozenTransformer& model_;
};

// The two alternating steps of the search loop. Each step zeroes stale
// gradients, runs one forward/backward on a fresh tape, and updates exactly
// its own parameter group.
class BiLevelStepper {
  public:
    BiLevelStepper(TrainableModel& model, const SearchConfig& cfg, SearchState& state)
        : model_(model), cfg_(cfg), state_(state) {
        rebind();
    }

    // Re-grabs parameter groups after attachments change; optimizer state
    // starts fresh.
    void rebind() {
        weight_opt_ = Optimizer(model_.weight_params(), cfg_.weight_opt);
        alpha_opt_ = Optimizer(model_.alpha_params(), cfg_.alpha_opt);
    }

    double weight_step(const std::vector<const Example*>& batch,
                       const std::string& batch_tag = "") {
        return do_step(batch, weight_opt_, "weight", batch_tag);
    }

    double alpha_step(const std::vector<const Example*>& batch,
                      const std::string& batch_tag = "") {
        if (alpha_opt_.params().empty()) {
            throw StateError("alpha_step: no architectural parameters attached");
        }
        return do_step(batch, alpha_opt_, "alpha", batch_tag);
    }

    Optimizer& weight_optimizer() { return weight_opt_; }
    Optimizer& alpha_optimizer() { return alpha_opt_; }

  private:
    double do_step(const std::vector<const Example*>& batch, Optimizer& opt, const char* what,
                   const std::string& batch_tag) {
        Tape::Scope scope;
        weight_opt_.zero_grad();
        alpha_opt_.zero_grad();
        Tensor loss = model_.batch_loss(batch);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            throw NumericError(std::string(what) + "_step diverged at step " +
                               std::to_string(state_.step) +
                               (batch_tag.empty() ? "" : " (batch " + batch_tag + ")"));
        }
        scope.tape().backward(loss);
        opt.step();
        weight_opt_.zero_grad();
        alpha_opt_.zero_grad();
        ++state_.step;
        return value;
    }

    TrainableModel& model_;
    const SearchConfig& cfg_;
    SearchState& state_;
    Optimizer weight_opt_;
    Optimizer alpha_opt_;
};

namespace detail {

inline std::vector<const Example*> resolve_batch(const Dataset& split,
                                                 const std::vector<std::size_t>& indices) {
    std::vector<const Example*> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(&split.examples[i]);
    return out;
}

inline std::vector<double> softmax_plain(const std::vector<double>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        z += out[i];
    }
    for (double& x : out) x /= z;
    return out;
}

// Token-mean validation loss without touching gradients.
inline double mean_split_loss(FrozenTransformer& model, const Dataset& split) {
    Tape::NoGrad guard;
    double total = 0.0;
    std::size_t count = 0;
    for (const Example& ex : split.examples) {
        std::size_t c = 0;
        total += model.example_loss_sum(ex, &c).item();
        count += c;
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace detail

// Orchestrates Algorithm-1 style search and the follow-up fine-tune over one
// model and task bundle. The abort hook (when set) runs before a diverged
// step error propagates, giving callers a chance to checkpoint.
class SearchDriver {
  public:
    SearchDriver(FrozenTransformer& model, const TaskBundle& data, SearchConfig cfg)
        : model_(model), data_(data), cfg_(std::move(cfg)), task_(model) {
        cfg_.validate();
        state_.seed = cfg_.seed;
        stepper_.emplace(task_, cfg_, state_);
    }

    SearchState& state() { return state_; }
    const SearchConfig& config() const { return cfg_; }
    BiLevelStepper& stepper() { return *stepper_; }
    std::function<void(const std::string&)> abort_hook;

    // Checkpoint restore: state is replaced, finetune preparation is marked
    // done when the model already carries fixed adapters.
    void restore_state(SearchState state) {
        state_ = std::move(state);
        finetune_prepared_ = model_.supernet_modules().empty() &&
                             !model_.weight_params().empty();
    }

    // Alternating bi-level loop: per train batch, one weight step then one
    // alpha step on the round-robin validation batch. Returns the sampled
    // rank map.
    RankMap run_search() {
        auto modules = model_.supernet_modules();
        if (modules.empty()) {
            throw StateError("run_search: model has no supernet attachments");
        }
        if (state_.module_names.empty()) {
            for (auto* m : modules) state_.module_names.push_back(m->target());
        }
        try {
            for (std::size_t epoch = state_.search_epochs_done; epoch < cfg_.search_epochs;
                 ++epoch) {
                const auto t0 = std::chrono::steady_clock::now();
                auto train_batches = batch_iter(data_.train, cfg_.batch_size, cfg_.seed, epoch);
                auto val_batches = batch_iter(data_.val, cfg_.batch_size, cfg_.seed, epoch);
                double train_sum = 0.0, val_sum = 0.0;
                for (std::size_t bi = 0; bi < train_batches.size(); ++bi) {
                    const std::string tag =
                        "search e" + std::to_string(epoch) + " b" + std::to_string(bi);
                    train_sum += stepper_->weight_step(
                        detail::resolve_batch(data_.train, train_batches[bi]), tag);
                    val_sum += stepper_->alpha_step(
                        detail::resolve_batch(data_.val, val_batches[bi % val_batches.size()]),
                        tag);
                }
                record_epoch("search", train_sum / double(train_batches.size()),
                             val_sum / double(train_batches.size()), t0);
                record_alpha_history(modules);
                state_.search_epochs_done = epoch + 1;
            }
        } catch (const NumericError& e) {
            if (abort_hook) abort_hook(e.what());
            throw;
        }
        return sample_rank_map();
    }

    RankMap sample_rank_map() {
        RankMap map;
        for (auto* m : model_.supernet_modules()) {
            RankMap::Entry entry;
            entry.module = m->target();
            entry.rank = sample_rank(*m);
            entry.alphas = detail::softmax_plain(m->alphas().data());
            entry.search_space = m->space().ranks();
            map.add(std::move(entry));
        }
        return map;
    }

    // Fixed-rank fine-tuning. A supernet model is first collapsed to fixed
    // adapters (warm start, or fresh when reinit is configured); a frozen
    // model gets fresh adapters; a fixed-adapter model trains as-is after a
    // rank check.
    double run_finetune(const RankMap& map) {
        prepare_finetune(map);
        try {
            for (std::size_t epoch = state_.finetune_epochs_done; epoch < cfg_.finetune_epochs;
                 ++epoch) {
                const auto t0 = std::chrono::steady_clock::now();
                auto train_batches = batch_iter(data_.train, cfg_.batch_size, cfg_.seed, epoch);
                double train_sum = 0.0;
                for (std::size_t bi = 0; bi < train_batches.size(); ++bi) {
                    const std::string tag =
                        "finetune e" + std::to_string(epoch) + " b" + std::to_string(bi);
                    train_sum += stepper_->weight_step(
                        detail::resolve_batch(data_.train, train_batches[bi]), tag);
                }
                record_epoch("finetune", train_sum / double(train_batches.size()),
                             detail::mean_split_loss(model_, data_.val), t0);
                state_.finetune_epochs_done = epoch + 1;
            }
        } catch (const NumericError& e) {
            if (abort_hook) abort_hook(e.what());
            throw;
        }
        return eval_perplexity(model_, data_.eval_split);
    }

  private:
    void prepare_finetune(const RankMap& map) {
        if (finetune_prepared_) return;
        const bool has_supernet = !model_.supernet_modules().empty();
        const auto ranks = map.as_map();
        if (has_supernet) {
            if (cfg_.reinit_after_search) {
                model_.attach_adapters(0, cfg_.lora_alpha, cfg_.seed, &ranks);
            } else {
                model_.attach_extracted(ranks);
            }
        } else {
            bool any_fixed = false;
            for (auto* lin : model_.adaptable_modules()) {
                if (lin->mode == AdaptedLinear::Mode::Fixed) any_fixed = true;
            }
            if (any_fixed) {
                for (auto* lin : model_.adaptable_modules()) {
                    if (lin->adapter && lin->adapter->rank != ranks.at(lin->name)) {
                        throw ValueError("finetune: module '" + lin->name +
                                         "' carries rank " +
                                         std::to_string(lin->adapter->rank) +
                                         " but the map says " +
                                         std::to_string(ranks.at(lin->name)));
                    }
                }
            } else {
                model_.attach_adapters(0, cfg_.lora_alpha, cfg_.seed, &ranks);
            }
        }
        stepper_->rebind();
        finetune_prepared_ = true;
    }

    void record_epoch(const char* phase, double train_loss, double val_loss,
                      std::chrono::steady_clock::time_point t0) {
        EpochRow row;
        row.epoch = state_.rows.size();
        row.phase = phase;
        row.train_loss = train_loss;
        row.val_loss = val_loss;
        row.eval_ppl = eval_perplexity(model_, data_.eval_split);
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        row.trainable_params = model_.trainable_param_count();
        state_.rows.push_back(std::move(row));
    }

    void record_alpha_history(const std::vector<SuperLoraModule*>& modules) {
        std::vector<std::vector<double>> row;
        row.reserve(modules.size());
        for (auto* m : modules) row.push_back(detail::softmax_plain(m->alphas().data()));
        state_.alpha_history.push_back(std::move(row));
    }

    FrozenTransformer& model_;
    const TaskBundle& data_;
    SearchConfig cfg_;
    TransformerTask task_;
    SearchState state_;
    std::optional<BiLevelStepper> stepper_;
    bool finetune_prepared_ = false;
};

}  // namespace lorarank
