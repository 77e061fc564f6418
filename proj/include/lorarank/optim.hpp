#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lorarank/error.hpp"
#include "lorarank/tensor.hpp"

namespace lorarank {

enum class OptKind { Sgd, Momentum, Adam };

inline std::string opt_kind_name(OptKind k) {
    switch (k) {
        case OptKind::Sgd: return "sgd";
        case OptKind::Momentum: return "momentum";
        case OptKind::Adam: return "adam";
    }
    throw ValueError("unknown optimizer kind");
}

inline OptKind parse_opt_kind(const std::string& name) {
    if (name == "sgd") return OptKind::Sgd;
    if (name == "momentum") return OptKind::Momentum;
    if (name == "adam") return OptKind::Adam;
    throw ValueError("unknown optimizer '" + name + "' (expected sgd, momentum or adam)");
}

struct OptimizerConfig {
    OptKind kind = OptKind::Adam;
    double lr = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::optional<double> clip_norm;  // global-norm clip over the whole group

    // A zero learning rate is a legal no-op (freeze-contract tests rely on it).
    void validate() const {
        if (lr < 0.0) throw ValueError("optimizer: learning rate must be non-negative");
        if (clip_norm && *clip_norm <= 0.0) {
            throw ValueError("optimizer: clip norm must be positive");
        }
    }
};

// One parameter group. Parameters with no populated gradient are treated as
// having zero gradient; moment buffers still decay so resumed runs replay
// identically.
class Optimizer {
  public:
    Optimizer() = default;

    Optimizer(std::vector<TensorPtr> params, OptimizerConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        cfg_.validate();
        reset_state();
    }

    const OptimizerConfig& config() const { return cfg_; }
    const std::vector<TensorPtr>& params() const { return params_; }
    std::size_t step_count() const { return t_; }

    void step() {
        if (params_.empty()) return;
        ++t_;
        double scale = 1.0;
        if (cfg_.clip_norm) {
            double sq = 0.0;
            for (const auto& p : params_)
                for (double g : p->grad) sq += g * g;
            const double norm = std::sqrt(sq);
            if (norm > *cfg_.clip_norm) scale = *cfg_.clip_norm / norm;
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            const bool has_grad = !p.grad.empty();
            auto grad_at = [&](std::size_t j) { return has_grad ? p.grad[j] * scale : 0.0; };
            switch (cfg_.kind) {
                case OptKind::Sgd:
                    for (std::size_t j = 0; j < p.data.size(); ++j)
                        p.data[j] -= cfg_.lr * grad_at(j);
                    break;
                case OptKind::Momentum:
                    for (std::size_t j = 0; j < p.data.size(); ++j) {
                        m_[i][j] = cfg_.momentum * m_[i][j] + grad_at(j);
                        p.data[j] -= cfg_.lr * m_[i][j];
                    }
                    break;
                case OptKind::Adam: {
                    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
                    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
                    for (std::size_t j = 0; j < p.data.size(); ++j) {
                        const double g = grad_at(j);
                        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
                        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
                        const double mhat = m_[i][j] / bc1;
                        const double vhat = v_[i][j] / bc2;
                        p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                    }
                    break;
                }
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->grad.clear();
    }

    // Checkpoint access to moment buffers and the step counter.
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void set_step_count(std::size_t t) { t_ = t; }

  private:
    void reset_state() {
        m_.assign(params_.size(), {});
        v_.assign(params_.size(), {});
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->data.size(), 0.0);
            v_[i].assign(params_[i]->data.size(), 0.0);
        }
        t_ = 0;
    }

    std::vector<TensorPtr> params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

}  // namespace lorarank
