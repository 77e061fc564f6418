#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lorarank/error.hpp"

namespace lorarank {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major 64-bit float storage. `grad` stays empty until a backward
// pass reaches this tensor. `traced` marks tensors participating in the
// active tape's graph; it is requires_grad at leaves and inherited through
// operations.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool traced = false;

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

using TensorPtr = std::shared_ptr<TensorImpl>;

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(TensorPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape) {
        auto impl = std::make_shared<TensorImpl>();
        impl->data.assign(shape_numel(shape), 0.0);
        impl->shape = std::move(shape);
        return Tensor(impl);
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.impl_->data) v = value;
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor init: shape " + shape_str(shape) + " expects " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        return Tensor(impl);
    }

    static Tensor scalar(double value) { return from({1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const TensorPtr& impl() const { return impl_; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->numel(); }

    std::size_t rows() const {
        require_2d("rows()");
        return impl_->shape[0];
    }
    std::size_t cols() const {
        require_2d("cols()");
        return impl_->shape[1];
    }

    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mut_data() { return impl_->data; }

    double at(std::size_t i) const { return impl_->data.at(i); }
    double at(std::size_t i, std::size_t j) const {
        require_2d("at(i,j)");
        return impl_->data[i * impl_->shape[1] + j];
    }
    void set(std::size_t i, double v) { impl_->data.at(i) = v; }
    void set(std::size_t i, std::size_t j, double v) {
        require_2d("set(i,j)");
        impl_->data[i * impl_->shape[1] + j] = v;
    }

    double item() const {
        if (numel() != 1) {
            throw ShapeError("item(): tensor " + shape_str(impl_->shape) + " is not a scalar");
        }
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        impl_->requires_grad = value;
        impl_->traced = impl_->traced || value;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (impl_->grad.empty()) {
            throw StateError("grad(): no gradient populated; run backward() first");
        }
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

  private:
    void require_2d(const char* what) const {
        if (impl_->shape.size() != 2) {
            throw ShapeError(std::string(what) + " requires a 2-D tensor, got " +
                             shape_str(impl_->shape));
        }
    }

    TensorPtr impl_;
};

// Define-by-run tape. Operations append entries in execution order, which is
// already topological; backward() walks them in reverse. One backward per
// tape, then reset().
class Tape {
  public:
    struct Entry {
        TensorPtr output;
        std::function<void()> pull;  // reads output->grad, accumulates into inputs
    };

    static Tape& active() { return *slot(); }

    bool recording() const { return recording_; }
    bool consumed() const { return consumed_; }
    std::size_t size() const { return entries_.size(); }

    void record(TensorPtr output, std::function<void()> pull) {
        entries_.push_back(Entry{std::move(output), std::move(pull)});
    }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        if (consumed_) {
            throw StateError("backward: tape already consumed; call reset() before reuse");
        }
        if (!loss.impl()->traced) {
            throw StateError("backward: loss was not recorded on the active tape");
        }
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (!it->output->grad.empty()) it->pull();
        }
        consumed_ = true;
    }

    void reset() {
        entries_.clear();
        consumed_ = false;
    }

    class Scope;
    class NoGrad;

  private:
    static Tape*& slot() {
        thread_local Tape root;
        thread_local Tape* current = &root;
        return current;
    }

    std::vector<Entry> entries_;
    bool consumed_ = false;
    bool recording_ = true;
};

// RAII: swap in a fresh tape for the current thread.
class Tape::Scope {
  public:
    Scope() : previous_(slot()) { slot() = &local_; }
    ~Scope() { slot() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    Tape& tape() { return local_; }

  private:
    Tape local_;
    Tape* previous_;
};

// RAII: suspend recording (evaluation / finite-difference probes).
class Tape::NoGrad {
  public:
    NoGrad() : tape_(&active()), previous_(tape_->recording_) { tape_->recording_ = false; }
    ~NoGrad() { tape_->recording_ = previous_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

  private:
    Tape* tape_;
    bool previous_;
};

inline void backward(const Tensor& loss) { Tape::active().backward(loss); }

namespace detail {

inline bool wants_grad(const TensorPtr& p) { return p->traced || p->requires_grad; }

inline Tensor make_result(Shape shape, std::initializer_list<const Tensor*> inputs) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    if (Tape::active().recording()) {
        for (const Tensor* t : inputs) {
            if ((*t).impl()->traced) {
                impl->traced = true;
                break;
            }
        }
    }
    return Tensor(impl);
}

inline void record_if_traced(const Tensor& out, std::function<void()> pull) {
    if (out.impl()->traced) Tape::active().record(out.impl(), std::move(pull));
}

}  // namespace detail

}  // namespace lorarank
