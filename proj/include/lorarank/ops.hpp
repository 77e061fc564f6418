#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "lorarank/tensor.hpp"

// Differentiable operations over Tensor. Each op computes its forward value
// eagerly and, when the result is traced, records a pull closure on the
// active tape that accumulates input gradients from the output gradient.
// Only rank-1 and rank-2 tensors are supported; broadcasting is limited to
// scalar-times-tensor.

namespace lorarank {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
    }
}

// Rows/cols of a tensor viewed as a stack of rows (1-D counts as one row).
inline std::pair<std::size_t, std::size_t> row_view(const Tensor& t, const char* op) {
    if (t.ndim() == 1) return {1, t.shape()[0]};
    if (t.ndim() == 2) return {t.shape()[0], t.shape()[1]};
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = detail::make_result(a.shape(), {&a, &b});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mut_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    detail::record_if_traced(out, [pa = a.impl(), pb = b.impl(), po = out.impl()] {
        if (detail::wants_grad(pa)) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
        }
        if (detail::wants_grad(pb)) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i) pb->grad[i] += po->grad[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = detail::make_result(a.shape(), {&a, &b});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mut_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    detail::record_if_traced(out, [pa = a.impl(), pb = b.impl(), po = out.impl()] {
        if (detail::wants_grad(pa)) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
        }
        if (detail::wants_grad(pb)) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i) pb->grad[i] -= po->grad[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = detail::make_result(a.shape(), {&a, &b});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mut_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    detail::record_if_traced(out, [pa = a.impl(), pb = b.impl(), po = out.impl()] {
        if (detail::wants_grad(pa)) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i)
                pa->grad[i] += po->grad[i] * pb->data[i];
        }
        if (detail::wants_grad(pb)) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i)
                pb->grad[i] += po->grad[i] * pa->data[i];
        }
    });
    return out;
}

inline Tensor scalar_mul(const Tensor& a, double c) {
    Tensor out = detail::make_result(a.shape(), {&a});
    const auto& av = a.data();
    auto& ov = out.mut_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    detail::record_if_traced(out, [pa = a.impl(), po = out.impl(), c] {
        if (detail::wants_grad(pa)) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i] * c;
        }
    });
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = detail::make_result({m, n}, {&a, &b});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out.mut_data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = B + p * n;
            double* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    detail::record_if_traced(out, [pa = a.impl(), pb = b.impl(), po = out.impl(), m, k, n] {
        const double* dC = po->grad.data();
        if (detail::wants_grad(pa)) {
            pa->ensure_grad();
            double* dA = pa->grad.data();
            const double* B = pb->data.data();
            // dA = dC * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += dC[i * n + j] * B[p * n + j];
                    dA[i * k + p] += acc;
                }
        }
        if (detail::wants_grad(pb)) {
            pb->ensure_grad();
            double* dB = pb->grad.data();
            const double* A = pa->data.data();
            // dB = A^T * dC
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t i = 0; i < m; ++i) {
                    const double aip = A[i * k + p];
                    if (aip == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * dC[i * n + j];
                }
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) {
        throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    }
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out = detail::make_result({n, m}, {&a});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.mut_data()[j * m + i] = a.data()[i * n + j];
    detail::record_if_traced(out, [pa = a.impl(), po = out.impl(), m, n] {
        if (!detail::wants_grad(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += po->grad[j * m + i];
    });
    return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor out = detail::make_result(std::move(shape), {&a});
    out.mut_data() = a.data();
    detail::record_if_traced(out, [pa = a.impl(), po = out.impl()] {
        if (!detail::wants_grad(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t end) {
    if (x.ndim() != 2) {
        throw ShapeError("slice_cols: expected rank 2, got " + shape_str(x.shape()));
    }
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (start >= end || end > n) {
        throw IndexError("slice_cols: window [" + std::to_string(start) + ", " +
                         std::to_string(end) + ") out of range for " + std::to_string(n) +
                         " columns");
    }
    const std::size_t w = end - start;
    Tensor out = detail::make_result({m, w}, {&x});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
            out.mut_data()[i * w + j] = x.data()[i * n + start + j];
    detail::record_if_traced(out, [px = x.impl(), po = out.impl(), m, n, w, start] {
        if (!detail::wants_grad(px)) return;
        px->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
                px->grad[i * n + start + j] += po->grad[i * w + j];
    });
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t end) {
    if (x.ndim() != 2) {
        throw ShapeError("slice_rows: expected rank 2, got " + shape_str(x.shape()));
    }
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (start >= end || end > m) {
        throw IndexError("slice_rows: window [" + std::to_string(start) + ", " +
                         std::to_string(end) + ") out of range for " + std::to_string(m) +
                         " rows");
    }
    const std::size_t h = end - start;
    Tensor out = detail::make_result({h, n}, {&x});
    std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(start * n),
              x.data().begin() + static_cast<std::ptrdiff_t>(end * n), out.mut_data().begin());
    detail::record_if_traced(out, [px = x.impl(), po = out.impl(), n, h, start] {
        if (!detail::wants_grad(px)) return;
        px->ensure_grad();
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < n; ++j)
                px->grad[(start + i) * n + j] += po->grad[i * n + j];
    });
    return out;
}

// Column-wise concatenation of same-height matrices.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValueError("concat_cols: no tensors given");
    const std::size_t m = parts.front().rows();
    std::size_t total = 0;
    for (const Tensor& t : parts) {
        if (t.ndim() != 2 || t.shape()[0] != m) {
            throw ShapeError("concat_cols: row counts differ: " + shape_str(t.shape()));
        }
        total += t.shape()[1];
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = {m, total};
    impl->data.assign(m * total, 0.0);
    if (Tape::active().recording()) {
        for (const Tensor& t : parts)
            if (t.impl()->traced) impl->traced = true;
    }
    Tensor out(impl);
    std::size_t offset = 0;
    for (const Tensor& t : parts) {
        const std::size_t w = t.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
                impl->data[i * total + offset + j] = t.data()[i * w + j];
        offset += w;
    }
    std::vector<TensorPtr> inputs;
    inputs.reserve(parts.size());
    for (const Tensor& t : parts) inputs.push_back(t.impl());
    detail::record_if_traced(out, [inputs, po = out.impl(), m, total] {
        std::size_t offset = 0;
        for (const TensorPtr& p : inputs) {
            const std::size_t w = p->shape[1];
            if (detail::wants_grad(p)) {
                p->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        p->grad[i * w + j] += po->grad[i * total + offset + j];
            }
            offset += w;
        }
    });
    return out;
}

// Row-wise stack of same-width matrices.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValueError("concat_rows: no tensors given");
    const std::size_t n = parts.front().cols();
    std::size_t total = 0;
    for (const Tensor& t : parts) {
        if (t.ndim() != 2 || t.shape()[1] != n) {
            throw ShapeError("concat_rows: column counts differ: " + shape_str(t.shape()));
        }
        total += t.shape()[0];
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = {total, n};
    impl->data.reserve(total * n);
    if (Tape::active().recording()) {
        for (const Tensor& t : parts)
            if (t.impl()->traced) impl->traced = true;
    }
    for (const Tensor& t : parts)
        impl->data.insert(impl->data.end(), t.data().begin(), t.data().end());
    Tensor out(impl);
    std::vector<TensorPtr> inputs;
    inputs.reserve(parts.size());
    for (const Tensor& t : parts) inputs.push_back(t.impl());
    detail::record_if_traced(out, [inputs, po = out.impl()] {
        std::size_t offset = 0;
        for (const TensorPtr& p : inputs) {
            if (detail::wants_grad(p)) {
                p->ensure_grad();
                for (std::size_t i = 0; i < p->data.size(); ++i)
                    p->grad[i] += po->grad[offset + i];
            }
            offset += p->data.size();
        }
    });
    return out;
}

inline Tensor sum(const Tensor& a) {
    Tensor out = detail::make_result({1}, {&a});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out.mut_data()[0] = acc;
    detail::record_if_traced(out, [pa = a.impl(), po = out.impl()] {
        if (!detail::wants_grad(pa)) return;
        pa->ensure_grad();
        const double g = po->grad[0];
        for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    });
    return out;
}

namespace detail {

// Shared softmax core. Masked entries get probability exactly zero; the
// backward formula dx = p * (dy - sum(dy * p)) is unchanged because masked
// probabilities vanish.
inline Tensor softmax_impl(const Tensor& x, const std::vector<std::uint8_t>* mask) {
    auto [rows, cols] = row_view(x, "softmax_rows");
    if (cols == 0) throw ShapeError("softmax_rows: empty last dimension");
    if (mask && mask->size() != x.numel()) {
        throw ShapeError("softmax_rows: mask size " + std::to_string(mask->size()) +
                         " does not match tensor " + shape_str(x.shape()));
    }
    Tensor out = make_result(x.shape(), {&x});
    const auto& xv = x.data();
    auto& ov = out.mut_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < cols; ++j) {
            if (mask && !(*mask)[base + j]) continue;
            any = true;
            mx = std::max(mx, xv[base + j]);
        }
        if (!any) throw ValueError("softmax_rows: row " + std::to_string(r) + " fully masked");
        double denom = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            if (mask && !(*mask)[base + j]) {
                ov[base + j] = 0.0;
                continue;
            }
            ov[base + j] = std::exp(xv[base + j] - mx);
            denom += ov[base + j];
        }
        for (std::size_t j = 0; j < cols; ++j) ov[base + j] /= denom;
    }
    detail::record_if_traced(out, [px = x.impl(), po = out.impl(), rows, cols] {
        if (!detail::wants_grad(px)) return;
        px->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += po->grad[base + j] * po->data[base + j];
            for (std::size_t j = 0; j < cols; ++j)
                px->grad[base + j] += po->data[base + j] * (po->grad[base + j] - dot);
        }
    });
    return out;
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& x) { return detail::softmax_impl(x, nullptr); }

inline Tensor masked_softmax_rows(const Tensor& x, const std::vector<std::uint8_t>& mask) {
    return detail::softmax_impl(x, &mask);
}

inline Tensor relu(const Tensor& a) {
    Tensor out = detail::make_result(a.shape(), {&a});
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.mut_data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    detail::record_if_traced(out, [pa = a.impl(), po = out.impl()] {
        if (!detail::wants_grad(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < po->grad.size(); ++i)
            if (pa->data[i] > 0.0) pa->grad[i] += po->grad[i];
    });
    return out;
}

inline Tensor silu(const Tensor& a) {
    Tensor out = detail::make_result(a.shape(), {&a});
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double x = a.data()[i];
        out.mut_data()[i] = x / (1.0 + std::exp(-x));
    }
    detail::record_if_traced(out, [pa = a.impl(), po = out.impl()] {
        if (!detail::wants_grad(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < po->grad.size(); ++i) {
            const double x = pa->data[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            pa->grad[i] += po->grad[i] * (s * (1.0 + x * (1.0 - s)));
        }
    });
    return out;
}

// Row-wise layer normalization with affine parameters.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    auto [rows, cols] = detail::row_view(x, "layer_norm");
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw ShapeError("layer_norm: gamma/beta length must equal row width " +
                         std::to_string(cols));
    }
    Tensor out = detail::make_result(x.shape(), {&x, &gamma, &beta});
    std::vector<double> inv_sigma(rows), x_hat(x.numel());
    const auto& xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += xv[base + j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = xv[base + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        inv_sigma[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) {
            x_hat[base + j] = (xv[base + j] - mean) * inv_sigma[r];
            out.mut_data()[base + j] = x_hat[base + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    detail::record_if_traced(
        out, [px = x.impl(), pg = gamma.impl(), pb = beta.impl(), po = out.impl(), rows, cols,
              inv_sigma = std::move(inv_sigma), x_hat = std::move(x_hat)] {
            const auto& dy = po->grad;
            if (detail::wants_grad(pg)) {
                pg->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < cols; ++j)
                        pg->grad[j] += dy[r * cols + j] * x_hat[r * cols + j];
            }
            if (detail::wants_grad(pb)) {
                pb->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < cols; ++j) pb->grad[j] += dy[r * cols + j];
            }
            if (detail::wants_grad(px)) {
                px->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * cols;
                    double mean_gdy = 0.0, mean_gdy_xhat = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double gdy = pg->data[j] * dy[base + j];
                        mean_gdy += gdy;
                        mean_gdy_xhat += gdy * x_hat[base + j];
                    }
                    mean_gdy /= static_cast<double>(cols);
                    mean_gdy_xhat /= static_cast<double>(cols);
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double gdy = pg->data[j] * dy[base + j];
                        px->grad[base + j] +=
                            inv_sigma[r] * (gdy - mean_gdy - x_hat[base + j] * mean_gdy_xhat);
                    }
                }
            }
        });
    return out;
}

// Gather rows of `table` by token id; backward scatter-adds into the table.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) {
        throw ShapeError("embedding_lookup: table must be rank 2, got " +
                         shape_str(table.shape()));
    }
    const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw IndexError("embedding_lookup: token id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(vocab));
        }
    }
    Tensor out = detail::make_result({ids.size(), dim}, {&table});
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < dim; ++j)
            out.mut_data()[i * dim + j] =
                table.data()[static_cast<std::size_t>(ids[i]) * dim + j];
    detail::record_if_traced(out, [pt = table.impl(), po = out.impl(), ids, dim] {
        if (!detail::wants_grad(pt)) return;
        pt->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < dim; ++j)
                pt->grad[static_cast<std::size_t>(ids[i]) * dim + j] += po->grad[i * dim + j];
    });
    return out;
}

namespace detail {

// Fused log-softmax cross entropy. `mask` (optional) selects contributing
// rows; the result is the sum over selected rows, divided by `denom`.
inline Tensor cross_entropy_impl(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<std::uint8_t>* mask, double denom) {
    if (logits.ndim() != 2) {
        throw ShapeError("cross_entropy: logits must be rank 2, got " +
                         shape_str(logits.shape()));
    }
    const std::size_t b = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(b) + " rows but " +
                         std::to_string(targets.size()) + " targets");
    }
    if (mask && mask->size() != b) {
        throw ShapeError("cross_entropy: mask length " + std::to_string(mask->size()) +
                         " does not match batch " + std::to_string(b));
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw IndexError("cross_entropy: target " + std::to_string(t) +
                             " outside vocabulary of size " + std::to_string(v));
        }
    }
    Tensor out = make_result({1}, {&logits});
    // Per-row probabilities are kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(logits.data());
    double total = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        double* row = probs->data() + r * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            row[j] = std::exp(row[j] - mx);
            lse += row[j];
        }
        for (std::size_t j = 0; j < v; ++j) row[j] /= lse;
        if (!mask || (*mask)[r]) {
            total += std::log(lse) + mx - logits.data()[r * v + targets[r]];
        }
    }
    out.mut_data()[0] = total / denom;
    detail::record_if_traced(out, [pl = logits.impl(), po = out.impl(), probs, targets,
                                   masked = mask ? *mask : std::vector<std::uint8_t>{}, b, v,
                                   denom] {
        if (!detail::wants_grad(pl)) return;
        pl->ensure_grad();
        const double g = po->grad[0] / denom;
        for (std::size_t r = 0; r < b; ++r) {
            if (!masked.empty() && !masked[r]) continue;
            for (std::size_t j = 0; j < v; ++j)
                pl->grad[r * v + j] += g * (*probs)[r * v + j];
            pl->grad[r * v + static_cast<std::size_t>(targets[r])] -= g;
        }
    });
    return out;
}

}  // namespace detail

// Mean of -log softmax(logits)[target] over the batch.
inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& targets) {
    const double denom = logits.ndim() == 2 ? static_cast<double>(logits.shape()[0]) : 1.0;
    return detail::cross_entropy_impl(logits, targets, nullptr, denom);
}

// Sum of -log softmax(logits)[target] over rows where mask is set.
inline Tensor cross_entropy_masked_sum(const Tensor& logits, const std::vector<int>& targets,
                                       const std::vector<std::uint8_t>& mask) {
    return detail::cross_entropy_impl(logits, targets, &mask, 1.0);
}

// out[i,j] = w[i,j] * v[j]. Gradient of v sums w-weighted columns.
inline Tensor scale_columns(const Tensor& w, const Tensor& v) {
    if (w.ndim() != 2 || v.numel() != w.shape()[1]) {
        throw ShapeError("scale_columns: " + shape_str(w.shape()) + " by " +
                         shape_str(v.shape()));
    }
    const std::size_t m = w.shape()[0], n = w.shape()[1];
    Tensor out = detail::make_result(w.shape(), {&w, &v});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.mut_data()[i * n + j] = w.data()[i * n + j] * v.data()[j];
    detail::record_if_traced(out, [pw = w.impl(), pv = v.impl(), po = out.impl(), m, n] {
        if (detail::wants_grad(pw)) {
            pw->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    pw->grad[i * n + j] += po->grad[i * n + j] * pv->data[j];
        }
        if (detail::wants_grad(pv)) {
            pv->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    pv->grad[j] += po->grad[i * n + j] * pw->data[i * n + j];
        }
    });
    return out;
}

// out[i,j] = w[i,j] * v[i].
inline Tensor scale_rows(const Tensor& w, const Tensor& v) {
    if (w.ndim() != 2 || v.numel() != w.shape()[0]) {
        throw ShapeError("scale_rows: " + shape_str(w.shape()) + " by " + shape_str(v.shape()));
    }
    const std::size_t m = w.shape()[0], n = w.shape()[1];
    Tensor out = detail::make_result(w.shape(), {&w, &v});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.mut_data()[i * n + j] = w.data()[i * n + j] * v.data()[i];
    detail::record_if_traced(out, [pw = w.impl(), pv = v.impl(), po = out.impl(), m, n] {
        if (detail::wants_grad(pw)) {
            pw->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    pw->grad[i * n + j] += po->grad[i * n + j] * pv->data[i];
        }
        if (detail::wants_grad(pv)) {
            pv->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    pv->grad[i] += po->grad[i * n + j] * pw->data[i * n + j];
        }
    });
    return out;
}

}  // namespace lorarank
