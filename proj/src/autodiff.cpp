#include "tpt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

namespace tpt::ad {

namespace {

constexpr double kLogClamp = 1e-12;
constexpr double kNormClamp = 1e-12;

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            c[i * k + p] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape || a.tape == nullptr) {
        throw ContractError("operands recorded on different tapes");
    }
    return *a.tape;
}

Shape mat_shape(std::size_t r, std::size_t c) { return {r, c}; }

} // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Tensor& tensor) {
    Node node;
    node.borrowed = &tensor;
    node.param = tensor.requires_grad() ? &tensor : nullptr;
    node.needs_grad = tensor.requires_grad();
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(const Tensor& tensor) {
    Node node;
    node.borrowed = &tensor;
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor&& tensor) {
    Node node;
    node.owned = std::move(tensor);
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value_of(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.owned;
}

const Tensor& Tape::value(Var v) const {
    if (v.tape != this) throw ContractError("var belongs to another tape");
    return value_of(v.id);
}

Var Tape::push(Tensor value, bool needs_grad, BackwardFn backward) {
    Node node;
    node.owned = std::move(value);
    node.needs_grad = needs_grad;
    if (needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw ContractError("loss belongs to another tape");
    if (value(loss).size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " +
                            shape_to_string(value(loss).shape()));
    }
    backward_order_.clear();
    for (std::size_t i = 0; i <= loss.id; ++i) {
        Node& n = nodes_[i];
        if (n.needs_grad) {
            n.grad.assign(value_of(static_cast<std::uint32_t>(i)).size(), 0.0);
        } else {
            n.grad.clear();
        }
    }
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad) continue;
        if (n.backward) {
            backward_order_.push_back(static_cast<std::uint32_t>(i));
            n.backward(*this, static_cast<std::uint32_t>(i));
        }
        if (n.param) {
            auto g = n.param->grad();
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
        }
    }
}

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (bv.rows() != k) {
        throw ShapeError("matmul: inner dimensions differ for " +
                         shape_to_string(av.shape()) + " and " +
                         shape_to_string(bv.shape()));
    }
    Tensor out(mat_shape(m, n));
    gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    const auto ia = a.id, ib = b.id;
    return t.push(std::move(out), ng, [ia, ib, m, k, n](Tape& tp, std::uint32_t self) {
        const double* dc = tp.grad_buffer(self).data();
        if (auto& ga = tp.grad_buffer(ia); !ga.empty()) {
            gemm_nt(dc, tp.value_of(ib).data().data(), ga.data(), m, n, k);
        }
        if (auto& gb = tp.grad_buffer(ib); !gb.empty()) {
            gemm_tn(tp.value_of(ia).data().data(), dc, gb.data(), m, k, n);
        }
    });
}

Var transpose(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    Tensor out(mat_shape(c, r));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix, r, c](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
}

Var add(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.size() != bv.size()) {
        throw ShapeError("add: shapes " + shape_to_string(av.shape()) + " and " +
                         shape_to_string(bv.shape()) + " differ");
    }
    Tensor out = av.detached();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const auto ia = a.id, ib = b.id;
    return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b),
                  [ia, ib](Tape& tp, std::uint32_t self) {
                      const auto& g = tp.grad_buffer(self);
                      for (auto id : {ia, ib}) {
                          auto& gi = tp.grad_buffer(id);
                          if (gi.empty()) continue;
                          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                      }
                  });
}

Var add_tiled(Var x, Var y) {
    Tape& t = same_tape(x, y);
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    const std::size_t rows = xv.rows(), cols = xv.cols(), period = yv.rows();
    if (yv.cols() != cols || period == 0 || rows % period != 0) {
        throw ShapeError("add_tiled: cannot tile " + shape_to_string(yv.shape()) +
                         " over " + shape_to_string(xv.shape()));
    }
    Tensor out = xv.detached();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = yv.data().data() + (r % period) * cols;
        double* o = out.data().data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) o[c] += yr[c];
    }
    const auto ix = x.id, iy = y.id;
    return t.push(std::move(out), t.needs_grad(x) || t.needs_grad(y),
                  [ix, iy, rows, cols, period](Tape& tp, std::uint32_t self) {
                      const auto& g = tp.grad_buffer(self);
                      if (auto& gx = tp.grad_buffer(ix); !gx.empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                      }
                      if (auto& gy = tp.grad_buffer(iy); !gy.empty()) {
                          for (std::size_t r = 0; r < rows; ++r) {
                              double* yr = gy.data() + (r % period) * cols;
                              const double* gr = g.data() + r * cols;
                              for (std::size_t c = 0; c < cols; ++c) yr[c] += gr[c];
                          }
                      }
                  });
}

Var mul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.size() != bv.size()) {
        throw ShapeError("mul: shapes " + shape_to_string(av.shape()) + " and " +
                         shape_to_string(bv.shape()) + " differ");
    }
    Tensor out = av.detached();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const auto ia = a.id, ib = b.id;
    return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b),
                  [ia, ib](Tape& tp, std::uint32_t self) {
                      const auto& g = tp.grad_buffer(self);
                      const Tensor& avv = tp.value_of(ia);
                      const Tensor& bvv = tp.value_of(ib);
                      if (auto& ga = tp.grad_buffer(ia); !ga.empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvv[i];
                      }
                      if (auto& gb = tp.grad_buffer(ib); !gb.empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avv[i];
                      }
                  });
}

Var scale(Var x, double factor) {
    Tape& t = *x.tape;
    Tensor out = x.value().detached();
    for (double& v : out.values()) v *= factor;
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix, factor](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
}

Var sum(Var x) {
    Tape& t = *x.tape;
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    const auto ix = x.id;
    return t.push(Tensor({1}, std::vector<double>{s}), t.needs_grad(x),
                  [ix](Tape& tp, std::uint32_t self) {
                      const double g = tp.grad_buffer(self)[0];
                      for (double& v : tp.grad_buffer(ix)) v += g;
                  });
}

Var softmax_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows(), cols = xv.cols();
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * cols;
        double* o = out.data().data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            z += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
    }
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix, rows, cols](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        const Tensor& y = tp.value_of(self);
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y.data().data() + r * cols;
            const double* gr = g.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += yr[c] * (gr[c] - dot);
        }
    });
}

Var log(Var x) {
    Tape& t = *x.tape;
    Tensor out = x.value().detached();
    for (double& v : out.values()) v = std::log(std::max(v, kLogClamp));
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        const Tensor& xv = tp.value_of(ix);
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > kLogClamp) gx[i] += g[i] / xv[i];
        }
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Tape& t = same_tape(x, gain);
    same_tape(x, bias);
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (gain.value().size() != cols || bias.value().size() != cols) {
        throw ShapeError("layer_norm: gain/bias must match last dimension " +
                         std::to_string(cols));
    }
    const double* gv = gain.value().data().data();
    const double* bv = bias.value().data().data();
    Tensor out(xv.shape());
    auto stats = std::make_shared<std::vector<double>>(2 * rows);  // mean, rstd
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += in[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
        var /= static_cast<double>(cols);
        const double rstd = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * r] = mean;
        (*stats)[2 * r + 1] = rstd;
        double* o = out.data().data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) o[c] = (in[c] - mean) * rstd * gv[c] + bv[c];
    }
    const bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
    const auto ix = x.id, ig = gain.id, ib = bias.id;
    return t.push(std::move(out), ng, [ix, ig, ib, rows, cols, stats](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        const Tensor& xv2 = tp.value_of(ix);
        const double* gv2 = tp.value_of(ig).data().data();
        auto& gx = tp.grad_buffer(ix);
        auto& gg = tp.grad_buffer(ig);
        auto& gb = tp.grad_buffer(ib);
        const double n = static_cast<double>(cols);
        std::vector<double> xhat(cols), dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
            const double mean = (*stats)[2 * r], rstd = (*stats)[2 * r + 1];
            const double* in = xv2.data().data() + r * cols;
            const double* gr = g.data() + r * cols;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                xhat[c] = (in[c] - mean) * rstd;
                dxhat[c] = gr[c] * gv2[c];
                m1 += dxhat[c];
                m2 += dxhat[c] * xhat[c];
                if (!gg.empty()) gg[c] += gr[c] * xhat[c];
                if (!gb.empty()) gb[c] += gr[c];
            }
            if (gx.empty()) continue;
            m1 /= n;
            m2 /= n;
            for (std::size_t c = 0; c < cols; ++c) {
                gx[r * cols + c] += rstd * (dxhat[c] - m1 - xhat[c] * m2);
            }
        }
    });
}

Var gelu(Var x) {
    Tape& t = *x.tape;
    Tensor out = x.value().detached();
    for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        const Tensor& xv = tp.value_of(ix);
        auto& gx = tp.grad_buffer(ix);
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

Var l2_normalize_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows(), cols = xv.cols();
    Tensor out(xv.shape());
    auto norms = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * cols;
        double ss = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ss += in[c] * in[c];
        const double nrm = std::max(std::sqrt(ss), kNormClamp);
        (*norms)[r] = nrm;
        for (std::size_t c = 0; c < cols; ++c) out.data()[r * cols + c] = in[c] / nrm;
    }
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix, rows, cols, norms](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        const Tensor& y = tp.value_of(self);
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            const double nrm = (*norms)[r];
            const double* yr = y.data().data() + r * cols;
            const double* gr = g.data() + r * cols;
            if (nrm <= kNormClamp) {
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gr[c] / nrm;
                continue;
            }
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += (gr[c] - yr[c] * dot) / nrm;
        }
    });
}

Var mean_rows(Var x) {
    return block_mean_rows(x, x.rows());
}

Var block_mean_rows(Var x, std::size_t block) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (block == 0 || rows % block != 0) {
        throw ShapeError("block_mean_rows: " + std::to_string(rows) +
                         " rows not divisible into blocks of " + std::to_string(block));
    }
    const std::size_t groups = rows / block;
    Tensor out(mat_shape(groups, cols));
    const double inv = 1.0 / static_cast<double>(block);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * cols;
        double* o = out.data().data() + (r / block) * cols;
        for (std::size_t c = 0; c < cols; ++c) o[c] += in[c];
    }
    for (double& v : out.values()) v *= inv;
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix, rows, cols, block, inv](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + (r / block) * cols;
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gr[c] * inv;
        }
    });
}

Var select_rows(Var x, std::span<const std::size_t> indices) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    const std::size_t cols = xv.cols();
    Tensor out(mat_shape(indices.size(), cols));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= xv.rows()) {
            throw ShapeError("select_rows: row " + std::to_string(indices[i]) +
                             " out of range for " + shape_to_string(xv.shape()));
        }
        std::copy_n(xv.data().data() + indices[i] * cols, cols, out.data().data() + i * cols);
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    const auto ix = x.id;
    return t.push(std::move(out), t.needs_grad(x), [ix, cols, idx = std::move(idx)](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < cols; ++c) gx[idx[i] * cols + c] += g[i * cols + c];
    });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
    const Tensor& xv = x.value();
    if (start + count > xv.rows()) {
        throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceed " +
                         shape_to_string(xv.shape()));
    }
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    return select_rows(x, idx);
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
    Tape& t = *parts.front().tape;
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    bool ng = false;
    for (const Var& p : parts) {
        same_tape(parts.front(), p);
        if (p.cols() != cols) {
            throw ShapeError("concat_rows: column count " + std::to_string(p.cols()) +
                             " differs from " + std::to_string(cols));
        }
        rows += p.rows();
        ng = ng || t.needs_grad(p);
    }
    Tensor out(mat_shape(rows, cols));
    std::vector<std::uint32_t> ids;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + offset);
        offset += pv.size();
        ids.push_back(p.id);
    }
    return t.push(std::move(out), ng, [ids = std::move(ids)](Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad_buffer(self);
        std::size_t off = 0;
        for (auto id : ids) {
            const std::size_t n = tp.value_of(id).size();
            auto& gi = tp.grad_buffer(id);
            if (!gi.empty()) {
                for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
            }
            off += n;
        }
    });
}

Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t seq_len, bool causal) {
    Tape& t = same_tape(q, k);
    same_tape(q, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t rows = qv.rows(), dim = qv.cols();
    if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
        throw ShapeError("attention: q/k/v shapes differ");
    }
    if (heads == 0 || dim % heads != 0 || seq_len == 0 || rows % seq_len != 0) {
        throw ShapeError("attention: " + shape_to_string(qv.shape()) +
                         " incompatible with heads=" + std::to_string(heads) +
                         " seq_len=" + std::to_string(seq_len));
    }
    const std::size_t blocks = rows / seq_len, dh = dim / heads, T = seq_len;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<double>>(blocks * heads * T * T, 0.0);
    Tensor out(mat_shape(rows, dim));
    const double* Q = qv.data().data();
    const double* K = kv.data().data();
    const double* V = vv.data().data();
    double* O = out.data().data();
    std::vector<double> s(T);
    for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* P = probs->data() + (b * heads + h) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
                const std::size_t lim = causal ? i + 1 : T;
                const double* qi = Q + (b * T + i) * dim + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < lim; ++j) {
                    const double* kj = K + (b * T + j) * dim + h * dh;
                    double acc = 0.0;
                    for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
                    s[j] = acc * sc;
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < lim; ++j) {
                    s[j] = std::exp(s[j] - mx);
                    z += s[j];
                }
                double* oi = O + (b * T + i) * dim + h * dh;
                for (std::size_t j = 0; j < lim; ++j) {
                    const double p = s[j] / z;
                    P[i * T + j] = p;
                    const double* vj = V + (b * T + j) * dim + h * dh;
                    for (std::size_t d = 0; d < dh; ++d) oi[d] += p * vj[d];
                }
            }
        }
    }
    const bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
    const auto iq = q.id, ik = k.id, iv = v.id;
    return t.push(std::move(out), ng,
                  [iq, ik, iv, blocks, heads, T, dim, dh, sc, causal, probs](Tape& tp, std::uint32_t self) {
        const double* G = tp.grad_buffer(self).data();
        const double* Q2 = tp.value_of(iq).data().data();
        const double* K2 = tp.value_of(ik).data().data();
        const double* V2 = tp.value_of(iv).data().data();
        auto& gq = tp.grad_buffer(iq);
        auto& gk = tp.grad_buffer(ik);
        auto& gv = tp.grad_buffer(iv);
        std::vector<double> dp(T);
        for (std::size_t b = 0; b < blocks; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const double* P = probs->data() + (b * heads + h) * T * T;
                for (std::size_t i = 0; i < T; ++i) {
                    const std::size_t lim = causal ? i + 1 : T;
                    const double* gi = G + (b * T + i) * dim + h * dh;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < lim; ++j) {
                        const double* vj = V2 + (b * T + j) * dim + h * dh;
                        double acc = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) acc += gi[d] * vj[d];
                        dp[j] = acc;
                        dot += acc * P[i * T + j];
                        if (!gv.empty()) {
                            double* gvj = gv.data() + (b * T + j) * dim + h * dh;
                            const double p = P[i * T + j];
                            for (std::size_t d = 0; d < dh; ++d) gvj[d] += p * gi[d];
                        }
                    }
                    const double* qi = Q2 + (b * T + i) * dim + h * dh;
                    for (std::size_t j = 0; j < lim; ++j) {
                        const double ds = P[i * T + j] * (dp[j] - dot) * sc;
                        if (ds == 0.0) continue;
                        const double* kj = K2 + (b * T + j) * dim + h * dh;
                        if (!gq.empty()) {
                            double* gqi = gq.data() + (b * T + i) * dim + h * dh;
                            for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
                        }
                        if (!gk.empty()) {
                            double* gkj = gk.data() + (b * T + j) * dim + h * dh;
                            for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
                        }
                    }
                }
            }
        }
    });
}

} // namespace tpt::ad
