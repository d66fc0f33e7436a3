#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "synbind/errors.hpp"
#include "synbind/mat.hpp"

namespace synbind {

// Reverse-mode autodiff on dense row-major matrices. A Tape is rebuilt for
// every forward pass (dynamic graph); nodes are referenced by index. The
// scalar type is a template parameter so gradient checks can run in double
// while training runs in float.
template <class T>
class Tape {
public:
    using M = MatT<T>;

    int size() const { return static_cast<int>(nodes_.size()); }
    const M& val(int id) const { return nodes_[id].value; }
    const M& grad_of(int id) const { return nodes_[id].grad; }

    int input(M v) {
        nodes_.push_back({std::move(v), {}, {}});
        return size() - 1;
    }

    // ---- arithmetic ----

    int add(int a, int b) {
        check_same_shape(a, b, "add");
        return emit(val(a) + val(b), [a, b](Tape& t, int self) {
            t.acc(a, t.grad_of(self));
            t.acc(b, t.grad_of(self));
        });
    }

    int sub(int a, int b) {
        check_same_shape(a, b, "sub");
        return emit(val(a) - val(b), [a, b](Tape& t, int self) {
            t.acc(a, t.grad_of(self));
            t.acc(b, -t.grad_of(self));
        });
    }

    int hadamard(int a, int b) {
        check_same_shape(a, b, "hadamard");
        return emit(val(a).cwiseProduct(val(b)), [a, b](Tape& t, int self) {
            t.acc(a, t.grad_of(self).cwiseProduct(t.val(b)));
            t.acc(b, t.grad_of(self).cwiseProduct(t.val(a)));
        });
    }

    int scale(int a, T c) {
        return emit(val(a) * c, [a, c](Tape& t, int self) { t.acc(a, t.grad_of(self) * c); });
    }

    // value + constant (no gradient through the constant)
    int add_const(int a, const M& c) {
        if (c.rows() != val(a).rows() || c.cols() != val(a).cols())
            throw ShapeError("add_const: shape mismatch");
        return emit(val(a) + c, [a](Tape& t, int self) { t.acc(a, t.grad_of(self)); });
    }

    // each row of a gets row vector r (1 x cols) added
    int add_rowvec(int a, int r) {
        if (val(r).rows() != 1 || val(r).cols() != val(a).cols())
            throw ShapeError("add_rowvec: bias must be 1 x cols");
        M v = val(a);
        v.rowwise() += val(r).row(0);
        return emit(std::move(v), [a, r](Tape& t, int self) {
            t.acc(a, t.grad_of(self));
            t.acc(r, t.grad_of(self).colwise().sum());
        });
    }

    // A * s where s is a 1x1 node (learned scalar)
    int scale_by(int a, int s) {
        if (val(s).rows() != 1 || val(s).cols() != 1) throw ShapeError("scale_by: scalar node must be 1x1");
        return emit(val(a) * val(s)(0, 0), [a, s](Tape& t, int self) {
            t.acc(a, t.grad_of(self) * t.val(s)(0, 0));
            M ds(1, 1);
            ds(0, 0) = t.grad_of(self).cwiseProduct(t.val(a)).sum();
            t.acc(s, ds);
        });
    }

    // A + b * ones, with b a 1x1 node
    int add_scalar_bias(int a, int b) {
        if (val(b).rows() != 1 || val(b).cols() != 1)
            throw ShapeError("add_scalar_bias: bias node must be 1x1");
        M v = val(a);
        v.array() += val(b)(0, 0);
        return emit(std::move(v), [a, b](Tape& t, int self) {
            t.acc(a, t.grad_of(self));
            M db(1, 1);
            db(0, 0) = t.grad_of(self).sum();
            t.acc(b, db);
        });
    }

    int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
        const M& A = val(a);
        const M& B = val(b);
        auto inner_a = trans_a ? A.rows() : A.cols();
        auto inner_b = trans_b ? B.cols() : B.rows();
        if (inner_a != inner_b) throw ShapeError("matmul: inner dimensions differ");
        M v;
        if (!trans_a && !trans_b) v = A * B;
        else if (!trans_a && trans_b) v = A * B.transpose();
        else if (trans_a && !trans_b) v = A.transpose() * B;
        else v = A.transpose() * B.transpose();
        return emit(std::move(v), [a, b, trans_a, trans_b](Tape& t, int self) {
            const M& A = t.val(a);
            const M& B = t.val(b);
            const M& G = t.grad_of(self);
            if (!trans_a && !trans_b) {
                t.acc(a, G * B.transpose());
                t.acc(b, A.transpose() * G);
            } else if (!trans_a && trans_b) {
                t.acc(a, G * B);
                t.acc(b, G.transpose() * A);
            } else if (trans_a && !trans_b) {
                t.acc(a, B * G.transpose());
                t.acc(b, A * G);
            } else {
                t.acc(a, B.transpose() * G.transpose());
                t.acc(b, G.transpose() * A.transpose());
            }
        });
    }

    int transpose(int a) {
        return emit(val(a).transpose(), [a](Tape& t, int self) { t.acc(a, t.grad_of(self).transpose()); });
    }

    // ---- nonlinearities ----

    int silu(int a) {
        const M& x = val(a);
        M sig = (T(1) / (T(1) + (-x.array()).exp())).matrix();
        M v   = x.cwiseProduct(sig);
        return emit(std::move(v), [a, sig](Tape& t, int self) {
            const M& x = t.val(a);
            M d = (sig.array() * (T(1) + x.array() * (T(1) - sig.array()))).matrix();
            t.acc(a, t.grad_of(self).cwiseProduct(d));
        });
    }

    int sigmoid(int a) {
        M v = (T(1) / (T(1) + (-val(a).array()).exp())).matrix();
        return emit(std::move(v), [a](Tape& t, int self) {
            const M& y = t.val(self);
            t.acc(a, t.grad_of(self).cwiseProduct((y.array() * (T(1) - y.array())).matrix()));
        });
    }

    // softmax over each row, with an optional additive constant mask applied
    // to the logits first (entries 0 or -inf). A row with every entry masked
    // is a caller error and throws.
    int softmax_rows(int a, const M* additive_mask = nullptr) {
        M logits = val(a);
        if (additive_mask) {
            if (additive_mask->rows() != logits.rows() || additive_mask->cols() != logits.cols())
                throw ShapeError("softmax_rows: mask shape mismatch");
            logits += *additive_mask;
        }
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            T row_max = -std::numeric_limits<T>::infinity();
            for (Eigen::Index j = 0; j < logits.cols(); ++j) row_max = std::max(row_max, logits(i, j));
            if (std::isinf(static_cast<double>(row_max)))
                throw ParamError("softmax_rows: every entry of row " + std::to_string(i) + " is masked");
            T sum = T(0);
            for (Eigen::Index j = 0; j < logits.cols(); ++j) {
                T e = std::exp(logits(i, j) - row_max);  // exp(-inf) == 0 exactly
                logits(i, j) = e;
                sum += e;
            }
            for (Eigen::Index j = 0; j < logits.cols(); ++j) logits(i, j) /= sum;
        }
        return emit(std::move(logits), [a](Tape& t, int self) {
            const M& y  = t.val(self);
            M gy        = t.grad_of(self).cwiseProduct(y);
            VecT<T> dot = gy.rowwise().sum();
            t.acc(a, gy - y.cwiseProduct(dot.replicate(1, y.cols()).eval()));
        });
    }

    // per-row layer norm with learned gain/bias (1 x cols nodes)
    int layernorm_rows(int a, int gain, int bias, T eps = T(1e-5)) {
        const M& x = val(a);
        if (val(gain).cols() != x.cols() || val(bias).cols() != x.cols())
            throw ShapeError("layernorm_rows: gain/bias must be 1 x cols");
        const int cols  = static_cast<int>(x.cols());
        VecT<T> mean    = x.rowwise().mean();
        M centered      = x - mean.replicate(1, cols);
        VecT<T> var     = centered.array().square().matrix().rowwise().mean();
        VecT<T> inv_std = (var.array() + eps).rsqrt();
        M xhat          = centered.cwiseProduct(inv_std.replicate(1, cols).eval());
        M v             = xhat;
        v.array().rowwise() *= val(gain).row(0).array();
        v.rowwise() += val(bias).row(0);
        return emit(std::move(v), [a, gain, bias, xhat, inv_std, cols](Tape& t, int self) {
            M gxhat = t.grad_of(self);
            gxhat.array().rowwise() *= t.val(gain).row(0).array();
            VecT<T> sum_g  = gxhat.rowwise().sum();
            VecT<T> sum_gx = gxhat.cwiseProduct(xhat).rowwise().sum();
            M dx = gxhat;
            dx -= (sum_g / T(cols)).replicate(1, cols).eval();
            dx -= xhat.cwiseProduct((sum_gx / T(cols)).replicate(1, cols).eval());
            dx = dx.cwiseProduct(inv_std.replicate(1, cols).eval());
            t.acc(a, dx);
            t.acc(gain, t.grad_of(self).cwiseProduct(xhat).colwise().sum());
            t.acc(bias, t.grad_of(self).colwise().sum());
        });
    }

    // rows of `a` scaled/shifted per sample block: rows [b*block, (b+1)*block)
    // use row b of scale/shift; computes a .* (1 + scale_b) + shift_b
    int film(int a, int scale_rows, int shift_rows, int block) {
        const M& x = val(a);
        const M& s = val(scale_rows);
        const M& h = val(shift_rows);
        if (block <= 0 || x.rows() % block != 0) throw ShapeError("film: rows not divisible by block");
        const int batch = static_cast<int>(x.rows()) / block;
        if (s.rows() != batch || h.rows() != batch || s.cols() != x.cols() || h.cols() != x.cols())
            throw ShapeError("film: scale/shift must be batch x cols");
        M v(x.rows(), x.cols());
        for (int b = 0; b < batch; ++b)
            for (int r = 0; r < block; ++r)
                v.row(b * block + r) =
                    x.row(b * block + r).cwiseProduct(s.row(b)) + x.row(b * block + r) + h.row(b);
        return emit(std::move(v), [a, scale_rows, shift_rows, block, batch](Tape& t, int self) {
            const M& x = t.val(a);
            const M& s = t.val(scale_rows);
            const M& g = t.grad_of(self);
            M dx(x.rows(), x.cols());
            M ds = M::Zero(batch, x.cols());
            M dh = M::Zero(batch, x.cols());
            for (int b = 0; b < batch; ++b) {
                for (int r = 0; r < block; ++r) {
                    dx.row(b * block + r) = g.row(b * block + r).cwiseProduct(s.row(b)) + g.row(b * block + r);
                    ds.row(b) += g.row(b * block + r).cwiseProduct(x.row(b * block + r));
                    dh.row(b) += g.row(b * block + r);
                }
            }
            t.acc(a, dx);
            t.acc(scale_rows, ds);
            t.acc(shift_rows, dh);
        });
    }

    // ---- structure ops ----

    int slice_rows(int a, int begin, int count) {
        if (begin < 0 || begin + count > val(a).rows()) throw ShapeError("slice_rows: out of range");
        return emit(val(a).middleRows(begin, count), [a, begin, count](Tape& t, int self) {
            M g = M::Zero(t.val(a).rows(), t.val(a).cols());
            g.middleRows(begin, count) = t.grad_of(self);
            t.acc(a, g);
        });
    }

    int slice_cols(int a, int begin, int count) {
        if (begin < 0 || begin + count > val(a).cols()) throw ShapeError("slice_cols: out of range");
        return emit(val(a).middleCols(begin, count), [a, begin, count](Tape& t, int self) {
            M g = M::Zero(t.val(a).rows(), t.val(a).cols());
            g.middleCols(begin, count) = t.grad_of(self);
            t.acc(a, g);
        });
    }

    int concat_rows(const std::vector<int>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows: no parts");
        Eigen::Index cols = val(parts[0]).cols(), rows = 0;
        for (int p : parts) {
            if (val(p).cols() != cols) throw ShapeError("concat_rows: column mismatch");
            rows += val(p).rows();
        }
        M v(rows, cols);
        Eigen::Index r = 0;
        for (int p : parts) {
            v.middleRows(r, val(p).rows()) = val(p);
            r += val(p).rows();
        }
        return emit(std::move(v), [parts](Tape& t, int self) {
            Eigen::Index r = 0;
            for (int p : parts) {
                t.acc(p, t.grad_of(self).middleRows(r, t.val(p).rows()));
                r += t.val(p).rows();
            }
        });
    }

    int concat_cols(const std::vector<int>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no parts");
        Eigen::Index rows = val(parts[0]).rows(), cols = 0;
        for (int p : parts) {
            if (val(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
            cols += val(p).cols();
        }
        M v(rows, cols);
        Eigen::Index c = 0;
        for (int p : parts) {
            v.middleCols(c, val(p).cols()) = val(p);
            c += val(p).cols();
        }
        return emit(std::move(v), [parts](Tape& t, int self) {
            Eigen::Index c = 0;
            for (int p : parts) {
                t.acc(p, t.grad_of(self).middleCols(c, t.val(p).cols()));
                c += t.val(p).cols();
            }
        });
    }

    // out row i = a row indices[i]; index -1 yields a zero row
    int gather_rows(int a, std::vector<int> indices) {
        M v = M::Zero(static_cast<Eigen::Index>(indices.size()), val(a).cols());
        for (size_t i = 0; i < indices.size(); ++i)
            if (indices[i] >= 0) v.row(static_cast<Eigen::Index>(i)) = val(a).row(indices[i]);
        return emit(std::move(v), [a, indices = std::move(indices)](Tape& t, int self) {
            M g = M::Zero(t.val(a).rows(), t.val(a).cols());
            for (size_t i = 0; i < indices.size(); ++i)
                if (indices[i] >= 0) g.row(indices[i]) += t.grad_of(self).row(static_cast<Eigen::Index>(i));
            t.acc(a, g);
        });
    }

    // im2col for square convolutions on (batch*h*w) x c inputs: each output
    // row concatenates the k*k zero-padded neighbor rows; oh = h/stride.
    // pad < 0 selects same-padding (k-1)/2; pad = 0 gives exact tiling for
    // patch embedding (stride == k).
    int im2col(int a, int batch, int h, int w, int k, int stride, int pad_arg = -1) {
        const M& x = val(a);
        if (x.rows() != static_cast<Eigen::Index>(batch) * h * w) throw ShapeError("im2col: row count mismatch");
        const int c   = static_cast<int>(x.cols());
        const int oh  = h / stride, ow = w / stride;
        const int pad = pad_arg < 0 ? (k - 1) / 2 : pad_arg;
        std::vector<int> idx(static_cast<size_t>(batch) * oh * ow * k * k);
        size_t p = 0;
        for (int b = 0; b < batch; ++b)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            int sy   = oy * stride + ky - pad;
                            int sx   = ox * stride + kx - pad;
                            idx[p++] = (sy < 0 || sy >= h || sx < 0 || sx >= w) ? -1 : (b * h + sy) * w + sx;
                        }
        M v = M::Zero(static_cast<Eigen::Index>(batch) * oh * ow, static_cast<Eigen::Index>(k) * k * c);
        p   = 0;
        for (Eigen::Index r = 0; r < v.rows(); ++r)
            for (int q = 0; q < k * k; ++q, ++p)
                if (idx[p] >= 0) v.block(r, static_cast<Eigen::Index>(q) * c, 1, c) = x.row(idx[p]);
        return emit(std::move(v), [a, idx = std::move(idx), k, c](Tape& t, int self) {
            M g = M::Zero(t.val(a).rows(), t.val(a).cols());
            const M& G = t.grad_of(self);
            size_t p = 0;
            for (Eigen::Index r = 0; r < G.rows(); ++r)
                for (int q = 0; q < k * k; ++q, ++p)
                    if (idx[p] >= 0) g.row(idx[p]) += G.block(r, static_cast<Eigen::Index>(q) * c, 1, c);
            t.acc(a, g);
        });
    }

    // nearest-neighbor spatial upsample by 2 on (batch*h*w) x c rows
    int upsample2x(int a, int batch, int h, int w) {
        if (val(a).rows() != static_cast<Eigen::Index>(batch) * h * w)
            throw ShapeError("upsample2x: row count mismatch");
        std::vector<int> idx(static_cast<size_t>(batch) * h * 2 * w * 2);
        size_t p = 0;
        for (int b = 0; b < batch; ++b)
            for (int y = 0; y < 2 * h; ++y)
                for (int x = 0; x < 2 * w; ++x) idx[p++] = (b * h + y / 2) * w + x / 2;
        return gather_rows(a, std::move(idx));
    }

    // ---- losses (1x1 result nodes) ----

    int mse(int a, const M& target) {
        if (target.rows() != val(a).rows() || target.cols() != val(a).cols())
            throw ShapeError("mse: target shape mismatch");
        M diff = val(a) - target;
        M v(1, 1);
        v(0, 0) = diff.array().square().mean();
        return emit(std::move(v), [a, diff](Tape& t, int self) {
            T scale = t.grad_of(self)(0, 0) * T(2) / T(diff.size());
            t.acc(a, diff * scale);
        });
    }

    // summed softmax cross entropy; a row weight of 0 obscures the row
    // completely (no loss term, no gradient)
    int cross_entropy_logits(int a, std::vector<int> labels, std::vector<T> row_weights) {
        const M& x = val(a);
        if (static_cast<Eigen::Index>(labels.size()) != x.rows() || row_weights.size() != labels.size())
            throw ShapeError("cross_entropy_logits: one label and weight per row required");
        M probs = M::Zero(x.rows(), x.cols());
        T total = T(0);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            if (row_weights[i] == T(0)) continue;  // obscured
            if (labels[i] < 0 || labels[i] >= x.cols())
                throw ParamError("cross_entropy_logits: label " + std::to_string(labels[i]) +
                                 " outside class space of size " + std::to_string(x.cols()));
            T row_max = x.row(i).maxCoeff();
            T sum     = T(0);
            for (Eigen::Index j = 0; j < x.cols(); ++j) sum += std::exp(x(i, j) - row_max);
            total += row_weights[i] * (std::log(sum) + row_max - x(i, labels[i]));
            for (Eigen::Index j = 0; j < x.cols(); ++j) probs(i, j) = std::exp(x(i, j) - row_max) / sum;
        }
        M v(1, 1);
        v(0, 0) = total;
        return emit(std::move(v),
                    [a, labels = std::move(labels), row_weights = std::move(row_weights), probs](Tape& t, int self) {
                        M g = M::Zero(probs.rows(), probs.cols());
                        for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                            if (row_weights[i] == T(0)) continue;
                            g.row(i) = probs.row(i) * row_weights[i];
                            g(i, labels[i]) -= row_weights[i];
                        }
                        t.acc(a, g * t.grad_of(self)(0, 0));
                    });
    }

    // summed elementwise binary cross entropy with logits; row weight 0
    // obscures the row
    int bce_logits(int a, M targets, std::vector<T> row_weights) {
        const M& x = val(a);
        if (targets.rows() != x.rows() || targets.cols() != x.cols())
            throw ShapeError("bce_logits: target shape mismatch");
        if (static_cast<Eigen::Index>(row_weights.size()) != x.rows())
            throw ShapeError("bce_logits: one weight per row required");
        T total = T(0);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            if (row_weights[i] == T(0)) continue;
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                T z = x(i, j), y = targets(i, j);
                total += row_weights[i] * (std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::fabs(z))));
            }
        }
        M v(1, 1);
        v(0, 0) = total;
        return emit(std::move(v),
                    [a, targets = std::move(targets), row_weights = std::move(row_weights)](Tape& t, int self) {
                        const M& x = t.val(a);
                        M g = M::Zero(x.rows(), x.cols());
                        for (Eigen::Index i = 0; i < x.rows(); ++i) {
                            if (row_weights[i] == T(0)) continue;
                            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                                T sig   = T(1) / (T(1) + std::exp(-x(i, j)));
                                g(i, j) = row_weights[i] * (sig - targets(i, j));
                            }
                        }
                        t.acc(a, g * t.grad_of(self)(0, 0));
                    });
    }

    int sum_all(int a) {
        M v(1, 1);
        v(0, 0) = val(a).sum();
        return emit(std::move(v), [a](Tape& t, int self) {
            t.acc(a, M::Constant(t.val(a).rows(), t.val(a).cols(), t.grad_of(self)(0, 0)));
        });
    }

    int l2_normalize_rows(int a, T eps = T(1e-8)) {
        const M& x    = val(a);
        VecT<T> norms = (x.rowwise().norm().array() + eps).matrix();
        M y           = x.cwiseQuotient(norms.replicate(1, x.cols()).eval());
        return emit(std::move(y), [a, norms](Tape& t, int self) {
            const M& y  = t.val(self);
            VecT<T> dot = t.grad_of(self).cwiseProduct(y).rowwise().sum();
            M dx = (t.grad_of(self) - y.cwiseProduct(dot.replicate(1, y.cols()).eval()))
                       .cwiseQuotient(norms.replicate(1, y.cols()).eval());
            t.acc(a, dx);
        });
    }

    // ---- engine ----

    void backward(int loss) {
        if (val(loss).rows() != 1 || val(loss).cols() != 1)
            throw ShapeError("backward: loss must be a 1x1 node");
        for (auto& n : nodes_) n.grad = M::Zero(n.value.rows(), n.value.cols());
        nodes_[loss].grad(0, 0) = T(1);
        for (int i = size() - 1; i >= 0; --i)
            if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        M value;
        M grad;
        std::function<void(Tape&, int)> backward;
    };

    std::vector<Node> nodes_;

    int emit(M value, std::function<void(Tape&, int)> back) {
        nodes_.push_back({std::move(value), {}, std::move(back)});
        return size() - 1;
    }

    void acc(int id, const M& g) {
        if (nodes_[id].grad.size() == 0)
            nodes_[id].grad = M::Zero(nodes_[id].value.rows(), nodes_[id].value.cols());
        nodes_[id].grad += g;
    }

    void check_same_shape(int a, int b, const char* op) {
        if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
            throw ShapeError(std::string(op) + ": shape mismatch");
    }
};

}  // namespace synbind
