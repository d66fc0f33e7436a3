#pragma once

#include <deque>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "synbind/autodiff.hpp"
#include "synbind/errors.hpp"
#include "synbind/mat.hpp"
#include "synbind/rng.hpp"

namespace synbind {

template <class T>
struct Param {
    std::string name;
    MatT<T> w;
    MatT<T> g;     // accumulated gradient
    MatT<T> m, v;  // adam state

    void zero_grad() { g.setZero(); }
};

// Owns every parameter of a model; stable addresses, insertion order kept
// for serialization.
template <class T>
class ParamStore {
public:
    Param<T>* create(const std::string& name, int rows, int cols) {
        if (by_name_.count(name)) throw ParamError("duplicate parameter name: " + name);
        params_.push_back({});
        Param<T>& p = params_.back();
        p.name      = name;
        p.w         = MatT<T>::Zero(rows, cols);
        p.g         = MatT<T>::Zero(rows, cols);
        p.m         = MatT<T>::Zero(rows, cols);
        p.v         = MatT<T>::Zero(rows, cols);
        by_name_[name] = &p;
        return &p;
    }

    Param<T>* find(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    std::deque<Param<T>>& all() { return params_; }
    const std::deque<Param<T>>& all() const { return params_; }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += static_cast<size_t>(p.w.size());
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

    // flat float32 blob in insertion order
    std::vector<float> serialize() const {
        std::vector<float> out;
        out.reserve(scalar_count());
        for (const auto& p : params_)
            for (Eigen::Index i = 0; i < p.w.size(); ++i)
                out.push_back(static_cast<float>(p.w.data()[i]));
        return out;
    }

    void deserialize(const std::vector<float>& blob) {
        if (blob.size() != scalar_count())
            throw ShapeError("checkpoint blob has " + std::to_string(blob.size()) + " floats, model needs " +
                             std::to_string(scalar_count()));
        size_t off = 0;
        for (auto& p : params_)
            for (Eigen::Index i = 0; i < p.w.size(); ++i)
                p.w.data()[i] = static_cast<T>(blob[off++]);
    }

private:
    std::deque<Param<T>> params_;
    std::map<std::string, Param<T>*> by_name_;
};

// Binds persistent params to tape leaves for one forward pass and pulls
// accumulated gradients back after backward().
template <class T>
class Binder {
public:
    explicit Binder(Tape<T>& tape) : tape_(&tape) {}

    int operator()(Param<T>* p) {
        auto it = bound_.find(p);
        if (it != bound_.end()) return it->second;
        int id = tape_->input(p->w);
        bound_.emplace(p, id);
        order_.push_back({p, id});
        return id;
    }

    void pull_grads() {
        for (auto& [p, id] : order_) {
            const auto& g = tape_->grad_of(id);
            if (g.size() != 0) p->g += g;
        }
    }

private:
    Tape<T>* tape_;
    std::map<Param<T>*, int> bound_;
    std::vector<std::pair<Param<T>*, int>> order_;
};

struct TrainLogEntry {
    int step;
    float loss;
};

template <class T>
struct AdamOptimizer {
    T lr      = T(1e-3);
    T beta1   = T(0.9);
    T beta2   = T(0.999);
    T eps     = T(1e-8);
    long step = 0;

    void update(ParamStore<T>& store) {
        ++step;
        T bc1 = T(1) - std::pow(beta1, T(step));
        T bc2 = T(1) - std::pow(beta2, T(step));
        for (auto& p : store.all()) {
            p.m = beta1 * p.m + (T(1) - beta1) * p.g;
            p.v = beta2 * p.v + (T(1) - beta2) * p.g.cwiseProduct(p.g);
            MatT<T> mhat = p.m / bc1;
            MatT<T> vhat = p.v / bc2;
            p.w -= lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps).matrix());
            p.g.setZero();
        }
    }
};

// ------------------------------------------------------------------ layers

template <class T>
struct Linear {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true) {
        w = ps.create(name + ".w", in, out);
        T std = T(1) / std::sqrt(static_cast<T>(in));
        w->w  = randn_mat<T>(in, out, rng, std);
        if (bias) b = ps.create(name + ".b", 1, out);
    }

    int forward(Tape<T>& t, Binder<T>& bind, int x) const {
        int y = t.matmul(x, bind(w));
        if (b) y = t.add_rowvec(y, bind(b));
        return y;
    }
};

template <class T>
struct LayerNorm {
    Param<T>* gain = nullptr;
    Param<T>* bias = nullptr;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, int dim) {
        gain = ps.create(name + ".gain", 1, dim);
        bias = ps.create(name + ".bias", 1, dim);
        gain->w.setOnes();
    }

    int forward(Tape<T>& t, Binder<T>& bind, int x) const {
        return t.layernorm_rows(x, bind(gain), bind(bias));
    }
};

// Multi-head attention over one sample: query rows attend to key/value
// rows. `additive_mask` entries are 0 or -inf and are added to the raw
// q k^T logits before the 1/sqrt(d_head) scaling. When `avg_probs` is
// non-null the head-averaged attention probabilities are written there.
template <class T>
struct MultiheadAttention {
    Linear<T> wq, wk, wv, wo;
    int heads = 1;
    int dim   = 0;

    MultiheadAttention() = default;
    MultiheadAttention(ParamStore<T>& ps, const std::string& name, int dim_, int kv_dim, int heads_, Rng& rng)
        : heads(heads_), dim(dim_) {
        if (dim_ % heads_ != 0) throw ParamError("attention dim must divide heads");
        wq = Linear<T>(ps, name + ".wq", dim_, dim_, rng);
        wk = Linear<T>(ps, name + ".wk", kv_dim, dim_, rng);
        wv = Linear<T>(ps, name + ".wv", kv_dim, dim_, rng);
        wo = Linear<T>(ps, name + ".wo", dim_, dim_, rng);
    }

    int forward(Tape<T>& t, Binder<T>& bind, int q_in, int kv_in,
                const MatT<T>* additive_mask = nullptr, MatT<T>* avg_probs = nullptr) const {
        const int dh = dim / heads;
        int q = wq.forward(t, bind, q_in);
        int k = wk.forward(t, bind, kv_in);
        int v = wv.forward(t, bind, kv_in);
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<int> head_outs;
        if (avg_probs) *avg_probs = MatT<T>::Zero(t.val(q).rows(), t.val(k).rows());
        for (int h = 0; h < heads; ++h) {
            int qh = t.slice_cols(q, h * dh, dh);
            int kh = t.slice_cols(k, h * dh, dh);
            int vh = t.slice_cols(v, h * dh, dh);
            int logits = t.matmul(qh, kh, false, true);
            if (additive_mask) logits = t.add_const(logits, *additive_mask);
            logits    = t.scale(logits, inv_sqrt);
            int probs = t.softmax_rows(logits);
            if (avg_probs) *avg_probs += t.val(probs);
            head_outs.push_back(t.matmul(probs, vh));
        }
        if (avg_probs) *avg_probs /= static_cast<T>(heads);
        int cat = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
        return wo.forward(t, bind, cat);
    }
};

// Pre-norm transformer block (self-attention + MLP) over one sample.
template <class T>
struct TransformerBlock {
    LayerNorm<T> ln1, ln2;
    MultiheadAttention<T> attn;
    Linear<T> fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<T>& ps, const std::string& name, int dim, int heads, int mlp_mult, Rng& rng) {
        ln1  = LayerNorm<T>(ps, name + ".ln1", dim);
        attn = MultiheadAttention<T>(ps, name + ".attn", dim, dim, heads, rng);
        ln2  = LayerNorm<T>(ps, name + ".ln2", dim);
        fc1  = Linear<T>(ps, name + ".fc1", dim, dim * mlp_mult, rng);
        fc2  = Linear<T>(ps, name + ".fc2", dim * mlp_mult, dim, rng);
    }

    int forward(Tape<T>& t, Binder<T>& bind, int x, const MatT<T>* attn_mask = nullptr) const {
        int nx = ln1.forward(t, bind, x);
        int h  = attn.forward(t, bind, nx, nx, attn_mask);
        x      = t.add(x, h);
        int m = fc2.forward(t, bind, t.silu(fc1.forward(t, bind, ln2.forward(t, bind, x))));
        return t.add(x, m);
    }
};

template <class T>
struct Conv2d {
    Param<T>* w = nullptr;  // (k*k*cin) x cout
    Param<T>* b = nullptr;
    int k = 3, stride = 1, cin = 0, cout = 0;

    Conv2d() = default;
    Conv2d(ParamStore<T>& ps, const std::string& name, int cin_, int cout_, Rng& rng, int k_ = 3,
           int stride_ = 1)
        : k(k_), stride(stride_), cin(cin_), cout(cout_) {
        w     = ps.create(name + ".w", k_ * k_ * cin_, cout_);
        T std = T(1) / std::sqrt(static_cast<T>(k_ * k_ * cin_));
        w->w  = randn_mat<T>(k_ * k_ * cin_, cout_, rng, std);
        b     = ps.create(name + ".b", 1, cout_);
    }

    int forward(Tape<T>& t, Binder<T>& bind, int x, int batch, int h, int w_) const {
        int cols = t.im2col(x, batch, h, w_, k, stride);
        return t.add_rowvec(t.matmul(cols, bind(w)), bind(b));
    }
};

// sin/cos positional features for integer timesteps, rows ordered as given
template <class T>
MatT<T> sinusoidal_embedding(const std::vector<int>& steps, int dim) {
    MatT<T> out(static_cast<Eigen::Index>(steps.size()), dim);
    const int half = dim / 2;
    for (size_t i = 0; i < steps.size(); ++i) {
        for (int j = 0; j < half; ++j) {
            T freq = std::exp(T(-std::log(10000.0)) * T(j) / T(half));
            out(static_cast<Eigen::Index>(i), j)        = std::sin(T(steps[i]) * freq);
            out(static_cast<Eigen::Index>(i), half + j) = std::cos(T(steps[i]) * freq);
        }
        for (int j = 2 * half; j < dim; ++j) out(static_cast<Eigen::Index>(i), j) = T(0);
    }
    return out;
}

// additive causal mask: position i may attend to j <= i
template <class T>
MatT<T> causal_mask(int len) {
    MatT<T> m = MatT<T>::Zero(len, len);
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j) m(i, j) = -std::numeric_limits<T>::infinity();
    return m;
}

}  // namespace synbind
