#pragma once

#include <memory>
#include <vector>

#include "synbind/nn.hpp"
#include "synbind/syntax.hpp"

namespace synbind {

// Adapter contract for any frozen text encoder. Token ids include the
// trailing sentence-end token; the returned matrix has one row per token
// (no padding rows) and reports which row is the end-of-text embedding.
// A pretrained CLIP-style encoder can be wrapped behind this interface
// without touching the rest of the pipeline.
struct TokenEmbeddings {
    Mat rows;          // len x dim
    int eos_row = -1;  // index of the end-of-text row
};

class TextEncoderHandle {
public:
    virtual ~TextEncoderHandle() = default;
    virtual int dim() const = 0;
    virtual int max_tokens() const = 0;
    // per-token embeddings for conditioning (end-of-text row kept)
    virtual TokenEmbeddings encode(const std::vector<int>& token_ids) const = 0;
    // single pooled embedding (used for object names and similarity scoring)
    virtual Vec pooled(const std::vector<int>& token_ids) const = 0;
};

struct TextEncoderConfig {
    int vocab_size = 0;
    int dim        = 64;
    int heads      = 2;
    int layers     = 2;
    int mlp_mult   = 2;
    int max_len    = 32;
    int joint_dim  = 64;  // projection target for the contrastive space
};

// Causal transformer text tower. Token features come from the final layer
// norm; the pooled embedding is the projected end-of-text row.
template <class T>
class TextEncoder {
public:
    TextEncoder(const TextEncoderConfig& cfg, ParamStore<T>& ps, Rng& rng, const std::string& prefix = "text")
        : cfg_(cfg) {
        tok_emb_ = ps.create(prefix + ".tok_emb", cfg.vocab_size, cfg.dim);
        tok_emb_->w = randn_mat<T>(cfg.vocab_size, cfg.dim, rng, T(0.02));
        pos_emb_ = ps.create(prefix + ".pos_emb", cfg.max_len, cfg.dim);
        pos_emb_->w = randn_mat<T>(cfg.max_len, cfg.dim, rng, T(0.01));
        for (int l = 0; l < cfg.layers; ++l)
            blocks_.emplace_back(ps, prefix + ".block" + std::to_string(l), cfg.dim, cfg.heads, cfg.mlp_mult, rng);
        final_ln_ = LayerNorm<T>(ps, prefix + ".final_ln", cfg.dim);
        proj_     = Linear<T>(ps, prefix + ".proj", cfg.dim, cfg.joint_dim, rng, /*bias=*/false);
    }

    const TextEncoderConfig& config() const { return cfg_; }

    // token features node (len x dim), final layer norm applied
    int forward_tokens(Tape<T>& t, Binder<T>& bind, const std::vector<int>& ids) const {
        if (ids.empty()) throw ParamError("text encoder: empty token sequence");
        if (static_cast<int>(ids.size()) > cfg_.max_len)
            throw ShapeError("text encoder: sequence of " + std::to_string(ids.size()) +
                             " tokens exceeds the positional table (" + std::to_string(cfg_.max_len) + ")");
        for (int id : ids)
            if (id < 0 || id >= cfg_.vocab_size)
                throw DataError("text encoder: token id " + std::to_string(id) + " outside the vocabulary");
        int x = t.gather_rows(bind(tok_emb_), ids);
        std::vector<int> pos_idx(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) pos_idx[i] = static_cast<int>(i);
        x = t.add(x, t.gather_rows(bind(pos_emb_), pos_idx));
        MatT<T> mask = causal_mask<T>(static_cast<int>(ids.size()));
        for (const auto& b : blocks_) x = b.forward(t, bind, x, &mask);
        return final_ln_.forward(t, bind, x);
    }

    // pooled node (1 x joint_dim): projected end-of-text row
    int forward_pooled(Tape<T>& t, Binder<T>& bind, const std::vector<int>& ids) const {
        int feats = forward_tokens(t, bind, ids);
        int eos   = t.slice_rows(feats, static_cast<int>(ids.size()) - 1, 1);
        return proj_.forward(t, bind, eos);
    }

private:
    TextEncoderConfig cfg_;
    Param<T>* tok_emb_ = nullptr;
    Param<T>* pos_emb_ = nullptr;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> final_ln_;
    Linear<T> proj_;
};

// Frozen float instantiation exposed through the adapter contract.
class FrozenTextEncoder : public TextEncoderHandle {
public:
    FrozenTextEncoder(std::shared_ptr<ParamStore<float>> store, std::shared_ptr<TextEncoder<float>> encoder)
        : store_(std::move(store)), encoder_(std::move(encoder)) {}

    int dim() const override { return encoder_->config().dim; }
    int max_tokens() const override { return encoder_->config().max_len; }

    TokenEmbeddings encode(const std::vector<int>& token_ids) const override {
        Tape<float> tape;
        Binder<float> bind(tape);
        int feats = encoder_->forward_tokens(tape, bind, token_ids);
        TokenEmbeddings out;
        out.rows    = tape.val(feats);
        out.eos_row = static_cast<int>(token_ids.size()) - 1;
        return out;
    }

    Vec pooled(const std::vector<int>& token_ids) const override {
        Tape<float> tape;
        Binder<float> bind(tape);
        int p = encoder_->forward_pooled(tape, bind, token_ids);
        return tape.val(p).row(0).transpose();
    }

    const TextEncoder<float>& encoder() const { return *encoder_; }

private:
    std::shared_ptr<ParamStore<float>> store_;
    std::shared_ptr<TextEncoder<float>> encoder_;
};

}  // namespace synbind
