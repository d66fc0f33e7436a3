#pragma once

#include <string>
#include <vector>

#include "synbind/nn.hpp"

namespace synbind {

struct ViTConfig {
    int image_size = 32;
    int patch      = 8;
    int dim        = 64;
    int heads      = 2;
    int layers     = 2;
    int mlp_mult   = 2;
    int joint_dim  = 64;

    int patches_per_side() const { return image_size / patch; }
    int patch_count() const { return patches_per_side() * patches_per_side(); }

    void validate() const {
        if (image_size % patch != 0) throw ParamError("vit: patch size must divide the image size");
        if (dim % heads != 0) throw ParamError("vit: heads must divide dim");
    }
};

// Small vision transformer over one image. The class embedding is a learned
// input token; callers may substitute a modified class embedding node
// (conditioning injections) without touching anything else.
template <class T>
class ViT {
public:
    ViT(const ViTConfig& cfg, ParamStore<T>& ps, Rng& rng, const std::string& prefix = "vision")
        : cfg_(cfg) {
        cfg.validate();
        patch_proj_ = Linear<T>(ps, prefix + ".patch_proj", cfg.patch * cfg.patch * 3, cfg.dim, rng);
        cls_        = ps.create(prefix + ".cls", 1, cfg.dim);
        cls_->w     = randn_mat<T>(1, cfg.dim, rng, T(0.02));
        pos_        = ps.create(prefix + ".pos", 1 + cfg.patch_count(), cfg.dim);
        pos_->w     = randn_mat<T>(1 + cfg.patch_count(), cfg.dim, rng, T(0.01));
        for (int l = 0; l < cfg.layers; ++l)
            blocks_.emplace_back(ps, prefix + ".block" + std::to_string(l), cfg.dim, cfg.heads, cfg.mlp_mult, rng);
        final_ln_ = LayerNorm<T>(ps, prefix + ".final_ln", cfg.dim);
        proj_     = Linear<T>(ps, prefix + ".proj", cfg.dim, cfg.joint_dim, rng, /*bias=*/false);
    }

    const ViTConfig& config() const { return cfg_; }
    Param<T>* class_embedding() const { return cls_; }

    // image_rows: (image_size^2) x 3 node for one image. Returns token
    // features (1 + patches) x dim after the final layer norm. When
    // cls_override >= 0 that 1 x dim node replaces the class embedding.
    int forward_features(Tape<T>& t, Binder<T>& bind, int image_rows, int cls_override = -1) const {
        int patches = t.im2col(image_rows, 1, cfg_.image_size, cfg_.image_size, cfg_.patch, cfg_.patch,
                               /*pad=*/0);
        int tokens  = patch_proj_.forward(t, bind, patches);
        int cls     = cls_override >= 0 ? cls_override : bind(cls_);
        int x       = t.concat_rows({cls, tokens});
        std::vector<int> pos_idx(1 + cfg_.patch_count());
        for (size_t i = 0; i < pos_idx.size(); ++i) pos_idx[i] = static_cast<int>(i);
        x = t.add(x, t.gather_rows(bind(pos_), pos_idx));
        for (const auto& b : blocks_) x = b.forward(t, bind, x);
        return final_ln_.forward(t, bind, x);
    }

    // pooled node (1 x joint_dim): projected class-token row
    int forward_pooled(Tape<T>& t, Binder<T>& bind, int image_rows) const {
        int feats = forward_features(t, bind, image_rows);
        return proj_.forward(t, bind, t.slice_rows(feats, 0, 1));
    }

private:
    ViTConfig cfg_;
    Linear<T> patch_proj_;
    Param<T>* cls_ = nullptr;
    Param<T>* pos_ = nullptr;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> final_ln_;
    Linear<T> proj_;
};

}  // namespace synbind
