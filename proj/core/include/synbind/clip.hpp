#pragma once

#include <memory>
#include <string>
#include <vector>

#include "synbind/image.hpp"
#include "synbind/text_encoder.hpp"
#include "synbind/vit.hpp"

namespace synbind {

struct ClipConfig {
    TextEncoderConfig text;
    ViTConfig vision;
    float logit_scale_init = 14.f;
};

struct ClipTrainConfig {
    int steps        = 1500;
    int batch        = 48;
    float lr         = 1.5e-3f;
    uint64_t seed    = 1;
    int log_every    = 100;
};

// Contrastive image-text model at desk scale: a frozen copy of its text
// tower conditions the denoiser, its vision tower seeds the evaluation
// backbone, and the pooled cosine similarity is the whole-image /
// whole-caption alignment baseline.
class ClipModel {
public:
    ClipModel(const ClipConfig& cfg, uint64_t seed);

    const ClipConfig& config() const { return cfg_; }
    ParamStore<float>& store() { return *store_; }

    // pooled, L2-normalized embeddings
    Vec embed_image(const Image& img) const;
    Vec embed_text(const std::vector<int>& token_ids) const;
    float similarity(const Image& img, const std::vector<int>& token_ids) const;

    // one optimizer step over a batch of (image, caption tokens) pairs;
    // returns the batch loss
    float train_step(const std::vector<const Image*>& images,
                     const std::vector<const std::vector<int>*>& token_ids, AdamOptimizer<float>& opt);

    std::shared_ptr<TextEncoderHandle> frozen_text() const;

    void save(const std::string& dir) const;
    static ClipModel load(const std::string& dir);

private:
    ClipConfig cfg_;
    std::shared_ptr<ParamStore<float>> store_;
    std::shared_ptr<TextEncoder<float>> text_;
    std::shared_ptr<ViT<float>> vision_;
    Param<float>* logit_scale_ = nullptr;
};

}  // namespace synbind
